"""Synthetic trigger/action corpus generator.

Produces utterance -> meaning-representation pairs in an automation-recipe
syntax: ``channel-function-(arg(value) ...) THEN channel-function-(...)``.
The generator supports three controllable difficulty knobs:

* ambiguity: surface forms with two valid readings (e.g. "9 oclock" can
  mean 9am or 9pm), sampled into every split so a trained parser is
  genuinely uncertain on them;
* label noise: corrupted gold MRs on held-out examples;
* OOV injection: nonce words spliced into held-out utterances.

Training data is kept free of label noise and nonce words so held-out
accuracy drops on the corrupted items, which gives downstream confidence
models a target with real variance. All generation is deterministic under
the grammar seed.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .nncore import RngStream, derive_seed

ASCII_LETTERS = "abcdefghijklmnopqrstuvwxyz"

TAG_AMBIGUOUS = "ambiguous"
TAG_NOISY = "noisy"
TAG_OOV = "oov"


# ---------------------------------------------------------------------------
# grammar
# ---------------------------------------------------------------------------


@dataclass
class GrammarSpec:
    """Declarative description of the corpus grammar.

    ``triggers`` and ``actions`` are clause templates with ``{slot}``
    placeholders in both the surface string and the MR string; ``slots``
    maps each placeholder to an inventory name. ``frames`` glue one trigger
    and one action into a full utterance. ``ambiguity_sets`` are trigger
    templates whose surface admits two or more distinct MRs.
    """

    triggers: list[dict]
    actions: list[dict]
    frames: list[str]
    inventories: dict[str, list[str]]
    ambiguity_sets: list[dict]
    ambiguity_rate: float
    noise_rate: float
    oov_rate: float
    seed: int
    version: str = "g1"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarSpec":
        return cls(**d)

    def validate(self) -> None:
        """Raise ValueError on any internal inconsistency."""
        for rate, name in ((self.ambiguity_rate, "ambiguity_rate"),
                           (self.noise_rate, "noise_rate"),
                           (self.oov_rate, "oov_rate")):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {rate}")
        if not self.triggers or not self.actions or not self.frames:
            raise ValueError("grammar needs at least one trigger, action, and frame")
        for frame in self.frames:
            if "{trigger}" not in frame or "{action}" not in frame:
                raise ValueError(f"frame {frame!r} must mention {{trigger}} and {{action}}")
        for clause in self.triggers + self.actions:
            self._check_clause(clause["surface"], [clause["mr"]], clause["slots"])
        for amb in self.ambiguity_sets:
            if len(set(amb["mrs"])) < 2:
                raise ValueError(f"ambiguity set {amb['surface']!r} needs >= 2 distinct MRs")
            self._check_clause(amb["surface"], amb["mrs"], amb["slots"])

    def _check_clause(self, surface: str, mrs: list[str], slots: dict) -> None:
        placeholders = set(re.findall(r"\{(\w+)\}", surface))
        for mr in mrs:
            placeholders |= set(re.findall(r"\{(\w+)\}", mr))
        for name in placeholders:
            if name not in slots:
                raise ValueError(f"placeholder {{{name}}} in {surface!r} has no slot binding")
        for name, inventory in slots.items():
            if inventory not in self.inventories:
                raise ValueError(f"slot {name!r} refers to unknown inventory {inventory!r}")
            if not self.inventories[inventory]:
                raise ValueError(f"inventory {inventory!r} is empty")


def default_grammar(seed: int, ambiguity_rate: float = 0.15, noise_rate: float = 0.05,
                    oov_rate: float = 0.10) -> GrammarSpec:
    """Built-in smart-home grammar with one time-of-day ambiguity set."""
    inventories = {
        "conditions": ["rain", "snow", "hail", "fog", "thunder", "drizzle"],
        "people": ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"],
        "devices": ["door", "window", "camera", "charger", "printer", "router"],
        "states": ["on", "off"],
        "numbers": ["10", "15", "20", "30", "40", "50", "60", "70", "80", "90"],
        "rooms": ["kitchen", "bedroom", "office", "den"],
        "genres": ["jazz", "blues", "folk", "metal", "disco", "soul"],
        "words": ["hello", "alert", "reminder", "warning", "update", "ping",
                  "heads", "note", "urgent", "check"],
        "docs": ["journal", "ledger", "backlog", "diary", "notes"],
        "hours": ["1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12"],
        "meridiem": ["am", "pm"],
    }
    triggers = [
        {"surface": "it starts to {cond}",
         "mr": "weather-becomes-(kind({cond}))",
         "slots": {"cond": "conditions"}},
        {"surface": "the clock hits {hour} {mer}",
         "mr": "clock-at_hour-(hour({hour}{mer}))",
         "slots": {"hour": "hours", "mer": "meridiem"}},
        {"surface": "{person} sends me mail",
         "mr": "mail-arrives-(sender({person}))",
         "slots": {"person": "people"}},
        {"surface": "the {device} turns {state}",
         "mr": "home-device_state-(name({device}) value({state}))",
         "slots": {"device": "devices", "state": "states"}},
        {"surface": "the temperature passes {number}",
         "mr": "thermo-above-(degrees({number}))",
         "slots": {"number": "numbers"}},
    ]
    actions = [
        {"surface": "send me a note saying {word}",
         "mr": "notify-push-(text({word}))",
         "slots": {"word": "words"}},
        {"surface": "set the {room} lights to {number}",
         "mr": "lights-dim-(room({room}) level({number}))",
         "slots": {"room": "rooms", "number": "numbers"}},
        {"surface": "play some {genre} music",
         "mr": "music-start-(genre({genre}))",
         "slots": {"genre": "genres"}},
        {"surface": "log it to my {doc} file",
         "mr": "docs-append-(file({doc}))",
         "slots": {"doc": "docs"}},
        {"surface": "set the thermostat to {number}",
         "mr": "thermo-set-(degrees({number}))",
         "slots": {"number": "numbers"}},
    ]
    frames = [
        "if {trigger} then {action}",
        "whenever {trigger} {action}",
        "every time {trigger} i want you to {action}",
    ]
    # "9 oclock" is a valid way to say either 9am or 9pm.
    ambiguity_sets = [
        {"surface": "the clock hits {hour} oclock",
         "mrs": ["clock-at_hour-(hour({hour}am))", "clock-at_hour-(hour({hour}pm))"],
         "slots": {"hour": "hours"}},
    ]
    return GrammarSpec(triggers=triggers, actions=actions, frames=frames,
                       inventories=inventories, ambiguity_sets=ambiguity_sets,
                       ambiguity_rate=ambiguity_rate, noise_rate=noise_rate,
                       oov_rate=oov_rate, seed=seed)


# ---------------------------------------------------------------------------
# examples and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    utterance: str
    mr: str
    tags: tuple[str, ...] = ()


@dataclass
class CorpusSplit:
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


MIN_SIZES = (200, 50, 50)


def generate(spec: GrammarSpec, sizes: tuple[int, int, int] = (2000, 300, 300)) -> CorpusSplit:
    """Generate disjoint train/dev/test splits from a grammar.

    Label corruption and OOV injection apply to dev/test only; ambiguity
    applies everywhere so the parser sees both readings during training.
    """
    spec.validate()
    if len(sizes) != 3 or any(n < m for n, m in zip(sizes, MIN_SIZES)):
        raise ValueError(f"sizes must be >= {MIN_SIZES}, got {tuple(sizes)}")
    seen: set[tuple[str, str]] = set()
    splits = {}
    tags = {}
    for name, n in zip(("train", "dev", "test"), sizes):
        rng = RngStream(derive_seed(spec.seed, "corpus", name))
        corrupt = name != "train"
        splits[name], tags[name] = _generate_split(spec, n, rng, seen, corrupt)
    manifest = {
        "grammar_version": spec.version,
        "seed": spec.seed,
        "counts": {name: len(splits[name]) for name in splits},
        "grammar": spec.to_dict(),
        "tags": tags,
    }
    return CorpusSplit(train=splits["train"], dev=splits["dev"], test=splits["test"],
                       manifest=manifest)


def regenerate(manifest: dict) -> CorpusSplit:
    """Rebuild the exact corpus a manifest describes."""
    spec = GrammarSpec.from_dict(manifest["grammar"])
    counts = manifest["counts"]
    return generate(spec, (counts["train"], counts["dev"], counts["test"]))


def _generate_split(spec: GrammarSpec, n: int, rng: RngStream,
                    seen: set, corrupt: bool) -> tuple[list[Example], dict]:
    examples = []
    tag_index: dict[str, list[int]] = {TAG_AMBIGUOUS: [], TAG_NOISY: [], TAG_OOV: []}
    for i in range(n):
        ambiguous = bool(spec.ambiguity_sets) and rng.random() < spec.ambiguity_rate
        oov = corrupt and rng.random() < spec.oov_rate
        noisy = corrupt and rng.random() < spec.noise_rate
        for _ in range(500):
            utterance, mr, slot_words = _draw_example(spec, ambiguous, rng)
            if oov:
                utterance = _inject_nonce(utterance, slot_words, rng)
            if noisy:
                mr = _corrupt_mr(spec, mr, rng)
            key = (utterance, mr)
            if key not in seen:
                break
        else:
            raise ValueError("grammar space too small for the requested corpus size")
        seen.add(key)
        ex_tags = []
        for flag, tag in ((ambiguous, TAG_AMBIGUOUS), (noisy, TAG_NOISY), (oov, TAG_OOV)):
            if flag:
                ex_tags.append(tag)
                tag_index[tag].append(i)
        examples.append(Example(utterance=utterance, mr=mr, tags=tuple(ex_tags)))
    return examples, tag_index


def _pick(rng: RngStream, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _fill(template: str, bindings: dict[str, str]) -> str:
    out = template
    for name, value in bindings.items():
        out = out.replace("{" + name + "}", value)
    return out


def _draw_example(spec: GrammarSpec, ambiguous: bool,
                  rng: RngStream) -> tuple[str, str, list[str]]:
    if ambiguous:
        entry = _pick(rng, spec.ambiguity_sets)
        bindings = {name: _pick(rng, spec.inventories[inv])
                    for name, inv in entry["slots"].items()}
        trig_surface = _fill(entry["surface"], bindings)
        trig_mr = _fill(_pick(rng, entry["mrs"]), bindings)
    else:
        entry = _pick(rng, spec.triggers)
        bindings = {name: _pick(rng, spec.inventories[inv])
                    for name, inv in entry["slots"].items()}
        trig_surface = _fill(entry["surface"], bindings)
        trig_mr = _fill(entry["mr"], bindings)
    slot_words = [v for v in bindings.values()]

    action = _pick(rng, spec.actions)
    act_bindings = {name: _pick(rng, spec.inventories[inv])
                    for name, inv in action["slots"].items()}
    act_surface = _fill(action["surface"], act_bindings)
    act_mr = _fill(action["mr"], act_bindings)
    slot_words += list(act_bindings.values())

    frame = _pick(rng, spec.frames)
    utterance = frame.replace("{trigger}", trig_surface).replace("{action}", act_surface)
    mr = trig_mr + " THEN " + act_mr
    return utterance, mr, slot_words


def _inject_nonce(utterance: str, slot_words: list[str], rng: RngStream) -> str:
    """Replace one slot word (or any word) with a nonce token."""
    nonce = "zz" + "".join(_pick(rng, ASCII_LETTERS) for _ in range(5))
    tokens = utterance.split()
    candidates = [i for i, tok in enumerate(tokens) if tok in slot_words]
    if not candidates:
        candidates = list(range(len(tokens)))
    tokens[_pick(rng, candidates)] = nonce
    return " ".join(tokens)


def _corrupt_mr(spec: GrammarSpec, mr: str, rng: RngStream) -> str:
    """Swap one argument value for a different value from the value pool."""
    pool = sorted({v for inv in spec.inventories.values() for v in inv}
                  | {h + m for h in spec.inventories.get("hours", [])
                     for m in spec.inventories.get("meridiem", [])})
    spans = [(m.start(1), m.end(1), m.group(1)) for m in re.finditer(r"\(([a-z0-9_]+)\)", mr)]
    if not spans or len(pool) < 2:
        return mr
    start, end, old = _pick(rng, spans)
    for _ in range(100):
        new = _pick(rng, pool)
        if new != old:
            return mr[:start] + new + mr[end:]
    return mr


# ---------------------------------------------------------------------------
# tokenization and MR structure
# ---------------------------------------------------------------------------


def tokenize_utterance(utterance: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return utterance.lower().split()


def tokenize_mr(mr: str) -> list[str]:
    """Split an MR into head, paren, argument, and value tokens.

    ``weather-becomes-(kind(rain)) THEN notify-push-(text(hi))`` becomes
    ``["weather-becomes", "(", "kind", "(", "rain", ")", ")", "THEN", ...]``
    so the decoder vocabulary stays small while bracketing is explicit.
    """
    out: list[str] = []
    for piece in mr.split():
        if piece == "THEN":
            out.append(piece)
            continue
        for chunk in re.split(r"([()])", piece):
            if chunk == "":
                continue
            out.append(chunk[:-1] if chunk.endswith("-") else chunk)
    return out


def detokenize_mr(tokens: list[str]) -> str:
    """Inverse of tokenize_mr for well-formed token sequences."""
    parts: list[str] = []
    depth = 0
    for tok in tokens:
        if tok == "THEN":
            parts.append(" THEN ")
            depth = 0
        elif tok == "(":
            parts.append("(")
            depth += 1
        elif tok == ")":
            parts.append(")")
            depth -= 1
        else:
            if parts and parts[-1] == ")":
                parts.append(" ")
            # A head token (clause start) keeps its trailing dash before "(".
            parts.append(tok + "-" if depth == 0 and "-" in tok else tok)
    return "".join(parts)


def mr_productions(tokens: list[str]) -> list[tuple]:
    """Extract a production multiset from an MR token sequence.

    Tolerant of malformed sequences so predicted parses always yield a
    (possibly empty) production set: heads contribute ``(clause, "head", h)``
    and argument/value pairs contribute ``(clause, head, arg, value)``.
    """
    productions: list[tuple] = []
    clause = 0
    head = ""
    arg = ""
    for i, tok in enumerate(tokens):
        if tok == "THEN":
            clause += 1
            head = ""
            arg = ""
        elif tok in ("(", ")"):
            continue
        elif "-" in tok:
            head = tok
            productions.append((clause, "head", tok))
        elif i + 1 < len(tokens) and tokens[i + 1] == "(":
            arg = tok
        else:
            productions.append((clause, head, arg, tok))
    return productions


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save(split: CorpusSplit, path: str | Path) -> None:
    """Write train/dev/test TSVs plus a manifest.json sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        lines = []
        for ex in split.split(name):
            for val in (ex.utterance, ex.mr):
                if "\t" in val or "\n" in val or "\r" in val:
                    raise ValueError(f"field contains tab or newline: {val!r}")
            lines.append(f"{ex.utterance}\t{ex.mr}\n")
        (path / f"{name}.tsv").write_text("".join(lines), encoding="utf-8")
    (path / "manifest.json").write_text(json.dumps(split.manifest, indent=2) + "\n",
                                        encoding="utf-8")


def load(path: str | Path) -> CorpusSplit:
    """Read a corpus directory written by save."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    splits = {}
    for name in ("train", "dev", "test"):
        tags = manifest.get("tags", {}).get(name, {})
        splits[name] = _read_tsv(path / f"{name}.tsv", tags)
    return CorpusSplit(train=splits["train"], dev=splits["dev"], test=splits["test"],
                       manifest=manifest)


def _read_tsv(path: Path, tags: dict) -> list[Example]:
    text = path.read_text(encoding="utf-8").replace("\r\n", "\n")
    by_index: dict[int, list[str]] = {}
    for tag, indices in tags.items():
        for i in indices:
            by_index.setdefault(i, []).append(tag)
    examples = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ValueError(f"{path}:{lineno}: expected 2 tab-separated fields, "
                             f"got {len(fields)}")
        i = len(examples)
        ordered = [t for t in (TAG_AMBIGUOUS, TAG_NOISY, TAG_OOV) if t in by_index.get(i, [])]
        examples.append(Example(utterance=fields[0], mr=fields[1], tags=tuple(ordered)))
    return examples
