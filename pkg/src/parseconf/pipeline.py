"""Workspace pipeline: corpus -> train -> score -> eval -> interpret -> report.

Each stage reads its prerequisites from a workspace directory, verifies they
were produced under the active config hash, and writes its own artifacts with
that hash stamped in. Reruns under an identical config are byte-identical;
artifacts from a different config are refused rather than silently mixed.
"""

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import scorer as scorer_mod
from .config import RunConfig
from .evaluation import (
    EvalReport,
    bootstrap_delta_rho,
    coverage_curve,
    correlation_matrix,
    f1_detail,
    overlap_at_k,
    proxy_gold,
    smooth_coverage_curve,
    spearman,
)
from .interpret import attention_interpretation, backprop_interpretation
from .metrics import (
    RUN_DROPOUT,
    RUN_NOISE_ADD,
    RUN_NOISE_MUL,
    FeatureVector,
    assemble_features,
    decoding_entropy,
    fit_lm,
    schema_hash,
)
from .nncore import derive_seed
from .perturb import PerturbConfig, perturbed_passes
from .seq2seq import (
    Prediction,
    Seq2SeqModel,
    TrainConfig,
    beam_search,
    build_vocab,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

FEATURES_FORMAT = "features-v1"

ARTIFACTS = {
    "corpus": "corpus",
    "checkpoint": "model.json",
    "train_log": "train_log.json",
    "features_dev": "features_dev.json",
    "features_test": "features_test.json",
    "scorer": "scorer.json",
    "scorer_cv": "scorer_cv.json",
    "eval": "eval_report.json",
    "interpret": "interpret",
    "coverage_csv": "coverage.csv",
    "correlation_csv": "correlation.csv",
    "importance_csv": "importance.csv",
}

# Which command produces each artifact, for actionable error messages.
PRODUCER = {
    "corpus": "generate",
    "checkpoint": "train",
    "train_log": "train",
    "features_dev": "score",
    "features_test": "score",
    "scorer": "score",
    "scorer_cv": "score",
    "eval": "eval",
    "interpret": "interpret",
    "coverage_csv": "report",
    "correlation_csv": "report",
    "importance_csv": "report",
}


class PipelineError(RuntimeError):
    """A stage cannot run; the message names the fix."""


@dataclass(frozen=True)
class Workspace:
    """Directory holding every artifact of one configured run."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    def path(self, key: str) -> Path:
        return self.root / ARTIFACTS[key]

    def require(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise PipelineError(
                f"missing {ARTIFACTS[key]} under {self.root}; "
                f"run `parseconf {PRODUCER[key]}` first")
        return p


def _check_hash(cfg: RunConfig, found: str | None, what: str, producer: str) -> None:
    if found != cfg.hash():
        raise PipelineError(
            f"{what} carries config hash {found}, but the active config hashes "
            f"to {cfg.hash()}; rerun `parseconf {producer}` under this config")


def _json_hash(path: Path) -> str | None:
    return json.loads(path.read_text(encoding="utf-8")).get("config_hash")


# ---------------------------------------------------------------------------
# tokenized corpus access


def _pairs(examples) -> list[tuple[list[str], list[str]]]:
    return [(corpus_mod.tokenize_utterance(ex.utterance),
             corpus_mod.tokenize_mr(ex.mr)) for ex in examples]


def _load_corpus(cfg: RunConfig, ws: Workspace) -> corpus_mod.CorpusSplit:
    split = corpus_mod.load(ws.require("corpus"))
    _check_hash(cfg, split.manifest.get("config_hash"), "corpus", "generate")
    return split


# ---------------------------------------------------------------------------
# stages


def stage_generate(cfg: RunConfig, ws: Workspace) -> corpus_mod.CorpusSplit:
    """Generate the synthetic corpus and snapshot the effective config."""
    cfg.validate()
    ws.root.mkdir(parents=True, exist_ok=True)
    spec = corpus_mod.default_grammar(cfg.corpus.seed,
                                      ambiguity_rate=cfg.corpus.ambiguity_rate,
                                      noise_rate=cfg.corpus.noise_rate,
                                      oov_rate=cfg.corpus.oov_rate)
    split = corpus_mod.generate(spec, (cfg.corpus.train_size, cfg.corpus.dev_size,
                                       cfg.corpus.test_size))
    split.manifest["config_hash"] = cfg.hash()
    corpus_mod.save(split, ws.path("corpus"))
    cfg.save(ws.root / "config.toml")
    return split


def stage_train(cfg: RunConfig, ws: Workspace) -> Seq2SeqModel:
    """Fit the parser on the train split and checkpoint it."""
    split = _load_corpus(cfg, ws)
    train_pairs = _pairs(split.train)
    vocab = build_vocab(train_pairs, min_freq=cfg.model.min_freq)
    model = init_model(vocab, hidden=cfg.model.hidden, layers=cfg.model.layers,
                       seed=cfg.model.seed)
    log = train(model, train_pairs, _pairs(split.dev),
                TrainConfig(lr=cfg.train.lr, rms_decay=cfg.train.rms_decay,
                            dropout=cfg.train.dropout, epochs=cfg.train.epochs,
                            clip_norm=cfg.train.clip_norm, seed=cfg.train.seed))
    save_checkpoint(model, ws.path("checkpoint"),
                    extra={"config_hash": cfg.hash()})
    _dump_json(ws.path("train_log"),
               {"config_hash": cfg.hash(), "train_nll": log.train_nll,
                "dev_nll": log.dev_nll, "best_epoch": log.best_epoch})
    return model


def _load_model(cfg: RunConfig, ws: Workspace) -> Seq2SeqModel:
    path = ws.require("checkpoint")
    _check_hash(cfg, _json_hash(path), "checkpoint", "train")
    return load_checkpoint(path)


def _perturb_runs(cfg: RunConfig, model, q, ids, split: str, idx: int) -> dict:
    def seed(kind: str) -> int:
        return derive_seed(cfg.perturb.seed, split, idx, kind) % 2**32

    base = dict(passes=cfg.perturb.passes)
    return {
        RUN_DROPOUT: perturbed_passes(model, q, ids, PerturbConfig(
            kind="dropout", rate=cfg.perturb.dropout_rate,
            seed=seed("dropout"), **base)),
        RUN_NOISE_ADD: perturbed_passes(model, q, ids, PerturbConfig(
            kind="gaussian", mode="additive", sigma=cfg.perturb.sigma,
            seed=seed("noise_add"), **base)),
        RUN_NOISE_MUL: perturbed_passes(model, q, ids, PerturbConfig(
            kind="gaussian", mode="multiplicative", sigma=cfg.perturb.sigma,
            seed=seed("noise_mul"), **base)),
    }


def _extract_rows(cfg: RunConfig, model, lm, examples, split: str) -> list[dict]:
    rows = []
    for idx, ex in enumerate(examples):
        q = corpus_mod.tokenize_utterance(ex.utterance)
        gold = corpus_mod.tokenize_mr(ex.mr)
        beam = beam_search(model, q, beam_size=cfg.decode.beam)
        top = beam[0]
        runs = _perturb_runs(cfg, model, q, list(top.token_ids), split, idx)
        ent = decoding_entropy(model, q, samples=cfg.decode.entropy_samples,
                               seed=derive_seed(cfg.perturb.seed, split, idx,
                                                "entropy"))
        fv = assemble_features(q, top, runs, lm, beam, seq_entropy_mc=ent,
                               vocab=model.vocab, topk=cfg.decode.topk)
        score, fallback = f1_detail(top.tokens, gold)
        rows.append({
            "utterance": ex.utterance,
            "mr": ex.mr,
            "tags": list(ex.tags),
            "tokens": list(top.tokens),
            "token_ids": list(top.token_ids),
            "token_probs": [float(p) for p in top.token_probs],
            "attention": [[float(v) for v in row] for row in top.attention],
            "logprob": float(top.logprob),
            "finished": bool(top.finished),
            "f1": score,
            "f1_fallback": fallback,
            "features": fv.to_json_dict(),
        })
    return rows


def stage_score(cfg: RunConfig, ws: Workspace) -> scorer_mod.BoostedModel:
    """Extract features for dev and test, then fit the confidence scorer.

    The scorer is trained on the held-out dev split, never on the parser's
    training data, and model selection is by cross-validated Spearman
    correlation against per-example F1.
    """
    split = _load_corpus(cfg, ws)
    model = _load_model(cfg, ws)
    lm = fit_lm([corpus_mod.tokenize_utterance(ex.utterance) for ex in split.train],
                order=cfg.lm.order, smoothing=cfg.lm.smoothing)
    for name in ("dev", "test"):
        rows = _extract_rows(cfg, model, lm, split.split(name), name)
        _dump_json(ws.path(f"features_{name}"),
                   {"format": FEATURES_FORMAT, "config_hash": cfg.hash(),
                    "split": name, "schema_hash": schema_hash(),
                    "examples": rows})

    dev = _load_features(cfg, ws, "dev")
    fvs = [FeatureVector.from_json_dict(r["features"]) for r in dev]
    targets = [r["f1"] for r in dev]
    grid = [scorer_mod.ScorerConfig(n_trees=t, max_depth=d,
                                    subsample=cfg.scorer.subsample,
                                    learning_rate=cfg.scorer.learning_rate,
                                    lam=cfg.scorer.lam,
                                    cv_folds=cfg.scorer.cv_folds,
                                    seed=cfg.scorer.seed)
            for t in cfg.scorer.trees_grid for d in cfg.scorer.depth_grid]
    best_cfg, results = scorer_mod.cross_validate(fvs, targets, grid=grid,
                                                  folds=cfg.scorer.cv_folds,
                                                  seed=cfg.scorer.seed)
    fitted = scorer_mod.fit(fvs, targets, best_cfg)
    scorer_mod.save_model(fitted, ws.path("scorer"),
                          extra={"config_hash": cfg.hash()})
    _dump_json(ws.path("scorer_cv"),
               {"config_hash": cfg.hash(), "best": best_cfg.to_dict(),
                "results": [{"n_trees": t, "max_depth": d, "mean_rho": rho}
                            for (t, d), rho in results.items()]})
    return fitted


def _load_features(cfg: RunConfig, ws: Workspace, split: str) -> list[dict]:
    path = ws.require(f"features_{split}")
    blob = json.loads(path.read_text(encoding="utf-8"))
    if blob.get("format") != FEATURES_FORMAT:
        raise PipelineError(f"{path} is not a {FEATURES_FORMAT} file")
    _check_hash(cfg, blob.get("config_hash"), f"features_{split}", "score")
    if blob.get("schema_hash") != schema_hash():
        raise PipelineError(
            f"features_{split} uses feature schema {blob.get('schema_hash')}, "
            f"this build expects {schema_hash()}; rerun `parseconf score`")
    return blob["examples"]


def _load_scorer(cfg: RunConfig, ws: Workspace) -> scorer_mod.BoostedModel:
    path = ws.require("scorer")
    _check_hash(cfg, _json_hash(path), "scorer", "score")
    return scorer_mod.load_model(path)


def _restore_prediction(row: dict) -> Prediction:
    """Prediction from a features row.

    Per-step distributions are not persisted (their entropy summaries already
    live in the feature vector), so the restored object carries an empty
    distributions array; downstream interpretation never reads it.
    """
    probs = np.array(row["token_probs"], dtype=np.float64)
    return Prediction(tokens=list(row["tokens"]),
                      token_ids=list(row["token_ids"]),
                      distributions=np.empty((len(probs), 0)),
                      token_probs=probs,
                      attention=np.array(row["attention"], dtype=np.float64),
                      logprob=row["logprob"], beam_rank=0,
                      finished=row["finished"])


def _interpret_pair(cfg: RunConfig, model, row: dict, idx: int):
    """(backprop report, attention report) for one stored test example."""
    q = corpus_mod.tokenize_utterance(row["utterance"])
    pred = _restore_prediction(row)
    run = _perturb_runs(cfg, model, q, list(pred.token_ids), "test", idx)[RUN_DROPOUT]
    return (backprop_interpretation(model, q, pred, run),
            attention_interpretation(q, pred, run))


def stage_eval(cfg: RunConfig, ws: Workspace) -> EvalReport:
    """Correlations, coverage curve, and interpretation overlap on test."""
    split = _load_corpus(cfg, ws)
    model = _load_model(cfg, ws)
    fitted = _load_scorer(cfg, ws)
    rows = _load_features(cfg, ws, "test")

    fvs = [FeatureVector.from_json_dict(r["features"]) for r in rows]
    f1s = [r["f1"] for r in rows]
    conf = [scorer_mod.predict(fitted, fv) for fv in fvs]
    posterior = [fv.get("log_posterior") for fv in fvs]

    rho_conf, deg_conf = spearman(conf, f1s)
    rho_post, deg_post = spearman(posterior, f1s)
    delta, p_value = bootstrap_delta_rho(conf, posterior, f1s,
                                         iters=cfg.eval.bootstrap_iters,
                                         seed=cfg.eval.seed)

    thresholds = np.unique(np.quantile(
        conf, np.linspace(0.0, 1.0, cfg.eval.coverage_points)))
    points = sorted(coverage_curve(conf, f1s, thresholds=thresholds))
    smoothed = smooth_coverage_curve(points)

    overlaps = {"backprop": [], "attention": []}
    clamped = 0
    for idx, row in enumerate(rows):
        q = corpus_mod.tokenize_utterance(row["utterance"])
        pred = _restore_prediction(row)
        back, attn = _interpret_pair(cfg, model, row, idx)
        proxy = proxy_gold(model, q, pred, sigma=cfg.eval.proxy_sigma,
                           passes=cfg.eval.proxy_passes,
                           seed=derive_seed(cfg.eval.seed, "proxy", idx))
        for name, rep in (("backprop", back), ("attention", attn)):
            val, was_clamped = overlap_at_k(rep.u_hat, proxy, cfg.eval.overlap_k)
            overlaps[name].append(val)
            clamped += was_clamped

    labels, matrix, flags = correlation_matrix(fvs, f1s)
    report = EvalReport(
        f1_per_example=f1s,
        spearman_by_method={"conf": rho_conf, "posterior": rho_post},
        coverage=points,
        overlap_by_method={name: float(np.mean(vals)) if vals else 0.0
                           for name, vals in overlaps.items()},
        correlation_labels=labels,
        correlation=[[float(v) for v in r] for r in np.asarray(matrix)],
        correlation_flags=[[bool(v) for v in r] for r in np.asarray(flags)],
        extra={"config_hash": cfg.hash(),
               "conf_scores": [float(s) for s in conf],
               "posterior_scores": [float(s) for s in posterior],
               "spearman_degenerate": {"conf": deg_conf, "posterior": deg_post},
               "delta_rho": float(delta), "p_value": float(p_value),
               "bootstrap_iters": cfg.eval.bootstrap_iters,
               "coverage_smoothed": [list(pt) for pt in smoothed],
               "overlap_k": cfg.eval.overlap_k,
               "overlap_clamped": int(clamped),
               "overlap_per_example": {name: [float(v) for v in vals]
                                       for name, vals in overlaps.items()}})
    report.save(ws.path("eval"))
    return report


def stage_interpret(cfg: RunConfig, ws: Workspace) -> list[Path]:
    """Per-example uncertainty reports for the first test examples."""
    model = _load_model(cfg, ws)
    rows = _load_features(cfg, ws, "test")[:cfg.interpret.examples]
    out_dir = ws.path("interpret")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    index = []
    for idx, row in enumerate(rows):
        back, attn = _interpret_pair(cfg, model, row, idx)
        for rep in (back, attn):
            rep = dataclasses.replace(rep, extra={
                "config_hash": cfg.hash(), "example_index": idx,
                "utterance": row["utterance"]})
            path = out_dir / f"ex{idx:04d}_{rep.method}.json"
            rep.save(path)
            written.append(path)
            index.append(path.name)
    _dump_json(out_dir / "index.json",
               {"config_hash": cfg.hash(), "reports": index})
    return written


def stage_report(cfg: RunConfig, ws: Workspace) -> dict[str, Path]:
    """Plot-ready CSVs: coverage curve, correlation matrix, importance table."""
    report = _load_report(cfg, ws)
    fitted = _load_scorer(cfg, ws)
    stamp = f"# config_hash={cfg.hash()}\n"

    smoothed = {tuple(pt[:2]): pt[2] for pt in report.extra["coverage_smoothed"]}
    lines = [stamp, "threshold,coverage,f1,f1_smoothed\n"]
    for t, c, f in report.coverage:
        lines.append(f"{t!r},{c!r},{f!r},{smoothed[(t, c)]!r}\n")
    ws.path("coverage_csv").write_text("".join(lines), encoding="utf-8")

    labels = report.correlation_labels
    lines = [stamp, "label," + ",".join(labels) + "\n"]
    for label, row in zip(labels, report.correlation):
        lines.append(label + "," + ",".join(repr(float(v)) for v in row) + "\n")
    ws.path("correlation_csv").write_text("".join(lines), encoding="utf-8")

    importance = scorer_mod.feature_importance(fitted)
    order = sorted(importance, key=lambda name: (-importance[name], name))
    lines = [stamp, "feature,gain\n"]
    lines += [f"{name},{importance[name]!r}\n" for name in order]
    ws.path("importance_csv").write_text("".join(lines), encoding="utf-8")

    return {key: ws.path(key) for key in
            ("coverage_csv", "correlation_csv", "importance_csv")}


def _load_report(cfg: RunConfig, ws: Workspace) -> EvalReport:
    path = ws.require("eval")
    report = EvalReport.load(path)
    _check_hash(cfg, report.extra.get("config_hash"), "eval report", "eval")
    return report


STAGES = (("generate", stage_generate), ("train", stage_train),
          ("score", stage_score), ("eval", stage_eval),
          ("interpret", stage_interpret), ("report", stage_report))


def run_all(cfg: RunConfig, ws: Workspace) -> EvalReport:
    """Run every stage in order and return the evaluation report."""
    for _, fn in STAGES:
        fn(cfg, ws)
    return _load_report(cfg, ws)


# ---------------------------------------------------------------------------
# CSV re-parsing (round-trip checks and downstream tooling)


def _read_csv(path) -> tuple[str | None, list[str], list[list[str]]]:
    stamp = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            stamp = line.split("=", 1)[1] if "=" in line else None
            continue
        rows.append(line.split(","))
    return stamp, rows[0], rows[1:]


def parse_coverage_csv(path) -> tuple[str | None, list[tuple], list[tuple]]:
    """(config hash, raw curve points, smoothed curve points)."""
    stamp, header, rows = _read_csv(path)
    if header != ["threshold", "coverage", "f1", "f1_smoothed"]:
        raise ValueError(f"unexpected coverage CSV header {header}")
    raw = [(float(t), float(c), float(f)) for t, c, f, _ in rows]
    smoothed = [(float(t), float(c), float(s)) for t, c, _, s in rows]
    return stamp, raw, smoothed


def parse_correlation_csv(path) -> tuple[str | None, list[str], list[list[float]]]:
    """(config hash, labels, correlation matrix)."""
    stamp, header, rows = _read_csv(path)
    labels = header[1:]
    if [r[0] for r in rows] != labels:
        raise ValueError("correlation CSV rows and columns disagree")
    return stamp, labels, [[float(v) for v in r[1:]] for r in rows]


def parse_importance_csv(path) -> tuple[str | None, dict]:
    """(config hash, feature -> normalized gain)."""
    stamp, header, rows = _read_csv(path)
    if header != ["feature", "gain"]:
        raise ValueError(f"unexpected importance CSV header {header}")
    return stamp, {name: float(v) for name, v in rows}


def _dump_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
