"""Neural semantic parser with confidence estimation and uncertainty interpretation.

The package trains a small attention-based encoder-decoder on a synthetic
utterance-to-meaning-representation corpus, extracts model / data / input
uncertainty metrics for each prediction, fits a gradient-tree-boosting
confidence scorer on held-out data, and attributes prediction uncertainty
back to input tokens by redistributing it through a traced forward pass.
"""

__version__ = "0.1.0"
