"""Instance-retrieval evaluation engine and metric-learning numeric core.

Thin Python surface over the C++ library: distances, top-k, retrieval
metrics, k-reciprocal re-ranking, the training losses with exact gradients,
and the synthetic two-domain toy trainer.
"""

import json as _json

try:  # installed layout: the extension lives inside the package
    from . import _retkit as _impl
except ImportError:  # in-tree builds put _retkit on sys.path directly
    import _retkit as _impl

IoError = _impl.IoError
NumericError = _impl.NumericError
SynthConfig = _impl.SynthConfig
ToyEmbedder = _impl.ToyEmbedder
ValidationError = _impl.ValidationError
batch_hard_mine = _impl.batch_hard_mine
center_loss = _impl.center_loss
generate_synthetic = _impl.generate_synthetic
l2_normalize = _impl.l2_normalize
label_smoothed_ce = _impl.label_smoothed_ce
pairwise_distances = _impl.pairwise_distances
quadruplet_loss = _impl.quadruplet_loss
read_embeddings = _impl.read_embeddings
rerank_distances = _impl.rerank_distances
topk = _impl.topk
train_toy = _impl.train_toy
triplet_loss = _impl.triplet_loss
warmup_lr = _impl.warmup_lr
write_embeddings = _impl.write_embeddings

__version__ = "0.1.0"

__all__ = [
    "IoError", "NumericError", "SynthConfig", "ToyEmbedder", "ValidationError",
    "batch_hard_mine", "center_loss", "evaluate", "generate_synthetic", "gradcheck",
    "l2_normalize", "label_smoothed_ce", "pairwise_distances", "quadruplet_loss",
    "read_embeddings", "rerank_distances", "topk", "train_toy", "triplet_loss",
    "warmup_lr", "write_embeddings",
]


def evaluate(query_matrix, query_products, gallery_matrix, gallery_products, *,
             query_categories=(), gallery_categories=(), metric="euclidean",
             k_values=(1, 10, 20, 50), constrained=False, normalize=True):
    """Full evaluation pass; returns the metrics report as a dict."""
    return _json.loads(_impl.evaluate_json(
        query_matrix, query_products, list(query_categories),
        gallery_matrix, gallery_products, list(gallery_categories),
        metric, list(k_values), constrained, normalize))


def gradcheck(seed=1234, points=10, step=1e-4, tol=1e-4):
    """Finite-difference checks for all losses; returns a dict."""
    return _json.loads(_impl.gradcheck_json(seed, points, step, tol))
