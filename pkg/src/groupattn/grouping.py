"""Neighborhood construction: plain kNN and attention-fused re-selection.

Layer 1 always groups by coordinate kNN.  Deeper layers may combine the
current feature-space distances with the accumulated per-layer attention
weight matrices through a small fusion head, selecting the top-k most
relevant neighbors instead of the geometrically nearest ones.

Selection is discrete, so nothing in this module participates in the
gradient graph; fusion parameters are Tensors only so they live in
checkpoints and the optimizer alongside everything else.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear
from .validation import ConfigurationError

__all__ = [
    "pairwise_sq_dist",
    "lexicographic_ranks",
    "knn_select",
    "scatter_weight_matrix",
    "LayerWeightStack",
    "FusionHead",
    "fused_select",
]


def pairwise_sq_dist(x):
    """Squared Euclidean distances, (B, N, C) -> (B, N, N).

    Uses the |a|^2 + |b|^2 - 2ab expansion with negative clamping; the
    diagonal is forced to exact zero.
    """
    x = np.asarray(x)
    sq = np.einsum("bnc,bnc->bn", x, x)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(x, x.transpose(0, 2, 1))
    np.maximum(d, 0.0, out=d)
    n = x.shape[1]
    d[:, np.arange(n), np.arange(n)] = 0.0
    return d


def lexicographic_ranks(coords):
    """Rank of each point under (x, y, z) lexicographic order, per sample.

    Used as a permutation-stable tie-break key for top-k selection; points
    with identical coordinates fall back to input order.
    """
    coords = np.asarray(coords)
    b, n, _ = coords.shape
    ranks = np.empty((b, n), dtype=np.int64)
    arange = np.arange(n)
    for i in range(b):
        order = np.lexsort((coords[i, :, 2], coords[i, :, 1], coords[i, :, 0]))
        ranks[i, order] = arange
    return ranks


def _topk_with_ties(dist, k, tie_ranks):
    """Smallest-k column indices per row, ties broken by rank then index."""
    b, n, _ = dist.shape
    if tie_ranks is None:
        return np.argsort(dist, axis=2, kind="stable")[:, :, :k]
    order = np.argsort(tie_ranks, axis=1, kind="stable")  # candidates in rank order
    order_b = np.broadcast_to(order[:, None, :], (b, n, n))
    permuted = np.take_along_axis(dist, order_b, axis=2)
    pos = np.argsort(permuted, axis=2, kind="stable")[:, :, :k]
    return np.take_along_axis(order_b, pos, axis=2)


def knn_select(dist, k, tie_ranks=None):
    """k nearest non-self columns per row of a (B, N, N) distance matrix."""
    b, n, n2 = dist.shape
    if n != n2:
        raise ConfigurationError(f"distance matrix must be square, got {dist.shape}")
    if k >= n:
        raise ConfigurationError(f"k={k} must be smaller than point count {n}")
    d = dist.copy()
    d[:, np.arange(n), np.arange(n)] = np.inf
    return _topk_with_ties(d, k, tie_ranks)


def scatter_weight_matrix(alpha, nbr, reducer, valid=None):
    """Reduce per-pair attention channels to scalars and scatter to (B, N, N).

    alpha: Tensor (B, N, g, D); nbr: int (B, N, g) column index per member,
    -1 marking members with no real column (injected noise points), which are
    dropped.  All non-neighbor entries of the result are exactly zero.

    Returns (matrix (B, N, N) float, mask (B, N, N) bool of filled positions).
    """
    b, n, g, d = alpha.shape
    if nbr.shape != (b, n, g):
        raise ConfigurationError(
            f"alpha members {alpha.shape[:3]} and neighbor index {nbr.shape} disagree"
        )
    scalars = reducer(alpha)  # (B, N, g, 1), recorded on the tape
    vals = scalars.data.reshape(b, n, g)
    keep = nbr >= 0 if valid is None else (valid & (nbr >= 0))
    mat = np.zeros((b, n, n), dtype=vals.dtype)
    mask = np.zeros((b, n, n), dtype=bool)
    bb, ii, _ = np.nonzero(keep)
    cols = nbr[keep]
    mat[bb, ii, cols] = vals[keep]
    mask[bb, ii, cols] = True
    return mat, mask


class LayerWeightStack:
    """Zero-padded N x N attention-weight matrices, one channel per layer."""

    def __init__(self):
        self.mats = []
        self.masks = []

    @property
    def n_channels(self):
        return len(self.mats)

    def append(self, mat, mask):
        if self.mats and mat.shape != self.mats[0].shape:
            raise ConfigurationError(
                f"weight matrix shape {mat.shape} != existing {self.mats[0].shape}"
            )
        self.mats.append(mat)
        self.masks.append(mask)

    def standardized(self, eps=1e-8):
        """(B, N, N, L) with each channel standardized over its valid entries.

        Non-neighbor positions stay exactly zero so the fusion head sees
        'no relation' uniformly across scales.
        """
        out = []
        for mat, mask in zip(self.mats, self.masks):
            maskf = mask.astype(mat.dtype)
            count = np.maximum(maskf.sum(axis=(1, 2)), 1.0)[:, None, None]
            mean = (mat * maskf).sum(axis=(1, 2))[:, None, None] / count
            centered = (mat - mean) * maskf
            var = (centered * centered).sum(axis=(1, 2))[:, None, None] / count
            centered /= np.sqrt(var + eps)
            out.append(centered)
        return np.stack(out, axis=-1)


class FusionHead:
    """Maps per-pair channels [feat_dist || weight stack] to one distance.

    variant 'mlp': two layers with LeakyReLU in between (the default);
    variant 'affine_leaky': LeakyReLU on the channels, then one affine map.
    """

    VARIANTS = ("mlp", "affine_leaky")

    def __init__(self, in_channels, variant="mlp", hidden=16, rng=None,
                 dtype=np.float32):
        if variant not in self.VARIANTS:
            raise ConfigurationError(
                f"fusion variant {variant!r} not in {self.VARIANTS}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.in_channels = in_channels
        if variant == "mlp":
            self.lin1 = Linear(in_channels, hidden, rng, dtype)
            self.lin2 = Linear(hidden, 1, rng, dtype)
        else:
            self.lin1 = Linear(in_channels, 1, rng, dtype)
            self.lin2 = None

    def apply_np(self, channels):
        """(B, N, N, C) -> (B, N, N) combined distance, computed off-tape."""
        b, n, _, c = channels.shape
        if c != self.in_channels:
            raise ConfigurationError(
                f"fusion head expects {self.in_channels} channels, got {c}"
            )
        flat = channels.reshape(-1, c)
        dt = channels.dtype.type

        def lrelu(h):
            fact = (h > 0).astype(h.dtype)
            fact *= dt(0.8)
            fact += dt(0.2)
            h *= fact
            return h

        if self.variant == "mlp":
            h = flat @ self.lin1.W.data
            h += self.lin1.b.data
            out = lrelu(h) @ self.lin2.W.data
            out += self.lin2.b.data
        else:
            out = lrelu(flat.copy()) @ self.lin1.W.data
            out += self.lin1.b.data
        return out.reshape(b, n, n)

    def params(self, prefix):
        out = self.lin1.params(f"{prefix}.lin1")
        if self.lin2 is not None:
            out.update(self.lin2.params(f"{prefix}.lin2"))
        return out

    @classmethod
    def feature_distance_identity(cls, in_channels, dtype=np.float32):
        """A head whose output copies channel 0 (nonnegative inputs)."""
        head = cls(in_channels, variant="mlp", hidden=2,
                   rng=np.random.default_rng(0), dtype=dtype)
        w1 = np.zeros((in_channels, 2), dtype=dtype)
        w1[0, 0] = 1.0
        head.lin1.W = Tensor(w1, requires_grad=True, dtype=dtype)
        head.lin1.b = Tensor(np.zeros(2), requires_grad=True, dtype=dtype)
        w2 = np.zeros((2, 1), dtype=dtype)
        w2[0, 0] = 1.0
        head.lin2.W = Tensor(w2, requires_grad=True, dtype=dtype)
        head.lin2.b = Tensor(np.zeros(1), requires_grad=True, dtype=dtype)
        return head


def fused_select(feat_dist, stack, fusion, k, tie_ranks=None):
    """Top-k neighbors under the fused distance (layers >= 2 only).

    Layer 1 has no weight stack yet and must use plain knn_select.
    """
    if stack.n_channels < 1:
        raise ConfigurationError(
            "fused_select needs at least one weight-matrix channel; "
            "layer 1 uses knn_select"
        )
    expected = 1 + stack.n_channels
    if fusion.in_channels != expected:
        raise ConfigurationError(
            f"fusion head has {fusion.in_channels} input channels but "
            f"[feat_dist || stack] provides {expected}"
        )
    channels = np.concatenate(
        [feat_dist[..., None], stack.standardized().astype(feat_dist.dtype)], axis=-1
    )
    combined = fusion.apply_np(channels)
    n = combined.shape[1]
    combined[:, np.arange(n), np.arange(n)] = np.inf
    return _topk_with_ties(combined, k, tie_ranks)
