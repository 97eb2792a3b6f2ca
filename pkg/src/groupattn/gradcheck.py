"""Finite-difference verification suites at op, layer, and full-model scope.

Everything runs in float64; the reported number per component is the max
relative error between the reverse-mode gradient and central differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, NeighborAttention, aggregate, attention_normalize
from .autodiff import Tensor, grad_check
from .backbone import Backbone, BackboneConfig
from .grouping import knn_select, lexicographic_ranks, pairwise_sq_dist
from .train import cross_entropy

__all__ = ["check_ops", "check_layer", "check_full", "run_scope", "TOLERANCE"]

TOLERANCE = 1e-4


def _rand(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True,
                  dtype=np.float64)


def _sq_sum(t):
    return ad.reduce_sum(ad.mul(t, t))


def check_ops(step=1e-5, seed=0):
    """Per-op worst relative error on bounded random float64 inputs."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC4EC, seed]))
    report = {}

    a = _rand(rng, 5, 4)
    b_fixed = Tensor(rng.uniform(-2, 2, (4, 3)), dtype=np.float64)
    report["matmul_lhs"] = grad_check(lambda t: _sq_sum(ad.matmul(t, b_fixed)), a, step)
    b = _rand(rng, 4, 3)
    a_fixed = Tensor(rng.uniform(-2, 2, (5, 4)), dtype=np.float64)
    report["matmul_rhs"] = grad_check(lambda t: _sq_sum(ad.matmul(a_fixed, t)), b, step)

    x = _rand(rng, 3, 7)
    report["softmax"] = grad_check(
        lambda t: _sq_sum(ad.softmax_over_axis(t, axis=1)), x, step)
    report["log_softmax"] = grad_check(
        lambda t: _sq_sum(ad.log_softmax_over_axis(t, axis=1)), x, step)

    # keep leaky_relu inputs away from the kink at 0
    lre = rng.uniform(0.1, 2.0, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5))
    xl = Tensor(lre, requires_grad=True, dtype=np.float64)
    report["leaky_relu"] = grad_check(lambda t: _sq_sum(ad.leaky_relu(t, 0.2)), xl, step)

    x = _rand(rng, 4, 6)
    other = Tensor(rng.uniform(-2, 2, (4, 6)), dtype=np.float64)
    row = Tensor(rng.uniform(-2, 2, (6,)), dtype=np.float64)
    report["add"] = grad_check(lambda t: _sq_sum(ad.add(t, other)), x, step)
    report["sub"] = grad_check(lambda t: _sq_sum(ad.sub(t, other)), x, step)
    report["mul"] = grad_check(lambda t: _sq_sum(ad.mul(t, other)), x, step)
    report["add_row_bias"] = grad_check(lambda t: _sq_sum(ad.add(t, row)), x, step)
    rb = Tensor(rng.uniform(-2, 2, (6,)), requires_grad=True, dtype=np.float64)
    xf = Tensor(rng.uniform(-2, 2, (4, 6)), dtype=np.float64)
    report["row_bias_grad"] = grad_check(lambda t: _sq_sum(ad.add(xf, t)), rb, step)
    report["scale"] = grad_check(lambda t: _sq_sum(ad.scale(t, -1.7)), x, step)

    report["concat"] = grad_check(
        lambda t: _sq_sum(ad.concat_last_axis(t, other)), x, step)
    report["reshape"] = grad_check(lambda t: _sq_sum(ad.reshape(t, (2, 12))), x, step)
    report["transpose"] = grad_check(lambda t: _sq_sum(ad.transpose(t)), x, step)

    src = _rand(rng, 6, 3)
    idx = np.array([4, 0, 2, 2, 5])
    report["gather_rows"] = grad_check(
        lambda t: _sq_sum(ad.gather_rows(t, idx)), src, step)
    vals = _rand(rng, 5, 3)
    report["scatter_rows"] = grad_check(
        lambda t: _sq_sum(ad.scatter_rows(t, idx, 8)), vals, step)

    x = _rand(rng, 3, 5, 4)
    report["reduce_sum"] = grad_check(
        lambda t: _sq_sum(ad.reduce_sum(t, axis=1)), x, step)
    report["reduce_mean"] = grad_check(
        lambda t: _sq_sum(ad.reduce_mean(t, axis=1)), x, step)
    # distinct values keep the argmax stable under the FD perturbation
    perm = rng.permutation(60).reshape(3, 5, 4) * 0.07 - 2.0
    xm = Tensor(perm, requires_grad=True, dtype=np.float64)
    report["reduce_max"] = grad_check(
        lambda t: _sq_sum(ad.reduce_max(t, axis=1)), xm, step)

    # sum(y^2) of a standardized column is nearly constant in x, which starves
    # the finite differences; probe with a fixed random projection instead
    x = _rand(rng, 4, 6)
    w = Tensor(rng.uniform(-2, 2, (4, 6)), dtype=np.float64)
    report["standardize"] = grad_check(
        lambda t: ad.reduce_sum(ad.mul(ad.standardize_over_axis(t, axis=0), w)),
        x, step)
    return report


def _layer_setup(seed=0, n=16, k=4, d=8, heads=2):
    rng = np.random.default_rng(np.random.SeedSequence([0x14E4, seed]))
    coords = rng.uniform(-1, 1, (1, n, 3))
    nbr = knn_select(pairwise_sq_dist(coords), k, lexicographic_ranks(coords))
    cfg = AttentionConfig(heads=heads, low_rank_divisor=d)
    att = NeighborAttention(d, d, cfg, rng, dtype=np.float64)
    feats = Tensor(rng.uniform(-1, 1, (1, n, d)), dtype=np.float64)
    return coords, nbr, att, feats


def check_layer(step=1e-5, seed=0):
    """One attention layer end to end, differentiated w.r.t. each parameter."""
    from .attention import relative_features

    coords, nbr, att, feats = _layer_setup(seed)

    def loss_fn():
        f_ij, x_ij = relative_features(coords, feats, nbr)
        energies = att.energies(f_ij, x_ij)
        alpha = attention_normalize(energies)
        # reuse the projected features as stand-in conv output
        conv = ad.leaky_relu(att.projs[0](f_ij)) if att.projs else f_ij
        out = aggregate(alpha, conv)
        return _sq_sum(out)

    report = {}
    for name, p in att.params("layer").items():
        report[name] = grad_check(lambda t, fn=loss_fn: fn(), p, step)
    return report


def check_full(step=1e-5, seed=0, n_points=16, k=4, d=8, heads=2):
    """Full model loss (both toggles on) w.r.t. every parameter.

    The probe loss is cross-entropy plus a fixed random projection of the
    per-point features: at random init some parameters influence the
    cross-entropy only through near-cancelling paths, leaving gradient
    components below what float64 central differences can resolve; the
    projection term gives every upstream parameter a direct O(1) path
    through the identical graph.  The loss is evaluated at a small
    power-of-two scale so that the one-ulp rounding noise of the forward
    pass stays below the 1e-8 denominator floor on the structurally flat
    directions (softmax shift invariance makes some bias components exact
    zeros).
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xF011, seed]))
    cfg = BackboneConfig(
        layer_dims=(d, d, d, d), k=k, emb_dim=2 * d, n_classes=4,
        use_attention_aggregation=True, use_fused_grouping=True,
        heads=heads, low_rank_divisor=d, head_hidden=d, dropout=0.0,
    )
    model = Backbone(cfg, dtype=np.float64, seed=seed)
    coords = rng.uniform(-1, 1, (2, n_points, 3))
    labels = rng.integers(0, 4, size=2)
    probe = Tensor(rng.choice([-1.0, 1.0], size=(2, n_points, d)),
                   dtype=np.float64)

    def loss_fn():
        res = model.forward(coords, training=False)
        ce = cross_entropy(res.logits, labels)
        total = ad.add(ce, ad.reduce_mean(ad.mul(res.per_point, probe)))
        return ad.scale(total, 2.0 ** -10)

    report = {}
    for name, p in model.params().items():
        report[name] = grad_check(lambda t, fn=loss_fn: fn(), p, step)
    return report


def run_scope(scope, step=None, seed=0):
    if scope == "ops":
        return check_ops(step or 1e-5, seed)
    if scope == "layer":
        return check_layer(step or 1e-5, seed)
    if scope == "full":
        # smaller step keeps LeakyReLU kinks out of the central-difference
        # window; the scaled loss keeps rounding noise below tolerance
        return check_full(step or 1e-6, seed)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
