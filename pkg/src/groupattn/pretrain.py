"""Self-supervised pretraining via neighborhood perturbation.

Each layer's gathered neighbor group is corrupted in three stages: a random
subset of members has its features replaced by a learnable per-layer token
(coordinates kept), extra noise points are injected with coordinates drawn
uniformly from the sample's margin-expanded bounding box and Gaussian
features, and the member order is shuffled.  A clean and a corrupted forward
pass share parameters; per-point and projected global embeddings are aligned
with a redundancy-reduction loss that drives their cross-correlation matrix
toward the identity: the diagonal enforces invariance to the corruption, the
off-diagonal penalizes redundant feature channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear
from .validation import ConfigurationError

__all__ = [
    "PerturbSpec",
    "MaskTokens",
    "Perturber",
    "perturb_group",
    "cross_correlation",
    "align_loss",
    "Projector",
    "SslLossConfig",
    "SslDivergenceError",
    "ssl_step",
]


@dataclass(frozen=True)
class PerturbSpec:
    """Per-layer mask/noise counts and noise distribution parameters."""

    mask_counts: tuple = (6, 10, 12, 16)
    noise_counts: tuple = (2, 4, 6, 8)
    coord_margin: float = 0.1  # fraction of the bounding-box diagonal
    feat_sigma: float = 1.0
    shuffle: bool = True
    seed: int = 0

    def validate(self, k, n_layers):
        if len(self.mask_counts) != n_layers or len(self.noise_counts) != n_layers:
            raise ConfigurationError(
                f"need {n_layers} mask and noise counts, got "
                f"{self.mask_counts} / {self.noise_counts}"
            )
        for m in self.mask_counts:
            if not 0 <= m < k:
                raise ConfigurationError(f"mask count {m} must satisfy 0 <= M < k={k}")
        for a in self.noise_counts:
            if a < 0:
                raise ConfigurationError(f"noise count {a} must be >= 0")
        return self


class MaskTokens:
    """One learnable feature vector per layer, matching that layer's input width."""

    def __init__(self, layer_input_dims, dtype=np.float32):
        self.thetas = [
            Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
            for d in layer_input_dims
        ]

    def params(self):
        return {f"mask_token{i + 1}": t for i, t in enumerate(self.thetas)}


def perturb_group(member_coords, member_feats, member_idx, theta,
                  n_mask, n_noise, bounds, margin, feat_sigma, rng,
                  shuffle=True):
    """Corrupt one layer's gathered neighbor groups.

    member_coords: (B, N, k, 3) ndarray; member_feats: Tensor (B, N, k, d);
    member_idx: (B, N, k) int column indices; theta: Tensor (d,);
    bounds: (B, 2, 3) per-sample [min; max] coordinates; margin: (B,) absolute
    box expansion per sample.  Returns the same triple with k + n_noise
    members; injected members carry index -1.
    """
    b, n, k, _ = member_coords.shape
    d = member_feats.shape[-1]
    if not 0 <= n_mask < k:
        raise ConfigurationError(f"mask count {n_mask} must satisfy 0 <= M < k={k}")
    dtype = member_feats.data.dtype

    if n_mask > 0:
        slot_order = rng.random((b, n, k)).argsort(axis=-1)
        mask = slot_order < n_mask  # uniform M-subset per group
        maskf = mask[..., None].astype(dtype)
        keep = Tensor(np.broadcast_to(1.0 - maskf, (b, n, k, d)))
        hit = Tensor(np.broadcast_to(maskf, (b, n, k, d)))
        theta_view = ad.broadcast_to(ad.reshape(theta, (1, 1, 1, d)), (b, n, k, d))
        member_feats = ad.add(ad.mul(member_feats, keep), ad.mul(theta_view, hit))

    if n_noise > 0:
        lo = (bounds[:, 0] - margin[:, None])[:, None, None, :]
        hi = (bounds[:, 1] + margin[:, None])[:, None, None, :]
        coords_inj = rng.uniform(size=(b, n, n_noise, 3)) * (hi - lo) + lo
        feats_inj = rng.normal(0.0, feat_sigma, size=(b, n, n_noise, d))
        member_coords = np.concatenate(
            [member_coords, coords_inj.astype(member_coords.dtype)], axis=2
        )
        member_feats = ad.concat(
            [member_feats, Tensor(feats_inj, dtype=dtype)], axis=2
        )
        member_idx = np.concatenate(
            [member_idx, np.full((b, n, n_noise), -1, dtype=member_idx.dtype)], axis=2
        )

    if shuffle:
        g = k + n_noise
        perm = rng.random((b, n, g)).argsort(axis=-1)
        member_coords = np.take_along_axis(member_coords, perm[..., None], axis=2)
        member_idx = np.take_along_axis(member_idx, perm, axis=2)
        flat = ad.reshape(member_feats, (b * n * g, d))
        base = (np.arange(b * n) * g)[:, None]
        flat_perm = (perm.reshape(b * n, g) + base).reshape(-1)
        member_feats = ad.reshape(ad.permute_rows(flat, flat_perm), (b, n, g, d))

    return member_coords, member_feats, member_idx


class Perturber:
    """Per-layer corruption hook handed to the backbone's noisy forward."""

    def __init__(self, spec, coords, step_index, layer_input_dims, tokens):
        self.spec = spec
        self.tokens = tokens
        self.step_index = int(step_index)
        self.bounds = np.stack([coords.min(axis=1), coords.max(axis=1)], axis=1)
        diag = np.linalg.norm(self.bounds[:, 1] - self.bounds[:, 0], axis=-1)
        self.margin = (spec.coord_margin * diag).astype(coords.dtype)
        self.layer_input_dims = layer_input_dims

    def __call__(self, layer, member_coords, member_feats, member_idx):
        rng = np.random.default_rng(
            np.random.SeedSequence(
                [0x9E47, int(self.spec.seed), self.step_index, int(layer)]
            )
        )
        return perturb_group(
            member_coords,
            member_feats,
            member_idx,
            self.tokens.thetas[layer],
            self.spec.mask_counts[layer],
            self.spec.noise_counts[layer],
            self.bounds,
            self.margin,
            self.spec.feat_sigma,
            rng,
            shuffle=self.spec.shuffle,
        )


# ---------------------------------------------------------------------------
# alignment loss
# ---------------------------------------------------------------------------


def cross_correlation(z_clean, z_noisy, eps=1e-5):
    """Column-standardize both views over the sample axis, then (1/S) Zc^T Zn."""
    if z_clean.ndim != 2 or z_clean.shape != z_noisy.shape:
        raise ConfigurationError(
            f"views must share an (S, d) shape, got {z_clean.shape} vs {z_noisy.shape}"
        )
    s = z_clean.shape[0]
    if s < 2:
        raise ConfigurationError("need at least 2 samples to standardize columns")
    zc = ad.standardize_over_axis(z_clean, axis=0, eps=eps)
    zn = ad.standardize_over_axis(z_noisy, axis=0, eps=eps)
    return ad.scale(ad.matmul(ad.transpose(zc), zn), 1.0 / s)


def align_loss(corr, lam):
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2; zero iff C = I."""
    d, d2 = corr.shape
    if d != d2:
        raise ConfigurationError(f"correlation matrix must be square, got {corr.shape}")
    eye = Tensor(np.eye(d), dtype=corr.data.dtype)
    off = Tensor(1.0 - np.eye(d), dtype=corr.data.dtype)
    residual = ad.sub(eye, corr)
    on_term = ad.reduce_sum(ad.mul(ad.mul(residual, residual), eye))
    off_term = ad.reduce_sum(ad.mul(ad.mul(corr, corr), off))
    return ad.add(on_term, ad.scale(off_term, lam))


class Projector:
    """Two-layer MLP applied to the global feature for the global branch."""

    def __init__(self, emb_dim, dims, rng, dtype=np.float32):
        self.lin1 = Linear(emb_dim, dims[0], rng, dtype)
        self.lin2 = Linear(dims[0], dims[1], rng, dtype)

    def __call__(self, x):
        return self.lin2(ad.leaky_relu(self.lin1(x)))

    def params(self):
        return {**self.lin1.params("projector.lin1"),
                **self.lin2.params("projector.lin2")}


@dataclass(frozen=True)
class SslLossConfig:
    alpha: float = 0.97  # local/global trade-off (0.98 for segmentation tasks)
    lam: float = 0.005   # off-diagonal weight
    projector_dims: tuple = (512, 256)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam <= 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")


def ssl_step(model, tokens, projector, coords, spec, loss_cfg, step_index):
    """One pretraining objective evaluation: clean and corrupted passes.

    Returns (total_loss Tensor, local_loss float, global_loss float).
    """
    layer_dims = (3,) + tuple(model.config.layer_dims[:-1])
    spec.validate(model.config.k, len(model.config.layer_dims))
    clean = model.forward(coords, training=False, with_head=False)
    perturber = Perturber(spec, np.asarray(coords, dtype=model.dtype),
                          step_index, layer_dims, tokens)
    noisy = model.forward(coords, training=False, with_head=False,
                          perturber=perturber)

    b, n, dp = clean.per_point.shape
    f_clean = ad.reshape(clean.per_point, (b * n, dp))
    f_noisy = ad.reshape(noisy.per_point, (b * n, dp))
    local = align_loss(cross_correlation(f_clean, f_noisy), loss_cfg.lam)

    g_clean = projector(clean.global_feat)
    g_noisy = projector(noisy.global_feat)
    global_ = align_loss(cross_correlation(g_clean, g_noisy), loss_cfg.lam)

    total = ad.add(ad.scale(local, loss_cfg.alpha),
                   ad.scale(global_, 1.0 - loss_cfg.alpha))
    if not np.isfinite(total.data).all():
        cm = cross_correlation(f_clean.detach(), f_noisy.detach()).data
        raise SslDivergenceError(cm, clean, noisy)
    return total, float(local.data), float(global_.data)


class SslDivergenceError(RuntimeError):
    def __init__(self, corr, clean, noisy):
        super().__init__(
            "non-finite pretraining loss; "
            f"C in [{np.nanmin(corr):.3g}, {np.nanmax(corr):.3g}], "
            f"clean var {float(clean.per_point.data.var()):.3g}, "
            f"noisy var {float(noisy.per_point.data.var()):.3g}"
        )
