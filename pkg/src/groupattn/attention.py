"""Per-pair attention over neighborhoods: energies, normalization, aggregation.

For a center i and neighbor j, the attention energy fuses the projected
feature difference with the raw 3-D displacement:

    e_ij = LeakyReLU([G(f_j - f_i) || x_j - x_i]) @ (U V)

with the (D+3) x D map factorized through rank R = floor(D / r); (act @ U) @ V
is evaluated without ever materializing the dense product.  Per head the
energies are softmax-normalized over the neighbor axis channel-wise, heads
are averaged, and the resulting map both reweights the backbone's edge
convolution output and is reduced to the scalar weight matrix consumed by
the grouping stage of deeper layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import grouping
from .autodiff import Tensor
from .nn import Linear
from .validation import ConfigurationError

__all__ = [
    "AttentionConfig",
    "NeighborAttention",
    "relative_features",
    "attention_normalize",
    "aggregate",
]

PROJ_VARIANTS = ("independent", "consistent")


@dataclass(frozen=True)
class AttentionConfig:
    """Head count, low-rank divisor, and projection-variant selection."""

    heads: int = 2
    low_rank_divisor: int = 8
    proj_variant: str = "independent"
    elite: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigurationError(f"heads must be >= 1, got {self.heads}")
        if self.low_rank_divisor < 1:
            raise ConfigurationError(
                f"low_rank_divisor must be >= 1, got {self.low_rank_divisor}"
            )
        if self.proj_variant not in PROJ_VARIANTS:
            raise ConfigurationError(
                f"proj_variant {self.proj_variant!r} not in {PROJ_VARIANTS}"
            )
        if self.elite and (self.heads != 1 or self.low_rank_divisor != 16):
            raise ConfigurationError(
                "elite configuration requires heads=1 and low_rank_divisor=16"
            )

    def rank(self, out_dim):
        r = out_dim // self.low_rank_divisor
        if r < 1:
            raise ConfigurationError(
                f"rank floor(D/r) = floor({out_dim}/{self.low_rank_divisor}) < 1"
            )
        return r


def relative_features(coords, feats, nbr):
    """Neighbor-minus-center differences for features and raw coordinates.

    coords: (B, N, 3) ndarray; feats: Tensor (B, N, d); nbr: (B, N, k) int.
    Returns (f_ij Tensor (B,N,k,d), x_ij ndarray (B,N,k,3)).  Displacements
    always come from original 3-D coordinates, never from layer features.
    """
    b, n, d = feats.shape
    k = nbr.shape[2]
    flat = ad.reshape(feats, (b * n, d))
    offsets = (np.arange(b) * n)[:, None, None]
    nbr_flat = (nbr + offsets).reshape(-1)
    f_j = ad.reshape(ad.gather_rows(flat, nbr_flat), (b, n, k, d))
    center = ad.broadcast_to(ad.reshape(feats, (b, n, 1, d)), (b, n, k, d))
    f_ij = ad.sub(f_j, center)
    x_j = coords[np.arange(b)[:, None, None], nbr]
    x_ij = x_j - coords[:, :, None, :]
    return f_ij, x_ij


def attention_normalize(energies_per_head):
    """Per-head channel-wise softmax over neighbors, then head average."""
    if len(energies_per_head) < 1:
        raise ConfigurationError("need at least one attention head")
    soft = [ad.softmax_over_axis(e, axis=2) for e in energies_per_head]
    total = soft[0]
    for s in soft[1:]:
        total = ad.add(total, s)
    return ad.scale(total, 1.0 / len(soft))


def aggregate(alpha, neighbor_conv_feats):
    """Channel-wise weighted sum of edge-conv outputs over neighbors."""
    return ad.reduce_sum(ad.mul(alpha, neighbor_conv_feats), axis=2)


class NeighborAttention:
    """One layer's attention parameters: per-head projections and factors.

    With proj_variant='consistent' the backbone's own edge convolution output
    serves as the projected feature, so the layer adds no parameters beyond
    the factors and the scalar reducer.
    """

    def __init__(self, in_dim, out_dim, config, rng, dtype=np.float32):
        self.config = config
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.rank = config.rank(out_dim)
        self.projs = []
        if config.proj_variant == "independent":
            self.projs = [Linear(in_dim, out_dim, rng, dtype)
                          for _ in range(config.heads)]
        # the (D+3) x R factor is stored as feature (D x R) and geometry
        # (3 x R) row blocks so energies never build the [G || x] concat
        bound_u = 1.0 / np.sqrt(out_dim + 3)
        bound_v = 1.0 / np.sqrt(self.rank)
        self.U_feat = [Tensor(rng.uniform(-bound_u, bound_u, (out_dim, self.rank)),
                              requires_grad=True, dtype=dtype)
                       for _ in range(config.heads)]
        self.U_geo = [Tensor(rng.uniform(-bound_u, bound_u, (3, self.rank)),
                             requires_grad=True, dtype=dtype)
                      for _ in range(config.heads)]
        self.V = [Tensor(rng.uniform(-bound_v, bound_v, (self.rank, out_dim)),
                         requires_grad=True, dtype=dtype)
                  for _ in range(config.heads)]
        self.reducer = Linear(out_dim, 1, rng, dtype)

    # -- energies -----------------------------------------------------------

    def activated_projection(self, head, f_ij, conv_edge, slope=0.2):
        """LeakyReLU(G_h) for the energy path.

        Independent variant: G = LeakyReLU(W f_ij + b), and the energy's
        activation stacks a second LeakyReLU on top; the composition is a
        single LeakyReLU whose negative branch has the squared slope, so it
        is evaluated as one op.  Consistent variant: G is the backbone conv
        output, activated here.
        """
        if self.config.proj_variant == "independent":
            return ad.leaky_relu(self.projs[head](f_ij), slope=slope * slope)
        if conv_edge is None:
            raise ConfigurationError(
                "consistent variant needs the backbone conv output"
            )
        return ad.leaky_relu(conv_edge, slope=slope)

    def head_energy(self, head, g_act, x_act_flat):
        """((LeakyReLU([G || x_ij])) @ U) @ V without materializing U V.

        LeakyReLU is elementwise, so the concat splits into two matmuls
        against the U row blocks: leaky(G) @ U_feat + leaky(x) @ U_geo.
        """
        b, n, k, d = g_act.shape
        if d != self.out_dim:
            raise ConfigurationError(
                f"projected features have width {d}, expected {self.out_dim}"
            )
        lg = ad.reshape(g_act, (b * n * k, d))
        inner = ad.add(ad.matmul(lg, self.U_feat[head]),
                       ad.matmul(x_act_flat, self.U_geo[head]))
        e = ad.matmul(inner, self.V[head])
        return ad.reshape(e, (b, n, k, self.out_dim))

    def _activated_displacements(self, x_ij, dtype):
        b, n, k, _ = x_ij.shape
        x_const = Tensor(x_ij, dtype=dtype)
        return ad.reshape(ad.leaky_relu(x_const), (b * n * k, 3))

    def energies(self, f_ij, x_ij, conv_edge=None):
        if x_ij.shape[:3] != f_ij.shape[:3] or x_ij.shape[3] != 3:
            raise ConfigurationError(
                f"displacements shaped {x_ij.shape}, expected "
                f"{f_ij.shape[:3] + (3,)}"
            )
        x_act = self._activated_displacements(x_ij, f_ij.data.dtype)
        return [
            self.head_energy(
                h, self.activated_projection(h, f_ij, conv_edge), x_act)
            for h in range(self.config.heads)
        ]

    def dense_energy(self, head, g, x_ij):
        """Reference path materializing the full (D+3) x D map U V."""
        b, n, k, d = g.shape
        x_const = Tensor(x_ij, dtype=g.data.dtype)
        z = ad.leaky_relu(ad.concat_last_axis(g, x_const))
        flat = ad.reshape(z, (b * n * k, d + 3))
        u_full = ad.concat([self.U_feat[head], self.U_geo[head]], axis=0)
        dense = ad.matmul(u_full, self.V[head])
        return ad.reshape(ad.matmul(flat, dense), (b, n, k, self.out_dim))

    # -- weight-matrix emission ----------------------------------------------

    def emit_weight_matrix(self, alpha, nbr, valid=None):
        return grouping.scatter_weight_matrix(alpha, nbr, self.reducer, valid)

    # -- bookkeeping ----------------------------------------------------------

    def attention_param_count(self):
        """Factor parameters only: H * ((D+3)*R + R*D)."""
        return self.config.heads * (
            (self.out_dim + 3) * self.rank + self.rank * self.out_dim
        )

    def dense_equivalent_param_count(self):
        return self.config.heads * (self.out_dim + 3) * self.out_dim

    def params(self, prefix):
        out = {}
        for h in range(self.config.heads):
            if self.projs:
                out.update(self.projs[h].params(f"{prefix}.head{h}.proj"))
            out[f"{prefix}.head{h}.U_feat"] = self.U_feat[h]
            out[f"{prefix}.head{h}.U_geo"] = self.U_geo[h]
            out[f"{prefix}.head{h}.V"] = self.V[h]
        out.update(self.reducer.params(f"{prefix}.reducer"))
        return out
