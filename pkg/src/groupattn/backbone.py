"""Edge-convolution backbone with attention-coordinated grouping.

Four constant-point-count layers.  Layer 1 always groups by coordinate kNN;
deeper layers either recompute kNN in feature space (the plain dynamic-graph
baseline) or run the fused selection over [feature distances || accumulated
attention weight matrices].  Per layer, edge features [f_i || f_j - f_i] pass
through a linear/norm/LeakyReLU block and are aggregated either by neighbor
max-pooling (baseline) or by the channel-wise attention weighting, which also
emits the zero-padded N x N weight matrix appended to the stack consumed by
later grouping.  Per-layer outputs are concatenated, projected per point, and
max+mean pooled into the global feature feeding the classification head.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, NeighborAttention, aggregate, attention_normalize
from .autodiff import Tensor
from .grouping import (
    FusionHead,
    LayerWeightStack,
    fused_select,
    knn_select,
    lexicographic_ranks,
    pairwise_sq_dist,
)
from .nn import LayerNorm, Linear, dropout
from .validation import ConfigurationError

__all__ = [
    "BackboneConfig",
    "Backbone",
    "ForwardResult",
    "DivergenceError",
    "write_checkpoint",
    "read_checkpoint",
    "param_digest",
]

CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Non-finite values appeared during a forward pass or training."""


@dataclass(frozen=True)
class BackboneConfig:
    layer_dims: tuple = (64, 64, 128, 256)
    k: int = 20
    emb_dim: int = 1024
    n_classes: int = 8
    use_attention_aggregation: bool = True
    use_fused_grouping: bool = True
    heads: int = 2
    low_rank_divisor: int = 8
    proj_variant: str = "independent"
    elite: bool = False
    fusion_variant: str = "mlp"
    fusion_hidden: int = 16
    head_hidden: int = 256
    dropout: float = 0.5

    def __post_init__(self):
        if self.use_fused_grouping and not self.use_attention_aggregation:
            raise ConfigurationError(
                "fused grouping consumes attention matrices; "
                "use_fused_grouping requires use_attention_aggregation"
            )
        if self.emb_dim % 2:
            raise ConfigurationError("emb_dim must be even (max||mean readout)")
        if len(self.layer_dims) < 2:
            raise ConfigurationError("need at least two layers")

    def attention_config(self):
        return AttentionConfig(
            heads=self.heads,
            low_rank_divisor=self.low_rank_divisor,
            proj_variant=self.proj_variant,
            elite=self.elite,
        )


@dataclass
class ForwardResult:
    per_point: Tensor          # (B, N, emb_dim // 2)
    global_feat: Tensor        # (B, emb_dim)
    logits: Tensor | None      # (B, n_classes)
    stack: LayerWeightStack
    neighbor_indices: list = field(default_factory=list)


class Backbone:
    """Holds all parameters; forward is a pure function of params and input."""

    def __init__(self, config, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([0xB0B0, int(seed)]))
        dims = config.layer_dims
        in_dims = (3,) + tuple(dims[:-1])
        # edge conv [f_i || f_j - f_i] @ W + b with W split into center/diff
        # halves, so the center half runs per point instead of per edge
        self.conv_center = []
        self.conv_diff = []
        self.norms = []
        self.attn = []
        self.fusions = []
        att_cfg = config.attention_config() if config.use_attention_aggregation else None
        for m, (d_in, d_out) in enumerate(zip(in_dims, dims)):
            self.conv_center.append(
                Linear(d_in, d_out, rng, dtype, bias=False, fan_in=2 * d_in))
            self.conv_diff.append(
                Linear(d_in, d_out, rng, dtype, fan_in=2 * d_in))
            self.norms.append(LayerNorm(d_out, dtype))
            if config.use_attention_aggregation:
                self.attn.append(NeighborAttention(d_in, d_out, att_cfg, rng, dtype))
        if config.use_fused_grouping:
            for m in range(1, len(dims)):
                self.fusions.append(
                    FusionHead(1 + m, config.fusion_variant,
                               config.fusion_hidden, rng, dtype)
                )
        half = config.emb_dim // 2
        self.proj = Linear(sum(dims), half, rng, dtype)
        self.proj_norm = LayerNorm(half, dtype)
        self.head1 = Linear(config.emb_dim, config.head_hidden, rng, dtype)
        self.head2 = Linear(config.head_hidden, config.n_classes, rng, dtype)

    # -- parameters -----------------------------------------------------------

    def params(self):
        out = {}
        for m, (cc, cd, norm) in enumerate(
            zip(self.conv_center, self.conv_diff, self.norms), start=1
        ):
            out.update(cc.params(f"conv{m}.center"))
            out.update(cd.params(f"conv{m}.diff"))
            out.update(norm.params(f"norm{m}"))
        for m, att in enumerate(self.attn, start=1):
            out.update(att.params(f"attn{m}"))
        for m, fus in enumerate(self.fusions, start=2):
            out.update(fus.params(f"fusion{m}"))
        out.update(self.proj.params("proj"))
        out.update(self.proj_norm.params("proj_norm"))
        out.update(self.head1.params("head1"))
        out.update(self.head2.params("head2"))
        return out

    def backbone_param_names(self):
        return [n for n in self.params() if not n.startswith("head")]

    def attention_param_count(self):
        return sum(att.attention_param_count() for att in self.attn)

    def load_param_values(self, values):
        params = self.params()
        missing = [n for n in params if n not in values]
        if missing:
            raise ConfigurationError(f"checkpoint missing parameters: {missing[:4]}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise ConfigurationError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {p.shape}"
                )
            p.data = arr.copy()

    # -- forward --------------------------------------------------------------

    def forward(self, coords, training=False, rng=None, perturber=None,
                with_head=True):
        cfg = self.config
        coords = np.asarray(coords, dtype=self.dtype)
        b, n, _ = coords.shape
        if cfg.k >= n:
            raise ConfigurationError(f"k={cfg.k} requires more than {n} points")
        ranks = lexicographic_ranks(coords)
        stack = LayerWeightStack()
        feats = Tensor(coords, dtype=self.dtype)
        offsets = (np.arange(b) * n)[:, None, None]
        batch_idx = np.arange(b)[:, None, None]
        outputs = []
        nbr_record = []

        for m in range(len(cfg.layer_dims)):
            d_in = feats.shape[-1]
            if m == 0:
                nbr = knn_select(pairwise_sq_dist(coords), cfg.k, ranks)
            else:
                fd = pairwise_sq_dist(feats.data)
                if cfg.use_fused_grouping:
                    nbr = fused_select(fd, stack, self.fusions[m - 1], cfg.k, ranks)
                else:
                    nbr = knn_select(fd, cfg.k, ranks)
            nbr_record.append(nbr)

            flat = ad.reshape(feats, (b * n, d_in))
            member_feats = ad.reshape(
                ad.gather_rows(flat, (nbr + offsets).reshape(-1)),
                (b, n, cfg.k, d_in),
            )
            member_coords = coords[batch_idx, nbr]
            member_idx = nbr
            if perturber is not None:
                member_coords, member_feats, member_idx = perturber(
                    m, member_coords, member_feats, member_idx
                )
            g = member_feats.shape[2]
            center_view = ad.broadcast_to(
                ad.reshape(feats, (b, n, 1, d_in)), (b, n, g, d_in))
            diff = ad.sub(member_feats, center_view)
            d_out = cfg.layer_dims[m]
            center_proj = self.conv_center[m](feats)
            pre = ad.add(
                self.conv_diff[m](diff),
                ad.broadcast_to(ad.reshape(center_proj, (b, n, 1, d_out)),
                                (b, n, g, d_out)),
            )
            conv_out = ad.leaky_relu(self.norms[m](pre))

            if cfg.use_attention_aggregation:
                att = self.attn[m]
                x_ij = member_coords - coords[:, :, None, :]
                energies = att.energies(diff, x_ij, conv_edge=conv_out)
                alpha = attention_normalize(energies)
                out = aggregate(alpha, conv_out)
                mat, mask = att.emit_weight_matrix(alpha, member_idx)
                stack.append(mat, mask)
            else:
                out = ad.reduce_max(conv_out, axis=2)

            if not np.isfinite(out.data).all():
                raise DivergenceError(f"layer {m + 1} produced non-finite features")
            feats = out
            outputs.append(out)

        cat = ad.concat_last_axis(*outputs)
        per_point = ad.leaky_relu(self.proj_norm(self.proj(cat)))
        global_feat = ad.concat_last_axis(
            ad.reduce_max(per_point, axis=1), ad.reduce_mean(per_point, axis=1)
        )
        logits = None
        if with_head:
            hid = ad.leaky_relu(self.head1(global_feat))
            if training and cfg.dropout > 0:
                if rng is None:
                    rng = np.random.default_rng(0)
                hid = dropout(hid, cfg.dropout, rng, training=True)
            logits = self.head2(hid)
        return ForwardResult(per_point, global_feat, logits, stack, nbr_record)


# ---------------------------------------------------------------------------
# checkpoint format: GFCK | u32 version | config | epoch | rng | params | moments
# ---------------------------------------------------------------------------


def _pack_bytes(fh, blob):
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh, size):
    blob = fh.read(size)
    if len(blob) != size:
        raise ValueError("truncated checkpoint file")
    return blob


def _read_bytes(fh):
    (size,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, size)


def write_checkpoint(path, params, config_text, epoch=0, rng_state=None,
                     optimizer_state=None):
    """Serialize named parameters as little-endian float32 blobs."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _pack_bytes(fh, config_text.encode("utf-8"))
        fh.write(struct.pack("<I", int(epoch)))
        rng_blob = b"" if rng_state is None else json.dumps(
            rng_state, sort_keys=True, separators=(",", ":")).encode("utf-8")
        _pack_bytes(fh, rng_blob)
        names = list(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data if isinstance(params[name], Tensor) else params[name]
            arr = np.ascontiguousarray(data, dtype="<f4")
            _pack_bytes(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        if optimizer_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", int(optimizer_state["t"])))
            for name in names:
                for key in ("m", "v"):
                    arr = np.ascontiguousarray(optimizer_state[key][name], dtype="<f4")
                    fh.write(arr.tobytes())


def read_checkpoint(path):
    """Returns dict(config_text, epoch, rng_state, params, optimizer_state)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config_text = _read_bytes(fh).decode("utf-8")
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4))
        rng_blob = _read_bytes(fh)
        rng_state = json.loads(rng_blob.decode("utf-8")) if rng_blob else None
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params = {}
        for _ in range(n_params):
            name = _read_bytes(fh).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            params[name] = arr.copy()
        (has_moments,) = struct.unpack("<B", _read_exact(fh, 1))
        optimizer_state = None
        if has_moments:
            (t,) = struct.unpack("<Q", _read_exact(fh, 8))
            m, v = {}, {}
            for name in params:
                size = params[name].size
                m[name] = np.frombuffer(
                    _read_exact(fh, 4 * size), dtype="<f4").reshape(params[name].shape).copy()
                v[name] = np.frombuffer(
                    _read_exact(fh, 4 * size), dtype="<f4").reshape(params[name].shape).copy()
            optimizer_state = {"t": t, "m": m, "v": v}
    return {
        "config_text": config_text,
        "epoch": epoch,
        "rng_state": rng_state,
        "params": params,
        "optimizer_state": optimizer_state,
    }


def param_digest(params):
    """Stable content hash of named parameters (freeze contract checks)."""
    h = hashlib.sha256()
    for name in sorted(params):
        data = params[name].data if isinstance(params[name], Tensor) else params[name]
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()
