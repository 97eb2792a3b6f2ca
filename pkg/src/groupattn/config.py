"""Line-oriented run configuration: ``section.key = value``.

Plain text keeps configs language-neutral and diff-friendly.  Parsing is
strict (unknown keys rejected) and re-emission is canonical: fixed section
and key order, so a canonical file round-trips byte-identically.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig
from .pretrain import PerturbSpec, SslLossConfig
from .train import OptimConfig
from .validation import ConfigurationError

__all__ = ["RunConfig", "SCHEMA"]

# kind: int | float | bool | str | ints
SCHEMA = {
    "data": {
        "n_points": ("int", 128),
        "train_per_class": ("int", 100),
        "test_per_class": ("int", 30),
        "seed": ("int", 0),
        "limit_percent": ("float", 100.0),
    },
    "backbone": {
        "layer_dims": ("ints", (64, 64, 128, 256)),
        "k": ("int", 20),
        "emb_dim": ("int", 1024),
        "n_classes": ("int", 8),
        "head_hidden": ("int", 256),
        "dropout": ("float", 0.5),
        "use_attention_aggregation": ("bool", True),
        "use_fused_grouping": ("bool", True),
    },
    "attention": {
        "heads": ("int", 2),
        "low_rank_divisor": ("int", 8),
        "proj_variant": ("str", "independent"),
        "elite": ("bool", False),
        "fusion_variant": ("str", "mlp"),
        "fusion_hidden": ("int", 16),
    },
    "pretrain": {
        "mask_counts": ("ints", (6, 10, 12, 16)),
        "noise_counts": ("ints", (2, 4, 6, 8)),
        "coord_margin": ("float", 0.1),
        "feat_sigma": ("float", 1.0),
        "shuffle": ("bool", True),
        "alpha": ("float", 0.97),
        "lambda_offdiag": ("float", 0.005),
        "projector_dims": ("ints", (512, 256)),
        "epochs": ("int", 50),
        "batch_size": ("int", 32),
        "lr": ("float", 0.001),
        "weight_decay": ("float", 0.0001),
        "seed": ("int", 0),
    },
    "optim": {
        "lr": ("float", 0.001),
        "weight_decay": ("float", 0.0001),
        "epochs": ("int", 100),
        "batch_size": ("int", 32),
        "augment": ("bool", True),
        "finetune_backbone_lr": ("float", 0.0005),
        "head_lr": ("float", 0.001),
        "eval_every": ("int", 1),
        "seed": ("int", 0),
    },
}


def _parse_value(kind, raw, where):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {kind}") from exc


def _format_value(kind, value):
    if kind == "bool":
        return "true" if value else "false"
    if kind == "ints":
        return ",".join(str(int(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


class RunConfig:
    """Typed view over the schema with canonical text serialization."""

    def __init__(self, values=None):
        self._values = {
            sec: {key: default for key, (_, default) in keys.items()}
            for sec, keys in SCHEMA.items()
        }
        for dotted, v in (values or {}).items():
            self.set(dotted, v)

    def get(self, dotted):
        sec, key = self._split(dotted)
        return self._values[sec][key]

    def set(self, dotted, value):
        sec, key = self._split(dotted)
        kind = SCHEMA[sec][key][0]
        if kind == "ints" and not isinstance(value, tuple):
            value = tuple(int(v) for v in value)
        self._values[sec][key] = value
        return self

    def replace(self, **kwargs):
        """Copy with dotted keys (dots spelled as double underscores)."""
        clone = RunConfig()
        for sec, keys in self._values.items():
            clone._values[sec] = dict(keys)
        for name, v in kwargs.items():
            clone.set(name.replace("__", "."), v)
        return clone

    @staticmethod
    def _split(dotted):
        if "." not in dotted:
            raise ConfigurationError(f"config key must be section.key, got {dotted!r}")
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA:
            raise ConfigurationError(
                f"unknown config section {sec!r}; valid: {', '.join(SCHEMA)}"
            )
        if key not in SCHEMA[sec]:
            raise ConfigurationError(
                f"unknown key {key!r} in section {sec!r}; "
                f"valid: {', '.join(SCHEMA[sec])}"
            )
        return sec, key

    # -- text form ------------------------------------------------------------

    def to_text(self):
        lines = []
        for sec, keys in SCHEMA.items():
            for key, (kind, _) in keys.items():
                lines.append(f"{sec}.{key} = {_format_value(kind, self._values[sec][key])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, where="<config>"):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{where}:{lineno}: expected 'section.key = value'")
            dotted, _, val = line.partition("=")
            sec, key = cls._split(dotted.strip())
            kind = SCHEMA[sec][key][0]
            cfg._values[sec][key] = _parse_value(kind, val, f"{where}:{lineno}")
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read(), where=str(path))

    def diff(self, other, sections=None):
        out = []
        for sec, keys in SCHEMA.items():
            if sections is not None and sec not in sections:
                continue
            for key in keys:
                a, b = self._values[sec][key], other._values[sec][key]
                if a != b:
                    out.append((f"{sec}.{key}", a, b))
        return out

    # -- materializers ---------------------------------------------------------

    def backbone_config(self):
        return BackboneConfig(
            layer_dims=self.get("backbone.layer_dims"),
            k=self.get("backbone.k"),
            emb_dim=self.get("backbone.emb_dim"),
            n_classes=self.get("backbone.n_classes"),
            use_attention_aggregation=self.get("backbone.use_attention_aggregation"),
            use_fused_grouping=self.get("backbone.use_fused_grouping"),
            heads=self.get("attention.heads"),
            low_rank_divisor=self.get("attention.low_rank_divisor"),
            proj_variant=self.get("attention.proj_variant"),
            elite=self.get("attention.elite"),
            fusion_variant=self.get("attention.fusion_variant"),
            fusion_hidden=self.get("attention.fusion_hidden"),
            head_hidden=self.get("backbone.head_hidden"),
            dropout=self.get("backbone.dropout"),
        )

    def perturb_spec(self):
        return PerturbSpec(
            mask_counts=self.get("pretrain.mask_counts"),
            noise_counts=self.get("pretrain.noise_counts"),
            coord_margin=self.get("pretrain.coord_margin"),
            feat_sigma=self.get("pretrain.feat_sigma"),
            shuffle=self.get("pretrain.shuffle"),
            seed=self.get("pretrain.seed"),
        )

    def ssl_loss_config(self):
        return SslLossConfig(
            alpha=self.get("pretrain.alpha"),
            lam=self.get("pretrain.lambda_offdiag"),
            projector_dims=self.get("pretrain.projector_dims"),
        )

    def optim_config(self):
        return OptimConfig(
            lr=self.get("optim.lr"),
            weight_decay=self.get("optim.weight_decay"),
            epochs=self.get("optim.epochs"),
            batch_size=self.get("optim.batch_size"),
            augment=self.get("optim.augment"),
            finetune_backbone_lr=self.get("optim.finetune_backbone_lr"),
            head_lr=self.get("optim.head_lr"),
            seed=self.get("optim.seed"),
            eval_every=self.get("optim.eval_every"),
        )

    def dtype(self, f64=False):
        return np.float64 if f64 else np.float32
