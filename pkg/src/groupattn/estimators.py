"""Scikit-learn style estimators wrapping the backbone and pretraining loops.

`PointCloudClassifier` is fit/predict-shaped over (B, N, 3) coordinate
arrays; `SelfSupervisedPointEncoder` is fit/transform-shaped, learning
from unlabeled clouds and emitting frozen global features.  Both follow
the get_params/set_params contract so they compose with model selection
and pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .backbone import Backbone, BackboneConfig
from .nn import AdamW
from .pretrain import MaskTokens, PerturbSpec, Projector, SslLossConfig
from .train import (
    OptimConfig,
    evaluate,
    extract_global_features,
    pretrain_encoder,
    train_supervised,
)
from .validation import check_coords, check_labels

__all__ = ["PointCloudClassifier", "SelfSupervisedPointEncoder"]


class PointCloudClassifier(ClassifierMixin, BaseEstimator):
    """Edge-convolution point-cloud classifier with attention-guided grouping.

    Parameters mirror the run-config fields; ``init_params`` may carry a
    pretrained parameter dict (e.g. from SelfSupervisedPointEncoder), in
    which case fine-tuning learning rates apply.
    """

    def __init__(self, layer_dims=(32, 32, 64, 64), k=20, emb_dim=256,
                 heads=2, low_rank_divisor=8, proj_variant="independent",
                 elite=False, use_attention_aggregation=True,
                 use_fused_grouping=True, fusion_variant="mlp",
                 fusion_hidden=16, head_hidden=128, dropout=0.5,
                 epochs=60, batch_size=32, lr=1e-3, weight_decay=1e-4,
                 augment=True, eval_every=0, random_state=0,
                 init_params=None):
        self.layer_dims = layer_dims
        self.k = k
        self.emb_dim = emb_dim
        self.heads = heads
        self.low_rank_divisor = low_rank_divisor
        self.proj_variant = proj_variant
        self.elite = elite
        self.use_attention_aggregation = use_attention_aggregation
        self.use_fused_grouping = use_fused_grouping
        self.fusion_variant = fusion_variant
        self.fusion_hidden = fusion_hidden
        self.head_hidden = head_hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.eval_every = eval_every
        self.random_state = random_state
        self.init_params = init_params

    def _backbone_config(self, n_classes):
        return BackboneConfig(
            layer_dims=tuple(self.layer_dims), k=self.k, emb_dim=self.emb_dim,
            n_classes=n_classes,
            use_attention_aggregation=self.use_attention_aggregation,
            use_fused_grouping=self.use_fused_grouping,
            heads=self.heads, low_rank_divisor=self.low_rank_divisor,
            proj_variant=self.proj_variant, elite=self.elite,
            fusion_variant=self.fusion_variant, fusion_hidden=self.fusion_hidden,
            head_hidden=self.head_hidden, dropout=self.dropout,
        )

    def fit(self, X, y, validation_data=None):
        X = check_coords(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.model_ = Backbone(self._backbone_config(len(self.classes_)),
                               dtype=np.float32, seed=self.random_state)
        finetune = False
        if self.init_params is not None:
            params = self.model_.params()
            self.model_.load_param_values(
                {n: v for n, v in self.init_params.items() if n in params})
            finetune = True
        optim = OptimConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=min(self.batch_size, X.shape[0]), augment=self.augment,
            seed=self.random_state,
            eval_every=self.eval_every if validation_data is not None else 0,
        )
        if validation_data is not None:
            vx = check_coords(validation_data[0])
            vy = check_labels(validation_data[1], vx.shape[0])
            vy = np.searchsorted(self.classes_, vy)
            test_data = (vx, vy)
        else:
            test_data = (X, encoded)
        self.history_ = train_supervised(self.model_, (X, encoded), test_data,
                                         optim, finetune=finetune)
        return self

    def decision_function(self, X):
        X = check_coords(X)
        from .autodiff import no_grad

        logits = []
        with no_grad():
            for start in range(0, X.shape[0], self.batch_size):
                res = self.model_.forward(X[start : start + self.batch_size],
                                          training=False)
                logits.append(res.logits.data.copy())
        return np.concatenate(logits, axis=0)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class SelfSupervisedPointEncoder(TransformerMixin, BaseEstimator):
    """Unsupervised encoder trained by neighborhood-perturbation alignment.

    ``fit`` runs the pretraining loop on unlabeled clouds; ``transform``
    emits frozen global features.  ``export_params()`` hands the learned
    backbone to PointCloudClassifier(init_params=...).
    """

    def __init__(self, layer_dims=(32, 32, 64, 64), k=20, emb_dim=256,
                 heads=2, low_rank_divisor=8, proj_variant="independent",
                 elite=False, fusion_variant="mlp", fusion_hidden=16,
                 mask_counts=(6, 10, 12, 16), noise_counts=(2, 4, 6, 8),
                 coord_margin=0.1, feat_sigma=1.0, shuffle=True,
                 alpha=0.97, lambda_offdiag=0.005, projector_dims=(512, 256),
                 epochs=50, batch_size=32, lr=1e-3, weight_decay=1e-4,
                 random_state=0):
        self.layer_dims = layer_dims
        self.k = k
        self.emb_dim = emb_dim
        self.heads = heads
        self.low_rank_divisor = low_rank_divisor
        self.proj_variant = proj_variant
        self.elite = elite
        self.fusion_variant = fusion_variant
        self.fusion_hidden = fusion_hidden
        self.mask_counts = mask_counts
        self.noise_counts = noise_counts
        self.coord_margin = coord_margin
        self.feat_sigma = feat_sigma
        self.shuffle = shuffle
        self.alpha = alpha
        self.lambda_offdiag = lambda_offdiag
        self.projector_dims = projector_dims
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_coords(X)
        cfg = BackboneConfig(
            layer_dims=tuple(self.layer_dims), k=self.k, emb_dim=self.emb_dim,
            use_attention_aggregation=True, use_fused_grouping=True,
            heads=self.heads, low_rank_divisor=self.low_rank_divisor,
            proj_variant=self.proj_variant, elite=self.elite,
            fusion_variant=self.fusion_variant, fusion_hidden=self.fusion_hidden,
            dropout=0.0,
        )
        self.model_ = Backbone(cfg, dtype=np.float32, seed=self.random_state)
        layer_inputs = (3,) + tuple(cfg.layer_dims[:-1])
        self.tokens_ = MaskTokens(layer_inputs, dtype=np.float32)
        rng = np.random.default_rng(
            np.random.SeedSequence([0xE5C0, self.random_state]))
        self.projector_ = Projector(cfg.emb_dim, tuple(self.projector_dims),
                                    rng, np.float32)
        spec = PerturbSpec(
            mask_counts=tuple(self.mask_counts),
            noise_counts=tuple(self.noise_counts),
            coord_margin=self.coord_margin, feat_sigma=self.feat_sigma,
            shuffle=self.shuffle, seed=self.random_state,
        )
        loss_cfg = SslLossConfig(alpha=self.alpha, lam=self.lambda_offdiag,
                                 projector_dims=tuple(self.projector_dims))
        self.history_ = pretrain_encoder(
            self.model_, self.tokens_, self.projector_, X, spec, loss_cfg,
            epochs=self.epochs, batch_size=min(self.batch_size, X.shape[0]),
            lr=self.lr, weight_decay=self.weight_decay,
        )
        return self

    def transform(self, X):
        X = check_coords(X)
        return extract_global_features(self.model_, X, self.batch_size)

    def export_params(self):
        """Backbone parameter arrays for warm-starting a classifier."""
        return {n: p.data.copy() for n, p in self.model_.params().items()}
