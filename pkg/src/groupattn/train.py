"""Supervised training, evaluation, feature extraction, and the linear probe."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .backbone import DivergenceError, param_digest, write_checkpoint
from .data import PointCloud, augment, batch_iter
from .nn import AdamW, Linear
from .pretrain import Perturber, SslLossConfig, ssl_step
from .validation import ConfigurationError

__all__ = [
    "OptimConfig",
    "cross_entropy",
    "train_supervised",
    "evaluate",
    "extract_global_features",
    "linear_probe",
    "pretrain_encoder",
]


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    augment: bool = True
    finetune_backbone_lr: float = 5e-4
    head_lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true classes."""
    b, c = logits.shape
    onehot = np.zeros((b, c), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    log_probs = ad.log_softmax_over_axis(logits, axis=1)
    picked = ad.reduce_sum(ad.mul(log_probs, Tensor(onehot)))
    return ad.scale(picked, -1.0 / b)


def _epoch_rng(seed, epoch, tag):
    return np.random.default_rng(np.random.SeedSequence([tag, int(seed), int(epoch)]))


def _append_csv(path, row, header):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def train_supervised(model, train_data, test_data, optim_cfg, out_dir=None,
                     finetune=False, config_text="", log=None):
    """Cross-entropy training; returns per-epoch metrics history.

    train_data/test_data: (coords (S,N,3), labels (S,)).  The best-accuracy
    parameter snapshot is retained (and written to out_dir when given); a
    non-finite loss aborts with the last good checkpoint preserved.
    """
    coords_tr, labels_tr = train_data
    coords_te, labels_te = test_data
    params = model.params()
    lr_map = None
    base_lr = optim_cfg.lr
    if finetune:
        base_lr = optim_cfg.finetune_backbone_lr
        lr_map = {n: optim_cfg.head_lr for n in params if n.startswith("head")}
    opt = AdamW(params, lr=base_lr, weight_decay=optim_cfg.weight_decay,
                lr_map=lr_map)
    history = []
    best = {"accuracy": -1.0, "params": None, "epoch": 0}
    csv_path = os.path.join(out_dir, "metrics.csv") if out_dir else None

    for epoch in range(1, optim_cfg.epochs + 1):
        rng = _epoch_rng(optim_cfg.seed, epoch, 0x7E41)
        losses = []
        for step, batch in enumerate(
            batch_iter(coords_tr, labels_tr, optim_cfg.batch_size,
                       shuffle_seed=optim_cfg.seed * 100_003 + epoch)
        ):
            pc = batch
            if optim_cfg.augment:
                pc = augment(pc, seed=optim_cfg.seed * 1_000_033 + epoch * 1009 + step)
            res = model.forward(pc.coords, training=True, rng=rng)
            loss = cross_entropy(res.logits, pc.labels)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                if out_dir and best["params"] is not None:
                    write_checkpoint(os.path.join(out_dir, "checkpoint_best.gfck"),
                                     best["params"], config_text, best["epoch"])
                raise DivergenceError(
                    f"training loss diverged at epoch {epoch}; "
                    f"last good checkpoint is epoch {best['epoch']}"
                )
            losses.append(loss_val)
            loss.backward()
            opt.step()
            opt.zero_grad()
        train_loss = float(np.mean(losses))
        record = {"epoch": epoch, "train_loss": train_loss}
        if epoch % optim_cfg.eval_every == 0 or epoch == optim_cfg.epochs:
            acc, _ = evaluate(model, coords_te, labels_te, optim_cfg.batch_size)
            record["test_accuracy"] = acc
            if acc > best["accuracy"]:
                best = {
                    "accuracy": acc,
                    "epoch": epoch,
                    "params": {n: p.data.copy() for n, p in params.items()},
                }
            if csv_path:
                _append_csv(csv_path, [epoch, "test", "", f"{acc:.6f}"],
                            ["epoch", "split", "loss", "accuracy"])
        if csv_path:
            _append_csv(csv_path, [epoch, "train", f"{train_loss:.6f}", ""],
                        ["epoch", "split", "loss", "accuracy"])
        if log:
            log(record)
        history.append(record)

    if out_dir:
        write_checkpoint(os.path.join(out_dir, "checkpoint_final.gfck"),
                         params, config_text, optim_cfg.epochs,
                         optimizer_state=opt.state_dict())
        if best["params"] is not None:
            write_checkpoint(os.path.join(out_dir, "checkpoint_best.gfck"),
                             best["params"], config_text, best["epoch"])
    if best["params"] is not None:
        for name, p in params.items():
            p.data = best["params"][name].copy()
    return history


def _eval_batches(coords, batch_size):
    n = coords.shape[0]
    for start in range(0, n, batch_size):
        yield start, coords[start : start + batch_size]


def evaluate(model, coords, labels, batch_size=32):
    """Argmax accuracy plus per-class accuracies (no voting)."""
    n_classes = model.config.n_classes
    correct = np.zeros(n_classes)
    counts = np.zeros(n_classes)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigurationError(
            f"labels span [{labels.min()}, {labels.max()}] but model has "
            f"{n_classes} classes"
        )
    with no_grad():
        for start, chunk in _eval_batches(coords, batch_size):
            res = model.forward(chunk, training=False)
            pred = res.logits.data.argmax(axis=1)
            lab = labels[start : start + len(chunk)]
            for c in range(n_classes):
                sel = lab == c
                counts[c] += sel.sum()
                correct[c] += (pred[sel] == c).sum()
    per_class = np.divide(correct, counts, out=np.zeros(n_classes), where=counts > 0)
    overall = correct.sum() / max(counts.sum(), 1)
    return float(overall), per_class


def extract_global_features(model, coords, batch_size=32):
    feats = []
    with no_grad():
        for _, chunk in _eval_batches(coords, batch_size):
            res = model.forward(chunk, training=False, with_head=False)
            feats.append(res.global_feat.data.copy())
    return np.concatenate(feats, axis=0)


def linear_probe(model, train_data, test_data, seed=0, epochs=300, lr=1e-2,
                 batch_size=32):
    """Train a single linear layer on frozen global features.

    The backbone is never touched; returns (test_accuracy, frozen_digest).
    """
    digest_before = param_digest(model.params())
    x_tr = extract_global_features(model, train_data[0], batch_size)
    x_te = extract_global_features(model, test_data[0], batch_size)
    y_tr, y_te = train_data[1], test_data[1]
    dtype = x_tr.dtype
    rng = np.random.default_rng(np.random.SeedSequence([0x9808E, int(seed)]))
    clf = Linear(x_tr.shape[1], model.config.n_classes, rng, dtype)
    opt = AdamW(clf.params("probe"), lr=lr, weight_decay=1e-4)
    n = x_tr.shape[0]
    for epoch in range(epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([0x4A0B, int(seed), epoch])).permutation(n)
        for start in range(0, n, 256):
            sel = order[start : start + 256]
            logits = clf(Tensor(x_tr[sel], dtype=dtype))
            loss = cross_entropy(logits, y_tr[sel])
            loss.backward()
            opt.step()
            opt.zero_grad()
    with no_grad():
        pred = clf(Tensor(x_te, dtype=dtype)).data.argmax(axis=1)
    accuracy = float((pred == y_te).mean())
    digest_after = param_digest(model.params())
    if digest_after != digest_before:
        raise RuntimeError("linear probe modified frozen backbone parameters")
    return accuracy, digest_before


def pretrain_encoder(model, tokens, projector, coords_tr, spec, loss_cfg,
                     epochs, batch_size=32, lr=1e-3, weight_decay=1e-4,
                     out_dir=None, config_text="", log=None):
    """Run the perturbation-alignment pretraining loop.

    Returns per-epoch (local, global, total) loss means.
    """
    params = {**model.params(), **tokens.params(), **projector.params()}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    csv_path = os.path.join(out_dir, "pretrain_metrics.csv") if out_dir else None
    history = []
    step_index = 0
    for epoch in range(1, epochs + 1):
        locs, globs, tots = [], [], []
        for batch in batch_iter(coords_tr, None, batch_size,
                                shuffle_seed=spec.seed * 99_991 + epoch):
            total, loc, glob = ssl_step(model, tokens, projector, batch.coords,
                                        spec, loss_cfg, step_index)
            step_index += 1
            total.backward()
            opt.step()
            opt.zero_grad()
            locs.append(loc)
            globs.append(glob)
            tots.append(float(total.data))
        record = {
            "epoch": epoch,
            "local_loss": float(np.mean(locs)),
            "global_loss": float(np.mean(globs)),
            "total_loss": float(np.mean(tots)),
        }
        history.append(record)
        if csv_path:
            _append_csv(
                csv_path,
                [epoch, f"{record['local_loss']:.6f}",
                 f"{record['global_loss']:.6f}", f"{record['total_loss']:.6f}"],
                ["epoch", "local_loss", "global_loss", "total_loss"],
            )
        if log:
            log(record)
    if out_dir:
        write_checkpoint(os.path.join(out_dir, "checkpoint_pretrained.gfck"),
                         params, config_text, epochs,
                         optimizer_state=opt.state_dict())
    return history
