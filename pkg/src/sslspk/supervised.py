"""Supervised stages: AAM-softmax with margin warmup over pseudo-labels,
and large-margin fine-tuning that touches only post-pooling tensors."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, store_param_set
from .config import AamConfig, AugmentConfig, FeatureConfig, NetworkConfig, TrainConfig
from .corpus import CorpusManifest, Waveform, load_waveform
from .errors import CheckpointError, ConfigurationError, CoverageError
from .features import logmel, st_mean_normalize
from .network import POST, ParamSet, adam_step, backward, embed_graph, init_params, lr_schedule, renormalize_rows
from .utils import rng_for
from .views import augment

CLASSIFIER = "classifier.w"


def margin_schedule(epoch: int, cfg: AamConfig) -> float:
    """Linear ramp from 0 to margin_max over warmup_epochs, then constant."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    if cfg.warmup_epochs == 0:
        return cfg.margin_max
    return min(epoch / cfg.warmup_epochs, 1.0) * cfg.margin_max


def aam_loss(e, labels, w, margin: float, scale: float):
    """Additive-angular-margin softmax cross-entropy.

    e: (N, D) embeddings (Tensor or ndarray), labels: (N,) ints,
    w: (C, D) class weights. The target logit becomes cos(theta_y + m)
    via the cos/sin expansion with cos(theta) clamped away from +-1.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    is_tensor = isinstance(e, Tensor) or isinstance(w, Tensor)
    et = e if isinstance(e, Tensor) else Tensor(np.atleast_2d(np.asarray(e, dtype=np.float64)))
    wt = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=et.dtype))
    n, c = et.shape[0], wt.shape[0]
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    if len(labels) != n:
        raise IndexError(f"{len(labels)} labels for {n} embeddings")

    ehat = ad.l2_normalize(et, axis=-1)
    what = ad.l2_normalize(wt, axis=-1)
    cos = ad.matmul(ehat, ad.transpose(what))  # (N, C)
    onehot = np.zeros((n, c), dtype=cos.dtype)
    onehot[np.arange(n), labels] = 1.0
    cos_y = ad.tsum(ad.mul(cos, onehot), axis=1, keepdims=True)  # (N, 1)
    cos_y = ad.clip(cos_y, -1.0 + 1e-7, 1.0 - 1e-7)
    sin_y = ad.sqrt(1.0 - ad.square(cos_y))
    target = ad.sub(ad.mul(cos_y, float(np.cos(margin))), ad.mul(sin_y, float(np.sin(margin))))
    logits = ad.add(ad.mul(cos, 1.0 - onehot), ad.mul(target, onehot))
    logp = ad.log_softmax(ad.mul(logits, float(scale)), axis=-1)
    loss = ad.neg(ad.tmean(ad.tsum(ad.mul(logp, onehot), axis=1)))
    return loss if is_tensor else loss.item()


def _label_map(labels) -> dict:
    mapping = getattr(labels, "labels", labels)
    return dict(mapping)


def _dense_classes(label_map: dict) -> tuple:
    distinct = sorted(set(label_map.values()))
    if len(distinct) < 2:
        raise ConfigurationError("AAM training needs at least 2 distinct classes")
    remap = {v: i for i, v in enumerate(distinct)}
    return {u: remap[v] for u, v in label_map.items()}, len(distinct)


def _random_chunk(w: Waveform, n: int, rng) -> Waveform:
    start = int(rng.integers(0, len(w) - n + 1))
    return Waveform(w.samples[start:start + n], w.sample_rate)


def _train_loop(p: ParamSet, manifest: CorpusManifest, dense: dict, records,
                feat_cfg: FeatureConfig, aug_cfg: AugmentConfig,
                margin_for_epoch, scale: float, epochs: int, batch_size: int,
                base_lr: float, warmup_epochs: int, min_ratio: float,
                chunk_seconds: float, seed: int, trainable=None) -> tuple:
    """Shared chunk-train loop for stage 2 and fine-tuning.

    `trainable`: tensor-name filter; None trains everything.
    """
    chunk = int(round(chunk_seconds * manifest.sample_rate))
    opt_state = None
    report = []
    for epoch in range(epochs):
        t0 = time.monotonic()
        margin = margin_for_epoch(epoch)
        lr = lr_schedule(base_lr, epoch, epochs, warmup_epochs, min_ratio)
        order = rng_for(seed, "order", str(epoch)).permutation(len(records))
        losses = []
        for start in range(0, len(order), batch_size):
            batch_recs = [records[i] for i in order[start:start + batch_size]]
            feats, labels = [], []
            for rec in batch_recs:
                rng = rng_for(seed, "chunk", str(epoch), rec.utt_id)
                w = load_waveform(rec.source(), manifest.sample_rate)
                seg = _random_chunk(w, chunk, rng)
                seg = augment(seg, manifest, aug_cfg, int(rng.integers(0, 2 ** 62)))
                fm = st_mean_normalize(logmel(seg, feat_cfg), feat_cfg.norm_window_ms)
                feats.append(fm.frames)
                labels.append(dense[rec.utt_id])
            x = np.stack(feats).astype(np.float32)
            y = np.asarray(labels)

            def loss_fn(pt, _):
                e = embed_graph(pt, Tensor(x))
                return aam_loss(e, y, pt[CLASSIFIER], margin, scale)

            value, grads = backward(p, None, loss_fn)
            if trainable is not None:
                grads = {k: g for k, g in grads.items() if k in trainable}
            p, opt_state = adam_step(p, grads, opt_state, lr)
            p = renormalize_rows(p, CLASSIFIER)
            losses.append(value)
        report.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "margin": float(margin),
            "wall_ms": int((time.monotonic() - t0) * 1000),
        })
    return p, report


def _prepare(manifest: CorpusManifest, labels, chunk_seconds: float) -> tuple:
    label_map = _label_map(labels)
    speech = manifest.speech()
    missing = [rec.utt_id for rec in speech if rec.utt_id not in label_map]
    if missing:
        raise CoverageError(f"labels missing for utterances: {', '.join(sorted(missing))}")
    dense, n_classes = _dense_classes({rec.utt_id: label_map[rec.utt_id] for rec in speech})
    records = [rec for rec in speech if rec.duration >= chunk_seconds]
    if not records:
        raise ConfigurationError(f"no utterance is >= chunk_seconds={chunk_seconds}")
    return dense, n_classes, records


def train_supervised(manifest: CorpusManifest, labels, net_cfg: NetworkConfig,
                     aam_cfg: AamConfig, train_cfg: TrainConfig,
                     feat_cfg: FeatureConfig) -> Checkpoint:
    """Stage 2: re-initialized backbone trained on augmented fixed-length
    chunks with AAM softmax and margin warmup."""
    net_cfg.validate()
    aam_cfg.validate()
    train_cfg.validate()
    dense, n_classes, records = _prepare(manifest, labels, train_cfg.chunk_seconds)
    if aam_cfg.n_classes and aam_cfg.n_classes != n_classes:
        raise ConfigurationError(
            f"aam.n_classes={aam_cfg.n_classes} but labels define {n_classes} classes")

    p = init_params(net_cfg, None, feat_cfg.n_mels, seed=train_cfg.seed)
    rng = rng_for(train_cfg.seed, "classifier")
    w = rng.standard_normal((n_classes, net_cfg.embed_dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    p.tensors[CLASSIFIER] = w.astype(np.float32)
    p.partition[CLASSIFIER] = POST

    p, report = _train_loop(
        p, manifest, dense, records, feat_cfg, train_cfg.augment,
        lambda e: margin_schedule(e, aam_cfg), aam_cfg.scale,
        train_cfg.epochs, train_cfg.batch_size, train_cfg.lr,
        train_cfg.lr_warmup_epochs, train_cfg.lr_min_ratio,
        train_cfg.chunk_seconds, train_cfg.seed)

    ckpt = Checkpoint(
        config={
            "network": dataclasses.asdict(net_cfg),
            "aam": dataclasses.asdict(aam_cfg),
            "train": dataclasses.asdict(train_cfg),
            "features": dataclasses.asdict(feat_cfg),
            "sample_rate": manifest.sample_rate,
            "n_classes": n_classes,
        },
        meta={"stage": "supervised", "embed_prefix": "", "seed": train_cfg.seed,
              "report": report},
    )
    store_param_set(ckpt, p, "")
    return ckpt


def large_margin_finetune(ckpt: Checkpoint, manifest: CorpusManifest, labels,
                          feat_cfg: FeatureConfig, aam_cfg: AamConfig,
                          aug_cfg: AugmentConfig, chunk_seconds: float = 3.0,
                          epochs: int = 2, lr: float = 5e-4, batch_size: int = 32,
                          seed: int = 0) -> Checkpoint:
    """Stage 3 tail: fixed large margin, longer chunks, post-pooling tensors
    and class weights only; pre-pooling bytes are untouched."""
    p = ckpt.param_set("")
    if CLASSIFIER not in p.tensors:
        raise CheckpointError("checkpoint lacks class weights; run supervised training first")
    untagged = [k for k in p.tensors if p.partition.get(k, "none") == "none"]
    if untagged:
        raise CheckpointError(f"checkpoint lacks pre/post partition for: {', '.join(untagged)}")
    dense, n_classes, records = _prepare(manifest, labels, chunk_seconds)
    if p.tensors[CLASSIFIER].shape[0] != n_classes:
        raise ConfigurationError(
            f"checkpoint trained with {p.tensors[CLASSIFIER].shape[0]} classes, labels define {n_classes}")

    trainable = {k for k in p.tensors if p.partition[k] == POST}
    p, report = _train_loop(
        p, manifest, dense, records, feat_cfg, aug_cfg,
        lambda e: aam_cfg.large_margin, aam_cfg.scale,
        epochs, batch_size, lr, 0, 1.0, chunk_seconds, seed,
        trainable=trainable)

    out = Checkpoint(
        config=dict(ckpt.config, finetune={"chunk_seconds": chunk_seconds,
                                           "epochs": epochs, "lr": lr,
                                           "margin": aam_cfg.large_margin}),
        meta={"stage": "finetune", "embed_prefix": "", "seed": seed,
              "chunk_seconds": chunk_seconds, "report": report},
    )
    store_param_set(out, p, "")
    return out
