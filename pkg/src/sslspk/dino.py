"""Self-distillation stage: sharpened+centered teacher targets, cross-view
cross-entropy for the student, EMA teacher update, center update, and the
stage-1 training loop over multi-crop ViewSets."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, store_param_set
from .config import DinoConfig, FeatureConfig, NetworkConfig, ProjectionConfig
from .corpus import CorpusManifest, load_waveform
from .errors import ConfigurationError
from .network import ParamSet, adam_step, backward, embed_graph, head_graph, init_params, lr_schedule, renormalize_rows
from .utils import rng_for
from .views import make_view_set, view_frames

COLLAPSE_KL = 1e-4


def teacher_probs(logits: np.ndarray, c: np.ndarray, tau_teacher: float) -> np.ndarray:
    """softmax((logits - c) / tau) rowwise, max-subtracted for stability."""
    if tau_teacher <= 0:
        raise ConfigurationError("tau_teacher must be positive")
    z = (np.asarray(logits, dtype=np.float64) - np.asarray(c, dtype=np.float64)) / tau_teacher
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_log_probs(logits, tau_student: float):
    """log-softmax(logits / tau) rowwise; Tensor in, Tensor out (gradient
    flows); ndarray in, ndarray out."""
    if tau_student <= 0:
        raise ConfigurationError("tau_student must be positive")
    is_tensor = isinstance(logits, Tensor)
    t = logits if is_tensor else Tensor(np.asarray(logits, dtype=np.float64))
    out = ad.log_softmax(ad.mul(t, 1.0 / tau_student), axis=-1)
    return out if is_tensor else out.data


def dino_loss(student_logits, teacher_logits: np.ndarray, c: np.ndarray,
              tau_teacher: float, tau_student: float):
    """Mean over ordered (global, other-view) pairs of H(P_teacher, P_student).

    `student_logits`: (V, K) rows, global views first; `teacher_logits`:
    (n_global, K) rows, treated as constants.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.ndim != 2 or teacher_logits.shape[0] < 2:
        raise ConfigurationError("dino loss needs at least 2 global views")
    n_global = teacher_logits.shape[0]
    is_tensor = isinstance(student_logits, Tensor)
    s = student_logits if is_tensor else Tensor(np.asarray(student_logits, dtype=np.float64))
    n_views = s.shape[0]
    if n_views < n_global:
        raise ConfigurationError("student logits must cover the global views")

    p_t = teacher_probs(teacher_logits, c, tau_teacher)
    logq = student_log_probs(s, tau_student)
    colsum = ad.tsum(logq, axis=0)
    total = None
    for g in range(n_global):
        cross = ad.tsum(ad.mul(ad.sub(colsum, logq[g]), p_t[g]))
        total = cross if total is None else ad.add(total, cross)
    n_pairs = n_global * (n_views - 1)
    loss = ad.mul(ad.neg(total), 1.0 / n_pairs)
    return loss if is_tensor else loss.item()


def update_center(c: np.ndarray, teacher_logits_batch: np.ndarray, m: float) -> np.ndarray:
    """c' = m*c + (1-m)*mean over rows; float64 arithmetic."""
    batch = np.asarray(teacher_logits_batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None]
    return m * np.asarray(c, dtype=np.float64) + (1.0 - m) * batch.mean(axis=0)


def ema_update(teacher: ParamSet, student: ParamSet, lam: float) -> ParamSet:
    teacher.check_congruent(student)
    tensors = {k: lam * teacher.tensors[k] + (1.0 - lam) * student.tensors[k]
               for k in teacher.tensors}
    return ParamSet(tensors=tensors, partition=dict(teacher.partition))


def kl_from_uniform(probs: np.ndarray) -> float:
    """Mean KL(p || uniform) over rows; 0 means fully collapsed-to-uniform."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    k = p.shape[-1]
    ent = -np.sum(np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0), axis=-1)
    return float(np.mean(np.log(k) - ent))


@dataclasses.dataclass
class DinoState:
    student: ParamSet
    teacher: ParamSet
    center: np.ndarray
    opt_state: dict | None
    epoch: int


def _eligible_speech(manifest: CorpusManifest, crop_cfg) -> list:
    need = crop_cfg.global_seconds
    return [rec for rec in manifest.speech() if rec.duration >= need]


def train_dino(manifest: CorpusManifest, net_cfg: NetworkConfig,
               proj_cfg: ProjectionConfig, dino_cfg: DinoConfig,
               feat_cfg: FeatureConfig) -> Checkpoint:
    """Stage-1 training; returns a checkpoint whose embedding model is the
    teacher (student kept alongside for audit). Deterministic per seed."""
    dino_cfg.validate()
    net_cfg.validate()
    proj_cfg.validate()
    records = _eligible_speech(manifest, dino_cfg.crop)
    if len(records) < dino_cfg.batch_size:
        raise ConfigurationError(
            f"need at least batch_size={dino_cfg.batch_size} speech utterances of "
            f">= {dino_cfg.crop.global_seconds} s, found {len(records)}")
    seed = dino_cfg.seed
    student = init_params(net_cfg, proj_cfg, feat_cfg.n_mels, seed=seed)
    state = DinoState(student=student, teacher=student.copy(),
                      center=np.zeros(proj_cfg.k, dtype=np.float64),
                      opt_state=None, epoch=0)
    n_g, n_l = dino_cfg.crop.n_global, dino_cfg.crop.n_local
    dtype = np.float32
    report = []

    for epoch in range(dino_cfg.epochs):
        t0 = time.monotonic()
        lr = lr_schedule(dino_cfg.lr, epoch, dino_cfg.epochs,
                         dino_cfg.lr_warmup_epochs, dino_cfg.lr_min_ratio)
        order = rng_for(seed, "order", str(epoch)).permutation(len(records))
        losses, kls = [], []
        for start in range(0, len(order), dino_cfg.batch_size):
            batch_recs = [records[i] for i in order[start:start + dino_cfg.batch_size]]
            g_stack, l_stack = [], []
            for rec in batch_recs:
                w = load_waveform(rec.source(), manifest.sample_rate)
                vseed = int(rng_for(seed, "views", str(epoch), rec.utt_id).integers(0, 2 ** 62))
                vs = make_view_set(w, manifest, dino_cfg.crop, dino_cfg.augment,
                                   feat_cfg, vseed, source_utt=rec.utt_id)
                g, l = view_frames(vs)
                g_stack.append(g)
                l_stack.append(l)
            b = len(batch_recs)
            globals_np = np.concatenate(g_stack).astype(dtype)
            locals_np = np.concatenate(l_stack).astype(dtype) if n_l else None

            t_pt = state.teacher.as_tensors(requires_grad=False)
            t_logits = head_graph(t_pt, embed_graph(t_pt, Tensor(globals_np))).data

            def loss_fn(pt, _):
                lg = head_graph(pt, embed_graph(pt, Tensor(globals_np)))
                ll = head_graph(pt, embed_graph(pt, Tensor(locals_np))) if n_l else None
                total = None
                for u in range(b):
                    rows = [lg[u * n_g:(u + 1) * n_g]]
                    if n_l:
                        rows.append(ll[u * n_l:(u + 1) * n_l])
                    s_logits = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
                    lu = dino_loss(s_logits, t_logits[u * n_g:(u + 1) * n_g],
                                   state.center, dino_cfg.tau_teacher, dino_cfg.tau_student)
                    total = lu if total is None else ad.add(total, lu)
                return ad.mul(total, 1.0 / b)

            value, grads = backward(state.student, None, loss_fn)
            state.student, state.opt_state = adam_step(state.student, grads, state.opt_state, lr)
            state.student = renormalize_rows(state.student, "head.proto")
            state.teacher = ema_update(state.teacher, state.student, dino_cfg.ema_lambda)
            state.center = update_center(state.center, t_logits, dino_cfg.center_momentum)
            losses.append(value)
            kls.append(kl_from_uniform(teacher_probs(t_logits, state.center, dino_cfg.tau_teacher)))
        state.epoch = epoch + 1
        line = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "kl_from_uniform": float(np.mean(kls)),
            "wall_ms": int((time.monotonic() - t0) * 1000),
        }
        if line["kl_from_uniform"] < COLLAPSE_KL:
            line["warning"] = "collapse: teacher outputs near-uniform for a full epoch"
        report.append(line)

    ckpt = Checkpoint(
        config={
            "network": dataclasses.asdict(net_cfg),
            "projection": dataclasses.asdict(proj_cfg),
            "dino": dataclasses.asdict(dino_cfg),
            "features": dataclasses.asdict(feat_cfg),
            "sample_rate": manifest.sample_rate,
        },
        meta={"stage": "dino", "embed_prefix": "teacher/", "seed": seed, "report": report},
    )
    store_param_set(ckpt, state.teacher, "teacher/")
    store_param_set(ckpt, state.student, "student/")
    ckpt.tensors["center"] = state.center.astype(np.float32)
    ckpt.partition["center"] = "none"
    return ckpt
