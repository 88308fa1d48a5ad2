"""The differentiable model: 1-D conv trunk, mean+std statistics pooling,
embedding layer, and the projection head (3-layer MLP, L2 norm, unit-norm
prototype rows). Plus backward/grad-check/Adam on named parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NetworkConfig, ProjectionConfig
from .errors import NumericError, ShapeError
from .utils import rng_for

PRE = "pre_pooling"
POST = "post_pooling"

STD_EPS = 1e-6


@dataclass
class ParamSet:
    tensors: dict = field(default_factory=dict)  # name -> ndarray, stable order
    partition: dict = field(default_factory=dict)  # name -> PRE | POST

    def copy(self) -> "ParamSet":
        return ParamSet(tensors={k: v.copy() for k, v in self.tensors.items()},
                        partition=dict(self.partition))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
                        partition=dict(self.partition))

    def as_tensors(self, requires_grad=True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.tensors.items()}

    def n_trunk_layers(self) -> int:
        i = 0
        while f"trunk.{i}.w" in self.tensors:
            i += 1
        return i

    @property
    def embed_dim(self) -> int:
        return self.tensors["embed.w"].shape[1]

    def check_congruent(self, other: "ParamSet"):
        if list(self.tensors) != list(other.tensors):
            raise ShapeError("parameter sets name mismatch")
        for k in self.tensors:
            if self.tensors[k].shape != other.tensors[k].shape:
                raise ShapeError(f"parameter shape mismatch at {k}")


def init_params(net_cfg: NetworkConfig, proj_cfg: ProjectionConfig | None,
                n_mels: int, seed: int, dtype=np.float32) -> ParamSet:
    """Fresh parameters; head layers included iff proj_cfg given."""
    net_cfg.validate()
    rng = rng_for(seed, "init")
    p = ParamSet()
    cin = n_mels
    k = net_cfg.frame_kernel
    for i, cout in enumerate(net_cfg.trunk_channels):
        std = np.sqrt(2.0 / (cin * k))
        p.tensors[f"trunk.{i}.w"] = (rng.standard_normal((cout, cin, k)) * std).astype(dtype)
        p.tensors[f"trunk.{i}.b"] = np.zeros(cout, dtype=dtype)
        p.partition[f"trunk.{i}.w"] = PRE
        p.partition[f"trunk.{i}.b"] = PRE
        cin = cout
    d = net_cfg.embed_dim
    p.tensors["embed.w"] = (rng.standard_normal((2 * cin, d)) / np.sqrt(2 * cin)).astype(dtype)
    p.tensors["embed.b"] = np.zeros(d, dtype=dtype)
    p.partition["embed.w"] = POST
    p.partition["embed.b"] = POST
    if proj_cfg is not None:
        proj_cfg.validate()
        dims = [(d, proj_cfg.hidden_dim), (proj_cfg.hidden_dim, proj_cfg.hidden_dim),
                (proj_cfg.hidden_dim, proj_cfg.bottleneck_dim)]
        for i, (fin, fout) in enumerate(dims, start=1):
            p.tensors[f"head.fc{i}.w"] = (rng.standard_normal((fin, fout)) * np.sqrt(2.0 / fin)).astype(dtype)
            p.tensors[f"head.fc{i}.b"] = np.zeros(fout, dtype=dtype)
            p.partition[f"head.fc{i}.w"] = POST
            p.partition[f"head.fc{i}.b"] = POST
        proto = rng.standard_normal((proj_cfg.k, proj_cfg.bottleneck_dim))
        proto /= np.linalg.norm(proto, axis=1, keepdims=True)
        p.tensors["head.proto"] = proto.astype(dtype)
        p.partition["head.proto"] = POST
    return p


def embed_graph(pt: dict, x: Tensor) -> Tensor:
    """(N, T, n_mels) features -> (N, embed_dim) embeddings."""
    h = x
    i = 0
    while f"trunk.{i}.w" in pt:
        h = ad.relu(ad.conv1d(h, pt[f"trunk.{i}.w"], pt[f"trunk.{i}.b"]))
        i += 1
    n, _, c = h.shape
    mu = ad.tmean(h, axis=1, keepdims=True)  # (N, 1, C)
    var = ad.tmean(ad.square(ad.sub(h, mu)), axis=1)  # (N, C)
    sd = ad.sqrt(ad.add(var, STD_EPS))
    stats = ad.concat([ad.reshape(mu, (n, c)), sd], axis=1)
    return ad.add(ad.matmul(stats, pt["embed.w"]), pt["embed.b"])


def head_graph(pt: dict, e: Tensor) -> Tensor:
    """(N, embed_dim) -> (N, K) cosine logits in [-1, 1]."""
    h = ad.gelu(ad.add(ad.matmul(e, pt["head.fc1.w"]), pt["head.fc1.b"]))
    h = ad.gelu(ad.add(ad.matmul(h, pt["head.fc2.w"]), pt["head.fc2.b"]))
    z = ad.add(ad.matmul(h, pt["head.fc3.w"]), pt["head.fc3.b"])
    zn = ad.l2_normalize(z, axis=-1)
    protos = ad.l2_normalize(pt["head.proto"], axis=-1)
    return ad.matmul(zn, ad.transpose(protos))


def _as_batch(f) -> np.ndarray:
    frames = getattr(f, "frames", f)
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1] == 0:
        raise ShapeError(f"expected nonempty (T, n_mels) features, got shape {frames.shape}")
    return frames


def forward_embed(p: ParamSet, f) -> np.ndarray:
    """Inference-path embedding; accepts one FeatureMatrix/(T,M) array or a
    stacked (N,T,M) batch."""
    frames = _as_batch(f)
    dtype = p.tensors["embed.w"].dtype
    x = Tensor(frames.astype(dtype))
    out = embed_graph(p.as_tensors(requires_grad=False), x).data
    return out[0] if np.asarray(getattr(f, "frames", f)).ndim == 2 else out


def forward_head(p: ParamSet, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e)
    single = e.ndim == 1
    if single:
        e = e[None]
    if e.shape[1] != p.embed_dim:
        raise ShapeError(f"embedding dim {e.shape[1]} != {p.embed_dim}")
    dtype = p.tensors["embed.w"].dtype
    out = head_graph(p.as_tensors(requires_grad=False), Tensor(e.astype(dtype))).data
    return out[0] if single else out


def backward(p: ParamSet, batch, loss_fn) -> tuple:
    """loss_fn(param_tensors, batch) -> scalar Tensor; returns (loss, grads)."""
    pt = p.as_tensors(requires_grad=True)
    loss = loss_fn(pt, batch)
    value = loss.item()
    if not np.isfinite(value):
        for name, arr in p.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite loss; first non-finite tensor: {name}")
        raise NumericError("non-finite loss with finite parameters")
    loss.backward()
    grads = {k: (pt[k].grad if pt[k].grad is not None else np.zeros_like(p.tensors[k]))
             for k in p.tensors}
    return value, grads


def grad_check(p: ParamSet, batch, loss_fn, eps: float,
               n_coords: int = 4, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences
    over sampled coordinates."""
    _, grads = backward(p, batch, loss_fn)

    def eval_loss(tensors: dict) -> float:
        pt = {k: Tensor(v) for k, v in tensors.items()}
        return loss_fn(pt, batch).item()

    rng = rng_for(seed, "gradcheck")
    worst = 0.0
    for name, arr in p.tensors.items():
        flat_idx = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            bumped = {k: v.copy() if k == name else v for k, v in p.tensors.items()}
            bumped[name][idx] = arr[idx] + eps
            up = eval_loss(bumped)
            bumped[name][idx] = arr[idx] - eps
            down = eval_loss(bumped)
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grads[name][idx])
            err = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def adam_step(p: ParamSet, grads: dict, state: dict | None, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple:
    """One bias-corrected Adam update over the tensors named in `grads`;
    untouched tensors are carried over by reference (bit-identical)."""
    b1, b2 = betas
    if state is None:
        state = {"t": 0, "m": {}, "v": {}}
    t = state["t"] + 1
    new_m, new_v = dict(state["m"]), dict(state["v"])
    new_tensors = dict(p.tensors)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor: {name}")
        theta = p.tensors[name]
        m = new_m.get(name)
        v = new_v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        g = g.astype(theta.dtype, copy=False)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_tensors[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    out = ParamSet(tensors=new_tensors, partition=dict(p.partition))
    return out, {"t": t, "m": new_m, "v": new_v}


def renormalize_rows(p: ParamSet, name: str) -> ParamSet:
    """Project the named matrix's rows back to unit norm (weight-norm scale
    stays fixed at 1)."""
    w = p.tensors[name]
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    norms = np.maximum(norms, np.finfo(w.dtype).tiny)
    tensors = dict(p.tensors)
    tensors[name] = (w / norms).astype(w.dtype)
    return ParamSet(tensors=tensors, partition=dict(p.partition))


def lr_schedule(base_lr: float, epoch: int, total_epochs: int,
                warmup_epochs: int, min_ratio: float) -> float:
    """Linear warmup then cosine decay to min_ratio * base_lr."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - warmup_epochs)
    progress = min(1.0, (epoch - warmup_epochs) / span)
    lo = base_lr * min_ratio
    return lo + (base_lr - lo) * 0.5 * (1.0 + np.cos(np.pi * progress))
