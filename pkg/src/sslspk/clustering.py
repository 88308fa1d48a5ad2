"""Pseudo-label machinery: embedding extraction, spherical k-means with
k-means++ seeding, label-quality diagnostics, and the iterate-until-stable
control loop around supervised training."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import AamConfig, FeatureConfig, IterationPlan, NetworkConfig, TrainConfig
from .corpus import CorpusManifest, load_waveform
from .errors import CapacityError
from .features import logmel, st_mean_normalize
from .network import forward_embed
from .supervised import train_supervised
from .utils import parallel_map, rng_for


@dataclass(frozen=True)
class EmbeddingTable:
    ids: tuple
    vectors: np.ndarray  # (N, D), unit rows
    model_id: str

    def row(self, utt_id: str) -> np.ndarray:
        return self.vectors[self.ids.index(utt_id)]


@dataclass(frozen=True)
class ClusterAssignment:
    labels: dict  # utt_id -> cluster index in [0, k)
    k: int
    objective: float

    def save(self, path):
        with open(path, "w") as fh:
            for utt_id, lab in self.labels.items():
                fh.write(f"{utt_id} {lab}\n")

    @classmethod
    def load(cls, path, k: int | None = None, objective: float = float("nan")) -> "ClusterAssignment":
        labels = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                utt_id, lab = line.split()
                labels[utt_id] = int(lab)
        return cls(labels=labels, k=k if k is not None else max(labels.values()) + 1,
                   objective=objective)


def _feat_cfg_from(ckpt: Checkpoint, feat_cfg) -> FeatureConfig:
    if feat_cfg is not None:
        return feat_cfg
    raw = dict(ckpt.config.get("features", {}))
    for key in ("fmin", "fmax"):
        if key in raw and raw[key] is None:
            raw[key] = 0.0
    return FeatureConfig(**raw)


def extract_embeddings(ckpt: Checkpoint, manifest: CorpusManifest,
                       feat_cfg: FeatureConfig | None = None) -> EmbeddingTable:
    """One unit-norm embedding per speech utterance, full utterance, no
    augmentation. Parallel over utterances; output order is canonical."""
    feat_cfg = _feat_cfg_from(ckpt, feat_cfg)
    p = ckpt.param_set()
    records = manifest.speech()

    def one(rec):
        w = load_waveform(rec.source(), manifest.sample_rate)
        fm = st_mean_normalize(logmel(w, feat_cfg), feat_cfg.norm_window_ms)
        e = forward_embed(p, fm).astype(np.float64)
        return e / max(np.linalg.norm(e), np.finfo(np.float64).tiny)

    vectors = np.stack(parallel_map(one, records))
    return EmbeddingTable(ids=tuple(r.utt_id for r in records), vectors=vectors,
                          model_id=ckpt.content_id())


def _kmeanspp_seed(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    best = x @ x[chosen[0]]
    for _ in range(1, k):
        w = np.maximum(1.0 - best, 0.0)
        w[chosen] = 0.0
        total = w.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in set(chosen)]
            idx = remaining[int(rng.integers(0, len(remaining)))]
        else:
            idx = int(rng.choice(n, p=w / total))
        chosen.append(idx)
        best = np.maximum(best, x @ x[idx])
    return x[chosen].copy()


def cosine_kmeans(table: EmbeddingTable, k: int, max_kmeans_iters: int = 100,
                  seed: int = 0) -> ClusterAssignment:
    """Spherical k-means: assign by max cosine, centroid = normalized member
    mean, empty clusters re-seeded at the worst-served point."""
    x = np.asarray(table.vectors, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise CapacityError(f"k={k} exceeds {n} embeddings")
    rng = rng_for(seed, "kmeans")
    centroids = _kmeanspp_seed(x, k, rng)
    labels = None
    objective = float("inf")
    for _ in range(max_kmeans_iters):
        sims = x @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                c = members.sum(axis=0)
                norm = np.linalg.norm(c)
                if norm > 1e-12:
                    centroids[j] = c / norm
        empty = sorted(set(range(k)) - set(labels.tolist()))
        if empty:
            served = (x * centroids[labels]).sum(axis=1)
            worst = np.argsort(served, kind="stable")
            for j, idx in zip(empty, worst):
                centroids[j] = x[idx]
        objective = float(np.sum(1.0 - (x * centroids[labels]).sum(axis=1)))
    return ClusterAssignment(labels={u: int(l) for u, l in zip(table.ids, labels)},
                             k=k, objective=objective)


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def cluster_metrics(assignment: ClusterAssignment, truth: dict) -> dict:
    """NMI (arithmetic normalization), purity, and nonempty-cluster count
    against hidden ground-truth speaker ids."""
    utts = sorted(assignment.labels)
    clusters = sorted({assignment.labels[u] for u in utts})
    speakers = sorted({truth[u] for u in utts})
    c_idx = {c: i for i, c in enumerate(clusters)}
    s_idx = {s: i for i, s in enumerate(speakers)}
    cont = np.zeros((len(clusters), len(speakers)))
    for u in utts:
        cont[c_idx[assignment.labels[u]], s_idx[truth[u]]] += 1
    n = cont.sum()
    h_u = _entropy(cont.sum(axis=1))
    h_v = _entropy(cont.sum(axis=0))
    mi = 0.0
    pu = cont.sum(axis=1) / n
    pv = cont.sum(axis=0) / n
    for i in range(cont.shape[0]):
        for j in range(cont.shape[1]):
            if cont[i, j] > 0:
                pij = cont[i, j] / n
                mi += pij * np.log(pij / (pu[i] * pv[j]))
    denom = 0.5 * (h_u + h_v)
    nmi = 1.0 if denom == 0 else mi / denom
    purity = float(cont.max(axis=1).sum() / n)
    return {"nmi": float(nmi), "purity": purity, "n_nonempty": len(clusters)}


def _partner_change_fraction(prev: ClusterAssignment, cur: ClusterAssignment) -> float:
    """Fraction of utterances whose same-cluster partner set changed (label
    values are not comparable across iterations)."""
    def groups(a):
        by = {}
        for u, l in a.labels.items():
            by.setdefault(l, set()).add(u)
        return {u: frozenset(by[l]) for u, l in a.labels.items()}
    gp, gc = groups(prev), groups(cur)
    utts = list(gc)
    changed = sum(1 for u in utts if gp.get(u) != gc[u])
    return changed / len(utts)


def run_iterations(manifest: CorpusManifest, initial_ckpt: Checkpoint,
                   plan: IterationPlan, net_cfg: NetworkConfig, aam_cfg: AamConfig,
                   train_cfg: TrainConfig, feat_cfg: FeatureConfig) -> tuple:
    """extract -> cluster -> train, repeated with k fixed, until max_iters or
    the pseudo-label partner change rate drops below reassign_epsilon."""
    plan.validate()
    ckpts, assignments, history = [], [], []
    current = initial_ckpt
    prev_assign = None
    for it in range(plan.max_iters):
        table = extract_embeddings(current, manifest, feat_cfg)
        assign = cosine_kmeans(table, plan.k, plan.kmeans_iters,
                               seed=int(rng_for(train_cfg.seed, "cluster", str(it)).integers(0, 2 ** 62)))
        change = None if prev_assign is None else _partner_change_fraction(prev_assign, assign)
        it_train = dataclasses.replace(
            train_cfg, seed=int(rng_for(train_cfg.seed, "iter", str(it)).integers(0, 2 ** 62)))
        current = train_supervised(manifest, assign, net_cfg, aam_cfg, it_train, feat_cfg)
        ckpts.append(current)
        assignments.append(assign)
        history.append({
            "iteration": it,
            "k": plan.k,
            "kmeans_objective": assign.objective,
            "label_change_fraction": change,
            "n_nonempty": len(set(assign.labels.values())),
        })
        prev_assign = assign
        if change is not None and change < plan.reassign_epsilon:
            break
    return ckpts, assignments, history


def save_embedding_table(table: EmbeddingTable, path):
    """Binary f32 dump (same layout as feature dumps) plus a JSON sidecar."""
    from .features import FeatureMatrix, write_feature_dump
    write_feature_dump(FeatureMatrix(frames=table.vectors, frame_rate=0.0), path)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"utt_ids": list(table.ids), "model_id": table.model_id}))


def load_embedding_table(path) -> EmbeddingTable:
    from .features import read_feature_dump
    fm = read_feature_dump(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    vectors = fm.frames.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors = vectors / np.maximum(norms, np.finfo(np.float64).tiny)
    return EmbeddingTable(ids=tuple(meta["utt_ids"]), vectors=vectors,
                          model_id=meta["model_id"])
