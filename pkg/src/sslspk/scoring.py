"""Cosine trial scoring and EER.

EER sweeps thresholds at score midpoints; FAR(t) = P(nontarget >= t),
FRR(t) = P(target < t); the crossing is found by linear interpolation
between the adjacent sweep points where FAR - FRR changes sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .clustering import extract_embeddings
from .config import FeatureConfig
from .corpus import CorpusManifest, TrialList
from .errors import MetricError, NumericError, UnknownIdError


@dataclass(frozen=True)
class ScoreReport:
    scores: tuple  # ((label, utt_a, utt_b, score), ...)
    eer: float
    threshold_at_eer: float

    def to_json(self) -> str:
        n_target = sum(1 for t in self.scores if t[0] == 1)
        return json.dumps({"eer": self.eer, "threshold": self.threshold_at_eer,
                           "n_target": n_target, "n_nontarget": len(self.scores) - n_target})

    def save_scores(self, path):
        with open(path, "w") as fh:
            for _, a, b, s in self.scores:
                fh.write(f"{s:.8f} {a} {b}\n")


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine score undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def score_trials(ckpt: Checkpoint, manifest: CorpusManifest, trials: TrialList,
                 feat_cfg: FeatureConfig | None = None) -> list:
    """One cosine per trial, in trial order: [(label, a, b, score), ...]."""
    for label, a, b in trials.trials:
        for utt in (a, b):
            if utt not in manifest:
                raise UnknownIdError(f"trial references unknown utt_id: {utt}")
    table = extract_embeddings(ckpt, manifest, feat_cfg)
    index = {u: i for i, u in enumerate(table.ids)}
    out = []
    for label, a, b in trials.trials:
        for utt in (a, b):
            if utt not in index:
                raise UnknownIdError(f"trial utt_id is not a speech utterance: {utt}")
        s = cosine_score(table.vectors[index[a]], table.vectors[index[b]])
        out.append((label, a, b, s))
    return out


def compute_eer(scored) -> tuple:
    """(eer, threshold) from [(score, label), ...] with label 1=target."""
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    labels = np.asarray([l for _, l in scored], dtype=np.int64)
    tgt = scores[labels == 1]
    non = scores[labels == 0]
    if len(tgt) == 0 or len(non) == 0:
        raise MetricError("EER needs at least one target and one nontarget score")

    uniq = np.unique(scores)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    cands = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    far = (non[None, :] >= cands[:, None]).mean(axis=1)
    frr = (tgt[None, :] < cands[:, None]).mean(axis=1)
    d = far - frr  # nonincreasing in threshold
    idx = int(np.argmax(d <= 0))
    if d[idx] == 0:
        return float(far[idx]), float(cands[idx])
    # sign change between idx-1 (d > 0) and idx (d < 0)
    a = d[idx - 1] / (d[idx - 1] - d[idx])
    eer = far[idx - 1] + a * (far[idx] - far[idx - 1])
    thr = cands[idx - 1] + a * (cands[idx] - cands[idx - 1])
    return float(eer), float(thr)


def evaluate_trials(ckpt: Checkpoint, manifest: CorpusManifest, trials: TrialList,
                    feat_cfg: FeatureConfig | None = None) -> ScoreReport:
    scored = score_trials(ckpt, manifest, trials, feat_cfg)
    eer, thr = compute_eer([(s, label) for label, _, _, s in scored])
    return ScoreReport(scores=tuple(scored), eer=eer, threshold_at_eer=thr)
