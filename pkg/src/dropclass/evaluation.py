"""Verification scoring and diagnostics.

Cosine trial scoring, equal error rate via a threshold sweep with linear
interpolation at the FAR/FRR crossing, KL divergence to the uniform
distribution (in nats), and a two-level bootstrap of ranked average class
probabilities (classes resampled with replacement, then utterances within
each class).
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import rng, schedule
from .corpus import LabeledCorpus
from .errors import EmptyDataError, NumericError, ValidationError
from .model import Model


def extract_all(model: Model, utterances):
    """Full-utterance embeddings keyed by utt_id."""
    utts = list(utterances)
    if not utts:
        raise EmptyDataError("no utterances to embed")
    embs = schedule._embed_all(model.params, utts)
    return {u.utt_id: embs[i] for i, u in enumerate(utts)}


def cosine_score(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cannot cosine-score a zero embedding")
    return float(a @ b / (na * nb))


def score_trials(model: Model, utterances, trial_list):
    """Cosine scores for every trial; returns list of (a, b, score, is_target)."""
    embs = extract_all(model, utterances)
    out = []
    for a, b, is_target in trial_list.trials:
        if a not in embs or b not in embs:
            raise KeyError(f"trial references unknown utterance {a if a not in embs else b!r}")
        out.append((a, b, cosine_score(embs[a], embs[b]), is_target))
    return out


class EerResult(NamedTuple):
    eer: float
    threshold: float
    degenerate: bool


def eer(target_scores, nontarget_scores) -> EerResult:
    """Equal error rate from a sweep over all distinct score thresholds.

    At threshold t, FAR(t) is the fraction of nontargets >= t and FRR(t)
    the fraction of targets < t.  The returned rate is linearly
    interpolated between the two adjacent operating points where FAR - FRR
    changes sign.  If no crossing exists among the finite thresholds (for
    example, all scores equal), the sweep is extended with a virtual
    all-reject endpoint and the result is flagged degenerate.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise ValidationError("need at least one target and one nontarget score")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise NumericError("scores must be finite")

    thresholds = np.unique(np.concatenate([tar, non]))
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size

    degenerate = False
    diff = far - frr
    if diff[-1] > 0:
        # no crossing within the data: append an all-reject endpoint
        thresholds = np.append(thresholds, thresholds[-1] + 1.0)
        far = np.append(far, 0.0)
        frr = np.append(frr, 1.0)
        diff = np.append(diff, -1.0)
        degenerate = True

    k = int(np.argmax(diff <= 0))
    if diff[k] == 0.0:
        return EerResult(float(far[k]), float(thresholds[k]), degenerate)
    # interpolate between operating points k-1 (diff > 0) and k (diff < 0)
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    rate = far[k - 1] + alpha * (far[k] - far[k - 1])
    thr = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return EerResult(float(rate), float(thr), degenerate)


def eer_from_scored(scored) -> EerResult:
    """EER from (a, b, score, is_target) records or (score, is_target) pairs."""
    tar, non = [], []
    for rec in scored:
        score, is_target = rec[-2], rec[-1]
        (tar if is_target else non).append(score)
    return eer(tar, non)


def kl_to_uniform(p):
    """KL divergence from p to the uniform distribution over its support, in nats."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("probability vector must be nonnegative and sum to 1")
    m = p.size
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * m)))


@dataclass
class RankedProbabilityReport:
    median: np.ndarray   # per-rank 50% quantile, descending
    low: np.ndarray      # per-rank 2.5% quantile
    high: np.ndarray     # per-rank 97.5% quantile
    n_bootstrap: int

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("rank,p_median,p_low,p_high\n")
            for r in range(self.median.size):
                fh.write(f"{r},{self.median[r]:.12g},{self.low[r]:.12g},{self.high[r]:.12g}\n")


def bootstrap_ranked_probabilities(model: Model, data, n_bootstrap=300, seed=0):
    """Bootstrap bands for the descending-sorted average class probability.

    Each replica resamples classes with replacement (keeping the class
    count), then utterances within each chosen class with replacement, and
    computes the average probability under the full head matrix.
    """
    if n_bootstrap < 1:
        raise ValidationError("n_bootstrap must be >= 1")
    utts = data.utterances if isinstance(data, LabeledCorpus) else list(data)
    if not utts:
        raise EmptyDataError("bootstrap needs at least one utterance")
    groups = {}
    for u in utts:
        groups.setdefault(u.class_id, []).append(u)
    classes = sorted(groups)

    # embed once; replicas only reweight utterances
    embs = schedule._embed_all(model.params, utts).astype(np.float64)
    z = embs @ model.head.w.astype(np.float64).T
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    index_of = {u.utt_id: i for i, u in enumerate(utts)}

    curves = np.empty((n_bootstrap, model.n_classes))
    for rep in range(n_bootstrap):
        g = rng.stream(seed, rng.BOOTSTRAP, rep)
        chosen_rows = []
        picked = g.choice(len(classes), size=len(classes), replace=True)
        for ci in picked:
            members = groups[classes[int(ci)]]
            take = g.choice(len(members), size=len(members), replace=True)
            chosen_rows.extend(index_of[members[int(j)].utt_id] for j in take)
        p_avg = probs[chosen_rows].mean(axis=0)
        curves[rep] = np.sort(p_avg)[::-1]

    low, median, high = np.quantile(curves, [0.025, 0.5, 0.975], axis=0)
    return RankedProbabilityReport(median, low, high, n_bootstrap)


# ---------------------------------------------------------------------------
# file formats

def write_scores(scored, path):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, score, is_target in scored:
            fh.write(f"{a}\t{b}\t{score:.9f}\t{1 if is_target else 0}\n")


def read_scores(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            a, b, score, lab = line.split("\t")
            out.append((a, b, float(score), lab == "1"))
    return out


def write_eer_json(result: EerResult, n_target, n_nontarget, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"eer": result.eer, "threshold": result.threshold,
                   "n_target": n_target, "n_nontarget": n_nontarget}, fh, indent=2)
        fh.write("\n")
