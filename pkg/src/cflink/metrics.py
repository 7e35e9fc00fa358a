"""Ranking metrics, treatment-effect estimates, and the JSON report.

Ties are handled exactly: Hits@K counts positives strictly above the
k-th best negative, AUC gives half credit to score ties, AP shares the
rank of a tied group across its members, and Kendall tau is the tau-a
count over all index pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import CapacityError, ConfigError, DegenerateInputError, ShapeError


def _vec(x) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64).reshape(-1)
    return out


def hits_at_k(pos: np.ndarray, neg: np.ndarray, k: int) -> float:
    """Fraction of positives scoring strictly above the k-th largest
    negative."""
    pos, neg = _vec(pos), _vec(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateInputError("hits@k needs positives and negatives")
    if not 1 <= k <= neg.size:
        raise CapacityError(f"k must lie in [1, {neg.size}], got {k}")
    thr = np.partition(neg, neg.size - k)[neg.size - k]
    return float(np.mean(pos > thr))


def auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) via midranks."""
    pos, neg = _vec(pos), _vec(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateInputError("auc needs positives and negatives")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="stable")
    ranks = np.empty(allv.size)
    ranks[order] = np.arange(1, allv.size + 1, dtype=np.float64)
    # average ranks within tied groups
    sv = allv[order]
    start = 0
    for i in range(1, sv.size + 1):
        if i == sv.size or sv[i] != sv[start]:
            if i - start > 1:
                ranks[order[start:i]] = 0.5 * (start + 1 + i)
            start = i
    rp = ranks[: pos.size].sum()
    return float((rp - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def average_precision(pos: np.ndarray, neg: np.ndarray) -> float:
    """AP with group-level tie sharing.

    Scores are processed as descending distinct levels; every member of
    a tied group sees the same precision cum_pos/cum_total through the
    end of its group.
    """
    pos, neg = _vec(pos), _vec(neg)
    if pos.size == 0 or neg.size == 0:
        raise DegenerateInputError("average precision needs positives and negatives")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    levels, inv = np.unique(scores, return_inverse=True)
    tot = np.bincount(inv, minlength=levels.size).astype(np.float64)
    posc = np.bincount(inv, weights=labels, minlength=levels.size)
    # descending score order
    tot, posc = tot[::-1], posc[::-1]
    cum_t = np.cumsum(tot)
    cum_p = np.cumsum(posc)
    return float(np.sum(posc * (cum_p / cum_t)) / pos.size)


def ate_from_outcomes(tbits, y, y_cf) -> float:
    """Mean treatment effect over pairs: treated pairs contribute
    y - y_cf, control pairs y_cf - y."""
    t, y, ycf = _vec(tbits), _vec(y), _vec(y_cf)
    if not (t.shape == y.shape == ycf.shape):
        raise ShapeError("ate inputs disagree in length")
    if t.size == 0:
        raise DegenerateInputError("ate over an empty batch")
    return float(np.mean(t * (y - ycf) + (1.0 - t) * (ycf - y)))


def ate_observed(tbits, labels, a_cf) -> float:
    return ate_from_outcomes(tbits, labels, a_cf)


def ate_estimated(tbits, probs, probs_cf) -> float:
    return ate_from_outcomes(tbits, probs, probs_cf)


def kendall_tau(a, b) -> float:
    """tau-a: (concordant - discordant) / (n choose 2); ties add zero."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ShapeError("kendall tau inputs disagree in length")
    n = a.size
    if n < 2:
        raise DegenerateInputError("kendall tau needs at least 2 items")
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    num = float(np.sum(np.triu(sa * sb, k=1)))
    return num / (n * (n - 1) / 2.0)


_SCHEMA_CACHE = {}


def _schema(name: str) -> dict:
    if name not in _SCHEMA_CACHE:
        text = resources.files("cflink.schemas").joinpath(name).read_text()
        _SCHEMA_CACHE[name] = json.loads(text)
    return _SCHEMA_CACHE[name]


def validate_report(obj: dict, name: str = "report.schema.json") -> None:
    import jsonschema

    jsonschema.validate(obj, _schema(name))


@dataclass
class MetricsReport:
    """Per-seed evaluation bundle, serializable to schema-checked JSON."""

    seed: int
    hits: dict  # {k: value}
    auc: float
    ap: float
    ate_obs: float | None = None
    ate_est: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "seed": int(self.seed),
            "hits_at_k": {str(k): float(v) for k, v in sorted(self.hits.items())},
            "auc": float(self.auc),
            "ap": float(self.ap),
            "ate_obs": None if self.ate_obs is None else float(self.ate_obs),
            "ate_est": None if self.ate_est is None else float(self.ate_est),
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        obj = self.to_dict()
        validate_report(obj)
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def evaluate_split(params, graph, pos_pairs, neg_pairs, treatment, ks=(20, 50, 100)):
    """Hits/AUC/AP of a trained model on held-out positives vs negatives."""
    from .training import predict

    tp = treatment.pair_treatments(pos_pairs).astype(np.float64)
    tn = treatment.pair_treatments(neg_pairs).astype(np.float64)
    pos = predict(params, graph, pos_pairs, tp)
    neg = predict(params, graph, neg_pairs, tn)
    hits = {k: hits_at_k(pos, neg, k) for k in ks if 1 <= k <= neg.size}
    return hits, auc(pos, neg), average_precision(pos, neg)


def aggregate_reports(reports: list) -> dict:
    """Across-seed mean and sample std for every numeric metric."""
    if not reports:
        raise DegenerateInputError("nothing to aggregate")

    def stats(vals):
        arr = np.array([v for v in vals if v is not None], dtype=np.float64)
        if arr.size == 0:
            return None
        std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
        return {"mean": float(np.mean(arr)), "std": std}

    dicts = [r.to_dict() if isinstance(r, MetricsReport) else r for r in reports]
    ks = sorted({k for d in dicts for k in d["hits_at_k"]}, key=int)
    out = {
        "seeds": [d["seed"] for d in dicts],
        "hits_at_k": {
            k: stats([d["hits_at_k"].get(k) for d in dicts]) for k in ks
        },
        "auc": stats([d["auc"] for d in dicts]),
        "ap": stats([d["ap"] for d in dicts]),
        "ate_obs": stats([d["ate_obs"] for d in dicts]),
        "ate_est": stats([d["ate_est"] for d in dicts]),
    }
    validate_report(out, "aggregate.schema.json")
    return out
