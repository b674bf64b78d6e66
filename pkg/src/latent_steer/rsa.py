"""Head selection by class separability.

Every stored head is scored by the ratio of between-class centroid distance
to total within-class scatter, ranked, and the top ``k`` become the experts
the controller steers. Silhouette and k-NN purity are available as slower
non-linear comparators.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .featurebank import BankError, FeatureBank, HeadId

METRICS = ("rsa", "silhouette", "knn_purity")


@dataclass(frozen=True)
class HeadStats:
    head: HeadId
    mu_norm: np.ndarray
    mu_anom: np.ndarray
    sw_norm: float
    sw_anom: float
    n_norm: int
    n_anom: int


@dataclass(frozen=True)
class RsaConfig:
    epsilon: float = 1e-8
    k: int = 4
    metric: str = "rsa"
    knn_k: int = 5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")


@dataclass(frozen=True)
class RsaReport:
    scores: dict[HeadId, float]
    ranking: tuple[HeadId, ...]
    selected: tuple[HeadId, ...]
    config: RsaConfig
    bank_fingerprint: str
    n_normal: int = 0
    n_anomalous: int = 0
    notes: dict = field(default_factory=dict)

    def top(self, n: int) -> tuple[HeadId, ...]:
        if n > len(self.ranking):
            raise ValueError(f"top_n={n} exceeds the {len(self.ranking)} ranked heads")
        return self.ranking[:n]

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "bank_fingerprint": self.bank_fingerprint,
            "n_normal": self.n_normal,
            "n_anomalous": self.n_anomalous,
            "notes": self.notes,
            "scores": [{"layer": h.layer, "head": h.head, "score": self.scores[h]}
                       for h in sorted(self.scores)],
            "ranking": [[h.layer, h.head] for h in self.ranking],
            "selected": [[h.layer, h.head] for h in self.selected],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "RsaReport":
        return cls(
            scores={HeadId(s["layer"], s["head"]): float(s["score"]) for s in doc["scores"]},
            ranking=tuple(HeadId(*h) for h in doc["ranking"]),
            selected=tuple(HeadId(*h) for h in doc["selected"]),
            config=RsaConfig(**doc["config"]),
            bank_fingerprint=doc["bank_fingerprint"],
            n_normal=doc.get("n_normal", 0),
            n_anomalous=doc.get("n_anomalous", 0),
            notes=doc.get("notes", {}),
        )


def _split(bank: FeatureBank, head: HeadId) -> tuple[np.ndarray, np.ndarray]:
    y = bank.labels()
    x = bank.features(head).astype(np.float64)
    norm, anom = x[y == 0], x[y == 1]
    if len(norm) == 0 or len(anom) == 0:
        raise BankError("separability needs both normal and anomalous samples")
    return norm, anom


def head_stats(bank: FeatureBank, head: HeadId) -> HeadStats:
    norm, anom = _split(bank, head)
    mu_n, mu_a = norm.mean(axis=0), anom.mean(axis=0)
    return HeadStats(
        head=HeadId(*head),
        mu_norm=mu_n,
        mu_anom=mu_a,
        sw_norm=float(((norm - mu_n) ** 2).sum()),
        sw_anom=float(((anom - mu_a) ** 2).sum()),
        n_norm=len(norm),
        n_anom=len(anom),
    )


def rsa_score(stats: HeadStats, epsilon: float = 1e-8) -> float:
    """Squared centroid distance over total within-class scatter (plus ``epsilon``)."""
    between = float(((stats.mu_anom - stats.mu_norm) ** 2).sum())
    return between / (stats.sw_norm + stats.sw_anom + epsilon)


def variance_form_score(stats: HeadStats, epsilon: float = 0.0) -> float:
    """The same ratio written with per-class variances; valid on balanced banks.

    With ``n`` samples per class the within-class scatter is ``n * (var_a + var_n)``.
    """
    if stats.n_norm != stats.n_anom:
        raise ValueError("variance form assumes a class-balanced bank")
    n = stats.n_norm
    var_n, var_a = stats.sw_norm / n, stats.sw_anom / n
    between = float(((stats.mu_anom - stats.mu_norm) ** 2).sum())
    return between / (n * (var_a + var_n) + epsilon)


def _pairwise_dist(x: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion: exact ties stay ties
    return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))


def silhouette_score(bank: FeatureBank, head: HeadId) -> float:
    """Mean two-cluster silhouette with the class labels as clusters."""
    norm, anom = _split(bank, head)
    if len(norm) < 2 or len(anom) < 2:
        raise BankError("silhouette needs at least 2 samples per class")
    y = bank.labels()
    x = bank.features(head).astype(np.float64)
    dist = _pairwise_dist(x)
    same = y[:, None] == y[None, :]
    n_same = same.sum(axis=1) - 1
    a = (dist * same).sum(axis=1) / n_same
    b = (dist * ~same).sum(axis=1) / (~same).sum(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros_like(a), where=denom > 0)
    return float(s.mean())


def knn_purity(bank: FeatureBank, head: HeadId, k: int = 5) -> float:
    """Mean fraction of each sample's ``k`` nearest neighbours sharing its label.

    Self is excluded; equal distances are broken by lower row index.
    """
    y = bank.labels()
    n = len(y)
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n_samples ({n}), got {k}")
    x = bank.features(head).astype(np.float64)
    total = 0.0
    for start in range(0, n, 256):
        block = x[start:start + 256]
        d = np.sqrt(((block[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1))
        d[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        total += (y[nn] == y[start:start + len(block), None]).sum()
    return float(total / (n * k))


def _score_heads(bank: FeatureBank, config: RsaConfig) -> dict[HeadId, float]:
    scores = {}
    for h in bank.heads:
        if config.metric == "rsa":
            scores[h] = rsa_score(head_stats(bank, h), config.epsilon)
        elif config.metric == "silhouette":
            scores[h] = silhouette_score(bank, h)
        else:
            scores[h] = knn_purity(bank, h, config.knn_k)
    return scores


def rank_heads(bank: FeatureBank, config: RsaConfig = RsaConfig()) -> RsaReport:
    """Score all stored heads and select the top ``config.k``.

    Ordering is score descending, then layer ascending, then head ascending.
    """
    y = bank.labels()
    n_norm, n_anom = int((y == 0).sum()), int((y == 1).sum())
    if n_norm == 0 or n_anom == 0:
        raise BankError("rank_heads needs both normal and anomalous samples")
    if len(bank.heads) < config.k:
        raise ValueError(f"bank stores {len(bank.heads)} heads, fewer than k={config.k}")
    scores = _score_heads(bank, config)
    ranking = tuple(sorted(scores, key=lambda h: (-scores[h], h.layer, h.head)))
    return RsaReport(
        scores=scores,
        ranking=ranking,
        selected=ranking[: config.k],
        config=config,
        bank_fingerprint=bank.fingerprint(),
        n_normal=n_norm,
        n_anomalous=n_anom,
    )


def jaccard_stability(reports: Sequence[RsaReport], top_n: int) -> np.ndarray:
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    sets = [set(r.top(top_n)) for r in reports]
    m = len(sets)
    out = np.ones((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            union = sets[i] | sets[j]
            out[i, j] = out[j, i] = len(sets[i] & sets[j]) / len(union) if union else 1.0
    return out
