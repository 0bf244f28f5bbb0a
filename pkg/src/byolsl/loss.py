"""Objectives: the BYOL regression loss, its symmetrized form, the two
batch self-labeling refinements (cross-cosine and cross-sigmoid), and an
NT-Xent reference.

Losses take row-normalized (N, d) tensors, online predictions first and
target projections second. Threshold masks are computed from the current
similarities and treated as constants when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

VARIANTS = ("byol", "ccsl", "ccsl-with-repulsion", "cssl")


class ConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    variant: str = "byol"
    lam: float = 0.1
    theta_p: float = 0.8
    theta_n: float = -0.5
    sigmoid_temperature: float = 0.5
    nt_xent_temperature: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not self.theta_n < self.theta_p:
            raise ConfigError(f"theta_n ({self.theta_n}) must be below theta_p ({self.theta_p})")
        if self.sigmoid_temperature <= 0 or self.nt_xent_temperature <= 0:
            raise ConfigError("temperatures must be positive")


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class LossTerms:
    """One direction of a loss with its parts kept for logging."""

    total: Tensor
    diagonal: float
    refinement: float
    positives: int
    negatives: int


def _check_pair(op: str, q: Tensor, z: Tensor) -> None:
    if q.ndim != 2 or q.shape != z.shape:
        raise DimensionError(f"{op}: expected matching (N, d) inputs, got {q.shape} and {z.shape}")


def similarity_matrix(q, z, theta_p: float, theta_n: float) -> SimilarityMatrix:
    """S[i, j] = <q_i, z_j>; masks S >= theta_p and S <= theta_n off the diagonal."""
    if theta_n >= theta_p:
        raise ConfigError(f"theta_n ({theta_n}) must be below theta_p ({theta_p})")
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    if qd.ndim != 2 or qd.shape != zd.shape:
        raise DimensionError(f"similarity_matrix: expected matching (N, d) inputs, got {qd.shape} and {zd.shape}")
    s = qd @ zd.T
    off = ~np.eye(s.shape[0], dtype=bool)
    return SimilarityMatrix(s, (s >= theta_p) & off, (s <= theta_n) & off)


def _masks(q: Tensor, z: Tensor, cfg: LossConfig) -> SimilarityMatrix:
    sim = similarity_matrix(q, z, cfg.theta_p, cfg.theta_n)
    T.record_branch("mask", np.concatenate([sim.positive.ravel(), sim.negative.ravel()]))
    return sim


def _diag_dot(q: Tensor, z: Tensor) -> Tensor:
    return T.sum(q * z, axis=1)


def byol_pair_loss(q: Tensor, z: Tensor) -> Tensor:
    """mean_i (2 - 2 <q_i, z_i>); lies in [0, 4] for unit rows."""
    _check_pair("byol_pair_loss", q, z)
    return T.mean(2.0 - 2.0 * _diag_dot(q, z))


def byol_terms(q: Tensor, z: Tensor, cfg: LossConfig | None = None) -> LossTerms:
    loss = byol_pair_loss(q, z)
    return LossTerms(loss, float(loss.data), 0.0, 0, 0)


def ccsl_terms(q: Tensor, z: Tensor, cfg: LossConfig, repulsion: bool | None = None) -> LossTerms:
    """mean_i [2 - 2 S_ii + lam * sum_{j != i} P_ij (2 - 2 S_ij)].

    With ``repulsion`` the pairs at or below theta_n enter with a minus
    sign as well; that variant is known to collapse.
    """
    _check_pair("ccsl_loss", q, z)
    if repulsion is None:
        repulsion = cfg.variant == "ccsl-with-repulsion"
    n = q.shape[0]
    diag = 2.0 - 2.0 * _diag_dot(q, z)
    sim = _masks(q, z, cfg)
    weights = sim.positive.astype(q.dtype)
    if repulsion:
        weights = weights - sim.negative.astype(q.dtype)
    dist = 2.0 - 2.0 * T.matmul(q, T.transpose(z))
    refine = T.scale(T.sum(dist * Tensor(weights)), cfg.lam / n)
    return LossTerms(
        T.mean(diag) + refine,
        float(diag.data.mean()),
        float(refine.data),
        int(sim.positive.sum()),
        int(sim.negative.sum()),
    )


def ccsl_loss(q: Tensor, z: Tensor, cfg: LossConfig, repulsion: bool | None = None) -> Tensor:
    return ccsl_terms(q, z, cfg, repulsion).total


def _log_p(s: Tensor, temperature: float) -> Tensor:
    return T.log(T.sigmoid(T.scale(s, 1.0 / temperature)))


def _log_one_minus_p(s: Tensor, temperature: float) -> Tensor:
    # 1 - sigmoid(x) == sigmoid(-x), evaluated without cancellation
    return T.log(T.sigmoid(T.scale(s, -1.0 / temperature)))


def cssl_pairwise(a: Tensor, b: Tensor, cfg: LossConfig) -> Tensor:
    """Binary cross-entropy between two unit vectors under the thresholds.

    -[s >= theta_p] log p - [s <= theta_n] log(1 - p), p = sigmoid(s / T_s);
    zero in the dead zone between the thresholds.
    """
    s = T.sum(a * b)
    value = float(s.data)
    T.record_branch("mask", np.array([value >= cfg.theta_p, value <= cfg.theta_n]))
    out = Tensor(np.zeros((), dtype=s.dtype))
    if value >= cfg.theta_p:
        out = out - _log_p(s, cfg.sigmoid_temperature)
    if value <= cfg.theta_n:
        out = out - _log_one_minus_p(s, cfg.sigmoid_temperature)
    return out


def cssl_terms(q: Tensor, z: Tensor, cfg: LossConfig) -> LossTerms:
    """mean_i [-log p(q_i, z_i) + lam * sum_{j != i} l(q_i, z_j)]."""
    _check_pair("cssl_loss", q, z)
    n = q.shape[0]
    t = cfg.sigmoid_temperature
    diag = T.scale(_log_p(_diag_dot(q, z), t), -1.0)
    sim = _masks(q, z, cfg)
    s = T.matmul(q, T.transpose(z))
    pos = Tensor(sim.positive.astype(q.dtype))
    neg = Tensor(sim.negative.astype(q.dtype))
    pair = _log_p(s, t) * pos + _log_one_minus_p(s, t) * neg
    refine = T.scale(T.sum(pair), -cfg.lam / n)
    return LossTerms(
        T.mean(diag) + refine,
        float(diag.data.mean()),
        float(refine.data),
        int(sim.positive.sum()),
        int(sim.negative.sum()),
    )


def cssl_loss(q: Tensor, z: Tensor, cfg: LossConfig) -> Tensor:
    return cssl_terms(q, z, cfg).total


def nt_xent(z: Tensor, z_tilde: Tensor, temperature: float = 0.5) -> Tensor:
    """Normalized temperature-scaled cross-entropy over 2N rows.

    Row k's positive is the other view of the same image; the remaining
    2N - 2 rows are negatives. Averaged over all 2N anchors.
    """
    _check_pair("nt_xent", z, z_tilde)
    n = z.shape[0]
    if n < 2:
        raise ContractError("nt_xent: need at least 2 images per view to have negatives")
    if temperature <= 0:
        raise ContractError("nt_xent: temperature must be positive")
    h = T.l2_normalize(T.concat([z, z_tilde], axis=0))
    logits = T.scale(T.matmul(h, T.transpose(h)), 1.0 / temperature)
    m = 2 * n
    not_self = 1.0 - np.eye(m, dtype=z.dtype)
    positive = np.roll(np.eye(m, dtype=z.dtype), n, axis=1)
    # constant shift for stability; cancels exactly in log-softmax
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    log_denominator = T.log(T.sum(T.exp(shifted) * Tensor(not_self), axis=1))
    positive_logit = T.sum(shifted * Tensor(positive), axis=1)
    return T.mean(log_denominator - positive_logit)


TERMS: dict[str, Callable[..., LossTerms]] = {
    "byol": byol_terms,
    "ccsl": ccsl_terms,
    "ccsl-with-repulsion": ccsl_terms,
    "cssl": cssl_terms,
}


def loss_terms(q: Tensor, z: Tensor, cfg: LossConfig) -> LossTerms:
    return TERMS[cfg.variant](q, z, cfg)


def variant_loss(q: Tensor, z: Tensor, cfg: LossConfig) -> Tensor:
    return loss_terms(q, z, cfg).total


def symmetrize(loss_fn: Callable[[Tensor, Tensor], Tensor], online, target) -> Tensor:
    """loss(online(v), target(v')) + loss(online(v'), target(v)).

    ``online`` and ``target`` are pairs of outputs for views (v, v').
    """
    q_v, q_w = online
    z_v, z_w = target
    return loss_fn(q_v, z_w) + loss_fn(q_w, z_v)
