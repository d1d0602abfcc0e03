"""Training objectives: diarization BCE with permutation-invariant training,
Sinkhorn-based assignment, speaker-recognition CE, stop-class CE, and the
weighted total with its epoch-dependent schedule.

Assignment problems are solved either exhaustively (factorial, fine at desk
scale) or with Sinkhorn iterations on the cost matrix followed by rounding to
the nearest permutation.  Gradients flow through the per-pair cost tensor; the
selected permutation itself is treated as a constant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from . import autograd as ag
from .autograd import ShapeError, Tensor

PROB_EPS = 1e-7
SINKHORN_TEMPERATURE = 0.05
SINKHORN_ITERS = 200


@dataclass
class LossWeights:
    alpha: float = 0.01
    beta0: float = 0.1
    beta_decay: float = 0.92
    gamma: float = 5.0
    epoch: int = 0

    @property
    def beta(self) -> float:
        return self.beta0 * self.beta_decay ** self.epoch


@dataclass
class AssignmentResult:
    permutation: list[int]          # estimated index -> label index
    loss: Tensor
    soft_matrix: np.ndarray | None = field(default=None, repr=False)


def clamp_probs(p: Tensor) -> Tensor:
    if not np.all(np.isfinite(p.data)) or np.any(p.data < 0.0) or np.any(p.data > 1.0):
        raise ValueError("probabilities must lie in [0, 1] before clamping")
    return ag.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def sinkhorn(cost: np.ndarray, temperature: float = SINKHORN_TEMPERATURE,
             n_iters: int = SINKHORN_ITERS) -> np.ndarray:
    """Doubly-stochastic relaxation of the assignment minimizing `cost`.

    Alternating row/column normalization of exp(-cost/temperature), run in the
    log domain so small temperatures stay finite.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("sinkhorn: cost must be finite")
    if temperature <= 0:
        raise ValueError("sinkhorn: temperature must be positive")
    k = -cost / temperature
    for _ in range(n_iters):
        k = k - logsumexp(k, axis=1, keepdims=True)
        k = k - logsumexp(k, axis=0, keepdims=True)
    return np.exp(k)


def _round_to_permutation(soft: np.ndarray) -> np.ndarray:
    log_soft = np.log(np.maximum(soft, 1e-300))
    rows, cols = linear_sum_assignment(-log_soft)
    perm = np.empty(soft.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def _exhaustive_permutation(cost: np.ndarray) -> np.ndarray:
    """Minimizing permutation; ties go to the lexicographically first one,
    i.e. lowest estimated index keeps its lowest-cost label first."""
    n = cost.shape[0]
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = sum(cost[s, perm[s]] for s in range(n))
        if c < best_cost:
            best_cost, best_perm = c, perm
    return np.array(best_perm, dtype=int)


def _assign(cost: np.ndarray, mode: str, temperature: float,
            n_iters: int) -> tuple[np.ndarray, np.ndarray | None]:
    if mode == "exhaustive":
        return _exhaustive_permutation(cost), None
    if mode == "sinkhorn":
        soft = sinkhorn(cost, temperature, n_iters)
        return _round_to_permutation(soft), soft
    raise ValueError(f"unknown assignment mode {mode!r}")


def _permutation_loss(cost_t: Tensor, perm: np.ndarray) -> Tensor:
    mask = np.zeros(cost_t.data.shape)
    mask[np.arange(len(perm)), perm] = 1.0
    return ag.tsum(ag.mul(cost_t, Tensor(mask)))


def dia_bce_pit(y_hat: Tensor, y_true: np.ndarray, weights: LossWeights | None = None,
                mode: str = "exhaustive", reduction: str = "sum",
                temperature: float = SINKHORN_TEMPERATURE,
                n_iters: int = SINKHORN_ITERS) -> AssignmentResult:
    """Binary cross-entropy over speaker streams under the best pairing of
    estimated streams to label streams, with weight gamma on the positive
    class.

    The per-pair cost matrix is assembled with matrix products,
    C = -(gamma * log(Y_hat)^T Y + log(1 - Y_hat)^T (1 - Y)),
    so a single S x S tensor carries all T-frame sums.  `reduction="sum"` is
    the written form of the objective; `"frame_mean"` divides by T for
    step-size stability at other sequence lengths.
    """
    weights = weights or LossWeights()
    y = np.asarray(y_true, dtype=np.float64)
    if y.ndim != 2 or y_hat.data.shape != y.shape:
        raise ShapeError(
            f"dia_bce_pit: prediction {y_hat.data.shape} and label {y.shape} must match")
    t_frames = y.shape[0]
    ph = clamp_probs(y_hat)
    log_p = ag.log(ph)
    log_q = ag.log(ag.add(ag.mul(ph, -1.0), 1.0))
    cost_t = ag.mul(
        ag.add(ag.mul(ag.matmul(ag.transpose(log_p), Tensor(y)), weights.gamma),
               ag.matmul(ag.transpose(log_q), Tensor(1.0 - y))),
        -1.0)
    perm, soft = _assign(cost_t.data.copy(), mode, temperature, n_iters)
    loss = _permutation_loss(cost_t, perm)
    if reduction == "frame_mean":
        loss = ag.mul(loss, 1.0 / t_frames)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return AssignmentResult(list(int(i) for i in perm), loss, soft)


def speaker_ce_pit(posteriors: Tensor, labels: list[int], mode: str = "exhaustive",
                   temperature: float = SINKHORN_TEMPERATURE,
                   n_iters: int = SINKHORN_ITERS) -> AssignmentResult:
    """Cross-entropy between attractor speaker posteriors (S x (J+1), class 0
    reserved for "not a speaker") and the corpus identities of the reference
    speakers, minimized over pairings."""
    n_spk, n_classes = posteriors.data.shape
    if len(labels) != n_spk:
        raise ShapeError(
            f"speaker_ce_pit: {n_spk} posterior rows vs {len(labels)} labels")
    for lab in labels:
        if not 1 <= lab <= n_classes - 1:
            raise ValueError(f"speaker label {lab} outside [1, {n_classes - 1}]")
    log_p = ag.log(clamp_probs(posteriors))
    pick = np.zeros((n_classes, n_spk))
    pick[np.array(labels, dtype=int), np.arange(n_spk)] = 1.0
    cost_t = ag.mul(ag.matmul(log_p, Tensor(pick)), -1.0)
    perm, soft = _assign(cost_t.data.copy(), mode, temperature, n_iters)
    return AssignmentResult(list(int(i) for i in perm),
                            _permutation_loss(cost_t, perm), soft)


def stop_ce(posterior_row: Tensor) -> Tensor:
    """-log probability of the "not a speaker" class (index 0) for the extra
    decoded attractor."""
    row = posterior_row
    if row.data.ndim == 2 and row.data.shape[0] == 1:
        row = ag.reshape(row, (row.data.shape[1],))
    if row.data.ndim != 1:
        raise ShapeError(f"stop_ce: expected one posterior row, got {posterior_row.data.shape}")
    if abs(float(row.data.sum()) - 1.0) > 1e-6:
        raise ValueError(f"stop_ce: posterior row sums to {row.data.sum():.8f}, not 1")
    p0 = ag.narrow(row, 0, 0, 1)
    return ag.mul(ag.tsum(ag.log(clamp_probs(p0))), -1.0)


def existence_bce(probs: Tensor) -> Tensor:
    """Attractor-existence objective used when the speaker head is off:
    plain BCE against [1, ..., 1, 0] over the S+1 decoded attractors."""
    if probs.data.ndim != 1 or probs.data.shape[0] < 2:
        raise ShapeError(f"existence_bce: expected >= 2 existence probs, got {probs.data.shape}")
    target = np.ones(probs.data.shape[0])
    target[-1] = 0.0
    p = clamp_probs(probs)
    pos = ag.mul(ag.log(p), Tensor(target))
    neg = ag.mul(ag.log(ag.add(ag.mul(p, -1.0), 1.0)), Tensor(1.0 - target))
    return ag.mul(ag.tsum(ag.add(pos, neg)), -1.0)


def total_loss(dia: Tensor, spk: Tensor | None, stop: Tensor | None,
               weights: LossWeights) -> Tensor:
    """dia + beta * (spk + alpha * stop); collapses to dia when the speaker
    head is disabled (spk and stop both None)."""
    if (spk is None) != (stop is None):
        raise ValueError("spk and stop losses must be supplied together")
    if spk is None:
        return dia
    return ag.add(dia, ag.mul(ag.add(spk, ag.mul(stop, weights.alpha)), weights.beta))
