"""Self-paced schedule: priority thresholds, lambda/gamma updates, U norms."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .relevance import TEXTUAL, VISUAL, RelevanceMatrixSet


@dataclass(frozen=True)
class ScheduleState:
    lambda1: float = 0.5
    lambda2: float = 0.5
    gamma: float = 0.5
    tau: float = 0.1
    mu1: float = 0.1
    mu2: float = 0.1
    eta: float = 1.1
    delta_margin: float = 0.1
    update_period: int = 1000

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        for name in ("tau", "mu1", "mu2", "eta", "delta_margin"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.update_period < 1:
            raise ValidationError("update_period must be >= 1")

    def lambda_for(self, alpha: int) -> float:
        return self.lambda1 if alpha == VISUAL else self.lambda2

    def is_update_step(self, iteration: int) -> bool:
        return iteration > 0 and iteration % self.update_period == 0


@dataclass
class PrioritySet:
    U: np.ndarray  # G x M x M' bool
    mask: np.ndarray

    def __post_init__(self):
        if self.U.shape != self.mask.shape:
            raise ValidationError("priority and mask shapes differ")
        if np.any(self.U & ~self.mask):
            raise ValidationError("sentinel entries must have priority 0")

    def group_counts(self) -> np.ndarray:
        return self.U.sum(axis=(1, 2))

    def selected(self) -> np.ndarray:
        """M x M' boolean: entry selected in its group."""
        return self.U.any(axis=0)


def thresholds(R: RelevanceMatrixSet, state: ScheduleState, use_lambda: bool = True, use_gamma: bool = True) -> np.ndarray:
    """Per-entry threshold lambda_alpha + tau*gamma (M x M').

    Switching off a term removes its contribution; the ablation variants use
    this to drop the l1 or the across-group term.
    """
    lam = np.where(R.alpha == VISUAL, state.lambda1, state.lambda2) if use_lambda else np.zeros(R.alpha.shape)
    return lam + (state.tau * state.gamma if use_gamma else 0.0)


def update_priorities(
    R: RelevanceMatrixSet, state: ScheduleState, use_lambda: bool = True, use_gamma: bool = True
) -> PrioritySet:
    """U = 1 iff the entry is defined and R < threshold (strict)."""
    th = thresholds(R, state, use_lambda, use_gamma)
    U = R.mask & (R.values < th[None])
    return PrioritySet(U, R.mask.copy())


def update_lambda(state: ScheduleState, R: RelevanceMatrixSet, M: int, M_prime: int) -> ScheduleState:
    """Step each lambda by mu/(M M') times the summed counter-relevance of its modality."""
    counter = lambda x: np.maximum(0.0, 1.0 - x)
    inc1 = state.mu1 / (M * M_prime) * R.masked_sum(counter, alpha=VISUAL)
    inc2 = state.mu2 / (M * M_prime) * R.masked_sum(counter, alpha=TEXTUAL)
    return dataclasses.replace(
        state,
        lambda1=min(1.0, state.lambda1 + inc1),
        lambda2=min(1.0, state.lambda2 + inc2),
    )


def update_gamma(state: ScheduleState) -> ScheduleState:
    return dataclasses.replace(state, gamma=min(1.0, state.eta * state.gamma))


def l1_norm(U: PrioritySet) -> float:
    return float(U.U.sum())


def group_frobenius_norm(U: PrioritySet) -> float:
    """Sum over groups of the Frobenius norm of the binary U^(g)."""
    return float(np.sum(np.sqrt(U.group_counts())))
