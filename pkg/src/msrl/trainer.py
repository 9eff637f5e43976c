"""Ranking objective and the alternating training loop.

Each iteration takes a gradient step on theta with the priority matrix U
computed in the previous iteration, then builds the next batch and
recomputes its relevance R and priorities U with the updated theta. Lambda
and gamma move on schedule-period boundaries.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .domain import IOU_FILTERS, GroupCatalog, TripletBatch, construct_batch
from .encoders import INIT_MODES, EncoderParams, FeatureBank, encode_expressions, encode_regions, init_params, match_scores
from .errors import DivergenceError, ValidationError
from .metrics import EvalSet, MetricsSnapshot, snapshot
from .optim import Adam, LRSchedule
from .relevance import ALPHA_POLICIES, MODES, TEXTUAL, VISUAL, EntryFeatures, RelevanceMatrixSet, relevance_matrices
from .rng import Streams
from .scheduler import (
    PrioritySet,
    ScheduleState,
    group_frobenius_norm,
    l1_norm,
    update_gamma,
    update_lambda,
    update_priorities,
)

VARIANTS = ("msrl", "msrl-wg", "msrl-ag", "randsel-wg", "randsel-ag", "per-image-baseline", "group-random")


@dataclass(frozen=True)
class VariantSpec:
    selection: str  # threshold | random | ranked_group_random | all
    use_lambda: bool
    use_gamma: bool
    negative_pool: str = "group"


VARIANT_SPECS = {
    "msrl": VariantSpec("threshold", True, True),
    "msrl-wg": VariantSpec("threshold", True, False),
    "msrl-ag": VariantSpec("threshold", False, True),
    # random variants select as many entries as the matching threshold rule would
    "randsel-wg": VariantSpec("random", True, False),
    "randsel-ag": VariantSpec("ranked_group_random", True, True),
    "per-image-baseline": VariantSpec("all", False, False, "image"),
    "group-random": VariantSpec("all", False, False),
}


@dataclass(frozen=True)
class TrainerConfig:
    variant: str = "msrl"
    iterations: int = 3000
    lr: float = 4e-4
    warmup: int = 8000
    halving: int = 8000
    seed: int = 0
    M: int = 10
    M_prime: int = 60
    split_ratio: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.5
    gamma: float = 0.5
    tau: float = 0.1
    mu1: float = 0.1
    mu2: float = 0.1
    eta: float = 1.1
    delta_margin: float = 0.1
    update_period: int = 1000
    snapshot_period: int = 100
    relevance_mode: str = "cosine01"
    alpha_policy: str = "per_pair"
    iou_filter: str = "purpose"
    init_mode: str = "scaled"
    dropout: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_loss: float = 1e6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        for name, options in (
            ("relevance_mode", MODES),
            ("alpha_policy", ALPHA_POLICIES),
            ("iou_filter", IOU_FILTERS),
            ("init_mode", INIT_MODES),
        ):
            if getattr(self, name) not in options:
                raise ValidationError(f"{name} must be one of {options}")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.snapshot_period < 1:
            raise ValidationError("snapshot_period must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.lr <= 0 or self.warmup < 0 or self.halving < 1:
            raise ValidationError("invalid learning-rate schedule")
        self.schedule()  # validates the schedule constants

    @property
    def spec(self) -> VariantSpec:
        return VARIANT_SPECS[self.variant]

    def schedule(self) -> ScheduleState:
        return ScheduleState(
            self.lambda1, self.lambda2, self.gamma, self.tau, self.mu1, self.mu2,
            self.eta, self.delta_margin, self.update_period,
        )

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.warmup, self.halving)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def triplet_margin(score_pos, score_neg, delta: float):
    """max(0, delta + score_neg - score_pos); works on floats and arrays."""
    return np.maximum(0.0, delta + np.asarray(score_neg) - np.asarray(score_pos))


# ---------------------------------------------------------------- forward


@dataclass
class BatchForward:
    scores: ad.Tensor  # positives (M) first, then one score per entry
    rows: np.ndarray
    cols: np.ndarray
    features: EntryFeatures | None


def _entry_alpha(batch: TripletBatch, cols: np.ndarray, policy: str) -> np.ndarray:
    if policy == "visual":
        return np.full(cols.size, VISUAL)
    if policy == "textual":
        return np.full(cols.size, TEXTUAL)
    return batch.column_alpha()[cols]


def forward_batch(
    params: EncoderParams,
    bank: FeatureBank,
    batch: TripletBatch,
    entries: tuple[np.ndarray, np.ndarray] | None = None,
    *,
    relevance: bool = False,
    alpha_policy: str = "per_pair",
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> BatchForward:
    """Scores of the M positives and the requested (anchor, column) entries.

    A textual entry (i, j) scores the anchor region against negative
    expression j; a visual entry scores negative region j against the anchor
    expression. Regions are always encoded conditioned on the expression they
    are scored with.
    """
    rows, cols = np.nonzero(batch.admissible) if entries is None else entries
    rows, cols = np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)
    M, n1 = batch.M, batch.n_expr
    negs = batch.negatives()
    anchors = list(batch.anchors)

    expr_pairs = anchors + [p for _, p, _ in batch.neg_expr]
    S, Ssb = encode_expressions(bank.expressions.take(expr_pairs), params, dropout, rng)

    textual_col = cols < n1
    region_pair = anchors + [anchors[i] if j < n1 else negs[j][1] for i, j in zip(rows, cols)]
    cond = np.r_[np.arange(M), np.where(textual_col, M + cols, rows)].astype(int)
    V = encode_regions(bank.regions.take(region_pair), ad.take(Ssb, cond), params)
    F = match_scores(V, ad.take(S, cond), params)

    feats = None
    if relevance:
        alpha = _entry_alpha(batch, cols, alpha_policy)
        d3 = S.shape[1]
        a_side = np.zeros((rows.size, d3))
        n_side = np.zeros((rows.size, d3))
        tx = alpha == TEXTUAL
        vi = ~tx
        a_side[tx] = S.data[rows[tx]]
        a_side[vi] = V.data[rows[vi]]  # positive row i is the anchor region conditioned on s_i
        # textual comparison against a textual column, visual against a visual column
        same = tx & textual_col
        n_side[same] = S.data[M + cols[same]]
        same = vi & ~textual_col
        n_side[same] = V.data[M + np.flatnonzero(same)]
        cross_t = tx & ~textual_col  # textual comparison for a region negative
        if cross_t.any():
            s_extra, _ = encode_expressions(bank.expressions.take([negs[j][1] for j in cols[cross_t]]), params)
            n_side[cross_t] = s_extra.data
        cross_v = vi & textual_col  # visual comparison for an expression negative
        if cross_v.any():
            v_extra = encode_regions(
                bank.regions.take([negs[j][1] for j in cols[cross_v]]), ad.take(Ssb, rows[cross_v]), params
            )
            n_side[cross_v] = v_extra.data
        feats = EntryFeatures(rows, cols, alpha, a_side, n_side)
    return BatchForward(F, rows, cols, feats)


# -------------------------------------------------------------- objective


@dataclass
class ObjectiveResult:
    E: float
    q_sum: float
    regularizer: float
    n_selected: int
    grads: dict[str, np.ndarray]


def regularizer(U: PrioritySet, schedule: ScheduleState, spec: VariantSpec) -> float:
    """((l1+l2)/2)||U||_1 + gamma * sum_g ||U^(g)||_F, minus the dropped terms."""
    out = 0.0
    if spec.use_lambda:
        out += 0.5 * (schedule.lambda1 + schedule.lambda2) * l1_norm(U)
    if spec.use_gamma:
        out += schedule.gamma * group_frobenius_norm(U)
    return out


def msrl_objective(
    params: EncoderParams,
    bank: FeatureBank,
    batch: TripletBatch,
    U: PrioritySet,
    schedule: ScheduleState,
    variant: str = "msrl",
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    with_grad: bool = True,
) -> ObjectiveResult:
    """E = sum of selected margins minus the priority regularizers.

    U is constant here, so gradients only come from the margin terms.
    """
    spec = VARIANT_SPECS[variant]
    if U.U.shape[1:] != (batch.M, batch.M_prime):
        raise ValidationError(f"priority shape {U.U.shape[1:]} does not match batch {(batch.M, batch.M_prime)}")
    sel = U.selected()
    if np.any(sel & ~batch.admissible):
        raise ValidationError("priority selects an inadmissible entry")
    rows, cols = np.nonzero(sel)
    reg = regularizer(U, schedule, spec)
    params.zero_grad()
    if rows.size == 0:
        zeros = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        return ObjectiveResult(-reg, 0.0, reg, 0, zeros)
    fwd = forward_batch(params, bank, batch, (rows, cols), dropout=dropout, rng=rng)
    M = batch.M
    pos = ad.take(fwd.scores, rows)
    neg = ad.take(fwd.scores, np.arange(M, M + rows.size))
    q = ad.total(ad.relu(neg - pos + schedule.delta_margin))
    q_sum = float(q.data)
    if with_grad:
        q.backward()
    return ObjectiveResult(q_sum - reg, q_sum, reg, int(rows.size), params.grads())


# --------------------------------------------------------------- U-step


def random_selection(R: RelevanceMatrixSet, count: int, rng: np.random.Generator) -> PrioritySet:
    """``count`` defined entries chosen uniformly at random."""
    idx = np.argwhere(R.mask)
    U = np.zeros_like(R.mask)
    if count:
        pick = rng.choice(len(idx), size=count, replace=False)
        U[tuple(idx[np.sort(pick)].T)] = True
    return PrioritySet(U, R.mask.copy())


def ranked_group_random_selection(R: RelevanceMatrixSet, count: int, rng: np.random.Generator) -> PrioritySet:
    """Random group quotas, lowest-relevance entries inside each group.

    The quota vector is uniform over the ways of splitting ``count`` among
    the groups present (flat Dirichlet proportions, then a multinomial draw).
    Overflow beyond a group's available entries is redrawn over the groups
    that still have room, with the same proportions.
    """
    avail = R.mask.sum(axis=(1, 2))
    quota = np.zeros_like(avail)
    present = np.flatnonzero(avail)
    if count == 0 or present.size == 0:
        return PrioritySet(np.zeros_like(R.mask), R.mask.copy())
    props = np.zeros(avail.size)
    props[present] = rng.dirichlet(np.ones(present.size))
    left = count
    while left > 0:
        room = avail - quota
        p = np.where(room > 0, props, 0.0)
        if p.sum() <= 0:  # proportions underflowed to zero on every open group
            p = (room > 0).astype(float)
        draw = rng.multinomial(left, p / p.sum())
        quota += np.minimum(draw, room)
        left = count - int(quota.sum())
    U = np.zeros_like(R.mask)
    for g in np.flatnonzero(quota):
        idx = np.argwhere(R.mask[g])
        vals = R.values[g][R.mask[g]]
        order = np.argsort(vals, kind="stable")[: quota[g]]
        U[g][tuple(idx[order].T)] = True
    return PrioritySet(U, R.mask.copy())


def select_priorities(
    R: RelevanceMatrixSet, schedule: ScheduleState, spec: VariantSpec, rng: np.random.Generator
) -> PrioritySet:
    if spec.selection == "all":
        return PrioritySet(R.mask.copy(), R.mask.copy())
    U = update_priorities(R, schedule, spec.use_lambda, spec.use_gamma)
    if spec.selection == "threshold":
        return U
    count = int(U.U.sum())
    if spec.selection == "random":
        return random_selection(R, count, rng)
    return ranked_group_random_selection(R, count, rng)


# ----------------------------------------------------------------- loop


@dataclass
class TraceRow:
    """Per-iteration record of the priorities consumed by that iteration's theta-step."""

    iteration: int
    loss: float
    selected_per_group: list[int]
    mean_R_all: float
    mean_R_selected: float
    lambda1: float
    lambda2: float
    gamma: float


@dataclass
class TrainState:
    params: EncoderParams
    adam: Adam
    schedule: ScheduleState
    streams: Streams
    iteration: int
    batch: TripletBatch  # consumed by the next theta-step
    R: RelevanceMatrixSet
    U: PrioritySet
    history: list[MetricsSnapshot] = field(default_factory=list)
    trace: list[TraceRow] = field(default_factory=list)


class Trainer:
    """Runs the alternating loop for one config on one catalog.

    ``hook(kind, iteration, U)`` is called with kind ``"u_step"`` whenever a
    new U is produced and ``"theta_step"`` when one is consumed.
    """

    def __init__(
        self,
        catalog: GroupCatalog,
        config: TrainerConfig,
        eval_set: EvalSet | None = None,
        *,
        bank: FeatureBank | None = None,
        eval_bank: FeatureBank | None = None,
        hook: Callable[[str, int, PrioritySet], None] | None = None,
    ):
        if catalog.n_pairs == 0:
            raise ValidationError("empty catalog")
        self.catalog = catalog
        self.config = config
        self.spec = config.spec
        self.bank = bank if bank is not None else FeatureBank(catalog)
        self.eval_set = eval_set
        if eval_set is not None and eval_bank is None:
            eval_bank = FeatureBank(eval_set.catalog)
        self.eval_bank = eval_bank
        self.hook = hook
        self.lr = config.lr_schedule()

    # -- pieces

    def _batch(self, streams: Streams) -> TripletBatch:
        c = self.config
        return construct_batch(
            self.catalog, streams["batch"], c.M, c.M_prime, c.split_ratio, c.iou_filter, self.spec.negative_pool
        )

    def relevance(self, params: EncoderParams, batch: TripletBatch) -> RelevanceMatrixSet:
        fwd = forward_batch(params, self.bank, batch, relevance=True, alpha_policy=self.config.alpha_policy)
        return relevance_matrices(batch, self.catalog.n_groups, fwd.features, self.config.relevance_mode)

    def u_step(self, state: TrainState, iteration: int) -> None:
        state.batch = self._batch(state.streams)
        state.R = self.relevance(state.params, state.batch)
        state.U = select_priorities(state.R, state.schedule, self.spec, state.streams["select"])
        if self.hook:
            self.hook("u_step", iteration, state.U)

    def objective(self, state: TrainState, with_grad: bool = True) -> ObjectiveResult:
        c = self.config
        rng = state.streams["dropout"] if c.dropout > 0 else None
        return msrl_objective(
            state.params, self.bank, state.batch, state.U, state.schedule, c.variant,
            dropout=c.dropout, rng=rng, with_grad=with_grad,
        )

    def _snapshot(self, state: TrainState, iteration: int, loss: float, R, U) -> None:
        state.history.append(snapshot(
            iteration, loss, R, U, state.schedule, state.params, self.eval_bank, self.eval_set
        ))

    # -- public

    def init_state(self) -> TrainState:
        c = self.config
        streams = Streams(c.seed)
        params = init_params(self.bank.d, self.bank.c, streams["init"], c.init_mode)
        state = TrainState(params, Adam(c.beta1, c.beta2, c.eps), c.schedule(), streams, 0, None, None, None)
        self.u_step(state, 0)
        loss = self.objective(state, with_grad=False).E
        self._snapshot(state, 0, loss, state.R, state.U)
        return state

    def step(self, state: TrainState) -> ObjectiveResult:
        c = self.config
        t = state.iteration + 1
        if self.hook:
            self.hook("theta_step", t, state.U)
        res = self.objective(state)
        if not math.isfinite(res.q_sum) or res.q_sum > c.divergence_loss:
            raise DivergenceError(f"loss {res.q_sum} at iteration {t}")
        arrays = state.params.arrays()
        state.adam.step(arrays, res.grads, self.lr(t - 1))
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                raise DivergenceError(f"parameter block {name!r} became non-finite at iteration {t}")
        R_used, U_used = state.R, state.U
        counts = U_used.group_counts()
        state.trace.append(TraceRow(
            t, res.E, [int(x) for x in counts], R_used.mean(),
            R_used.masked_mean(U_used.selected()[None]) if counts.sum() else math.nan,
            state.schedule.lambda1, state.schedule.lambda2, state.schedule.gamma,
        ))
        self.u_step(state, t)
        if state.schedule.is_update_step(t):
            state.schedule = update_gamma(update_lambda(state.schedule, state.R, state.batch.M, state.batch.M_prime))
        state.iteration = t
        if t % c.snapshot_period == 0 or t == c.iterations:
            self._snapshot(state, t, res.E, R_used, U_used)
        return res

    def run(self, state: TrainState | None = None, until: int | None = None) -> TrainState:
        if state is None:
            state = self.init_state()
        stop = self.config.iterations if until is None else min(until, self.config.iterations)
        while state.iteration < stop:
            self.step(state)
        return state


def train(
    catalog: GroupCatalog, config: TrainerConfig, eval_set: EvalSet | None = None
) -> tuple[EncoderParams, list[MetricsSnapshot]]:
    state = Trainer(catalog, config, eval_set).run()
    return state.params, state.history
