"""Retrieval accuracy, group statistics and training snapshots."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .domain import GroupCatalog, build_catalog
from .encoders import EncoderParams, FeatureBank, encode_expressions, encode_regions, match_scores
from .errors import MSRLError, ValidationError

# documentation constants only; nothing here is reproduced at desk scale
REFERENCE_VALUES = {
    "refcocog_val_acc": {"MSRL": 79.15, "MAttN": 77.27},
    "table5_iter10k": {"AVE": {"MSRL": 77.26, "RandSel-AG": 75.94}, "STD": {"MSRL": 10.78, "RandSel-AG": 11.88}},
    "table4_window_0_5k": {"CV": {"without": 88.64, "with": 86.15}, "mean": {"without": 12598, "with": 13120}},
}


@dataclass(frozen=True)
class EvalItem:
    query: int  # flat index of the pair whose expression is the query
    candidates: tuple[int, ...]  # flat indices of candidate regions
    target: int  # position of the ground truth in candidates
    group: int


@dataclass(frozen=True)
class EvalSet:
    catalog: GroupCatalog
    items: tuple[EvalItem, ...]

    def group_counts(self) -> np.ndarray:
        out = np.zeros(self.catalog.n_groups, dtype=int)
        for it in self.items:
            out[it.group] += 1
        return out


def split_catalog(catalog: GroupCatalog, rng: np.random.Generator, eval_fraction: float):
    """Hold out whole images per group.

    Returns (train_catalog, eval_catalog, train_index, eval_index) where the
    index lists map each new flat position to the original one.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValidationError("eval_fraction must be in (0, 1)")
    train_items, eval_items = [], []
    train_idx, eval_idx = [], []
    for g in range(catalog.n_groups):
        idx = catalog.group_indices(g)
        images = sorted({catalog.pair(i).image_id for i in idx})
        if len(images) < 2:
            raise ValidationError(f"group {catalog.group_labels[g]!r} has fewer than 2 images to split")
        n_eval = min(len(images) - 1, max(1, int(round(eval_fraction * len(images)))))
        held = set(rng.choice(images, size=n_eval, replace=False).tolist())
        for i in idx:
            p = catalog.pair(i)
            if p.image_id in held:
                eval_items.append((p, catalog.group_labels[g]))
                eval_idx.append(i)
            else:
                train_items.append((p, catalog.group_labels[g]))
                train_idx.append(i)
    return build_catalog(train_items), build_catalog(eval_items), train_idx, eval_idx


def build_eval_set(
    catalog: GroupCatalog,
    rng: np.random.Generator,
    K: int = 10,
    exclude: Callable[[int, int], bool] | None = None,
) -> EvalSet:
    """One item per pair: its expression against same-image regions of its
    group, topped up with random same-group distractors to K candidates.

    ``exclude(query, candidate)`` drops distractors, e.g. ones that are
    indistinguishable from the target.
    """
    if K < 1:
        raise ValidationError("K must be >= 1")
    items = []
    for g in range(catalog.n_groups):
        idx = catalog.group_indices(g)
        for q in idx:
            img = catalog.pair(q).image_id
            same = [i for i in idx if i != q and catalog.pair(i).image_id == img]
            others = [i for i in idx if catalog.pair(i).image_id != img]
            if exclude is not None:
                same = [i for i in same if not exclude(q, i)]
                others = [i for i in others if not exclude(q, i)]
            cands = [q] + same[: K - 1]
            need = K - len(cands)
            if need > 0 and others:
                pick = rng.choice(len(others), size=min(need, len(others)), replace=False)
                cands += [others[int(k)] for k in pick]
            order = rng.permutation(len(cands))
            cands = [cands[int(k)] for k in order]
            items.append(EvalItem(q, tuple(cands), cands.index(q), g))
    return EvalSet(catalog, tuple(items))


def candidate_scores(params: EncoderParams, bank: FeatureBank, eval_set: EvalSet, chunk: int = 256) -> list[np.ndarray]:
    """F(v, s) for every candidate of every item."""
    out: list[np.ndarray] = []
    items = eval_set.items
    for lo in range(0, len(items), chunk):
        part = items[lo:lo + chunk]
        S, Ssb = encode_expressions(bank.expressions.take([it.query for it in part]), params)
        rows = np.concatenate([np.full(len(it.candidates), n) for n, it in enumerate(part)])
        regions = np.concatenate([it.candidates for it in part])
        V = encode_regions(bank.regions.take(regions), ad.take(Ssb, rows), params)
        F = match_scores(V, ad.take(S, rows), params).data
        bounds = np.cumsum([0] + [len(it.candidates) for it in part])
        out.extend(F[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:]))
    return out


def predictions(scores: Sequence[np.ndarray]) -> np.ndarray:
    """argmax per item; np.argmax returns the lowest index among ties."""
    for s in scores:
        if len(s) == 0:
            raise ValidationError("eval item with an empty candidate list")
    return np.array([int(np.argmax(s)) for s in scores])


def accuracy_from_scores(scores: Sequence[np.ndarray], eval_set: EvalSet) -> np.ndarray:
    """Boolean correctness per item."""
    pred = predictions(scores)
    return pred == np.array([it.target for it in eval_set.items])


def accuracy(params: EncoderParams, bank: FeatureBank, eval_set: EvalSet) -> float:
    if not eval_set.items:
        raise ValidationError("empty eval set")
    return float(accuracy_from_scores(candidate_scores(params, bank, eval_set), eval_set).mean())


@dataclass(frozen=True)
class GroupAccuracy:
    per_group: np.ndarray  # NaN for groups without eval items
    ave: float
    std: float


def group_stats(per_group: np.ndarray) -> GroupAccuracy:
    """AVE and population STD over groups that have eval items."""
    vals = per_group[~np.isnan(per_group)]
    if vals.size == 0:
        raise ValidationError("no group has eval items")
    return GroupAccuracy(per_group, float(vals.mean()), float(vals.std()))


def group_accuracy_from_correct(correct: np.ndarray, eval_set: EvalSet) -> GroupAccuracy:
    G = eval_set.catalog.n_groups
    groups = np.array([it.group for it in eval_set.items])
    per = np.full(G, np.nan)
    for g in range(G):
        sel = groups == g
        if sel.any():
            per[g] = correct[sel].mean()
    return group_stats(per)


def group_accuracy(params: EncoderParams, bank: FeatureBank, eval_set: EvalSet) -> GroupAccuracy:
    correct = accuracy_from_scores(candidate_scores(params, bank, eval_set), eval_set)
    return group_accuracy_from_correct(correct, eval_set)


def selection_cv(counts) -> tuple[float, float]:
    """Mean and coefficient of variation (%, population std) of per-group counts."""
    counts = np.asarray(counts, dtype=float)
    mean = counts.mean()
    if mean == 0:
        raise MSRLError("coefficient of variation undefined for zero mean")
    return float(mean), float(100.0 * counts.std() / mean)


@dataclass
class MetricsSnapshot:
    iteration: int
    loss: float
    mean_R_all: float
    mean_R_selected: float  # NaN when nothing is selected
    selected_total: int
    lambda1: float
    lambda2: float
    gamma: float
    val_acc: float  # NaN without an eval set
    selected_per_group: list[int] = field(default_factory=list)
    acc_per_group: list[float] = field(default_factory=list)

    def __post_init__(self):
        if sum(self.selected_per_group) != self.selected_total:
            raise ValidationError("per-group selection counts do not sum to the total")

    def to_dict(self) -> dict:
        return asdict(self)


def snapshot(
    iteration: int,
    loss: float,
    R,
    U,
    schedule,
    params: EncoderParams | None = None,
    bank: FeatureBank | None = None,
    eval_set: EvalSet | None = None,
) -> MetricsSnapshot:
    counts = U.group_counts()
    sel = U.selected()
    mean_sel = R.masked_mean(sel[None]) if counts.sum() else math.nan
    if eval_set is not None and eval_set.items:
        correct = accuracy_from_scores(candidate_scores(params, bank, eval_set), eval_set)
        ga = group_accuracy_from_correct(correct, eval_set)
        val = float(correct.mean())
        per = [float(x) for x in ga.per_group]
    else:
        val = math.nan
        per = [math.nan] * len(counts)
    return MetricsSnapshot(
        iteration=iteration,
        loss=float(loss),
        mean_R_all=R.mean(),
        mean_R_selected=mean_sel,
        selected_total=int(counts.sum()),
        lambda1=schedule.lambda1,
        lambda2=schedule.lambda2,
        gamma=schedule.gamma,
        val_acc=val,
        selected_per_group=[int(c) for c in counts],
        acc_per_group=per,
    )
