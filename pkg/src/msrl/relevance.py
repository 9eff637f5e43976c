"""Anchor/negative cross-modal relevance matrices with missing-entry sentinels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import TripletBatch
from .encoders import FeatureBank, ModularFeatures
from .errors import DegenerateEmbeddingError, MSRLError, ValidationError

MODES = ("cosine01", "paper_literal")
ALPHA_POLICIES = ("per_pair", "visual", "textual")
VISUAL, TEXTUAL = 1, 0

# returned by pair_relevance when the needed feature is missing
SENTINEL = None


def _cosine01(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise DegenerateEmbeddingError("zero-norm feature in cosine relevance")
    cos = np.sum(a * b, axis=-1) / (na * nb)
    return (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0


def pair_relevance(
    anchor_v: ModularFeatures | None,
    anchor_s: ModularFeatures | None,
    negative_v: ModularFeatures | None = None,
    negative_s: ModularFeatures | None = None,
    mode: str = "cosine01",
    alpha: int | None = None,
):
    """Relevance of one anchor/negative pair, or ``SENTINEL`` if a feature is missing.

    By default alpha follows the negative: a region negative is compared
    visually (alpha=1), an expression negative textually (alpha=0). In
    ``paper_literal`` mode the raw dot product is returned; normalisation
    over the batch happens in :func:`relevance_matrices`.
    """
    if mode not in MODES:
        raise ValidationError(f"relevance mode must be one of {MODES}")
    if alpha is None:
        if negative_v is not None and negative_s is None:
            alpha = VISUAL
        elif negative_s is not None and negative_v is None:
            alpha = TEXTUAL
        else:
            raise ValidationError("give exactly one negative feature or an explicit alpha")
    a, b = (anchor_v, negative_v) if alpha == VISUAL else (anchor_s, negative_s)
    if a is None or b is None:
        return SENTINEL
    a, b = a.concatenated, b.concatenated
    if mode == "paper_literal":
        return float(a @ b)
    return float(_cosine01(a, b))


@dataclass
class EntryFeatures:
    """Features of the admissible (anchor i, column j) entries of a batch.

    ``anchor_side[k]`` and ``negative_side[k]`` are the two vectors compared
    for entry (rows[k], cols[k]) in modality ``alpha[k]``; rows of
    ``missing`` have no counterpart feature and become sentinels.
    """

    rows: np.ndarray
    cols: np.ndarray
    alpha: np.ndarray
    anchor_side: np.ndarray
    negative_side: np.ndarray
    missing: np.ndarray | None = None


@dataclass
class RelevanceMatrixSet:
    values: np.ndarray  # G x M x M'
    mask: np.ndarray  # G x M x M', True where the entry is defined
    alpha: np.ndarray  # M x M', modality used for each entry

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    def entries(self, alpha: int | None = None) -> np.ndarray:
        """Values of unmasked entries, optionally of one modality."""
        sel = self.mask
        if alpha is not None:
            sel = sel & (self.alpha == alpha)[None]
        return self.values[sel]

    def count(self, alpha: int | None = None) -> int:
        return int(self.entries(alpha).size)

    def masked_sum(self, fn=None, alpha: int | None = None) -> float:
        x = self.entries(alpha)
        return float(np.sum(fn(x) if fn is not None else x))

    def mean(self) -> float:
        x = self.entries()
        return float(x.mean()) if x.size else float("nan")

    def masked_mean(self, select: np.ndarray) -> float:
        """Mean over entries that are both unmasked and in ``select``."""
        x = self.values[self.mask & select]
        return float(x.mean()) if x.size else float("nan")

    def entry_groups(self) -> np.ndarray:
        """M x M' group index of each entry, -1 where no group defines it."""
        out = np.full(self.values.shape[1:], -1)
        for g in range(self.n_groups):
            out[self.mask[g]] = g
        return out


def relevance_matrices(
    batch: TripletBatch,
    n_groups: int,
    feats: EntryFeatures,
    mode: str = "cosine01",
) -> RelevanceMatrixSet:
    """Fill R^(g) for every group; entries outside a group stay masked."""
    if mode not in MODES:
        raise ValidationError(f"relevance mode must be one of {MODES}")
    M, Mp = batch.M, batch.M_prime
    values = np.zeros((n_groups, M, Mp))
    mask = np.zeros((n_groups, M, Mp), dtype=bool)
    alpha = np.tile(batch.column_alpha(), (M, 1))
    rows, cols = feats.rows, feats.cols
    if rows.size == 0:
        return RelevanceMatrixSet(values, mask, alpha)
    ok = np.ones(rows.size, dtype=bool) if feats.missing is None else ~feats.missing
    if not np.all(batch.admissible[rows, cols]):
        raise ValidationError("relevance requested for an inadmissible entry")
    groups = np.asarray(batch.anchor_groups)[rows]
    alpha[rows, cols] = feats.alpha
    if mode == "cosine01":
        vals = np.zeros(rows.size)
        if ok.any():
            vals[ok] = _cosine01(feats.anchor_side[ok], feats.negative_side[ok])
    else:
        dots = np.sum(feats.anchor_side * feats.negative_side, axis=1)
        vals = np.zeros(rows.size)
        for g in np.unique(groups[ok]):
            for a in (VISUAL, TEXTUAL):
                sel = ok & (groups == g) & (feats.alpha == a)
                if not sel.any():
                    continue
                denom = dots[sel].sum()
                if denom <= 1e-9:
                    raise MSRLError(f"degenerate relevance normaliser {denom:.3g} in group {g}")
                vals[sel] = dots[sel] / denom
    values[groups[ok], rows[ok], cols[ok]] = vals[ok]
    mask[groups[ok], rows[ok], cols[ok]] = True
    return RelevanceMatrixSet(values, mask, alpha)


def raw_entry_features(bank: FeatureBank, batch: TripletBatch) -> EntryFeatures:
    """Entry features straight from the inputs, with no encoder in between.

    An expression is summarised by the sum of its word vectors and a region by
    the mean of its grid cells. Useful for checking relevance against a known
    ground truth, where learned encoders would only add noise.
    """
    words = (bank.expressions.emb * bank.expressions.mask[..., None]).sum(axis=1)
    grids = bank.regions.grid.mean(axis=2)
    if words.shape[1] != grids.shape[1]:
        raise ValidationError("raw relevance needs word and grid features of equal size")
    rows, cols = np.nonzero(batch.admissible)
    alpha = batch.column_alpha()[cols]
    anchors = np.asarray(batch.anchors)[rows]
    negs = np.array([j for _, j, _ in batch.negatives()], dtype=int)[cols]
    visual = alpha == VISUAL
    anchor_side = np.where(visual[:, None], grids[anchors], words[anchors])
    negative_side = np.where(visual[:, None], grids[negs], words[negs])
    return EntryFeatures(rows, cols, alpha, anchor_side, negative_side)
