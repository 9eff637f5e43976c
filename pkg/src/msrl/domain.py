"""Regions, expressions, groups and triplet batches."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BatchConstructionError, DimensionError, ValidationError

IOU_FILTERS = ("purpose", "paper_literal")
NEGATIVE_POOLS = ("group", "image")
MAX_NEIGHBORS = 5
MAX_RESAMPLE = 50


def _frozen(a, ndim: int, what: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValidationError(f"{what} must be {ndim}-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    image_width: float
    image_height: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {self.as_tuple()}")
        if self.x1 < 0 or self.y1 < 0 or self.x2 > self.image_width or self.y2 > self.image_height:
            raise ValidationError(
                f"box {self.as_tuple()} outside image {self.image_width}x{self.image_height}"
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def location_vector(self) -> np.ndarray:
        """[x1/W, y1/H, x2/W, y2/H, wh/WH]."""
        W, H = self.image_width, self.image_height
        return np.array([self.x1 / W, self.y1 / H, self.x2 / W, self.y2 / H, self.area / (W * H)])

    def offset_from(self, ref: "BoundingBox") -> np.ndarray:
        """Position offsets and area ratio of this box relative to ``ref``."""
        w, h = ref.width, ref.height
        return np.array([
            (self.x1 - ref.x1) / w,
            (self.y1 - ref.y1) / h,
            (self.x2 - ref.x2) / w,
            (self.y2 - ref.y2) / h,
            self.area / ref.area,
        ])


def compute_iou(a: BoundingBox, b: BoundingBox) -> float:
    for box in (a, b):
        if not (box.x1 < box.x2 and box.y1 < box.y2):
            raise ValidationError(f"degenerate box {box.as_tuple()}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Neighbor:
    """A surrounding region: its context feature and its box in the same image."""

    feature: np.ndarray
    box: BoundingBox

    def __post_init__(self):
        object.__setattr__(self, "feature", _frozen(self.feature, 1, "neighbor feature"))


@dataclass(frozen=True)
class RegionItem:
    region_id: str
    image_id: str
    group_id: int
    box: BoundingBox
    grid_features: np.ndarray  # c x B
    context_neighbors: tuple[Neighbor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "grid_features", _frozen(self.grid_features, 2, f"grid_features of {self.region_id}"))
        object.__setattr__(self, "context_neighbors", tuple(self.context_neighbors))
        if len(self.context_neighbors) > MAX_NEIGHBORS:
            raise ValidationError(f"region {self.region_id} has {len(self.context_neighbors)} neighbors (max 5)")
        B = self.grid_features.shape[1]
        side = math.isqrt(B)
        if side * side != B:
            raise ValidationError(f"region {self.region_id}: grid size {B} is not a square")

    def neighbor_offsets(self) -> np.ndarray:
        if not self.context_neighbors:
            return np.zeros((0, 5))
        return np.stack([n.box.offset_from(self.box) for n in self.context_neighbors])


@dataclass(frozen=True)
class ExpressionItem:
    expression_id: str
    image_id: str
    group_id: int
    word_embeddings: np.ndarray  # T x d

    def __post_init__(self):
        emb = _frozen(self.word_embeddings, 2, f"word_embeddings of {self.expression_id}")
        if emb.shape[0] < 1:
            raise ValidationError(f"expression {self.expression_id} has no words")
        object.__setattr__(self, "word_embeddings", emb)


@dataclass(frozen=True)
class MatchedPair:
    region: RegionItem
    expression: ExpressionItem

    def __post_init__(self):
        if self.region.image_id != self.expression.image_id:
            raise ValidationError(
                f"pair {self.region.region_id}/{self.expression.expression_id}: image ids differ"
            )
        if self.region.group_id != self.expression.group_id:
            raise ValidationError(
                f"pair {self.region.region_id}/{self.expression.expression_id}: group ids differ"
            )

    @property
    def group_id(self) -> int:
        return self.region.group_id

    @property
    def image_id(self) -> str:
        return self.region.image_id


@dataclass(frozen=True)
class GroupCatalog:
    groups: tuple[tuple[MatchedPair, ...], ...]
    group_labels: tuple[str, ...]
    # flat index -> (group, position); built in __post_init__
    _flat: tuple[tuple[int, int], ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if not self.groups:
            raise ValidationError("catalog needs at least one group")
        if len(self.groups) != len(self.group_labels):
            raise ValidationError("one label per group required")
        flat = []
        for g, members in enumerate(self.groups):
            if not members:
                raise ValidationError(f"group {self.group_labels[g]!r} is empty")
            for k, pair in enumerate(members):
                if pair.group_id != g:
                    raise ValidationError(
                        f"pair {pair.region.region_id} stores group {pair.group_id} but sits in group {g}"
                    )
                flat.append((g, k))
        object.__setattr__(self, "_flat", tuple(flat))

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_pairs(self) -> int:
        return len(self._flat)

    def group_sizes(self) -> list[int]:
        return [len(m) for m in self.groups]

    def pair(self, flat_index: int) -> MatchedPair:
        g, k = self._flat[flat_index]
        return self.groups[g][k]

    def group_of(self, flat_index: int) -> int:
        return self._flat[flat_index][0]

    def group_indices(self, g: int) -> list[int]:
        start = sum(len(m) for m in self.groups[:g])
        return list(range(start, start + len(self.groups[g])))

    def pairs(self) -> list[MatchedPair]:
        return [self.pair(i) for i in range(self.n_pairs)]

    def dims(self) -> dict[str, int]:
        p = self.groups[0][0]
        return {
            "d": p.expression.word_embeddings.shape[1],
            "c": p.region.grid_features.shape[0],
            "B": p.region.grid_features.shape[1],
        }


def build_catalog(items: Iterable[tuple[MatchedPair, str]]) -> GroupCatalog:
    """Partition labelled pairs into groups ordered by label.

    Group ids stored on the items are rewritten to the label's index.
    """
    items = list(items)
    if not items:
        raise ValidationError("cannot build a catalog from no pairs")
    for pair, label in items:
        if not isinstance(label, str) or not label.strip():
            raise ValidationError(f"pair {pair.region.region_id} has an empty group label")
    labels = sorted({label for _, label in items})
    index = {label: g for g, label in enumerate(labels)}
    groups: list[list[MatchedPair]] = [[] for _ in labels]
    for pair, label in items:
        g = index[label]
        if pair.group_id != g:
            pair = MatchedPair(
                dataclasses.replace(pair.region, group_id=g),
                dataclasses.replace(pair.expression, group_id=g),
            )
        groups[g].append(pair)
    catalog = GroupCatalog(tuple(tuple(m) for m in groups), tuple(labels))
    _check_dims(catalog)
    return catalog


def _check_dims(catalog: GroupCatalog) -> None:
    dims = catalog.dims()
    for pair in catalog.pairs():
        if pair.expression.word_embeddings.shape[1] != dims["d"]:
            raise DimensionError(f"expression {pair.expression.expression_id}: embedding size mismatch")
        if pair.region.grid_features.shape != (dims["c"], dims["B"]):
            raise DimensionError(f"region {pair.region.region_id}: grid feature shape mismatch")
        for n in pair.region.context_neighbors:
            if n.feature.shape != (dims["d"],):
                raise DimensionError(f"region {pair.region.region_id}: neighbor feature size mismatch")


@dataclass(frozen=True)
class TripletBatch:
    """Anchors plus negative expressions (P'1) and negative regions (P'2).

    Indices refer to flat catalog positions. Columns of the M x M' relevance
    and priority matrices are ordered: all of ``neg_expr``, then ``neg_region``.
    ``admissible[i, j]`` marks anchor/negative combinations that may form a
    triplet (same group, not the anchor's own pair, passes the IoU filter and
    the negative-pool rule).
    """

    anchors: tuple[int, ...]
    neg_expr: tuple[tuple[int, int, int], ...]  # (anchor i, pair index, group)
    neg_region: tuple[tuple[int, int, int], ...]
    anchor_groups: tuple[int, ...]
    admissible: np.ndarray

    @property
    def M(self) -> int:
        return len(self.anchors)

    @property
    def M_prime(self) -> int:
        return len(self.neg_expr) + len(self.neg_region)

    @property
    def n_expr(self) -> int:
        return len(self.neg_expr)

    def negatives(self) -> list[tuple[int, int, int]]:
        return list(self.neg_expr) + list(self.neg_region)

    def column_alpha(self) -> np.ndarray:
        """1 for region (visual) columns, 0 for expression (textual) columns."""
        return np.r_[np.zeros(len(self.neg_expr), dtype=int), np.ones(len(self.neg_region), dtype=int)]

    def negative_groups(self) -> np.ndarray:
        return np.array([g for _, _, g in self.negatives()], dtype=int)

    def to_dict(self) -> dict:
        return {
            "anchors": list(self.anchors),
            "neg_expr": [list(t) for t in self.neg_expr],
            "neg_region": [list(t) for t in self.neg_region],
            "anchor_groups": list(self.anchor_groups),
            "admissible": self.admissible.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TripletBatch":
        adm = np.array(d["admissible"], dtype=bool).reshape(len(d["anchors"]), -1)
        return cls(
            tuple(d["anchors"]),
            tuple(tuple(t) for t in d["neg_expr"]),
            tuple(tuple(t) for t in d["neg_region"]),
            tuple(d["anchor_groups"]),
            adm,
        )


def _passes_iou_filter(anchor: MatchedPair, cand: MatchedPair, rule: str) -> bool:
    if anchor.image_id != cand.image_id:
        return True
    iou = compute_iou(anchor.region.box, cand.region.box)
    if rule == "purpose":
        return iou < 0.5
    return iou >= 0.5


def _split(k: int, split_ratio: float) -> tuple[int, int]:
    n1 = min(k, int(math.ceil(k * split_ratio - 1e-12)))
    return n1, k - n1


def construct_batch(
    catalog: GroupCatalog,
    rng: np.random.Generator,
    M: int,
    M_prime: int,
    split_ratio: float = 0.5,
    iou_filter: str = "purpose",
    negative_pool: str = "group",
) -> TripletBatch:
    """Sample M anchors and M' negatives drawn from each anchor's group.

    With ``negative_pool="image"`` negatives come only from the anchor's own
    image (the per-image baseline).
    """
    if iou_filter not in IOU_FILTERS:
        raise ValidationError(f"iou_filter must be one of {IOU_FILTERS}")
    if negative_pool not in NEGATIVE_POOLS:
        raise ValidationError(f"negative_pool must be one of {NEGATIVE_POOLS}")
    if M < 1:
        raise ValidationError("M must be >= 1")
    if M_prime < M or M_prime % M:
        raise ValidationError(f"M'={M_prime} must be a positive multiple of M={M}")
    if M > catalog.n_pairs:
        raise BatchConstructionError(f"M={M} exceeds the {catalog.n_pairs} pairs in the catalog")
    k = M_prime // M
    n1, n2 = _split(k, split_ratio)

    anchors = [int(a) for a in rng.choice(catalog.n_pairs, size=M, replace=False)]
    anchor_groups = [catalog.group_of(a) for a in anchors]
    image_members: dict[str, list[int]] = {}
    if negative_pool == "image":
        for idx in range(catalog.n_pairs):
            image_members.setdefault(catalog.pair(idx).image_id, []).append(idx)

    neg_expr: list[tuple[int, int, int]] = []
    neg_region: list[tuple[int, int, int]] = []
    for i, (a, g) in enumerate(zip(anchors, anchor_groups)):
        label = catalog.group_labels[g]
        if len(catalog.groups[g]) < 2:
            raise BatchConstructionError(f"group {label!r} has a single pair; no negatives available")
        anchor = catalog.pair(a)
        if negative_pool == "image":
            pool = [p for p in image_members[anchor.image_id] if catalog.group_of(p) == g]
        else:
            pool = catalog.group_indices(g)
        pool = [p for p in pool if p != a]
        for count, out in ((n1, neg_expr), (n2, neg_region)):
            chosen: list[int] = []
            rejected: set[int] = set()
            for slot in range(count):
                for _attempt in range(MAX_RESAMPLE):
                    remaining = [p for p in pool if p not in rejected and p not in chosen]
                    if not remaining:
                        break
                    cand = remaining[int(rng.integers(len(remaining)))]
                    if _passes_iou_filter(anchor, catalog.pair(cand), iou_filter):
                        chosen.append(cand)
                        break
                    rejected.add(cand)
                else:
                    raise BatchConstructionError(
                        f"group {label!r}: no admissible negative after {MAX_RESAMPLE} attempts"
                    )
                if len(chosen) <= slot:
                    raise BatchConstructionError(
                        f"group {label!r} cannot supply {count} distinct admissible negatives "
                        f"for anchor {anchor.region.region_id}"
                    )
            out.extend((i, c, g) for c in chosen)

    negs = neg_expr + neg_region
    admissible = np.zeros((M, len(negs)), dtype=bool)
    for i, (a, g) in enumerate(zip(anchors, anchor_groups)):
        anchor = catalog.pair(a)
        for j, (owner, p, pg) in enumerate(negs):
            if owner == i:
                admissible[i, j] = True
                continue
            if pg != g or p == a:
                continue
            cand = catalog.pair(p)
            if negative_pool == "image" and cand.image_id != anchor.image_id:
                continue
            admissible[i, j] = _passes_iou_filter(anchor, cand, iou_filter)
    admissible.setflags(write=False)
    return TripletBatch(tuple(anchors), tuple(neg_expr), tuple(neg_region), tuple(anchor_groups), admissible)
