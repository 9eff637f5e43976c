"""Attribute-structured synthetic datasets with a ground-truth relevance oracle.

Every entity is a vector of attribute values. A fixed random codebook maps
each (attribute, value) to a d-vector; expressions are one word per attribute
(its code plus noise) and region grids tile the summed codes plus noise. The
oracle relevance of two entities is the fraction of attributes they share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    BoundingBox,
    ExpressionItem,
    GroupCatalog,
    MatchedPair,
    Neighbor,
    RegionItem,
    build_catalog,
)
from .errors import ValidationError

IMAGE_SIZE = 100.0


@dataclass(frozen=True)
class AttributeSchema:
    n_attributes: int
    values_per_attribute: tuple[int, ...]
    d: int
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values_per_attribute", tuple(int(v) for v in self.values_per_attribute))
        if self.n_attributes < 1:
            raise ValidationError("n_attributes must be >= 1")
        if len(self.values_per_attribute) != self.n_attributes:
            raise ValidationError("one cardinality per attribute required")
        if any(v < 2 for v in self.values_per_attribute):
            raise ValidationError("every attribute needs at least 2 values")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.d < 4:
            raise ValidationError(f"embedding size d={self.d} too small (need >= 4)")


@dataclass(frozen=True)
class SyntheticEntity:
    attribute_values: tuple[int, ...]
    group_id: int


@dataclass(frozen=True)
class SyntheticWorld:
    schema: AttributeSchema
    catalog: GroupCatalog
    entities: tuple[SyntheticEntity, ...]  # aligned with flat catalog index
    codebook: np.ndarray  # n_attributes x max_card x d

    def oracle(self, i: int, j: int) -> float:
        return oracle_relevance(self.entities[i], self.entities[j])

    def code_sum(self, entity: SyntheticEntity) -> np.ndarray:
        return sum(self.codebook[a, v] for a, v in enumerate(entity.attribute_values))


def oracle_relevance(a: SyntheticEntity, b: SyntheticEntity) -> float:
    if len(a.attribute_values) != len(b.attribute_values):
        raise ValidationError("entities come from different schemas")
    va, vb = np.asarray(a.attribute_values), np.asarray(b.attribute_values)
    return float(np.mean(va == vb))


def make_codebook(schema: AttributeSchema, rng: np.random.Generator) -> np.ndarray:
    """Unit-length code per (attribute, value); mutually orthogonal when d allows."""
    total = sum(schema.values_per_attribute)
    raw = rng.standard_normal((schema.d, total))
    if schema.d >= total:
        q, r = np.linalg.qr(raw)
        # fix column signs so the result does not depend on the LAPACK sign convention
        cols = q * np.sign(np.diag(r))
    else:
        cols = raw / np.linalg.norm(raw, axis=0)
    book = np.zeros((schema.n_attributes, max(schema.values_per_attribute), schema.d))
    k = 0
    for a, card in enumerate(schema.values_per_attribute):
        for v in range(card):
            book[a, v] = cols[:, k]
            k += 1
    return book


def _image_boxes(n: int, rng: np.random.Generator) -> list[BoundingBox]:
    """Non-overlapping boxes in side-by-side vertical strips."""
    strip = IMAGE_SIZE / n
    boxes = []
    for k in range(n):
        lo = k * strip
        x1 = lo + rng.uniform(0.0, 0.25) * strip
        x2 = lo + strip - rng.uniform(0.0, 0.25) * strip
        y1 = rng.uniform(0.0, 0.3) * IMAGE_SIZE
        y2 = IMAGE_SIZE - rng.uniform(0.0, 0.3) * IMAGE_SIZE
        boxes.append(BoundingBox(round(x1, 3), round(y1, 3), round(x2, 3), round(y2, 3), IMAGE_SIZE, IMAGE_SIZE))
    return boxes


def generate_world(
    schema: AttributeSchema,
    n_groups: int,
    pairs_per_group: int,
    rng: np.random.Generator,
    *,
    objects_per_image: int = 2,
    grid_side: int = 2,
    group_skew: float = 0.0,
) -> SyntheticWorld:
    """Build a grouped catalog of matched region/expression pairs.

    ``group_skew`` in [0, 1] concentrates attribute values inside later groups:
    group g draws each attribute from its own prototype value with probability
    ``group_skew * g / (n_groups - 1)`` and uniformly otherwise. The default 0
    gives uniform draws everywhere.
    """
    if pairs_per_group < 2:
        raise ValidationError("pairs_per_group must be >= 2")
    if n_groups < 1:
        raise ValidationError("n_groups must be >= 1")
    if not 1 <= objects_per_image <= 6:
        raise ValidationError("objects_per_image must be in [1, 6]")
    if not 0.0 <= group_skew <= 1.0:
        raise ValidationError("group_skew must be in [0, 1]")
    codebook = make_codebook(schema, rng)
    cards = np.array(schema.values_per_attribute)
    prototypes = np.stack([rng.integers(0, cards) for _ in range(n_groups)])
    width = len(str(n_groups * pairs_per_group))

    # group_id is assigned round-robin over a global entity counter
    n_total = n_groups * pairs_per_group
    entity_values = [rng.integers(0, cards) for _ in range(n_total)]
    by_group: list[list[np.ndarray]] = [[] for _ in range(n_groups)]
    for n, values in enumerate(entity_values):
        by_group[n % n_groups].append(values)

    sigma = schema.noise_sigma
    B = grid_side * grid_side
    items = []
    entities = []
    for g in range(n_groups):
        skew = group_skew * g / max(1, n_groups - 1)
        label = f"group{g:0{len(str(max(n_groups - 1, 1)))}d}"
        members = by_group[g]
        if skew > 0:
            for values in members:
                keep = rng.random(schema.n_attributes) < skew
                values[keep] = prototypes[g][keep]
        codes = [sum(codebook[a, v] for a, v in enumerate(values)) for values in members]
        for start in range(0, pairs_per_group, objects_per_image):
            idx = list(range(start, min(start + objects_per_image, pairs_per_group)))
            image_id = f"img_g{g:02d}_{start // objects_per_image:0{width}d}"
            boxes = _image_boxes(len(idx), rng)
            ctx = {k: codes[k] + sigma * rng.standard_normal(schema.d) for k in idx}
            for slot, k in enumerate(idx):
                values = members[k]
                words = np.stack([codebook[a, v] for a, v in enumerate(values)])
                words = words + sigma * rng.standard_normal(words.shape)
                grid = codes[k][:, None] + sigma * rng.standard_normal((schema.d, B))
                neighbors = tuple(Neighbor(ctx[o], boxes[idx.index(o)]) for o in idx if o != k)[:5]
                uid = f"g{g:02d}_{k:0{width}d}"
                region = RegionItem(f"r_{uid}", image_id, g, boxes[slot], grid, neighbors)
                expr = ExpressionItem(f"e_{uid}", image_id, g, words)
                items.append((MatchedPair(region, expr), label))
                entities.append(SyntheticEntity(tuple(int(v) for v in values), g))
    catalog = build_catalog(items)
    # build_catalog keeps insertion order within each label and labels sort in g order
    return SyntheticWorld(schema, catalog, tuple(entities), codebook)
