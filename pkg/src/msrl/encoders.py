"""Modular textual/visual encoders and the matching score F(v, s).

Everything is batched: expressions as (E, T, d) word embeddings with a word
mask, regions as (R, c, B) grid features plus padded neighbor arrays. Region
encoding is conditioned on an expression's subject feature (cross-modal
attention), so the same region yields different features for different
queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import MAX_NEIGHBORS, ExpressionItem, GroupCatalog, RegionItem
from .errors import DegenerateEmbeddingError, ValidationError

MODULES = ("sb", "sl", "sr")
INIT_MODES = ("scaled", "paper_literal")


def param_shapes(d: int, c: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"context_proj": (d, d)}
    for m in MODULES:
        shapes[f"w_{m}"] = (d,)
    shapes.update({
        "W_v": (d, c),
        "W_s": (d, d),
        "w_a": (d,),
        "W_l": (d, 10),
        "b_l": (d,),
        "W_r": (d, d + 5),
        "b_r": (d,),
    })
    for side in ("v", "s"):
        shapes[f"mlp_{side}_W1"] = (d, 3 * d)
        shapes[f"mlp_{side}_b1"] = (d,)
        shapes[f"mlp_{side}_W2"] = (d, d)
        shapes[f"mlp_{side}_b2"] = (d,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], d: int) -> int:
    if len(shape) == 2:
        return shape[1]
    if name.startswith("mlp_") and name.endswith("b1"):
        return 3 * d
    return d


class EncoderParams:
    """Named parameter blocks, each a differentiable Tensor."""

    def __init__(self, blocks: dict[str, np.ndarray], d: int, c: int):
        expected = param_shapes(d, c)
        if set(blocks) != set(expected):
            missing = sorted(set(expected) - set(blocks))
            extra = sorted(set(blocks) - set(expected))
            raise ValidationError(f"parameter blocks mismatch: missing {missing}, unexpected {extra}")
        self.d, self.c = d, c
        self._t: dict[str, Tensor] = {}
        for name in expected:
            arr = np.array(blocks[name], dtype=np.float64)
            if arr.shape != expected[name]:
                raise ValidationError(f"block {name}: shape {arr.shape} != {expected[name]}")
            self._t[name] = Tensor(arr, requires_grad=True, name=name)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def names(self) -> list[str]:
        return list(self._t)

    def tensors(self) -> list[Tensor]:
        return list(self._t.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._t.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._t.items()}

    def zero_grad(self) -> None:
        ad.zero_grads(self._t.values())

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays().items()}, self.d, self.c)

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._t.values())


def init_params(d: int, c: int, rng: np.random.Generator, mode: str = "scaled") -> EncoderParams:
    """``scaled``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``paper_literal``: U[0, 1)."""
    if mode not in INIT_MODES:
        raise ValidationError(f"init mode must be one of {INIT_MODES}")
    blocks = {}
    for name, shape in param_shapes(d, c).items():
        if mode == "paper_literal":
            blocks[name] = rng.random(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape, d))
            blocks[name] = rng.uniform(-bound, bound, shape)
    return EncoderParams(blocks, d, c)


@dataclass(frozen=True)
class ModularFeatures:
    subject: np.ndarray
    location: np.ndarray
    relation: np.ndarray

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.subject, self.location, self.relation])

    @classmethod
    def from_concatenated(cls, x: np.ndarray) -> "ModularFeatures":
        d = x.shape[-1] // 3
        return cls(x[:d].copy(), x[d:2 * d].copy(), x[2 * d:].copy())


# ---------------------------------------------------------------- packing


@dataclass
class ExpressionArrays:
    emb: np.ndarray  # E x T x d
    mask: np.ndarray  # E x T bool

    def take(self, idx) -> "ExpressionArrays":
        return ExpressionArrays(self.emb[idx], self.mask[idx])


@dataclass
class RegionArrays:
    grid: np.ndarray  # R x c x B
    loc: np.ndarray  # R x 5
    nb_offset: np.ndarray  # R x 5 x 5
    nb_feature: np.ndarray  # R x 5 x d
    nb_mask: np.ndarray  # R x 5 bool

    def take(self, idx) -> "RegionArrays":
        return RegionArrays(self.grid[idx], self.loc[idx], self.nb_offset[idx], self.nb_feature[idx], self.nb_mask[idx])


def pack_expressions(items: list[ExpressionItem]) -> ExpressionArrays:
    T = max(e.word_embeddings.shape[0] for e in items)
    d = items[0].word_embeddings.shape[1]
    emb = np.zeros((len(items), T, d))
    mask = np.zeros((len(items), T), dtype=bool)
    for n, e in enumerate(items):
        t = e.word_embeddings.shape[0]
        emb[n, :t] = e.word_embeddings
        mask[n, :t] = True
    return ExpressionArrays(emb, mask)


def pack_regions(items: list[RegionItem]) -> RegionArrays:
    c, B = items[0].grid_features.shape
    ctx_dim = next((r.context_neighbors[0].feature.shape[0] for r in items if r.context_neighbors), c)
    R = len(items)
    grid = np.zeros((R, c, B))
    loc = np.zeros((R, 5))
    off = np.zeros((R, MAX_NEIGHBORS, 5))
    feat = np.zeros((R, MAX_NEIGHBORS, ctx_dim))
    mask = np.zeros((R, MAX_NEIGHBORS), dtype=bool)
    for n, r in enumerate(items):
        grid[n] = r.grid_features
        loc[n] = r.box.location_vector()
        k = len(r.context_neighbors)
        if k:
            off[n, :k] = r.neighbor_offsets()
            feat[n, :k] = np.stack([nb.feature for nb in r.context_neighbors])
            mask[n, :k] = True
    return RegionArrays(grid, loc, off, feat, mask)


class FeatureBank:
    """Packed input arrays for every pair of a catalog, indexed by flat position."""

    def __init__(self, catalog: GroupCatalog):
        pairs = catalog.pairs()
        self.expressions = pack_expressions([p.expression for p in pairs])
        self.regions = pack_regions([p.region for p in pairs])
        self.d = self.expressions.emb.shape[2]
        self.c = self.regions.grid.shape[1]


# ------------------------------------------------------------- operations


def context_encode(emb, params: EncoderParams) -> Tensor:
    """h_t = context_proj . e_t for every word."""
    emb = ad.as_tensor(emb)
    if emb.shape[-1] != params.d:
        raise ValidationError(f"word embedding size {emb.shape[-1]} != d={params.d}")
    return ad.einsum("etk,dk->etd", emb, params["context_proj"])


def textual_modular_attention(h: Tensor, e, w_m: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Attention over words scored on h, pooling the word embeddings e."""
    e = ad.as_tensor(e)
    logits = ad.einsum("etd,d->et", h, w_m)
    a = ad.softmax(logits, axis=1, mask=mask)
    return ad.einsum("et,etd->ed", a, e)


def visual_subject_attention(grid, s_sb: Tensor, params: EncoderParams) -> Tensor:
    """Grid attention guided by the expression subject feature, projected to d by W_v."""
    grid = ad.as_tensor(grid)
    if grid.shape[1] != params.c or s_sb.shape[-1] != params.d:
        raise ValidationError("grid/subject feature dimensions do not match the parameters")
    hv = ad.einsum("dc,rcb->rdb", params["W_v"], grid)
    hs = ad.einsum("dk,rk->rd", params["W_s"], s_sb)
    ha = ad.tanh(hv + ad.reshape(hs, hs.shape + (1,)))
    attn = ad.softmax(ad.einsum("d,rdb->rb", params["w_a"], ha), axis=1)
    pooled = ad.einsum("rb,rcb->rc", attn, grid)
    return ad.einsum("dc,rc->rd", params["W_v"], pooled)


def pooled_offsets(nb_offset: np.ndarray, nb_mask: np.ndarray) -> np.ndarray:
    """Element-wise mean of the neighbor offset vectors; zero without neighbors."""
    count = nb_mask.sum(axis=1, keepdims=True)
    summed = (nb_offset * nb_mask[..., None]).sum(axis=1)
    return np.divide(summed, count, out=np.zeros_like(summed), where=count > 0)


def location_feature(loc: np.ndarray, nb_offset: np.ndarray, nb_mask: np.ndarray, params: EncoderParams) -> Tensor:
    x = np.concatenate([loc, pooled_offsets(nb_offset, nb_mask)], axis=1)
    return ad.einsum("dk,rk->rd", params["W_l"], x) + params["b_l"]


def relation_feature(nb_feature: np.ndarray, nb_offset: np.ndarray, nb_mask: np.ndarray, params: EncoderParams) -> Tensor:
    x = np.concatenate([nb_feature, nb_offset], axis=2)
    if x.shape[2] != params["W_r"].shape[1]:
        raise ValidationError("context feature size does not match W_r")
    per_neighbor = ad.einsum("dk,rjk->rjd", params["W_r"], x) + params["b_r"]
    return ad.masked_max(per_neighbor, nb_mask[..., None], axis=1)


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def encode_expressions(
    arrays: ExpressionArrays,
    params: EncoderParams,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns (concatenated features E x 3d, subject features E x d)."""
    e = _dropout(Tensor(arrays.emb), dropout, rng)
    h = _dropout(context_encode(e, params), dropout, rng)
    mods = [textual_modular_attention(h, e, params[f"w_{m}"], arrays.mask) for m in MODULES]
    return ad.concat(mods, axis=1), mods[0]


def encode_regions(arrays: RegionArrays, s_sb: Tensor, params: EncoderParams) -> Tensor:
    """Concatenated region features (R x 3d), row r conditioned on s_sb[r]."""
    v_sb = visual_subject_attention(arrays.grid, s_sb, params)
    v_sl = location_feature(arrays.loc, arrays.nb_offset, arrays.nb_mask, params)
    v_sr = relation_feature(arrays.nb_feature, arrays.nb_offset, arrays.nb_mask, params)
    return ad.concat([v_sb, v_sl, v_sr], axis=1)


def encode_expression(item: ExpressionItem, params: EncoderParams) -> ModularFeatures:
    s, _ = encode_expressions(pack_expressions([item]), params)
    return ModularFeatures.from_concatenated(s.data[0])


def encode_region(item: RegionItem, s_sb: np.ndarray, params: EncoderParams) -> ModularFeatures:
    v = encode_regions(pack_regions([item]), Tensor(np.asarray(s_sb)[None, :]), params)
    return ModularFeatures.from_concatenated(v.data[0])


def mlp(x: Tensor, params: EncoderParams, side: str) -> Tensor:
    h = ad.tanh(ad.einsum("dk,rk->rd", params[f"mlp_{side}_W1"], x) + params[f"mlp_{side}_b1"])
    return ad.einsum("dk,rk->rd", params[f"mlp_{side}_W2"], h) + params[f"mlp_{side}_b2"]


def _check_norm(z: Tensor, what: str) -> None:
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError(f"{what} MLP output has zero norm")


def match_scores(v: Tensor, s: Tensor, params: EncoderParams) -> Tensor:
    """Row-wise F(v_r, s_r): cosine of the L2-normalised MLP embeddings."""
    zv, zs = mlp(v, params, "v"), mlp(s, params, "s")
    _check_norm(zv, "region")
    _check_norm(zs, "expression")
    return ad.total(ad.l2_normalize(zv, 1) * ad.l2_normalize(zs, 1), axis=1)


def match_score(v: ModularFeatures, s: ModularFeatures, params: EncoderParams) -> float:
    out = match_scores(Tensor(v.concatenated[None, :]), Tensor(s.concatenated[None, :]), params)
    return float(out.data[0])
