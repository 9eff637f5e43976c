"""Datasets, experiment configs, checkpoints and CSV export.

Datasets and configs are JSON. Checkpoints are JSON text in which every
float is written with ``float.hex`` so a reload is bit-exact.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import BoundingBox, ExpressionItem, GroupCatalog, MatchedPair, Neighbor, RegionItem, TripletBatch, build_catalog
from .encoders import EncoderParams
from .errors import MalformedFileError, MSRLError, SchemaVersionError, UsageError, ValidationError
from .metrics import MetricsSnapshot
from .optim import Adam
from .relevance import RelevanceMatrixSet
from .rng import Streams
from .scheduler import PrioritySet, ScheduleState
from .trainer import TraceRow, TrainerConfig, TrainState

DATASET_SCHEMA_VERSION = 1
CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

METRICS_COLUMNS = (
    "iteration", "loss", "mean_R_all", "mean_R_selected", "selected_total",
    "lambda1", "lambda2", "gamma", "val_acc",
)
TRACE_COLUMNS = ("iteration", "loss", "mean_R_all", "mean_R_selected", "lambda1", "lambda2", "gamma")


def _path(path) -> Path:
    if path is None or str(path) == "":
        raise UsageError("empty path")
    return Path(path)


def _read_json(path) -> object:
    path = _path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None


def _check_version(obj, key: str, expected: int, what: str) -> None:
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaVersionError(f"{what}: missing {key!r}")
    if obj[key] != expected:
        raise SchemaVersionError(f"{what}: {key} {obj[key]!r} not supported (expected {expected})")


def _require(obj: dict, keys: tuple[str, ...], where: str) -> None:
    if not isinstance(obj, dict):
        raise MalformedFileError(f"{where}: expected an object")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise MalformedFileError(f"{where}: missing {', '.join(missing)}")


# ---------------------------------------------------------------- dataset


def _box_to_json(b: BoundingBox) -> dict:
    return {"xyxy": [b.x1, b.y1, b.x2, b.y2], "image_size": [b.image_width, b.image_height]}


def _box_from_json(d: dict, where: str) -> BoundingBox:
    _require(d, ("xyxy", "image_size"), where)
    try:
        return BoundingBox(*map(float, d["xyxy"]), *map(float, d["image_size"]))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except TypeError:
        raise MalformedFileError(f"{where}: box needs 4 coordinates and 2 image sizes") from None


def catalog_to_json(catalog: GroupCatalog) -> dict:
    groups = []
    for label, members in zip(catalog.group_labels, catalog.groups):
        pairs = []
        for p in members:
            r, e = p.region, p.expression
            pairs.append({
                "region": {
                    "region_id": r.region_id,
                    "image_id": r.image_id,
                    "box": _box_to_json(r.box),
                    "grid_features": r.grid_features.tolist(),
                    "neighbors": [{"feature": n.feature.tolist(), "box": _box_to_json(n.box)} for n in r.context_neighbors],
                },
                "expression": {
                    "expression_id": e.expression_id,
                    "image_id": e.image_id,
                    "word_embeddings": e.word_embeddings.tolist(),
                },
            })
        groups.append({"label": label, "pairs": pairs})
    return {"schema_version": DATASET_SCHEMA_VERSION, "groups": groups}


def catalog_from_json(obj) -> GroupCatalog:
    _check_version(obj, "schema_version", DATASET_SCHEMA_VERSION, "dataset")
    _require(obj, ("groups",), "dataset")
    items = []
    for gk, grp in enumerate(obj["groups"]):
        _require(grp, ("label", "pairs"), f"groups[{gk}]")
        for pk, p in enumerate(grp["pairs"]):
            where = f"groups[{gk}].pairs[{pk}]"
            _require(p, ("region", "expression"), where)
            r, e = p["region"], p["expression"]
            _require(r, ("region_id", "image_id", "box", "grid_features"), where + ".region")
            _require(e, ("expression_id", "image_id", "word_embeddings"), where + ".expression")
            where = f"{where} ({r['region_id']})"
            try:
                neighbors = tuple(
                    Neighbor(np.asarray(n["feature"], dtype=float), _box_from_json(n["box"], where))
                    for n in r.get("neighbors", [])
                )
                region = RegionItem(
                    r["region_id"], r["image_id"], 0, _box_from_json(r["box"], where),
                    np.asarray(r["grid_features"], dtype=float), neighbors,
                )
                expr = ExpressionItem(e["expression_id"], e["image_id"], 0, np.asarray(e["word_embeddings"], dtype=float))
                items.append((MatchedPair(region, expr), grp["label"]))
            except (KeyError, TypeError) as exc:
                raise MalformedFileError(f"{where}: {exc}") from None
            except ValueError as exc:
                if isinstance(exc, ValidationError):
                    raise type(exc)(f"{where}: {exc}") from None
                raise MalformedFileError(f"{where}: {exc}") from None
    if not items:
        raise ValidationError("dataset has no pairs")
    return build_catalog(items)


def save_dataset(catalog: GroupCatalog, path) -> None:
    _path(path).write_text(json.dumps(catalog_to_json(catalog)) + "\n", encoding="utf-8")


def load_dataset(path) -> GroupCatalog:
    return catalog_from_json(_read_json(path))


# ----------------------------------------------------------------- config

WORLD_DEFAULTS = {
    "n_attributes": 3,
    "values_per_attribute": [4, 4, 4],
    "d": 16,
    "noise_sigma": 0.1,
    "n_groups": 8,
    "pairs_per_group": 200,
    "objects_per_image": 4,
    "grid_side": 2,
    "group_skew": 0.0,
}
EVAL_DEFAULTS = {"fraction": 0.25, "K": 10}
TRAINER_FIELDS = {f.name for f in dataclasses.fields(TrainerConfig)}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    world: dict | None = field(default_factory=lambda: dict(WORLD_DEFAULTS))
    dataset: str | None = None
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    checkpoint_every: int = 0

    def with_overrides(self, variant: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        out = self
        if seed is not None:
            out = dataclasses.replace(out, seed=seed, trainer=dataclasses.replace(out.trainer, seed=seed))
        if variant is not None:
            out = dataclasses.replace(out, trainer=dataclasses.replace(out.trainer, variant=variant))
        return out

    def to_dict(self) -> dict:
        d = {"schema_version": CONFIG_SCHEMA_VERSION, "seed": self.seed}
        if self.dataset is not None:
            d["dataset"] = self.dataset
        else:
            d["world"] = self.world
        d["eval"] = self.eval
        d["trainer"] = self.trainer.to_dict()
        d["checkpoint_every"] = self.checkpoint_every
        return d


def _reject_unknown(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")


def parse_config(obj) -> ExperimentConfig:
    """Validate a config object; every field not given takes the documented default."""
    if not isinstance(obj, dict):
        raise MalformedFileError("config must be a JSON object")
    _check_version(obj, "schema_version", CONFIG_SCHEMA_VERSION, "config")
    _reject_unknown(obj, {"schema_version", "seed", "world", "dataset", "eval", "trainer", "checkpoint_every"}, "config")
    if "world" in obj and "dataset" in obj:
        raise ValidationError("config: give either world or dataset, not both")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError("config: seed must be a non-negative integer")
    world = None
    if "dataset" not in obj:
        w = obj.get("world", {})
        _reject_unknown(w, WORLD_DEFAULTS, "config.world")
        world = {**WORLD_DEFAULTS, **w}
    ev = obj.get("eval", {})
    _reject_unknown(ev, EVAL_DEFAULTS, "config.eval")
    ev = {**EVAL_DEFAULTS, **ev}
    tr = obj.get("trainer", {})
    _reject_unknown(tr, TRAINER_FIELDS, "config.trainer")
    if "seed" in tr and tr["seed"] != seed:
        raise ValidationError("config: trainer.seed differs from seed")
    try:
        trainer = TrainerConfig(**{**tr, "seed": seed})
    except TypeError as exc:
        raise ValidationError(f"config.trainer: {exc}") from None
    every = obj.get("checkpoint_every", 0)
    if not isinstance(every, int) or every < 0:
        raise ValidationError("config: checkpoint_every must be a non-negative integer")
    return ExperimentConfig(seed, world, obj.get("dataset"), ev, trainer, every)


def load_config(path) -> ExperimentConfig:
    return parse_config(_read_json(path))


# ------------------------------------------------------------- checkpoint


def _hex(x: float) -> str:
    return float(x).hex()


def _unhex(s: str) -> float:
    return float.fromhex(s)


def _arr_out(a: np.ndarray) -> dict:
    a = np.asarray(a)
    if a.dtype == bool:
        return {"shape": list(a.shape), "bool": a.astype(int).ravel().tolist()}
    if np.issubdtype(a.dtype, np.integer):
        return {"shape": list(a.shape), "int": a.ravel().tolist()}
    return {"shape": list(a.shape), "hex": [_hex(x) for x in a.ravel()]}


def _arr_in(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    if "bool" in d:
        return np.array(d["bool"], dtype=bool).reshape(shape)
    if "int" in d:
        return np.array(d["int"], dtype=int).reshape(shape)
    return np.array([_unhex(s) for s in d["hex"]], dtype=np.float64).reshape(shape)


def _record_out(obj) -> dict:
    out = {}
    for k, v in dataclasses.asdict(obj).items():
        if isinstance(v, float):
            out[k] = _hex(v)
        elif isinstance(v, list):
            out[k] = [_hex(x) if isinstance(x, float) else x for x in v]
        else:
            out[k] = v
    return out


def _record_in(cls, d: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        v = d[f.name]
        if isinstance(v, str) and f.type in ("float", float):
            v = _unhex(v)
        elif isinstance(v, list):
            v = [_unhex(x) if isinstance(x, str) else x for x in v]
        kwargs[f.name] = v
    return cls(**kwargs)


def state_to_json(state: TrainState, config: TrainerConfig) -> dict:
    a = state.adam
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "iteration": state.iteration,
        "config": _record_out(config),
        "dims": {"d": state.params.d, "c": state.params.c},
        "params": {k: _arr_out(v) for k, v in state.params.arrays().items()},
        "adam": {
            "beta1": _hex(a.beta1), "beta2": _hex(a.beta2), "eps": _hex(a.eps), "t": a.t,
            "m": {k: _arr_out(v) for k, v in a.m.items()},
            "v": {k: _arr_out(v) for k, v in a.v.items()},
        },
        "schedule": _record_out(state.schedule),
        "rng": state.streams.state(),
        "batch": state.batch.to_dict(),
        "R": {"values": _arr_out(state.R.values), "mask": _arr_out(state.R.mask), "alpha": _arr_out(state.R.alpha)},
        "U": {"U": _arr_out(state.U.U), "mask": _arr_out(state.U.mask)},
        "history": [_record_out(s) for s in state.history],
        "trace": [_record_out(r) for r in state.trace],
    }


def state_from_json(obj) -> tuple[TrainState, TrainerConfig]:
    _check_version(obj, "format_version", CHECKPOINT_FORMAT_VERSION, "checkpoint")
    keys = ("iteration", "config", "dims", "params", "adam", "schedule", "rng", "batch", "R", "U", "history", "trace")
    _require(obj, keys, "checkpoint")
    try:
        config = _record_in(TrainerConfig, obj["config"])
        params = EncoderParams({k: _arr_in(v) for k, v in obj["params"].items()}, obj["dims"]["d"], obj["dims"]["c"])
        ad = obj["adam"]
        adam = Adam(
            _unhex(ad["beta1"]), _unhex(ad["beta2"]), _unhex(ad["eps"]), ad["t"],
            {k: _arr_in(v) for k, v in ad["m"].items()},
            {k: _arr_in(v) for k, v in ad["v"].items()},
        )
        schedule = _record_in(ScheduleState, obj["schedule"])
        streams = Streams.from_state(obj["rng"])
        batch = TripletBatch.from_dict(obj["batch"])
        R = RelevanceMatrixSet(_arr_in(obj["R"]["values"]), _arr_in(obj["R"]["mask"]), _arr_in(obj["R"]["alpha"]))
        U = PrioritySet(_arr_in(obj["U"]["U"]), _arr_in(obj["U"]["mask"]))
        history = [_record_in(MetricsSnapshot, s) for s in obj["history"]]
        trace = [_record_in(TraceRow, r) for r in obj["trace"]]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise MalformedFileError(f"checkpoint: {exc!r}") from None
    state = TrainState(params, adam, schedule, streams, obj["iteration"], batch, R, U, history, trace)
    return state, config


def save_checkpoint(state: TrainState, config: TrainerConfig, path) -> None:
    path = _path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(state_to_json(state, config), sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TrainState, TrainerConfig]:
    return state_from_json(_read_json(path))


# -------------------------------------------------------------------- csv


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6f}"


def metrics_header(n_groups: int) -> list[str]:
    return list(METRICS_COLUMNS) + [f"sel_g{k}" for k in range(n_groups)] + [f"acc_g{k}" for k in range(n_groups)]


def metrics_csv(stream: list[MetricsSnapshot], n_groups: int | None = None) -> str:
    if n_groups is None:
        n_groups = len(stream[0].selected_per_group) if stream else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(n_groups))
    for s in stream:
        row = [_fmt(getattr(s, c)) for c in METRICS_COLUMNS]
        row += [_fmt(int(c)) for c in s.selected_per_group] + [_fmt(a) for a in s.acc_per_group]
        w.writerow(row)
    return buf.getvalue()


def export_metrics(stream: list[MetricsSnapshot], path, n_groups: int | None = None) -> None:
    _path(path).write_text(metrics_csv(stream, n_groups), encoding="utf-8")


def parse_metrics_csv(text: str) -> list[MetricsSnapshot]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise MalformedFileError("metrics CSV has no header")
    header = rows[0]
    n_groups = sum(1 for h in header if h.startswith("sel_g"))
    if header != metrics_header(n_groups):
        raise MalformedFileError("unexpected metrics CSV header")
    out = []
    for r in rows[1:]:
        base = dict(zip(METRICS_COLUMNS, r))
        out.append(MetricsSnapshot(
            iteration=int(base["iteration"]),
            loss=float(base["loss"]),
            mean_R_all=float(base["mean_R_all"]),
            mean_R_selected=float(base["mean_R_selected"]),
            selected_total=int(base["selected_total"]),
            lambda1=float(base["lambda1"]),
            lambda2=float(base["lambda2"]),
            gamma=float(base["gamma"]),
            val_acc=float(base["val_acc"]),
            selected_per_group=[int(x) for x in r[len(METRICS_COLUMNS):len(METRICS_COLUMNS) + n_groups]],
            acc_per_group=[float(x) for x in r[len(METRICS_COLUMNS) + n_groups:]],
        ))
    return out


def load_metrics(path) -> list[MetricsSnapshot]:
    return parse_metrics_csv(_path(path).read_text(encoding="utf-8"))


def trace_csv(trace: list[TraceRow], n_groups: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(TRACE_COLUMNS) + [f"sel_g{k}" for k in range(n_groups)])
    for r in trace:
        w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS] + [str(c) for c in r.selected_per_group])
    return buf.getvalue()


def load_trace(path) -> tuple[list[int], np.ndarray]:
    """(iterations, per-group selected counts) from a trace CSV."""
    rows = list(csv.reader(io.StringIO(_path(path).read_text(encoding="utf-8"))))
    if not rows:
        raise MalformedFileError(f"{path}: empty trace")
    k = len(TRACE_COLUMNS)
    its = [int(r[0]) for r in rows[1:]]
    counts = np.array([[int(x) for x in r[k:]] for r in rows[1:]], dtype=int).reshape(len(its), len(rows[0]) - k)
    return its, counts


@contextmanager
def output_lock(directory):
    """Exclusive lock file so two processes never write one run directory."""
    directory = _path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise MSRLError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)
