"""Glue between a parsed config and a trained run directory."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .domain import GroupCatalog
from .encoders import FeatureBank
from .errors import ValidationError
from .io import (
    ExperimentConfig,
    export_metrics,
    load_checkpoint,
    load_dataset,
    output_lock,
    save_checkpoint,
    trace_csv,
)
from .metrics import EvalSet, build_eval_set, split_catalog
from .rng import stream
from .trainer import Trainer, TrainState
from .world import AttributeSchema, SyntheticWorld, generate_world


def make_world(config: ExperimentConfig) -> SyntheticWorld:
    w = config.world
    if w is None:
        raise ValidationError("config has no world section")
    schema = AttributeSchema(w["n_attributes"], tuple(w["values_per_attribute"]), w["d"], w["noise_sigma"])
    return generate_world(
        schema, w["n_groups"], w["pairs_per_group"], stream(config.seed, "world"),
        objects_per_image=w["objects_per_image"], grid_side=w["grid_side"], group_skew=w["group_skew"],
    )


@dataclass
class Experiment:
    config: ExperimentConfig
    train_catalog: GroupCatalog
    eval_set: EvalSet
    world: SyntheticWorld | None
    bank: FeatureBank
    eval_bank: FeatureBank

    def trainer(self, **kwargs) -> Trainer:
        return Trainer(self.train_catalog, self.config.trainer, self.eval_set, bank=self.bank, eval_bank=self.eval_bank, **kwargs)


def build_experiment(config: ExperimentConfig) -> Experiment:
    """Hold out whole images for evaluation.

    On synthetic worlds, distractors with exactly the query's attributes are
    left out of the candidate lists since nothing can tell them apart.
    """
    world = None
    if config.dataset is not None:
        catalog = load_dataset(config.dataset)
    else:
        world = make_world(config)
        catalog = world.catalog
    train, held, _, eval_index = split_catalog(catalog, stream(config.seed, "split"), config.eval["fraction"])
    exclude = None
    if world is not None:
        exclude = lambda q, c: world.oracle(eval_index[q], eval_index[c]) >= 1.0
    eval_set = build_eval_set(held, stream(config.seed, "evalset"), config.eval["K"], exclude)
    return Experiment(config, train, eval_set, world, FeatureBank(train), FeatureBank(held))


def run_training(config: ExperimentConfig, out_dir, resume=None) -> TrainState:
    """Train and write config.json, metrics.csv, trace.csv and checkpoint.txt."""
    exp = build_experiment(config)
    trainer = exp.trainer()
    with output_lock(out_dir) as out:
        if resume is not None:
            state, saved = load_checkpoint(resume)
            if saved != config.trainer:
                diff = [f.name for f in dataclasses.fields(saved) if getattr(saved, f.name) != getattr(config.trainer, f.name)]
                raise ValidationError(f"checkpoint was written with a different trainer config ({', '.join(diff)})")
        else:
            state = trainer.init_state()
        every = config.checkpoint_every
        while state.iteration < config.trainer.iterations:
            trainer.step(state)
            if every and state.iteration % every == 0:
                save_checkpoint(state, config.trainer, out / f"ckpt_{state.iteration:07d}.txt")
        G = exp.train_catalog.n_groups
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        export_metrics(state.history, out / "metrics.csv", G)
        (out / "trace.csv").write_text(trace_csv(state.trace, G), encoding="utf-8")
        save_checkpoint(state, config.trainer, out / "checkpoint.txt")
    return state


def run_dirs(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if not (p / "metrics.csv").is_file():
            raise ValidationError(f"{p} is not a run directory (no metrics.csv)")
        out.append(p)
    return out
