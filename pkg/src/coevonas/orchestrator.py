"""The generation loop: configuration, logging, checkpoints, final training and exports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import pickle
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from . import plots
from .assembly import AssemblyError, LayerGraph, assemble
from .datasets import Dataset, SplitSpec, load_csv, load_idx, subsample_split, synthetic_glyphs
from .evaluation import SurrogateEvaluator, SurrogateSpec, TrainerEvaluator, evaluate_generation
from .fitness import FitnessScore, rank_key
from .graph import LineageCounter, to_dot
from .nn import History, build_network, evaluate, train
from .populations import (
    Individual,
    Population,
    init_blueprint_population,
    init_module_population,
    repair_references,
    species_sampler,
    spawn_individuals,
)
from .speciation import SpeciesSet, extract_features
from .tables import Tables, tables_from_dict
from .variation import (
    GenerationRates,
    apply_scores,
    next_generation,
    propagate_scores,
    shared_fitness,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"COEVONAS-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.bin"
LOG_HEADER = ["generation", "species_id", "mean_size", "mean_nodes", "mean_edges",
              "mean_accuracy", "mean_loss", "best_accuracy", "best_loss", "seconds"]

# stream tags for seed derivation
_INIT, _SPAWN, _MODULES, _BLUEPRINTS, _EVAL, _BASELINE = range(6)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    tables: Tables
    generations: int = 40
    individuals: int = 10
    blueprints: int = 10
    modules: int = 30
    species: int = 3
    rates: GenerationRates = field(default_factory=GenerationRates)
    new_species_threshold: float = 3.0
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    evaluator: str = "trainer"
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    base_dir: str = "."

    def __post_init__(self):
        for name in ("generations", "individuals", "blueprints", "modules", "species", "workers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name}: must be an integer >= 1, got {value!r}")
        if self.new_species_threshold <= 0:
            raise ConfigError("new_species_threshold: must be positive")
        if self.evaluator not in ("trainer", "surrogate"):
            raise ConfigError(f"evaluator: unknown evaluator {self.evaluator!r}")

    def with_overrides(self, **changes) -> "RunConfig":
        values = {k: v for k, v in vars(self).items()}
        values.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig(**values)


_RUN_KEYS = {"generations", "individuals", "blueprints", "modules", "species", "elitism", "crossover",
             "mutation", "new_species_threshold", "seed", "workers", "out", "dataset", "evaluator",
             "surrogate", "param", "training"}


def config_from_text(text: str, base_dir=".") -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config: {exc}") from exc
    unknown = set(doc) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
    try:
        rates = GenerationRates(doc.get("elitism", 0.2), doc.get("crossover", 0.3), doc.get("mutation", 0.5))
    except ValueError as exc:
        raise ConfigError(f"rates: {exc}") from exc
    s = doc.get("surrogate", {})
    default = SurrogateSpec()
    surrogate = SurrogateSpec(tuple(s.get("target", default.target)), float(s.get("width", default.width)),
                              tuple(s.get("scale", default.scale)))
    keys = ("generations", "individuals", "blueprints", "modules", "species", "new_species_threshold",
            "seed", "workers", "out", "dataset", "evaluator")
    return RunConfig(tables=tables_from_dict(doc), rates=rates, surrogate=surrogate, base_dir=str(base_dir),
                     **{k: doc[k] for k in keys if k in doc})


def load_config(path) -> RunConfig:
    path = Path(path)
    return config_from_text(path.read_text(), path.parent)


# -- data ---------------------------------------------------------------------

@dataclass
class DataBundle:
    train: Dataset
    validation: Dataset
    full_train: Dataset
    test: Dataset


def _concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(np.concatenate([a.samples, b.samples]), np.concatenate([a.labels, b.labels]), a.class_count)


def load_data(config: RunConfig) -> DataBundle:
    spec = dict(config.dataset)
    kind = spec.get("kind", "synthetic")
    base = Path(config.base_dir)
    split_seed = int(spec.get("split_seed", 0))
    if kind == "synthetic":
        data = synthetic_glyphs(int(spec.get("samples", 3000)), int(spec.get("seed", 0)))
        ntr, nva = int(spec.get("train", 2000)), int(spec.get("validation", 500))
        train_split, val = subsample_split(data, SplitSpec(ntr, nva, split_seed))
        order = np.random.default_rng(split_seed).permutation(len(data))
        rest = data.subset(order[ntr + nva:])
        test = rest if len(rest) else val
        return DataBundle(train_split, val, _concat(train_split, val), test)
    if kind == "idx":
        full = load_idx(base / spec["train_images"], base / spec["train_labels"], spec.get("classes"))
        test = None
        if "test_images" in spec and (base / spec["test_images"]).exists():
            test = load_idx(base / spec["test_images"], base / spec["test_labels"], full.class_count)
    elif kind == "csv":
        shape = (int(spec["width"]), int(spec["height"]), int(spec.get("channels", 1)))
        full = load_csv(base / spec["path"], *shape, class_count=spec.get("classes"))
        test = load_csv(base / spec["test_path"], *shape, class_count=full.class_count) if "test_path" in spec else None
    else:
        raise ConfigError(f"dataset.kind: unknown dataset kind {kind!r}")
    train_split, val = subsample_split(full, SplitSpec(int(spec["train"]), int(spec["validation"]), split_seed))
    return DataBundle(train_split, val, full, test if test is not None else val)


def make_evaluator(config: RunConfig, data: DataBundle | None = None):
    if config.evaluator == "surrogate":
        return SurrogateEvaluator(config.surrogate)
    data = data or load_data(config)
    return TrainerEvaluator(data.train, data.validation)


# -- state and records --------------------------------------------------------

@dataclass
class SpeciesRow:
    population: str
    species_id: int
    mean_size: float
    mean_nodes: float
    mean_edges: float
    mean_accuracy: float
    mean_loss: float
    best_accuracy: float
    best_loss: float

    @property
    def label(self) -> str:
        return f"{self.population}:{self.species_id}"


@dataclass
class GenerationRecord:
    generation: int
    species: list
    best_uid: int
    best_score: FitnessScore
    seconds: float

    def csv_rows(self) -> list[list]:
        return [[self.generation, r.label, r.mean_size, r.mean_nodes, r.mean_edges, r.mean_accuracy,
                 r.mean_loss, r.best_accuracy, r.best_loss, f"{self.seconds:.3f}"] for r in self.species]


@dataclass
class EvolutionState:
    config: RunConfig
    input_shape: tuple
    class_count: int
    uids: LineageCounter
    marks: LineageCounter
    modules: Population
    blueprints: Population
    module_species: SpeciesSet
    blueprint_species: SpeciesSet
    generation: int = 0
    records: list = field(default_factory=list)
    best: Individual | None = None
    best_so_far: list = field(default_factory=list)


def generation_rng(seed: int, generation: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, generation, stream]))


def individual_seeds(seed: int, generation: int, count: int, stream: int = _EVAL) -> list[int]:
    return [int(np.random.SeedSequence([seed, generation, stream, i]).generate_state(1)[0]) for i in range(count)]


def _module_features(pop: Population) -> dict:
    return {m.uid: extract_features(m.genome) for m in pop}


def _blueprint_features(pop: Population, module_species: SpeciesSet) -> dict:
    sizes = module_species.mean_sizes()
    return {m.uid: extract_features(m.genome, sizes) for m in pop}


def _init_populations(config: RunConfig, rng, uids, marks):
    modules = init_module_population(config.modules, config.tables, rng, uids, marks)
    module_species = SpeciesSet(config.new_species_threshold)
    module_species.initialize(modules, _module_features(modules), config.species, rng)
    blueprints = init_blueprint_population(config.blueprints, module_species.live_ids(), config.tables,
                                           rng, uids, marks)
    blueprint_species = SpeciesSet(config.new_species_threshold)
    blueprint_species.initialize(blueprints, _blueprint_features(blueprints, module_species), config.species, rng)
    return modules, module_species, blueprints, blueprint_species


def init_state(config: RunConfig, input_shape=(8, 8, 1), class_count: int = 10) -> EvolutionState:
    uids, marks = LineageCounter(), LineageCounter()
    rng = generation_rng(config.seed, 0, _INIT)
    modules, module_species, blueprints, blueprint_species = _init_populations(config, rng, uids, marks)
    return EvolutionState(config, tuple(input_shape), class_count, uids, marks, modules, blueprints,
                          module_species, blueprint_species)


def _species_rows(kind: str, pop: Population, features: dict, species: SpeciesSet) -> list[SpeciesRow]:
    rows = []
    for sid in species.live_ids():
        members = pop.species_members(sid)
        feats = np.array([features[m.uid].as_array() for m in members])
        scored = [m.score for m in members if m.score is not None]
        if scored:
            acc = math.fsum(s.accuracy for s in scored) / len(scored)
            loss = math.fsum(s.loss for s in scored) / len(scored)
            top = max(scored, key=lambda s: s.key())
            best_acc, best_loss = top.accuracy, top.loss
        else:
            acc = loss = best_acc = best_loss = math.nan
        rows.append(SpeciesRow(kind, sid, *feats.mean(axis=0).tolist(), acc, loss, best_acc, best_loss))
    return rows


def step(state: EvolutionState, evaluator) -> GenerationRecord:
    """Run one generation: spawn, evaluate, score, log, then evolve modules and blueprints."""
    cfg = state.config
    g = state.generation
    started = time.perf_counter()

    state.blueprints = repair_references(state.blueprints, state.module_species.live_ids(),
                                         state.module_species.nearest_live)
    individuals = spawn_individuals(cfg.individuals, state.blueprints, state.modules, cfg.tables,
                                    generation_rng(cfg.seed, g, _SPAWN), state.uids,
                                    seeds=individual_seeds(cfg.seed, g, cfg.individuals))
    scored = evaluate_generation(individuals, evaluator, cfg.workers)

    blueprint_scores, module_scores = propagate_scores(scored)
    apply_scores(state.modules, module_scores)
    apply_scores(state.blueprints, blueprint_scores)
    for pop, species in ((state.modules, state.module_species), (state.blueprints, state.blueprint_species)):
        for sid, s in species.species.items():
            s.shared_fitness = shared_fitness(pop.species_members(sid))

    rows = _species_rows("module", state.modules, _module_features(state.modules), state.module_species)
    rows += _species_rows("blueprint", state.blueprints,
                          _blueprint_features(state.blueprints, state.module_species), state.blueprint_species)
    gen_best = max(scored, key=lambda ind: (rank_key(ind.score), -ind.uid))
    if state.best is None or rank_key(gen_best.score) > rank_key(state.best.score):
        state.best = gen_best
    state.best_so_far.append(state.best.score)

    # modules evolve first so blueprints can be pointed at the surviving species
    state.modules = next_generation(state.modules, cfg.rates, generation_rng(cfg.seed, g, _MODULES),
                                    cfg.tables.sample_intermediate, state.uids, state.marks)
    state.module_species.speciate(state.modules, _module_features(state.modules))
    live = state.module_species.live_ids()
    state.blueprints = repair_references(state.blueprints, live, state.module_species.nearest_live)
    state.blueprints = next_generation(state.blueprints, cfg.rates, generation_rng(cfg.seed, g, _BLUEPRINTS),
                                       species_sampler(live), state.uids, state.marks)
    state.blueprint_species.speciate(state.blueprints,
                                     _blueprint_features(state.blueprints, state.module_species))

    record = GenerationRecord(g, rows, gen_best.uid, gen_best.score, time.perf_counter() - started)
    state.records.append(record)
    state.generation += 1
    log.info("generation %d: best %.4f / %.4f, best so far %.4f", g, gen_best.score.accuracy,
             gen_best.score.loss, state.best.score.accuracy)
    return record


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(state: EvolutionState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "coevonas.checkpoint", "version": CHECKPOINT_VERSION,
              "generation": state.generation, "generations": state.config.generations,
              "seed": state.config.seed}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        pickle.dump(state, fh, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        return json.loads(fh.readline())


def load_checkpoint(path) -> EvolutionState:
    with open(path, "rb") as fh:
        if fh.readline() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        return pickle.load(fh)


# -- runs ---------------------------------------------------------------------

@dataclass
class Report:
    best: Individual
    network: LayerGraph | None
    records: list
    best_so_far: list

    def log_rows(self, with_seconds: bool = True) -> list[list]:
        rows = [row for rec in self.records for row in rec.csv_rows()]
        return rows if with_seconds else [row[:-1] for row in rows]

    def log_csv(self, with_seconds: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_HEADER if with_seconds else LOG_HEADER[:-1])
        writer.writerows(self.log_rows(with_seconds))
        return buf.getvalue()

    def summary(self) -> dict:
        """Everything except wall-clock timings."""
        return {
            "best_uid": self.best.uid,
            "best_accuracy": self.best.score.accuracy,
            "best_loss": self.best.score.loss,
            "network": self.network.to_dict() if self.network else None,
            "best_so_far": [[s.accuracy, s.loss] for s in self.best_so_far],
            "log": self.log_rows(with_seconds=False),
        }


def make_report(state: EvolutionState) -> Report:
    network = None
    try:
        network = assemble(state.best, state.input_shape, state.class_count)
    except AssemblyError as exc:
        log.warning("best individual does not assemble: %s", exc)
    return Report(state.best, network, list(state.records), list(state.best_so_far))


def start_state(config: RunConfig, data: DataBundle | None = None) -> EvolutionState:
    if config.evaluator == "trainer" and data is not None:
        return init_state(config, data.train.input_shape, data.train.class_count)
    return init_state(config)


def run_evolution(config: RunConfig, evaluator=None, state: EvolutionState | None = None,
                  checkpoint: str | os.PathLike | None = None, stop_after: int | None = None,
                  data: DataBundle | None = None) -> Report:
    """Run (or continue) the loop up to ``config.generations``.

    With ``checkpoint`` set, the state is saved after every generation.
    ``stop_after`` limits how many generations this call runs.
    """
    if evaluator is None:
        if config.evaluator == "trainer" and data is None:
            data = load_data(config)
        evaluator = make_evaluator(config, data)
    if state is None:
        state = start_state(config, data)
    done = 0
    while state.generation < state.config.generations and (stop_after is None or done < stop_after):
        step(state, evaluator)
        done += 1
        if checkpoint is not None:
            save_checkpoint(state, checkpoint)
    return make_report(state)


def resume(checkpoint, evaluator=None, workers: int | None = None, stop_after: int | None = None) -> Report:
    state = load_checkpoint(checkpoint)
    if workers is not None:
        state.config = state.config.with_overrides(workers=workers)
    return run_evolution(state.config, evaluator, state, checkpoint, stop_after)


def run_random_baseline(config: RunConfig, evaluator) -> list[FitnessScore]:
    """Best-so-far series of spawn-and-evaluate with fresh random populations each generation.

    Same evaluation budget as ``run_evolution``; no elitism, crossover or mutation.
    """
    uids, marks = LineageCounter(), LineageCounter()
    best, series = None, []
    for g in range(config.generations):
        rng = generation_rng(config.seed, g, _BASELINE)
        modules, module_species, blueprints, _ = _init_populations(config, rng, uids, marks)
        individuals = spawn_individuals(config.individuals, blueprints, modules, config.tables, rng, uids,
                                        seeds=individual_seeds(config.seed, g, config.individuals, _BASELINE))
        for ind in evaluate_generation(individuals, evaluator, config.workers):
            if best is None or rank_key(ind.score) > rank_key(best):
                best = ind.score
        series.append(best)
    return series


# -- final training and exports ----------------------------------------------

def final_train(best: Individual, data: DataBundle, epochs: int, seed: int = 0) -> tuple[History, FitnessScore]:
    """Train the best network from scratch on the full training data; score on the test set."""
    graph = assemble(best, data.full_train.input_shape, data.full_train.class_count)
    state = build_network(graph, np.random.default_rng(seed))
    hyper = replace(best.hyperparams, epochs=int(epochs))
    history = train(state, data.full_train, hyper, validation=data.test)
    return history, evaluate(state, data.test)


def write_history(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "val_loss", "val_accuracy"])
        for i in range(len(history)):
            vl = history.val_loss[i] if history.val_loss else ""
            va = history.val_accuracy[i] if history.val_accuracy else ""
            writer.writerow([i + 1, history.loss[i], history.accuracy[i], vl, va])


def export_best(report: Report, out_dir) -> list[Path]:
    """Best network (JSON + DOT), its blueprint and module DOTs, the log CSV and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    best = report.best
    doc = {
        "individual": best.uid,
        "score": {"accuracy": best.score.accuracy, "loss": best.score.loss},
        "hyperparams": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(best.hyperparams).items()},
        "network": report.network.to_dict() if report.network else None,
    }
    put("best_network.json", json.dumps(doc, indent=2))
    put("blueprint.dot", to_dot(best.blueprint, "blueprint"))
    for uid, graph in sorted({uid: g for uid, g in best.modules.values()}.items()):
        put(f"module_{uid}.dot", to_dot(graph, f"module {uid}"))
    if report.network is not None:
        put("assembled_network.dot", report.network.to_dot("assembled network"))
    put("generation_log.csv", report.log_csv())
    written += plots.species_figures(report.records, out)
    written.append(plots.best_so_far_figure(report.best_so_far, out / "best_so_far.png"))
    return written


def compare_with_baseline(config: RunConfig, seeds, data: DataBundle | None = None, evaluator=None) -> dict:
    """Final best validation accuracy of evolution and of the random baseline, per seed."""
    if evaluator is None:
        data = data or (load_data(config) if config.evaluator == "trainer" else None)
        evaluator = make_evaluator(config, data)
    results = {"seeds": [], "evolved": [], "baseline": [], "seconds": []}
    for seed in seeds:
        cfg = config.with_overrides(seed=seed)
        started = time.perf_counter()
        report = run_evolution(cfg, evaluator, data=data)
        baseline = run_random_baseline(cfg, evaluator)
        results["seeds"].append(seed)
        results["evolved"].append(report.best.score.accuracy)
        results["baseline"].append(baseline[-1].accuracy)
        results["seconds"].append(time.perf_counter() - started)
        log.info("seed %d: evolved %.4f, baseline %.4f", seed, results["evolved"][-1], results["baseline"][-1])
    return results
