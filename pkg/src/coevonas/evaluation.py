"""Evaluators (trainer-backed and surrogate) and parallel dispatch."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .assembly import AssemblyError, assemble
from .fitness import WORST, FitnessScore
from .nn import ShapeError, build_network, evaluate, train

log = logging.getLogger(__name__)


def individual_features(individual) -> np.ndarray:
    """Raw (size, layers, edges) summed over the modules resolved at every blueprint node."""
    size = nodes = edges = 0.0
    for graph in individual.module_graphs().values():
        size += sum(graph.content(n).size() for n in graph.intermediate)
        nodes += len(graph.intermediate)
        edges += len(graph.edges)
    return np.array([size, nodes, edges])


@dataclass(frozen=True)
class SurrogateSpec:
    """Closed-form fitness peaking at ``target`` (raw feature units).

    Distances are measured after dividing by ``scale`` so size and counts
    weigh comparably.
    """

    target: tuple = (200.0, 6.0, 12.0)
    width: float = 1.0
    scale: tuple = (100.0, 10.0, 10.0)

    def __post_init__(self):
        if self.width <= 0 or any(s <= 0 for s in self.scale):
            raise ValueError("width and scale must be positive")


def surrogate_value(features, spec: SurrogateSpec) -> float:
    z = (np.asarray(features, dtype=float) - np.asarray(spec.target)) / np.asarray(spec.scale)
    return math.exp(-float(z @ z) / spec.width)


def evaluate_with_surrogate(individual, spec: SurrogateSpec) -> FitnessScore:
    value = surrogate_value(individual_features(individual), spec)
    return FitnessScore(value, 1.0 - value)


def evaluate_with_trainer(individual, train_split, validation_split, input_shape, class_count) -> FitnessScore:
    """Assemble, train with the individual's hyperparameters, score on validation.

    Assembly and shape failures yield the worst score instead of raising.
    """
    try:
        graph = assemble(individual, input_shape, class_count)
        state = build_network(graph, np.random.default_rng(individual.seed))
        train(state, train_split, individual.hyperparams)
        return evaluate(state, validation_split)
    except (AssemblyError, ShapeError) as exc:
        log.warning("individual %s failed to assemble: %s", individual.uid, exc)
        return WORST


class SurrogateEvaluator:
    deterministic = True

    def __init__(self, spec: SurrogateSpec | None = None):
        self.spec = spec or SurrogateSpec()

    def __call__(self, individual) -> FitnessScore:
        return evaluate_with_surrogate(individual, self.spec)


class TrainerEvaluator:
    deterministic = True

    def __init__(self, train_split, validation_split):
        self.train_split = train_split
        self.validation_split = validation_split
        self.input_shape = train_split.input_shape
        self.class_count = train_split.class_count

    def __call__(self, individual) -> FitnessScore:
        return evaluate_with_trainer(individual, self.train_split, self.validation_split,
                                     self.input_shape, self.class_count)


def _guarded(evaluator, individual) -> FitnessScore:
    try:
        return evaluator(individual)
    except Exception as exc:  # a broken individual must not end the run
        log.error("evaluation of individual %s failed: %s", individual.uid, exc)
        return WORST


_WORKER_EVALUATOR = None


def _install(evaluator):
    global _WORKER_EVALUATOR
    _WORKER_EVALUATOR = evaluator


def _run_in_worker(individual) -> FitnessScore:
    return _guarded(_WORKER_EVALUATOR, individual)


def evaluate_generation(individuals, evaluator, workers: int = 1) -> list:
    """Score every individual; results do not depend on ``workers``.

    Each individual carries its own seed, so scheduling cannot leak into
    the scores.  With ``workers > 1`` evaluation fans out to processes.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    individuals = list(individuals)
    if not individuals:
        return []
    if workers == 1 or len(individuals) == 1:
        scores = [_guarded(evaluator, ind) for ind in individuals]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(individuals)),
                                 initializer=_install, initargs=(evaluator,)) as pool:
            futures = [pool.submit(_run_in_worker, ind) for ind in individuals]
            scores = []
            for ind, fut in zip(individuals, futures):
                try:
                    scores.append(fut.result())
                except Exception as exc:
                    log.error("worker for individual %s died: %s", ind.uid, exc)
                    scores.append(WORST)
    return [replace(ind, score=s) for ind, s in zip(individuals, scores)]
