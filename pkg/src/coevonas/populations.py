"""Module and blueprint populations and the individuals spawned from them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fitness import FitnessScore
from .graph import MARKS, GenotypeGraph, LineageCounter, Node, random_graph
from .tables import Tables, TrainingHyperparams, sample_training_hyperparams


@dataclass(frozen=True)
class SpeciesRef:
    """Blueprint node content: a pointer to a module species."""

    species_id: int

    def label(self) -> str:
        return f"module species {self.species_id}"


@dataclass
class Member:
    uid: int
    genome: GenotypeGraph
    species: int | None = None
    score: FitnessScore | None = None


@dataclass
class Population:
    kind: str  # "module" or "blueprint"
    members: list[Member] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def by_uid(self, uid: int) -> Member:
        for m in self.members:
            if m.uid == uid:
                return m
        raise KeyError(uid)

    def species_ids(self) -> list[int]:
        return sorted({m.species for m in self.members if m.species is not None})

    def species_members(self, species_id: int) -> list[Member]:
        return [m for m in self.members if m.species == species_id]


@dataclass(frozen=True)
class Individual:
    uid: int
    blueprint_uid: int
    blueprint: GenotypeGraph
    modules: dict  # blueprint node -> (module uid, module graph)
    hyperparams: TrainingHyperparams
    seed: int = 0
    score: FitnessScore | None = None

    def module_graphs(self) -> dict[int, GenotypeGraph]:
        return {node: graph for node, (_, graph) in self.modules.items()}

    def module_uids(self) -> list[int]:
        """Module uid per blueprint node (repeats count)."""
        return [uid for _, (uid, _) in sorted(self.modules.items())]


def _counter(counter):
    return counter if counter is not None else MARKS


def init_module_population(count: int, tables: Tables, rng: np.random.Generator,
                           uids: LineageCounter | None = None,
                           marks: LineageCounter | None = None) -> Population:
    if count < 1:
        raise ValueError("module population needs at least one member")
    uids, marks = _counter(uids), _counter(marks)
    size = tables.hyper.size_range("module_size")
    members = [
        Member(uids(), random_graph(size, tables.sample_intermediate, rng, marks=marks))
        for _ in range(count)
    ]
    return Population("module", members)


def species_sampler(species_ids) -> Callable[[np.random.Generator], SpeciesRef]:
    ids = sorted(species_ids)
    if not ids:
        raise ValueError("no module species to reference")

    def sample(rng: np.random.Generator) -> SpeciesRef:
        return SpeciesRef(ids[int(rng.integers(len(ids)))])

    return sample


def init_blueprint_population(count: int, module_species, tables: Tables, rng: np.random.Generator,
                              uids: LineageCounter | None = None,
                              marks: LineageCounter | None = None) -> Population:
    if count < 1:
        raise ValueError("blueprint population needs at least one member")
    uids, marks = _counter(uids), _counter(marks)
    sampler = species_sampler(module_species)
    size = tables.hyper.size_range("blueprint_size")
    members = [Member(uids(), random_graph(size, sampler, rng, marks=marks)) for _ in range(count)]
    return Population("blueprint", members)


def repoint(graph: GenotypeGraph, mapping: dict[int, int]) -> GenotypeGraph:
    """Blueprint with species references rewritten through ``mapping``; marks kept."""
    nodes = {}
    changed = False
    for nid, node in graph.nodes.items():
        ref = node.content
        if isinstance(ref, SpeciesRef) and ref.species_id in mapping:
            nodes[nid] = Node(node.mark, SpeciesRef(mapping[ref.species_id]))
            changed = True
        else:
            nodes[nid] = node
    return graph.replace(nodes=nodes) if changed else graph


def referenced_species(graph: GenotypeGraph) -> set[int]:
    return {graph.content(n).species_id for n in graph.intermediate}


def repair_references(blueprints: Population, live_species, nearest: Callable[[int], int]) -> Population:
    """Re-point references to dead module species at ``nearest(dead_id)``."""
    live = set(live_species)
    members = []
    for m in blueprints.members:
        dead = referenced_species(m.genome) - live
        if dead:
            m = replace(m, genome=repoint(m.genome, {sid: nearest(sid) for sid in dead}))
        members.append(m)
    return Population(blueprints.kind, members)


def spawn_individuals(count: int, blueprints: Population, module_pop: Population, tables: Tables,
                      rng: np.random.Generator, uids: LineageCounter | None = None,
                      seeds=None, nearest: Callable[[int], int] | None = None) -> list[Individual]:
    """Bind blueprints round-robin to concrete modules and fresh hyperparameters.

    Every species reference is resolved by a uniform draw over that species'
    current members.  ``seeds`` optionally gives each individual's evaluation seed.
    """
    if count < 1 or not len(blueprints):
        raise ValueError("need at least one individual and one blueprint")
    uids = _counter(uids)
    live = set(module_pop.species_ids())
    if nearest is not None:
        blueprints = repair_references(blueprints, live, nearest)
    pools = {sid: module_pop.species_members(sid) for sid in live}
    individuals = []
    for i in range(count):
        bp = blueprints.members[i % len(blueprints)]
        modules = {}
        for node in bp.genome.intermediate:
            sid = bp.genome.content(node).species_id
            pool = pools.get(sid)
            if not pool:
                raise ValueError(f"blueprint {bp.uid} references empty module species {sid}")
            chosen = pool[int(rng.integers(len(pool)))]
            modules[node] = (chosen.uid, chosen.genome)
        hyper = sample_training_hyperparams(tables.hyper, rng)
        seed = int(seeds[i]) if seeds is not None else 0
        individuals.append(Individual(uids(), bp.uid, bp.genome, modules, hyper, seed))
    return individuals
