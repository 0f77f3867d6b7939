"""Score propagation, fitness sharing, elitism, crossover and mutation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any, Callable

import numpy as np

from .fitness import FitnessScore, mean_score, rank_key
from .graph import (
    MARKS,
    GenotypeGraph,
    LineageCounter,
    Node,
    ancestors,
    new_node_id,
    validate,
)
from .populations import Member, Population

MUTATION_OPS = (
    "add-node-on-edge",
    "add-node-with-new-edges",
    "remove-node",
    "add-edge",
    "remove-edge",
    "replace-content",
)
MAX_RETRIES = 5
DEFAULT_SWAP_PROB = 0.5


@dataclass(frozen=True)
class GenerationRates:
    elitism: float = 0.2
    crossover: float = 0.3
    mutation: float = 0.5

    def __post_init__(self):
        parts = (self.elitism, self.crossover, self.mutation)
        if any(p < 0 for p in parts) or not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise ValueError(f"rates must be non-negative and sum to 1, got {parts}")

    def counts(self, size: int) -> tuple[int, int, int]:
        """(elites, crossover children, mutants) for a population of ``size``."""
        # round first so 0.2 * 10 does not ceil to 3 through float noise
        elites = min(size, math.ceil(round(self.elitism * size, 9)))
        cross = min(size - elites, round(self.crossover * size))
        return elites, cross, size - elites - cross


# -- scores -------------------------------------------------------------------

def propagate_scores(individuals) -> tuple[dict[int, FitnessScore], dict[int, FitnessScore]]:
    """Mean individual score per blueprint uid and per module uid.

    A module resolved at several nodes of one individual counts once per node.
    """
    by_blueprint = defaultdict(list)
    by_module = defaultdict(list)
    for ind in individuals:
        if ind.score is None:
            raise ValueError(f"individual {ind.uid} has no score")
        by_blueprint[ind.blueprint_uid].append(ind.score)
        for uid in ind.module_uids():
            by_module[uid].append(ind.score)
    return ({uid: mean_score(s) for uid, s in by_blueprint.items()},
            {uid: mean_score(s) for uid, s in by_module.items()})


def apply_scores(population: Population, scores: dict[int, FitnessScore]) -> None:
    """Overwrite member scores that were re-measured; others keep their previous one."""
    for m in population.members:
        if m.uid in scores:
            m.score = scores[m.uid]


def shared_fitness(members: list[Member]) -> float:
    """Mean member accuracy; never-evaluated members count as zero."""
    if not members:
        raise ValueError("empty species")
    return math.fsum(m.score.accuracy if m.score is not None else 0.0 for m in members) / len(members)


def _best_first(members):
    return sorted(members, key=lambda m: (rank_key(m.score), -m.uid), reverse=True)


def elite_quotas(sizes: dict[int, int], total: int) -> dict[int, int]:
    """Split ``total`` elite slots across species in proportion to their size.

    Largest-remainder apportionment, ties to the lower species id.
    """
    n = sum(sizes.values())
    if n == 0 or total == 0:
        return {sid: 0 for sid in sizes}
    # exact remainders: float noise would otherwise break ties arbitrarily
    exact = {sid: Fraction(total * size, n) for sid, size in sizes.items()}
    quotas = {sid: math.floor(q) for sid, q in exact.items()}
    left = total - sum(quotas.values())
    for sid in sorted(sizes, key=lambda s: (-(exact[s] - quotas[s]), s)):
        if left == 0:
            break
        if quotas[sid] < sizes[sid]:
            quotas[sid] += 1
            left -= 1
    return quotas


def select_elites(population: Population, rate: float) -> list[Member]:
    """Best ``ceil(rate * size)`` members, allotted per species by size."""
    if not 0 <= rate <= 1:
        raise ValueError(f"elitism rate {rate} outside [0, 1]")
    total = min(len(population), math.ceil(round(rate * len(population), 9)))
    groups = defaultdict(list)
    for m in population.members:
        groups[m.species].append(m)
    sizes = {sid: len(ms) for sid, ms in groups.items()}
    quotas = elite_quotas(sizes, total)
    chosen = set()
    for sid, ms in groups.items():
        chosen.update(m.uid for m in _best_first(ms)[:quotas[sid]])
    return [m for m in population.members if m.uid in chosen]


# -- crossover ----------------------------------------------------------------

def uniform_crossover(parent_a: GenotypeGraph, parent_b: GenotypeGraph, swap_prob: float,
                      rng: np.random.Generator) -> GenotypeGraph:
    """Child with ``parent_a``'s topology (pass the fitter parent first).

    Each intermediate node whose lineage mark also exists in ``parent_b``
    takes ``parent_b``'s content with probability ``swap_prob``.
    """
    other = parent_b.marks()
    nodes = dict(parent_a.nodes)
    for nid in parent_a.intermediate:
        node = nodes[nid]
        match = other.get(node.mark)
        if match is None or match in (parent_b.input_node, parent_b.output_node):
            continue
        if rng.random() < swap_prob:
            nodes[nid] = Node(node.mark, parent_b.content(match))
    return parent_a.replace(nodes=nodes)


def shared_marks(a: GenotypeGraph, b: GenotypeGraph) -> set[int]:
    """Lineage marks of intermediate nodes present in both graphs."""
    ma = {a.nodes[n].mark for n in a.intermediate}
    mb = {b.nodes[n].mark for n in b.intermediate}
    return ma & mb


# -- mutation -----------------------------------------------------------------

def _pick(rng, items):
    items = sorted(items)
    if not items:
        return None
    return items[int(rng.integers(len(items)))]


def _add_node_on_edge(g, sampler, rng, marks):
    edge = _pick(rng, g.edges)
    u, v = edge
    w = new_node_id(g)
    nodes = dict(g.nodes)
    nodes[w] = Node(marks(), sampler(rng))
    return g.replace(nodes, (g.edges - {edge}) | {(u, w), (w, v)})


def _add_node_with_new_edges(g, sampler, rng, marks):
    u = _pick(rng, set(g.nodes) - {g.output_node})
    blocked = ancestors(g, u) | {u, g.input_node}
    v = _pick(rng, [n for n in g.nodes if n not in blocked])
    if v is None:
        return None
    w = new_node_id(g)
    nodes = dict(g.nodes)
    nodes[w] = Node(marks(), sampler(rng))
    return g.replace(nodes, g.edges | {(u, w), (w, v)})


def _remove_node(g, sampler, rng, marks):
    x = _pick(rng, g.intermediate)
    preds, succs = g.predecessors(x), g.successors(x)
    edges = {e for e in g.edges if x not in e}
    edges |= {(p, s) for p in preds for s in succs}
    nodes = {n: node for n, node in g.nodes.items() if n != x}
    return g.replace(nodes, edges)


def _add_edge(g, sampler, rng, marks):
    u = _pick(rng, set(g.nodes) - {g.output_node})
    blocked = ancestors(g, u) | {u, g.input_node} | set(g.successors(u))
    v = _pick(rng, [n for n in g.nodes if n not in blocked])
    if v is None:
        return None
    return g.replace(edges=g.edges | {(u, v)})


def _remove_edge(g, sampler, rng, marks):
    return g.replace(edges=g.edges - {_pick(rng, g.edges)})


def _replace_content(g, sampler, rng, marks):
    x = _pick(rng, g.intermediate)
    nodes = dict(g.nodes)
    nodes[x] = Node(g.nodes[x].mark, sampler(rng))
    return g.replace(nodes=nodes)


_OPS = {
    "add-node-on-edge": _add_node_on_edge,
    "add-node-with-new-edges": _add_node_with_new_edges,
    "remove-node": _remove_node,
    "add-edge": _add_edge,
    "remove-edge": _remove_edge,
    "replace-content": _replace_content,
}


def _weights(op_weights) -> np.ndarray:
    if op_weights is None:
        return np.full(len(MUTATION_OPS), 1.0 / len(MUTATION_OPS))
    w = np.array([float(op_weights.get(op, 0.0)) for op in MUTATION_OPS])
    unknown = set(op_weights) - set(MUTATION_OPS)
    if unknown or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"bad mutation weights {op_weights!r}")
    return w / w.sum()


@dataclass(frozen=True)
class MutationTrace:
    op: str
    attempts: int
    applied: bool


def mutate_traced(graph: GenotypeGraph, op_weights, content_sampler: Callable[[np.random.Generator], Any],
                  rng: np.random.Generator, marks: LineageCounter | None = None):
    """Like ``mutate`` but also reports the operator and whether it took effect."""
    marks = marks if marks is not None else MARKS
    op = MUTATION_OPS[int(rng.choice(len(MUTATION_OPS), p=_weights(op_weights)))]
    fn = _OPS[op]
    for attempt in range(1, MAX_RETRIES + 2):
        child = fn(graph, content_sampler, rng, marks)
        if child is not None and validate(child).ok:
            return child, MutationTrace(op, attempt, True)
    return graph, MutationTrace(op, MAX_RETRIES + 1, False)


def mutate(graph: GenotypeGraph, op_weights, content_sampler, rng: np.random.Generator,
           marks: LineageCounter | None = None) -> GenotypeGraph:
    """One weighted operator; invalid results retry up to 5 times, then the parent is returned."""
    return mutate_traced(graph, op_weights, content_sampler, rng, marks)[0]


# -- reproduction -------------------------------------------------------------

def _roulette(rng, weights) -> int:
    w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        return int(rng.integers(len(w)))
    return int(rng.choice(len(w), p=w / w.sum()))


def crossover_parents(population: Population, species_fitness: dict[int, float], rng):
    """Species by shared fitness, then two distinct members by accuracy; fitter first.

    A single-member species pairs its member with itself.
    """
    sids = sorted(sid for sid in species_fitness if population.species_members(sid))
    sid = sids[_roulette(rng, [species_fitness[s] for s in sids])]
    members = population.species_members(sid)
    acc = [m.score.accuracy if m.score is not None else 0.0 for m in members]
    i = _roulette(rng, acc)
    a, b = members[i], members[i]
    if len(members) > 1:
        rest = members[:i] + members[i + 1:]
        b = rest[_roulette(rng, acc[:i] + acc[i + 1:])]
    if rank_key(b.score) > rank_key(a.score):
        a, b = b, a
    return a, b


def next_generation(population: Population, rates: GenerationRates, rng: np.random.Generator,
                    content_sampler, uids: LineageCounter, marks: LineageCounter | None = None,
                    op_weights=None, swap_prob: float = DEFAULT_SWAP_PROB) -> Population:
    """Elites kept verbatim, then crossover children, then mutants.

    Offspring have no species yet; the caller speciates them.  Each offspring
    draws from its own substream of ``rng``.
    """
    n = len(population)
    n_elite, n_cross, n_mut = rates.counts(n)
    elites = select_elites(population, rates.elitism) if n_elite else []
    members = [replace(m) for m in elites]
    fitness = {sid: shared_fitness(population.species_members(sid)) for sid in population.species_ids()}
    streams = [np.random.default_rng(s) for s in rng.integers(0, 2**63, size=n_cross + n_mut)]
    for r in streams[:n_cross]:
        a, b = crossover_parents(population, fitness, r)
        members.append(Member(uids(), uniform_crossover(a.genome, b.genome, swap_prob, r)))
    for r in streams[n_cross:]:
        parent = population.members[int(r.integers(n))]
        members.append(Member(uids(), mutate(parent.genome, op_weights, content_sampler, r, marks)))
    return Population(population.kind, members)
