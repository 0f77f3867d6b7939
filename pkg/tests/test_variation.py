import math
from collections import Counter, defaultdict
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coevonas.fitness import FitnessScore
from coevonas.graph import LineageCounter, chain_graph, random_graph, validate
from coevonas.populations import Member, Population, SpeciesRef
from coevonas.variation import (
    MAX_RETRIES,
    MUTATION_OPS,
    GenerationRates,
    apply_scores,
    crossover_parents,
    elite_quotas,
    mutate,
    mutate_traced,
    next_generation,
    propagate_scores,
    select_elites,
    shared_fitness,
    shared_marks,
    uniform_crossover,
)

from conftest import conv, make_individual


# -- rates ---------------------------------------------------------------------

@pytest.mark.parametrize("size, expected", [(2, (1, 1, 0)), (3, (1, 1, 1)), (5, (1, 2, 2)), (10, (2, 3, 5))])
def test_counts_small_populations(size, expected):
    assert GenerationRates(0.2, 0.3, 0.5).counts(size) == expected


def test_all_elite():
    assert GenerationRates(1.0, 0.0, 0.0).counts(7) == (7, 0, 0)


def test_rates_must_sum_to_one():
    with pytest.raises(ValueError):
        GenerationRates(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        GenerationRates(-0.1, 0.6, 0.5)


@given(st.integers(1, 500), st.integers(0, 100), st.integers(0, 100))
def test_counts_partition_the_population(size, e, c):
    if e + c > 100:
        e, c = e // 2, c // 2
    rates = GenerationRates(e / 100, c / 100, (100 - e - c) / 100)
    n_elite, n_cross, n_mut = rates.counts(size)
    assert n_elite + n_cross + n_mut == size and min(n_elite, n_cross, n_mut) >= 0
    assert n_elite == math.ceil(Fraction(e, 100) * size)  # exact-arithmetic oracle


# -- scores --------------------------------------------------------------------

def random_individuals(rng, count, blueprints=4, modules=6):
    out = []
    for i in range(count):
        length = int(rng.integers(1, 4))
        bp = chain_graph([SpeciesRef(1)] * length)
        ind = make_individual(bp, {b: chain_graph([conv()]) for b in bp.intermediate}, uid=i)
        mods = {b: (int(rng.integers(modules)), g) for b, (_, g) in ind.modules.items()}
        out.append(type(ind)(i, int(rng.integers(blueprints)), bp, mods, ind.hyperparams, 0,
                             FitnessScore(float(rng.random()), float(rng.random() * 3))))
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_propagation_matches_recount_and_conserves(seed, count):
    inds = random_individuals(np.random.default_rng(seed), count)
    bp_scores, mod_scores = propagate_scores(inds)
    # independent recount with exact fractions
    acc_b, acc_m = defaultdict(list), defaultdict(list)
    for ind in inds:
        acc_b[ind.blueprint_uid].append(Fraction(ind.score.accuracy))
        for node in sorted(ind.modules):
            acc_m[ind.modules[node][0]].append(Fraction(ind.score.accuracy))
    for uid, vals in acc_b.items():
        assert bp_scores[uid].accuracy == pytest.approx(float(sum(vals) / len(vals)), abs=1e-15)
    for uid, vals in acc_m.items():
        assert mod_scores[uid].accuracy == pytest.approx(float(sum(vals) / len(vals)), abs=1e-15)
    # conservation: usage-weighted means add back up to the individual totals
    total = math.fsum(i.score.accuracy for i in inds)
    assert abs(math.fsum(len(acc_b[u]) * s.accuracy for u, s in bp_scores.items()) - total) <= 1e-12
    weighted = math.fsum(len(i.modules) * i.score.accuracy for i in inds)
    assert abs(math.fsum(len(acc_m[u]) * s.accuracy for u, s in mod_scores.items()) - weighted) <= 1e-12


def test_unscored_individual_rejected():
    ind = random_individuals(np.random.default_rng(0), 1)[0]
    with pytest.raises(ValueError):
        propagate_scores([type(ind)(0, 0, ind.blueprint, ind.modules, ind.hyperparams)])


def test_apply_scores_only_overwrites_measured():
    pop = Population("module", [Member(1, None, score=FitnessScore(0.1, 1)), Member(2, None)])
    apply_scores(pop, {2: FitnessScore(0.5, 0.5)})
    assert pop.members[0].score == FitnessScore(0.1, 1)
    assert pop.members[1].score == FitnessScore(0.5, 0.5)


def test_shared_fitness_counts_unscored_as_zero():
    members = [Member(1, None, score=FitnessScore(0.6, 1)), Member(2, None, score=FitnessScore(0.3, 1)),
               Member(3, None)]
    assert shared_fitness(members) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        shared_fitness([])


# -- elitism -------------------------------------------------------------------

def hamilton(sizes, total):
    """Largest remainder apportionment in exact arithmetic."""
    n = sum(sizes.values())
    exact = {s: Fraction(total * v, n) for s, v in sizes.items()}
    base = {s: int(q) for s, q in exact.items()}
    order = sorted(sizes, key=lambda s: (-(exact[s] - base[s]), s))
    for s in order[: total - sum(base.values())]:
        base[s] += 1
    return base


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(1, 9), st.integers(1, 12), min_size=1, max_size=5), st.data())
def test_quotas_match_largest_remainder(sizes, data):
    total = data.draw(st.integers(0, sum(sizes.values())))
    quotas = elite_quotas(sizes, total)
    assert quotas == hamilton(sizes, total)
    assert sum(quotas.values()) == total


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30), st.sampled_from([0.1, 0.2, 0.5, 1.0]))
def test_elites_are_the_best_of_each_species(seed, n, rate):
    rng = np.random.default_rng(seed)
    members = [Member(i, None, species=int(rng.integers(1, 4)),
                      score=FitnessScore(float(rng.integers(0, 5)) / 4, float(rng.random())))
               for i in range(n)]
    pop = Population("module", members)
    elites = select_elites(pop, rate)
    sizes = Counter(m.species for m in members)
    quotas = hamilton(dict(sizes), math.ceil(Fraction(rate).limit_denominator(100) * n))
    expected = set()
    for sid, q in quotas.items():
        ranked = sorted((m for m in members if m.species == sid),
                        key=lambda m: (-m.score.accuracy, m.score.loss, m.uid))
        expected.update(m.uid for m in ranked[:q])
    assert {m.uid for m in elites} == expected


# -- crossover -----------------------------------------------------------------

def related_pair(tables, rng, marks):
    a = random_graph((2, 5), tables.sample_intermediate, rng, marks=marks)
    b = a
    for _ in range(3):
        b = mutate(b, None, tables.sample_intermediate, rng, marks)
    b = mutate(b, {"replace-content": 1}, tables.sample_intermediate, rng, marks)
    return a, b


def test_crossover_mark_oracle(tables):
    rng = np.random.default_rng(0)
    marks = LineageCounter()
    swapped = eligible = 0
    for _ in range(300):
        a, b = related_pair(tables, rng, marks)
        child = uniform_crossover(a, b, 0.5, rng)
        assert validate(child).ok
        assert child.edges == a.edges and set(child.nodes) == set(a.nodes)
        by_mark_b = {b.nodes[n].mark: b.content(n) for n in b.intermediate}
        shared = shared_marks(a, b)
        for n in a.intermediate:
            mark = a.nodes[n].mark
            assert child.nodes[n].mark == mark
            if mark in shared:
                assert child.content(n) in (a.content(n), by_mark_b[mark])
                if a.content(n) != by_mark_b[mark]:
                    eligible += 1
                    swapped += child.content(n) == by_mark_b[mark]
            else:
                assert child.content(n) == a.content(n)
    assert eligible > 100
    assert stats.binomtest(swapped, eligible, 0.5).pvalue > 0.001


def test_crossover_extremes(tables):
    rng = np.random.default_rng(1)
    a, b = related_pair(tables, rng, LineageCounter())
    assert uniform_crossover(a, b, 0.0, rng) == a
    full = uniform_crossover(a, b, 1.0, rng)
    for n in a.intermediate:
        mark = a.nodes[n].mark
        if mark in shared_marks(a, b):
            assert full.content(n) == b.content(b.marks()[mark])


def test_crossover_parents_share_species_and_fitter_first():
    rng = np.random.default_rng(2)
    members = [Member(i, None, species=1 + i % 2, score=FitnessScore(0.1 * i, 1.0)) for i in range(8)]
    pop = Population("module", members)
    fitness = {1: shared_fitness(pop.species_members(1)), 2: shared_fitness(pop.species_members(2))}
    for _ in range(200):
        a, b = crossover_parents(pop, fitness, rng)
        assert a.species == b.species and a.uid != b.uid
        assert a.score.accuracy >= b.score.accuracy


# -- mutation ------------------------------------------------------------------

def test_mutation_operator_frequencies(tables):
    rng = np.random.default_rng(3)
    marks = LineageCounter()
    g = random_graph((2, 4), tables.sample_intermediate, rng, marks=marks)
    ops = Counter()
    for _ in range(6000):
        child, trace = mutate_traced(g, None, tables.sample_intermediate, rng, marks)
        ops[trace.op] += 1
        assert validate(child).ok
        assert (child is g) == (not trace.applied)
        assert 1 <= trace.attempts <= MAX_RETRIES + 1
    assert stats.chisquare([ops[o] for o in MUTATION_OPS]).pvalue > 0.001


def test_mutation_weights(tables):
    rng = np.random.default_rng(4)
    weights = {"add-edge": 3, "replace-content": 1}
    ops = Counter(mutate_traced(chain_graph([conv(), conv()]), weights, tables.sample_intermediate,
                                rng, LineageCounter())[1].op for _ in range(4000))
    assert set(ops) == {"add-edge", "replace-content"}
    assert stats.binomtest(ops["add-edge"], 4000, 0.75).pvalue > 0.001
    with pytest.raises(ValueError):
        mutate(chain_graph([conv()]), {"teleport": 1}, tables.sample_intermediate, rng)


def test_impossible_mutation_returns_parent(tables):
    g = chain_graph([conv()])
    child, trace = mutate_traced(g, {"remove-node": 1}, tables.sample_intermediate,
                                 np.random.default_rng(5), LineageCounter())
    assert child is g and not trace.applied and trace.attempts == MAX_RETRIES + 1


def test_structural_ops_keep_marks_of_survivors(tables):
    rng = np.random.default_rng(6)
    marks = LineageCounter()
    for _ in range(500):
        g = random_graph((1, 5), tables.sample_intermediate, rng, marks=marks)
        child = mutate(g, None, tables.sample_intermediate, rng, marks)
        for n in set(g.nodes) & set(child.nodes):
            assert child.nodes[n].mark == g.nodes[n].mark


# -- reproduction --------------------------------------------------------------

def scored_population(tables, seed, n=20):
    rng = np.random.default_rng(seed)
    marks = LineageCounter()
    members = [Member(i, random_graph((1, 3), tables.sample_intermediate, rng, marks=marks),
                      species=1 + i % 3, score=FitnessScore(float(rng.random()), float(rng.random())))
               for i in range(n)]
    return Population("module", members), marks


def test_next_generation_shape_and_elites(tables):
    pop, marks = scored_population(tables, 7)
    rates = GenerationRates(0.2, 0.3, 0.5)
    nxt = next_generation(pop, rates, np.random.default_rng(0), tables.sample_intermediate,
                          LineageCounter(1000), marks)
    assert len(nxt) == len(pop)
    elites = {m.uid for m in select_elites(pop, 0.2)}
    kept = [m for m in nxt if m.uid in elites]
    assert len(kept) == 4
    for m in kept:
        old = pop.by_uid(m.uid)
        assert m.genome is old.genome and m.species == old.species and m.score == old.score
    for m in nxt:
        assert validate(m.genome).ok
        if m.uid not in elites:
            assert m.species is None and m.uid >= 1000


def test_next_generation_is_deterministic(tables):
    def run():
        pop, marks = scored_population(tables, 8)
        nxt = next_generation(pop, GenerationRates(), np.random.default_rng(3), tables.sample_intermediate,
                              LineageCounter(100), marks)
        return [(m.uid, m.genome.to_dict() if hasattr(m.genome, "to_dict") else m.genome) for m in nxt]
    assert run() == run()


def test_all_elite_generation_is_a_copy(tables):
    pop, marks = scored_population(tables, 9, n=6)
    nxt = next_generation(pop, GenerationRates(1.0, 0.0, 0.0), np.random.default_rng(0),
                          tables.sample_intermediate, LineageCounter(100), marks)
    assert [m.uid for m in nxt] == [m.uid for m in pop]
