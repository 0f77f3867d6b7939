import threading
from collections import Counter

import numpy as np
import pydot
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from coevonas.graph import (
    MAX_IN_DEGREE,
    GenotypeGraph,
    LineageCounter,
    Node,
    StructuralCorruption,
    chain_graph,
    random_graph,
    to_dot,
    topological_order,
    topological_sort,
    validate,
)

from conftest import conv, graph_from


def sampler(rng):
    return conv(int(rng.integers(16, 49)))


def test_minimal_graph_is_valid():
    g = random_graph((1, 1), sampler, np.random.default_rng(0))
    assert validate(g).ok
    assert len(g.nodes) == 3 and len(g.edges) == 2


def test_in_degree_three_is_flagged():
    g = graph_from({2: conv(), 3: conv(), 4: conv(), 5: conv()},
                   [(0, 2), (0, 3), (0, 4), (2, 5), (3, 5), (4, 5), (5, 1)])
    report = validate(g)
    assert not report.ok
    assert "max-in-degree" in report.violations


def test_dangling_node_breaks_connectivity():
    g = graph_from({2: conv(), 3: conv()}, [(0, 2), (2, 1), (0, 3), (3, 1), (3, 2)])
    assert validate(g).ok
    g = graph_from({2: conv(), 3: conv()}, [(0, 2), (2, 1), (3, 2)])
    assert "single-input" in validate(g).violations


def test_node_cap():
    contents = [conv()] * 11
    assert "node-count" in validate(chain_graph(contents)).violations
    assert validate(chain_graph(contents[:10])).ok


def _oracle(n_nodes, edges, inp=0, out=1):
    """Rule violations computed from bitmask transitive closure."""
    succ = [0] * n_nodes
    pred = [0] * n_nodes
    for u, v in edges:
        succ[u] |= 1 << v
        pred[v] |= 1 << u
    reach = list(succ)
    for k in range(n_nodes):
        for i in range(n_nodes):
            if reach[i] >> k & 1:
                reach[i] |= reach[k]
    bad = set()
    if any(reach[i] >> i & 1 for i in range(n_nodes)):
        bad.add("acyclic")
    sources = {i for i in range(n_nodes) if pred[i] == 0}
    sinks = {i for i in range(n_nodes) if succ[i] == 0}
    if sources != {inp}:
        bad.add("single-input")
    if sinks != {out}:
        bad.add("single-output")
    if any(bin(p).count("1") > 2 for p in pred):
        bad.add("max-in-degree")
    if pred[inp] or succ[out]:
        bad.add("terminal-degree")
    everyone = (1 << n_nodes) - 1
    from_input = reach[inp] | 1 << inp
    to_output = {i for i in range(n_nodes) if i == out or reach[i] >> out & 1}
    if from_input != everyone or len(to_output) != n_nodes:
        bad.add("connectivity")
    return bad


def test_validate_matches_exhaustive_oracle():
    # every digraph on input, output and three intermediate nodes
    nodes = {i: Node(i, None if i < 2 else conv()) for i in range(5)}
    pairs = [(u, v) for u in range(5) for v in range(5) if u != v]
    ok_count = 0
    for mask in range(1 << len(pairs)):
        edges = [pairs[i] for i in range(len(pairs)) if mask >> i & 1]
        report = validate(GenotypeGraph(nodes, edges, 0, 1))
        assert set(report.violations) == _oracle(5, edges), edges
        ok_count += report.ok
    assert ok_count > 0


def test_random_graph_validity_and_uniform_sizes():
    rng = np.random.default_rng(42)
    counts = Counter()
    for _ in range(10_000):
        g = random_graph((1, 3), sampler, rng)
        assert validate(g).ok
        counts[len(g.intermediate)] += 1
    assert set(counts) == {1, 2, 3}
    assert chisquare([counts[k] for k in (1, 2, 3)]).pvalue > 0.01


@pytest.mark.parametrize("bad", [(0, 2), (3, 2), (1, 11), (5, 0)])
def test_random_graph_rejects_bad_ranges(bad):
    with pytest.raises(ValueError):
        random_graph(bad, sampler, np.random.default_rng(0))


def test_topological_order_single():
    g = chain_graph([conv()])
    assert topological_order(g) == [0, 2, 1]


def test_topological_order_respects_edges():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        g = random_graph((1, 10), sampler, rng)
        order = topological_order(g)
        assert sorted(order) == sorted(g.nodes)
        pos = {n: i for i, n in enumerate(order)}
        assert order[0] == g.input_node and order[-1] == g.output_node
        assert all(pos[u] < pos[v] for u, v in g.edges)


def test_topological_ties_follow_marks():
    # two parallel branches: the lower mark goes first whatever the ids
    nodes = {0: Node(0), 1: Node(1), 7: Node(9, conv()), 8: Node(4, conv())}
    g = GenotypeGraph(nodes, {(0, 7), (0, 8), (7, 1), (8, 1)}, 0, 1)
    assert topological_order(g) == [0, 8, 7, 1]


def test_cycle_raises_structural_corruption():
    with pytest.raises(StructuralCorruption):
        topological_sort([1, 2, 3], [(1, 2), (2, 3), (3, 2)])


def test_lineage_counter_is_atomic():
    counter = LineageCounter()
    seen = []
    lock = threading.Lock()

    def work():
        local = [counter() for _ in range(2000)]
        with lock:
            seen.extend(local)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(seen) == list(range(16_000))


def test_random_graphs_never_share_marks():
    counter = LineageCounter()
    rng = np.random.default_rng(1)
    marks = [n.mark for _ in range(200) for n in random_graph((1, 3), sampler, rng, marks=counter).nodes.values()]
    assert len(marks) == len(set(marks))


def test_dot_export_parses():
    g = random_graph((3, 3), sampler, np.random.default_rng(3))
    (parsed,) = pydot.graph_from_dot_data(to_dot(g, "module"))
    names = {n.get_name() for n in parsed.get_nodes()} - {"node", "edge", "graph"}
    assert len(names) == len(g.nodes)
    assert len(parsed.get_edges()) == len(g.edges)


@settings(max_examples=60, deadline=None)
@given(lo=st.integers(1, 10), span=st.integers(0, 9), seed=st.integers(0, 2**32 - 1))
def test_random_graph_property(lo, span, seed):
    hi = min(10, lo + span)
    g = random_graph((lo, hi), sampler, np.random.default_rng(seed))
    assert validate(g).ok
    assert lo <= len(g.intermediate) <= hi
    assert all(g.in_degree(n) <= MAX_IN_DEGREE for n in g.nodes)
