"""DAG genotypes shared by module and blueprint populations.

A genotype is an immutable directed acyclic graph with one content-less input
terminal, one content-less output terminal and 1..10 intermediate nodes.  Each
node carries a lineage mark; clones keep their marks so crossover can line up
nodes that descend from the same creation event.
"""

from __future__ import annotations

import heapq
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

MAX_IN_DEGREE = 2
MAX_NODES = 10

RULES = (
    "structure",
    "acyclic",
    "single-input",
    "single-output",
    "max-in-degree",
    "terminal-degree",
    "connectivity",
    "node-count",
)


class GraphError(Exception):
    """Raised when a genotype cannot be built or ordered."""


class StructuralCorruption(GraphError):
    """A graph that passed validation turned out cyclic; indicates an engine bug."""


class LineageCounter:
    """Thread-safe monotone counter handing out lineage marks (and uids)."""

    def __init__(self, start: int = 0):
        self._next = start
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value

    @property
    def value(self) -> int:
        return self._next

    def __getstate__(self):
        return {"next": self._next}

    def __setstate__(self, state):
        self._next = state["next"]
        self._lock = threading.Lock()


MARKS = LineageCounter()


@dataclass(frozen=True)
class Node:
    mark: int
    content: Any = None


@dataclass(frozen=True, eq=True)
class GenotypeGraph:
    nodes: Mapping[int, Node]
    edges: frozenset
    input_node: int
    output_node: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", dict(self.nodes))
        object.__setattr__(self, "edges", frozenset(self.edges))

    @property
    def intermediate(self) -> list[int]:
        return sorted(n for n in self.nodes if n not in (self.input_node, self.output_node))

    def in_degree(self, node: int) -> int:
        return sum(1 for _, v in self.edges if v == node)

    def out_degree(self, node: int) -> int:
        return sum(1 for u, _ in self.edges if u == node)

    def predecessors(self, node: int) -> list[int]:
        return sorted(u for u, v in self.edges if v == node)

    def successors(self, node: int) -> list[int]:
        return sorted(v for u, v in self.edges if u == node)

    def content(self, node: int):
        return self.nodes[node].content

    def replace(self, nodes=None, edges=None) -> "GenotypeGraph":
        return GenotypeGraph(
            self.nodes if nodes is None else nodes,
            self.edges if edges is None else edges,
            self.input_node,
            self.output_node,
        )

    def marks(self) -> dict[int, int]:
        """Lineage mark -> node id."""
        return {node.mark: nid for nid, node in self.nodes.items()}

    def summary(self) -> str:
        return f"GenotypeGraph({len(self.intermediate)} nodes, {len(self.edges)} edges)"


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _has_cycle(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> bool:
    indeg = {n: 0 for n in nodes}
    succ = defaultdict(list)
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    stack = [n for n, d in indeg.items() if d == 0]
    seen = 0
    while stack:
        n = stack.pop()
        seen += 1
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                stack.append(m)
    return seen != len(indeg)


def _reachable(start: int, adjacency: Mapping[int, list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        for m in adjacency.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


def validate(graph: GenotypeGraph) -> ValidationReport:
    """Check every structural rule; never raises."""
    bad: list[str] = []
    nodes = set(graph.nodes)
    if (
        graph.input_node not in nodes
        or graph.output_node not in nodes
        or graph.input_node == graph.output_node
        or any(u not in nodes or v not in nodes for u, v in graph.edges)
    ):
        return ValidationReport(False, ["structure"])

    indeg = {n: 0 for n in nodes}
    outdeg = {n: 0 for n in nodes}
    succ: dict[int, list[int]] = defaultdict(list)
    pred: dict[int, list[int]] = defaultdict(list)
    for u, v in graph.edges:
        indeg[v] += 1
        outdeg[u] += 1
        succ[u].append(v)
        pred[v].append(u)

    if _has_cycle(nodes, graph.edges):
        bad.append("acyclic")
    sources = [n for n in nodes if indeg[n] == 0]
    sinks = [n for n in nodes if outdeg[n] == 0]
    if sources != [graph.input_node]:
        bad.append("single-input")
    if sinks != [graph.output_node]:
        bad.append("single-output")
    if any(d > MAX_IN_DEGREE for d in indeg.values()):
        bad.append("max-in-degree")
    if indeg[graph.input_node] != 0 or outdeg[graph.output_node] != 0:
        bad.append("terminal-degree")
    if _reachable(graph.input_node, succ) != nodes or _reachable(graph.output_node, pred) != nodes:
        bad.append("connectivity")
    if not 1 <= len(nodes) - 2 <= MAX_NODES:
        bad.append("node-count")
    return ValidationReport(not bad, bad)


def topological_sort(
    nodes: Iterable[Hashable],
    edges: Iterable[tuple[Hashable, Hashable]],
    key: Callable[[Hashable], Any] | None = None,
) -> list:
    """Kahn's algorithm; ready nodes are released in ascending ``key`` order."""
    key = key or (lambda n: n)
    nodes = list(nodes)
    indeg = {n: 0 for n in nodes}
    succ = defaultdict(list)
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    heap = [(key(n), i, n) for i, n in enumerate(nodes) if indeg[n] == 0]
    heapq.heapify(heap)
    index = {n: i for i, n in enumerate(nodes)}
    order = []
    while heap:
        _, _, n = heapq.heappop(heap)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, (key(m), index[m], m))
    if len(order) != len(nodes):
        raise StructuralCorruption("cycle detected during topological ordering")
    return order


def topological_order(graph: GenotypeGraph) -> list[int]:
    """Deterministic order; ties broken by ascending lineage mark."""
    return topological_sort(graph.nodes, graph.edges, key=lambda n: (graph.nodes[n].mark, n))


def ancestors(graph: GenotypeGraph, node: int) -> set[int]:
    pred = defaultdict(list)
    for u, v in graph.edges:
        pred[v].append(u)
    return _reachable(node, pred) - {node}


def descendants(graph: GenotypeGraph, node: int) -> set[int]:
    succ = defaultdict(list)
    for u, v in graph.edges:
        succ[u].append(v)
    return _reachable(node, succ) - {node}


def _check_range(node_count_range: Sequence[int]) -> tuple[int, int]:
    lo, hi = (int(x) for x in node_count_range)
    if lo > hi:
        raise ValueError(f"inverted node count range {node_count_range!r}")
    if lo < 1 or hi > MAX_NODES:
        raise ValueError(f"node count range {node_count_range!r} outside [1, {MAX_NODES}]")
    return lo, hi


def _wire(n: int, rng: np.random.Generator, extra_edge_prob: float) -> set[tuple[int, int]] | None:
    # ids: 0 input, 1 output, 2.. intermediates in topological order
    inter = list(range(2, n + 2))
    order = [0] + inter + [1]
    pos = {v: i for i, v in enumerate(order)}
    edges: set[tuple[int, int]] = set()
    indeg = defaultdict(int)
    outdeg = defaultdict(int)

    def add(u, v):
        edges.add((u, v))
        indeg[v] += 1
        outdeg[u] += 1

    for i, v in enumerate(inter):
        candidates = [0] + inter[:i]
        add(candidates[rng.integers(len(candidates))], v)
    for v in reversed(inter):
        if outdeg[v]:
            continue
        later = [w for w in order[pos[v] + 1:] if indeg[w] < MAX_IN_DEGREE]
        if not later:
            return None
        add(v, later[rng.integers(len(later))])
    for i, u in enumerate(order[:-1]):
        for v in order[i + 1:]:
            if (u, v) in edges or indeg[v] >= MAX_IN_DEGREE or (u, v) == (0, 1):
                continue
            if rng.random() < extra_edge_prob:
                add(u, v)
    return edges


def random_graph(
    node_count_range: Sequence[int],
    content_sampler: Callable[[np.random.Generator], Any],
    rng: np.random.Generator,
    marks: LineageCounter | None = None,
    extra_edge_prob: float = 0.15,
) -> GenotypeGraph:
    """Random valid genotype with an intermediate node count drawn uniformly from the range."""
    lo, hi = _check_range(node_count_range)
    marks = marks or MARKS
    n = int(rng.integers(lo, hi + 1))
    edges = None
    for _ in range(100):
        edges = _wire(n, rng, extra_edge_prob)
        if edges is not None:
            break
    if edges is None:
        chain = [0] + list(range(2, n + 2)) + [1]
        edges = set(zip(chain, chain[1:]))
    nodes = {0: Node(marks()), 1: Node(marks())}
    for v in range(2, n + 2):
        nodes[v] = Node(marks(), content_sampler(rng))
    graph = GenotypeGraph(nodes, edges, 0, 1)
    report = validate(graph)
    if not report.ok:
        raise StructuralCorruption(f"random_graph produced invalid graph: {report.violations}")
    return graph


def chain_graph(contents: Sequence[Any], marks: LineageCounter | None = None) -> GenotypeGraph:
    """input -> contents[0] -> ... -> output."""
    marks = marks or MARKS
    nodes = {0: Node(marks()), 1: Node(marks())}
    ids = []
    for i, c in enumerate(contents):
        nodes[i + 2] = Node(marks(), c)
        ids.append(i + 2)
    path = [0] + ids + [1]
    return GenotypeGraph(nodes, set(zip(path, path[1:])), 0, 1)


def _content_label(content) -> str:
    if content is None:
        return ""
    if hasattr(content, "label"):
        return content.label()
    return str(content)


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(graph: GenotypeGraph, name: str = "genotype") -> str:
    """Graphviz DOT text; node label = content summary."""
    lines = [f'digraph "{_dot_escape(name)}" {{', "  rankdir=TB;"]
    for nid in topological_order(graph):
        node = graph.nodes[nid]
        if nid == graph.input_node:
            label, shape = "input", "invhouse"
        elif nid == graph.output_node:
            label, shape = "output", "house"
        else:
            label, shape = _content_label(node.content), "box"
        lines.append(f'  n{nid} [label="{_dot_escape(label)}\\n#{node.mark}", shape={shape}];')
    for u, v in sorted(graph.edges):
        lines.append(f"  n{u} -> n{v};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def relabel_dense(graph: GenotypeGraph) -> GenotypeGraph:
    """Renumber node ids to 0..n-1 (input 0, output 1) keeping marks and structure."""
    order = [graph.input_node, graph.output_node] + [
        n for n in topological_order(graph) if n not in (graph.input_node, graph.output_node)
    ]
    remap = {old: new for new, old in enumerate(order)}
    nodes = {remap[k]: v for k, v in graph.nodes.items()}
    edges = {(remap[u], remap[v]) for u, v in graph.edges}
    return GenotypeGraph(nodes, edges, 0, 1)


def new_node_id(graph: GenotypeGraph) -> int:
    return max(graph.nodes) + 1
