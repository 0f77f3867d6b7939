"""Flatten a blueprint and its resolved modules into one layer-level graph.

Assembly runs in four passes:

1. expand   -- every blueprint node is replaced by a copy of its module; module
               terminals become pass-through ``identity`` nodes.
2. merges   -- every node with two inputs gets a ``merge-concat`` node ahead of it.
3. contract -- identity nodes (now single-input) are spliced out.
4. adapters -- a ``flatten`` is placed on every edge from a spatial producer into
               a consumer that needs a flat vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .graph import GenotypeGraph, topological_order, topological_sort

SPATIAL_KINDS = {"input", "conv2d"}
FLAT_CONSUMERS = {"dense", "output-dense"}


class AssemblyError(Exception):
    pass


class UnsupportedTopology(AssemblyError):
    """A flat tensor feeds a convolution."""


class ShapeCheckError(AssemblyError):
    pass


@dataclass(frozen=True)
class AssembledLayer:
    kind: str
    params: dict = field(default_factory=dict)
    provenance: tuple | None = None

    def label(self) -> str:
        p = self.params
        if self.kind == "conv2d":
            return (f"conv2d {p['filters']}f k{p['kernel_size']} s{p.get('stride', 1)} "
                    f"{p.get('activation', 'relu')} d{p.get('dropout', 0.0):.2f}")
        if self.kind == "dense":
            return f"dense {p['units']} {p.get('activation', 'relu')}"
        if self.kind == "output-dense":
            return f"output dense {p['units']} softmax"
        if self.kind == "input":
            return "input " + "x".join(str(d) for d in p["shape"])
        if self.kind == "dropout":
            return f"dropout {p['rate']:.2f}"
        return self.kind


@dataclass
class LayerGraph:
    nodes: dict
    edges: set
    input: int
    output: int

    def predecessors(self, nid: int) -> list[int]:
        return sorted(u for u, v in self.edges if v == nid)

    def successors(self, nid: int) -> list[int]:
        return sorted(v for u, v in self.edges if u == nid)

    def in_degree(self, nid: int) -> int:
        return sum(1 for _, v in self.edges if v == nid)

    def ordered(self) -> list[int]:
        return topological_sort(self.nodes, self.edges)

    def count(self, kind: str) -> int:
        return sum(1 for layer in self.nodes.values() if layer.kind == kind)

    def copy(self) -> "LayerGraph":
        return LayerGraph(dict(self.nodes), set(self.edges), self.input, self.output)

    def to_dict(self) -> dict:
        return {
            "format": "coevonas.layer_graph",
            "version": 1,
            "input": self.input,
            "output": self.output,
            "layers": [
                {"id": nid, "kind": layer.kind, "params": layer.params,
                 "provenance": list(layer.provenance) if layer.provenance else None}
                for nid, layer in sorted(self.nodes.items())
            ],
            "edges": [list(e) for e in sorted(self.edges)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LayerGraph":
        nodes = {
            item["id"]: AssembledLayer(
                item["kind"], dict(item["params"]),
                tuple(item["provenance"]) if item["provenance"] is not None else None,
            )
            for item in doc["layers"]
        }
        return cls(nodes, {tuple(e) for e in doc["edges"]}, doc["input"], doc["output"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LayerGraph":
        return cls.from_dict(json.loads(text))

    def to_dot(self, name: str = "network") -> str:
        lines = [f'digraph "{name}" {{', "  rankdir=TB;"]
        for nid in self.ordered():
            layer = self.nodes[nid]
            shape = "box" if layer.provenance else "ellipse"
            label = layer.label().replace('"', '\\"')
            lines.append(f'  n{nid} [label="{label}", shape={shape}];')
        for u, v in sorted(self.edges):
            lines.append(f"  n{u} -> n{v};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _splice_edge(g: LayerGraph, u: int, v: int, new_id: int, layer: AssembledLayer) -> None:
    g.edges.discard((u, v))
    g.nodes[new_id] = layer
    g.edges.add((u, new_id))
    g.edges.add((new_id, v))


def expand(blueprint: GenotypeGraph, modules: dict, input_shape, class_count: int) -> LayerGraph:
    """Pass 1: blueprint nodes replaced by module copies, terminals kept as identities."""
    nodes = {
        0: AssembledLayer("input", {"shape": [int(d) for d in input_shape]}),
        1: AssembledLayer("output-dense", {"units": int(class_count), "activation": "softmax"}),
    }
    edges = set()
    ids: dict[tuple[int, int], int] = {}
    next_id = 2
    for b in topological_order(blueprint):
        if b in (blueprint.input_node, blueprint.output_node):
            continue
        module = modules.get(b)
        if module is None:
            raise AssemblyError(f"blueprint node {b} has no resolved module")
        for x in topological_order(module):
            if x in (module.input_node, module.output_node):
                layer = AssembledLayer("identity", {}, (b, x))
            else:
                spec = module.content(x)
                layer = AssembledLayer(spec.layer_type, spec.as_dict(), (b, x))
            nodes[next_id] = layer
            ids[(b, x)] = next_id
            next_id += 1
        for u, v in module.edges:
            edges.add((ids[(b, u)], ids[(b, v)]))
    for u, v in blueprint.edges:
        src = 0 if u == blueprint.input_node else ids[(u, modules[u].output_node)]
        dst = 1 if v == blueprint.output_node else ids[(v, modules[v].input_node)]
        edges.add((src, dst))
    return LayerGraph(nodes, edges, 0, 1)


def insert_merges(layer_graph: LayerGraph) -> LayerGraph:
    """Place a merge-concat ahead of every two-input node."""
    g = layer_graph.copy()
    next_id = max(g.nodes) + 1
    for v in sorted(g.nodes):
        preds = g.predecessors(v)
        if len(preds) > 2:
            raise AssemblyError(f"node {v} has {len(preds)} inputs")
        if len(preds) == 2:
            a, b = preds
            g.edges -= {(a, v), (b, v)}
            g.nodes[next_id] = AssembledLayer("merge-concat", {}, None)
            g.edges |= {(a, next_id), (b, next_id), (next_id, v)}
            next_id += 1
    return g


def contract_identities(layer_graph: LayerGraph) -> LayerGraph:
    g = layer_graph.copy()
    for t in [n for n, layer in sorted(g.nodes.items()) if layer.kind == "identity"]:
        preds = g.predecessors(t)
        if len(preds) != 1:
            raise AssemblyError(f"identity node {t} has {len(preds)} inputs after merging")
        p = preds[0]
        for s in g.successors(t):
            if (p, s) in g.edges:
                raise AssemblyError(f"contracting node {t} duplicates edge {p}->{s}")
            g.edges.discard((t, s))
            g.edges.add((p, s))
        g.edges.discard((p, t))
        del g.nodes[t]
    return g


def spatial_outputs(layer_graph: LayerGraph) -> dict[int, bool]:
    """Whether each node emits a spatial (H, W, C) tensor."""
    spatial = {}
    for nid in layer_graph.ordered():
        kind = layer_graph.nodes[nid].kind
        preds = layer_graph.predecessors(nid)
        if kind in SPATIAL_KINDS:
            spatial[nid] = True
        elif kind in ("dropout", "identity"):
            spatial[nid] = spatial[preds[0]]
        elif kind == "merge-concat":
            spatial[nid] = all(spatial[p] for p in preds)
        else:
            spatial[nid] = False
    return spatial


def insert_adapters(layer_graph: LayerGraph) -> LayerGraph:
    """Put a flatten on every spatial -> flat-consumer edge; reject flat -> conv."""
    g = layer_graph.copy()
    spatial = spatial_outputs(g)
    next_id = max(g.nodes) + 1
    for v in g.ordered():
        kind = g.nodes[v].kind
        preds = layer_graph.predecessors(v)
        if kind == "conv2d" and not all(spatial[p] for p in preds):
            raise UnsupportedTopology(f"flat tensor feeds conv2d node {v}")
        needs_flat = kind in FLAT_CONSUMERS or (
            kind == "merge-concat" and not all(spatial[p] for p in preds)
        )
        if not needs_flat:
            continue
        for p in preds:
            if spatial[p]:
                _splice_edge(g, p, v, next_id, AssembledLayer("flatten", {}, None))
                next_id += 1
    return g


def _renumber(g: LayerGraph) -> LayerGraph:
    order = g.ordered()
    remap = {old: new for new, old in enumerate(order)}
    return LayerGraph(
        {remap[k]: v for k, v in g.nodes.items()},
        {(remap[u], remap[v]) for u, v in g.edges},
        remap[g.input],
        remap[g.output],
    )


def assemble(individual, input_shape, class_count: int) -> LayerGraph:
    """Layer graph for ``individual`` (blueprint plus resolved modules)."""
    modules = {b: graph for b, graph in individual.module_graphs().items()}
    g = expand(individual.blueprint, modules, input_shape, class_count)
    g = insert_merges(g)
    g = contract_identities(g)
    g = insert_adapters(g)
    g = _renumber(g)
    shape_check(g, input_shape)
    return g


def shape_check(layer_graph: LayerGraph, input_shape) -> dict[int, tuple]:
    """Forward shape inference; raises ShapeCheckError naming the first bad layer."""
    shapes: dict[int, tuple] = {}
    for nid in layer_graph.ordered():
        layer = layer_graph.nodes[nid]
        p = layer.params
        ins = [shapes[i] for i in layer_graph.predecessors(nid)]
        name = f"layer {nid} ({layer.kind})"
        if layer.kind == "input":
            shape = tuple(int(d) for d in input_shape)
            if tuple(p["shape"]) != shape:
                raise ShapeCheckError(f"{name}: declared {p['shape']} but data is {shape}")
        elif layer.kind == "conv2d":
            if len(ins) != 1 or len(ins[0]) != 3:
                raise ShapeCheckError(f"{name}: needs one spatial input, got {ins}")
            h, w, _ = ins[0]
            s = int(p.get("stride", 1))
            shape = (math.ceil(h / s), math.ceil(w / s), int(p["filters"]))
        elif layer.kind in ("dense", "output-dense"):
            if len(ins) != 1 or len(ins[0]) != 1:
                raise ShapeCheckError(f"{name}: needs one flat input, got {ins}")
            shape = (int(p["units"]),)
        elif layer.kind == "flatten":
            shape = (math.prod(ins[0]),)
        elif layer.kind in ("dropout", "identity"):
            shape = ins[0]
        elif layer.kind == "merge-concat":
            if len(ins) != 2 or len(ins[0]) != len(ins[1]):
                raise ShapeCheckError(f"{name}: needs two inputs of equal rank, got {ins}")
            a, b = ins
            if len(a) == 1:
                shape = (a[0] + b[0],)
            else:
                shape = (min(a[0], b[0]), min(a[1], b[1]), a[2] + b[2])
        else:
            raise ShapeCheckError(f"{name}: unknown layer kind")
        if not shape or any(d <= 0 for d in shape):
            raise ShapeCheckError(f"{name}: non-positive dimension in {shape}")
        shapes[nid] = shape
    return shapes


def parameter_count(layer_graph: LayerGraph, input_shape) -> int:
    """Trainable parameter count from layer arithmetic alone."""
    shapes = shape_check(layer_graph, input_shape)
    total = 0
    for nid, layer in layer_graph.nodes.items():
        if layer.kind not in ("conv2d", "dense", "output-dense"):
            continue
        (src,) = layer_graph.predecessors(nid)
        if layer.kind == "conv2d":
            k = int(layer.params["kernel_size"])
            filters = int(layer.params["filters"])
            total += k * k * shapes[src][2] * filters + filters
        else:
            units = int(layer.params["units"])
            total += shapes[src][0] * units + units
    return total
