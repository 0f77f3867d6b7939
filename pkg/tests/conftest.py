import numpy as np
import pytest

from coevonas.graph import GenotypeGraph, LineageCounter, Node, chain_graph
from coevonas.populations import Individual
from coevonas.tables import LayerSpec, TrainingHyperparams, experiment_tables


def conv(filters=16, kernel_size=3, dropout=0.0, stride=1):
    return LayerSpec("conv2d", {"filters": filters, "kernel_size": kernel_size, "stride": stride,
                                "activation": "relu", "dropout": dropout})


def dense(units=32, activation="relu"):
    return LayerSpec("dense", {"units": units, "activation": activation})


def graph_from(contents: dict, edges, marks=None):
    """Graph with input 0, output 1 and the given intermediate contents."""
    marks = marks or LineageCounter()
    nodes = {0: Node(marks()), 1: Node(marks())}
    for nid, c in sorted(contents.items()):
        nodes[nid] = Node(marks(), c)
    return GenotypeGraph(nodes, set(edges), 0, 1)


HYPER = TrainingHyperparams("categorical_crossentropy", "Adam", ("Accuracy",), 1e-3, 1, 32)


def make_individual(blueprint, modules, uid=0, seed=0, hyper=HYPER):
    resolved = {node: (uid * 100 + node, modules[node]) for node in blueprint.intermediate}
    return Individual(uid, uid, blueprint, resolved, hyper, seed)


@pytest.fixture
def tables():
    return experiment_tables()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def marks():
    return LineageCounter()


@pytest.fixture
def chain():
    return chain_graph


def desk_config(**overrides):
    from coevonas.orchestrator import config_from_text
    from coevonas.tables import shipped_config_text
    return config_from_text(shipped_config_text("desk")).with_overrides(**overrides)


def tiny_trainer_config(**overrides):
    """Trainer-backed config small enough for unit tests."""
    from dataclasses import replace
    cfg = desk_config(generations=2, individuals=4, blueprints=4, modules=8, species=2,
                      dataset={"kind": "synthetic", "samples": 240, "train": 120, "validation": 60})
    cfg.tables = replace(cfg.tables, hyper=replace(cfg.tables.hyper, epochs=1, batch_size=32))
    return cfg.with_overrides(**overrides)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = list(test_acceptance.report_lines())
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
