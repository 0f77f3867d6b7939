import csv
import io
import math
import pickle

import numpy as np
import pydot
import pytest

from coevonas.evaluation import SurrogateEvaluator
from coevonas.orchestrator import (
    CHECKPOINT_MAGIC,
    LOG_HEADER,
    ConfigError,
    RunConfig,
    config_from_text,
    export_best,
    final_train,
    generation_rng,
    individual_seeds,
    init_state,
    load_checkpoint,
    load_data,
    read_checkpoint_header,
    resume,
    run_evolution,
    run_random_baseline,
    save_checkpoint,
    step,
)
from coevonas.tables import shipped_config_text

from conftest import desk_config, tiny_trainer_config


def surrogate_config(**kw):
    base = dict(evaluator="surrogate", generations=6)
    base.update(kw)
    return desk_config(**base)


def test_shipped_configs_parse():
    for name in ("desk", "experiment"):
        cfg = config_from_text(shipped_config_text(name))
        assert cfg.generations >= 1 and cfg.rates.elitism == pytest.approx(0.2)


@pytest.mark.parametrize("extra, key", [
    ("bogus = 1", "bogus"),
    ("generations = 0", "generations"),
    ("evaluator = \"oracle\"", "evaluator"),
    ("elitism = 0.9", "rates"),
])
def test_config_errors_name_the_key(extra, key):
    text = "\n".join(line for line in shipped_config_text("desk").splitlines()
                     if not line.startswith(extra.split()[0] + " "))
    with pytest.raises(ConfigError, match=key):
        config_from_text(extra + "\n" + text)


def test_overrides_ignore_none():
    cfg = desk_config()
    assert cfg.with_overrides(seed=None, workers=3).workers == 3
    assert cfg.with_overrides(seed=None).seed == cfg.seed


def test_seed_derivation_is_stable():
    a = generation_rng(1, 2, 3).integers(1 << 30, size=4)
    assert np.array_equal(a, generation_rng(1, 2, 3).integers(1 << 30, size=4))
    assert not np.array_equal(a, generation_rng(1, 2, 4).integers(1 << 30, size=4))
    assert individual_seeds(0, 0, 5) == individual_seeds(0, 0, 5)
    assert len(set(individual_seeds(0, 0, 50))) == 50


def test_one_generation_smoke():
    cfg = surrogate_config(generations=1)
    state = init_state(cfg)
    record = step(state, SurrogateEvaluator())
    assert state.generation == 1 and len(state.records) == 1
    assert len(state.modules) == cfg.modules and len(state.blueprints) == cfg.blueprints
    live = set(state.module_species.live_ids())
    assert all(m.species in live for m in state.modules)
    assert all(m.species in state.blueprint_species.species for m in state.blueprints)
    assert record.best_score == state.best.score
    labels = {r.label.split(":")[0] for r in record.species}
    assert labels == {"module", "blueprint"}


def test_blueprints_only_reference_live_species():
    cfg = surrogate_config(generations=8)
    state = init_state(cfg)
    for _ in range(8):
        step(state, SurrogateEvaluator())
        live = set(state.module_species.live_ids())
        for m in state.blueprints:
            refs = {m.genome.content(n).species_id for n in m.genome.intermediate}
            assert refs <= live


def test_best_so_far_monotone_and_matches_records():
    report = run_evolution(surrogate_config(generations=10))
    accs = [s.accuracy for s in report.best_so_far]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] == max(r.best_score.accuracy for r in report.records)
    assert report.best.score.accuracy == accs[-1]


def test_log_csv_shape():
    cfg = surrogate_config(generations=4)
    report = run_evolution(cfg)
    rows = list(csv.reader(io.StringIO(report.log_csv())))
    assert rows[0] == LOG_HEADER
    expected = sum(len(r.species) for r in report.records)
    assert len(rows) - 1 == expected
    for row in rows[1:]:
        assert len(row) == len(LOG_HEADER)
        assert row[1].split(":")[0] in ("module", "blueprint")
        assert float(row[-1]) >= 0
    assert rows[0][:-1] == list(csv.reader(io.StringIO(report.log_csv(with_seconds=False))))[0]


def test_runs_are_deterministic_and_seed_dependent():
    a = run_evolution(surrogate_config()).summary()
    assert a == run_evolution(surrogate_config()).summary()
    assert a != run_evolution(surrogate_config(seed=5)).summary()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = surrogate_config(generations=7)
    full = run_evolution(cfg).summary()
    ckpt = tmp_path / "checkpoint.bin"
    run_evolution(cfg, checkpoint=ckpt, stop_after=3)
    assert read_checkpoint_header(ckpt)["generation"] == 3
    assert resume(ckpt, SurrogateEvaluator(cfg.surrogate)).summary() == full
    assert read_checkpoint_header(ckpt)["generation"] == 7


def test_checkpoint_format(tmp_path):
    state = init_state(surrogate_config())
    path = tmp_path / "c.bin"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    assert read_checkpoint_header(path)["version"] == 1
    assert load_checkpoint(path).config.seed == state.config.seed
    assert not (tmp_path / "c.bin.tmp").exists()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope\n" + pickle.dumps(state))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(bad)


def test_workers_give_identical_logs_surrogate():
    one = run_evolution(surrogate_config(workers=1)).summary()
    four = run_evolution(surrogate_config(workers=4)).summary()
    assert one == four


def test_trainer_run_and_final_train(tmp_path):
    cfg = tiny_trainer_config()
    data = load_data(cfg)
    report = run_evolution(cfg, data=data)
    assert report.network is not None
    assert 0 <= report.best.score.accuracy <= 1
    history, test = final_train(report.best, data, epochs=2, seed=0)
    assert len(history) == 2 and len(history.val_accuracy) == 2
    assert 0 <= test.accuracy <= 1 and math.isfinite(test.loss)


def test_synthetic_test_split_is_disjoint():
    cfg = tiny_trainer_config()
    data = load_data(cfg)
    key = lambda ds: {row.tobytes() for row in ds.samples}
    assert not key(data.test) & key(data.full_train)
    assert len(data.full_train) == len(data.train) + len(data.validation)


def test_random_baseline_series():
    cfg = surrogate_config(generations=5)
    series = run_random_baseline(cfg, SurrogateEvaluator())
    assert len(series) == 5
    accs = [s.accuracy for s in series]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert series == run_random_baseline(cfg, SurrogateEvaluator())


def test_exports(tmp_path):
    report = run_evolution(surrogate_config(generations=3))
    paths = export_best(report, tmp_path)
    names = {p.name for p in paths}
    assert {"best_network.json", "blueprint.dot", "assembled_network.dot", "generation_log.csv",
            "best_so_far.png", "module_species_features.png", "blueprint_species_scores.png"} <= names
    assert any(n.startswith("module_") and n.endswith(".dot") for n in names)
    for p in paths:
        assert p.exists() and p.stat().st_size > 0
        if p.suffix == ".dot":
            assert pydot.graph_from_dot_data(p.read_text())
        if p.suffix == ".png":
            assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_idx_and_csv_datasets(tmp_path):
    from coevonas.datasets import synthetic_glyphs, write_csv, write_idx
    ds = synthetic_glyphs(120, seed=2)
    write_idx(np.rint(ds.samples[..., 0] * 255), ds.labels, tmp_path / "i", tmp_path / "l")
    write_csv(ds, tmp_path / "d.csv")
    base = desk_config()
    idx = RunConfig(**{**vars(base), "base_dir": str(tmp_path),
                       "dataset": {"kind": "idx", "train_images": "i", "train_labels": "l",
                                   "train": 60, "validation": 30, "classes": 10}})
    bundle = load_data(idx)
    assert len(bundle.train) == 60 and len(bundle.test) == 30
    csv_cfg = idx.with_overrides(dataset={"kind": "csv", "path": "d.csv", "width": 8, "height": 8,
                                          "train": 50, "validation": 20, "classes": 10})
    assert len(load_data(csv_cfg).validation) == 20
    with pytest.raises(ConfigError, match="dataset.kind"):
        load_data(idx.with_overrides(dataset={"kind": "parquet"}))
