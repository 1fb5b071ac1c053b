import csv

import numpy as np
import pytest

from mtmdseg.data import DOMAINS, generate_dataset
from mtmdseg.network import ArchConfig
from mtmdseg.training import (TRAIN_SCHEMES, TrainConfig, TrainingDiverged, compose_step_batch, epoch_batches,
                              run_leave_one_out, save_fold_outputs, split_plan, steps_per_epoch, summarize,
                              train_one, validation_dice, write_metrics_csv, write_trace_csv)
from mtmdseg.data import exams_to_slices

TINY = ArchConfig(base_width=2, depth=2, input_size=48)


@pytest.fixture(scope="module")
def datasets():
    return {d.id: generate_dataset(7, d.id, 3, size=(4, 48, 48)) for d in DOMAINS}


def tiny_cfg(scheme, **kw):
    base = dict(scheme=scheme, epochs=3, batch_size=8, learning_rate=3e-3, seed=1, arch=TINY)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- batches

def test_batch_split_and_coverage():
    sizes = [96, 80]
    batches = epoch_batches(sizes, 32, seed=0, epoch=1)
    assert len(batches) == steps_per_epoch(sizes, 32) == 6
    for step in batches:
        assert [len(b) for b in step] == [16, 16]
    for k, n in enumerate(sizes):
        seen = np.concatenate([step[k] for step in batches])
        assert set(seen.tolist()) == set(range(n))
    # the larger domain sees each slice exactly once
    assert sorted(np.concatenate([s[0] for s in batches]).tolist()) == list(range(96))


def test_batches_deterministic_and_epoch_dependent():
    a = epoch_batches([40, 30], 8, 3, 2)
    b = epoch_batches([40, 30], 8, 3, 2)
    c = epoch_batches([40, 30], 8, 3, 3)
    assert all(np.array_equal(x, y) for sa, sb in zip(a, b) for x, y in zip(sa, sb))
    assert not all(np.array_equal(x, y) for sa, sc in zip(a, c) for x, y in zip(sa, sc))
    n = steps_per_epoch([40, 30], 8)
    for step in (0, n - 1, n, 3 * n + 2):
        epoch, i = divmod(step, n)
        expected = epoch_batches([40, 30], 8, 3, epoch + 1)[i]
        assert all(np.array_equal(x, y) for x, y in zip(compose_step_batch([40, 30], 8, 3, step), expected))


def test_batch_size_must_divide():
    with pytest.raises(ValueError):
        epoch_batches([10, 10], 7, 0, 1)


# ---------------------------------------------------------------- split plan

def test_split_plan_eight_exams():
    folds = split_plan({0: 8, 1: 8})
    assert len(folds) == 8
    for k in (0, 1):
        assert sorted(f.test[k] for f in folds) == list(range(8))
        for f in folds:
            parts = [set(f.train[k]), {f.val[k]}, {f.test[k]}]
            assert sum(map(len, parts)) == 8 and set().union(*parts) == set(range(8))
    assert all(f.test[0] == f.test[1] for f in folds)  # indices advance together


def test_split_plan_unequal_counts_and_errors():
    folds = split_plan({0: 5, 1: 4})
    assert len(folds) == 5
    tested = [f.test[1] for f in folds if f.test[1] is not None]
    assert sorted(tested) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        split_plan({0: 2, 1: 8})


def test_config_validation():
    with pytest.raises(ValueError, match="base, joint, dsl, dsl_contrastive"):
        TrainConfig(scheme="mixed")
    with pytest.raises(ValueError):
        TrainConfig(tau=0)
    assert TrainConfig().learning_rate == 1e-4 and TrainConfig().tau == 0.1 and TrainConfig().lam == 0.1
    assert TrainConfig(scheme="dsl").effective_lambda == 0.0


# ---------------------------------------------------------------- training runs

def test_lambda_zero_reproduces_dsl_trace(datasets):
    fold = split_plan({0: 3, 1: 3})[0]
    a = train_one(tiny_cfg("dsl"), fold, datasets, list(DOMAINS))
    b = train_one(tiny_cfg("dsl_contrastive", lam=0.0), fold, datasets, list(DOMAINS))
    assert [(r.epoch, r.term) for r in a.trace] == [(r.epoch, r.term) for r in b.trace]
    assert np.array([r.value for r in a.trace]).tobytes() == np.array([r.value for r in b.trace]).tobytes()
    c = train_one(tiny_cfg("dsl_contrastive", lam=0.1), fold, datasets, list(DOMAINS))
    assert not np.array_equal(a.term("ce"), c.term("ce"))


def test_checkpoint_selection_by_validation_dice(datasets):
    fold = split_plan({0: 3, 1: 3})[1]
    cfg = tiny_cfg("dsl", epochs=4, snapshot_epochs=(1, 2, 3, 4))
    res = train_one(cfg, fold, datasets, list(DOMAINS))
    val = {k: exams_to_slices(datasets[k], [fold.val[k]]) for k in datasets}

    def score(model):
        return float(np.mean([validation_dice(model, k, val[k]) for k in val]))

    chosen = score(res.model)
    assert all(chosen >= score(snap) for snap in res.snapshots.values())
    assert res.model.meta["best_epoch"] == int(np.argmax(res.term("val_dice"))) + 1
    assert res.term("ce")[-1] < res.term("ce")[0]


def test_base_trains_independent_models(tmp_path, datasets):
    fold = split_plan({0: 3, 1: 3})[0]
    cfg = tiny_cfg("base", epochs=1)
    res = train_one(cfg, fold, datasets, list(DOMAINS))
    assert len(res.model.nets) == 2 and res.model.nets[0] is not res.model.nets[1]
    assert {t.split("[")[0] for t in {r.term for r in res.trace}} == {"ce", "total", "val_dice"}
    save_fold_outputs(tmp_path, cfg, 0, res)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["base_fold0_ankle.ckpt", "base_fold0_shoulder.ckpt"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(datasets):
    fold = split_plan({0: 3, 1: 3})[0]
    with pytest.raises(TrainingDiverged, match="non-finite loss at step"):
        train_one(tiny_cfg("dsl", epochs=2, learning_rate=1e300), fold, datasets, list(DOMAINS))


def test_leave_one_out_table_and_determinism(tmp_path, datasets):
    cfg = tiny_cfg("joint", epochs=1)
    a = run_leave_one_out(cfg, datasets, list(DOMAINS), out_dir=tmp_path)
    assert {d: sorted(v) for d, v in a.tested.items()} == {"ankle": [0, 1, 2], "shoulder": [0, 1, 2]}
    assert len(a.rows) == 3 * 2 * 6
    b = run_leave_one_out(cfg, datasets, list(DOMAINS), folds=[0, 1, 2])
    assert [(r.fold, r.domain, r.metric, r.value) for r in a.rows] == \
        [(r.fold, r.domain, r.metric, r.value) for r in b.rows]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(
        [f"joint_fold{f}.ckpt" for f in range(3)] + [f"joint_fold{f}_trace.csv" for f in range(3)])
    write_metrics_csv(tmp_path / "m.csv", a.rows)
    with open(tmp_path / "m.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["scheme", "domain", "fold", "metric", "value"] and len(rows) == 37


def test_summary_covers_all_schemes():
    from mtmdseg.training import MetricRow
    rows = [MetricRow(s, d, f, m, 0.5 if m != "assd_mm" or f else None)
            for s in TRAIN_SCHEMES for d in ("ankle", "shoulder") for f in range(2)
            for m in ("dice", "assd_mm", "mssd_mm", "sensitivity", "specificity", "ravd")]
    table = summarize(rows)
    assert len(table) == 4 * 2 * 6
    assd = [t for t in table if t["metric"] == "assd_mm"][0]
    assert assd["n"] == 1 and assd["undefined"] == 1 and assd["mean"] == 0.5


def test_trace_csv(tmp_path):
    from mtmdseg.training import TraceRow
    write_trace_csv(tmp_path / "t.csv", [TraceRow(1, "ce", 0.25), TraceRow(1, "total", 0.3)])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["epoch,term,value", "1,ce,0.25", "1,total,0.3"]
