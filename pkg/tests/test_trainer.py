from dataclasses import replace

import numpy as np
import pytest

from drift_tune.calibration import CalibrationSwitches
from drift_tune.data import PretrainConfig, make_drift_benchmark, make_transfer_task, pretrain_source
from drift_tune.errors import ConfigError, ShapeError
from drift_tune.trainer import (
    ABLATION_ROWS,
    METRICS_HEADER,
    TrainConfig,
    ablation_grid,
    finetune,
    k_sweep,
    max_workers,
)


@pytest.fixture(scope="module")
def transfer():
    task = make_transfer_task(seed=0, source_per_class=60)
    enc, _, _ = pretrain_source(PretrainConfig(epochs=5), task.source)
    return enc, task.target


def _metrics(report):
    return [r.csv_row() for r in report.epochs]


class TestConfig:
    def test_head_lr_rule(self):
        assert TrainConfig(K=2048, B=64).lr_head == pytest.approx(0.33)
        assert TrainConfig(method="ce", K=2048, B=64).lr_head == 0.01
        assert TrainConfig(K=2048, B=64, fixed_head_lr=True).lr_head == 0.01
        assert TrainConfig(K=32, B=32).lam == 1.0

    @pytest.mark.parametrize("bad", [dict(K=0), dict(B=0), dict(epochs=0), dict(method="sa"),
                                     dict(lr_schedule="step"), dict(lr_encoder=0.0)])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    def test_batch_larger_than_data(self, transfer):
        enc, target = transfer
        with pytest.raises(ConfigError):
            finetune(TrainConfig(B=1000, epochs=1), enc, target)

    def test_dim_mismatch_before_training(self):
        task = make_transfer_task(seed=0, source_per_class=5)
        other = make_transfer_task(seed=0, input_dim=32, source_per_class=5)
        enc, _, _ = pretrain_source(PretrainConfig(epochs=1), task.source)
        with pytest.raises(ShapeError):
            finetune(TrainConfig(epochs=1), enc, other.target)


def test_ce_equivalence_bit_exact(transfer):
    enc, target = transfer
    base = TrainConfig(method="ce", epochs=4, seed=5)
    _, ce = finetune(base, enc, target)
    dr_cfg = replace(base, method="drtune", switches=CalibrationSwitches.from_mode("none"),
                     lambda_override=0.0, fixed_head_lr=True)
    model, dr = finetune(dr_cfg, enc, target)
    for a, b in zip(ce.epochs, dr.epochs):
        assert (a.ce, a.train_acc, a.test_acc) == (b.ce, b.train_acc, b.test_acc)


def test_deterministic(transfer):
    enc, target = transfer
    cfg = TrainConfig(epochs=3, seed=2, K=64)
    m1, r1 = finetune(cfg, enc, target)
    m2, r2 = finetune(cfg, enc, target)
    assert _metrics(r1) == _metrics(r2)
    assert m1.head.prototypes.tobytes() == m2.head.prototypes.tobytes()
    assert _metrics(finetune(replace(cfg, seed=3), enc, target)[1]) != _metrics(r1)


def test_does_not_mutate_pretrained(transfer):
    enc, target = transfer
    before = [p.copy() for p in enc.params()]
    finetune(TrainConfig(epochs=2, K=32), enc, target)
    assert all(np.array_equal(a, b) for a, b in zip(before, enc.params()))


def test_report_shape(transfer):
    enc, target = transfer
    _, rep = finetune(TrainConfig(epochs=3, K=32, check_invariants=True), enc, target)
    assert len(rep.epochs) == 3 and rep.wall_clock > 0
    for r in rep.epochs:
        assert 0 <= r.train_acc <= 1 and 0 <= r.test_acc <= 1
        assert r.lam == 2.0 and r.rot_orth_err < 1e-10
        assert r.total == pytest.approx(r.ce + r.lam * r.dr)
    assert rep.best_test_acc >= rep.final_test_acc


def test_metrics_csv(tmp_path, transfer):
    enc, target = transfer
    _, rep = finetune(TrainConfig(method="ce", epochs=2), enc, target)
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().split("\n")
    assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 4 and lines[-1] == ""


def test_l2sp_runs(transfer):
    enc, target = transfer
    _, rep = finetune(TrainConfig(method="l2sp", epochs=2, l2sp_beta=0.1), enc, target)
    assert rep.epochs[0].total >= rep.epochs[0].ce


def test_frozen_encoder(transfer):
    enc, target = transfer
    model, _ = finetune(TrainConfig(epochs=2, K=32, freeze_encoder=True), enc, target)
    assert all(np.array_equal(a, b) for a, b in zip(enc.params(), model.encoder.params()))


def test_ablation_grid_rows():
    bench = make_drift_benchmark(seed=0)
    grid = ablation_grid(TrainConfig(epochs=1, K=64), None, bench)
    assert tuple(grid) == ABLATION_ROWS
    assert all(len(r.epochs) == 1 for r in grid.values())
    assert grid["none"].epochs[0].rot_orth_err < 1e-12


def test_k_sweep_rows():
    bench = make_drift_benchmark(seed=0)
    rows = k_sweep(TrainConfig(epochs=1, B=16), [16, 32, 64], None, bench)
    assert [r[0] for r in rows] == [16, 32, 64]
    assert [r[1] for r in rows] == [1.0, 2.0, 4.0]


def test_isolation_mode_recovers_drift():
    bench = make_drift_benchmark(seed=1)
    cfg = TrainConfig(epochs=2, K=len(bench.train), switches=CalibrationSwitches.from_mode("gr+clt"))
    _, rep = finetune(cfg, None, bench)
    assert np.linalg.norm(rep.transform.rotation - bench.drift.Q) < 0.1
    assert np.max(np.linalg.norm(rep.transform.translations - bench.drift.translations, axis=1)) < 0.1


def test_max_workers(monkeypatch):
    monkeypatch.setenv("DRIFT_TUNE_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("DRIFT_TUNE_THREADS", "x")
    with pytest.raises(ConfigError):
        max_workers()


def test_parallel_matches_serial(monkeypatch):
    bench = make_drift_benchmark(seed=0)
    cfg = TrainConfig(epochs=1, B=16)
    serial = k_sweep(cfg, [16, 64], None, bench)
    monkeypatch.setenv("DRIFT_TUNE_THREADS", "2")
    assert k_sweep(cfg, [16, 64], None, bench) == serial
