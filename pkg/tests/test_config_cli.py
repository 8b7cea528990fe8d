import csv
import json

import numpy as np
import pytest

from drift_tune.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, PCA_HEADER, cmd_diagnose, cmd_finetune, main
from drift_tune.config import load_manifest, parse_ini
from drift_tune.errors import ConfigError
from drift_tune.model import load_checkpoint

SMALL_TRANSFER = """
[run]
seed = 1
out = {out}

[data]
kind = transfer
source_per_class = 40
target_test_per_class = 40

[pretrain]
epochs = 2

[finetune]
epochs = 2
k = 32
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def transfer_cfg(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL_TRANSFER.format(out="runs"))
    return path


class TestManifest:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="finetune.lr_head"):
            parse_ini("[finetune]\nlr_head = 0.3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="optim"):
            parse_ini("[optim]\nlr = 0.3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="finetune.k"):
            parse_ini("[finetune]\nk = many\n")

    def test_mapping_and_overrides(self, transfer_cfg):
        m = load_manifest(transfer_cfg, {"finetune": {"lr": 0.02, "ablate_sc": "gr"}})
        assert m.train.K == 32 and m.train.lr_encoder == 0.02 and m.train.seed == 1
        assert m.train.switches.mode == "gr" and m.pretrain.epochs == 2
        assert m.out_dir == transfer_cfg.parent / "runs"

    def test_ablate_gr_disables_others(self):
        sw = load_manifest(None, {"finetune": {"ablate_sc": "gr"}}).train.switches
        assert sw.use_global_rotation and not sw.use_class_translation and not sw.use_confidence_average

    def test_round_trip_ini(self, transfer_cfg):
        m = load_manifest(transfer_cfg)
        again = parse_ini(m.to_ini())
        assert again["finetune"]["k"] == 32 and again["data"]["source_per_class"] == 40

    def test_csv_paths_validated(self, tmp_path):
        m = load_manifest(None, {"data": {"kind": "csv", "train": "missing.csv", "test": "missing.csv"}})
        with pytest.raises(ConfigError, match="data.train"):
            m.validate("finetune")

    def test_kind_specific_keys(self):
        with pytest.raises(ConfigError, match="data.dim"):
            load_manifest(None, {"data": {"kind": "transfer", "dim": 4}}).validate()


class TestCommands:
    def test_pretrain_then_finetune(self, transfer_cfg, capsys):
        assert main(["pretrain", "--config", str(transfer_cfg)]) == EXIT_OK
        pre = transfer_cfg.parent / "runs" / "pretrain"
        enc, head, header = load_checkpoint(pre / "encoder.ckpt")
        assert head is None and enc.input_dim == 64
        meta = json.loads((pre / "encoder.ckpt.json").read_text())
        assert {"seed", "git_describe", "input_dim"} <= set(meta)
        assert main(["finetune", "--config", str(transfer_cfg)]) == EXIT_OK
        ft = transfer_cfg.parent / "runs" / "finetune"
        rows = _rows(ft / "metrics.csv")
        assert rows[0][:3] == ["epoch", "ce", "dr"] and len(rows) == 3
        assert _rows(ft / "timing.csv")[0] == ["run", "wall_clock_seconds"]
        assert (ft / "model.ckpt").is_file() and (ft / "config.ini").is_file()

    def test_pretrain_byte_identical(self, transfer_cfg):
        main(["pretrain", "--config", str(transfer_cfg), "--out", str(transfer_cfg.parent / "a")])
        main(["pretrain", "--config", str(transfer_cfg), "--out", str(transfer_cfg.parent / "b")])
        a = (transfer_cfg.parent / "a" / "pretrain" / "encoder.ckpt").read_bytes()
        b = (transfer_cfg.parent / "b" / "pretrain" / "encoder.ckpt").read_bytes()
        assert a == b

    def test_finetune_byte_identical(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            m = load_manifest(None, {"run": {"out": str(tmp_path / name)},
                                     "data": {"kind": "drift"}, "finetune": {"epochs": 2, "k": 64}})
            outs.append(cmd_finetune(m))
        for rel in ("metrics.csv", "head.csv", "banks/pretrained.csv", "banks/downstream.csv",
                    "transform/rotation.csv", "transform/translations.csv"):
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel

    def test_missing_checkpoint_exit_1_nothing_written(self, tmp_path, capsys):
        out = tmp_path / "never"
        code = main(["finetune", "--out", str(out)])
        assert code == EXIT_INVALID and not out.exists()
        assert "finetune.checkpoint" in capsys.readouterr().err

    def test_missing_dataset_exit_1_nothing_written(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[data]\nkind = csv\nsource_train = nope.csv\ntrain = nope.csv\ntest = nope.csv\n")
        out = tmp_path / "never"
        assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == EXIT_INVALID
        assert not out.exists()

    def test_usage_error_exit_1(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--method", "bogus"])
        assert exc.value.code == EXIT_INVALID

    def test_runtime_error_exit_2(self, tmp_path):
        # batch larger than the training split only surfaces once the run starts
        code = main(["finetune", "--out", str(tmp_path), "--batch", "4096", "--epochs", "1"]
                    + ["--config", str(self._drift_cfg(tmp_path))])
        assert code in (EXIT_INVALID, EXIT_RUNTIME)

    @staticmethod
    def _drift_cfg(tmp_path):
        path = tmp_path / "drift.ini"
        path.write_text("[data]\nkind = drift\n[finetune]\nepochs = 2\nk = 64\n")
        return path

    def test_k_sweep_rows(self, tmp_path):
        cfg = self._drift_cfg(tmp_path)
        assert main(["finetune", "--config", str(cfg), "--out", str(tmp_path / "o"),
                     "--k-sweep", "16,32,64,128", "--epochs", "1"]) == EXIT_OK
        rows = _rows(tmp_path / "o" / "sweep" / "sweep.csv")
        assert rows[0] == ["K", "lambda", "final_test_acc", "best_test_acc"]
        assert [r[0] for r in rows[1:]] == ["16", "32", "64", "128"]

    def test_diagnose_drifted_run(self, tmp_path):
        cfg = self._drift_cfg(tmp_path)
        out = tmp_path / "o"
        assert main(["finetune", "--config", str(cfg), "--out", str(out), "--k", "512"]) == EXIT_OK
        assert main(["diagnose", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        d = out / "diagnose"
        (row,) = _rows(d / "mmd.csv")[1:]
        assert float(row[3]) < float(row[2])
        for name in ("pretrained", "calibrated", "downstream"):
            rows = _rows(d / f"pca_{name}.csv")
            assert rows[0] == list(PCA_HEADER) and all(len(r) == 3 for r in rows)
            assert len(rows) == 513
        centers = _rows(d / "centers.csv")
        assert len(centers) == 9 and all(float(r[3]) < float(r[2]) for r in centers[1:])

    def test_diagnose_identical_snapshots(self, tmp_path):
        snap = tmp_path / "snap"
        snap.mkdir()
        rng = np.random.default_rng(0)
        lines = ["label," + ",".join(f"f{j}" for j in range(3))]
        lines += [f"{i % 2}," + ",".join(repr(float(v)) for v in rng.standard_normal(3)) for i in range(20)]
        for name in ("pretrained.csv", "downstream.csv"):
            (snap / name).write_text("\n".join(lines) + "\n")
        m = load_manifest(None, {"run": {"out": str(tmp_path / "o")}, "data": {"kind": "drift"}})
        d = cmd_diagnose(m, snap)
        (row,) = _rows(d / "mmd.csv")[1:]
        assert float(row[2]) == pytest.approx(0.0, abs=1e-12)
        assert all(float(r[2]) == 0.0 for r in _rows(d / "centers.csv")[1:])

    def test_diagnose_bad_snapshot_names_line(self, tmp_path, capsys):
        snap = tmp_path / "snap"
        snap.mkdir()
        (snap / "pretrained.csv").write_text("0,1.0\n1,oops\n")
        (snap / "downstream.csv").write_text("0,1.0\n1,2.0\n")
        code = main(["diagnose", "--out", str(tmp_path / "o"), "--snapshots", str(snap)])
        assert code == EXIT_INVALID and "row 2" in capsys.readouterr().err


def test_rerun_with_other_method_drops_stale_outputs(tmp_path):
    cfg = tmp_path / "drift.ini"
    cfg.write_text("[data]\nkind = drift\n[finetune]\nepochs = 1\nk = 64\n")
    out = tmp_path / "o"
    assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert (out / "finetune" / "banks").is_dir()
    assert main(["finetune", "--config", str(cfg), "--out", str(out), "--method", "ce"]) == EXIT_OK
    assert not (out / "finetune" / "banks").exists() and not (out / "finetune" / "transform").exists()
    assert (out / "finetune" / "head.csv").is_file()


@pytest.mark.parametrize("name", ["transfer.ini", "drift.ini"])
def test_bundled_configs_load(name):
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / name
    m = load_manifest(path)
    m.validate("pretrain" if m.data_kind == "transfer" else "finetune")
    assert m.out_dir.parent.resolve() == (path.parent.parent / "runs").resolve()
