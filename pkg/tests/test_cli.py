"""Command-line surface: subcommands, exit codes, file outputs."""

import hashlib
import json
import os

import numpy as np
import pytest

from polmc import detection
from polmc.cli import main

CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs",
                      "example.json")

# Frozen from the first run of this implementation (seed 42, 2000 photons,
# bundled example config).  Guards against silent numerical drift; the
# hash is machine-and-library specific through libm, so regenerate it when
# the toolchain changes.
GOLDEN_SHA256 = "8e7ed94d4e73925625f05973ed69f8446c6d1439b1d1b86f33cde1adbcefeace"


def run_cli(*args):
    return main(list(args))


class TestSimulate:
    def test_golden_checksum_seed_42(self, tmp_path):
        out = tmp_path / "g.polg"
        rc = run_cli("simulate", "--config", CONFIG, "--photons", "2000",
                     "--seed", "42", "--out", str(out))
        assert rc == 0
        digest = hashlib.sha256(out.read_bytes()).hexdigest()
        assert digest == GOLDEN_SHA256
        meta = json.loads((tmp_path / "g.polg.json").read_text())
        assert meta["ledger"]["launched"] == 2000.0

    def test_missing_config_is_validation_error(self, tmp_path):
        rc = run_cli("simulate", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "x.polg"))
        assert rc == 2

    def test_missing_required_flag_is_usage_error(self):
        rc = run_cli("simulate", "--config", CONFIG)
        assert rc == 1

    def test_unknown_subcommand_is_usage_error(self):
        assert run_cli("frobnicate") == 1

    def test_zero_photons_is_validation_error(self, tmp_path):
        rc = run_cli("simulate", "--config", CONFIG, "--photons", "0",
                     "--out", str(tmp_path / "x.polg"))
        assert rc == 2


class TestMietable:
    def test_writes_csv_and_header(self, tmp_path):
        out = tmp_path / "table.csv"
        rc = run_cli("mietable", "--config", CONFIG, "--out", str(out))
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "theta_deg,re_s1,im_s1,re_s2,im_s2,s11,s12"
        assert len(lines) == 1 + 1801
        header = json.loads((tmp_path / "table.csv.json").read_text())
        for key in ("size_param", "q_sca", "q_ext", "g", "phase_norm"):
            assert key in header


class TestValidate:
    def test_normal_incidence_csv(self, tmp_path):
        out = tmp_path / "val.csv"
        rc = run_cli("validate", "--config", CONFIG, "--photons", "5000",
                     "--angles", "0", "--out", str(out))
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "theta_deg,R_theory,R_sim,sim_stderr"
        assert len(lines) == 2


class TestPlot:
    def make_grid(self, tmp_path, data=None):
        g = detection.DetectorGrid(n_radius=2, n_depth=2, dr=4.0, dz=4.0)
        if data is not None:
            g.data[:, :, 0] = data
            g.data[:, :, 1] = data
            g.data[:, :, 2] = data  # fully co-polarized
        path = tmp_path / "g.polg"
        detection.write_polg(g, path)
        return path

    def test_zero_grid_uniform_black(self, tmp_path):
        src = self.make_grid(tmp_path)
        out = tmp_path / "img.pgm"
        assert run_cli("plot", "--grid", str(src), "--out", str(out)) == 0
        blob = out.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert blob[-4:] == b"\x00" * 4

    def test_known_grid_hand_mapped(self, tmp_path):
        # p_xx = 2 sum_w per bin: weights (0, 1, 2, 4) -> pixels 0, 64, 128, 255.
        src = self.make_grid(tmp_path, data=np.array([[0.0, 1.0], [2.0, 4.0]]))
        out = tmp_path / "img.pgm"
        assert run_cli("plot", "--grid", str(src), "--channel", "p_xx",
                       "--out", str(out)) == 0
        assert out.read_bytes()[-4:] == bytes([0, 64, 128, 255])
        meta = json.loads((tmp_path / "img.pgm.json").read_text())
        assert meta["channel"] == "p_xx"
        assert meta["max"] == 8.0

    def test_replot_bit_identical(self, tmp_path):
        src = self.make_grid(tmp_path, data=np.array([[0.0, 1.0], [2.0, 3.0]]))
        out1 = tmp_path / "a.pgm"
        out2 = tmp_path / "b.pgm"
        run_cli("plot", "--grid", str(src), "--out", str(out1))
        run_cli("plot", "--grid", str(src), "--out", str(out2))
        assert out1.read_bytes() == out2.read_bytes()

    def test_corrupt_grid_rejected(self, tmp_path):
        bad = tmp_path / "bad.polg"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = run_cli("plot", "--grid", str(bad), "--out",
                     str(tmp_path / "x.pgm"))
        assert rc == 2


class TestPipeline:
    def test_dry_run_touches_nothing(self, tmp_path):
        outdir = tmp_path / "pipe"
        rc = run_cli("pipeline", "--dry-run", "--outdir", str(outdir))
        assert rc == 0
        assert not outdir.exists()

    def test_reduced_size_pipeline_exits_zero(self, tmp_path, capsys):
        # CI-scale stand-in for the full tiny pipeline wall-clock budget.
        outdir = tmp_path / "pipe"
        rc = run_cli("pipeline", "--samples", "12", "--photons", "800",
                     "--steps", "120", "--batch", "4", "--seed", "5",
                     "--outdir", str(outdir))
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert "held_out_mae" in out
        assert (outdir / "sweep.pold").exists()
        assert (outdir / "model.poln").exists()
        assert (outdir / "loss_curves.csv").exists()

    def test_atomic_write_leaves_no_partial_file(self, tmp_path):
        # The writers stage into <name>.tmp and rename; a failure mid-write
        # must leave neither the target nor the temp file behind.
        from polmc.cli import _write_atomic_bytes
        target = tmp_path / "out.bin"
        with pytest.raises(TypeError):
            _write_atomic_bytes(target, "not-bytes")  # write() raises
        assert not target.exists()
        assert not (tmp_path / "out.bin.tmp").exists()

    def test_atomic_write_happy_path(self, tmp_path):
        from polmc.cli import _write_atomic_bytes
        target = tmp_path / "ok.bin"
        _write_atomic_bytes(target, b"payload")
        assert target.read_bytes() == b"payload"
        assert not (tmp_path / "ok.bin.tmp").exists()


class TestInferChain:
    def test_train_then_infer_roundtrip(self, tmp_path):
        # Tiny synthetic dataset through the real file formats.
        from polmc import dataset as ds
        rng = np.random.default_rng(1)
        samples = [ds.TrainingSample(features=rng.normal(size=16),
                                     target=np.array([1.2 + 0.01 * i]),
                                     seed=i, config_hash=0)
                   for i in range(16)]
        data = ds.Dataset(samples, ("n_particle",))
        pold = tmp_path / "d.pold"
        ds.write_pold(data, pold)
        model = tmp_path / "m.poln"
        rc = run_cli("train", "--dataset", str(pold), "--steps", "50",
                     "--batch", "8", "--seed", "0", "--width", "8",
                     "--blocks", "1", "--latent", "4",
                     "--curves", str(tmp_path / "c.csv"),
                     "--out", str(model))
        assert rc == 0
        assert model.exists()
        curves = (tmp_path / "c.csv").read_text().strip().split("\n")
        assert curves[0] == "step,train_loss,val_loss"
        assert len(curves) == 51

        # Close the loop: infer on a grid whose features have the trained
        # geometry (16 = 4 channels x 2 x 2).
        grid = detection.DetectorGrid(n_radius=2, n_depth=2, dr=4.0, dz=4.0)
        grid.data[0, 0, 0] = 1.0
        grid.data[0, 0, 1] = 1.0
        gpath = tmp_path / "g.polg"
        detection.write_polg(grid, gpath)
        rc = run_cli("infer", "--model", str(model), "--grid", str(gpath),
                     "--launched", "10", "--feature-shape", "2x2")
        assert rc == 0
