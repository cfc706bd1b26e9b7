import json
import math

import numpy as np
import pytest

from airmc.dataio import (
    gen_mask,
    load_matrix,
    save_matrix,
    synth_blocks,
    synth_lowrank,
    trajectory_csv_text,
    write_outputs,
)
from airmc.errors import ConfigError, DataFormatError
from airmc.linalg import svd
from airmc.metrics import EvalResult
from airmc.training import TrajectoryLog, TrajectoryRecord


class TestRandomMask:
    def test_rate_zero_observes_everything(self):
        mask = gen_mask("random", 4, 5, rate=0.0, seed=0)
        assert mask.o == 20

    def test_exact_missing_count(self):
        mask = gen_mask("random", 100, 100, rate=0.3, seed=123)
        assert mask.o == 10000 - 3000

    def test_floor_rule(self):
        mask = gen_mask("random", 3, 3, rate=0.5, seed=0)
        assert mask.o == 9 - int(math.floor(0.5 * 9))

    def test_deterministic(self):
        a = gen_mask("random", 10, 10, rate=0.4, seed=9)
        b = gen_mask("random", 10, 10, rate=0.4, seed=9)
        assert a.observed_pairs() == b.observed_pairs()

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            gen_mask("random", 3, 3, rate=1.0, seed=0)


class TestPatchMask:
    def test_observed_count(self):
        mask = gen_mask("patch", 240, 240, top=10, left=10, height=50, width=50)
        assert mask.o == 240 * 240 - 2500

    def test_patch_outside_rejected(self):
        with pytest.raises(ConfigError):
            gen_mask("patch", 10, 10, top=5, left=5, height=6, width=2)

    def test_full_patch_rejected(self):
        with pytest.raises(ConfigError):
            gen_mask("patch", 4, 4, top=0, left=0, height=4, width=4)


class TestFileMask:
    def test_texture_file_roundtrip(self, tmp_path):
        grid = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        path = tmp_path / "mask.csv"
        save_matrix(path, grid)
        mask = gen_mask("texture", 2, 3, path=str(path))
        assert mask.observed_pairs() == [(0, 0), (0, 2), (1, 1), (1, 2)]

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "mask.csv"
        save_matrix(path, np.ones((2, 2)))
        with pytest.raises(ConfigError):
            gen_mask("file", 3, 3, path=str(path))

    def test_non_binary_rejected(self, tmp_path):
        path = tmp_path / "mask.csv"
        save_matrix(path, np.array([[0.5, 1.0]]))
        with pytest.raises(ConfigError):
            gen_mask("texture", 1, 2, path=str(path))


class TestSynthLowrank:
    def test_numerical_rank(self):
        x = synth_lowrank(100, 100, 5, seed=0)
        s = svd(x).sigma
        assert s[5] <= 1e-10 * s[0]

    def test_unit_max_entry(self):
        x = synth_lowrank(30, 20, 3, seed=1)
        assert np.max(np.abs(x)) == pytest.approx(1.0)

    def test_deterministic(self):
        assert np.array_equal(synth_lowrank(8, 9, 2, seed=4), synth_lowrank(8, 9, 2, seed=4))

    def test_full_rank_case(self):
        x = synth_lowrank(6, 6, 6, seed=2)
        assert svd(x).sigma[-1] > 1e-8


class TestSynthBlocks:
    def test_single_block_constant(self):
        x = synth_blocks(6, 4, 1, 1, 5, seed=0)
        assert np.unique(x).size == 1

    def test_level_count(self):
        x = synth_blocks(8, 8, 2, 2, 2, seed=3)
        assert np.unique(x).size <= 4
        assert set(np.unique(x)).issubset({0.0, 1.0})

    def test_rank_bounded_by_grid(self):
        x = synth_blocks(60, 80, 6, 8, 5, seed=21)
        s = svd(x).sigma
        assert s[min(6, 8)] <= 1e-10 * max(s[0], 1e-300)

    def test_grid_must_divide(self):
        with pytest.raises(ConfigError):
            synth_blocks(10, 10, 3, 2, 2, seed=0)


class TestCsvRoundTrip:
    def test_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 7))
        path = tmp_path / "m.csv"
        save_matrix(path, x)
        back = load_matrix(path)
        assert np.max(np.abs(back - x)) <= 1e-12
        assert np.array_equal(back, x)  # repr round-trip is exact

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_matrix(path)

    def test_non_numeric_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3,x\n")
        with pytest.raises(DataFormatError, match=":2"):
            load_matrix(path)

    def test_nan_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,nan\n")
        with pytest.raises(DataFormatError):
            load_matrix(path)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataFormatError):
            load_matrix(path)


class TestPgm:
    def test_basic_parse_and_scale(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_text("P2\n# comment\n3 2\n255\n0 128 255\n64 32 16\n")
        x = load_matrix(path, "pgm")
        assert x.shape == (2, 3)
        assert x[0, 2] == 1.0
        assert x[0, 1] == pytest.approx(128 / 255)

    def test_roundtrip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.random((4, 6))
        path = tmp_path / "img.pgm"
        save_matrix(path, x, "pgm")
        back = load_matrix(path, "pgm")
        assert np.max(np.abs(back - x)) <= 0.5 / 255 + 1e-12

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_text("P5\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(DataFormatError, match="magic"):
            load_matrix(path, "pgm")

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_text("P2\n2 2\n255\n0 0 0\n")
        with pytest.raises(DataFormatError):
            load_matrix(path, "pgm")

    def test_pixel_out_of_range_names_line(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_text("P2\n2 1\n255\n0 256\n")
        with pytest.raises(DataFormatError, match=":4"):
            load_matrix(path, "pgm")


def make_log(n_records, sigmas=0):
    log = TrajectoryLog()
    for i in range(n_records):
        log.records.append(
            TrajectoryRecord(
                iteration=i * 10,
                loss=1.0 / (i + 1),
                fidelity=0.5 / (i + 1),
                reg_row=0.1,
                reg_col=0.2,
                mse_obs=0.3,
                mse_unobs=math.nan,
                sigmas=tuple(float(k) for k in range(sigmas, 0, -1)),
            )
        )
    return log


class TestOutputs:
    def test_empty_log_header_only(self):
        text = trajectory_csv_text(TrajectoryLog())
        assert text == "iter,loss,fidelity,reg_row,reg_col,mse_obs,mse_unobs\n"

    def test_no_sigma_columns_when_untracked(self):
        text = trajectory_csv_text(make_log(2, sigmas=0))
        assert "sigma" not in text
        assert len(text.strip().splitlines()) == 3

    def test_sigma_header(self):
        text = trajectory_csv_text(make_log(1, sigmas=3))
        assert text.splitlines()[0].endswith("sigma_1,sigma_2,sigma_3")

    def test_json_roundtrip_exact(self, tmp_path):
        result = EvalResult(
            nmae=0.1234567890123,
            nmae_variant="absolute",
            mse_observed=1e-7,
            mse_unobserved=2.5e-3,
            iterations=321,
            stop_reason="max_iters",
            config={"seed": 3},
        )
        json_path = tmp_path / "out.json"
        csv_path = tmp_path / "traj.csv"
        write_outputs(result, make_log(3), json_path=str(json_path),
                      trajectory_path=str(csv_path))
        payload = json.loads(json_path.read_text())
        assert payload["nmae"] == result.nmae
        assert payload["mse_observed"] == result.mse_observed
        assert payload["mse_unobserved"] == result.mse_unobserved
        assert payload["iterations"] == 321
        assert payload["stop_reason"] == "max_iters"
        assert payload["config"] == {"seed": 3}
        assert csv_path.read_text().startswith("iter,loss,")

    def test_snapshot_files(self, tmp_path):
        log = make_log(1)
        log.snapshots.append((40, "row", np.eye(2)))
        log.snapshots.append((40, "col", np.ones((3, 3))))
        result = EvalResult(nmae=None, nmae_variant="absolute", mse_observed=0.0,
                            mse_unobserved=None, iterations=1, stop_reason="max_iters",
                            config={})
        write_outputs(result, log, snapshot_dir=str(tmp_path))
        assert (tmp_path / "A_row_40.csv").exists()
        assert (tmp_path / "A_col_40.csv").exists()
        np.testing.assert_array_equal(load_matrix(tmp_path / "A_row_40.csv"), np.eye(2))
