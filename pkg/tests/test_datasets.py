import numpy as np
import pytest

from gatedfilter.datasets import (DataFormatError, Trajectory,
                                  TrajectoryDataset, load_csv, save_csv,
                                  split_tags)


def make_traj(rng, K=5, d_x=2, d_z=2):
    return Trajectory(rng.standard_normal((K + 1, d_x)),
                      rng.standard_normal((K + 1, d_z)))


class TestRoundTrip:
    def test_bitwise_equal(self, tmp_path):
        rng = np.random.default_rng(0)
        trajs = [make_traj(rng) for _ in range(3)]
        path = tmp_path / "data.csv"
        save_csv(path, trajs)
        loaded = load_csv(path)
        assert len(loaded) == 3
        for a, b in zip(trajs, loaded):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.z, b.z)

    def test_extreme_values_roundtrip(self, tmp_path):
        x = np.array([[1e-300, 1 + 2**-52], [np.pi, -1e300]])
        z = np.array([[2**-1074, 0.1], [-0.0, 3.0]])
        path = tmp_path / "data.csv"
        save_csv(path, [Trajectory(x, z)])
        out = load_csv(path)[0]
        assert np.array_equal(out.x, x)
        assert np.array_equal(out.z, z)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert load_csv(path) == []

    def test_save_empty(self, tmp_path):
        path = tmp_path / "none.csv"
        save_csv(path, [])
        assert load_csv(path) == []

    def test_lf_line_endings(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "data.csv"
        save_csv(path, [make_traj(rng)])
        raw = path.read_bytes()
        assert b"\r" not in raw


class TestFixture:
    def test_known_values(self, tmp_path):
        text = ("traj_id,k,x1,x2,z1,z2\n"
                "0,0,1,2,0.5,0.25\n"
                "0,1,3,4,0.125,8\n"
                "0,2,5,6,7,9\n")
        path = tmp_path / "fixture.csv"
        path.write_text(text)
        (traj,) = load_csv(path)
        assert traj.K == 2
        assert np.array_equal(traj.x, [[1, 2], [3, 4], [5, 6]])
        assert np.array_equal(traj.z, [[0.5, 0.25], [0.125, 8], [7, 9]])


class TestErrors:
    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,k,x1,z1\n0,0,1.0,2.0\n0,1,oops,2.0\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_csv(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,k,x1,z1\n0,0,1.0\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,k,x1,z1\n")
        with pytest.raises(DataFormatError, match="line 1"):
            load_csv(path)

    def test_inconsistent_horizon(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,k,x1,z1\n"
                        "0,0,1,1\n0,1,1,1\n"
                        "1,0,1,1\n1,1,1,1\n1,2,1,1\n")
        with pytest.raises(DataFormatError, match="inconsistent K"):
            load_csv(path)

    def test_non_contiguous_time(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,k,x1,z1\n0,0,1,1\n0,2,1,1\n")
        with pytest.raises(DataFormatError, match="contiguous"):
            load_csv(path)

    def test_unsorted_rows(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("traj_id,k,x1,z1\n0,1,1,1\n0,0,1,1\n")
        with pytest.raises(DataFormatError, match="sorted"):
            load_csv(path)


class TestSplits:
    def test_fraction_rounding(self):
        tags = split_tags(10, [0.7, 0.2, 0.1])
        assert tags.count("train") == 7
        assert tags.count("val") == 2
        assert tags.count("test") == 1

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            split_tags(10, [0.5, 0.2, 0.2])

    def test_dataset_split_access(self):
        rng = np.random.default_rng(2)
        items = [make_traj(rng) for _ in range(5)]
        ds = TrajectoryDataset(items, ["train", "train", "val", "test", "test"])
        assert len(ds.split("train")) == 2
        assert len(ds.split("val")) == 1
        assert ds.counts() == {"train": 2, "val": 1, "test": 2}

    def test_mixed_horizons_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="share K"):
            TrajectoryDataset([make_traj(rng, K=5), make_traj(rng, K=6)])


class TestTrajectory:
    def test_row_mismatch_rejected(self):
        with pytest.raises(ValueError, match="rows"):
            Trajectory(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_nonfinite_rejected(self):
        x = np.zeros((3, 2))
        x[1, 1] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            Trajectory(x, np.zeros((3, 2)))
