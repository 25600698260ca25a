import json
import math

import numpy as np
import pytest

from vesseltrack.cli import main
from vesseltrack.labeling import read_ads
from vesseltrack.network import ArchConfig, Weights, save_weights
from vesseltrack.tree import CenterlineTree, read_actl, read_xyzr, write_actl
from vesseltrack.volume import read_avol


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small phantom case shared by the CLI tests (depth 1, thin root)."""
    root = tmp_path_factory.mktemp("cli")
    tree = root / "ref.actl"
    volume = root / "ref.avol"
    code = main(
        [
            "phantom",
            "--out", str(tree),
            "--volume", str(volume),
            "--seed", "1",
            "--depth", "1",
            "--segment-lengths", "6,9",
            "--root-radius", "1.5",
        ]
    )
    assert code == 0
    return {"dir": root, "tree": tree, "volume": volume}


class TestPhantomCommand:
    def test_outputs_are_readable(self, workspace, capsys):
        tree = read_actl(workspace["tree"])
        assert tree.n_points > 20
        assert len(np.unique(tree.segment_ids)) == 3
        volume = read_avol(workspace["volume"])
        assert volume.values.max() > 0.5

    def test_deterministic_across_runs(self, workspace, tmp_path):
        out = tmp_path / "again.actl"
        code = main(
            [
                "phantom",
                "--out", str(out),
                "--seed", "1",
                "--depth", "1",
                "--segment-lengths", "6,9",
                "--root-radius", "1.5",
            ]
        )
        assert code == 0
        assert out.read_bytes() == workspace["tree"].read_bytes()

    def test_stenosis_narrows_radius(self, workspace, tmp_path):
        out = tmp_path / "sten.actl"
        code = main(
            [
                "phantom",
                "--out", str(out),
                "--seed", "1",
                "--depth", "1",
                "--segment-lengths", "6,9",
                "--root-radius", "1.5",
                "--stenosis", "5:0.4:1.5",
            ]
        )
        assert code == 0
        plain = read_actl(workspace["tree"])
        narrowed = read_actl(out)
        assert narrowed.radii[5] < plain.radii[5]
        assert np.array_equal(narrowed.positions, plain.positions)

    def test_malformed_stenosis_is_usage_error(self, tmp_path, capsys):
        code = main(["phantom", "--out", str(tmp_path / "x.actl"), "--stenosis", "5:0.4"])
        assert code == 2
        assert "INDEX:SEVERITY:EXTENT" in capsys.readouterr().err

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["phantom"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def dataset(workspace):
    directions = workspace["dir"] / "dir.ads"
    stops = workspace["dir"] / "stop.ads"
    code = main(
        [
            "dataset",
            "--tree", str(workspace["tree"]),
            "--volume", str(workspace["volume"]),
            "--directions", str(directions),
            "--stops", str(stops),
            "--grid-size", "100",
            "--stops-per-endpoint", "2",
            "--seed", "3",
        ]
    )
    assert code == 0
    return {"directions": directions, "stops": stops}


class TestDatasetCommand:
    def test_files_load(self, dataset):
        ads = read_ads(dataset["directions"])
        assert ads.kind == "direction"
        assert ads.n_directions == 100
        assert len(ads.flags) > 0
        stops = read_ads(dataset["stops"])
        assert stops.kind == "stop"
        assert len(stops.flags) > 0

    def test_mismatched_case_lists_exit_2(self, workspace, tmp_path):
        code = main(
            [
                "dataset",
                "--tree", str(workspace["tree"]),
                "--tree", str(workspace["tree"]),
                "--volume", str(workspace["volume"]),
                "--directions", str(tmp_path / "d.ads"),
                "--stops", str(tmp_path / "s.ads"),
            ]
        )
        assert code == 2


class TestForwardCommand:
    def make_weights(self, path, n_directions=100, variant="dbc", patch_size=19):
        arch = ArchConfig(
            patch_size=patch_size,
            channels=2,
            n_directions=n_directions,
            hidden=4,
            variant=variant,
        )
        save_weights(path, Weights.zeros(arch))

    def test_direction_forward_with_loss(self, dataset, tmp_path, capsys):
        awt = tmp_path / "dbc.awt"
        self.make_weights(awt)
        code = main(
            [
                "forward",
                "--weights", str(awt),
                "--dataset", str(dataset["directions"]),
                "--index", "0",
                "--with-loss",
            ]
        )
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["kind"] == "direction"
        assert len(out["direction"]) == 100
        assert np.allclose(out["direction"], 0.01)
        assert out["bifurcation_prob"] == 0.5
        # Zero weights: cross entropy is ln(100) against any unit-sum label,
        # and the bifurcation term is ln(2) at probability one half.
        assert abs(out["ce"] - math.log(100.0)) < 1e-5
        assert abs(out["bce"] - math.log(2.0)) < 1e-12
        assert abs(out["loss"] - (out["ce"] + 5.0 * out["bce"])) < 1e-12

    def test_stop_forward(self, dataset, tmp_path, capsys):
        awt = tmp_path / "stc.awt"
        self.make_weights(awt, variant="stc")
        code = main(
            [
                "forward",
                "--weights", str(awt),
                "--dataset", str(dataset["stops"]),
                "--index", "0",
                "--with-loss",
            ]
        )
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["kind"] == "stop"
        assert out["stop_prob"] == 0.5
        assert abs(out["loss"] - math.log(2.0)) < 1e-12

    def test_grid_mismatch_exits_4(self, dataset, tmp_path):
        awt = tmp_path / "wide.awt"
        self.make_weights(awt, n_directions=120)
        code = main(
            [
                "forward",
                "--weights", str(awt),
                "--dataset", str(dataset["directions"]),
                "--index", "0",
            ]
        )
        assert code == 4

    def test_patch_size_mismatch_exits_4(self, dataset, tmp_path):
        awt = tmp_path / "small.awt"
        self.make_weights(awt, patch_size=9)
        code = main(
            [
                "forward",
                "--weights", str(awt),
                "--dataset", str(dataset["directions"]),
                "--index", "0",
            ]
        )
        assert code == 4

    def test_index_out_of_range_exits_2(self, dataset, tmp_path):
        awt = tmp_path / "dbc.awt"
        self.make_weights(awt)
        code = main(
            [
                "forward",
                "--weights", str(awt),
                "--dataset", str(dataset["directions"]),
                "--index", "100000",
            ]
        )
        assert code == 2


class TestTrackAndEval:
    def seed_arg(self, tree):
        p = tree.positions[tree.ostia[0]]
        return f"{p[0]},{p[1]},{p[2]}"

    def test_oracle_track_eval_roundtrip(self, workspace, tmp_path, capsys):
        ref = read_actl(workspace["tree"])
        tracked_path = tmp_path / "trk.actl"
        xyzr_path = tmp_path / "trk.xyzr"
        diag_path = tmp_path / "diag.jsonl"
        code = main(
            [
                "track",
                "--oracle", str(workspace["tree"]),
                "--seeds", self.seed_arg(ref),
                "--out", str(tracked_path),
                "--xyzr", str(xyzr_path),
                "--diagnostics", str(diag_path),
                "--grid-size", "500",
            ]
        )
        assert code == 0
        assert "tracked:" in capsys.readouterr().out
        tracked = read_actl(tracked_path)
        assert tracked.n_points > 10
        assert read_xyzr(xyzr_path).n_points == tracked.n_points
        rows = [json.loads(line) for line in diag_path.read_text().splitlines()]
        assert len(rows) == tracked.n_points
        assert {"entropy", "stop_prob", "bifurcation_prob"} <= set(rows[0])

        report_path = tmp_path / "report.json"
        code = main(
            [
                "eval",
                "--pair", str(workspace["tree"]), str(tracked_path),
                "--pair", str(workspace["tree"]), str(workspace["tree"]),
                "--json", str(report_path),
            ]
        )
        assert code == 0
        table = capsys.readouterr().out
        assert table.splitlines()[0].split()[:5] == ["case", "OV", "OF", "OT", "AI"]
        assert "mean" in table
        report = json.loads(report_path.read_text())
        tracked_row, self_row = report["cases"]
        assert tracked_row["OV"] > 0.85
        assert tracked_row["AI"] < 0.3
        assert self_row["OV"] == 1.0
        assert self_row["AI"] == 0.0

    def test_eval_handles_unmatched_case(self, workspace, tmp_path):
        far = CenterlineTree(
            positions=np.array([[200.0, 200.0, 200.0], [200.0, 200.0, 201.0]]),
            radii=np.array([1.0, 1.0]),
            segment_ids=np.zeros(2, np.int64),
            parent_ids=np.array([-1, 0], np.int64),
        )
        far_path = tmp_path / "far.actl"
        write_actl(far_path, far)
        report_path = tmp_path / "far.json"
        code = main(
            [
                "eval",
                "--pair", str(workspace["tree"]), str(far_path),
                "--json", str(report_path),
            ]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["cases"][0]["AI"] is None
        assert report["cases"][0]["OV"] == 0.0

    def test_track_without_model_exits_2(self, workspace, tmp_path, capsys):
        code = main(
            [
                "track",
                "--seeds", "0,0,0",
                "--out", str(tmp_path / "x.actl"),
            ]
        )
        assert code == 2
        assert "--oracle" in capsys.readouterr().err

    def test_track_missing_file_exits_3(self, tmp_path):
        code = main(
            [
                "track",
                "--oracle", str(tmp_path / "nope.actl"),
                "--seeds", "0,0,0",
                "--out", str(tmp_path / "x.actl"),
            ]
        )
        assert code == 3

    def test_eval_corrupt_file_exits_3(self, workspace, tmp_path):
        bad = tmp_path / "bad.actl"
        bad.write_text("not a centerline file\n")
        code = main(["eval", "--pair", str(workspace["tree"]), str(bad)])
        assert code == 3

    def test_config_file_precedence(self, workspace, tmp_path, capsys):
        ref = read_actl(workspace["tree"])
        config = tmp_path / "track.cfg"
        config.write_text(
            "# tracking overrides\n"
            "max_points = 7\n"
            "step_length = 0.8\n"
            "bogus_key = 1\n"
        )
        out_file = tmp_path / "file.actl"
        code = main(
            [
                "track",
                "--oracle", str(workspace["tree"]),
                "--seeds", self.seed_arg(ref),
                "--out", str(out_file),
                "--grid-size", "500",
                "--config", str(config),
            ]
        )
        assert code == 0
        assert "bogus_key" in capsys.readouterr().err
        from_file = read_actl(out_file)
        assert from_file.n_points == 7  # file beats the built-in default
        child = np.flatnonzero(from_file.parent_ids >= 0)
        steps = np.linalg.norm(
            from_file.positions[child] - from_file.positions[from_file.parent_ids[child]],
            axis=1,
        )
        assert np.allclose(steps, 0.8, atol=1e-9)

        out_flag = tmp_path / "flag.actl"
        code = main(
            [
                "track",
                "--oracle", str(workspace["tree"]),
                "--seeds", self.seed_arg(ref),
                "--out", str(out_flag),
                "--grid-size", "500",
                "--config", str(config),
                "--max-points", "5",
            ]
        )
        assert code == 0
        assert read_actl(out_flag).n_points == 5  # flag beats the file

    def test_malformed_config_exits_2(self, workspace, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("step length 0.8\n")
        code = main(
            [
                "track",
                "--oracle", str(workspace["tree"]),
                "--seeds", "0,0,0",
                "--out", str(tmp_path / "x.actl"),
                "--config", str(config),
            ]
        )
        assert code == 2


class TestRenderCommand:
    def test_writes_pgm(self, workspace, tmp_path, capsys):
        out = tmp_path / "mip.pgm"
        code = main(["render", "--volume", str(workspace["volume"]), "--out", str(out)])
        assert code == 0
        data = out.read_bytes()
        assert data.startswith(b"P5")

    def test_bad_axis_exits_2(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(
                [
                    "render",
                    "--volume", str(workspace["volume"]),
                    "--out", str(tmp_path / "m.pgm"),
                    "--axis", "w",
                ]
            )
        assert exc.value.code == 2
