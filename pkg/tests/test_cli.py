import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest

from handforest import cli, synth, workflows
from handforest.modelio import load_model
from handforest.normals import NormalForest


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """One small end-to-end run through every subcommand."""
    d = tmp_path_factory.mktemp("cli")
    paths = SimpleNamespace(root=d, data=d / "data", model=d / "normals.hcrf",
                            bundle=d / "bundle", poses=d / "poses.txt", report=d / "report",
                            bench=d / "bench.csv")
    codes = {
        "synth-gen": run("synth-gen", "--count", 6, "--seed", 3, "--out", paths.data,
                         "--roll-range", 0),
        "train-normals": run("train-normals", "--data", paths.data, "--out", paths.model,
                             "--depth", 8, "--points-per-frame", 2000),
        "train-pose": run("train-pose", "--data", paths.data, "--normal-model", paths.model,
                          "--out", paths.bundle, "--trees", 1, "--depth", 6, "--seed", 2),
        "estimate": run("estimate", "--bundle", paths.bundle, "--input", paths.data,
                        "--out", paths.poses, "--points-per-stage", 64),
        "evaluate": run("evaluate", "--pred", paths.poses, "--gt", paths.data, "--out",
                        paths.report, "--thresholds", "10:80:10", "--svg"),
        "bench-normals": run("bench-normals", "--data", paths.data, "--normal-model",
                             paths.model, "--out", paths.bench, "--repeats", 2),
    }
    paths.codes = codes
    return paths


class TestEndToEnd:
    def test_all_succeed(self, flow):
        assert flow.codes == {k: cli.EXIT_OK for k in flow.codes}

    def test_dataset(self, flow):
        recs = synth.read_manifest(flow.data)
        assert len(recs) == 6
        rolls = [r.params.view()[2] for r in recs]
        np.testing.assert_allclose(rolls, 0.0, atol=1e-9)

    def test_normal_model(self, flow):
        assert isinstance(load_model(flow.model), NormalForest)

    def test_poses(self, flow):
        ids, poses, _ = workflows.read_poses(flow.poses)
        assert len(ids) == 6
        assert all(np.all(np.isfinite(p.joints)) for p in poses)

    def test_report(self, flow):
        rep = json.loads((flow.report / "report.json").read_text())
        assert rep["n_frames"] == 6
        assert rep["thresholds_mm"] == [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]
        assert np.all(np.diff(rep["success"]) >= 0)
        assert list(flow.report.glob("*.png"))
        assert list(flow.report.glob("*.svg"))

    def test_bench_table(self, flow):
        rows = list(csv.reader(open(flow.bench)))
        assert rows[0][:6] == ["frame_id", "n_points", "pca_ms", "forest_ms", "pca_error_deg",
                               "forest_error_deg"]
        body = [r for r in rows[1:] if not r[0].startswith("#")]
        assert len(body) == 6
        assert all(float(r[4]) >= 0 and float(r[5]) >= 0 for r in body)
        assert rows[-1][0] == "#speedup"


class TestExitCodes:
    def test_no_subcommand(self):
        assert run() == cli.EXIT_USAGE

    def test_unknown_flag(self, tmp_path):
        assert run("synth-gen", "--count", 1, "--out", tmp_path, "--bogus") == cli.EXIT_USAGE

    def test_missing_required(self, tmp_path):
        assert run("synth-gen", "--out", tmp_path) == cli.EXIT_USAGE

    def test_bad_value(self, tmp_path):
        assert run("synth-gen", "--count", -2, "--out", tmp_path) == cli.EXIT_USAGE

    def test_bad_thresholds(self, flow, tmp_path):
        assert run("evaluate", "--pred", flow.poses, "--gt", flow.data, "--out", tmp_path,
                   "--thresholds", "10:80") == cli.EXIT_USAGE

    def test_bad_feature(self, flow, tmp_path):
        assert run("train-pose", "--data", flow.data, "--normal-model", flow.model,
                   "--out", tmp_path / "b", "--feature", "curvature") == cli.EXIT_USAGE

    def test_missing_dataset(self, flow, tmp_path):
        assert run("train-normals", "--data", tmp_path / "none", "--out",
                   tmp_path / "m") == cli.EXIT_DATA

    def test_unknown_frames(self, flow, tmp_path):
        lines = flow.poses.read_text().splitlines()
        lines[1] = "zz" + lines[1]
        bad = tmp_path / "bad.txt"
        bad.write_text("\n".join(lines) + "\n")
        assert run("evaluate", "--pred", bad, "--gt", flow.data, "--out",
                   tmp_path / "r") == cli.EXIT_DATA

    def test_corrupt_model(self, flow, tmp_path):
        bad = tmp_path / "bad.hcrf"
        bad.write_bytes(b"not a model")
        assert run("bench-normals", "--data", flow.data, "--normal-model", bad,
                   "--out", tmp_path / "t.csv") == cli.EXIT_MODEL

    def test_wrong_model_kind(self, flow, tmp_path):
        stage = next(flow.bundle.glob("*.hcrf"))
        assert run("bench-normals", "--data", flow.data, "--normal-model", stage,
                   "--out", tmp_path / "t.csv") == cli.EXIT_MODEL

    def test_missing_bundle(self, flow, tmp_path):
        assert run("estimate", "--bundle", tmp_path / "nothing", "--input", flow.data,
                   "--out", tmp_path / "p.txt") == cli.EXIT_MODEL


class TestConfigPrecedence:
    def parse(self, *argv):
        args = cli.build_parser().parse_args([str(a) for a in argv])
        return cli.options_dict(cli.resolve(args))

    def test_defaults(self):
        o = self.parse("synth-gen", "--count", 2, "--out", "x")
        assert o["seed"] == 0
        assert o["pitch_range"] == 45.0

    def test_config_over_defaults(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nseed = 7\npitch-range=30\ncount=4\nout=y\n")
        o = self.parse("--config", cfg, "synth-gen")
        assert (o["seed"], o["pitch_range"], o["count"], o["out"]) == (7, 30.0, 4, "y")

    def test_flags_over_config(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("seed=7\ncount=4\nout=y\n")
        o = self.parse("synth-gen", "--config", cfg, "--seed", 9)
        assert (o["seed"], o["count"]) == (9, 4)

    def test_bool_option(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("svg=yes\n")
        o = self.parse("evaluate", "--config", cfg, "--pred", "a", "--gt", "b", "--out", "c")
        assert o["svg"] is True

    def test_malformed_config(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("seed 7\n")
        assert run("--config", cfg, "synth-gen", "--count", 1, "--out", tmp_path) == \
            cli.EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("count=-3\n")
        assert run("--config", cfg, "synth-gen", "--out", tmp_path) == cli.EXIT_USAGE
