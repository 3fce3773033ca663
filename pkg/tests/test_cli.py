import json
import math
import os

import numpy as np

from porodiff import cli, geometry as geo


def run_cli(tmp_path, command, config, out="out", extra=()):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    outdir = tmp_path / out
    code = cli.main([command, "--config", str(cfg_path),
                     "--out", str(outdir), *extra])
    return code, outdir


DISC = {"shape": "disc", "center": [0.5, 0.5], "radius": 0.25}


class TestConfigHandling:
    def test_unknown_top_level_key(self, tmp_path):
        code, _ = run_cli(tmp_path, "mesh",
                          {"geometry": {"inclusion": DISC, "h": 0.1},
                           "bogus": 1})
        assert code == cli.EXIT_CONFIG

    def test_unknown_nested_key(self, tmp_path):
        code, _ = run_cli(tmp_path, "mesh",
                          {"geometry": {"inclusion": DISC, "h": 0.1,
                                        "oops": 2}})
        assert code == cli.EXIT_CONFIG

    def test_invalid_geometry_exit_2(self, tmp_path):
        bad = {"shape": "disc", "center": [0.5, 0.5], "radius": 0.6}
        code, _ = run_cli(tmp_path, "cell-tensor",
                          {"geometry": {"inclusion": bad, "h": 0.05}})
        assert code == cli.EXIT_CONFIG

    def test_defaults_materialized_in_manifest(self, tmp_path):
        code, outdir = run_cli(tmp_path, "mesh",
                               {"geometry": {"inclusion": DISC, "h": 0.1}})
        assert code == 0
        manifest = json.loads((outdir / "manifest.json").read_text())
        assert manifest["config"]["geometry"]["h"] == 0.1
        assert "fingerprint" in manifest
        assert manifest["command"] == "mesh"


class TestCommands:
    def test_cell_tensor_artifact(self, tmp_path):
        code, outdir = run_cli(
            tmp_path, "cell-tensor",
            {"geometry": {"inclusion": DISC, "h": 0.05},
             "coefficients": {"d3": 1.0}})
        assert code == 0
        doc = json.loads((outdir / "d0.json").read_text())
        mat = np.asarray(doc["matrix"])
        assert np.abs(mat - mat.T).max() < 1e-10
        assert doc["min_eig"] > 0
        assert doc["cross_check_err"] <= 1e-9

    def test_btable_cardinality(self, tmp_path):
        grid = [0.0, 0.5, 1.0, 2.0]
        code, outdir = run_cli(
            tmp_path, "btable",
            {"geometry": {"inclusion": DISC, "h": 0.1},
             "coefficients": {"d1": 1.0, "d2": [[2, 0], [0, 1]]},
             "kinetics": "langmuir:a=1,b=1",
             "cell": {"h": 0.1, "s_grid": grid}})
        assert code == 0
        doc = json.loads((outdir / "btable.json").read_text())
        assert len(doc["entries"]) >= len(grid)

    def test_mesh_roundtrip(self, tmp_path):
        code, outdir = run_cli(tmp_path, "mesh",
                               {"geometry": {"inclusion": DISC, "h": 0.1}})
        assert code == 0
        mesh = geo.read_poromesh(outdir / "cell.poromesh")
        stats = json.loads((outdir / "mesh_stats.json").read_text())
        assert stats["n_nodes"] == mesh.n_nodes
        assert stats["gamma_loops"] == 1

    def test_validate_builtin_passes(self, tmp_path):
        code, outdir = run_cli(tmp_path, "validate",
                               {"kinetics": "mm_triple+langmuir:a=1,b=1"})
        assert code == 0
        doc = json.loads((outdir / "validate.json").read_text())
        assert doc["passed"]

    def test_validate_reports_geometry_failure(self, tmp_path):
        bad = {"shape": "disc", "center": [0.5, 0.5], "radius": 0.49}
        code, outdir = run_cli(tmp_path, "validate",
                               {"geometry": {"inclusion": bad, "h": 0.05},
                                "kinetics": "zero"})
        assert code == 0
        doc = json.loads((outdir / "validate.json").read_text())
        assert not doc["geometry"]["passed"]
        assert not doc["passed"]

    def test_tensor_suite(self, tmp_path):
        code, outdir = run_cli(
            tmp_path, "tensor-suite",
            {"geometry": {"inclusion": DISC, "h": 0.1},
             "coefficients": {"d1": 1.0, "d2": [[2, 0], [0, 1]], "d3": 1.0},
             "cell": {"h": 0.1}})
        assert code == 0
        doc = json.loads((outdir / "suite.json").read_text())
        assert doc["passed"]

    def test_macro_heat_oracle(self, tmp_path):
        config = {
            "coefficients": {"d1": 1.0, "d2": 1.0, "d3": 1.0},
            "kinetics": "zero",
            "macro": {"h": 1 / 16, "dt": 1e-3, "t_end": 0.02,
                      "forced_b": [[1, 0], [0, 1]],
                      "forced_d0": [[1, 0], [0, 1]],
                      "initial": {"c1": {"kind": "sine"},
                                  "c2": {"kind": "sine"},
                                  "c3": {"kind": "sine"}}},
        }
        code, outdir = run_cli(tmp_path, "macro", config)
        assert code == 0
        lines = (outdir / "trajectory.csv").read_text().splitlines()
        header = lines[0].split(",")
        first = dict(zip(header, map(float, lines[1].split(","))))
        last = dict(zip(header, map(float, lines[-1].split(","))))
        T = last["t"]
        decay_c = last["norm_c"] / first["norm_c"]
        decay_c3 = last["norm_c3"] / first["norm_c3"]
        assert abs(decay_c / math.exp(-math.pi ** 2 * T) - 1) < 0.05
        assert abs(decay_c3 / math.exp(-2 * math.pi ** 2 * T) - 1) < 0.05

    def test_micro_outputs(self, tmp_path):
        config = {
            "geometry": {"inclusion": DISC, "h": 0.05},
            "coefficients": {"d1": 1.0, "d2": 1.0, "d3": 1.0},
            "kinetics": "langmuir:a=1,b=1",
            "micro": {"epsilon": 0.25, "dt": 1e-3, "t_end": 5e-3,
                      "initial": {"c2": {"kind": "bump", "amplitude": 0.5}}},
        }
        code, outdir = run_cli(tmp_path, "micro", config)
        assert code == 0
        assert (outdir / "trajectory.csv").exists()
        assert (outdir / "gamma_gap.csv").exists()

    def test_micro_budget_exit_4(self, tmp_path):
        config = {
            "geometry": {"inclusion": DISC, "h": 0.05},
            "micro": {"epsilon": 0.125, "dt": 1e-3, "t_end": 1e-3},
        }
        code, _ = run_cli(tmp_path, "micro", config,
                          extra=("--budget-nodes", "100"))
        assert code == cli.EXIT_BUDGET

    def test_sweep_rows_and_threads_determinism(self, tmp_path):
        config = {
            "geometry": {"inclusion": DISC, "h": 0.05},
            "coefficients": {"d1": 1.0, "d2": [[2, 0], [0, 1]], "d3": 1.0},
            "kinetics": "langmuir:a=1,b=1",
            "cell": {"h": 0.125, "s_grid": [0.0, 0.5, 1.0, 1.5],
                     "lambda_macro": 1.5},
            "sweep": {"epsilons": [0.25, 0.125], "dt": 2e-3, "t_end": 0.01,
                      "macro_h": 1 / 16, "snapshot_every": 1},
        }
        code1, out1 = run_cli(tmp_path, "sweep", config, out="s1")
        code2, out2 = run_cli(tmp_path, "sweep", config, out="s2",
                              extra=("--threads", "3"))
        assert code1 == code2 == 0
        doc = json.loads((out1 / "report.json").read_text())
        assert len(doc["epsilons"]) == 2
        for name in ("s1", "s2"):
            pass
        files = sorted(os.listdir(out1))
        assert files == sorted(os.listdir(out2))
        for fname in files:
            assert (out1 / fname).read_bytes() == (out2 / fname).read_bytes(), \
                fname


class TestManifestRerun:
    def test_rerun_byte_identical(self, tmp_path):
        config = {
            "geometry": {"inclusion": DISC, "h": 0.05},
            "coefficients": {"d1": 1.0, "d2": 1.0, "d3": 1.0},
            "kinetics": "langmuir:a=1,b=1",
            "micro": {"epsilon": 0.25, "dt": 1e-3, "t_end": 5e-3},
        }
        _, out1 = run_cli(tmp_path, "micro", config, out="a")
        # rerun from the materialized manifest config
        manifest = json.loads((out1 / "manifest.json").read_text())
        _, out2 = run_cli(tmp_path, "micro", manifest["config"], out="b")
        for fname in sorted(os.listdir(out1)):
            assert (out1 / fname).read_bytes() == (out2 / fname).read_bytes()


def test_field_snapshot_output(tmp_path):
    config = {
        "coefficients": {"d1": 1.0, "d2": 1.0, "d3": 1.0},
        "kinetics": "zero",
        "macro": {"h": 1 / 8, "dt": 1e-3, "t_end": 2e-3,
                  "forced_b": [[1, 0], [0, 1]],
                  "forced_d0": [[1, 0], [0, 1]],
                  "initial": {"c1": {"kind": "sine"}, "c2": {"kind": "sine"},
                              "c3": {"kind": "sine"}}},
        "output": {"snapshot_fields": True},
    }
    code, outdir = run_cli(tmp_path, "macro", config)
    assert code == 0
    text = (outdir / "final_c.field").read_text().splitlines()
    name, version = text[0].split()[2], text[0].split()[1]
    assert text[0].startswith("field v1 c ")
    n = int(text[0].split()[-1])
    assert len(text) == n + 1
    float(text[1])
