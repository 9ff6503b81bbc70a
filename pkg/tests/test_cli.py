import json
import os

import numpy as np
import pytest

import npbhte.cli as cli
from npbhte import ColumnSchema, ReplicateError, load_csv
from npbhte.cli import main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    """One small synthetic experiment shared by the read-only tests."""
    root = tmp_path_factory.mktemp("synth")
    cfg = root / "cfg.yaml"
    cfg.write_text("synth:\n  n: 600\n")
    out = root / "data"
    rc = main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def synth_csv(synth_dir):
    return str(synth_dir / "synthetic.csv")


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _dummy_partition_csv(tmp_path):
    """Small table whose features are complementary group dummies."""
    rng = np.random.default_rng(80)
    n = 120
    g = rng.integers(0, 2, n)
    d = np.concatenate([np.ones(60, int), np.zeros(60, int)])
    y = g * 1.0 + d * 0.5 + rng.standard_normal(n)
    rows = ["y,d,a,b"]
    for i in range(n):
        rows.append(f"{float(y[i])!r},{d[i]},{g[i]},{1 - g[i]}")
    path = tmp_path / "strat.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


class TestSynth:
    def test_outputs_and_report(self, synth_dir):
        report = json.loads(_read(synth_dir / "synth_report.json"))
        assert report["schema_version"] == cli.SCHEMA_VERSION
        assert report["n"] == 600
        assert report["n_treated"] + report["n_control"] == 600
        assert (synth_dir / "synthetic_truth.csv").exists()

    def test_data_and_truth_are_consistent(self, synth_dir, synth_csv):
        table = load_csv(synth_csv, ColumnSchema(response="y", treatment="d"))
        assert table.n == 600
        assert table.feature_names == ("z1", "z2")
        import csv as csv_mod

        with open(synth_dir / "synthetic_truth.csv", newline="") as fh:
            rows = list(csv_mod.DictReader(fh))
        y0 = np.array([float(r["control_outcome"]) for r in rows])
        y1 = np.array([float(r["treated_outcome"]) for r in rows])
        chosen = np.where(table.d == 1, y1, y0)
        assert np.allclose(table.y, chosen, rtol=0, atol=1e-12)

    def test_seed_changes_the_draw(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("synth:\n  n: 50\n")
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(a)]) == 0
        assert main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(b)]) == 0
        assert main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(c)]) == 0
        assert _read(a / "synthetic.csv") == _read(b / "synthetic.csv")
        assert _read(a / "synthetic.csv") != _read(c / "synthetic.csv")


class TestExpand:
    def test_expanded_csv_round_trips(self, synth_csv, tmp_path):
        out = tmp_path / "exp"
        rc = main(["expand", "--input", synth_csv, "--out", str(out)])
        assert rc == 0
        plan = json.loads(_read(out / "expansion_plan.json"))
        assert plan["schema_version"] == cli.SCHEMA_VERSION
        table = load_csv(str(out / "expanded.csv"), ColumnSchema(response="y", treatment="d"))
        assert table.feature_names[0] == "intercept"
        # Indicator columns are 0/1 and include the positive-part column.
        assert all(set(np.unique(table.X[:, j])) <= {0.0, 1.0} for j in range(table.p))
        assert any(name.startswith("z1>") for name in table.feature_names)

    def test_without_intercept_config(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("expand:\n  with_intercept: false\n")
        out = tmp_path / "exp"
        assert main(["expand", "--input", synth_csv, "--config", str(cfg), "--out", str(out)]) == 0
        table = load_csv(str(out / "expanded.csv"), ColumnSchema(response="y", treatment="d"))
        assert "intercept" not in table.feature_names


class TestAte:
    def test_report_contents(self, synth_csv, tmp_path):
        out = tmp_path / "ate"
        rc = main(["ate", "--input", synth_csv, "--boot", "40", "--seed", "5", "--out", str(out)])
        assert rc == 0
        rep = json.loads(_read(out / "ate_report.json"))
        assert rep["schema_version"] == cli.SCHEMA_VERSION
        assert rep["seed"] == {"master_seed": 5, "replicate_index": 0}
        dec = rep["adjusted_taylor"]["decomposition"]
        total = dec["treated"]["total"] + dec["control"]["total"]
        assert total == pytest.approx(rep["adjusted_taylor"]["variance"], rel=1e-9)
        assert rep["adjusted_bootstrap"]["draws"] == 40
        draws = _read(out / "ate_draws.csv").decode().strip().splitlines()
        assert len(draws) == 41  # header + B rows
        assert rep["variance_reduction"]["relative"] == pytest.approx(
            1.0 - rep["variance_reduction"]["adjusted_variance"]
            / rep["variance_reduction"]["unadjusted_variance"],
            rel=1e-12,
        )

    def test_boot_zero_skips_the_bootstrap(self, synth_csv, tmp_path):
        out = tmp_path / "ate0"
        assert main(["ate", "--input", synth_csv, "--boot", "0", "--out", str(out)]) == 0
        rep = json.loads(_read(out / "ate_report.json"))
        assert rep["adjusted_bootstrap"] is None
        assert not (out / "ate_draws.csv").exists()

    def test_deterministic_across_runs(self, synth_csv, tmp_path, capsys):
        args = ["ate", "--input", synth_csv, "--boot", "30", "--seed", "7"]
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(out_a)]) == 0
        text_a = capsys.readouterr().out
        assert main(args + ["--out", str(out_b)]) == 0
        text_b = capsys.readouterr().out
        assert _read(out_a / "ate_report.json") == _read(out_b / "ate_report.json")
        assert _read(out_a / "ate_draws.csv") == _read(out_b / "ate_draws.csv")
        assert text_a.replace(str(out_a), "") == text_b.replace(str(out_b), "")


class TestLinHte:
    def test_draws_and_contours(self, synth_csv, tmp_path):
        out = tmp_path / "lh"
        rc = main(["lin-hte", "--input", synth_csv, "--boot", "25", "--out", str(out)])
        assert rc == 0
        rep = json.loads(_read(out / "lin_hte_report.json"))
        names = [c["feature"] for c in rep["coefficients"]]
        assert names[0] == "intercept"
        draws = _read(out / "lin_hte_draws.csv").decode().strip().splitlines()
        assert draws[0].split(",") == names
        assert len(draws) == 26
        contours = _read(out / "lin_hte_contours.csv").decode().strip().splitlines()
        assert contours[0].split(",") == ["level", "vertex", "z1", "z2"]
        # Three default levels, closed polylines of points+1 vertices.
        assert len(contours) == 1 + 3 * 129

    def test_boot_zero_writes_no_draws(self, synth_csv, tmp_path):
        out = tmp_path / "lh0"
        assert main(["lin-hte", "--input", synth_csv, "--boot", "0", "--out", str(out)]) == 0
        assert (out / "lin_hte_report.json").exists()
        assert not (out / "lin_hte_draws.csv").exists()

    def test_expanded_design_feeds_lin_hte(self, synth_csv, tmp_path):
        exp = tmp_path / "exp"
        assert main(["expand", "--input", synth_csv, "--out", str(exp)]) == 0
        out = tmp_path / "lh"
        rc = main([
            "lin-hte", "--input", str(exp / "expanded.csv"), "--boot", "0",
            "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "lin_hte_report.json"))
        names = [c["feature"] for c in rep["coefficients"]]
        # The expanded file already carries its own intercept column.
        assert names.count("intercept") == 1

    def test_incomplete_strata_fail_cleanly(self, tmp_path):
        path = _dummy_partition_csv(tmp_path)
        cfg = tmp_path / "c.yaml"
        cfg.write_text("lin_hte:\n  strata: [a]\n")
        out = tmp_path / "lh_strata"
        rc = main([
            "lin-hte", "--input", str(path), "--config", str(cfg),
            "--boot", "0", "--out", str(out),
        ])
        # A single indicator is not a partition; the command must fail
        # cleanly rather than emit a half-report.
        assert rc == 3
        assert os.listdir(out) == []

    def test_partition_strata_succeed(self, tmp_path):
        path = _dummy_partition_csv(tmp_path)
        cfg = tmp_path / "c.yaml"
        cfg.write_text("lin_hte:\n  strata: [a, b]\n  contour_features: [a, b]\n")
        out = tmp_path / "lh"
        rc = main([
            "lin-hte", "--input", str(path), "--config", str(cfg),
            "--boot", "5", "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "lin_hte_report.json"))
        # Complementary dummies already span the constant, so no
        # intercept column was injected and the fit stayed full rank.
        assert [c["feature"] for c in rep["coefficients"]] == ["a", "b"]
        assert [s["name"] for s in rep["strata"]] == ["a", "b"]
        for s in rep["strata"]:
            assert s["effect"]["variance"] == pytest.approx(
                s["treated"]["variance"] + s["control"]["variance"]
            )

    def test_bad_contour_feature_discards_outputs(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("lin_hte:\n  contour_features: [nope1, nope2]\n")
        out = tmp_path / "lh_bad"
        rc = main([
            "lin-hte", "--input", synth_csv, "--config", str(cfg),
            "--boot", "5", "--out", str(out),
        ])
        assert rc == 2
        # The report and draws were written before the failure and must
        # have been cleaned up again.
        assert os.listdir(out) == []


class TestTree:
    def test_tot_default_and_flag(self, synth_csv, tmp_path):
        out = tmp_path / "t1"
        rc = main([
            "tree", "--input", synth_csv, "--max-depth", "2", "--min-leaf", "30",
            "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "tree.json"))
        assert rep["tot"] is True
        assert rep["tree"]["nodes"][0]["count"] == 600

        out2 = tmp_path / "t2"
        rc = main([
            "tree", "--input", synth_csv, "--max-depth", "2", "--min-leaf", "30",
            "--no-tot", "--out", str(out2),
        ])
        assert rc == 0
        rep2 = json.loads(_read(out2 / "tree.json"))
        assert rep2["tot"] is False
        assert rep2["tree"] != rep["tree"]

    def test_leaf_counts_partition_the_sample(self, synth_csv, tmp_path):
        out = tmp_path / "t"
        assert main([
            "tree", "--input", synth_csv, "--max-depth", "3", "--min-leaf", "50",
            "--out", str(out),
        ]) == 0
        rep = json.loads(_read(out / "tree.json"))
        leaves = [nd for nd in rep["tree"]["nodes"] if nd["feature"] is None]
        assert sum(nd["count"] for nd in leaves) == 600
        assert all(nd["count"] >= 50 for nd in leaves)


class TestForest:
    def test_tot_mode_outputs(self, synth_csv, tmp_path):
        out = tmp_path / "f"
        rc = main([
            "forest", "--input", synth_csv, "--tot", "--boot", "10",
            "--max-depth", "2", "--min-leaf", "40", "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "forest.json"))
        assert rep["tot"] is True
        assert len(rep["forest"]["trees"]) == 10
        lines = _read(out / "split_probabilities.csv").decode().strip().splitlines()
        assert lines[0].split(",") == ["feature", "column", "depth_le_1", "depth_le_2"]

    def test_arm_mode_outputs(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(
            "forest:\n"
            "  trees: 8\n"
            "  effects:\n"
            "    - {feature: z1, interval: [0, 0]}\n"
            "  query_rows: [0, 1, 2]\n"
        )
        out = tmp_path / "f"
        rc = main([
            "forest", "--input", synth_csv, "--config", str(cfg),
            "--max-depth", "2", "--min-leaf", "40", "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "forest_report.json"))
        assert rep["trees"] == 8
        assert rep["effects"][0]["label"] == "z1 in [0, 0]"
        assert len(rep["query"]) == 3
        for name in (
            "split_probabilities_treated.csv",
            "split_probabilities_control.csv",
            "forest_ate_draws.csv",
            "effect_summary.csv",
            "effect_draws.csv",
            "query_draws.csv",
        ):
            assert (out / name).exists(), name
        ate_rows = _read(out / "forest_ate_draws.csv").decode().strip().splitlines()
        assert len(ate_rows) == 9

    def test_boot_doubles_as_tree_count(self, synth_csv, tmp_path):
        out = tmp_path / "f"
        rc = main([
            "forest", "--input", synth_csv, "--boot", "4",
            "--max-depth", "1", "--min-leaf", "50", "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "forest_report.json"))
        assert rep["trees"] == 4

    def test_multinomial_scheme_from_config(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("forest:\n  trees: 3\n  weights: multinomial\n")
        out = tmp_path / "f"
        rc = main([
            "forest", "--input", synth_csv, "--tot", "--config", str(cfg),
            "--max-depth", "1", "--min-leaf", "50", "--out", str(out),
        ])
        assert rc == 0
        rep = json.loads(_read(out / "forest.json"))
        assert rep["weights"] == "multinomial"
        root = rep["forest"]["trees"][0]["nodes"][0]
        assert root["mass"] == 600.0


class TestExitCodes:
    def test_missing_input_is_data_error(self, tmp_path):
        out = tmp_path / "o"
        assert main(["ate", "--input", str(tmp_path / "nope.csv"), "--out", str(out)]) == 3

    def test_input_required(self, tmp_path):
        assert main(["ate", "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_key(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("nonsense: 1\n")
        assert main([
            "ate", "--input", synth_csv, "--config", str(cfg), "--out", str(tmp_path / "o")
        ]) == 2

    def test_malformed_yaml(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("foo: [unclosed\n")
        assert main([
            "ate", "--input", synth_csv, "--config", str(cfg), "--out", str(tmp_path / "o")
        ]) == 2

    def test_bad_q_is_data_error(self, synth_csv, tmp_path):
        assert main([
            "ate", "--input", synth_csv, "--q", "1.5", "--out", str(tmp_path / "o")
        ]) == 3

    def test_duplicate_feature_values_hit_rank_check(self, tmp_path):
        rows = ["y,d,za,zb"]
        rng = np.random.default_rng(81)
        for i in range(40):
            z = rng.random()
            rows.append(f"{rng.random()!r},{i % 2},{z!r},{z!r}")
        path = tmp_path / "dup.csv"
        path.write_text("\n".join(rows) + "\n")
        assert main([
            "ate", "--input", str(path), "--boot", "0", "--out", str(tmp_path / "o")
        ]) == 4

    def test_tiny_bootstrap_is_value_error(self, synth_csv, tmp_path):
        assert main([
            "ate", "--input", synth_csv, "--boot", "1", "--out", str(tmp_path / "o")
        ]) == 5

    def test_replicate_failure_exit_code(self, synth_csv, tmp_path, monkeypatch):
        def explode(*a, **kw):
            raise ReplicateError(4, "replicate 4 kept failing")

        monkeypatch.setattr(cli, "compute_ate_report", explode)
        out = tmp_path / "o"
        assert main(["ate", "--input", synth_csv, "--out", str(out)]) == 6
        assert os.listdir(out) == []

    def test_negative_boot_rejected(self, synth_csv, tmp_path):
        assert main([
            "ate", "--input", synth_csv, "--boot", "-2", "--out", str(tmp_path / "o")
        ]) == 2


class TestPrecedence:
    def test_flag_beats_config(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: 5\nboot: 11\n")
        out = tmp_path / "o"
        rc = main([
            "ate", "--input", synth_csv, "--config", str(cfg), "--seed", "9", "--out", str(out)
        ])
        assert rc == 0
        rep = json.loads(_read(out / "ate_report.json"))
        assert rep["seed"]["master_seed"] == 9  # flag wins
        assert rep["boot"] == 11  # config fills the gap

    def test_config_input_and_out(self, synth_csv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = tmp_path / "c.yaml"
        cfg.write_text(f"input: {synth_csv}\nout: fromcfg\nboot: 0\n")
        assert main(["ate", "--config", str(cfg)]) == 0
        assert (tmp_path / "fromcfg" / "ate_report.json").exists()

    def test_tree_section_feeds_tree_config(self, synth_csv, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("tree:\n  max_depth: 1\n  min_leaf: 100\n")
        out = tmp_path / "o"
        assert main(["tree", "--input", synth_csv, "--config", str(cfg), "--out", str(out)]) == 0
        rep = json.loads(_read(out / "tree.json"))
        assert rep["tree"]["config"]["max_depth"] == 1
        internal = [nd for nd in rep["tree"]["nodes"] if nd["feature"] is not None]
        assert len(internal) <= 1
