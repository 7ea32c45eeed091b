"""Config parsing, scenario presets, run artifacts and the check suite."""

import json

import numpy as np
import pytest

from elastislab import cli
from elastislab.errors import ConfigInvalid
from elastislab.snapshots import read_snapshot


def _write(tmp_path, text, name="case.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfigParsing:
    def test_roundtrip_through_text(self, tmp_path):
        cfg = cli.preset("mixed-regions", n1=16, n2=16, nz=17, seed=7)
        path = _write(tmp_path, cli.config_text(cfg))
        back, explicit = cli.load_config(path)
        assert back == cfg
        assert "grid" in explicit and "seed" in explicit

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = _write(tmp_path, "# header\n\nschema = 1\nscenario = rest  # eh\n")
        cfg, explicit = cli.load_config(path)
        assert cfg.scenario == "rest"
        assert explicit == frozenset({"scenario"})

    def test_unknown_key_rejected_with_location(self, tmp_path):
        path = _write(tmp_path, "schema = 1\nbogus = 3\n")
        with pytest.raises(ConfigInvalid, match="line 2.*bogus"):
            cli.load_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = _write(tmp_path, "schema = 1\neps = 0.1\neps = 0.2\n")
        with pytest.raises(ConfigInvalid, match="duplicate"):
            cli.load_config(path)

    def test_schema_required_and_versioned(self, tmp_path):
        with pytest.raises(ConfigInvalid, match="schema"):
            cli.load_config(_write(tmp_path, "scenario = rest\n"))
        with pytest.raises(ConfigInvalid, match="schema"):
            cli.load_config(_write(tmp_path, "schema = 2\n", "v2.cfg"))

    def test_typed_value_errors_name_the_field(self, tmp_path):
        path = _write(tmp_path, "schema = 1\neps = fast\n")
        with pytest.raises(ConfigInvalid, match="eps"):
            cli.load_config(path)

    def test_grid_format(self):
        assert cli._parse_grid("16x16x17") == (16, 16, 17)
        for bad in ("16x16", "axbxc", "0x4x5"):
            with pytest.raises(ConfigInvalid):
                cli._parse_grid(bad)

    def test_validation_collects_field_messages(self):
        with pytest.raises(ConfigInvalid) as err:
            cli.preset("rest", t_final=-1.0, seed=-2)
        assert "t_final" in str(err.value) and "seed" in str(err.value)

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ConfigInvalid, match="scenario"):
            cli.preset("vortex")


class TestScenarioBuilders:
    def test_rest_is_zero(self):
        st = cli.build_scenario(cli.preset("rest", n1=8, n2=8, nz=9))
        assert np.max(np.abs(st.f)) == 0.0
        assert np.max(np.abs(st.u)) == 0.0
        assert np.max(np.abs(st.F)) == 0.0

    def test_elastic_mode_background(self):
        cfg = cli.preset("elastic-mode", n1=12, n2=12, nz=13)
        st = cli.build_scenario(cfg)
        x1, _ = st.grid.horizontal_meshes()
        assert np.max(np.abs(st.f - 1e-3 * np.cos(x1))) < 1e-12
        assert np.max(np.abs(st.u)) < 1e-12
        # the trace projection adjusts the columns by order amplitude
        assert abs(np.mean(st.F[0, 0]) - 1.0) < 5e-3
        assert abs(np.mean(st.F[1, 1]) - 1.0) < 5e-3


class TestRunCommand:
    def test_rest_artifacts(self, tmp_path):
        out = tmp_path / "rest"
        assert cli.main(["run", "--grid", "8x8x9", "--out", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["reason"] == "completed"
        assert result["t_end"] == pytest.approx(0.1)
        lines = (out / "diagnostics.csv").read_text().strip().splitlines()
        assert lines[0].split(",")[0] == "t"
        assert len(lines) == 1 + 6
        total_col = cli.stab.DIAGNOSTIC_COLUMNS.index("total")
        for line in lines[1:]:
            assert float(line.split(",")[total_col]) < 1e-12
        back, _ = cli.load_config(out / "config.resolved")
        assert back.scenario == "rest"
        assert (back.n1, back.n2, back.nz) == (8, 8, 9)

    def test_snapshot_schedule(self, tmp_path):
        out = tmp_path / "snaps"
        path = _write(tmp_path, "schema = 1\nscenario = rest\n"
                                "grid = 8x8x9\nsnapshot_interval = 0.04\n")
        assert cli.main(["run", "--config", str(path), "--out", str(out)]) == 0
        names = sorted(p.name for p in out.glob("snap_*_u.bin"))
        assert names == ["snap_000000_u.bin", "snap_000002_u.bin",
                         "snap_000004_u.bin"]
        snap = read_snapshot(out / "snap_000002_u.bin")
        assert snap.values.shape == (3, 8, 8, 9)
        assert np.max(np.abs(snap.values)) < 1e-12
        assert (out / "snap_000002_F1.bin").exists()

    def test_monitored_run_halts_on_stability_loss(self, tmp_path):
        # the rest state claims no stability; asking for a positive
        # constant must produce a typed halt with the last row recorded
        out = tmp_path / "halt"
        path = _write(tmp_path, "schema = 1\nscenario = rest\n"
                                "grid = 8x8x9\nc0 = 0.1\n")
        assert cli.main(["run", "--config", str(path), "--out", str(out)]) == 3
        result = json.loads((out / "result.json").read_text())
        assert result["reason"] == "StabilityLost"
        assert "taylor_min" in result["message"]
        lines = (out / "diagnostics.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_elastic_mode_records_frequency(self, tmp_path):
        out = tmp_path / "osc"
        path = _write(tmp_path, "schema = 1\nscenario = elastic-mode\n"
                                "grid = 12x12x13\nt_final = 3.0\n")
        assert cli.main(["run", "--config", str(path), "--out", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["rel_error"] < 0.05
        assert result["measured_omega"] == pytest.approx(1.0, abs=0.02)

    def test_invalid_config_exit_code(self, tmp_path):
        path = _write(tmp_path, "schema = 1\nwhat = 1\n")
        assert cli.main(["run", "--config", str(path),
                         "--out", str(tmp_path / "x")]) == 2


class TestChecksCommand:
    def test_report_structure_and_exact_entries(self, tmp_path):
        report = cli.run_checks(cli.preset("rest", n1=8, n2=8, nz=9))
        assert report["passed"] + report["failed"] == len(report["checks"])
        names = {c["name"] for c in report["checks"]}
        assert {"dn_symbol_dirichlet", "transport_invariants",
                "evo_residual", "commutator_material_transport"} <= names
        # coarse grids may miss resolution targets, never exact ones
        for c in report["checks"]:
            if c["kind"] == "exact":
                assert c["pass"], c

    def test_bit_identical_reruns(self, tmp_path):
        args = ["checks", "--grid", "8x8x9", "--seed", "11"]
        cli.main(args + ["--out", str(tmp_path / "a")])
        cli.main(args + ["--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "checks.json").read_bytes()
        b = (tmp_path / "b" / "checks.json").read_bytes()
        assert a == b

    def test_corrupted_solver_is_caught(self):
        report = cli.run_checks(cli.preset("rest", n1=8, n2=8, nz=9),
                                corrupt=True)
        by_name = {c["name"]: c for c in report["checks"]}
        assert not report["all_pass"]
        for name in ("dn_symbol_dirichlet", "dn_symbol_neumann",
                     "dn_self_adjoint", "dn_roundtrip"):
            assert not by_name[name]["pass"]
        assert by_name["commutator_material_horizontal"]["pass"]
        assert by_name["spectral_parseval"]["pass"]


class TestConvergenceCommand:
    def test_spatial_study(self, tmp_path):
        out = tmp_path / "conv"
        path = _write(tmp_path, "schema = 1\nstudy = spatial\n")
        assert cli.main(["convergence", "--config", str(path),
                         "--out", str(out)]) == 0
        rows = (out / "convergence.csv").read_text().strip().splitlines()
        assert rows[0] == "study,label,measured,expected"
        order_row = [r for r in rows[1:] if r.split(",")[1] == "order"]
        assert float(order_row[0].split(",")[2]) >= 1.9

    def test_unknown_study_rejected(self):
        with pytest.raises(ConfigInvalid, match="study"):
            cli.preset("rest", study="everything")
