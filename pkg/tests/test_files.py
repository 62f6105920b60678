import json

import numpy as np
import pandas as pd
import pytest

from src.config import get_settings, load_settings
from src.errors import ConfigError, DomainError
from src.handlers.failures import FailureLedger
from src.loaders.files import FileLoader, read_frame, read_meta, read_trajectory, read_vector
from src.solvers.fixed_point import initial_vector
from src.state_space import LevelPhaseLayout
from src.transformers.trajectories import normalize_trajectory, vector_frame


LAYOUT = LevelPhaseLayout((1, 2, 2))


class TestFileLoader:
    def test_csv_carries_metadata(self, tmp_path):
        loader = FileLoader(str(tmp_path), meta={"seed": 3, "command": "solve"})
        path = loader.write_frame("pi", vector_frame(initial_vector("uniform:3", LAYOUT)))
        assert path.read_text().startswith("# {")
        assert read_meta(str(path)) == {"command": "solve", "format_version": 1, "seed": 3}
        assert loader.written == [path]

    def test_jsonl_carries_metadata(self, tmp_path):
        loader = FileLoader(str(tmp_path), fmt="jsonl", meta={"seed": None})
        p = initial_vector("geometric:0.5", LAYOUT)
        path = loader.write_frame("traj", normalize_trajectory(LAYOUT, [0.0, 1.0], [p, p]))
        assert path.suffix == ".jsonl"
        assert read_meta(str(path))["seed"] is None
        times, states = read_trajectory(str(path), LAYOUT)
        np.testing.assert_allclose(times, [0.0, 1.0])
        np.testing.assert_allclose(states[1].values, p.values, atol=1e-14)

    def test_empty_jsonl_is_only_metadata(self, tmp_path):
        path = FileLoader(str(tmp_path), fmt="jsonl").write_frame("empty", pd.DataFrame(columns=["a"]))
        assert path.read_text().count("\n") == 1
        assert read_frame(str(path)).empty

    def test_json_report(self, tmp_path):
        path = FileLoader(str(tmp_path), meta={"seed": 1}).write_json("report", {"values": np.arange(3), "x": np.float64(0.5)})
        data = json.loads(path.read_text())
        assert data["meta"]["seed"] == 1
        assert data["values"] == [0, 1, 2] and data["x"] == 0.5
        assert read_meta(str(path))["format_version"] == 1

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            FileLoader(str(tmp_path), fmt="parquet")


class TestReaders:
    def test_vector_round_trip(self, tmp_path):
        p = initial_vector("poisson:1", LAYOUT)
        path = FileLoader(str(tmp_path)).write_frame("pi", vector_frame(p))
        again = read_vector(str(path))
        assert again.layout == LAYOUT
        np.testing.assert_allclose(again.values, p.values, atol=1e-15)

    def test_vector_layout_mismatch(self, tmp_path):
        path = FileLoader(str(tmp_path)).write_frame("pi", vector_frame(initial_vector("uniform:1", LAYOUT)))
        with pytest.raises(DomainError):
            read_vector(str(path), LevelPhaseLayout.uniform(4))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_frame(str(tmp_path / "nope.csv"))


class TestFailureLedger:
    def test_flush_writes_numbered_entries(self, tmp_path):
        ledger = FailureLedger(str(tmp_path / "failures"))
        ledger.send("scan", {"seed": "uniform:1"}, DomainError("bad"))
        ledger.send("check", {"check": "certificate"}, ValueError("worse"), {"t": 1.0})
        paths = ledger.flush()
        assert [p.name for p in paths] == ["00000_scan.json", "00001_check.json"]
        entry = json.loads(paths[0].read_text())
        assert entry["error_type"] == "DomainError" and entry["record"] == {"seed": "uniform:1"}
        assert ledger.count("scan") == 1 and ledger.count() == 2

    def test_empty_ledger_writes_nothing(self, tmp_path):
        assert FailureLedger(str(tmp_path)).flush() == []

    def test_needs_target(self):
        ledger = FailureLedger()
        ledger.send("scan", {}, DomainError("x"))
        with pytest.raises(ValueError):
            ledger.flush()


class TestSettings:
    def test_bundled_defaults(self):
        settings = get_settings()
        assert settings.tol_det == 1e-8
        assert settings.truncation_mass_tol == 1e-6

    def test_override_file(self, tmp_path, monkeypatch):
        path = tmp_path / "settings.yaml"
        path.write_text("tolerances:\n  tol_det: 1.0e-6\nsolvers:\n  max_jump: 4\n")
        monkeypatch.setenv("MEANFIELD_SETTINGS", str(path))
        get_settings.cache_clear()
        settings = get_settings()
        assert (settings.tol_det, settings.max_jump, settings.tol_rank) == (1e-6, 4, 1e-6)

    def test_missing_file_falls_back_to_defaults(self, tmp_path):
        assert load_settings(str(tmp_path / "absent.yaml")).eps_div == 1e-9

    @pytest.mark.parametrize(
        "body", ["tolerances:\n  tol_nope: 1\n", "tolerances:\n  tol_det: -1\n", "tolerances:\n  tol_det: abc\n", "- 1\n"]
    )
    def test_invalid(self, tmp_path, body):
        path = tmp_path / "settings.yaml"
        path.write_text(body)
        with pytest.raises(ConfigError):
            load_settings(str(path))
