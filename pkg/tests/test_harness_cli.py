import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

import facetflow.harness_cli as hc
from facetflow.anisotropy import AnisotropyJ
from facetflow.facet_tracker import TrackerInvariantError
from facetflow.harness_cli import (
    EXIT_CONFIG,
    EXIT_INVARIANT,
    EXIT_OK,
    EXIT_SOLVER,
    PRESET_NAMES,
    ConfigError,
    ScenarioConfig,
    main,
    preset,
    run_scenario,
)
from facetflow.jr_profile import validate_jr
from facetflow.semidiscrete import ProxFailure

PI = math.pi
HEXAGON = {"corners": [PI / 6, PI / 2, 5 * PI / 6, 7 * PI / 6, 3 * PI / 2, 11 * PI / 6],
           "weights": [PI / 6] * 6}

SMALL = {"regularized": {"n": 64, "epsilon": 0.05, "dt": 1e-2}, "scheme": {"n": 64, "h": 1e-2}}


def write_config(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


def bundle_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


# -- presets -------------------------------------------------------------------------------


@pytest.mark.parametrize("name", [n for n in PRESET_NAMES if n != "corner(m)"] + [f"corner({m})" for m in range(1, 5)])
def test_presets_are_admissible(name, J):
    assert validate_jr(preset(name), J) == []


def test_polygon_preset_for_a_hexagon():
    J = AnisotropyJ(tuple(HEXAGON["corners"]), tuple(HEXAGON["weights"]))
    assert validate_jr(preset("polygon", J), J) == []
    with pytest.raises(ValueError, match="square anisotropy only"):
        preset("two-hump", J)


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("circle")


# -- configuration ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "patch, path",
    [
        ({"sample_times": [0.01, 0.005]}, "sample_times[1]"),
        ({"sample_times": [0.01, 2.0]}, "sample_times[1]"),
        ({"regularized": {"epsilon": 0.0}}, "regularized.epsilon"),
        ({"regularized": {"n": 12.5}}, "regularized.n"),
        ({"regularized": {"theta": 0.3}}, "regularized.theta"),
        ({"scheme": {"h": -1e-3}}, "scheme.h"),
        ({"scheme": {"stride": 2}}, "scheme.stride"),
        ({"convergence": {"hs": []}}, "convergence.hs"),
        ({"solver": "spectral"}, "solver"),
        ({"anisotropy": {"corners": [0.1], "weights": "x"}}, "anisotropy.weights"),
        ({"anisotropy": HEXAGON}, "solver"),
        ({"initial_data": "no-such-file.json"}, "initial_data"),
        ({"T": True}, "T"),
        ({"seed": -1}, "seed"),
        ({"colour": "red"}, "colour"),
    ],
)
def test_config_errors_name_the_field(patch, path):
    d = {"initial_data": "parabola", "T": 0.1, **patch}
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_dict(d)
    assert info.value.path == path


def test_missing_required_fields():
    for d, path in (({"T": 1.0}, "initial_data"), ({"initial_data": "parabola"}, "T"), ([], "<root>")):
        with pytest.raises(ConfigError) as info:
            ScenarioConfig.from_dict(d)
        assert info.value.path == path


def test_profile_file_is_loaded_and_checked(tmp_path, two_hump):
    (tmp_path / "p.json").write_text(two_hump.to_json())
    cfg = ScenarioConfig.from_file(write_config(tmp_path, {"initial_data": "p.json", "T": 0.1}))
    assert cfg.initial_profile().segments == two_hump.segments
    # facet slopes moved off the corner set
    bad = json.loads(two_hump.to_json())
    for seg in bad["segments"]:
        if seg["kind"] == "facet":
            seg["alpha"] += 0.1
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(ConfigError, match="not admissible"):
        ScenarioConfig.from_file(write_config(tmp_path, {"initial_data": "bad.json", "T": 0.1}))


def test_general_J_runs_without_the_tracker(tmp_path):
    cfg = ScenarioConfig.from_dict(
        {"initial_data": "polygon", "anisotropy": HEXAGON, "solver": ["scheme", "regularized"], "T": 0.02,
         "sample_times": [0.02], **SMALL}
    )
    b, report, _ = run_scenario(cfg, tmp_path / "hex")
    assert b.tracker_state is None and b.scheme_run is not None
    assert report["violations"] == 0


def test_round_trip_through_to_dict():
    cfg = ScenarioConfig.from_dict({"initial_data": "two-hump", "T": 0.2, "sample_times": [0.1], **SMALL})
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


# -- bundles -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def parabola_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("b") / "parabola"
    cfg = ScenarioConfig.from_dict(
        {"initial_data": "parabola", "T": 0.05, "sample_times": [0.02, 0.05],
         "regularized": {"n": 256, "epsilon": 0.02, "dt": 1e-3}, "scheme": {"n": 256, "h": 1e-3}}
    )
    b, report, path = run_scenario(cfg, out)
    return cfg, b, report, path


def test_bundle_contents(parabola_bundle):
    _, _, report, path = parabola_bundle
    names = {p.name for p in path.iterdir()}
    assert names == {
        "config.json", "initial_profile.json", "tracker_trajectory.csv", "tracker_events.json",
        "tracker_milestones.json", "regularized_snapshots.csv", "regularized_metadata.json",
        "scheme_diagnostics.csv", "cross_validation.json", "plot_data.csv", "manifest.json",
    }
    assert json.loads((path / "manifest.json").read_text())["files"] == sorted(names - {"manifest.json"})
    assert report["violations"] == 0
    assert [r["t"] for r in report["tracker_vs_scheme"]] == [0.02, 0.05]


def test_rerun_is_byte_identical(parabola_bundle):
    cfg, _, _, path = parabola_bundle
    before = bundle_bytes(path)
    run_scenario(cfg, path)
    assert bundle_bytes(path) == before


def test_minimal_is_flagged_stationary(tmp_path):
    cfg = ScenarioConfig.from_dict(
        {"initial_data": "minimal", "T": 0.1, "sample_times": [0.05, 0.1],
         "regularized": {"n": 256, "epsilon": 1e-7, "dt": 1e-3}, "scheme": {"n": 256, "h": 1e-2}}
    )
    _, report, _ = run_scenario(cfg, tmp_path / "m")
    assert "stationary shape, Lambda_t = 1" in report["notes"]
    for key in ("tracker_vs_regularized", "tracker_vs_scheme"):
        assert max(r["sup"] for r in report[key]) <= 1e-6


def test_parabola_is_not_stationary(parabola_bundle):
    assert "stationary shape, Lambda_t = 1" not in parabola_bundle[2]["notes"]


@pytest.mark.slow
def test_parabola_solvers_agree():
    cfg = ScenarioConfig.from_dict(
        {"initial_data": "parabola", "T": 0.05, "sample_times": [0.05],
         "regularized": {"n": 2048, "epsilon": 1e-3, "dt": 1e-3}, "scheme": {"n": 2048, "h": 1e-3}}
    )
    report = hc.cross_validate(hc.execute(cfg))
    assert report["tracker_vs_regularized"][0]["sup"] <= 5e-3
    assert report["tracker_vs_scheme"][0]["sup"] <= 5e-3
    assert report["violations"] == 0


def test_coarse_grid_is_warned_about(tmp_path):
    cfg = ScenarioConfig.from_dict({"initial_data": "parabola", "T": 0.02, "solver": "regularized", **SMALL})
    _, report, _ = run_scenario(cfg, tmp_path / "c")
    warns = [f for f in report["flags"] if f["severity"] == "warning"]
    assert [f["property"] for f in warns] == ["under-resolution"]
    assert report["violations"] == 0


# -- plot data -----------------------------------------------------------------------------------


def test_plot_data_without_samples_is_header_only(tmp_path):
    cfg = ScenarioConfig.from_dict({"initial_data": "two-hump", "T": 0.02, **SMALL})
    b, _, path = run_scenario(cfg, tmp_path / "e")
    assert (path / "plot_data.csv").read_text() == "series,solver,t,s,value,label\n"
    assert hc.emit_plot_data(b) == "series,solver,t,s,value,label\n"


def test_square_stage_has_four_runs(tmp_path):
    cfg = ScenarioConfig.from_dict({"initial_data": "parabola", "T": 0.3, "sample_times": [0.3],
                                    "solver": "tracker"})
    b, _, _ = run_scenario(cfg, tmp_path / "sq")
    rows = list(csv.DictReader(io.StringIO(hc.emit_plot_data(b))))
    phi = [(float(r["s"]), float(r["value"])) for r in rows if r["series"] == "phi"]
    s = np.array([p[0] for p in phi])
    v = np.array([p[1] for p in phi])
    # four facets centred on the old corners, breaks at multiples of pi/2
    runs = np.split(np.arange(len(v)), np.flatnonzero(np.abs(np.diff(v)) > 1e-12) + 1)
    assert [v[r[0]] for r in runs] == pytest.approx([PI / 4, 3 * PI / 4, 5 * PI / 4, 7 * PI / 4])
    ds = s[1] - s[0]
    assert [len(r) * ds for r in runs] == pytest.approx([PI / 2] * 4, abs=ds)
    ms = [r for r in rows if r["series"] == "milestone"]
    assert {r["label"] for r in ms} >= {"T_fa", "T_1"}


def test_plot_data_series(parabola_bundle):
    _, b, _, path = parabola_bundle
    rows = list(csv.DictReader(io.StringIO((path / "plot_data.csv").read_text())))
    series = {(r["series"], r["solver"]) for r in rows}
    assert {("w", "tracker"), ("w", "regularized"), ("w", "scheme"), ("facet", "tracker")} <= series
    # facet widths grow between the two sample times
    f = [r for r in rows if r["series"] == "facet" and r["label"] == "0"]
    widths = [float(r["value"]) - float(r["s"]) for r in f]
    assert widths[-1] > widths[0]


# -- command line ----------------------------------------------------------------------------------


def test_cli_run_and_validate(tmp_path, capsys):
    cfg = write_config(tmp_path, {"initial_data": "two-hump", "T": 0.02, "sample_times": [0.01], **SMALL})
    assert main(["validate", "--config", cfg]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["initial_data"] == "two-hump"
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--solver", "scheme"]) == EXIT_OK
    assert not (out / "tracker_trajectory.csv").exists()
    assert (out / "scheme_diagnostics.csv").exists()


def test_cli_malformed_config_leaves_nothing(tmp_path, capsys):
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "regularized": {"epsilon": -1}})
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert "regularized.epsilon" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == [tmp_path / "cfg.json"]
    bad = tmp_path / "broken.json"
    bad.write_text("{ not json")
    assert main(["run", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(out)]) == EXIT_CONFIG


def test_cli_missing_output_dir(tmp_path):
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, **SMALL})
    assert main(["run", "--config", cfg]) == EXIT_CONFIG


def test_cli_refuses_foreign_directory(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "notes.txt").write_text("keep me")
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "solver": "tracker"})
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert (out / "notes.txt").read_text() == "keep me"


def test_cli_solver_failure(tmp_path, monkeypatch, capsys):
    def fail(*a, **k):
        raise ProxFailure("no convergence", np.zeros(4), 1.0)

    monkeypatch.setattr(hc, "run_scheme", fail)
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "solver": "scheme", **SMALL})
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_SOLVER
    assert "semi-discrete scheme" in capsys.readouterr().err
    assert not out.exists()


def test_cli_invariant_violation(tmp_path, monkeypatch, capsys):
    def broken(*a, **k):
        raise TrackerInvariantError("facet 1 collapsed inside a group")

    monkeypatch.setattr(hc, "run_until", broken)
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "solver": "tracker"})
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_INVARIANT
    assert "collapsed" in capsys.readouterr().err
    assert not out.exists()


def test_cli_convergence(tmp_path, capsys):
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "scheme": {"n": 256},
                                  "convergence": {"hs": [4e-3, 2e-3]}})
    assert main(["convergence", "--config", cfg]) == EXIT_OK
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert [r["h"] for r in rows] == [4e-3, 2e-3]
    assert rows[0]["E"] > rows[1]["E"] > 0


def test_cli_plotdata(tmp_path):
    cfg = write_config(tmp_path, {"initial_data": "parabola", "T": 0.02, "sample_times": [0.02],
                                  "solver": "tracker"})
    out = tmp_path / "pd"
    assert main(["plotdata", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "plot_data.csv"]


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, {"initial_data": "minimal", "T": 0.01, "solver": "tracker"})
    proc = subprocess.run([sys.executable, "-m", "facetflow", "validate", "--config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    proc = subprocess.run([sys.executable, "-m", "facetflow", "run", "--config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and "output_dir" in proc.stderr
