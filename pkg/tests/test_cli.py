import json
from pathlib import Path

import pytest

from pbctune.cli import EXIT_ADMISSIBILITY, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, dumps, main
from pbctune.config import ConfigError, apply_overrides, load_config, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SCALAR = json.loads((CONFIGS / "scalar_critical.json").read_text())


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _variant(**changes):
    cfg = json.loads(json.dumps(SCALAR))
    for dotted, value in changes.items():
        node = cfg
        keys = dotted.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return cfg


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert len(cfg.q_star) == len(cfg.region.half_widths)


def test_strict_mode_rejects_unknown_and_coerced_fields():
    with pytest.raises(ConfigError, match="gainz"):
        parse_config(json.dumps({**SCALAR, "gainz": 1}))
    with pytest.raises(ConfigError, match="q_star"):
        parse_config(json.dumps({**SCALAR, "q_star": ["0.0"]}))
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("{not json")
    with pytest.raises(ConfigError, match="qd_generator"):
        parse_config(json.dumps({**SCALAR, "qd_generator": {"kind": "linear"}}))
    with pytest.raises(ConfigError, match="x0"):
        parse_config(json.dumps(_variant(sim__x0=[1.0])))


def test_overrides():
    cfg = apply_overrides(parse_config(json.dumps(SCALAR)), region_samples=3, theta=0.25, seed=7)
    assert (cfg.region.samples_per_axis, cfg.theta, cfg.seed) == (3, 0.25, 7)
    with pytest.raises(ConfigError):
        apply_overrides(cfg, theta=1.5)


def test_analyze_scalar(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["analyze", "--config", _write(tmp_path, SCALAR), "--out", str(out), "--svg"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    spec = doc["spectral"]
    assert spec["min_damping_for_p5"] == pytest.approx(2.0)
    assert spec["rise_time"]["t_rt"] == pytest.approx(4.0)
    es = doc["es_iss"]
    for key in ("epsilon", "mu", "k1", "k2", "rate_paper", "rate_sound", "xi", "gain_margin", "varphi", "l2_state_bound"):
        assert key in es
    assert doc["assumptions"]["kint_admissible"]["ok"]
    assert doc["config"]["seed"] == 0
    assert (out / "analysis.json").exists() and (out / "circles.csv").exists() and (out / "circles.svg").exists()


def test_all_report_fields_present(tmp_path, capsys):
    from dataclasses import fields

    from pbctune.lyap import EsIssReport
    from pbctune.spectral import SpectralReport

    assert main(["analyze", "--config", _write(tmp_path, SCALAR), "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert {f.name for f in fields(EsIssReport)} == set(doc["es_iss"])
    assert {f.name for f in fields(SpectralReport)} == set(doc["spectral"])


@pytest.mark.parametrize("command", ["simulate", "circles", "tune-damping", "report"])
def test_other_commands(tmp_path, capsys, command):
    cfg = _variant(sim__t_final=2.0)
    assert main([command, "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    for path in doc["files"].values():
        assert Path(path).exists()
    if command == "tune-damping":
        assert doc["min_damping_for_p5"] == pytest.approx(2.0)
    if command == "report":
        assert doc["simulation"]["envelope"]["violations"] == 0


def test_exit_codes(tmp_path, capsys):
    assert main(["analyze", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["analyze", "--config", _write(tmp_path, _variant(q_star=[0.0, 1.0]))]) == EXIT_CONFIG
    assert main(["analyze", "--config", _write(tmp_path, _variant(model__params={"mas": 1.0}))]) == EXIT_CONFIG
    assert main(["analyze", "--config", _write(tmp_path, _variant(region__center=[5.0]))]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--config", "x.json", "--theta", "2"])
    assert exc.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["bogus", "--config", "x.json"])
    assert exc.value.code == EXIT_CONFIG
    # negative stiffness gain is not admissible
    assert main(["analyze", "--config", _write(tmp_path, _variant(gains__kes=-1.0))]) == EXIT_ADMISSIBILITY
    diverging = _variant(gains__kes=100.0, sim__dt=3.0)
    assert main(["simulate", "--config", _write(tmp_path, diverging), "--out", str(tmp_path)]) == EXIT_NUMERICAL
    undamped = _variant(model__name="mass_spring_damper", model__params={}, gains__kdi=1e-300)
    code = main(["analyze", "--config", _write(tmp_path, undamped), "--out", str(tmp_path)])
    assert code == EXIT_NUMERICAL
    capsys.readouterr()


def test_kint_beyond_margin_is_admissibility_failure(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "manipulator_case_g.json").read_text())
    cfg["gains"]["kint"] = [1.65, 0.645]
    assert main(["tune-damping", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_ADMISSIBILITY
    assert "not PSD" in capsys.readouterr().err


def test_gyroscopic_case_rejected_by_tune_damping(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "manipulator_case_g.json").read_text())
    assert main(["tune-damping", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_ADMISSIBILITY
    assert "J2" in capsys.readouterr().err


def test_tune_damping_manipulator(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "manipulator_case_e.json").read_text())
    assert main(["tune-damping", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["p5_holds"] is False
    assert doc["min_damping_conservative"] >= doc["min_damping_for_p5"] > doc["current_lambda_min_dd"]


def test_dumps_is_strict_json():
    text = dumps({"a": float("inf"), "b": [1, 2.5], "c": None})
    assert json.loads(text) == {"a": "inf", "b": [1, 2.5], "c": None}


def test_determinism_scalar(tmp_path, capsys):
    cfg = _write(tmp_path, _variant(sim__t_final=3.0))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["report", "--config", cfg, "--out", str(out)]) == EXIT_OK
        outs.append(out)
    capsys.readouterr()
    for name in ("trajectory.csv", "circles.csv", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
