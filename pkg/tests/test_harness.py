import json

import numpy as np
import pytest

from tiltsde.errors import ConfigError, DomainError, InvalidArgumentError
from tiltsde.harness import ExperimentConfig, cmd_finetune, cmd_sample_pretrained, cmd_sweep, cmd_validate
from tiltsde.harness.cli import main
from tiltsde.harness.io import SWEEP_COLUMNS, read_grid, read_samples_csv


def small(name="linear-gaussian", out=None, **sim):
    cfg = ExperimentConfig.from_instance(name)
    cfg.simulation.n_paths = sim.get("n_paths", 5000)
    cfg.simulation.check_paths = sim.get("check_paths", 2000)
    if out is not None:
        cfg.outputs = str(out)
    return cfg


def test_config_round_trip(tmp_path):
    cfg = small("bimodal-gamma")
    cfg.sweep.alpha = [0.5, 2.0]
    again = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    assert again.digest() == cfg.digest()


@pytest.mark.parametrize(
    "patch, path",
    [
        ({"model": {"colour": 1}}, "model.colour"),
        ({"bogus": 1}, "bogus"),
        ({"simulation": {"n_paths": 0}}, "simulation.n_paths"),
        ({"alpha": -1.0}, "alpha"),
        ({"divergence": {"name": "gamma", "gamma": 1.5}}, "divergence.gamma"),
        ({"reward": {"name": "nope"}}, "reward.name"),
        ({"grid": {"lower": [-5.0]}}, "grid"),
    ],
)
def test_config_errors_name_the_field(patch, path):
    data = ExperimentConfig().to_dict()
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(data)
    assert err.value.path == path


def test_config_default_command(tmp_path, capsys):
    assert main(["config", "default"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert ExperimentConfig.from_dict(printed) == ExperimentConfig()
    assert main(["config", "default", "--instance", "planar-kl", "--out", str(tmp_path / "p.json")]) == 0
    assert ExperimentConfig.load(tmp_path / "p.json").name == "planar-kl"


def test_cli_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["finetune", "--config", str(bad)]) == 2
    assert "invalid JSON" in capsys.readouterr().err
    bad.write_text(json.dumps({"simulation": {"n_paths": 0}}))
    assert main(["validate", "--config", str(bad)]) == 2
    assert "simulation.n_paths" in capsys.readouterr().err


def test_cli_rejects_bad_flags():
    with pytest.raises(SystemExit) as err:
        main(["finetune", "--seed", "-1"])
    assert err.value.code == 2
    with pytest.raises(SystemExit):
        main(["finetune", "--paths", "0"])


def test_gamma_domain_error_names_threshold(tmp_path, capsys):
    # bimodal-kl has r in [0, 2]; alpha/gamma = 2 sits on the upper bound
    cfg = small("bimodal-kl", tmp_path)
    cfg.divergence.name, cfg.divergence.gamma = "gamma", 0.5
    with pytest.raises(DomainError, match="alpha/gamma = 2"):
        cmd_finetune(cfg)
    code = main(["finetune", "--instance", "bimodal-kl", "--divergence", "gamma", "--gamma", "0.5",
                 "--out", str(tmp_path)])
    assert code == 2 and "alpha/gamma" in capsys.readouterr().err


def test_finetune_outputs(tmp_path):
    res = cmd_finetune(small(out=tmp_path))
    m = res.metrics
    assert m["tv_to_target"] <= 0.05
    assert m["kl_to_pre"] == pytest.approx(0.5, abs=1e-3)
    for name in ("samples.csv", "values.grid", "metrics.json", "bounds.json", "manifest.json"):
        assert (tmp_path / name).exists()
    pts, lw = read_samples_csv(tmp_path / "samples.csv")
    assert pts.shape == (5000, 1) and lw is None
    header, values = read_grid(tmp_path / "values.grid")
    assert values.shape[0] == len(header["levels"]) <= 65
    assert header["levels"][0] == 0 and header["levels"][-1] == res.problem.n_steps
    np.testing.assert_array_equal(values[-1], res.problem.value_field.v[-1])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_sha256"] == small(out=tmp_path).digest()
    assert manifest["csv_schemas"]["samples"] == "samples/1"
    bounds = json.loads((tmp_path / "bounds.json").read_text())
    assert bounds["tvd"]["holds"] and len(bounds["pinsker"]) == 3


def test_metrics_are_reproducible(tmp_path):
    a = cmd_finetune(small(out=tmp_path / "a"))
    b = cmd_finetune(small(out=tmp_path / "a"))
    assert a.metrics == b.metrics
    cmd_finetune(small(out=tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()


def test_sweep_rows_and_bytes(tmp_path):
    runs = []
    for d in ("x", "y"):
        res = cmd_sweep(small(out=tmp_path / d), "alpha")
        runs.append((tmp_path / d / "sweep_alpha.csv").read_bytes())
    assert runs[0] == runs[1]
    lines = runs[0].decode().splitlines()
    assert lines[0].split(",") == SWEEP_COLUMNS
    assert len(lines) == 4
    rows = res.metrics["rows"]
    # tilting less as alpha grows: both the grid mean reward and the KL shrink
    means = [r["grid_mean_reward"] for r in rows]
    kls = [r["kl_to_pre"] for r in rows]
    assert means == sorted(means, reverse=True) and kls == sorted(kls, reverse=True)
    assert all(line.split(",")[6] == "" for line in lines[1:])


def test_sweep_gamma_at_large_alpha(tmp_path):
    cfg = small("bimodal-kl", tmp_path)
    cfg.alpha = 10.0
    rows = cmd_sweep(cfg, "gamma").metrics["rows"]
    assert [r["value"] for r in rows] == [0.25, 0.5, 1.0]
    assert all(np.isfinite([r["mean_reward"], r["kl_to_pre"], r["tv_to_target"]]).all() for r in rows)


def test_sweep_divergence_on_bounded_reward(tmp_path):
    rows = cmd_sweep(small("bimodal-forward-kl", tmp_path), "divergence").metrics["rows"]
    assert [r["value"] for r in rows] == ["kl", "forward-kl"]
    assert all(np.isfinite(r["kl_to_pre"]) for r in rows)


def test_sweep_errors(tmp_path):
    with pytest.raises(InvalidArgumentError):
        cmd_sweep(small(out=tmp_path), "alpha", [])
    with pytest.raises(ValueError):
        cmd_sweep(small(out=tmp_path), "beta")


def test_validate_small_config(tmp_path, capsys):
    res = cmd_validate(small(out=tmp_path))
    assert res.passed, [c for c in res.checks if not c["passed"]]
    assert res.metrics["n_failed"] == 0 and res.metrics["n_checks"] == len(res.checks)
    code = main(["validate", "--instance", "linear-gaussian", "--paths", "5000", "--out", str(tmp_path / "cli")])
    assert code == 0
    assert "0 of" in capsys.readouterr().out


def test_score_error_degrades_pretrained_sampler(tmp_path):
    tv = {}
    for eps in (0.0, 0.5):
        cfg = ExperimentConfig()
        cfg.epsilon = eps
        cfg.outputs = str(tmp_path / str(eps))
        tv[eps] = cmd_sample_pretrained(cfg).metrics["tv_to_data"]
    assert tv[0.0] <= 0.03
    assert tv[0.5] > tv[0.0]


def test_validate_with_score_error_is_informational(tmp_path):
    cfg = small("bimodal-kl", tmp_path)
    cfg.epsilon = 0.5
    res = cmd_validate(cfg, write=False)
    by_name = {c["name"]: c for c in res.checks}
    assert by_name["pretrained_fidelity"]["informational"]
    assert by_name["pretrained_fidelity"]["detail"]["tv"] > 0.1
