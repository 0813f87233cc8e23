import base64
import csv
import json
import re

import numpy as np
import pytest

from diffplan import cli


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Smoke pipeline: 100 simulated scenarios and a briefly trained model."""
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.toml"
    cfg.write_text(f'seed = 5\nout = "{out.as_posix()}"\nyears = 1\nM = 100\n\n'
                   "[train]\nn_steps = 20\nepochs = 5\n")
    assert cli.main(["simulate", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return out, cfg


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_writes_header_and_rows(pipeline):
    out, _ = pipeline
    assert len(rows(out / "dataset.csv")) == 101
    manifest = json.loads((out / "dataset.csv.manifest.json").read_text())
    assert manifest["seed"] == 5 and "wall_time_s" in manifest


def test_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--M", "30", "--seed", "3", "--out", str(tmp_path / name),
                         "--deterministic"]) == 0
    assert (tmp_path / "a/dataset.csv").read_bytes() == (tmp_path / "b/dataset.csv").read_bytes()


def test_train_then_sample(pipeline):
    out, cfg = pipeline
    assert cli.main(["sample", "--config", str(cfg), "--policy", "1,0.5,0,0", "--n", "3", "--jacobian"]) == 0
    scen = rows(out / "scenario.csv")
    assert scen[0] == ["hour", "scenario_0", "scenario_1", "scenario_2"]
    assert len(scen) == 25
    jac = rows(out / "jacobian.csv")
    assert jac[0] == ["hour", "load", "d_ev_adopt", "d_ev_flex", "d_hp_adopt", "d_hp_eff"]
    assert len(jac) == 25


def test_sample_is_byte_identical(pipeline, tmp_path):
    out, cfg = pipeline
    assert cli.main(["sample", "--config", str(cfg), "--n", "2"]) == 0
    first = (out / "scenario.csv").read_bytes()
    assert cli.main(["sample", "--config", str(cfg), "--n", "2"]) == 0
    assert (out / "scenario.csv").read_bytes() == first


def test_plan_with_zero_rate_is_constant(pipeline):
    out, cfg = pipeline
    assert cli.main(["plan", "--config", str(cfg), "--lambda", "0", "--iters", "25"]) == 0
    table = rows(out / "trajectory.csv")
    header, data = table[0], np.array(table[1:], float)
    assert header[:2] == ["iter", "J_hat"]
    fixed = [i for i, h in enumerate(header) if h.startswith(("pi_", "eta_"))]
    assert np.all(data[:, fixed] == data[0, fixed])


def test_plan_is_byte_identical(pipeline):
    out, cfg = pipeline
    args = ["plan", "--config", str(cfg), "--iters", "8"]
    assert cli.main(args) == 0
    first = (out / "trajectory.csv").read_bytes()
    assert cli.main(args) == 0
    assert (out / "trajectory.csv").read_bytes() == first


def test_grad_check_passes_on_fresh_pipeline(pipeline, capsys):
    _, cfg = pipeline
    assert cli.main(["grad-check", "--config", str(cfg), "--triples", "2", "--perturbations", "10"]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == 3 and "all checks passed" in text


def test_grad_check_zero_tolerance_fails(pipeline, capsys):
    _, cfg = pipeline
    code = cli.main(["grad-check", "--config", str(cfg), "--tol", "0", "--triples", "1", "--perturbations", "3"])
    assert code == cli.EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_grad_check_flags_bit_flipped_model(pipeline, tmp_path, capsys):
    out, cfg = pipeline
    doc = json.loads((out / "model.json").read_text())
    raw = bytearray(base64.b64decode(doc["arrays"]["param.W2"]["data"]))
    raw[40] ^= 0x01
    doc["arrays"]["param.W2"]["data"] = base64.b64encode(bytes(raw)).decode()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    code = cli.main(["grad-check", "--config", str(cfg), "--model", str(bad), "--triples", "1",
                     "--perturbations", "3"])
    assert code == cli.EXIT_NUMERIC
    assert "FAIL model checksum" in capsys.readouterr().out


def test_plot_scenario_has_one_24_vertex_polyline(tmp_path):
    src = tmp_path / "scenario.csv"
    src.write_text("hour,scenario_0\n" + "".join(f"{t},{1 + 0.1 * t}\n" for t in range(24)))
    assert cli.main(["plot", str(src), "--kind", "scenario"]) == 0
    svg = (tmp_path / "scenario.svg").read_text()
    lines = re.findall(r'<polyline points="([^"]*)"', svg)
    assert len(lines) == 1 and len(lines[0].split()) == 24


def test_plot_trajectory_has_four_panels(pipeline, tmp_path):
    out, cfg = pipeline
    assert cli.main(["plan", "--config", str(cfg), "--iters", "5"]) == 0
    target = tmp_path / "traj.svg"
    assert cli.main(["plot", str(out / "trajectory.csv"), "--kind", "trajectory", "-o", str(target)]) == 0
    svg = target.read_text()
    for title in ("(a) objective", "(b) policy", "(c) generator additions", "(d) branch additions"):
        assert title in svg


def test_plot_gradient_arrows(pipeline, tmp_path):
    out, cfg = pipeline
    assert cli.main(["sample", "--config", str(cfg), "--jacobian"]) == 0
    target = tmp_path / "arrows.svg"
    assert cli.main(["plot", str(out / "jacobian.csv"), "--kind", "gradient-arrows", "-o", str(target)]) == 0
    assert target.read_text().count("<polyline") == 4


def test_plot_empty_csv_writes_nothing(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("")
    assert cli.main(["plot", str(src), "--kind", "scenario"]) == cli.EXIT_INPUT
    assert not (tmp_path / "empty.svg").exists()


def test_plot_schema_mismatch(tmp_path):
    src = tmp_path / "x.csv"
    src.write_text("a,b\n1,2\n")
    assert cli.main(["plot", str(src), "--kind", "trajectory"]) == cli.EXIT_INPUT


def test_exit_codes_are_distinct(tmp_path):
    codes = {cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_INPUT, cli.EXIT_NUMERIC}
    assert len(codes) == 4
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.toml")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_INPUT
    assert cli.main(["sample", "--out", str(tmp_path), "--policy", "2,0,0,0"]) in (cli.EXIT_CONFIG, cli.EXIT_INPUT)
    assert cli.main(["nonsense"]) == cli.EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("bogus = 1\n")
    assert cli.main(["simulate", "--config", str(cfg)]) == cli.EXIT_CONFIG


def test_bad_pin(pipeline):
    _, cfg = pipeline
    assert cli.main(["plan", "--config", str(cfg), "--pin", "pi_nothing=1"]) == cli.EXIT_CONFIG


def test_policy_parsing():
    assert cli.parse_policy("1,0,0.5,0").tolist() == [1, 0, 0.5, 0]
    with pytest.raises(cli.ConfigError):
        cli.parse_policy("1,0")
    assert cli.parse_pins(["pi_ev_flex=0.3"]) == {"ev_flex": 0.3}


def test_stage_seeds_are_distinct():
    seeds = {cli.stage_seed(0, s) for s in cli.STREAMS}
    assert len(seeds) == len(cli.STREAMS)
