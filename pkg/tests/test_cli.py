import json

import pytest

from coopsim.cli import main
from coopsim.config import ConfigError, RunConfig, load_config, resolve_seed


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_prints_usage(capsys):
    code, out, err = run([], capsys)
    assert code == 2 and "usage" in err


@pytest.mark.parametrize("argv", [["fly"], ["bandwidth", "--keypoints", "1", "--dim", "1", "--bogus"],
                                  ["collect", "--out", "x"]])
def test_bad_usage_exits_2(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "usage" in err


def test_bandwidth_full_scale(capsys):
    code, out, _ = run(["bandwidth", "--keypoints", "128", "--dim", "128", "--rate", "10"], capsys)
    assert code == 0
    assert "5.37" in out and "5.10" in out
    assert "62.9" in out and "60.00" in out


def test_bandwidth_rejects_bad_rate(capsys):
    code, _, err = run(["bandwidth", "--keypoints", "1", "--dim", "1", "--rate", "0"], capsys)
    assert code == 2 and "config error" in err


def test_config_defaults_and_roundtrip():
    cfg = RunConfig()
    assert cfg.encoder.input_points == 256 and cfg.training.beta0 == 0.8 and cfg.eval.n_configs == 27
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


@pytest.mark.parametrize("doc", [{"bogus": {}}, {"training": {"lr": 1}}, {"encoder": {"feature_dim": "x",
                                                                                      "keypoints": 3}},
                                 {"scenario": {"kind": "roundabout"}}, {"training": {"beta0": 0}}, []])
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"channel": {"packet_loss": 0.1}}')
    with pytest.raises(ConfigError):
        load_config(bad)
    code, _, err = run(["collect", "--episodes", "1", "--out", str(tmp_path / "o"), "--config", str(bad)], capsys)
    assert code == 2 and "packet_loss" in err
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("COOPSIM_SEED", raising=False)
    assert resolve_seed(None, None) == 7
    assert resolve_seed(None, 11) == 11
    assert resolve_seed(3, 11) == 3
    monkeypatch.setenv("COOPSIM_SEED", "42")
    assert resolve_seed(3, 11) == 42
    monkeypatch.setenv("COOPSIM_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(3, 11)


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    doc = {"encoder": {"feature_dim": 8, "knn_k": 4},
           "training": {"bc_traces": 1, "bc_epochs": 1, "batch_size": 16, "frame_stride": 4},
           "scenario": {"time_limit": 60.0}}
    p = d / "tiny.json"
    p.write_text(json.dumps(doc))
    return p


def test_collect_train_evaluate_render(tmp_path, tiny_config, capsys, monkeypatch):
    monkeypatch.delenv("COOPSIM_SEED", raising=False)
    data = tmp_path / "data"
    code, out, _ = run(["collect", "--scenario", "left_turn", "--episodes", "1", "--accident-fraction", "1",
                        "--seed", "3", "--out", str(data), "--config", str(tiny_config), "--jobs", "1"], capsys)
    assert code == 0, out
    man = json.loads((data / "manifest.json").read_text())
    assert man["traces"][0]["accident"] is True
    echoed = json.loads((data / "run_config.json").read_text())
    assert echoed["training"]["rng_seed"] == 3 and echoed["encoder"]["feature_dim"] == 8

    ckpt = tmp_path / "ckpt" / "coop.cpnp"
    code, out, _ = run(["train", "--config", str(tiny_config), "--data", str(data), "--out", str(ckpt),
                        "--jobs", "1"], capsys)
    assert code == 0, out
    assert ckpt.exists() and (ckpt.parent / "coop.cpnp.run_config.json").exists()

    rep = tmp_path / "report"
    code, out, _ = run(["evaluate", "--models", str(ckpt), "--scenario", "left_turn", "--configs", "1",
                        "--repeats", "1", "--out", str(rep), "--config", str(tiny_config), "--jobs", "1"], capsys)
    assert code == 0
    assert "cooperative" in out and "expert" in out
    for name in ("report.txt", "report.csv", "report.json", "report.png", "run_config.json"):
        assert (rep / name).exists()

    trace = data / "trace_0000.trace"
    code, out, _ = run(["render", "--trace", str(trace), "--frames", "0..2", "--out", str(tmp_path / "img")],
                       capsys)
    assert code == 0 and len(list((tmp_path / "img").glob("*.png"))) == 2
    code, _, _ = run(["render", "--trace", str(trace), "--frames", "5..5", "--out", str(tmp_path / "none")], capsys)
    assert code == 0 and not (tmp_path / "none").exists()
    code, _, err = run(["render", "--trace", str(trace), "--frames", "0..100000", "--out", str(tmp_path / "x")],
                       capsys)
    assert code == 1 and "out of range" in err


def test_runtime_error_exit_1(tmp_path, capsys):
    code, _, err = run(["evaluate", "--models", str(tmp_path / "missing.cpnp"), "--out", str(tmp_path / "r"),
                        "--configs", "1", "--repeats", "1"], capsys)
    assert code == 1 and "error" in err
