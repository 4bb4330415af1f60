import csv
import json

import numpy as np
import pytest

from ernn_se import cli
from ernn_se.audio import load_wav, save_wav
from ernn_se.checkpoint import load_checkpoint, save_checkpoint
from ernn_se.model import MaskModel, ModelConfig
from ernn_se.synthetic import make_pairs


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def last_json(text):
    start = text.rfind("\n{")
    return json.loads(text[start + 1 if start >= 0 else 0 :])


@pytest.fixture
def toy_data(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    for p in make_pairs(2, seed=4, length=8000):
        save_wav(d / f"{p.id}_noisy.wav", p.noisy)
        save_wav(d / f"{p.id}_clean.wav", p.clean)
    return d


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("ERNN_SEED", raising=False)
    assert cli.resolve_config() == cli.DEFAULTS
    monkeypatch.setenv("ERNN_SEED", "17")
    assert cli.resolve_config()["seed"] == 17
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "epochs": 5, "lr": 0.5}))
    cfg = cli.resolve_config(path, {"epochs": 9, "lr": None})
    assert (cfg["seed"], cfg["epochs"], cfg["lr"]) == (3, 9, 0.5)
    for key, value in cli.DEFAULTS.items():
        if key in ("seed", "epochs", "lr"):
            continue
        assert cfg[key] == value, key
    path.write_text(json.dumps({"epoch": 5}))
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(path)
    monkeypatch.setenv("ERNN_SEED", "abc")
    with pytest.raises(cli.ConfigError):
        cli.resolve_config()


def test_train_missing_dataset(capsys, tmp_path):
    missing = tmp_path / "nowhere"
    code, _, err = run(capsys, "train", "--data", str(missing))
    assert code == 2
    assert str(missing) in err
    code, _, err = run(capsys, "train")
    assert code == 2


def test_train_smoke_and_determinism(capsys, tmp_path, toy_data):
    ckpts = []
    for run_id in ("a", "b"):
        out_dir = tmp_path / run_id
        code, out, _ = run(
            capsys, "train", "--data", str(toy_data), "--out-dir", str(out_dir), "--epochs", "1",
            "--ns", "16", "--nh", "8", "--k", "2", "--seed", "5", "--threads", "1",
        )
        assert code == 0
        assert json.loads(out.splitlines()[0])["epoch"] == 1
        ckpts.append(out_dir / "final.ckpt")
    model = load_checkpoint(ckpts[0])
    assert model.cfg == ModelConfig("ernn", 16, 8, 2, seed=5)
    assert ckpts[0].read_bytes() == ckpts[1].read_bytes()


def test_train_config_file(capsys, tmp_path, toy_data):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"data": str(toy_data), "out_dir": str(tmp_path / "o"), "epochs": 1, "n_state": 8, "n_hidden": 4}))
    summary = tmp_path / "summary.json"
    assert run(capsys, "train", "--config", str(conf), "--arch", "lstm2", "--out", str(summary))[0] == 0
    s = json.loads(summary.read_text())
    assert s["epochs"] == 1 and s["config"]["arch"] == "lstm2"
    assert load_checkpoint(tmp_path / "o" / "final.ckpt").cfg.arch == "lstm2"


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(MaskModel(ModelConfig(n_state=16, n_hidden=8, iterations=2, seed=2)), path)
    return path


def test_enhance_offline_and_stream(capsys, tmp_path, checkpoint):
    x = make_pairs(1, seed=8, length=12345)[0].noisy
    save_wav(tmp_path / "in.wav", x)
    code, out, _ = run(capsys, "enhance", str(checkpoint), str(tmp_path / "in.wav"), str(tmp_path / "off.wav"))
    assert code == 0 and json.loads(out)["mode"] == "offline"
    code, out, _ = run(capsys, "enhance", str(checkpoint), str(tmp_path / "in.wav"), str(tmp_path / "st.wav"), "--stream", "--chunk", "160")
    assert code == 0
    report = json.loads(out)
    assert report["samples"] == 12345 and report["rtf"] > 0
    a, b = load_wav(tmp_path / "off.wav"), load_wav(tmp_path / "st.wav")
    assert len(a) == len(b) == 12345
    # 16-bit quantization of nearly equal signals: at most one LSB apart
    assert np.max(np.abs(a - b)) <= 1 / 32768


def test_enhance_silence(capsys, tmp_path, checkpoint):
    save_wav(tmp_path / "z.wav", np.zeros(5000))
    assert run(capsys, "enhance", str(checkpoint), str(tmp_path / "z.wav"), str(tmp_path / "y.wav"), "--stream")[0] == 0
    assert not np.any(load_wav(tmp_path / "y.wav"))


def test_enhance_errors(capsys, tmp_path, checkpoint):
    save_wav(tmp_path / "in.wav", np.zeros(100))
    (tmp_path / "bad.ckpt").write_bytes(b"garbage-file-contents")
    assert run(capsys, "enhance", str(tmp_path / "bad.ckpt"), str(tmp_path / "in.wav"), str(tmp_path / "o.wav"))[0] == 2
    assert run(capsys, "enhance", str(checkpoint), str(tmp_path / "missing.wav"), str(tmp_path / "o.wav"))[0] == 2


@pytest.mark.parametrize(
    "argv,exact,rounded",
    [
        (["--arch", "ernn", "--ns", "256", "--nh", "256", "--k", "3"], 329_476, "329k"),
        (["--arch", "lstm2", "--ns", "512"], 3_808_001, "3.81M"),
        (["--arch", "ernn", "--ns", "512", "--nh", "512", "--k", "5"], None, "1.05M"),
    ],
)
def test_params(capsys, argv, exact, rounded):
    code, out, _ = run(capsys, "params", *argv)
    report = json.loads(out)
    assert code == 0 and report["rounded"] == rounded
    if exact is not None:
        assert report["parameters"] == exact


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--probes", "60")
    report = json.loads(out)
    assert code == 0
    assert report["max_rel_err"] < 1e-4
    assert set(report["per_model"]) == {"ernn", "lstm2"}


def test_bench_command(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--ns", "16", "--nh", "8", "--k", "1", "--repetitions", "1", "--length", "25", "--trace-state", "16", "--out-dir", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["rtf"]["ernn_ns16_nh8_k1"]["rtf"] > 0
    with open(tmp_path / "gradient_norms.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"distance", "ernn", "lstm", "vanilla"}
    assert len(rows) == 26
    assert float(rows[20]["vanilla"]) < 1e-6
