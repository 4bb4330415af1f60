import json
import struct
import wave

import numpy as np
import pytest

from ernn_se import dsp
from ernn_se.audio import WavChannelError, WavFormatError, WavRateError, load_wav, save_wav
from ernn_se.model import MaskModel, ModelConfig
from ernn_se.numerics import Tensor, grad_check
from ernn_se.synthetic import make_pairs
from ernn_se.training import (
    DatasetError,
    TrainConfig,
    TrainingDivergedError,
    UtterancePair,
    load_dataset,
    mae_time_loss,
    masked_mae,
    sample_segment,
    train,
)


def write_pcm(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype={1: np.uint8, 2: "<i2"}[width]).tobytes())


def write_float(path, samples, rate=16000):
    data = np.asarray(samples, "<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, rate, rate * 4, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_load_pcm16_scaling(tmp_path):
    write_pcm(tmp_path / "a.wav", [0, 16384, -32768])
    x = load_wav(tmp_path / "a.wav")
    assert x.dtype == np.float32
    np.testing.assert_array_equal(x, [0.0, 0.5, -1.0])


def test_load_float32(tmp_path):
    write_float(tmp_path / "f.wav", [0.25, -0.75, 1.5])
    np.testing.assert_array_equal(load_wav(tmp_path / "f.wav"), [0.25, -0.75, 1.5])


def test_load_errors(tmp_path):
    write_pcm(tmp_path / "r.wav", [0, 1], rate=48000)
    with pytest.raises(WavRateError):
        load_wav(tmp_path / "r.wav")
    write_pcm(tmp_path / "s.wav", [0, 1, 2, 3], channels=2)
    with pytest.raises(WavChannelError):
        load_wav(tmp_path / "s.wav")
    write_pcm(tmp_path / "u8.wav", [128, 129], width=1)
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "u8.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "junk.wav")


def test_save_wav_round_trip_and_clipping(tmp_path):
    x = np.array([0.0, 0.5, -1.0, 0.25])
    assert save_wav(tmp_path / "o.wav", x) == 0
    np.testing.assert_array_equal(load_wav(tmp_path / "o.wav"), x)
    assert save_wav(tmp_path / "c.wav", [2.0, -3.0, 0.1]) == 2
    y = load_wav(tmp_path / "c.wav")
    assert y[0] == 32767 / 32768 and y[1] == -1.0


def test_utterance_pair_length_check():
    with pytest.raises(DatasetError):
        UtterancePair(np.zeros(10), np.zeros(11), "x")


def test_sample_segment_contract():
    rng = np.random.default_rng(0)
    p = UtterancePair(np.arange(16000.0), np.arange(16000.0) * 2, "a")
    n, c = sample_segment(p, rng)
    np.testing.assert_array_equal(n, p.noisy)
    short = UtterancePair(np.ones(8000), np.full(8000, 2.0), "b")
    n, c = sample_segment(short, rng)
    assert len(n) == len(c) == 16000
    assert np.all(n[:8000] == 1) and np.all(n[8000:] == 0) and np.all(c[8000:] == 0)
    long = UtterancePair(np.arange(40000.0), -np.arange(40000.0), "c")
    a = sample_segment(long, np.random.default_rng(5))
    b = sample_segment(long, np.random.default_rng(5))
    np.testing.assert_array_equal(a[0], b[0])
    # identical offset for both waveforms
    np.testing.assert_array_equal(a[1], -a[0])
    assert a[0][1] - a[0][0] == 1


def _loss_with_mask(value, s, x):
    X = dsp.stft(x)
    return float(masked_mae(Tensor(np.full(X.shape, value)), X, s).data)


def test_mae_examples():
    s = np.random.default_rng(1).standard_normal(4000)
    assert _loss_with_mask(1.0, s, s) < 1e-9
    assert _loss_with_mask(0.0, s, s) == pytest.approx(np.mean(np.abs(s)), rel=1e-12)
    # an estimate equal to s + d gives loss d: the unit mask reproduces x = s + d
    d = 0.3
    assert _loss_with_mask(1.0, s, s + d) == pytest.approx(d, abs=1e-9)


def test_mae_length_mismatch():
    with pytest.raises(ValueError):
        mae_time_loss(np.zeros(800), np.zeros(801), MaskModel(ModelConfig(n_state=8, n_hidden=4, iterations=1)))


def test_end_to_end_gradient_matches_finite_differences():
    model = MaskModel(ModelConfig(n_state=8, n_hidden=4, iterations=2, seed=2), np.float64)
    pair = make_pairs(1, seed=3, length=800)[0]
    s, x = pair.clean.astype(np.float64), pair.noisy.astype(np.float64)
    assert grad_check(lambda: mae_time_loss(s, x, model), model.store, probes=150, include=["ernn.eta"]) < 1e-4


def test_batch_loss_is_mean_of_items():
    model = MaskModel(ModelConfig(n_state=8, n_hidden=4, iterations=1), np.float64)
    pairs = make_pairs(3, seed=4, length=1600)
    s = np.stack([p.clean for p in pairs]).astype(np.float64)
    x = np.stack([p.noisy for p in pairs]).astype(np.float64)
    single = [float(mae_time_loss(s[i], x[i], model).data) for i in range(3)]
    assert float(mae_time_loss(s, x, model).data) == pytest.approx(np.mean(single), rel=1e-12)
    perm = [2, 0, 1]
    assert float(mae_time_loss(s[perm], x[perm], model).data) == pytest.approx(np.mean(single), rel=1e-12)


def _small():
    return MaskModel(ModelConfig(n_state=16, n_hidden=8, iterations=2, seed=1))


def test_smoke_run_loss_decreases():
    clean = make_pairs(1, seed=9, length=4000)[0].clean
    pair = UtterancePair(clean, clean.copy(), "same")
    cfg = TrainConfig(batch_size=1, segment_length=4000, epochs=40, lr=1e-3)
    losses = train([pair], _small(), cfg).losses
    half_mask = _loss_with_mask(0.5, clean.astype(np.float64), clean.astype(np.float64))
    assert losses[0] == pytest.approx(half_mask, rel=0.25)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_training_is_deterministic(tmp_path):
    data = make_pairs(5, seed=1, length=6000)
    cfg = TrainConfig(batch_size=2, segment_length=4000, epochs=2, seed=3)
    a, b = _small(), _small()
    ra = train(data, a, cfg)
    rb = train(data, b, cfg)
    assert ra.losses == rb.losses
    assert ra.steps == 2 * 3  # last partial batch kept
    for p in a.store:
        assert p.data.tobytes() == b.store[p.name].data.tobytes()


def test_training_writes_report_and_checkpoints(tmp_path):
    data = make_pairs(2, seed=1, length=4000)
    cfg = TrainConfig(batch_size=16, segment_length=4000, epochs=3, checkpoint_every=2)
    train(data, _small(), cfg, out_dir=tmp_path)
    lines = [json.loads(line) for line in (tmp_path / "report.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [1, 2, 3]
    assert all({"loss", "wall_time"} <= set(e) for e in lines)
    assert (tmp_path / "epoch_0002.ckpt").exists() and (tmp_path / "final.ckpt").exists()
    assert not (tmp_path / "epoch_0001.ckpt").exists()


def test_divergence_reports_location():
    model = _small()
    model.store["head.b"].data[0] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(make_pairs(1, length=4000), model, TrainConfig(segment_length=4000, epochs=1))
    assert err.value.epoch == 1 and err.value.batch == 0
    with pytest.raises(DatasetError):
        train([], _small(), TrainConfig(epochs=1))


def test_load_dataset_directory_and_manifest(tmp_path):
    for uid in ("p1", "p2"):
        write_pcm(tmp_path / f"{uid}_noisy.wav", [1, 2, 3])
        write_pcm(tmp_path / f"{uid}_clean.wav", [4, 5, 6])
    pairs = load_dataset(tmp_path)
    assert [p.id for p in pairs] == ["p1", "p2"]
    np.testing.assert_array_equal(pairs[0].clean * 32768, [4, 5, 6])
    (tmp_path / "list.tsv").write_text("p2_noisy.wav\tp2_clean.wav\n\n")
    assert len(load_dataset(tmp_path / "list.tsv")) == 1
    (tmp_path / "bad.tsv").write_text("only-one-column\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "bad.tsv")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")
    (tmp_path / "p3_noisy.wav").write_bytes((tmp_path / "p1_noisy.wav").read_bytes())
    with pytest.raises(DatasetError, match="p3_clean"):
        load_dataset(tmp_path)
