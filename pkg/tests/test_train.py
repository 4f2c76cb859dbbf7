import json

import numpy as np
import pytest

from sfps.errors import ConfigError
from sfps.harness.config import config_from_dict
from sfps.harness.data import write_cifar10_file
from sfps.harness.train import build_dataset, sfb_floats_note, train
from sfps.harness.models import skewed_fc8


def cfg(**over):
    d = {
        "iters": 4,
        "model": {"input_shape": [8], "classes": 4, "layers": [{"type": "fc", "units": 4}, {"type": "softmax_loss"}]},
        "cluster": {"workers": 2, "batch_size": 4},
        "data": {"dim": 8, "classes": 4, "n": 100},
    }
    d.update(over)
    return config_from_dict(d)


def test_synthetic_must_match_model():
    with pytest.raises(ConfigError):
        build_dataset(cfg(data={"dim": 9, "classes": 4}))


def test_missing_cifar(monkeypatch, tmp_path):
    monkeypatch.delenv("CIFAR10_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HOME", str(tmp_path))
    c = cfg(model={"input_shape": [3, 32, 32], "classes": 10, "layers": [{"type": "fc", "units": 10}, {"type": "softmax_loss"}]},
            data={"source": "cifar10"})
    with pytest.raises(ConfigError):
        build_dataset(c)


def test_cifar_pipeline_on_fake_files(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 64)
    write_cifar10_file(tmp_path / "data_batch_1.bin", rng.integers(0, 256, (64, 3072)), labels)
    c = config_from_dict(
        {
            "iters": 3,
            "precision": 32,
            "model": {"input_shape": [3, 32, 32], "classes": 10,
                      "layers": [{"type": "conv", "channels": 2, "kernel": 5, "pad": 2}, {"type": "relu"},
                                 {"type": "maxpool", "size": 4}, {"type": "fc", "units": 10},
                                 {"type": "softmax_loss"}]},
            "cluster": {"workers": 2, "batch_size": 4},
            "data": {"source": "cifar10", "path": str(tmp_path), "limit": 40},
        }
    )
    res = train(c)
    assert len(res.records) == 3 and all(np.isfinite(res.losses))
    assert res.records[0]["decisions"]["1"] == "full-ps"


def test_sfb_note_shows_divergence():
    spec = skewed_fc8()
    note = sfb_floats_note(spec, 4, 8, 15)
    M, N = spec.profile(15).M, spec.profile(15).N
    assert note["formula"] == 9 * 8 * (M + N)
    assert note["unicast"] == 12 * (8 * (M + N) + M)


def test_metrics_files(tmp_path):
    out = {"metrics": str(tmp_path / "m.jsonl"), "curve": str(tmp_path / "c.csv")}
    res = train(cfg(output=out))
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert [json.loads(l)["iteration"] for l in lines] == [1, 2, 3, 4]
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5
    assert res.checkpoint_digest is None


def test_resume_validation(tmp_path):
    c = cfg(output={"checkpoint": str(tmp_path / "a.ckpt")})
    train(c)
    with pytest.raises(ConfigError):
        train(c.replace(resume=str(tmp_path / "a.ckpt")))  # nothing left to do
    with pytest.raises(ConfigError):
        train(c.replace(resume=str(tmp_path / "a.ckpt"), iters=8, workers=3))
