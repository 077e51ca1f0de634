import json
import os

import numpy as np
import pytest

from aaustereo import cli
from aaustereo import autodiff as ad
from aaustereo.config import RunConfig
from aaustereo.formats import read_pfm, read_ppm
from aaustereo.model import AAUformer, decode_weights

TINY = {"model": "tiny", "seed": 3, "rds": {"height": 16, "width": 32, "d_background": 2, "d_foreground": 4,
                                            "rect": [12, 4, 24, 12], "seed": 3}}


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture
def sample_dir(tmp_path, tiny_cfg):
    assert cli.main(["synth", "--config", tiny_cfg, "--out", str(tmp_path / "data"), "--name", "rds"]) == 0
    return str(tmp_path / "data" / "rds")


def test_synth_writes_layout(sample_dir):
    assert sorted(os.listdir(sample_dir)) == ["disp.pfm", "left.ppm", "occ.pgm", "right.ppm"]
    assert read_pfm(os.path.join(sample_dir, "disp.pfm")).shape == (16, 32)


def test_infer_writes_outputs(tmp_path, tiny_cfg, sample_dir, capsys):
    out = tmp_path / "pred"
    assert cli.main(["infer", sample_dir, "--config", tiny_cfg, "--out", str(out)]) == 0
    assert read_pfm(out / "disp.pfm").shape == (16, 32)
    occ = read_ppm(out / "occ.pgm", raw=True)
    assert occ.shape == (16, 32) and set(np.unique(occ)) <= {0, 255}
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc) == {"epe", "err3px", "n_pixels", "n_occluded"}
    assert json.loads(capsys.readouterr().out) == doc


def test_infer_is_byte_deterministic(tmp_path, tiny_cfg, sample_dir):
    for name in ("a", "b"):
        assert cli.main(["infer", sample_dir, "--config", tiny_cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "disp.pfm").read_bytes() == (tmp_path / "b" / "disp.pfm").read_bytes()


def test_infer_dumps_attention(tmp_path, tiny_cfg, sample_dir):
    out = tmp_path / "pred"
    assert cli.main(["infer", sample_dir, "--config", tiny_cfg, "--out", str(out), "--dump-attention"]) == 0
    maps = sorted(p for p in os.listdir(out) if p.startswith("attention_"))
    assert maps == ["attention_0.pfm", "attention_1.pfm", "attention_2.pfm", "attention_3.pfm"]
    a = read_pfm(out / "attention_0.pfm")
    w = a.shape[1]
    assert a.shape[0] % w == 0
    assert np.allclose(a.sum(1), 1.0, atol=1e-5)


def test_infer_missing_sample_is_io_error(tmp_path, tiny_cfg):
    assert cli.main(["infer", str(tmp_path / "nope"), "--config", tiny_cfg]) == cli.EXIT_IO


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["synth", "--config", str(tmp_path / "none.json")]) == cli.EXIT_IO


def test_corrupt_image_is_io_error(tmp_path, tiny_cfg, sample_dir):
    with open(os.path.join(sample_dir, "left.ppm"), "wb") as f:
        f.write(b"P6\n32 16\n255\n\x00")
    assert cli.main(["infer", sample_dir, "--config", tiny_cfg, "--out", str(tmp_path)]) == cli.EXIT_IO


def test_oversized_input_is_shape_error(tmp_path, tiny_cfg):
    big = dict(TINY, rds=dict(TINY["rds"], height=32, width=64))
    p = tmp_path / "big.json"
    p.write_text(json.dumps(big))
    assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path), "--name", "big"]) == 0
    assert cli.main(["infer", str(tmp_path / "big"), "--config", tiny_cfg, "--out", str(tmp_path)]) == cli.EXIT_SHAPE


def test_unknown_config_key_is_shape_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"modle": "tiny"}')
    assert cli.main(["synth", "--config", str(p)]) == cli.EXIT_SHAPE


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    groups = [l for l in lines if l.startswith(("PASS", "FAIL"))]
    assert len(groups) >= 8 and all(l.startswith("PASS") for l in groups)


def test_selftest_reports_injected_fault(capsys):
    assert cli.main(["selftest", "--fault", "softmax-sign"]) == cli.EXIT_SELFTEST
    out = capsys.readouterr().out
    assert "FAIL attention" in out
    assert not ad.FAULTS


def test_zero_step_training_saves_initial_weights(tmp_path, tiny_cfg):
    assert cli.main(["train-toy", "--config", tiny_cfg, "--steps", "0", "--out", str(tmp_path)]) == 0
    stored = dict(decode_weights((tmp_path / "weights.aauw").read_bytes()))
    cfg = RunConfig.load(tiny_cfg)
    fresh = dict(AAUformer(cfg.model, seed=cfg.seed).named_parameters())
    assert stored.keys() == fresh.keys()
    for name, arr in stored.items():
        assert np.array_equal(arr, fresh[name].data.astype(np.float32))
    assert (tmp_path / "loss.csv").read_text().splitlines() == ["step,rr,d1_raw,d1_final,be_final,total"]


def test_short_training_logs_every_component(tmp_path, tiny_cfg, capsys):
    assert cli.main(["train-toy", "--config", tiny_cfg, "--steps", "2", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("1,")
    assert all(np.isfinite(float(v)) for v in rows[2].split(","))
    assert "step    2 rr=" in capsys.readouterr().out


def test_divergence_exits_4_with_step(tmp_path, tiny_cfg, monkeypatch, capsys):
    from aaustereo import train

    real = train.compute_losses
    calls = []

    def poisoned(*a):
        calls.append(1)
        losses = real(*a)
        if len(calls) == 3:
            losses["d1_final"] = losses["d1_final"] * np.nan
        return losses

    monkeypatch.setattr(train, "compute_losses", poisoned)
    assert cli.main(["train-toy", "--config", tiny_cfg, "--steps", "5", "--out", str(tmp_path)]) == cli.EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "divergence" in err and "step 3" in err and "d1_final" in err


def test_flops_command(capsys):
    assert cli.main(["flops", "--h", "2", "--w", "2", "--C", "1", "--M", "2"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["omega_isa"], doc["omega_wsa"]) == (32, 48)
    assert cli.main(["flops", "--h", "14", "--w", "14", "--C", "8", "--M", "7", "--measure"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["measured_wsa"] == doc["omega_wsa"]


def test_affine_command(tmp_path, sample_dir):
    src = os.path.join(sample_dir, "left.ppm")
    assert cli.main(["affine", src, "--matrix", "1,0,2,0,1,0", "--out", str(tmp_path), "--name", "moved.ppm"]) == 0
    a, b = read_ppm(src, raw=True), read_ppm(tmp_path / "moved.ppm", raw=True)
    assert np.array_equal(b[:, 2:], a[:, :-2])
    assert cli.main(["affine", src, "--matrix", "1,2,0,2,4,0", "--out", str(tmp_path)]) == cli.EXIT_SHAPE
    assert cli.main(["affine", src, "--matrix", "1,0,0", "--out", str(tmp_path)]) == cli.EXIT_SHAPE


def test_pca_command(tmp_path, tiny_cfg, sample_dir, capsys):
    assert cli.main(["pca", sample_dir, "--config", tiny_cfg, "--row", "3", "--k", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "pca_left.csv").exists() and (tmp_path / "pca_right.csv").exists()
    ratios = [float(v) for v in capsys.readouterr().out.splitlines()[0].split()[1:]]
    assert len(ratios) == 2 and ratios[0] >= ratios[1] >= 0 and sum(ratios) <= 1 + 1e-9
