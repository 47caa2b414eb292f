import numpy as np
import pytest
import torch

from unidistill import checkpoint as ckpt
from unidistill.data import TaskSpec
from unidistill.errors import ConfigurationError, IntegrityError, ShapeError
from unidistill.models import (
    IdentityAdapter,
    build_encoder,
    build_single_task_model,
    build_universal_model,
    forward_universal,
    freeze_and_checksum,
    make_adapter,
    param_checksum,
)

SEG = TaskSpec("seg", "dense", 5, 32, 32, "cross_entropy", "miou", False)
DEPTH = TaskSpec("depth", "dense", 1, 32, 32, "l1", "abs_err", True)
NORMALS = TaskSpec("normals", "dense", 3, 32, 32, "cosine_normals", "mean_angle_err", True)
CLS = TaskSpec("d0", "classification", 4, 1, 1, "cross_entropy", "accuracy", False)
CLS2 = TaskSpec("d1", "classification", 4, 1, 1, "cross_entropy", "accuracy", False)


def test_encoder_shapes():
    enc = build_encoder("dense", 32, seed=0)
    out = enc(torch.zeros(2, 3, 32, 32))
    assert out.shape == (2, 32, 8, 8)
    enc_c = build_encoder("classification", 64, seed=0)
    out_c = enc_c(torch.zeros(2, 3, 32, 32))
    assert out_c.shape == (2, 64)


def test_encoder_validation():
    with pytest.raises(ConfigurationError):
        build_encoder("dense", 4, seed=0)
    with pytest.raises(ConfigurationError):
        build_encoder("wat", 32, seed=0)
    enc = build_encoder("dense", 32, seed=0)
    with pytest.raises(ShapeError):
        enc(torch.zeros(2, 1, 32, 32))
    with pytest.raises(ShapeError):
        enc(torch.zeros(2, 3, 30, 30))  # dense needs H, W divisible by 4


def test_encoder_seed_determinism():
    a = build_encoder("dense", 16, seed=42)
    b = build_encoder("dense", 16, seed=42)
    c = build_encoder("dense", 16, seed=43)
    assert param_checksum(a) == param_checksum(b)
    assert param_checksum(a) != param_checksum(c)


def test_decoder_output_matches_taskspec():
    m = build_single_task_model(SEG, 16, seed=0)
    pred = m(torch.zeros(2, 3, 32, 32))
    assert pred.shape == (2, 5, 32, 32)
    mc = build_single_task_model(CLS, 16, seed=0)
    assert mc(torch.zeros(2, 3, 32, 32)).shape == (2, 4)


@pytest.mark.parametrize("kind", ["identity", "linear", "nonlinear"])
@pytest.mark.parametrize("channels", [8, 16, 32])
@pytest.mark.parametrize("hw", [1, 4, 8])
def test_adapters_preserve_shape(kind, channels, hw):
    if hw == 1:
        feat = torch.randn(3, channels)
        ad = make_adapter(kind, channels, "classification", seed=1)
    else:
        feat = torch.randn(3, channels, hw, hw)
        ad = make_adapter(kind, channels, "dense", seed=1)
    out = ad(feat)
    assert out.shape == feat.shape


def test_identity_adapter_has_no_params():
    ad = make_adapter("identity", 16, "dense")
    assert isinstance(ad, IdentityAdapter)
    assert sum(p.numel() for p in ad.parameters()) == 0
    x = torch.randn(2, 16, 4, 4)
    assert torch.equal(ad(x), x)


def test_adapter_kind_validation():
    with pytest.raises(ConfigurationError):
        make_adapter("residual", 16, "dense")


def test_universal_shares_one_encoder():
    model = build_universal_model([SEG, DEPTH, NORMALS], 16, seed=0)
    x = torch.randn(2, 3, 32, 32)
    out = forward_universal(model, x, with_adapters=True)
    assert set(out) == {"seg", "depth", "normals"}
    feats = [out[tid][1] for tid in out]
    # one shared feature object, computed once
    assert feats[0] is feats[1] and feats[1] is feats[2]
    assert out["seg"][0].shape == (2, 5, 32, 32)
    assert out["depth"][0].shape == (2, 1, 32, 32)
    for tid in out:
        assert out[tid][2].shape == feats[0].shape

    plain = forward_universal(model, x, with_adapters=False)
    for tid in plain:
        assert plain[tid][2] is None
        # inference path ignores adapters entirely
        assert torch.equal(plain[tid][0], out[tid][0])


def test_universal_rejects_mixed_modes():
    with pytest.raises(ConfigurationError):
        build_universal_model([SEG, CLS], 16, seed=0)
    with pytest.raises(ConfigurationError):
        build_universal_model([], 16, seed=0)


def test_universal_classification_build():
    model = build_universal_model([CLS, CLS2], 16, seed=0)
    out = forward_universal(model, torch.randn(2, 3, 32, 32), with_adapters=True)
    assert out["d0"][0].shape == (2, 4)
    assert out["d0"][1].shape == (2, 16)


def test_eval_outputs_bitwise_repeatable():
    model = build_single_task_model(DEPTH, 16, seed=3)
    model.eval()
    x = torch.randn(4, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        a = model(x).numpy()
        b = model(x).numpy()
    assert np.array_equal(a, b)


def test_freeze_and_checksum():
    model = build_single_task_model(SEG, 16, seed=5)
    checksum = freeze_and_checksum(model)
    assert all(not p.requires_grad for p in model.parameters())
    # a forward pass must not move the checksum (BN stats frozen too)
    model(torch.randn(2, 3, 32, 32))
    assert param_checksum(model) == checksum
    # checksum is sensitive to any single weight change
    with torch.no_grad():
        first = next(model.parameters())
        first.add_(1e-3)
    assert param_checksum(model) != checksum


def test_checkpoint_roundtrip(tmp_path):
    model = build_single_task_model(NORMALS, 16, seed=9)
    freeze_and_checksum(model)
    desc = ckpt.describe_single_task(NORMALS, 16)
    out = ckpt.save_model(model, tmp_path / "ck", desc, seed=9)
    again = ckpt.load_model(out)
    assert param_checksum(again) == param_checksum(model)
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    model.eval(), again.eval()
    with torch.no_grad():
        assert np.array_equal(model(x).numpy(), again(x).numpy())


def test_checkpoint_universal_roundtrip(tmp_path):
    model = build_universal_model([SEG, DEPTH], 16, seed=2, adapter="nonlinear")
    desc = ckpt.describe_universal([SEG, DEPTH], 16, "nonlinear")
    out = ckpt.save_model(model, tmp_path / "ck", desc, seed=2)
    again = ckpt.load_model(out)
    assert param_checksum(again) == param_checksum(model)
    assert set(again.decoders.keys()) == {"seg", "depth"}


def test_checkpoint_bytes_are_stable(tmp_path):
    model = build_single_task_model(DEPTH, 16, seed=4)
    desc = ckpt.describe_single_task(DEPTH, 16)
    a = ckpt.save_model(model, tmp_path / "a", desc, seed=4)
    b = ckpt.save_model(model, tmp_path / "b", desc, seed=4)
    assert (a / "weights.bin").read_bytes() == (b / "weights.bin").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_checkpoint_detects_tampering(tmp_path):
    model = build_single_task_model(DEPTH, 16, seed=4)
    desc = ckpt.describe_single_task(DEPTH, 16)
    out = ckpt.save_model(model, tmp_path / "ck", desc, seed=4)

    blob = (out / "weights.bin").read_bytes()
    (out / "weights.bin").write_bytes(blob[:-4] + b"\x00\x00\x80\x3f")
    with pytest.raises(IntegrityError):
        ckpt.load_model(out)

    (out / "weights.bin").write_bytes(blob[:-16])
    with pytest.raises(IntegrityError):
        ckpt.load_model(out)

    (out / "weights.bin").unlink()
    with pytest.raises(IntegrityError):
        ckpt.load_model(out)

    with pytest.raises(IntegrityError):
        ckpt.load_model(tmp_path / "nothing")
