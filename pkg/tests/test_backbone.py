import numpy as np
import pytest
import torch

from diffseg.backbone import (Backbone, BackboneDescriptor, ConditioningVector, build_toy_backbone,
                              full_scale_descriptor, load_backbone, pretrain_autoencoder,
                              pretrain_denoiser, read_header, save_backbone)
from diffseg.errors import LoadError, ParameterError, ShapeError, ValidationError
from diffseg.schedule import Latent, build_schedule

from .conftest import random_image


def test_encode_image_shapes(backbone256, rng):
    assert backbone256.encode_image(random_image(rng, 256)).values.shape == (4, 32, 32)
    z = backbone256.encode_image(random_image(rng, 768))
    assert z.values.shape == (4, 96, 96) and z.timestep == 0
    with pytest.raises(ShapeError):
        backbone256.encode_image(random_image(rng, 250))


def test_encode_image_rejects_bad_pixels(backbone256):
    with pytest.raises(ParameterError):
        backbone256.encode_image(np.full((64, 64, 3), 2.0, dtype=np.float32))
    with pytest.raises(ShapeError):
        backbone256.encode_image(np.zeros((64, 64), dtype=np.float32))


def test_encode_condition(backbone256, rng):
    x = random_image(rng, 256)
    a, b = backbone256.encode_condition(x), backbone256.encode_condition(x)
    assert a.source == "toy-ssl" and a.values.shape == (64,)
    assert torch.isfinite(a.values).all() and torch.equal(a.values, b.values)
    with pytest.raises(ShapeError):
        backbone256.encode_condition(random_image(rng, 128))


def test_unconditional_null_vector(rng):
    bb = build_toy_backbone(0, patch_size=64, conditioning="none")
    v = bb.encode_condition(random_image(rng, 64))
    w = bb.encode_condition(random_image(rng, 64))
    assert v.source == "none"
    assert torch.equal(v.values, bb.null_cond.detach()) and torch.equal(v.values, w.values)


def test_conditional_and_unconditional_shapes_match(rng):
    x = random_image(rng, 64)
    shapes = []
    for mode in ("ssl", "none"):
        bb = build_toy_backbone(0, patch_size=64, conditioning=mode)
        taps = bb.run_unet_with_taps(Latent(bb.encode_image(x).values, 10), bb.encode_condition(x))
        shapes.append([tuple(a.values.shape) for a in taps])
    assert shapes[0] == shapes[1]


def test_taps_shape_contract(small_backbone, rng):
    x = random_image(rng, 64)
    desc = small_backbone.descriptor
    z = Latent(small_backbone.encode_image(x).values, 50)
    taps = small_backbone.run_unet_with_taps(z, small_backbone.encode_condition(x))
    assert [a.block_id for a in taps] == desc.block_ids == ["middle", "up_1", "up_2", "up_3", "up_4"]
    strides = desc.block_strides()
    for a in taps:
        c, h, w = a.values.shape
        assert c == desc.channels_of(a.block_id)
        assert (h, w) == (8 // strides[a.block_id], 8 // strides[a.block_id])
        assert a.timestep == 50


def test_four_block_backbone(rng):
    bb = build_toy_backbone(1, patch_size=256, block_ids=["middle", "up_1", "up_2", "up_3"],
                            block_channels=[16, 8, 8, 8])
    x = random_image(rng, 256)
    taps = bb.run_unet_with_taps(Latent(bb.encode_image(x).values, 5), bb.encode_condition(x))
    assert len(taps) == 4
    assert [a.values.shape[0] for a in taps] == [16, 8, 8, 8]
    assert all(32 % a.values.shape[-1] == 0 for a in taps)


def test_taps_deterministic_single_pass(small_backbone, rng):
    x = random_image(rng, 64)
    z = Latent(small_backbone.encode_image(x).values, 50)
    y = small_backbone.encode_condition(x)
    calls = small_backbone.unet_calls
    a = small_backbone.run_unet_with_taps(z, y)
    assert small_backbone.unet_calls == calls + 1
    b = small_backbone.run_unet_with_taps(z, y)
    assert all(torch.equal(p.values, q.values) for p, q in zip(a, b))


def test_conditioning_dim_mismatch(small_backbone):
    z = Latent(torch.zeros(4, 8, 8), 10)
    with pytest.raises(ShapeError):
        small_backbone.run_unet_with_taps(z, ConditioningVector(torch.zeros(32), "external"))


def test_full_scale_descriptor():
    desc = full_scale_descriptor(block_channels=[8] * 13, d_cond=16)
    assert len(desc.block_ids) == 13 and desc.block_ids[0] == "middle"
    bb = build_toy_backbone(0, desc=desc)
    z = torch.zeros(1, 4, 32, 32)
    taps = bb.unet_taps(z, 10, torch.zeros(1, 16))
    assert len(taps) == 13


@pytest.mark.parametrize("bad", [
    dict(block_ids=[], block_channels=[]),
    dict(block_ids=["up_1", "middle"], block_channels=[8, 8]),
    dict(block_channels=[8, 8]),
    dict(latent_downsample_factor=0),
])
def test_descriptor_validation(bad):
    with pytest.raises(ValidationError):
        BackboneDescriptor(**bad).validate()


def test_frozen_by_default(small_backbone):
    assert small_backbone.frozen
    assert not any(p.requires_grad for p in small_backbone.parameters())


def test_checkpoint_round_trip(tmp_path, small_backbone, rng):
    path = save_backbone(small_backbone, tmp_path / "bb.ckpt")
    header, _ = read_header(path.read_bytes())
    for key in ("block_ids", "block_channels", "latent_downsample_factor", "d_cond"):
        assert key in header
    loaded, desc = load_backbone(path)
    assert desc.frozen and loaded.frozen
    assert loaded.weight_hash() == small_backbone.weight_hash()
    x = random_image(rng, 64)
    z = Latent(small_backbone.encode_image(x).values, 20)
    y = small_backbone.encode_condition(x)
    for a, b in zip(small_backbone.run_unet_with_taps(z, y), loaded.run_unet_with_taps(z, y)):
        assert torch.equal(a.values, b.values)


def test_load_errors(tmp_path, small_backbone):
    with pytest.raises(LoadError):
        load_backbone(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError):
        load_backbone(bad)
    path = save_backbone(small_backbone, tmp_path / "bb.ckpt")
    raw = path.read_bytes()
    head, _, payload = raw.partition(b"\n\n")
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(head + b"\n\n" + payload[:100])
    with pytest.raises(LoadError):
        load_backbone(truncated)
    no_channels = tmp_path / "nochan.ckpt"
    lines = [ln for ln in head.split(b"\n") if not ln.startswith(b"block_channels=")]
    no_channels.write_bytes(b"\n".join(lines) + b"\n\n" + payload)
    with pytest.raises(ValidationError):
        load_backbone(no_channels)
    zero = tmp_path / "zero.ckpt"
    lines = [b"block_ids=" if ln.startswith(b"block_ids=") else
             b"block_channels=" if ln.startswith(b"block_channels=") else ln for ln in head.split(b"\n")]
    zero.write_bytes(b"\n".join(lines) + b"\n\n" + payload)
    with pytest.raises(ValidationError):
        load_backbone(zero)


def test_descriptor_mismatch(tmp_path, small_backbone):
    path = save_backbone(small_backbone, tmp_path / "bb.ckpt")
    expected = BackboneDescriptor(patch_size=64, block_channels=[64, 16, 16, 8, 8])
    with pytest.raises(ValidationError):
        load_backbone(path, expected)


def test_load_does_not_touch_global_rng(tmp_path, small_backbone):
    path = save_backbone(small_backbone, tmp_path / "bb.ckpt")
    torch.manual_seed(5)
    a = torch.rand(3)
    torch.manual_seed(5)
    load_backbone(path)
    assert torch.equal(torch.rand(3), a)


def test_pretraining_refreezes(rng):
    bb = build_toy_backbone(2, patch_size=64)
    images = [random_image(rng, 128) for _ in range(2)]
    null_before = bb.null_cond.detach().clone()
    ae = pretrain_autoencoder(bb, images, steps=3, crop=32, batch_size=2)
    den = pretrain_denoiser(bb, images, build_schedule(), steps=3, batch_size=4, cond_drop=1.0)
    assert len(ae) == 3 and len(den) == 3 and np.isfinite(ae + den).all()
    assert bb.frozen
    assert bb.descriptor.latent_scale > 0
    # with every sample dropped to the null token, the token itself is trained
    assert not torch.equal(bb.null_cond.detach(), null_before)


def test_build_deterministic():
    assert build_toy_backbone(3, patch_size=64).weight_hash() == build_toy_backbone(3, patch_size=64).weight_hash()
    assert build_toy_backbone(3, patch_size=64).weight_hash() != build_toy_backbone(4, patch_size=64).weight_hash()
    assert isinstance(build_toy_backbone(0, patch_size=64), Backbone)
