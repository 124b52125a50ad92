import numpy as np
import pytest
import torch

from diffseg.errors import GridError, ShapeError
from diffseg.features import FeatureMap
from diffseg.grid import extract_image_features, stitch_features, tile

from .conftest import random_image


def identity_features(grid):
    """Treat raw pixels as a 3-channel feature map per patch."""
    return [(pos, FeatureMap(torch.from_numpy(np.ascontiguousarray(p.transpose(2, 0, 1))), {"rgb": (0, 3)}, 0))
            for pos, p in grid.patches]


def test_tile_shapes(rng):
    g = tile(random_image(rng, 768), 3, 256)
    assert len(g.patches) == 9
    assert [pos for pos, _ in g.patches] == [(r, c) for r in range(3) for c in range(3)]
    assert all(p.shape == (256, 256, 3) for _, p in g.patches)
    x = random_image(rng, 256)
    one = tile(x, 1, 256)
    assert len(one.patches) == 1 and np.array_equal(one.patches[0][1], x)
    with pytest.raises(ShapeError):
        tile(random_image(rng, 768, 512), 3, 256)


def test_round_trip_and_index_rule(rng):
    x = random_image(rng, 12)
    out = stitch_features(identity_features(tile(x, 3, 4))).values.numpy().transpose(1, 2, 0)
    assert np.array_equal(out, x)
    patches = dict(tile(x, 3, 4).patches)
    for i in range(12):
        for j in range(12):
            assert np.array_equal(out[i, j], patches[(i // 4, j // 4)][i % 4, j % 4])


def test_block_constant_placement():
    grids = [((r, c), FeatureMap(torch.full((2, 5, 5), float(3 * r + c)), {"a": (0, 2)}, 7))
             for r in range(3) for c in range(3)]
    out = stitch_features(grids[::-1])
    assert out.values.shape == (2, 15, 15) and out.timestep == 7
    for r in range(3):
        for c in range(3):
            assert torch.all(out.values[:, 5 * r:5 * r + 5, 5 * c:5 * c + 5] == 3 * r + c)


def test_stitch_errors():
    fm = FeatureMap(torch.zeros(2, 4, 4), {"a": (0, 2)}, 1)
    full = [((r, c), fm) for r in range(2) for c in range(2)]
    with pytest.raises(GridError):
        stitch_features(full[:3])
    with pytest.raises(GridError):
        stitch_features(full[:3] + [full[0]])
    odd = FeatureMap(torch.zeros(3, 4, 4), {"a": (0, 3)}, 1)
    with pytest.raises(ShapeError):
        stitch_features(full[:3] + [((1, 1), odd)])
    with pytest.raises(GridError):
        stitch_features([])


def test_constant_image_gives_constant_features(small_backbone, schedule):
    # t=0 removes the per-patch noise, so equal patches give equal features
    x = np.full((192, 192, 3), 0.4, dtype=np.float32)
    fm = extract_image_features(x, small_backbone, schedule, 0, "all", G=3, P=64, feature_size=16)
    ref = fm.values[:, :16, :16]
    for r in range(3):
        for c in range(3):
            assert torch.equal(fm.values[:, 16 * r:16 * r + 16, 16 * c:16 * c + 16], ref)


def test_perturbation_stays_local(small_backbone, schedule, rng):
    x = random_image(rng, 192)
    a = extract_image_features(x, small_backbone, schedule, 50, "all", seed=3, G=3, P=64, feature_size=16)
    y = x.copy()
    y[64:128, 0:64] = rng.random((64, 64, 3), dtype=np.float32)
    b = extract_image_features(y, small_backbone, schedule, 50, "all", seed=3, G=3, P=64, feature_size=16)
    diff = (a.values != b.values).any(dim=0)
    changed = diff[16:32, 0:16]
    assert changed.any()
    diff[16:32, 0:16] = False
    assert not diff.any()


def test_cached_extraction_matches(tmp_path, small_backbone, schedule, rng):
    from diffseg.features import FeatureCache

    x = random_image(rng, 192)
    cache = FeatureCache(tmp_path)
    kw = dict(G=3, P=64, feature_size=16, image_id="img")
    a = extract_image_features(x, small_backbone, schedule, 50, "all", 0, cache=cache, **kw)
    calls = small_backbone.unet_calls
    b = extract_image_features(x, small_backbone, schedule, 50, "all", 0, cache=cache, **kw)
    assert small_backbone.unet_calls == calls
    assert torch.equal(a.values, b.values)
    assert len(list(tmp_path.glob("*.bin"))) == 9
