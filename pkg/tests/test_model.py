import numpy as np
import pytest

from tednet import layers as L
from tednet.gradcheck import model_check
from tednet.model import (GRID_CELLS, ConfigError, TEDNet, TrellisConfig, param_shapes,
                          parameter_count, xavier_init)


@pytest.fixture(scope="module")
def net8():
    return TEDNet(TrellisConfig(base_channels=8), seed=3, dtype=np.float64)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrellisConfig(blocks_per_stage=(1, 2, 2, 2, 1))
    with pytest.raises(ConfigError, match="divisible"):
        TrellisConfig(base_channels=6)
    with pytest.raises(ConfigError):
        TrellisConfig(sal_levels=-1)
    # narrow test configs give each branch a single channel
    TrellisConfig(base_channels=2)


def test_config_round_trip():
    cfg = TrellisConfig(base_channels=16, blocks_per_stage=(2, 2, 2, 2, 1), lam=0.5,
                        single_path=True)
    assert TrellisConfig.from_dict(cfg.as_dict()) == cfg


def test_parameter_counts_are_frozen():
    # sums over the weight shapes; recorded once and pinned
    assert parameter_count(TrellisConfig(base_channels=2)) == 14_420
    assert parameter_count(TrellisConfig(base_channels=8)) == 221_732
    assert parameter_count(TrellisConfig()) == 3_531_908


def test_encoder_shapes(net8):
    cache = {}
    e2, e3, e4, e5 = net8.encoder_forward(np.zeros((1, 3, 64, 64)), cache)
    assert e2.shape == (1, 8, 16, 16)
    assert e3.shape == (1, 16, 16, 16)
    assert e4.shape == (1, 32, 16, 16)
    assert e5.shape == (1, 64, 16, 16)


def test_encoder_rejects_non_divisible(net8):
    with pytest.raises(L.ShapeError, match="divisible by 4"):
        net8.forward(np.zeros((1, 3, 30, 32)))


def test_encoding_block_shape_and_zero_weights():
    net = TEDNet(TrellisConfig(base_channels=8), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(size=(1, 3, 16, 16))
    assert net.encoding_block(x, 1, 1, {}).shape == (1, 8, 16, 16)
    for name, p in net.params.items():
        if name.startswith("enc.s1.b1"):
            p[...] = 0
    assert not net.encoding_block(x, 1, 1, {}).any()


def test_dilated_branch_receptive_field():
    # a unit impulse through the 3x3 branch of a dilation-2 block lights up
    # a 5x5 footprint sampled at offsets {-2, 0, 2}
    cfg = TrellisConfig(base_channels=8)
    s, b, in_ch, out_ch, dil = cfg.encoding_blocks()[-2]
    assert dil == 2
    net = TEDNet(cfg, seed=0, dtype=np.float64)
    w = net.params[f"enc.s{s}.b{b}.k3.w"]
    w[...] = 1.0
    x = np.zeros((1, in_ch, 11, 11))
    x[0, 0, 5, 5] = 1.0
    kind, spec = net.specs[f"enc.s{s}.b{b}.k3"]
    out = L.conv2d(x, w, None, spec)[0, 0]
    rows, cols = np.nonzero(out)
    assert sorted(set(rows)) == [3, 5, 7] and sorted(set(cols)) == [3, 5, 7]


def test_trellis_channels(net8):
    cache = {}
    seeds = net8.encoder_forward(np.zeros((1, 3, 64, 64)), cache)
    grid = net8.trellis_forward(seeds, cache)
    expected = {(2, 2): 8, (2, 3): 16, (2, 4): 32, (3, 3): 8, (3, 4): 16, (4, 4): 8}
    for cell, ch in expected.items():
        assert grid[cell].shape == (1, ch, 16, 16), cell
    for i, j in GRID_CELLS:
        assert grid[(i - 1, j)].shape[1] == 2 * grid[(i - 1, j - 1)].shape[1]


def test_decoding_block_shapes_and_errors(net8):
    rng = np.random.default_rng(0)
    left, right = rng.uniform(size=(1, 8, 16, 16)), rng.uniform(size=(1, 16, 16, 16))
    assert net8.decoding_block(left, right, 2, 2, {}).shape == (1, 8, 16, 16)
    with pytest.raises(L.ShapeError, match=r"grid cell \(2,2\)"):
        net8.decoding_block(left, right[:, :12], 2, 2, {})


def test_decoding_block_zero_right_depends_on_left_only(net8):
    rng = np.random.default_rng(1)
    left = rng.uniform(size=(1, 8, 16, 16))
    right = np.zeros((1, 16, 16, 16))
    base = net8.decoding_block(left, right, 2, 2, {})
    saved = {k: v.copy() for k, v in net8.params.items() if k.startswith("dec.22.f2.w")}
    try:
        net8.params["dec.22.f2.w"][...] = rng.uniform(size=saved["dec.22.f2.w"].shape)
        assert np.array_equal(net8.decoding_block(left, right, 2, 2, {}), base)
    finally:
        net8.params["dec.22.f2.w"][...] = saved["dec.22.f2.w"]


@pytest.mark.parametrize("size", [64, 96, 128, 256])
def test_head_resolutions(size):
    net = TEDNet(TrellisConfig(base_channels=2), seed=0)
    out = net.forward(np.random.default_rng(size).uniform(size=(1, 3, size, size)))
    for h in ("2D", "3D", "4D"):
        assert out.head(h).shape == (1, 1, size // 4, size // 4)
    assert out.z.shape == (1, 1, size, size)
    assert all((z >= 0).all() for z in out.heads().values())


def test_single_path_has_only_final_head():
    net = TEDNet(TrellisConfig(base_channels=2, single_path=True), seed=0)
    out = net.forward(np.zeros((1, 3, 32, 32)))
    assert set(out.heads()) == {"Z"}
    assert not any(k.startswith("head.2D") for k in net.params)
    assert out.z.shape == (1, 1, 32, 32)


def test_predict_is_the_count_map(net8):
    x = np.random.default_rng(2).uniform(size=(2, 3, 32, 32))
    z = net8.predict(x)
    assert z.shape == (2, 32, 32)
    np.testing.assert_array_equal(z, net8.forward(x).z[:, 0])


def test_xavier_deterministic_and_scaled():
    cfg = TrellisConfig(base_channels=8)
    a, b = xavier_init(cfg, 7), xavier_init(cfg, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["dec.22.f1.w"], xavier_init(cfg, 8)["dec.22.f1.w"])
    for k, v in a.items():
        if k.endswith(".b"):
            assert not v.any()
    big = xavier_init(TrellisConfig(base_channels=32), 0)["enc.s5.b2.fuse.w"]
    assert big.size >= 1000
    fan_out, fan_in = big.shape[0] * big[0, 0].size, big[0].size
    target = 2.0 / (fan_in + fan_out)
    assert abs(big.var() / target - 1) < 0.2


def test_params_shape_mismatch_rejected():
    cfg = TrellisConfig(base_channels=2)
    params = xavier_init(cfg, 0)
    params["head.Z.w"] = params["head.Z.w"][:, :1].copy()
    with pytest.raises(ConfigError, match="head.Z.w"):
        TEDNet(cfg, params)
    assert list(param_shapes(cfg)) == list(xavier_init(cfg, 0))


def test_backward_requires_cache(net8):
    out = net8.forward(np.zeros((1, 3, 16, 16)))
    out.cache = {}
    with pytest.raises(ValueError, match="cached"):
        net8.backward(out, {"Z": np.ones((1, 1, 16, 16))})


def test_zero_head_grads_give_zero_param_grads(net8):
    out = net8.forward(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)))
    grads = net8.backward(out, {h: np.zeros_like(z) for h, z in out.heads().items()})
    assert all(not g.any() for g in grads.values())


def test_gradient_additivity_over_heads():
    net = TEDNet(TrellisConfig(base_channels=2), seed=5, dtype=np.float64)
    rng = np.random.default_rng(5)
    for k, p in net.params.items():
        if k.endswith(".b"):
            p[...] = rng.uniform(0.01, 0.1, size=p.shape)
    out = net.forward(rng.uniform(size=(2, 3, 16, 16)))
    hg = {h: rng.uniform(-1, 1, size=z.shape) for h, z in out.heads().items()}
    joint = net.backward(out, hg)
    parts = [net.backward(out, {h: g}) for h, g in hg.items()]
    for k in joint:
        total = sum(p[k] for p in parts)
        assert np.abs(joint[k] - total).max() <= 1e-10 * max(1.0, np.abs(joint[k]).max()), k


def test_full_model_gradcheck():
    assert model_check(TrellisConfig(base_channels=2), coords_per_tensor=4, seed=1) < 1e-4
    assert model_check(TrellisConfig(base_channels=2, single_path=True), seed=1) < 1e-4
