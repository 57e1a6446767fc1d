import logging

import numpy as np
import pytest

from tednet import io
from tednet import training as T
from tednet.groundtruth import Annotation, render_density
from tednet.model import TEDNet


def test_lr_schedule():
    s = T.TrainState.for_params({}, lr0=1e-3)
    assert s.lr(0) == 1e-3 and s.lr(9999) == 1e-3
    assert s.lr(10_000) == pytest.approx(0.8e-3, rel=1e-15)
    assert s.lr(25_000) == pytest.approx(1e-3 * 0.64, rel=1e-15)


def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    s = T.TrainState.for_params(p)
    T.adam_step(p, {"w": np.zeros(3)}, s)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
    assert s.step == 1 and s.m["w"].shape == p["w"].shape


def test_adam_constant_grad_moves_by_lr():
    # bias-corrected m/sqrt(v) equals sign(g) exactly for a constant gradient
    p = {"w": np.zeros(3)}
    g = {"w": np.array([0.3, -5.0, 1e-3])}
    s = T.TrainState.for_params(p, lr0=1e-2)
    for _ in range(50):
        before = p["w"].copy()
        T.adam_step(p, g, s)
        step = before - p["w"]
        np.testing.assert_allclose(step, 1e-2 * np.sign(g["w"]), rtol=1e-4)


def test_adam_shape_errors():
    p = {"w": np.zeros(3)}
    s = T.TrainState.for_params(p)
    with pytest.raises(ValueError):
        T.adam_step(p, {"w": np.zeros(4)}, s)
    with pytest.raises(ValueError):
        T.adam_step(p, {"v": np.zeros(3)}, s)


def test_synth_scene_contract():
    rng = np.random.default_rng(0)
    img, ann = T.synth_scene(rng, 0, 32, 48, 0.3)
    assert img.shape == (3, 32, 48) and ann.count == 0
    assert 0 <= img.min() and img.max() <= 1
    img, ann = T.synth_scene(rng, 23, 64, 64, 0.3)
    assert ann.count == 23
    assert render_density(ann).sum() == pytest.approx(23, abs=1e-6)
    with pytest.raises(ValueError):
        T.synth_scene(rng, -1, 8, 8)


def test_synth_dataset_is_seeded():
    a, b = T.synth_dataset(3, 32, seed=5), T.synth_dataset(3, 32, seed=5)
    for x, y in zip(a, b):
        assert x.id == y.id and np.array_equal(x.image, y.image)
        assert np.array_equal(x.density, y.density)


def _sample(h=32, w=32, seed=0, n=10):
    rng = np.random.default_rng(seed)
    img, ann = T.synth_scene(rng, n, h, w)
    ann.image_id = f"s{seed}"
    return T.make_sample(img, ann)


def test_hflip_involution():
    s = _sample()
    back = T.hflip(T.hflip(s))
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.density, s.density)
    np.testing.assert_allclose(back.annotation.points, s.annotation.points, atol=1e-12)
    # mirrored points render the mirrored map
    once = T.hflip(s)
    np.testing.assert_allclose(render_density(once.annotation), once.density, atol=1e-15)


def test_augment_identity_and_crop_mass():
    s = _sample(48, 48, 1, 30)
    same = T.augment(s, np.random.default_rng(0), crop=None, flip=False)
    np.testing.assert_array_equal(same.image, s.image)
    np.testing.assert_array_equal(same.density, s.density)
    rng = np.random.default_rng(1)
    for _ in range(10):
        c = T.augment(s, rng, crop=(24, 24))
        assert c.image.shape == (3, 24, 24) and c.density.shape == (24, 24)
        inside = c.annotation.count
        # each stamp spans 15 px, so crop edges move at most a handful of heads' mass
        assert abs(c.density.sum() - inside) <= 8
        # exact version: the cropped GT equals the full render restricted to the window
        assert c.density.sum() <= s.density.sum() + 1e-9
    with pytest.raises(ValueError, match="larger"):
        T.augment(s, rng, crop=(64, 64))
    with pytest.raises(ValueError, match="divisible"):
        T.augment(s, rng, crop=(30, 30))


def test_augment_crop_mass_exact_oracle():
    # recompute the crop's GT by rendering every full-image point and summing
    # only the part of its stamp that lands inside the window
    s = _sample(40, 40, 2, 25)
    rng = np.random.default_rng(3)
    c = T.augment(s, rng, crop=(20, 20), flip=False)
    rng = np.random.default_rng(3)
    top, left = int(rng.integers(0, 21)), int(rng.integers(0, 21))
    expect = 0.0
    for p in s.annotation.points:
        d = render_density(Annotation("p", (40, 40), [p]))
        expect += d[top:top + 20, left:left + 20].sum()
    assert c.density.sum() == pytest.approx(expect, abs=1e-9)


def test_split_is_deterministic_and_roughly_80_20():
    ids = [f"img_{i}" for i in range(1000)]
    test = [i for i in ids if T.is_test_id(i)]
    assert 150 < len(test) < 250
    assert test == [i for i in ids if T.is_test_id(i)]


def _write(dir_, name, img, ann_doc):
    io.write_image(dir_ / f"{name}.png", img)
    (dir_ / f"{name}.json").write_text(ann_doc)


def test_load_dataset(tmp_path, caplog):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 67, 65))
    ann = Annotation("odd.png", (67, 65), [(0.5, 0.5), (30.0, 30.0), (64.5, 66.5)])
    _write(tmp_path, "odd", img, ann.to_json("odd.png"))
    # bad files: point outside, missing image, missing annotation, broken json
    _write(tmp_path, "out", img[:, :8, :8], '{"image": "out.png", "size": [8, 8], "points": [[9, 1]]}')
    (tmp_path / "ghost.json").write_text('{"image": "ghost.png", "size": [8, 8], "points": []}')
    io.write_image(tmp_path / "lonely.png", img[:, :8, :8])
    (tmp_path / "broken.json").write_text("{not json")
    with caplog.at_level(logging.WARNING):
        samples = T.load_dataset(tmp_path)
    assert [s.id for s in samples] == ["odd"]
    s = samples[0]
    assert s.image.shape == (3, 64, 64)
    # (0.5, 0.5) falls off the 1-px top/left margins, (64.5, 66.5) off the far edge
    assert s.annotation.count == 1 and s.count == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(T.DatasetError) as err:
        T.load_dataset(tmp_path, strict=True)
    assert len(err.value.errors) == 4
    names = " ".join(err.value.errors)
    for bad in ("out.json", "ghost.json", "lonely.png", "broken.json"):
        assert bad in names


def test_load_dataset_empty(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert T.load_dataset(tmp_path) == []
    assert "no usable samples" in caplog.text
    with pytest.raises(T.DatasetError):
        T.load_dataset(tmp_path / "missing")


def test_write_then_load_dataset(tmp_path):
    samples = T.synth_dataset(3, 32, seed=1)
    T.write_dataset(samples, tmp_path)
    back = T.load_dataset(tmp_path, strict=True)
    assert [b.id for b in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.density, b.density)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12


def test_config_mapping():
    cfg = T.TrainConfig.from_mapping({"lambda": "0.5", "sal_levels": "2", "single_path": "1",
                                      "blocks_per_stage": "1,2,2,2,2", "c": "4"})
    assert (cfg.lam, cfg.K, cfg.single_path, cfg.c) == (0.5, 2, True, 4)
    assert T.TrainConfig.from_mapping(cfg.as_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        T.TrainConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ValueError):
        T.TrainConfig(loss="l1")


TINY = dict(c=2, batch=2, steps=3, eval_every=2, crop=32)


def test_train_lr_zero_keeps_params():
    samples = T.synth_dataset(6, 64, seed=2)
    cfg = T.TrainConfig(**{**TINY, "steps": 1, "lr0": 0.0})
    r = T.train(cfg, samples)
    init = TEDNet(cfg.model_config(), seed=T.model_seed(cfg.seed))
    for k in init.params:
        np.testing.assert_array_equal(r.net.params[k], init.params[k])


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    samples = T.synth_dataset(8, 64, seed=3)
    cfg = T.TrainConfig(**TINY)
    a = T.train(cfg, samples, tmp_path / "a")
    b = T.train(cfg, samples, tmp_path / "b")
    assert a.losses == b.losses
    for f in ("model.ckpt", "train_log.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    lines = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert lines[0] == ",".join(T.LOG_HEADER)
    assert len(lines) == 1 + cfg.steps
    assert lines[2].split(",")[-4] != "" and lines[1].split(",")[-4] == ""
    c = T.train(T.TrainConfig(**{**TINY, "seed": 1}), samples)
    assert c.losses != a.losses


def test_train_variants_run():
    samples = T.synth_dataset(6, 64, seed=4)
    for extra in ({"single_path": True}, {"single_supervision": True, "loss": "mse"},
                  {"loss": "sal"}):
        r = T.train(T.TrainConfig(**{**TINY, **extra}), samples)
        assert len(r.losses) == TINY["steps"] and all(np.isfinite(r.losses))


def test_train_aborts_on_nan():
    samples = T.synth_dataset(6, 64, seed=5)
    for s in samples:
        s.image[0] = np.nan
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(T.TrainConfig(**{**TINY, "crop": 0}), samples)
    assert err.value.step == 1


def test_evaluate_ground_truth_against_itself():
    samples = T.synth_dataset(3, 64, seed=6)

    class Oracle:
        def predict(self, image):
            for s in samples:
                if np.array_equal(s.image, image[0]):
                    return s.density[None]

    rep = T.evaluate(Oracle(), samples)
    assert rep.mae == 0 and rep.psnr == float("inf") and rep.ssim == pytest.approx(1.0)
