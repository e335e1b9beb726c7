import numpy as np
import pytest

from hsefss.backbone import BackboneConfig, build_backbone, extract_features
from hsefss.errors import ConfigError, DimensionError
from hsefss.harness import TrainConfig, episode_gradients, sgd_step, active_parameters
from hsefss.hse import FULL, ModelConfig, build_model
from hsefss.numerics import Tensor
from hsefss.verify import synthetic_episode


def test_same_seed_bitwise_identical():
    a, b = build_backbone(BackboneConfig(), 3), build_backbone(BackboneConfig(), 3)
    assert list(a) == list(b)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)


def test_different_seeds_differ():
    a, b = build_backbone(BackboneConfig(), 3), build_backbone(BackboneConfig(), 4)
    assert any(not np.array_equal(a[n].data, b[n].data) for n in a)


@pytest.mark.parametrize("field", ["mid_channels", "high_channels", "in_channels"])
def test_zero_channels_rejected(field):
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(**{field: 0}), 0)


@pytest.mark.parametrize("factors", [(3, 8), (4, 2), (0, 8)])
def test_bad_factors_rejected(factors):
    with pytest.raises(ConfigError):
        BackboneConfig(mid_factor=factors[0], high_factor=factors[1]).validate()


def test_all_parameters_frozen():
    p = build_backbone(BackboneConfig(), 0)
    assert p.trainable() == []
    assert p.frozen == set(p)


def test_default_feature_shapes():
    p = build_backbone(BackboneConfig(), 0)
    feats = extract_features(p, Tensor(np.random.default_rng(0).random((3, 64, 64))))
    assert feats.mid.shape == (32, 16, 16)
    assert feats.high.shape == (32, 8, 8)


@pytest.mark.parametrize("mid,high,extent", [(2, 4, 16), (4, 4, 32), (4, 16, 32), (1, 2, 8)])
def test_configured_factors(mid, high, extent):
    cfg = BackboneConfig(mid_channels=6, high_channels=5, mid_factor=mid, high_factor=high)
    feats = extract_features(build_backbone(cfg, 0), Tensor(np.zeros((3, extent, extent))))
    assert feats.mid.shape == (6, extent // mid, extent // mid)
    assert feats.high.shape == (5, extent // high, extent // high)


def test_identical_images_identical_features():
    p = build_backbone(BackboneConfig(mid_channels=8, high_channels=8), 1)
    img = np.random.default_rng(5).random((3, 32, 32))
    a, b = extract_features(p, Tensor(img)), extract_features(p, Tensor(img.copy()))
    assert np.array_equal(a.mid.data, b.mid.data) and np.array_equal(a.high.data, b.high.data)


@pytest.mark.parametrize("shape", [(3, 60, 64), (3, 36, 36), (1, 64, 64), (64, 64)])
def test_bad_image_shapes(shape):
    p = build_backbone(BackboneConfig(), 0)
    with pytest.raises(DimensionError):
        extract_features(p, Tensor(np.zeros(shape)))


def test_sgd_step_leaves_frozen_backbone_bitwise_unchanged():
    params = build_model(ModelConfig(backbone=BackboneConfig(mid_channels=8, high_channels=8), ct=8), 0)
    before = {n: params[n].data.tobytes() for n in params.frozen}
    ep = synthetic_episode(32, seed=2)
    emb = {"circle": Tensor(np.ones(8) / np.sqrt(8))}
    names = active_parameters(params, FULL)
    assert not set(names) & params.frozen
    _, grads, _ = episode_gradients(params, FULL, ep, emb, names)
    after = sgd_step(params, grads, TrainConfig(), {})
    assert {n: after[n].data.tobytes() for n in params.frozen} == before
    assert any(not np.array_equal(after[n].data, params[n].data) for n in names)
