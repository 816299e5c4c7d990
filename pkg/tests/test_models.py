import numpy as np
import pytest

from spreadnet.models import (ModelError, ModelSpec, build_unet, expected_param_count,
                              fit_linear_baseline, predict_linear_baseline)


def tiny(**kw):
    base = dict(in_channels=3, base_channels=4, depth=1, n_levels=3, n_lat=4, n_lon=8)
    base.update(kw)
    return ModelSpec(**base)


def test_spec_validation():
    with pytest.raises(ModelError):
        tiny(conv_variant="dilated")
    with pytest.raises(ModelError):
        tiny(temporal_mode="lstm")
    with pytest.raises(ModelError, match="divisible"):
        tiny(depth=3)
    assert tiny(temporal_mode="spread_channels").model_levels == 1


@pytest.mark.parametrize("variant", ["standard", "full", "affine", "separable"])
def test_forward_shapes_and_param_counts(variant):
    spec = tiny(conv_variant=variant, depth=2)
    model = build_unet(spec)
    assert model.params.count() == expected_param_count(spec)
    x = np.random.default_rng(0).standard_normal((2, 3, 3, 4, 8))
    y = model.forward(x, mode="train")
    assert y.shape == (2, 1, 3, 4, 8)
    assert model.forward(x[0], mode="train").shape == (1, 3, 4, 8)


def test_standard_param_count_by_hand():
    # depth 1, base 4, in 3, kernel 27: enc 3->4, 4->4; mid 4->8, 8->8; dec 12->4, 4->4; head 4->1.
    convs = [(3, 4), (4, 4), (4, 8), (8, 8), (12, 4), (4, 4)]
    want = sum(27 * ci * co + co + 2 * co for ci, co in convs) + 4 + 1
    assert expected_param_count(tiny()) == want == build_unet(tiny()).params.count()


def test_build_is_deterministic_per_seed():
    a, b = build_unet(tiny(seed=3)), build_unet(tiny(seed=3))
    for k in a.params.tensors:
        assert np.array_equal(a.params.tensors[k].data, b.params.tensors[k].data)
    c = build_unet(tiny(seed=4))
    assert not np.array_equal(a.params.tensors["enc0.conv1.weight"].data,
                              c.params.tensors["enc0.conv1.weight"].data)


def test_input_validation():
    model = build_unet(tiny())
    with pytest.raises(ModelError, match="channels"):
        model.forward(np.zeros((2, 3, 4, 8)), mode="train")
    with pytest.raises(ModelError, match="grid"):
        model.forward(np.zeros((3, 3, 4, 4)), mode="train")


def test_eval_requires_running_stats_and_uses_them():
    model = build_unet(tiny())
    x = np.random.default_rng(1).standard_normal((4, 3, 3, 4, 8))
    with pytest.raises(ValueError):
        model.forward(x, mode="eval")
    model.forward(x, mode="train", update_running=True)
    y1 = model.forward(x[:1], mode="eval").data
    y2 = model.forward(x, mode="eval").data[:1]
    np.testing.assert_allclose(y1, y2, atol=1e-12)


def test_params_copy_and_load_round_trip():
    model = build_unet(tiny())
    model.forward(np.ones((2, 3, 3, 4, 8)), mode="train", update_running=True)
    snap = model.params.copy()
    other = build_unet(tiny(seed=9))
    other.params.load_arrays(snap.arrays())
    for k, v in snap.arrays().items():
        assert np.array_equal(other.params.arrays()[k], v)


def test_linear_baseline_recovers_exact_relation():
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(5):
        x = rng.uniform(0, 1, (2, 3, 4))
        y = np.stack([3.0 * x[0] + 1.0, -0.5 * x[1] + 2.0])
        pairs.append((x, y))
    coef = fit_linear_baseline(pairs)
    np.testing.assert_allclose(coef, [[3.0, 1.0], [-0.5, 2.0]], atol=1e-12)
    np.testing.assert_allclose(predict_linear_baseline(coef, pairs[0][0]), pairs[0][1], atol=1e-12)


def test_linear_baseline_matches_lstsq_and_degenerate_levels():
    rng = np.random.default_rng(3)
    pairs = [(rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 2, 2))) for _ in range(6)]
    x = np.concatenate([p[0].ravel() for p in pairs])
    y = np.concatenate([p[1].ravel() for p in pairs])
    a, b = np.linalg.lstsq(np.stack([x, np.ones_like(x)], 1), y, rcond=None)[0]
    np.testing.assert_allclose(fit_linear_baseline(pairs)[0], [a, b], atol=1e-12)
    const = [(np.ones((1, 2, 2)), p[1]) for p in pairs]
    np.testing.assert_allclose(fit_linear_baseline(const)[0], [0.0, y.mean()], atol=1e-12)
    with pytest.raises(ModelError):
        fit_linear_baseline(pairs[:1])
