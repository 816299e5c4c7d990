import math

import numpy as np
import pytest

from spreadnet.dataio import read_esg, read_manifest
from spreadnet.synth import (GenConfig, SynthError, generate_dataset, generate_ensemble,
                             lorenz96_step, lorenz96_tendency, rk4_step, with_grid)

SMALL = dict(n_params=2, n_levels=3, n_lat=4, n_lon=8)


def small_cfg(**kw):
    base = dict(spinup_steps=100)
    base.update(kw)
    return with_grid(GenConfig(**base), **SMALL)


def test_equilibrium_is_fixed():
    x = np.full(40, 8.0)
    np.testing.assert_allclose(lorenz96_step(x, 8.0, 0.01), x, rtol=0, atol=1e-13)
    # With level coupling only interior levels of a uniform column are at rest.
    x2 = np.full((3, 40), 8.0)
    np.testing.assert_allclose(lorenz96_tendency(x2, 8.0, 0.1)[1], 0.0, atol=1e-13)


def test_tendency_against_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(9)
    n = len(x)
    want = np.array([(x[(i + 1) % n] - x[(i - 2) % n]) * x[(i - 1) % n] - x[i] + 8.0 for i in range(n)])
    np.testing.assert_allclose(lorenz96_tendency(x, 8.0), want, rtol=1e-14, atol=1e-14)


def test_level_coupling_term():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 6))
    d = lorenz96_tendency(x, 8.0, 0.1) - lorenz96_tendency(x, 8.0)
    np.testing.assert_allclose(d[0], -0.1 * x[1], atol=1e-14)
    np.testing.assert_allclose(d[1], 0.1 * (x[0] - x[2]), atol=1e-14)
    np.testing.assert_allclose(d[2], 0.1 * x[1], atol=1e-14)


@pytest.mark.parametrize("dt", [0.1, 0.05, 0.01])
def test_rk4_local_error_on_decay(dt):
    x1 = rk4_step(lambda x: -x, np.array([1.0]), dt)[0]
    # The local error of RK4 on x' = -x is exactly dt^5/120 + O(dt^6).
    assert abs(x1 - math.exp(-dt)) <= dt ** 5 / 100


def test_chaotic_divergence():
    rng = np.random.default_rng(2)
    x = 8.0 + rng.standard_normal(40)
    for _ in range(500):
        x = lorenz96_step(x)
    y = x.copy()
    y[0] += 1e-8
    for _ in range(1000):
        x, y = lorenz96_step(x), lorenz96_step(y)
    assert np.linalg.norm(x - y) > 1e-6


def test_step_errors():
    with pytest.raises(SynthError):
        lorenz96_step(np.ones(3))
    with pytest.raises(SynthError):
        lorenz96_step(np.array([1.0, np.inf, 0.0, 0.0]))


def test_config_validation():
    with pytest.raises(SynthError):
        GenConfig(dt=0.0)
    with pytest.raises(SynthError):
        GenConfig(n_members=1)
    with pytest.raises(SynthError):
        GenConfig(ic_perturbation_sigma=-1.0)


def test_zero_perturbation_gives_zero_spread():
    s = generate_ensemble(small_cfg(ic_perturbation_sigma=0.0), 3)
    assert s.data.shape == (10, 3) + s.spec.field_shape
    assert np.all(s.data == s.data[:1])
    assert np.all(s.spread(2) == 0.0)


def test_control_member_is_unperturbed_base():
    cfg = small_cfg()
    s = generate_ensemble(cfg, 4)
    z = generate_ensemble(small_cfg(ic_perturbation_sigma=0.0), 4)
    np.testing.assert_array_equal(s.data[0], z.data[0])
    assert s.control_index == 0
    assert not np.array_equal(s.data[1, 0], s.data[0, 0])
    enss = generate_ensemble(small_cfg(perturbed_control=True), 4)
    assert enss.control_index is None
    assert not np.array_equal(enss.data[0, 0], z.data[0, 0])


def test_determinism_and_seed_dependence():
    a, b = generate_ensemble(small_cfg(), 5), generate_ensemble(small_cfg(), 5)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(generate_ensemble(small_cfg(), 6).data, a.data)
    assert not np.array_equal(generate_ensemble(small_cfg(seed=1), 5).data, a.data)


def test_spread_grows_for_most_samples():
    cfg = small_cfg(spinup_steps=200)
    grew = 0
    for i in range(100):
        s = generate_ensemble(cfg, i)
        grew += s.spread(2).mean() > s.spread(0).mean()
    assert grew >= 95


def test_member_exchangeability_ens10_mode():
    s = generate_ensemble(small_cfg(perturbed_control=True), 9)
    perm = np.random.default_rng(0).permutation(s.n_members)
    np.testing.assert_allclose(s.data[perm].std(axis=0, ddof=1), s.data.std(axis=0, ddof=1),
                               rtol=1e-12, atol=1e-15)


def test_generate_dataset_split_and_bytes(tmp_path):
    cfg = small_cfg(spinup_steps=20)
    paths, man = generate_dataset(cfg, 10, tmp_path / "a", n_epochs=10, test_epoch_tags=(8, 9))
    assert len(paths) == 10
    assert (len(man.train_ids), len(man.val_ids), len(man.test_ids)) == (6, 2, 2)
    assert read_manifest(tmp_path / "a" / "manifest.txt") == man
    assert [read_esg(p).epoch_tag for p in paths] == list(range(10))
    generate_dataset(cfg, 10, tmp_path / "b", n_epochs=10, test_epoch_tags=(8, 9))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    with pytest.raises(SynthError):
        generate_dataset(cfg, 0, tmp_path / "c")
