import math

import numpy as np
import pytest
from scipy.special import erfc

from enkf_rare.cross_entropy import (
    CeOptions,
    CeState,
    LevelCapError,
    UnreachableLevelError,
    ce_estimate,
    ce_level,
    ce_quantile,
    ce_update,
)
from enkf_rare.models import GaussianDensity, Projection, RareEvent, constant_model, double_well_model
from enkf_rare.paths import PathConfig
from enkf_rare.sampling import TiltedInitial, estimate, run_samples

P1 = Projection([1.0])
STATIC = constant_model(0.0, 0.0)
CFG = PathConfig(dt=0.1, bridge_enabled=False)
TAIL3 = 0.5 * erfc(3 / math.sqrt(2))


def test_uniform_weights_give_sample_mean():
    v = np.array([0.3, -1.0, 2.5, 4.0])
    assert ce_update(v, np.full(4, 0.7), sigma_fixed=1.0) == (pytest.approx(v.mean()), 1.0)


def test_five_sample_fixture():
    mu, sigma = ce_update([1, 2, 3, 4, 5], [1, 0, 1, 0, 0], sigma_fixed=0.4)
    assert mu == 2.0 and sigma == 0.4


def test_free_variance_update():
    mu, sigma = ce_update([1, 2, 3, 4, 5], [1, 0, 1, 0, 0])
    assert mu == 2.0 and sigma == pytest.approx(1.0)


def test_zero_weights_rejected():
    with pytest.raises(UnreachableLevelError, match="increase J1 or beta"):
        ce_update([1, 2], [0, 0], sigma_fixed=1.0)


def test_quantile_is_capped():
    m = np.arange(1, 101, dtype=float)
    assert ce_quantile(m, 0.1, 1000.0) == 90.0
    assert ce_quantile(m, 0.1, 50.0) == 50.0


def test_single_level_when_quantile_exceeds_threshold():
    ev = RareEvent(-0.5, P1)
    rho0 = GaussianDensity.from_std([0.0], [1.0])
    r = ce_estimate(STATIC, ev, rho0, CFG, 20_000, seed=1, options=CeOptions(beta=0.5, pilot_size=1000))
    assert r.extra["levels"] == 1
    assert r.extra["trace"][0]["k_hat"] == -0.5


def test_static_toy_matches_gaussian_tail():
    ev = RareEvent(3.0, P1)
    rho0 = GaussianDensity.from_std([0.0], [1.0])
    r = ce_estimate(STATIC, ev, rho0, CFG, 100_000, seed=3)
    assert abs(r.alpha_hat - TAIL3) < 3 * math.sqrt(r.variance)
    ks = [row["k_hat"] for row in r.extra["trace"]]
    assert ks == sorted(ks) and ks[-1] == 3.0


def test_level_sequence_is_deterministic():
    ev = RareEvent(3.0, P1)
    rho0 = GaussianDensity.from_std([0.0], [1.0])
    a = ce_estimate(STATIC, ev, rho0, CFG, 1000, seed=9)
    b = ce_estimate(STATIC, ev, rho0, CFG, 1000, seed=9)
    assert a.extra["trace"] == b.extra["trace"] and a.alpha_hat == b.alpha_hat


def test_level_update_moves_mean_up():
    ev = RareEvent(3.0, P1)
    rho0 = GaussianDensity.from_std([0.0], [1.0])
    s0 = CeState(0, 0.0, 1.0, -math.inf, 0.01, 10_000, 1000)
    s1 = ce_level(s0, STATIC, ev, rho0, CFG, 4, CeOptions())
    assert s1.level == 1 and s1.mu_tilde > 2.0 and s1.sigma_tilde == 1.0
    assert s0.current_threshold < s1.current_threshold <= 3.0


def test_tilted_likelihood_self_normalizes():
    rho0 = GaussianDensity.from_std([0.0], [1.0])
    tilt = TiltedInitial(rho0, P1, 2.5, 1.0)
    s = run_samples(STATIC, RareEvent(3.0, P1), tilt, CFG, 100_000, 5)
    l0 = np.exp(s.log_l0)
    assert abs(l0.mean() - 1) < 3 * l0.std() / math.sqrt(l0.size)


def test_final_tilt_equal_to_original_matches_crude_mc():
    dw = double_well_model(0.5)
    rho0 = GaussianDensity.from_std([-1.0], [0.2])
    ev = RareEvent(-0.9, P1)
    cfg = PathConfig(dt=0.01)
    tilt = TiltedInitial(rho0, P1, -1.0, 0.2)
    s = run_samples(dw, ev, tilt, cfg, 100_000, 8)
    np.testing.assert_array_equal(s.log_l0, 0.0)
    mc = estimate("mc", dw, ev, rho0, cfg, 100_000, seed=9)
    w = s.weights
    half = 1.96 * w.std() / math.sqrt(w.size)
    assert max(w.mean() - half, mc.ci_lo) <= min(w.mean() + half, mc.ci_hi)


def test_level_cap_on_small_spread_double_well():
    dw = double_well_model(0.5)
    rho0 = GaussianDensity.from_std([-1.0], [0.2])
    with pytest.raises(LevelCapError):
        ce_estimate(dw, RareEvent(1.2, P1), rho0, PathConfig(dt=0.01), 1000, seed=1)


@pytest.mark.parametrize("kw", [dict(beta=0.0), dict(beta=1.0), dict(pilot_size=10), dict(level_cap=0)])
def test_options_validation(kw):
    with pytest.raises(ValueError):
        CeOptions(**kw)
