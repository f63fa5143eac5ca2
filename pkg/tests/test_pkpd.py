"""Simulator tests: priors, dynamics, confounding dial, counterfactual replay."""
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cfcde import pkpd


def make_patient(rho=0.005, beta_c=0.028, alpha_r=0.1, v0=30.0, group=2):
    return pkpd.PatientParams(rho=rho, K=30.0, beta_c=beta_c, alpha_r=alpha_r,
                              beta_r=alpha_r / 10.0, group=group, v0=v0)


class TestSamplePatient:
    def test_carrying_capacity_constant(self):
        rng = np.random.default_rng(0)
        for group in (1, 2, 3):
            for _ in range(20):
                assert pkpd.sample_patient(rng, group).K == 30.0

    def test_alpha_beta_ratio_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = pkpd.sample_patient(rng, int(rng.integers(1, 4)))
            assert p.beta_r == p.alpha_r / 10.0
            assert p.beta_r * 10.0 == pytest.approx(p.alpha_r, rel=1e-15)

    def test_invalid_group(self):
        with pytest.raises(ValueError):
            pkpd.sample_patient(np.random.default_rng(0), 4)

    def test_group1_alpha_mean_matches_truncated_normal_oracle(self):
        # The group-1 prior shifts the pre-truncation mean to 1.1 x 0.0398;
        # the draw mean must match the analytic zero-truncated normal mean.
        rng = np.random.default_rng(2)
        n = 100_000
        draws = np.array([pkpd.sample_patient(rng, 1).alpha_r for _ in range(n)])
        mu = 1.1 * pkpd.ALPHA_R_MEAN
        sigma = pkpd.ALPHA_R_STD
        oracle = stats.truncnorm(-mu / sigma, np.inf, loc=mu, scale=sigma)
        se = oracle.std() / math.sqrt(n)
        assert abs(draws.mean() - oracle.mean()) < 3 * se

    def test_group_shifts_move_the_right_priors(self):
        rng = np.random.default_rng(3)
        n = 40_000
        a1 = np.mean([pkpd.sample_patient(rng, 1).alpha_r for _ in range(n)])
        a2 = np.mean([pkpd.sample_patient(rng, 2).alpha_r for _ in range(n)])
        b3 = np.mean([pkpd.sample_patient(rng, 3).beta_c for _ in range(n)])
        b2 = np.mean([pkpd.sample_patient(rng, 2).beta_c for _ in range(n)])
        assert a1 > a2
        assert b3 > b2
        assert abs(b3 / b2 - 1.1) < 0.01  # negligible truncation for beta_c

    def test_initial_volume_spans_onset_stages(self):
        rng = np.random.default_rng(4)
        d0 = np.array([pkpd.diameter_of_volume(pkpd.sample_patient(rng, 2).v0)
                       for _ in range(2000)])
        assert d0.min() >= 1.0 and d0.max() <= 6.0


class TestTreatmentProbs:
    def test_center_gives_half(self):
        for gamma in (0.0, 2.0, 10.0):
            p_c, p_r = pkpd.treatment_probs(6.5, gamma, gamma)
            assert p_c == 0.5 and p_r == 0.5

    def test_zero_gamma_gives_half_everywhere(self):
        for dbar in (0.0, 1.0, 6.5, 13.0):
            assert pkpd.treatment_probs(dbar, 0.0, 0.0) == (0.5, 0.5)

    def test_max_diameter_matches_independent_sigmoid(self):
        from scipy.special import expit
        p_c, _ = pkpd.treatment_probs(13.0, 10.0, 10.0)
        assert p_c == pytest.approx(float(expit(5.0)), abs=1e-12)
        assert p_c == pytest.approx(0.9933, abs=5e-5)


class TestStepDynamics:
    def test_untreated_growth_below_capacity(self):
        p = make_patient()
        state = pkpd.SimState(0, 10.0, 0.0, 0, 0)
        nxt = pkpd.step_dynamics(state, p, 0.0)
        assert nxt.v > state.v

    def test_chemo_concentration_recurrence(self):
        p = make_patient()
        nxt = pkpd.step_dynamics(pkpd.SimState(0, 10.0, 5.0, 1, 0), p, 0.0)
        assert nxt.c == 7.5

    def test_capacity_fixed_point(self):
        p = make_patient()
        nxt = pkpd.step_dynamics(pkpd.SimState(0, p.K, 0.0, 0, 0), p, 0.0)
        assert nxt.v == p.K

    def test_nonpositive_volume_rejected(self):
        with pytest.raises(ValueError):
            pkpd.step_dynamics(pkpd.SimState(0, 0.0, 0.0, 0, 0), make_patient(), 0.0)


@given(st.floats(min_value=1e-6, max_value=13.0))
def test_volume_diameter_round_trip(d):
    assert pkpd.diameter_of_volume(pkpd.volume_of_diameter(d)) == pytest.approx(d, rel=1e-12)


class TestSimulateFactual:
    def test_zero_gamma_treatment_frequency(self):
        rng = np.random.default_rng(5)
        hits = np.zeros(2)
        days = 0
        for _ in range(170):  # ~10^4 patient-days
            p = pkpd.sample_patient(rng, 2)
            traj = pkpd.simulate_factual(p, 0.0, 0.0, 60, rng)
            hits += (traj.a_chemo.sum(), traj.a_radio.sum())
            days += traj.horizon
        sigma = math.sqrt(0.25 / days)
        for frac in hits / days:
            assert abs(frac - 0.5) < 3 * sigma

    def test_confounding_dial_increases_correlation(self):
        corr = {}
        for gamma in (2.0, 10.0):
            rng = np.random.default_rng(6)
            diams, acts = [], []
            for _ in range(500):
                p = pkpd.sample_patient(rng, int(rng.integers(1, 4)))
                traj = pkpd.simulate_factual(p, gamma, gamma, 60, rng)
                diams.append(traj.diameters[:-1])
                acts.append(traj.a_chemo)
            corr[gamma] = stats.pointbiserialr(
                np.concatenate(acts), np.concatenate(diams)).statistic
        assert corr[10.0] > corr[2.0]

    def test_determinism(self):
        p = pkpd.sample_patient(np.random.default_rng(7), 1)
        t1 = pkpd.simulate_factual(p, 4.0, 4.0, 60, np.random.default_rng(99))
        t2 = pkpd.simulate_factual(p, 4.0, 4.0, 60, np.random.default_rng(99))
        assert t1.v.tobytes() == t2.v.tobytes()
        assert np.array_equal(t1.a_chemo, t2.a_chemo)
        assert t1.noise.tobytes() == t2.noise.tobytes()

    def test_volume_stays_clamped(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = pkpd.sample_patient(rng, int(rng.integers(1, 4)))
            traj = pkpd.simulate_factual(p, 10.0, 10.0, 60, rng)
            assert traj.v.min() >= pkpd.V_MIN
            assert traj.v.max() <= pkpd.V_MAX

    def test_monotone_confounding_trend(self):
        # Treatment feedback compresses the diameter distribution at high
        # gamma, so the realized correlation saturates near the top of the
        # dial; the trend check allows one Monte-Carlo standard error there.
        corrs = []
        for gamma in (2.0, 4.0, 6.0, 8.0, 10.0):
            rng = np.random.default_rng(11)
            diams, acts = [], []
            for _ in range(500):
                p = pkpd.sample_patient(rng, int(rng.integers(1, 4)))
                traj = pkpd.simulate_factual(p, gamma, gamma, 60, rng)
                diams.append(traj.diameters[:-1])
                acts.append(traj.a_chemo)
            corrs.append(stats.pointbiserialr(
                np.concatenate(acts), np.concatenate(diams)).statistic)
        assert all(b >= a - 0.01 for a, b in zip(corrs, corrs[1:]))
        assert corrs[-1] > corrs[0]
        assert stats.spearmanr(corrs, [2, 4, 6, 8, 10]).statistic > 0


def plan_of(traj, start, pairs):
    pairs = np.asarray(pairs)
    return pkpd.TreatmentPlan(start=start, a_chemo=pairs[:, 0], a_radio=pairs[:, 1])


class TestCounterfactual:
    def test_factual_plan_replays_bit_exactly(self):
        rng = np.random.default_rng(9)
        p = pkpd.sample_patient(rng, 3)
        traj = pkpd.simulate_factual(p, 6.0, 6.0, 60, rng)
        for branch in (0, 17, 40):
            plan = pkpd.TreatmentPlan(
                start=branch,
                a_chemo=traj.a_chemo[branch:], a_radio=traj.a_radio[branch:])
            cf = pkpd.simulate_counterfactual(traj, branch, plan)
            assert cf.v.tobytes() == traj.v.tobytes()
            assert cf.c.tobytes() == traj.c.tobytes()

    def test_no_treatment_zero_noise_grows(self):
        p = make_patient(v0=5.0)
        traj = pkpd.simulate_factual(p, 0.0, 0.0, 30, np.random.default_rng(10))
        traj.noise[:] = 0.0
        plan = plan_of(traj, 5, [(0, 0)] * 25)
        cf = pkpd.simulate_counterfactual(traj, 5, plan)
        assert (np.diff(cf.v[5:]) > 0).all()

    def test_both_plan_minimizes_volume(self):
        # Brute-force the four sustained plans on one patient, shared noise.
        rng = np.random.default_rng(12)
        p = make_patient(rho=0.004, beta_c=0.03, alpha_r=0.1, v0=40.0)
        traj = pkpd.simulate_factual(p, 2.0, 2.0, 30, rng)
        branch = 10
        finals = []
        for pair in pkpd.PLAN_PAIRS:
            plan = plan_of(traj, branch, [pair] * 5)
            cf = pkpd.simulate_counterfactual(traj, branch, plan)
            finals.append(cf.v[-1])
        assert np.argmin(finals) == 3
        assert finals[3] < finals[0]

    def test_plan_shorter_than_horizon_rejected(self):
        rng = np.random.default_rng(13)
        traj = pkpd.simulate_factual(make_patient(), 2.0, 2.0, 30, rng)
        plan = plan_of(traj, 10, [(1, 1)] * 5)
        with pytest.raises(ValueError):
            pkpd.simulate_counterfactual(traj, 10, plan, horizon=20)

    def test_branch_outside_grid_rejected(self):
        rng = np.random.default_rng(14)
        traj = pkpd.simulate_factual(make_patient(), 2.0, 2.0, 30, rng)
        plan = plan_of(traj, 31, [(1, 1)] * 2)
        with pytest.raises(ValueError):
            pkpd.simulate_counterfactual(traj, 31, plan)

    def test_vectorized_grid_matches_scalar_replay(self):
        rng = np.random.default_rng(15)
        p = pkpd.sample_patient(rng, 1)
        traj = pkpd.simulate_factual(p, 4.0, 4.0, 60, rng)
        days = np.array([0, 13, 37, 59])
        grid = pkpd.counterfactual_volume_grid(traj, days)
        for bi, b in enumerate(days):
            for pi, pair in enumerate(pkpd.PLAN_PAIRS):
                plan = plan_of(traj, int(b), [pair] * (60 - b))
                cf = pkpd.simulate_counterfactual(traj, int(b), plan)
                np.testing.assert_allclose(grid[bi, pi], cf.v, rtol=1e-12)
