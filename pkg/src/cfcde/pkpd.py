"""Ground-truth lung-tumor simulator with confounded daily treatment assignment.

Tumor volume follows a log-kill growth law under daily chemotherapy and
radiotherapy decisions on a one-day Euler grid. Assignment probabilities are
sigmoids in the recent mean tumor diameter, so larger tumors are treated more
often; the strength of that coupling is the confounding dial gamma.
Counterfactual trajectories replay the factual noise stream (common random
numbers), so alternative treatment plans are compared on identical randomness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .observation import stage_of_diameters

V_MAX = 1150.0            # cm^3, volume ceiling (~13 cm diameter sphere)
V_MIN = 1e-4              # cm^3, lower clamp: effective eradication
D_MAX = 13.0              # cm, maximum tumor diameter
SIGMOID_CENTER = D_MAX / 2.0
CARRYING_CAPACITY = 30.0  # cm^3
CHEMO_DOSE = 5.0          # mg/m^3 vinblastine-equivalent per administered day
RADIO_DOSE = 2.0          # Gy per administered fraction
NOISE_STD = 0.01          # std of per-day multiplicative growth noise
DBAR_WINDOW = 15          # days of diameter history seen by the assignment policy
DELTA = 1.0               # day, grid step

RHO_MEAN, RHO_STD = 7.00e-5, 7.23e-3
BETA_C_MEAN, BETA_C_STD = 0.028, 0.0007
ALPHA_R_MEAN, ALPHA_R_STD = 0.0398, 0.168
GROUP_MEAN_BOOST = 1.1    # group 1 boosts radio response, group 3 chemo response
ALPHA_BETA_RATIO = 10.0

# Treatment combinations in canonical order; index = a_chemo + 2 * a_radio.
PLAN_NAMES = ("none", "chemo", "radio", "both")
PLAN_PAIRS = ((0, 0), (1, 0), (0, 1), (1, 1))


def volume_of_diameter(diameter):
    """Sphere volume (cm^3) from diameter (cm)."""
    return np.pi / 6.0 * np.asarray(diameter, dtype=float) ** 3


def diameter_of_volume(volume):
    """Sphere diameter (cm) from volume (cm^3)."""
    return (6.0 * np.asarray(volume, dtype=float) / np.pi) ** (1.0 / 3.0)


@dataclass(frozen=True)
class PatientParams:
    """Per-patient response coefficients and heterogeneity group."""

    rho: float      # growth rate (1/day)
    K: float        # carrying capacity (cm^3)
    beta_c: float   # chemo cell kill (per mg/m^3)
    alpha_r: float  # radio cell kill, linear (per Gy)
    beta_r: float   # radio cell kill, quadratic (per Gy^2)
    group: int      # heterogeneity group in {1, 2, 3}
    v0: float       # initial volume (cm^3)

    def __post_init__(self):
        if min(self.rho, self.K, self.beta_c, self.alpha_r, self.beta_r) < 0:
            raise ValueError("response coefficients must be nonnegative")
        if self.group not in (1, 2, 3):
            raise ValueError(f"group must be 1, 2 or 3, got {self.group!r}")
        if not 0.0 < self.v0 <= V_MAX:
            raise ValueError(f"v0 must lie in (0, {V_MAX}], got {self.v0}")


@dataclass
class SimState:
    """One grid point of the simulation.

    `c` is the chemotherapy concentration carried over from the previous day
    (decayed, before any new dose); `a_chemo`/`a_radio` are the actions taken
    on day `t`, which a caller fills in before stepping.
    """

    t: int
    v: float
    c: float
    a_chemo: int
    a_radio: int


@dataclass(frozen=True)
class TreatmentPlan:
    """Daily treatment pairs applied on days start, start+1, ..., start+len-1."""

    start: int
    a_chemo: np.ndarray
    a_radio: np.ndarray

    def __post_init__(self):
        ac = np.asarray(self.a_chemo, dtype=np.int8)
        ar = np.asarray(self.a_radio, dtype=np.int8)
        if ac.shape != ar.shape or ac.ndim != 1 or ac.size == 0:
            raise ValueError("plan needs matching nonempty 1-d action arrays")
        if not (np.isin(ac, (0, 1)).all() and np.isin(ar, (0, 1)).all()):
            raise ValueError("plan actions must be binary")
        object.__setattr__(self, "a_chemo", ac)
        object.__setattr__(self, "a_radio", ar)

    def __len__(self):
        return self.a_chemo.size

    @property
    def end(self):
        return self.start + len(self)


@dataclass
class DenseTrajectory:
    """Daily ground-truth path over [0, horizon].

    Volume-like series have horizon+1 entries; per-day series (actions, noise,
    assignment probabilities, active chemo concentration, decision-time mean
    diameter) have horizon entries, entry t describing the step t -> t+1.
    """

    params: PatientParams
    horizon: int
    v: np.ndarray
    c: np.ndarray
    a_chemo: np.ndarray
    a_radio: np.ndarray
    noise: np.ndarray
    p_chemo: np.ndarray
    p_radio: np.ndarray
    dbar: np.ndarray
    diameters: np.ndarray
    stages: np.ndarray

    def __post_init__(self):
        if self.v.shape != (self.horizon + 1,):
            raise ValueError("volume series must have horizon + 1 entries")
        if self.a_chemo.shape != (self.horizon,):
            raise ValueError("action series must have horizon entries")

    @property
    def treated(self) -> bool:
        return bool(self.a_chemo.any() or self.a_radio.any())

    def state(self, t: int) -> SimState:
        carry = float(self.c[t - 1]) if t > 0 else 0.0
        if t < self.horizon:
            return SimState(t, float(self.v[t]), carry,
                            int(self.a_chemo[t]), int(self.a_radio[t]))
        return SimState(t, float(self.v[t]), carry, 0, 0)


def _positive_normal(rng, mean, std):
    # Truncation at zero by redraw; zero itself is admissible.
    x = rng.normal(mean, std)
    while x < 0.0:
        x = rng.normal(mean, std)
    return float(x)


def sample_patient(rng: np.random.Generator, group: int) -> PatientParams:
    """Draw one patient's response coefficients for the given heterogeneity group.

    Group 1 draws alpha_r from a prior with mean scaled by 1.1, group 3 likewise
    for beta_c; beta_r is pinned to alpha_r / 10. The initial volume comes from
    a uniform [1, 6] cm diameter.
    """
    if group not in (1, 2, 3):
        raise ValueError(f"group must be 1, 2 or 3, got {group!r}")
    alpha_mean = ALPHA_R_MEAN * (GROUP_MEAN_BOOST if group == 1 else 1.0)
    beta_c_mean = BETA_C_MEAN * (GROUP_MEAN_BOOST if group == 3 else 1.0)
    rho = _positive_normal(rng, RHO_MEAN, RHO_STD)
    beta_c = _positive_normal(rng, beta_c_mean, BETA_C_STD)
    alpha_r = _positive_normal(rng, alpha_mean, ALPHA_R_STD)
    d0 = rng.uniform(1.0, 6.0)
    return PatientParams(
        rho=rho,
        K=CARRYING_CAPACITY,
        beta_c=beta_c,
        alpha_r=alpha_r,
        beta_r=alpha_r / ALPHA_BETA_RATIO,
        group=group,
        v0=float(volume_of_diameter(d0)),
    )


def _sigmoid(arg):
    # Saturates instead of overflowing, keeping the function total.
    if arg < -700.0:
        return 0.0
    if arg > 700.0:
        return 1.0
    return 1.0 / (1.0 + math.exp(-arg))


def treatment_probs(dbar, gamma_c, gamma_r):
    """Assignment probabilities (p_chemo, p_radio) given recent mean diameter.

    p = sigmoid(gamma / D_MAX * (dbar - D_MAX / 2)); total on all real inputs.
    """
    p_c = _sigmoid((gamma_c / D_MAX) * (dbar - SIGMOID_CENTER))
    p_r = _sigmoid((gamma_r / D_MAX) * (dbar - SIGMOID_CENTER))
    return p_c, p_r


def step_dynamics(state: SimState, params: PatientParams, e_t: float) -> SimState:
    """Advance the tumor one day under the state's actions and noise draw e_t.

    The new chemo dose adds onto half of yesterday's concentration (one-day
    half-life); the returned state's actions are zeroed placeholders for the
    caller to fill before the next step.
    """
    if state.v <= 0.0:
        raise ValueError(f"tumor volume must be positive, got {state.v}")
    c_active = CHEMO_DOSE * state.a_chemo + state.c / 2.0
    d = RADIO_DOSE * state.a_radio
    growth = params.rho * math.log(params.K / state.v)
    kill = params.beta_c * c_active + params.alpha_r * d + params.beta_r * d * d
    v_next = state.v * (1.0 + growth - kill + e_t)
    v_next = min(max(v_next, V_MIN), V_MAX)
    return SimState(t=state.t + 1, v=v_next, c=c_active, a_chemo=0, a_radio=0)


def simulate_factual(params: PatientParams, gamma_c: float, gamma_r: float,
                     horizon_T: int, rng: np.random.Generator) -> DenseTrajectory:
    """Simulate one factual trajectory with confounded Bernoulli assignment.

    Per day, in fixed draw order: a_chemo, a_radio, then growth noise. The
    noise stream and assignment probabilities are stored for counterfactual
    replay.
    """
    T = int(horizon_T)
    if T <= 0:
        raise ValueError("horizon must be positive")
    v = np.empty(T + 1)
    diam = np.empty(T + 1)
    c = np.empty(T)
    a_c = np.empty(T, dtype=np.int8)
    a_r = np.empty(T, dtype=np.int8)
    noise = np.empty(T)
    p_c_arr = np.empty(T)
    p_r_arr = np.empty(T)
    dbar_arr = np.empty(T)

    v[0] = params.v0
    diam[0] = diameter_of_volume(params.v0)
    carry = 0.0
    for t in range(T):
        lo = max(0, t - DBAR_WINDOW + 1)
        dbar = float(diam[lo:t + 1].mean())
        p_c, p_r = treatment_probs(dbar, gamma_c, gamma_r)
        ac = 1 if rng.random() < p_c else 0
        ar = 1 if rng.random() < p_r else 0
        e_t = float(rng.normal(0.0, NOISE_STD))
        state = step_dynamics(SimState(t, float(v[t]), carry, ac, ar), params, e_t)
        v[t + 1] = state.v
        diam[t + 1] = diameter_of_volume(state.v)
        carry = state.c
        c[t] = state.c
        a_c[t], a_r[t] = ac, ar
        noise[t] = e_t
        p_c_arr[t], p_r_arr[t] = p_c, p_r
        dbar_arr[t] = dbar

    return DenseTrajectory(
        params=params, horizon=T, v=v, c=c, a_chemo=a_c, a_radio=a_r,
        noise=noise, p_chemo=p_c_arr, p_radio=p_r_arr, dbar=dbar_arr,
        diameters=diam, stages=stage_of_diameters(diam),
    )


def simulate_counterfactual(traj: DenseTrajectory, t_branch: int,
                            plan: TreatmentPlan,
                            horizon: int | None = None) -> DenseTrajectory:
    """Replay the stored prefix up to t_branch, then apply the plan's actions.

    No Bernoulli draws happen after the branch; the stored noise stream is
    reused so the only difference from the factual trajectory is the plan.
    The result covers [0, horizon] with horizon defaulting to the plan's end.
    """
    if not 0 <= t_branch <= traj.horizon:
        raise ValueError(f"t_branch {t_branch} outside grid [0, {traj.horizon}]")
    if plan.start != t_branch:
        raise ValueError(f"plan starts at {plan.start}, expected branch day {t_branch}")
    end = plan.end if horizon is None else int(horizon)
    if end > plan.end:
        raise ValueError(f"plan covers days up to {plan.end}, horizon {end} requested")
    if end > traj.horizon:
        raise ValueError("plan extends past the factual horizon")

    T = end
    v = traj.v[:T + 1].copy()
    diam = traj.diameters[:T + 1].copy()
    c = traj.c[:T].copy()
    a_c = traj.a_chemo[:T].copy()
    a_r = traj.a_radio[:T].copy()
    p_c_arr = traj.p_chemo[:T].copy()
    p_r_arr = traj.p_radio[:T].copy()
    dbar_arr = traj.dbar[:T].copy()

    carry = float(traj.c[t_branch - 1]) if t_branch > 0 else 0.0
    for t in range(t_branch, T):
        lo = max(0, t - DBAR_WINDOW + 1)
        dbar = float(diam[lo:t + 1].mean())
        # Actions are dictated by the plan, so assignment probabilities are
        # undefined past the branch.
        p_c_arr[t] = p_r_arr[t] = math.nan
        dbar_arr[t] = dbar
        ac = int(plan.a_chemo[t - t_branch])
        ar = int(plan.a_radio[t - t_branch])
        state = step_dynamics(SimState(t, float(v[t]), carry, ac, ar),
                              traj.params, float(traj.noise[t]))
        v[t + 1] = state.v
        diam[t + 1] = diameter_of_volume(state.v)
        carry = state.c
        c[t] = state.c
        a_c[t], a_r[t] = ac, ar

    return DenseTrajectory(
        params=traj.params, horizon=T, v=v, c=c, a_chemo=a_c, a_radio=a_r,
        noise=traj.noise[:T].copy(), p_chemo=p_c_arr, p_radio=p_r_arr,
        dbar=dbar_arr, diameters=diam, stages=stage_of_diameters(diam),
    )


def counterfactual_volume_grid(traj: DenseTrajectory, branch_days: np.ndarray,
                               plans=PLAN_PAIRS) -> np.ndarray:
    """Volumes under sustained plans for many branch days at once.

    Returns an array of shape (len(branch_days), len(plans), horizon + 1) where
    row (b, p) is the trajectory that follows the factual path before day
    branch_days[b] and applies plans[p] on every day from branch_days[b] on,
    reusing the stored noise stream. Rows before activation copy the factual
    volumes bit-for-bit.
    """
    branch_days = np.asarray(branch_days, dtype=np.int64)
    T = traj.horizon
    n_b, n_p = branch_days.size, len(plans)
    b_flat = np.repeat(branch_days, n_p)
    plan_ac = np.tile(np.array([p[0] for p in plans], dtype=float), n_b)
    plan_ar = np.tile(np.array([p[1] for p in plans], dtype=float), n_b)

    rho, K = traj.params.rho, traj.params.K
    beta_c, alpha_r, beta_r = traj.params.beta_c, traj.params.alpha_r, traj.params.beta_r

    V = np.tile(traj.v, (n_b * n_p, 1))
    carry = np.zeros(n_b * n_p)
    for t in range(T):
        active = b_flat <= t
        ac = np.where(active, plan_ac, float(traj.a_chemo[t]))
        ar = np.where(active, plan_ar, float(traj.a_radio[t]))
        c_active = CHEMO_DOSE * ac + carry / 2.0
        d = RADIO_DOSE * ar
        growth = rho * np.log(K / V[:, t])
        kill = beta_c * c_active + alpha_r * d + beta_r * d * d
        v_next = V[:, t] * (1.0 + growth - kill + traj.noise[t])
        v_next = np.minimum(np.maximum(v_next, V_MIN), V_MAX)
        V[:, t + 1] = np.where(active, v_next, traj.v[t + 1])
        carry = np.where(active, c_active, traj.c[t])
    return V.reshape(n_b, n_p, T + 1)
