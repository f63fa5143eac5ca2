"""Irregular observation process over dense tumor trajectories.

Observation times are drawn from a self-exciting point process whose base
rate depends on the current cancer stage: lambda(t) = 0.01 * kappa^stage +
sum of exp(-2 (t - t_m)) over events after the last stage change. Sampling
uses thinning with a piecewise-constant bound that is exact for the
monotonically decaying kernel. Records are filled by linear interpolation of
the dense grid, and each record carries per-dimension observation counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .pkpd import DenseTrajectory

BASE_RATE = 0.01        # 1/day, stage-0 base intensity at kappa = 1
KERNEL_DECAY = 2.0      # 1/day, exponential kernel rate (branching ratio 0.5)
STAGE_BOUNDARIES = (3.0, 4.0, 5.0)  # cm diameter cutoffs between stages
N_COUNT_CHANNELS = 8    # dims of [X(5), A(2), Y(1)] counted per observation


def stage_of_diameter(d: float) -> int:
    """Clinical stage index in {0, 1, 2, 3} for a tumor diameter in cm.

    Stage 0 covers 0 <= d <= 3 (a fully regressed tumor maps to stage 0),
    then 3 < d <= 4 -> 1, 4 < d <= 5 -> 2, d > 5 -> 3.
    """
    if d < 0:
        raise ValueError(f"diameter must be nonnegative, got {d}")
    for idx, cutoff in enumerate(STAGE_BOUNDARIES):
        if d <= cutoff:
            return idx
    return 3


def stage_of_diameters(d: np.ndarray) -> np.ndarray:
    """Vectorized stage lookup; negative diameters are rejected."""
    d = np.asarray(d, dtype=float)
    if (d < 0).any():
        raise ValueError("diameters must be nonnegative")
    return np.digitize(d, STAGE_BOUNDARIES, right=True).astype(np.int8)


@dataclass(frozen=True)
class HawkesConfig:
    """Observation-process settings.

    kappa_policy "constant" uses `kappa` for everyone; "treatment" gives
    patients with any factual treatment `kappa_treated` and the rest
    `kappa_untreated`.
    """

    kappa: float = 10.0
    kappa_policy: str = "constant"
    kappa_treated: float = 10.0
    kappa_untreated: float = 1.0

    def __post_init__(self):
        if self.kappa_policy not in ("constant", "treatment"):
            raise ValueError(f"unknown kappa policy {self.kappa_policy!r}")
        if min(self.kappa, self.kappa_treated, self.kappa_untreated) < 1.0:
            raise ValueError("kappa must be >= 1")

    def kappa_for(self, treated: bool) -> float:
        if self.kappa_policy == "constant":
            return self.kappa
        return self.kappa_treated if treated else self.kappa_untreated


@dataclass
class ObservationSeries:
    """Irregular records of one patient, linked to its ground truth.

    x columns are [volume, stage, group one-hot(3)]; `a` holds the two
    treatment channels, `y` the outcome (volume), and `counts` the number of
    times each of the 8 observed dimensions has been recorded up to and
    including each time. All values are raw (cm^3, days, integer counts).
    """

    patient_id: int
    group: int
    times: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    counts: np.ndarray
    trajectory: "DenseTrajectory | None" = field(default=None, repr=False)

    def __post_init__(self):
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("an observation series needs at least one time")
        if (np.diff(self.times) <= 0).any():
            raise ValueError("observation times must be strictly increasing")

    def __len__(self):
        return self.times.size


def intensity_at(t: float, events_since_tau, stage: int, kappa: float) -> float:
    """Observation intensity at time t for events after the last stage change."""
    events = np.asarray(events_since_tau, dtype=float)
    if events.size and events.max() >= t:
        raise ValueError("excitation events must precede the evaluation time")
    lam = BASE_RATE * kappa ** stage
    if events.size:
        lam += float(np.exp(-KERNEL_DECAY * (t - events)).sum())
    return lam


def _sample_segment(rng, lam0, t0, t1, out, excite=True):
    """Thinning on one constant-stage segment; excitation starts empty.

    The bound lam0 + current excitation is refreshed at every candidate and
    accepted event; it dominates the true intensity until the next event
    because the kernel only decays. excite=False drops the self-exciting
    term, leaving the homogeneous base process (a test mode).
    """
    excitation = 0.0
    t = t0
    while True:
        lam_bar = lam0 + excitation
        t_next = t + rng.exponential(1.0 / lam_bar)
        if t_next >= t1:
            return
        excitation *= math.exp(-KERNEL_DECAY * (t_next - t))
        t = t_next
        if rng.random() * lam_bar <= lam0 + excitation:
            out.append(t)
            if excite:
                excitation += 1.0


def sample_event_times(stages_by_day: np.ndarray, kappa: float, horizon: float,
                       rng: np.random.Generator, excite: bool = True) -> list[float]:
    """Draw raw event times on [0, horizon) for a daily stage step function.

    Excitation memory resets at every stage change, per the definition of the
    intensity relative to the last change of state. excite=False samples the
    homogeneous base process only (goodness-of-fit test mode).
    """
    stages_by_day = np.asarray(stages_by_day)
    events: list[float] = []
    seg_start = 0
    n_days = int(horizon)
    for day in range(1, n_days + 1):
        if day == n_days or stages_by_day[day] != stages_by_day[seg_start]:
            lam0 = BASE_RATE * kappa ** int(stages_by_day[seg_start])
            _sample_segment(rng, lam0, float(seg_start), float(day), events,
                            excite=excite)
            seg_start = day
    return events


def compensator_increments(event_times, lam0):
    """Exp(1) residuals of inter-arrivals under the frozen-stage intensity.

    Integrated intensity between consecutive events (and from 0 to the first):
    lam0 * dt plus the kernel mass (1 - exp(-2 dt)) / 2 of each earlier event.
    """
    ts = np.asarray(event_times, dtype=float)
    out = np.empty(ts.size)
    prev = 0.0
    for i, t in enumerate(ts):
        past = ts[:i]
        mass_now = (1.0 - np.exp(-KERNEL_DECAY * (t - past))).sum() / KERNEL_DECAY
        mass_prev = (1.0 - np.exp(-KERNEL_DECAY * (prev - past[past < prev]))).sum() / KERNEL_DECAY
        out[i] = lam0 * (t - prev) + (mass_now - mass_prev)
        prev = t
    return out


def sample_observations(traj: "DenseTrajectory", cfg: HawkesConfig,
                        rng: np.random.Generator,
                        patient_id: int = 0) -> ObservationSeries:
    """Sample one patient's observation series from its dense trajectory.

    Stage follows the instantaneous grid diameter (a per-day step function).
    The t=0 record is always emitted so every patient has a nonempty history;
    it is a guaranteed record, not an exciting event of the point process.
    """
    kappa = cfg.kappa_for(traj.treated)
    events = sample_event_times(traj.stages, kappa, float(traj.horizon), rng)
    if events and events[0] == 0.0:
        times = np.asarray(events)
    else:
        times = np.asarray([0.0] + events)

    T = traj.horizon
    grid = np.arange(T + 1, dtype=float)
    vol = np.interp(times, grid, traj.v)
    stage = np.interp(times, grid, traj.stages.astype(float))
    # Extend per-day actions to the final grid point so interpolation covers t = T.
    a_c = np.interp(times, grid, np.append(traj.a_chemo, traj.a_chemo[-1]).astype(float))
    a_r = np.interp(times, grid, np.append(traj.a_radio, traj.a_radio[-1]).astype(float))

    m = times.size
    onehot = np.zeros((m, 3))
    onehot[:, traj.params.group - 1] = 1.0
    x = np.column_stack([vol, stage, onehot])
    counts = np.tile(np.arange(1, m + 1, dtype=np.int64)[:, None], (1, N_COUNT_CHANNELS))
    return ObservationSeries(
        patient_id=patient_id, group=traj.params.group, times=times,
        x=x, a=np.column_stack([a_c, a_r]), y=vol.copy(), counts=counts,
        trajectory=traj,
    )
