"""Control paths, normalization, and dataset files with counterfactual labels.

An observation series becomes a piecewise-linear control path over a fixed,
versioned channel layout. Files are UTF-8 JSON lines: a header object with
the generating configuration and normalization constants, then one patient
object per line holding the raw observation records, the dense ground truth,
and counterfactual volumes for the sustained evaluation plans.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import jsonlines
from .observation import (HawkesConfig, N_COUNT_CHANNELS, ObservationSeries,
                          sample_observations)
from .pkpd import (DenseTrajectory, PLAN_NAMES, PLAN_PAIRS, V_MAX,
                   counterfactual_volume_grid, sample_patient, simulate_factual)

DATASET_SCHEMA = "cfcde-dataset-1"
DEFAULT_COUNT_SCALE = 100.0
DEFAULT_CF_HORIZONS = (1, 3, 4, 5)

# Versioned control-path channel layout; model checkpoints depend on it.
CHANNEL_NAMES = (
    "volume", "stage", "group_1", "group_2", "group_3",
    "a_chemo", "a_radio", "outcome",
    *(f"count_{i}" for i in range(N_COUNT_CHANNELS)),
    "time",
)
_CHANNEL_KINDS = {
    "volume": "volume", "stage": "stage", "outcome": "volume", "time": "time",
    **{f"group_{i}": "binary" for i in (1, 2, 3)},
    **{name: "binary" for name in ("a_chemo", "a_radio")},
    **{f"count_{i}": "count" for i in range(N_COUNT_CHANNELS)},
}
N_CHANNELS = len(CHANNEL_NAMES)


class DatasetError(jsonlines.FormatError):
    pass


@dataclass(frozen=True)
class Normalizer:
    """Channel-wise scaling; constants live in every dataset header."""

    v_max: float = V_MAX
    horizon: float = 60.0
    count_scale: float = DEFAULT_COUNT_SCALE

    def _scale(self, channel: str) -> float:
        kind = _CHANNEL_KINDS.get(channel)
        if kind is None:
            raise ValueError(f"unknown channel {channel!r}")
        return {"volume": self.v_max, "time": self.horizon,
                "count": self.count_scale, "binary": 1.0, "stage": 1.0}[kind]

    def normalize(self, value, channel: str):
        return np.asarray(value, dtype=float) / self._scale(channel)

    def inverse(self, value, channel: str):
        return np.asarray(value, dtype=float) * self._scale(channel)


@dataclass
class ControlPath:
    """Piecewise-linear embedding of an observation series, normalized.

    Knot times are days divided by the horizon. Construction is causal: the
    path restricted to [t_0, t_j] depends only on knots up to j. Derivatives
    are piecewise constant with the right-derivative convention at knots.
    """

    times: np.ndarray   # (m,) normalized knot times
    values: np.ndarray  # (m, N_CHANNELS)

    def __post_init__(self):
        if self.times.size == 0:
            raise ValueError("a control path needs at least one knot")
        if self.values.shape != (self.times.size, self.values.shape[1]):
            raise ValueError("knot values must be (len(times), channels)")

    @property
    def domain(self):
        return float(self.times[0]), float(self.times[-1])

    def _check(self, t):
        lo, hi = self.domain
        if t < lo - 1e-12 or t > hi + 1e-12:
            raise ValueError(f"time {t} outside path domain [{lo}, {hi}]")

    def value(self, t: float) -> np.ndarray:
        self._check(t)
        if self.times.size == 1:
            return self.values[0].copy()
        out = np.empty(self.values.shape[1])
        for ch in range(self.values.shape[1]):
            out[ch] = np.interp(t, self.times, self.values[:, ch])
        return out

    def derivative(self, t: float) -> np.ndarray:
        self._check(t)
        if self.times.size == 1:
            return np.zeros(self.values.shape[1])
        # Right derivative at interior knots; left on the final knot.
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        j = min(max(j, 0), self.times.size - 2)
        dt = self.times[j + 1] - self.times[j]
        return (self.values[j + 1] - self.values[j]) / dt

    def segments(self):
        """(dt, slope) arrays of shape (m-1,), (m-1, channels)."""
        if self.times.size == 1:
            return np.zeros(0), np.zeros((0, self.values.shape[1]))
        dt = np.diff(self.times)
        slope = np.diff(self.values, axis=0) / dt[:, None]
        return dt, slope


def build_control_path(obs: ObservationSeries,
                       normalizer: Normalizer | None = None) -> ControlPath:
    """Normalized control path [X, A, Y, counts, time] over the series' knots."""
    if len(obs) == 0:
        raise ValueError("cannot build a control path from an empty series")
    nz = normalizer if normalizer is not None else Normalizer()
    m = len(obs)
    values = np.empty((m, N_CHANNELS))
    values[:, 0] = nz.normalize(obs.x[:, 0], "volume")
    values[:, 1] = obs.x[:, 1]
    values[:, 2:5] = obs.x[:, 2:5]
    values[:, 5] = obs.a[:, 0]
    values[:, 6] = obs.a[:, 1]
    values[:, 7] = nz.normalize(obs.y, "volume")
    values[:, 8:8 + N_COUNT_CHANNELS] = nz.normalize(obs.counts, "count_0")
    values[:, -1] = nz.normalize(obs.times, "time")
    return ControlPath(times=nz.normalize(obs.times, "time"), values=values)


@dataclass
class PatientRecord:
    """One dataset entry: observations, dense truth, counterfactual labels.

    cf_labels maps "<plan>@<n>" to ground-truth counterfactual volumes (cm^3)
    at observation time t_{k+n}, indexed by branch observation k; entries are
    NaN where fewer than n future observations exist.
    """

    patient_id: int
    group: int
    obs: ObservationSeries
    dense_v: np.ndarray
    dense_a: np.ndarray       # (T, 2) int
    dense_stage: np.ndarray
    cf_labels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def treated(self) -> bool:
        return bool(self.dense_a.any())


@dataclass(frozen=True)
class DatasetHeader:
    gamma: float
    kappa: object            # float, or {"treated": x, "untreated": y}
    horizon: float
    delta: float
    seed: int
    counts: int
    v_max: float = V_MAX
    count_scale: float = DEFAULT_COUNT_SCALE

    def normalizer(self) -> Normalizer:
        return Normalizer(v_max=self.v_max, horizon=self.horizon,
                          count_scale=self.count_scale)


def plan_label(plan_index: int, n: int) -> str:
    return f"{PLAN_NAMES[plan_index]}@{n}"


def counterfactual_labels(traj: DenseTrajectory, times: np.ndarray,
                          horizons=DEFAULT_CF_HORIZONS) -> dict[str, np.ndarray]:
    """Ground-truth volumes under the four sustained plans at t_{k+n}.

    Branching at observation k replaces treatments from day floor(t_k) + 1 on
    (the first administration strictly after the observation); earlier actions
    are observed history. Volumes at t_{k+n} interpolate the replayed grid.
    """
    m = times.size
    branch_days = np.minimum(np.floor(times).astype(np.int64) + 1, traj.horizon)
    unique_days, inverse = np.unique(branch_days, return_inverse=True)
    grid_v = counterfactual_volume_grid(traj, unique_days)  # (D, 4, T+1)

    labels = {}
    for n in horizons:
        kk = np.arange(max(m - n, 0))
        t_targets = times[kk + n] if kk.size else np.zeros(0)
        idx = np.minimum(t_targets.astype(np.int64), traj.horizon - 1)
        frac = t_targets - idx
        for p in range(len(PLAN_PAIRS)):
            vals = np.full(m, np.nan)
            if kk.size:
                rows = grid_v[inverse[kk], p]
                v_lo = np.take_along_axis(rows, idx[:, None], axis=1)[:, 0]
                v_hi = np.take_along_axis(rows, idx[:, None] + 1, axis=1)[:, 0]
                vals[kk] = v_lo * (1.0 - frac) + v_hi * frac
            labels[plan_label(p, n)] = vals
    return labels


@dataclass(frozen=True)
class SimSettings:
    """Generation settings for one dataset split."""

    gamma: float = 2.0
    hawkes: HawkesConfig = field(default_factory=HawkesConfig)
    horizon: int = 60
    cf_horizons: tuple = DEFAULT_CF_HORIZONS


def generate_patients(settings: SimSettings, n_patients: int,
                      seed_seq: np.random.SeedSequence,
                      first_id: int = 0) -> list[PatientRecord]:
    """Simulate patients on independent substreams and attach cf labels."""
    records = []
    for i, child in enumerate(seed_seq.spawn(n_patients)):
        rng = np.random.default_rng(child)
        group = int(rng.integers(1, 4))
        params = sample_patient(rng, group)
        traj = simulate_factual(params, settings.gamma, settings.gamma,
                                settings.horizon, rng)
        obs = sample_observations(traj, settings.hawkes, rng,
                                  patient_id=first_id + i)
        cf = counterfactual_labels(traj, obs.times, settings.cf_horizons)
        records.append(PatientRecord(
            patient_id=first_id + i, group=group, obs=obs,
            dense_v=traj.v,
            dense_a=np.column_stack([traj.a_chemo, traj.a_radio]).astype(np.int64),
            dense_stage=traj.stages.astype(np.int64),
            cf_labels=cf,
        ))
    return records


def _header_dict(header: DatasetHeader) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "gamma": float(header.gamma),
        "kappa": header.kappa,
        "horizon": float(header.horizon),
        "delta": float(header.delta),
        "seed": int(header.seed),
        "v_max": float(header.v_max),
        "count_scale": float(header.count_scale),
        "counts": int(header.counts),
    }


def _record_dict(rec: PatientRecord) -> dict:
    obs_rows = []
    for j in range(len(rec.obs)):
        obs_rows.append({
            "t": float(rec.obs.times[j]),
            "x": [float(rec.obs.x[j, 0]), float(rec.obs.x[j, 1]),
                  int(rec.obs.x[j, 2]), int(rec.obs.x[j, 3]), int(rec.obs.x[j, 4])],
            "a": [float(rec.obs.a[j, 0]), float(rec.obs.a[j, 1])],
            "y": float(rec.obs.y[j]),
            "c": [int(v) for v in rec.obs.counts[j]],
        })
    cf = {}
    for key in rec.cf_labels:
        cf[key] = [None if math.isnan(v) else float(v) for v in rec.cf_labels[key]]
    return {
        "id": int(rec.patient_id),
        "group": int(rec.group),
        "obs": obs_rows,
        "dense": {
            "v": rec.dense_v,
            "a": rec.dense_a,
            "stage": rec.dense_stage,
        },
        "cf_labels": cf,
    }


def write_dataset(path, header: DatasetHeader, records) -> None:
    lines = [jsonlines.dumps(_header_dict(header))]
    for rec in records:
        lines.append(jsonlines.dumps(_record_dict(rec)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_record(obj: dict, line_number: int) -> PatientRecord:
    try:
        rows = obj["obs"]
        m = len(rows)
        times = np.array([r["t"] for r in rows], dtype=float)
        x = np.array([r["x"] for r in rows], dtype=float).reshape(m, 5)
        a = np.array([r["a"] for r in rows], dtype=float).reshape(m, 2)
        y = np.array([r["y"] for r in rows], dtype=float)
        counts = np.array([r["c"] for r in rows], dtype=np.int64).reshape(m, -1)
        obs = ObservationSeries(
            patient_id=int(obj["id"]), group=int(obj["group"]),
            times=times, x=x, a=a, y=y, counts=counts)
        cf = {k: np.array([np.nan if v is None else v for v in vals], dtype=float)
              for k, vals in obj["cf_labels"].items()}
        return PatientRecord(
            patient_id=int(obj["id"]), group=int(obj["group"]), obs=obs,
            dense_v=np.asarray(obj["dense"]["v"], dtype=float),
            dense_a=np.asarray(obj["dense"]["a"], dtype=np.int64),
            dense_stage=np.asarray(obj["dense"]["stage"], dtype=np.int64),
            cf_labels=cf,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed patient record ({exc})", line_number) from exc


def _loads(line, line_number):
    try:
        return jsonlines.loads(line, line_number)
    except jsonlines.FormatError as exc:
        raise DatasetError(str(exc)) from exc


def read_dataset(path):
    """Returns (header, records); rejects wrong schema versions."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError("empty dataset file", 1)
    head = _loads(lines[0], 1)
    if not isinstance(head, dict) or head.get("schema") != DATASET_SCHEMA:
        got = head.get("schema") if isinstance(head, dict) else head
        raise DatasetError(f"expected dataset schema {DATASET_SCHEMA!r}, got {got!r}", 1)
    try:
        header = DatasetHeader(
            gamma=float(head["gamma"]), kappa=head["kappa"],
            horizon=float(head["horizon"]), delta=float(head["delta"]),
            seed=int(head["seed"]), counts=int(head["counts"]),
            v_max=float(head["v_max"]), count_scale=float(head["count_scale"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed header ({exc})", 1) from exc
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        records.append(_parse_record(_loads(line, i), i))
    if len(records) != header.counts:
        raise DatasetError(
            f"header declares {header.counts} records, file has {len(records)}")
    return header, records


def kappa_field(cfg: HawkesConfig):
    """Header encoding of the sampling-intensity policy."""
    if cfg.kappa_policy == "constant":
        return float(cfg.kappa)
    return {"treated": float(cfg.kappa_treated),
            "untreated": float(cfg.kappa_untreated)}


def hawkes_from_field(value) -> HawkesConfig:
    if isinstance(value, dict):
        return HawkesConfig(kappa_policy="treatment",
                            kappa_treated=float(value["treated"]),
                            kappa_untreated=float(value["untreated"]))
    return HawkesConfig(kappa=float(value))
