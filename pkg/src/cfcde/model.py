"""Latent CDE model: encoder over control paths, decoder over treatment plans.

The latent state starts from an embedding of the first observation and is
advanced by fixed-step fourth-order Runge-Kutta on dz/ds = f(z) dX/ds. The
drive X is piecewise linear, so integration is segmented at every knot (and
every requested query time); steps never cross a derivative discontinuity.
Decoding runs a second vector field driven by the hypothetical treatment
plan only, which keeps backward-in-time integration (and hence inversion of
the decoder map) available by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nets
from .data import ControlPath, N_CHANNELS


class NumericError(RuntimeError):
    """Latent state left the finite range during integration."""


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 8
    hidden_width: int = 128
    max_step: float = 0.5          # normalized-time units
    decoder_time_channel: bool = False
    linear_ablation: bool = False
    dropout_rate: float = 0.0
    n_channels: int = N_CHANNELS

    @property
    def n_treatment_channels(self) -> int:
        return 3 if self.decoder_time_channel else 2


class TecdeParams:
    """All trainable weights: initial-state map, two vector fields, two heads.

    With the linear ablation the initial map and both vector fields become
    single affine maps (no hidden layer, no saturation); otherwise the vector
    fields end in tanh, the usual stabilization for CDE integrands.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        l, w, c = cfg.latent_dim, cfg.hidden_width, cfg.n_channels
        ct = cfg.n_treatment_channels
        dr = cfg.dropout_rate
        if cfg.linear_ablation:
            self.g_eta = nets.Mlp([c, l], "identity", 0.0, rng)
            self.f_theta = nets.Mlp([l, l * c], "identity", 0.0, rng)
            self.f_phi = nets.Mlp([l, l * ct], "identity", 0.0, rng)
        else:
            self.g_eta = nets.Mlp([c, w, l], "identity", dr, rng)
            self.f_theta = nets.Mlp([l, w, l * c], "tanh", dr, rng)
            self.f_phi = nets.Mlp([l, w, l * ct], "tanh", dr, rng)
        self.h_nu = nets.Mlp([l, w, 1], "identity", dr, rng)
        self.h_alpha = nets.Mlp([l, w, 4], "softmax", dr, rng)

    def _nets(self):
        return {"g_eta": self.g_eta, "f_theta": self.f_theta,
                "f_phi": self.f_phi, "h_nu": self.h_nu, "h_alpha": self.h_alpha}

    def parameters(self):
        out = []
        for net in self._nets().values():
            out.extend(net.parameters())
        return out

    def encoder_parameters(self):
        return (self.g_eta.parameters() + self.f_theta.parameters()
                + self.h_nu.parameters() + self.h_alpha.parameters())

    def decoder_parameters(self):
        return self.f_phi.parameters() + self.h_nu.parameters()

    def named_parameters(self):
        out = {}
        for name, net in self._nets().items():
            out.update(net.named_parameters(name))
        return out

    def sample_masks(self, rng: np.random.Generator):
        """One dropout mask set per network, fixed for a whole forward pass."""
        return {name: net.sample_masks(rng) for name, net in self._nets().items()}

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, snap):
        for name, p in self.named_parameters().items():
            p.data = snap[name].copy()
            p.grad = None

    def save(self, path):
        nets.save_checkpoint(path, self.named_parameters(),
                             meta={"model": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "TecdeParams":
        meta, tensors = nets.load_checkpoint(path)
        cfg = ModelConfig(**meta["model"])
        params = cls(cfg)
        named = params.named_parameters()
        if set(named) != set(tensors):
            raise nets.TrainingError("checkpoint tensors do not match the model layout")
        for name, p in named.items():
            if tensors[name].shape != p.data.shape:
                raise nets.TrainingError(f"shape mismatch for {name}")
            p.data = tensors[name]
        return params


@dataclass
class LatentPath:
    """Latents recorded at every solver step over one integration span."""

    times: np.ndarray      # (n_steps + 1,)
    z: np.ndarray          # (n_steps + 1, latent_dim)
    kind: str              # "encoder" or "decoder"
    step_spans: list = field(default_factory=list)  # (t_a, t_b) per RK4 step

    def latent_at(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise ValueError(f"no latent recorded at time {t}")
        return self.z[i]


def make_field(net: nets.Mlp, latent_dim: int, n_channels: int, masks=None,
               frozen=False):
    """Wrap an Mlp as z (B, l) -> (B, l, channels)."""
    def field(z):
        out = net(z, masks, frozen=frozen)
        return ad.reshape(out, (ad.value(z).shape[0], latent_dim, n_channels))
    return field


def rk4_span(field, z, dt, slope, n_sub: int = 1):
    """Advance z across one linear segment: dz/ds = field(z) @ slope.

    dt is (B,), slope (B, C); the slope is constant over the segment, so the
    system is autonomous and classic RK4 applies per substep.
    """
    h = np.asarray(dt, dtype=float) / n_sub
    h_col = h[:, None]
    for _ in range(n_sub):
        k1 = ad.bmv(field(z), slope)
        k2 = ad.bmv(field(ad.add(z, ad.mul(k1, h_col * 0.5))), slope)
        k3 = ad.bmv(field(ad.add(z, ad.mul(k2, h_col * 0.5))), slope)
        k4 = ad.bmv(field(ad.add(z, ad.mul(k3, h_col))), slope)
        incr = ad.add(ad.add(k1, ad.mul(ad.add(k2, k3), 2.0)), k4)
        z = ad.add(z, ad.mul(incr, h_col / 6.0))
    return z


def integrate_segments(field, z0, seg_dt, seg_slope, max_step: float):
    """Batched integration over aligned segments; zero-length rows are no-ops.

    seg_dt has shape (M, B), seg_slope (M, B, C). Returns the list of latents
    after each segment, so stacked with z0 they give latents at every knot.
    """
    z = z0
    out = []
    for j in range(seg_dt.shape[0]):
        dt = seg_dt[j]
        longest = float(dt.max()) if dt.size else 0.0
        n_sub = max(1, math.ceil(longest / max_step - 1e-12)) if longest > 0 else 1
        z = rk4_span(field, z, dt, seg_slope[j], n_sub)
        out.append(z)
    return out


def _boundaries(knots, t0, t1, query_times):
    pts = [t0, t1]
    pts.extend(t for t in knots if t0 < t < t1)
    pts.extend(query_times)
    pts = sorted(set(float(t) for t in pts))
    if pts[0] < t0 - 1e-12 or pts[-1] > t1 + 1e-12:
        raise ValueError("query times must lie inside the integration span")
    return pts


def _solve_path(field, z0_row, times, values, max_step, kind):
    """Single-path integration recording every solver step; raises on blow-up."""
    z_rows = [np.asarray(ad.value(z0_row), dtype=float)[0]]
    rec_times = [times[0]]
    spans = []
    z = z0_row
    for j in range(len(times) - 1):
        dt = times[j + 1] - times[j]
        slope_row = ((values[j + 1] - values[j]) / dt)[None, :] if dt > 0 else np.zeros((1, values.shape[1]))
        n_sub = max(1, math.ceil(dt / max_step - 1e-12)) if dt > 0 else 1
        h = dt / n_sub
        for s in range(n_sub):
            z = rk4_span(field, z, np.array([h]), slope_row, 1)
            t_a = times[j] + s * h
            t_b = times[j] + (s + 1) * h
            spans.append((t_a, t_b))
            z_val = np.asarray(ad.value(z), dtype=float)[0]
            if not np.isfinite(z_val).all():
                raise NumericError(
                    f"{kind} latent became non-finite on step [{t_a:.6g}, {t_b:.6g}]")
            z_rows.append(z_val)
            rec_times.append(t_b)
    return LatentPath(times=np.asarray(rec_times), z=np.asarray(z_rows),
                      kind=kind, step_spans=spans)


def encode(params: TecdeParams, path: ControlPath, t0: float | None = None,
           t1: float | None = None, query_times=(), masks=None,
           frozen=False) -> LatentPath:
    """Latent path from g_eta(path at t0) driven by the full control path."""
    lo, hi = path.domain
    t0 = lo if t0 is None else float(t0)
    t1 = hi if t1 is None else float(t1)
    if t0 < lo - 1e-12 or t1 > hi + 1e-12 or t1 < t0:
        raise ValueError(f"[{t0}, {t1}] outside path domain [{lo}, {hi}]")
    masks = masks or {}
    x0 = path.value(t0)[None, :]
    z0 = params.g_eta(x0, masks.get("g_eta"), frozen=frozen)
    if t1 == t0:
        z_row = np.asarray(ad.value(z0), dtype=float)
        return LatentPath(times=np.array([t0]), z=z_row, kind="encoder")
    bounds = _boundaries(path.times, t0, t1, query_times)
    values = np.stack([path.value(t) for t in bounds])
    fld = make_field(params.f_theta, params.cfg.latent_dim,
                     params.cfg.n_channels, masks.get("f_theta"), frozen=frozen)
    return _solve_path(fld, z0, bounds, values, params.cfg.max_step, "encoder")


def decode(params: TecdeParams, z_t, plan_times, plan_values,
           query_times=(), masks=None, frozen=False) -> LatentPath:
    """Advance a latent over a hypothetical plan; report at plan knots and queries."""
    plan_times = np.asarray(plan_times, dtype=float)
    plan_values = np.asarray(plan_values, dtype=float)
    t_start, t_end = float(plan_times[0]), float(plan_times[-1])
    for q in query_times:
        if q < t_start - 1e-12:
            raise ValueError(f"query time {q} precedes the decode start {t_start}")
    masks = masks or {}
    z0 = z_t if isinstance(z_t, ad.Var) else np.asarray(z_t, dtype=float).reshape(1, -1)
    if t_end == t_start:
        z_row = np.asarray(ad.value(z0), dtype=float).reshape(1, -1)
        return LatentPath(times=np.array([t_start]), z=z_row, kind="decoder")
    bounds = _boundaries(plan_times, t_start, t_end, query_times)
    values = np.stack([
        np.array([np.interp(t, plan_times, plan_values[:, ch])
                  for ch in range(plan_values.shape[1])])
        for t in bounds])
    fld = make_field(params.f_phi, params.cfg.latent_dim,
                     params.cfg.n_treatment_channels, masks.get("f_phi"),
                     frozen=frozen)
    return _solve_path(fld, z0, bounds, values, params.cfg.max_step, "decoder")


def invert_decode(params: TecdeParams, z_t_prime, plan_times, plan_values,
                  masks=None, frozen=True) -> np.ndarray:
    """Recover the decode-start latent by integrating the reversed dynamics."""
    plan_times = np.asarray(plan_times, dtype=float)
    plan_values = np.asarray(plan_values, dtype=float)
    masks = masks or {}
    fld = make_field(params.f_phi, params.cfg.latent_dim,
                     params.cfg.n_treatment_channels, masks.get("f_phi"),
                     frozen=frozen)
    z = np.asarray(z_t_prime, dtype=float).reshape(1, -1)
    for j in range(len(plan_times) - 1, 0, -1):
        dt = plan_times[j] - plan_times[j - 1]
        if dt <= 0:
            continue
        slope = ((plan_values[j] - plan_values[j - 1]) / dt)[None, :]
        n_sub = max(1, math.ceil(dt / params.cfg.max_step - 1e-12))
        z = rk4_span(fld, z, np.array([dt]), -slope, n_sub)
        z_val = np.asarray(ad.value(z), dtype=float)
        if not np.isfinite(z_val).all():
            raise NumericError("reverse integration became non-finite")
    return np.asarray(ad.value(z), dtype=float)[0]


def predict_outcome(params: TecdeParams, z, masks=None, frozen=False):
    """Normalized outcome prediction h_nu(z); z is (l,), (B, l), Var or ndarray."""
    masks = masks or {}
    single = not isinstance(z, ad.Var) and np.asarray(z).ndim == 1
    zz = np.asarray(z, dtype=float).reshape(1, -1) if single else z
    out = params.h_nu(zz, masks.get("h_nu"), frozen=frozen)
    if single:
        return float(ad.value(out)[0, 0])
    return out


def predict_treatment(params: TecdeParams, z, masks=None, frozen=False):
    """Probability 4-vector over {none, chemo, radio, both}."""
    masks = masks or {}
    single = not isinstance(z, ad.Var) and np.asarray(z).ndim == 1
    zz = np.asarray(z, dtype=float).reshape(1, -1) if single else z
    out = params.h_alpha(zz, masks.get("h_alpha"), frozen=frozen)
    if single:
        return np.asarray(ad.value(out), dtype=float)[0]
    return out


def plan_drive(dense_a: np.ndarray, t_start: float, t_end: float, horizon: float,
               include_time: bool = False, plan_pair=None, branch_day=None):
    """Piecewise-linear drive path of a daily treatment sequence on [t_start, t_end].

    A day-d action is administered at time d but only takes effect over
    (d, d+1], so the drive value at integer time s is the action of day s-1
    (one-day administration delay) and ramps linearly within each day. With
    plan_pair given, days branch_day.. are overwritten by the sustained pair
    before embedding. Times are returned normalized by the horizon.
    """
    T = dense_a.shape[0]
    a_mod = np.asarray(dense_a, dtype=float)
    if plan_pair is not None:
        if branch_day is None:
            raise ValueError("a plan override needs its branch day")
        upto = min(int(math.ceil(t_end)), T)
        a_mod = a_mod.copy()
        if branch_day < upto:
            a_mod[branch_day:upto] = plan_pair
    delayed = np.vstack([np.zeros((1, 2)), a_mod])  # value at day d = action of d-1
    day_grid = np.arange(T + 1, dtype=float)

    pts = [t_start, t_end]
    pts.extend(d for d in range(int(math.floor(t_start)) + 1, int(math.ceil(t_end)))
               if t_start < d < t_end)
    times = np.array(sorted(set(pts)))
    values = np.column_stack([np.interp(times, day_grid, delayed[:, ch])
                              for ch in range(2)])
    times_norm = times / horizon
    if include_time:
        values = np.column_stack([values, times_norm])
    return times_norm, values
