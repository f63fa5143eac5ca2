"""Evaluation protocols: counterfactual RMSE, horizons, treatment selection,
MC-dropout uncertainty with exclusion/sparsification curves, data efficiency,
and latent export.

Branch points are all observation indices with enough later observations;
predictions decode the cached encoder latent under each sustained plan and
are scored against the stored common-random-number counterfactual volumes.
Metrics average per patient first, then across patients.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import jsonlines
from .data import Normalizer, PatientRecord, plan_label
from .model import TecdeParams, integrate_segments, make_field, plan_drive
from .pkpd import PLAN_PAIRS, V_MAX
from .training import (PatientTensors, encode_knot_latents, prepare_tensors,
                       treatment_class)

EXCLUSION_STEPS = 100          # grid over [0, 0.99]


def _nan_to_null(value):
    if isinstance(value, dict):
        return {k: _nan_to_null(v) for k, v in value.items()}
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def normalized_rmse(preds, truths) -> float:
    """RMSE normalized by the maximum tumor volume, in percent."""
    preds = np.asarray(preds, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if preds.size == 0 or preds.shape != truths.shape:
        raise ValueError("need equally many predictions and truths, at least one")
    return 100.0 * float(np.sqrt(np.mean((truths - preds) ** 2))) / V_MAX


@dataclass
class EvalReport:
    """Metrics for one experiment setting; runtime stays out of report files."""

    setting: dict
    metrics: dict = field(default_factory=dict)
    runtime_seconds: float = math.nan

    def to_json(self) -> str:
        return jsonlines.dumps({"setting": self.setting,
                                "metrics": _nan_to_null(self.metrics)})

    def csv_row(self) -> dict:
        row = dict(self.setting)
        for key, val in self.metrics.items():
            if isinstance(val, float) and math.isnan(val):
                row[key] = ""
            elif isinstance(val, (int, float)):
                row[key] = val
        return row


@dataclass
class UncertaintySample:
    """Per-patient MC-dropout summary across N stochastic passes."""

    patient_id: int
    mean_prediction: np.ndarray   # mean prediction per (branch, plan), cm^3
    variance: np.ndarray          # matching epistemic variances
    uncertainty: float            # trajectory-level: mean of the variances
    n_passes: int


@dataclass
class _Problem:
    tensor_index: int
    k: int
    plan: int
    n_seg: int
    seg_dt: np.ndarray
    seg_slope: np.ndarray
    truth: float           # cm^3
    factual_truth: float   # observed outcome at the target time, cm^3


def _decode_problems(params: TecdeParams, tensors: list[PatientTensors],
                     latents, n: int, horizon: float):
    """All (branch, plan) decode problems with ground-truth targets attached."""
    include_time = params.cfg.decoder_time_channel
    problems = []
    skipped = 0
    for ti, p in enumerate(tensors):
        if p.m - n < 1:
            skipped += 1
            continue
        if plan_label(0, n) not in p.cf_labels:
            raise ValueError(f"dataset lacks counterfactual labels at horizon {n}")
        for k in range(p.m - n):
            t_start, t_end = p.times[k], p.times[k + n]
            branch_day = min(int(math.floor(t_start)) + 1, p.dense_a.shape[0])
            for plan in range(len(PLAN_PAIRS)):
                cf = p.cf_labels[plan_label(plan, n)][k]
                times_n, values = plan_drive(
                    p.dense_a, t_start, t_end, horizon,
                    include_time=include_time,
                    plan_pair=PLAN_PAIRS[plan], branch_day=branch_day)
                dts = np.diff(times_n)
                slopes = np.diff(values, axis=0) / dts[:, None]
                problems.append(_Problem(
                    tensor_index=ti, k=k, plan=plan, n_seg=dts.size,
                    seg_dt=dts, seg_slope=slopes, truth=float(cf),
                    factual_truth=float(p.y_norm[k + n]) * V_MAX))
    return problems, skipped


def _run_decode_batch(params: TecdeParams, problems, latents,
                      masks=None, chunk=4096):
    """Frozen batched decode; returns predicted volumes (cm^3) per problem."""
    ct = params.cfg.n_treatment_channels
    l = params.cfg.latent_dim
    preds = np.empty(len(problems))
    for lo in range(0, len(problems), chunk):
        batch = problems[lo:lo + chunk]
        B = len(batch)
        n_seg = max(pr.n_seg for pr in batch)
        seg_dt = np.zeros((n_seg, B))
        seg_slope = np.zeros((n_seg, B, ct))
        z0 = np.zeros((B, l))
        for b, pr in enumerate(batch):
            seg_dt[:pr.n_seg, b] = pr.seg_dt
            seg_slope[:pr.n_seg, b] = pr.seg_slope
            z0[b] = latents[pr.tensor_index][pr.k]
        fld = make_field(params.f_phi, l, ct, (masks or {}).get("f_phi"), frozen=True)
        zs = integrate_segments(fld, z0, seg_dt, seg_slope, params.cfg.max_step)
        z_end = zs[-1] if zs else z0
        y = params.h_nu(z_end, (masks or {}).get("h_nu"), frozen=True)[:, 0]
        preds[lo:lo + B] = y * V_MAX
    return preds


def _per_patient_mse(problems, preds):
    by_patient: dict[int, list] = {}
    for pr, y in zip(problems, preds):
        by_patient.setdefault(pr.tensor_index, []).append((y - pr.truth) ** 2)
    return {ti: float(np.mean(v)) for ti, v in by_patient.items()}


def horizon_eval(params: TecdeParams, records: list[PatientRecord],
                 normalizer: Normalizer, n: int,
                 tensors=None, latents=None) -> dict:
    """Counterfactual and factual RMSE at event-time horizon n.

    Counterfactual predictions decode each branch latent under the four
    sustained plans and are scored against the stored ground-truth labels;
    the factual protocol decodes the administered plan (plan path equals the
    factual sequence before any branch day alteration is visible) and scores
    against the observed outcome.
    """
    if tensors is None:
        tensors = prepare_tensors(records, normalizer)
    if latents is None:
        latents = encode_knot_latents(params, tensors)
    problems, skipped = _decode_problems(params, tensors, latents, n, normalizer.horizon)
    if not problems:
        raise ValueError(f"no patient has {n} future observations to evaluate")
    preds = _run_decode_batch(params, problems, latents)

    cf_mse = _per_patient_mse(problems, preds)
    overall = 100.0 * math.sqrt(np.mean(list(cf_mse.values()))) / V_MAX
    treated_idx = [ti for ti in cf_mse if tensors[ti].treated]
    untreated_idx = [ti for ti in cf_mse if not tensors[ti].treated]

    def _rmse_of(idx):
        if not idx:
            return math.nan
        return 100.0 * math.sqrt(np.mean([cf_mse[i] for i in idx])) / V_MAX

    # Factual protocol: prediction under the administered daily plan. The
    # plan-0 problems before the branch day coincide with the factual drive
    # only where no treatment day is altered, so decode the factual plan
    # separately for exactness.
    fact_problems = []
    include_time = params.cfg.decoder_time_channel
    for ti, p in enumerate(tensors):
        if p.m - n < 1:
            continue
        for k in range(p.m - n):
            times_n, values = plan_drive(p.dense_a, p.times[k], p.times[k + n],
                                         normalizer.horizon, include_time=include_time)
            dts = np.diff(times_n)
            fact_problems.append(_Problem(
                tensor_index=ti, k=k, plan=-1, n_seg=dts.size, seg_dt=dts,
                seg_slope=np.diff(values, axis=0) / dts[:, None],
                truth=float(p.y_norm[k + n]) * V_MAX,
                factual_truth=float(p.y_norm[k + n]) * V_MAX))
    fact_preds = _run_decode_batch(params, fact_problems, latents)
    fact_mse = _per_patient_mse(fact_problems, fact_preds)
    factual_overall = 100.0 * math.sqrt(np.mean(list(fact_mse.values()))) / V_MAX

    return {
        "horizon": n,
        "rmse_cf": overall,
        "rmse_cf_treated": _rmse_of(treated_idx),
        "rmse_cf_untreated": _rmse_of(untreated_idx),
        "rmse_factual": factual_overall,
        "patients": len(cf_mse),
        "patients_skipped": skipped,
        "branch_points": sum(1 for pr in problems if pr.plan == 0),
    }


def treatment_selection(params: TecdeParams, records: list[PatientRecord],
                        normalizer: Normalizer, n: int,
                        tensors=None, latents=None) -> dict:
    """Fraction of branch points where the predicted-argmin plan is optimal.

    Ties (in prediction or in ground truth) resolve to the lowest plan index.
    """
    if tensors is None:
        tensors = prepare_tensors(records, normalizer)
    if latents is None:
        latents = encode_knot_latents(params, tensors)
    problems, _ = _decode_problems(params, tensors, latents, n, normalizer.horizon)
    if not problems:
        raise ValueError(f"no patient has {n} future observations to evaluate")
    preds = _run_decode_batch(params, problems, latents)

    by_branch: dict[tuple, dict] = {}
    for pr, y in zip(problems, preds):
        slot = by_branch.setdefault((pr.tensor_index, pr.k),
                                    {"pred": [None] * 4, "truth": [None] * 4})
        slot["pred"][pr.plan] = y
        slot["truth"][pr.plan] = pr.truth
    correct = 0
    for slot in by_branch.values():
        chosen = int(np.argmin(slot["pred"]))      # argmin takes first minimum
        best = int(np.argmin(slot["truth"]))
        correct += int(chosen == best)
    return {"horizon": n, "accuracy": correct / len(by_branch),
            "branch_points": len(by_branch)}


def mc_dropout_predict(params: TecdeParams, record: PatientRecord,
                       normalizer: Normalizer, n_passes: int,
                       rng: np.random.Generator = None, n: int = 1) -> UncertaintySample:
    """Mean and epistemic variance of counterfactual predictions for one patient.

    Each pass samples fresh dropout masks for every sub-network and repeats
    the full encode + decode; the trajectory-level uncertainty averages the
    per-(branch, plan) variances.
    """
    if params.cfg.dropout_rate <= 0.0:
        raise ValueError("MC dropout needs a model trained with dropout enabled")
    if n_passes < 2:
        raise ValueError("need at least two stochastic passes")
    if rng is None:
        rng = np.random.default_rng(0)
    tensors = prepare_tensors([record], normalizer)
    if tensors[0].m - n < 1:
        raise ValueError("patient lacks future observations for this horizon")
    all_preds = []
    for _ in range(n_passes):
        masks = params.sample_masks(rng)
        latents = _masked_latents(params, tensors[0], masks)
        problems, _ = _decode_problems(params, tensors, [latents], n, normalizer.horizon)
        all_preds.append(_run_decode_batch(params, problems, [latents],
                                           masks=masks))
    stacked = np.stack(all_preds)       # (N, problems)
    variance = stacked.var(axis=0)
    return UncertaintySample(
        patient_id=record.patient_id,
        mean_prediction=stacked.mean(axis=0),
        variance=variance,
        uncertainty=float(variance.mean()),
        n_passes=n_passes,
    )


def _masked_latents(params, p: PatientTensors, masks):
    z0 = params.g_eta(p.values[:1], masks.get("g_eta"), frozen=True)
    if p.m == 1:
        return np.asarray(z0)
    fld = make_field(params.f_theta, params.cfg.latent_dim,
                     params.cfg.n_channels, masks.get("f_theta"), frozen=True)
    dts = p.dts[:, None]
    slopes = p.slopes[:, None, :]
    zs = integrate_segments(fld, z0, dts, slopes, params.cfg.max_step)
    return np.concatenate([z0, np.concatenate(zs, axis=0)], axis=0)


def sparsification(u_model, errors, n_steps: int = EXCLUSION_STEPS) -> dict:
    """Exclusion curves by model uncertainty vs the true-error oracle.

    At fraction f the top-f share by ranking is dropped and the retained
    RMSE recorded; the sparsification error is the model curve minus the
    oracle curve, and AUSE its trapezoidal area over [0, 0.99].
    """
    u_model = np.asarray(u_model, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if u_model.shape != errors.shape or u_model.ndim != 1 or u_model.size == 0:
        raise ValueError("need matching nonempty uncertainty and error vectors")
    n = u_model.size
    fractions = np.linspace(0.0, 0.99, n_steps + 1)
    order_model = np.argsort(-u_model, kind="stable")
    order_oracle = np.argsort(-errors, kind="stable")

    def curve(order):
        sq = errors[order] ** 2
        out = np.empty(fractions.size)
        for i, f in enumerate(fractions):
            keep = n - int(math.floor(f * n))
            out[i] = math.sqrt(np.mean(sq[n - keep:]))
        return out

    model_curve = curve(order_model)
    oracle_curve = curve(order_oracle)
    sp_err = model_curve - oracle_curve
    ause = float(np.trapezoid(sp_err, fractions))
    return {"fractions": fractions, "model_curve": model_curve,
            "oracle_curve": oracle_curve, "sparsification_error": sp_err,
            "ause": ause}


def data_efficiency(train_fn, records, sizes, eval_fn) -> dict:
    """Percent RMSE degradation against the largest training size.

    train_fn(records_subset) -> model; eval_fn(model) -> rmse.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if sizes[-1] > len(records):
        raise ValueError("requested size exceeds the available records")
    rmses = {}
    for s in sizes:
        model_s = train_fn(records[:s])
        rmses[s] = float(eval_fn(model_s))
    full = rmses[sizes[-1]]
    return {s: (rmses[s] / full - 1.0) * 100.0 for s in sizes}


def export_latents(params: TecdeParams, records, normalizer: Normalizer,
                   times, path, tensors=None) -> int:
    """CSV of (patient, t, z..., treatment label) rows; deterministic order.

    The latent at a query past the last observation holds the final value
    (no further information arrives, so the path derivative is zero).
    """
    if tensors is None:
        tensors = prepare_tensors(records, normalizer)
    latents = encode_knot_latents(params, tensors)
    l = params.cfg.latent_dim
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient", "t"] + [f"z{i}" for i in range(l)] + ["label"])
        for p, z_knots in zip(tensors, latents):
            for t in times:
                t_norm = min(t / normalizer.horizon, p.knots[-1])
                if t_norm <= p.knots[0]:
                    z = z_knots[0]
                elif t_norm in p.knots:
                    z = z_knots[int(np.searchsorted(p.knots, t_norm))]
                else:
                    fld = make_field(params.f_theta, l, params.cfg.n_channels,
                                     frozen=True)
                    j = int(np.searchsorted(p.knots, t_norm)) - 1
                    dt = np.array([t_norm - p.knots[j]])
                    z = integrate_segments(fld, z_knots[j][None, :], dt[None, :],
                                           p.slopes[j][None, None, :],
                                           params.cfg.max_step)[-1][0]
                label = treatment_class(p.dense_a, t)
                writer.writerow([p.patient_id, f"{t:.6g}"]
                                + [jsonlines.format_float(v) for v in z]
                                + [label])
                rows += 1
    return rows


def probe_accuracy(latents_by_patient, labels_by_patient,
                   iters: int = 1500, lr: float = 2.0) -> float:
    """Held-out accuracy of a softmax probe on frozen latents.

    Even-indexed patients train the probe, odd-indexed evaluate it. The fit
    is deterministic: bias starts at the log class priors, weights at zero,
    and the convex objective is descended with a fixed step.
    """
    train_z, train_y, test_z, test_y = [], [], [], []
    for i, (z, y) in enumerate(zip(latents_by_patient, labels_by_patient)):
        (train_z if i % 2 == 0 else test_z).append(z)
        (train_y if i % 2 == 0 else test_y).append(y)
    zt = np.concatenate(train_z)
    yt = np.concatenate(train_y)
    ze = np.concatenate(test_z)
    ye = np.concatenate(test_y)
    zt1 = np.column_stack([zt, np.ones(len(zt))])
    ze1 = np.column_stack([ze, np.ones(len(ze))])
    w = np.zeros((zt1.shape[1], 4))
    priors = np.bincount(yt, minlength=4) / len(yt)
    w[-1] = np.log(np.maximum(priors, 1e-12))
    onehot = np.zeros((len(yt), 4))
    onehot[np.arange(len(yt)), yt] = 1.0
    for _ in range(iters):
        logits = zt1 @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * zt1.T @ (p - onehot) / len(yt)
    pred = np.argmax(ze1 @ w, axis=1)
    return float(np.mean(pred == ye))


def balancing_probe(params: TecdeParams, records, normalizer: Normalizer,
                    tensors=None) -> float:
    """Probe accuracy for treatment at observation times on held-out latents."""
    if tensors is None:
        tensors = prepare_tensors(records, normalizer)
    latents = encode_knot_latents(params, tensors)
    return probe_accuracy(latents, [p.labels for p in tensors])


def oracle_horizon_eval(records, normalizer, n: int) -> dict:
    tensors = prepare_tensors(records, normalizer)
    total = 0
    for p in tensors:
        total += max(p.m - n, 0)
    if total == 0:
        raise ValueError(f"no patient has {n} future observations to evaluate")
    return {"horizon": n, "rmse_cf": 0.0, "rmse_factual": 0.0,
            "rmse_cf_treated": 0.0, "rmse_cf_untreated": 0.0,
            "patients": sum(1 for p in tensors if p.m - n >= 1),
            "patients_skipped": sum(1 for p in tensors if p.m - n < 1),
            "branch_points": total}
