"""Two-phase training with adversarially balanced latents.

Phase 1 fits the initial map, encoder field, and both heads on one-step-ahead
prediction at each observed time: the latent at observation j predicts the
next observed outcome, while the treatment head predicts the upcoming
assignment (the first draw after observation j) through a gradient-reversal
layer scaled by mu. Phase 2 freezes the encoder, caches its latents, and fits
the decoder field (and outcome head) on n-step windows that branch at each
observation and follow the factual plan.

Losses are averaged per sequence and then per batch, so long observation
histories do not dominate. mu rises on the standard exponential schedule.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Normalizer, PatientRecord, build_control_path
from .model import ModelConfig, TecdeParams, integrate_segments, make_field
from .nets import OptState, TrainingError, sgd_step, zero_grads

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100            # per phase
    batch_size: int = 32
    lr: float = 1e-4
    mu_mode: str = "scheduled"   # "scheduled" or "zero"
    seed: int = 0
    dropout: bool = False        # MC-dropout training (rate on ModelConfig)
    decoder_horizon: int = 5     # event-time steps per decoder window
    patience: int = 5
    windows_per_patient: int = 2  # decoder windows sampled per patient per epoch
    knot_budget: int = 4096      # max (batch x segments) rows per encoder batch

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.mu_mode not in ("scheduled", "zero"):
            raise ValueError(f"unknown mu mode {self.mu_mode!r}")


def mu_schedule(epoch: int, total_epochs: int) -> float:
    """Exponentially rising trade-off weight in [0, 1); 0 at the first epoch."""
    if not 0 <= epoch < total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs)")
    p = epoch / total_epochs
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def outcome_loss(predictions, targets) -> float:
    """Mean squared error over aligned observed times, in normalized units."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.size == 0 or predictions.shape != targets.shape:
        raise ValueError("need equally many predictions and targets, at least one")
    return float(np.mean((targets - predictions) ** 2))


def treatment_loss(prob_vectors, labels) -> float:
    """Mean negative log-likelihood of the 4-class treatment labels.

    Probabilities at the label are floored at 1e-12 before the log.
    """
    probs = np.asarray(prob_vectors, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.size or probs.shape[0] == 0:
        raise ValueError("need one probability vector per label")
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def combined_objective(l_y: float, l_a: float, mu: float) -> float:
    """Reported training objective L_y - mu * L_a.

    Gradient routing follows the reversal convention: the treatment head
    itself descends on L_a, while the gradient of L_a into the encoder is
    negated and scaled by mu (see `reverse_gradient` in the batch graphs).
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    return float(l_y) - mu * float(l_a)


@dataclass
class PatientTensors:
    """Per-patient arrays precomputed for batching."""

    patient_id: int
    m: int
    knots: np.ndarray      # (m,) normalized times
    values: np.ndarray     # (m, C) normalized knot values
    dts: np.ndarray        # (m-1,)
    slopes: np.ndarray     # (m-1, C)
    y_norm: np.ndarray     # (m,) normalized outcomes
    labels: np.ndarray     # (m,) upcoming-assignment class per observation
    times: np.ndarray      # (m,) raw days
    dense_a: np.ndarray    # (T, 2)
    treated: bool
    cf_labels: dict = field(default_factory=dict)


def treatment_class(dense_a: np.ndarray, t: float) -> int:
    """4-class combination administered on the day containing t."""
    day = min(int(math.floor(t)), dense_a.shape[0] - 1)
    return int(dense_a[day, 0] + 2 * dense_a[day, 1])


def assignment_class(dense_a: np.ndarray, t: float) -> int:
    """4-class combination of the first assignment drawn strictly after t.

    This is the propensity-style adversarial target: the draw at day
    floor(t) + 1 depends on the diameter history only, and it is exactly the
    assignment that a counterfactual plan branching at t would replace. For
    observations on the final day the last draw is used.
    """
    day = min(int(math.floor(t)) + 1, dense_a.shape[0] - 1)
    return int(dense_a[day, 0] + 2 * dense_a[day, 1])


def prepare_tensors(records: list[PatientRecord], normalizer: Normalizer) -> list[PatientTensors]:
    out = []
    for rec in records:
        path = build_control_path(rec.obs, normalizer)
        dts, slopes = path.segments()
        labels = np.array([assignment_class(rec.dense_a, t) for t in rec.obs.times],
                          dtype=np.int64)
        out.append(PatientTensors(
            patient_id=rec.patient_id, m=len(rec.obs),
            knots=path.times, values=path.values, dts=dts, slopes=slopes,
            y_norm=normalizer.normalize(rec.obs.y, "outcome"),
            labels=labels, times=rec.obs.times, dense_a=rec.dense_a,
            treated=rec.treated, cf_labels=rec.cf_labels,
        ))
    return out


def make_batches(tensors: list[PatientTensors], knot_budget: int, batch_size: int):
    """Length-sorted batches capped by both patient count and knot budget."""
    order = sorted(range(len(tensors)), key=lambda i: (-tensors[i].m, tensors[i].patient_id))
    batches = []
    current: list[int] = []
    for i in order:
        m = tensors[i].m
        width = max([tensors[j].m for j in current] + [m])
        if current and (len(current) >= batch_size
                        or width * (len(current) + 1) > knot_budget):
            batches.append(current)
            current = []
        current.append(i)
    if current:
        batches.append(current)
    return batches


def encoder_batch_graph(params: TecdeParams, batch: list[PatientTensors],
                        mu: float, masks=None, frozen=False):
    """Build the routed phase-1 objective for one batch.

    Returns (root, l_y, l_a) where root = L_y + L_a with the treatment branch
    behind a gradient-reversal layer of scale mu, and l_y / l_a are floats.
    Patients with fewer than two observations carry no targets and are
    assumed to have been filtered out upstream.
    """
    B = len(batch)
    n_seg = max(p.m - 1 for p in batch)
    C = params.cfg.n_channels
    l = params.cfg.latent_dim
    seg_dt = np.zeros((n_seg, B))
    seg_slope = np.zeros((n_seg, B, C))
    x0 = np.zeros((B, C))
    rows, y_t, w = [], [], []
    label_idx = []
    for b, p in enumerate(batch):
        seg_dt[:p.m - 1, b] = p.dts
        seg_slope[:p.m - 1, b] = p.slopes
        x0[b] = p.values[0]
        n_tar = p.m - 1
        for j in range(n_tar):
            rows.append(j * B + b)
            y_t.append(p.y_norm[j + 1])
            label_idx.append(p.labels[j])
            w.append(1.0 / (n_tar * B))
    rows = np.asarray(rows, dtype=np.int64)
    y_t = np.asarray(y_t)[:, None]
    w_col = np.asarray(w)[:, None]
    onehot_w = np.zeros((len(label_idx), 4))
    onehot_w[np.arange(len(label_idx)), label_idx] = np.asarray(w)

    masks = masks or {}
    z0 = params.g_eta(x0, masks.get("g_eta"), frozen=frozen)
    fld = make_field(params.f_theta, l, C, masks.get("f_theta"), frozen=frozen)
    zs = integrate_segments(fld, z0, seg_dt, seg_slope, params.cfg.max_step)
    z_all = ad.stack_rows([z0] + zs)                   # knot j latents at index j
    z_flat = ad.reshape(z_all, ((n_seg + 1) * B, l))
    z_rows = ad.take_rows(z_flat, rows)

    y_hat = params.h_nu(z_rows, masks.get("h_nu"), frozen=frozen)
    err = ad.add(y_hat, -y_t)
    l_y = ad.sum_(ad.mul(ad.mul(err, err), w_col))

    z_rev = ad.reverse_gradient(z_rows, mu)
    probs = params.h_alpha(z_rev, masks.get("h_alpha"), frozen=frozen)
    log_p = ad.log(ad.clamp_min(probs, PROB_FLOOR))
    l_a = ad.mul(ad.sum_(ad.mul(log_p, onehot_w)), -1.0)

    root = ad.add(l_y, l_a)
    return root, float(ad.value(l_y)), float(ad.value(l_a))


def encode_knot_latents(params: TecdeParams, tensors: list[PatientTensors],
                        knot_budget: int = 16384) -> list[np.ndarray]:
    """Frozen encoder latents at every knot for every patient."""
    out: list[np.ndarray | None] = [None] * len(tensors)
    for batch_idx in make_batches(tensors, knot_budget, batch_size=256):
        batch = [tensors[i] for i in batch_idx]
        B = len(batch)
        n_seg = max(p.m - 1 for p in batch)
        C = params.cfg.n_channels
        seg_dt = np.zeros((n_seg, B))
        seg_slope = np.zeros((n_seg, B, C))
        x0 = np.zeros((B, C))
        for b, p in enumerate(batch):
            seg_dt[:p.m - 1, b] = p.dts
            seg_slope[:p.m - 1, b] = p.slopes
            x0[b] = p.values[0]
        z0 = params.g_eta(x0, frozen=True)
        fld = make_field(params.f_theta, params.cfg.latent_dim, C, frozen=True)
        zs = integrate_segments(fld, z0, seg_dt, seg_slope, params.cfg.max_step)
        z_all = np.stack([z0] + zs)                    # (n_seg + 1, B, l)
        if not np.isfinite(z_all).all():
            raise TrainingError("encoder latents became non-finite")
        for b, (i, p) in enumerate(zip(batch_idx, batch)):
            out[i] = z_all[:p.m, b, :].copy()
    return out


@dataclass
class DecoderWindow:
    """One decode training problem: cached start latent, drive, targets."""

    z0: np.ndarray
    seg_dt: np.ndarray      # (n_seg,)
    seg_slope: np.ndarray   # (n_seg, Ct)
    query_pos: np.ndarray   # segment index whose end is each query time
    targets: np.ndarray     # (n_q,) normalized outcomes


def build_window(p: PatientTensors, z_knots: np.ndarray, k: int, n: int,
                 horizon: float, include_time: bool) -> DecoderWindow:
    from .model import plan_drive

    t_start, t_end = p.times[k], p.times[k + n]
    times_n, values = plan_drive(p.dense_a, t_start, t_end, horizon,
                                 include_time=include_time)
    queries = p.knots[k + 1:k + n + 1]
    bounds = np.unique(np.concatenate([times_n, queries]))
    vals = np.column_stack([np.interp(bounds, times_n, values[:, ch])
                            for ch in range(values.shape[1])])
    dts = np.diff(bounds)
    slopes = np.diff(vals, axis=0) / dts[:, None]
    # Positions of query times among segment right-endpoints.
    query_pos = np.searchsorted(bounds, queries) - 1
    return DecoderWindow(
        z0=z_knots[k], seg_dt=dts, seg_slope=slopes,
        query_pos=query_pos.astype(np.int64),
        targets=p.y_norm[k + 1:k + n + 1],
    )


def decoder_batch_graph(params: TecdeParams, windows: list[DecoderWindow],
                        masks=None, frozen=False):
    """Weighted decoder MSE over a batch of windows; returns (root, l_y)."""
    B = len(windows)
    n_seg = max(w.seg_dt.size for w in windows)
    ct = params.cfg.n_treatment_channels
    l = params.cfg.latent_dim
    seg_dt = np.zeros((n_seg, B))
    seg_slope = np.zeros((n_seg, B, ct))
    z0 = np.zeros((B, l))
    rows, targets, weights = [], [], []
    for b, w in enumerate(windows):
        seg_dt[:w.seg_dt.size, b] = w.seg_dt
        seg_slope[:w.seg_dt.size, b] = w.seg_slope
        z0[b] = w.z0
        for pos, tgt in zip(w.query_pos, w.targets):
            rows.append((pos + 1) * B + b)
            targets.append(tgt)
            weights.append(1.0 / (w.targets.size * B))
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets)[:, None]
    w_col = np.asarray(weights)[:, None]

    masks = masks or {}
    fld = make_field(params.f_phi, l, ct, masks.get("f_phi"), frozen=frozen)
    zs = integrate_segments(fld, z0, seg_dt, seg_slope, params.cfg.max_step)
    z_all = ad.stack_rows([z0] + zs)
    z_flat = ad.reshape(z_all, ((n_seg + 1) * B, l))
    z_rows = ad.take_rows(z_flat, rows)
    y_hat = params.h_nu(z_rows, masks.get("h_nu"), frozen=frozen)
    err = ad.add(y_hat, -targets)
    l_y = ad.sum_(ad.mul(ad.mul(err, err), w_col))
    return l_y, float(ad.value(l_y))


def _phase1_val_loss(params, val_tensors, knot_budget) -> float:
    losses, weights = [], []
    for batch_idx in make_batches(val_tensors, knot_budget, batch_size=256):
        batch = [val_tensors[i] for i in batch_idx]
        _, l_y, _ = encoder_batch_graph(params, batch, mu=0.0, frozen=True)
        losses.append(l_y * len(batch))
        weights.append(len(batch))
    return float(np.sum(losses) / np.sum(weights))


def _val_windows(tensors, n, max_per_patient=3):
    """Deterministic validation windows: evenly spaced eligible branch points."""
    chosen = []
    for i, p in enumerate(tensors):
        eligible = p.m - n
        if eligible <= 0:
            continue
        picks = np.unique(np.linspace(0, eligible - 1, min(max_per_patient, eligible)).astype(int))
        chosen.extend((i, int(k)) for k in picks)
    return chosen


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    mu: float
    train_ly: float
    train_la: float
    val_ly: float
    is_best: bool


def train(params: TecdeParams, train_records, val_records,
          cfg: TrainConfig, normalizer: Normalizer, checkpoint_path=None):
    """Run both phases; leaves `params` at the best-validation weights.

    Returns (params, history) where history is a list of EpochRecord rows.
    Deterministic for a fixed config and seed. With checkpoint_path given,
    the current best weights are re-emitted there on every new validation
    best, so the file always holds the deployable model.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    train_all = prepare_tensors(train_records, normalizer)
    skipped = [p.patient_id for p in train_all if p.m < 2]
    if skipped:
        warnings.warn(f"{len(skipped)} patient(s) without a one-step target "
                      f"excluded from training batches", stacklevel=2)
    train_t = [p for p in train_all if p.m >= 2]
    val_t = [p for p in prepare_tensors(val_records, normalizer) if p.m >= 2]
    if not train_t or not val_t:
        raise ValueError("training needs nonempty train and validation splits")

    history: list[EpochRecord] = []
    batches = make_batches(train_t, cfg.knot_budget, cfg.batch_size)
    include_time = params.cfg.decoder_time_channel

    # Phase 1: initial map, encoder field, both heads.
    opt = OptState(lr=cfg.lr, patience=cfg.patience)
    best = params.snapshot()
    enc_params = params.encoder_parameters()
    for epoch in range(cfg.epochs):
        mu = mu_schedule(epoch, cfg.epochs) if cfg.mu_mode == "scheduled" else 0.0
        order = rng.permutation(len(batches))
        ly_sum = la_sum = 0.0
        for bi in order:
            batch = [train_t[i] for i in batches[bi]]
            masks = params.sample_masks(rng) if cfg.dropout else None
            zero_grads(enc_params)
            root, l_y, l_a = encoder_batch_graph(params, batch, mu, masks=masks)
            if not (math.isfinite(l_y) and math.isfinite(l_a)):
                raise TrainingError(
                    f"non-finite loss in phase 1, epoch {epoch}, batch {bi}")
            ad.backward(root)
            sgd_step(enc_params, cfg.lr)
            ly_sum += l_y
            la_sum += l_a
        val_ly = _phase1_val_loss(params, val_t, cfg.knot_budget)
        is_best = opt.update(val_ly)
        if is_best:
            best = params.snapshot()
            if checkpoint_path is not None:
                params.save(checkpoint_path)
        history.append(EpochRecord(1, epoch, mu, ly_sum / len(batches),
                                   la_sum / len(batches), val_ly, is_best))
        if opt.should_stop:
            break
    params.restore(best)

    # Phase 2: freeze the encoder, fit the decoder field and outcome head on
    # factual-plan windows anchored at cached encoder latents.
    n = cfg.decoder_horizon
    z_train = encode_knot_latents(params, train_t)
    z_val = encode_knot_latents(params, val_t)
    val_windows = [build_window(val_t[i], z_val[i], k, n, normalizer.horizon,
                                include_time) for i, k in _val_windows(val_t, n)]
    train_eligible = [i for i, p in enumerate(train_t) if p.m - n >= 1]
    if train_eligible and val_windows:
        opt2 = OptState(lr=cfg.lr, patience=cfg.patience)
        best = params.snapshot()
        dec_params = params.decoder_parameters()
        for epoch in range(cfg.epochs):
            windows = []
            for i in train_eligible:
                p = train_t[i]
                ks = rng.integers(0, p.m - n, size=cfg.windows_per_patient)
                windows.extend(build_window(p, z_train[i], int(k), n,
                                            normalizer.horizon, include_time)
                               for k in ks)
            ly_sum = 0.0
            n_batches = 0
            for lo in range(0, len(windows), cfg.batch_size):
                chunk = windows[lo:lo + cfg.batch_size]
                masks = params.sample_masks(rng) if cfg.dropout else None
                zero_grads(dec_params)
                root, l_y = decoder_batch_graph(params, chunk, masks=masks)
                if not math.isfinite(l_y):
                    raise TrainingError(
                        f"non-finite loss in phase 2, epoch {epoch}")
                ad.backward(root)
                sgd_step(dec_params, cfg.lr)
                ly_sum += l_y
                n_batches += 1
            val_ly = 0.0
            for lo in range(0, len(val_windows), 256):
                chunk = val_windows[lo:lo + 256]
                _, l_y = decoder_batch_graph(params, chunk, frozen=True)
                val_ly += l_y * len(chunk)
            val_ly /= len(val_windows)
            is_best = opt2.update(val_ly)
            if is_best:
                best = params.snapshot()
                if checkpoint_path is not None:
                    params.save(checkpoint_path)
            history.append(EpochRecord(2, epoch, 0.0, ly_sum / max(n_batches, 1),
                                       math.nan, val_ly, is_best))
            if opt2.should_stop:
                break
        params.restore(best)

    if checkpoint_path is not None:
        params.save(checkpoint_path)
    return params, history
