"""Flat key=value experiment configuration with section prefixes.

Every field has a typed default and a one-line description; unknown keys are
rejected. CLI flags override file values, and the effective configuration is
echoed into a manifest that reproduces the run bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import __version__


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    key: str
    type: type
    default: object
    doc: str


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


FIELDS = [
    Field("sim.gamma", float, 2.0, "confounding strength gamma_c = gamma_r"),
    Field("sim.kappa", float, 10.0, "base sampling-intensity scale (constant policy)"),
    Field("sim.kappa_policy", str, "constant", "constant | treatment"),
    Field("sim.kappa_treated", float, 10.0, "kappa for ever-treated patients (treatment policy)"),
    Field("sim.kappa_untreated", float, 1.0, "kappa for never-treated patients (treatment policy)"),
    Field("sim.horizon", int, 60, "simulation horizon in days"),
    Field("sim.delta", float, 1.0, "grid step in days (the dynamics are daily; fixed)"),
    Field("sim.train_patients", int, 500, "patients in the training split"),
    Field("sim.val_patients", int, 100, "patients in the validation split"),
    Field("sim.test_patients", int, 500, "patients in the test split"),
    Field("sim.seed", int, 0, "root seed for simulation"),
    Field("sim.cf_horizons", str, "1,3,4,5", "event-time horizons with stored counterfactual labels"),
    Field("model.latent_dim", int, 8, "latent state dimension"),
    Field("model.hidden_width", int, 128, "hidden width of every sub-network"),
    Field("model.max_step", float, 0.5, "solver max step in normalized time"),
    Field("model.decoder_time_channel", bool, False, "drive the decoder with a time channel too"),
    Field("model.linear_ablation", bool, False, "affine initial map and vector fields"),
    Field("model.dropout_rate", float, 0.1, "dropout rate applied when train.dropout is on"),
    Field("train.epochs", int, 100, "epochs per training phase"),
    Field("train.batch", int, 32, "mini-batch size in patients (windows in phase 2)"),
    Field("train.lr", float, 1e-4, "SGD learning rate"),
    Field("train.mu_mode", str, "scheduled", "scheduled | zero (adversarial weight)"),
    Field("train.dropout", bool, False, "train with MC dropout"),
    Field("train.decoder_horizon", int, 5, "event-time steps per decoder training window"),
    Field("train.seed", int, 0, "root seed for training"),
    Field("train.windows_per_patient", int, 2, "decoder windows sampled per patient per epoch"),
    Field("train.knot_budget", int, 4096, "max batch x segment rows per encoder batch"),
    Field("eval.horizons", str, "1,5", "event-time horizons to report"),
    Field("eval.selection_horizon", int, 5, "horizon for treatment selection"),
    Field("eval.dropout_passes", int, 50, "stochastic passes for MC-dropout uncertainty"),
    Field("eval.mc_patients", int, 50, "patients entering the uncertainty evaluation"),
    Field("eval.latent_times", str, "10,30,50", "days at which latents are exported"),
    Field("eval.seed", int, 0, "root seed for evaluation"),
    Field("sweep.gammas", str, "2,10", "gamma grid"),
    Field("sweep.kappas", str, "10", "kappa grid"),
    Field("sweep.seeds", str, "0", "seed grid"),
]
_BY_KEY = {f.key: f for f in FIELDS}


class ExperimentConfig:
    def __init__(self, values=None):
        self._values = {f.key: f.default for f in FIELDS}
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value) -> None:
        field = _BY_KEY.get(key)
        if field is None:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            if field.type is bool:
                parsed = value if isinstance(value, bool) else _parse_bool(value)
            else:
                parsed = field.type(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
        self._values[key] = parsed
        self._validate(key)

    def _validate(self, key: str) -> None:
        v = self._values
        if key == "sim.delta" and v["sim.delta"] != 1.0:
            raise ConfigError("sim.delta is fixed at 1.0 day")
        if key == "sim.kappa_policy" and v[key] not in ("constant", "treatment"):
            raise ConfigError("sim.kappa_policy must be constant or treatment")
        if key == "train.mu_mode" and v[key] not in ("scheduled", "zero"):
            raise ConfigError("train.mu_mode must be scheduled or zero")

    def get(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values[key]

    def int_list(self, key: str) -> list[int]:
        return [int(tok) for tok in str(self.get(key)).split(",") if tok.strip()]

    def float_list(self, key: str) -> list[float]:
        return [float(tok) for tok in str(self.get(key)).split(",") if tok.strip()]

    def items(self):
        return [(f.key, self._values[f.key]) for f in FIELDS]

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(dict(self._values))

    def manifest(self, command: str, extra=None) -> str:
        lines = [f"# cfcde {__version__} manifest",
                 f"command = {command}"]
        for key, val in (extra or {}).items():
            lines.append(f"{key} = {val}")
        for key, val in self.items():
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base.copy() if base is not None else ExperimentConfig()
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        try:
            cfg.set(key.strip(), val.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {i}: {exc}") from exc
    return cfg


def load_config(path=None, overrides=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for key, val in (overrides or {}).items():
        cfg.set(key, val)
    return cfg


def describe_fields() -> str:
    width = max(len(f.key) for f in FIELDS)
    return "\n".join(f"{f.key:<{width}}  default={f.default!r:<12}  {f.doc}"
                     for f in FIELDS)
