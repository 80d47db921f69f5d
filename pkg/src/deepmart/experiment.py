"""Experiment configuration, the primal-dual driver, sweeps and table presets."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import subprocess
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .dual import DualTrainer, evaluate_upper, save_dual_model
from .errors import ConfigError, InvalidArgumentError, TrainingDivergenceError
from .market import (GBM, BasketPut, ConstantPayoff, GenericAffine, LinearPayoff, MaxCall,
                     TimeGrid, brownian_motion)
from .primal import PrimalTrainer, evaluate_lower, save_primal_model
from .stats import confidence_interval
from .training import TrainConfig, make_pool

MODEL_KINDS = ("gbm", "brownian", "affine")
PAYOFF_KINDS = ("maxcall", "basketput", "linear", "constant")


def asymmetric_sigmas(D: int) -> list:
    """Volatility ladder of the asymmetric max-call benchmark."""
    if D == 1:
        return [0.08]
    if D <= 5:
        return [0.08 + 0.32 * d / (D - 1) for d in range(D)]
    return [0.1 + (d + 1) / (2 * D) for d in range(D)]


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #
@dataclass
class ModelConfig:
    kind: str = "gbm"
    dim: int = 2
    s0: object = 90.0
    r: float = 0.05
    delta: object = 0.10
    sigma: object = 0.20  # number, list, or "asymmetric"
    A1: list | None = None
    b1: list | None = None
    A2: list | None = None
    b2: list | None = None

    def validate(self):
        if np.ndim(self.s0) and np.size(self.s0) != self.dim:
            raise ConfigError(f"[model] s0 has {np.size(self.s0)} entries for dim {self.dim}")
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"[model] kind must be one of {MODEL_KINDS}")
        if self.dim < 1:
            raise ConfigError("[model] dim must be >= 1")
        if isinstance(self.sigma, str) and self.sigma != "asymmetric":
            raise ConfigError("[model] sigma must be a number, a list or 'asymmetric'")

    def x0(self) -> np.ndarray:
        s0 = np.asarray(self.s0, dtype=float)
        return np.full(self.dim, float(s0)) if s0.ndim == 0 else s0

    def build(self):
        try:
            if self.kind == "gbm":
                sigma = asymmetric_sigmas(self.dim) if self.sigma == "asymmetric" else self.sigma
                return GBM(self.x0(), self.r, self.delta, sigma)
            if self.kind == "brownian":
                return brownian_motion(self.x0())
            return GenericAffine(self.x0(), self.A1, self.b1, self.A2, self.b2)
        except (InvalidArgumentError, TypeError, ValueError) as exc:
            raise ConfigError(f"[model] {exc}") from exc


@dataclass
class PayoffConfig:
    kind: str = "maxcall"
    K: float = 100.0
    r: float = 0.05
    value: float = 0.0

    def validate(self):
        if self.kind not in PAYOFF_KINDS:
            raise ConfigError(f"[payoff] kind must be one of {PAYOFF_KINDS}")

    def build(self, D: int):
        if self.kind == "maxcall":
            return MaxCall(self.K, self.r, D)
        if self.kind == "basketput":
            return BasketPut(self.K, self.r, D)
        if self.kind == "linear":
            return LinearPayoff(self.r, D)
        return ConstantPayoff(self.value, D)


@dataclass
class GridConfig:
    T: float = 3.0
    N: int = 9
    N0: int = 50

    def validate(self):
        try:
            self.build()
        except InvalidArgumentError as exc:
            raise ConfigError(f"[grid] {exc}") from exc

    def build(self) -> TimeGrid:
        return TimeGrid(float(self.T), int(self.N), int(self.N0))


@dataclass
class NetworkConfig:
    depth: int = 3
    width: int | None = None  # default 40 + D
    activation: str = "bounded_relu"
    bound: float = 100.0

    def validate(self):
        if self.depth < 1 or (self.width is not None and self.width < 1):
            raise ConfigError("[network] depth and width must be >= 1")
        if self.activation not in ("bounded_relu", "relu"):
            raise ConfigError("[network] activation must be 'bounded_relu' or 'relu'")
        if not self.bound > 0:
            raise ConfigError("[network] bound must be positive")


@dataclass
class TrainingConfig:
    steps: int | None = None  # default 1500 + 100 D
    batch: int = 1024
    lr_values: list = field(default_factory=lambda: [1e-3, 1e-4])
    lr_fractions: list = field(default_factory=lambda: [0.6])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    sampling: str = "pool"
    pool_batches: int = 64
    warm_start: bool = True
    interleaved: bool = False
    threads: int = 1
    deterministic: bool = True

    def validate(self):
        if self.steps is not None and self.steps < 0:
            raise ConfigError("[training] steps must be >= 0")
        if self.batch < 2:
            raise ConfigError("[training] batch must be >= 2")
        if self.sampling not in ("fresh", "pool"):
            raise ConfigError("[training] sampling must be 'fresh' or 'pool'")
        if len(self.lr_values) != len(self.lr_fractions) + 1:
            raise ConfigError("[training] need one more lr value than lr fraction")
        if self.threads < 1:
            raise ConfigError("[training] threads must be >= 1")


@dataclass
class EvaluationConfig:
    J1: int = 200_000
    alpha: float = 0.05
    seed: int = 1
    chunk_size: int = 4096
    reference: object = None  # number or [lo, hi]

    def validate(self):
        if self.J1 < 2:
            raise ConfigError("[evaluation] J1 must be >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("[evaluation] alpha must lie in (0, 1)")
        if self.reference is not None:
            ref = np.atleast_1d(np.asarray(self.reference, dtype=float))
            if ref.size not in (1, 2):
                raise ConfigError("[evaluation] reference is a number or a [lo, hi] pair")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    checkpoints: bool = True


_SECTIONS = {"model": ModelConfig, "payoff": PayoffConfig, "grid": GridConfig,
             "network": NetworkConfig, "training": TrainingConfig,
             "evaluation": EvaluationConfig, "output": OutputConfig}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    return cls(**data)


def _plain(value):
    """JSON/TOML-friendly copy (tuples and arrays become lists)."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    payoff: PayoffConfig = field(default_factory=PayoffConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        for name in _SECTIONS:
            sec = getattr(self, name)
            if hasattr(sec, "validate"):
                sec.validate()
        self.model.build()  # shape checks live in the model constructors

    # -- serialisation ------------------------------------------------------ #
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown tables: {', '.join(sorted(unknown))}")
        try:
            return cls(**{name: _section(sc, data.get(name, {}), name)
                          for name, sc in _SECTIONS.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self, drop_none: bool = True) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = _plain(dataclasses.asdict(getattr(self, name)))
            out[name] = {k: v for k, v in sec.items() if not (drop_none and v is None)}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def resolved(self) -> dict:
        """Dictionary with every default filled in, as it is actually run."""
        d = self.to_dict()
        D = self.model.dim
        d["network"]["width"] = self.width
        d["training"]["steps"] = self.steps
        d["model"]["x0"] = self.model.x0().tolist()
        if self.model.kind == "gbm" and self.model.sigma == "asymmetric":
            d["model"]["sigma"] = asymmetric_sigmas(D)
        if self.evaluation.reference is not None:
            d["evaluation"]["reference"] = list(self.reference_interval)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section field overrides, e.g. ``replace(grid={"N0": 10})``."""
        data = self.to_dict(drop_none=False)
        for name, changes in sections.items():
            data[name].update(changes)
        for name in data:
            data[name] = {k: v for k, v in data[name].items() if v is not None}
        return ExperimentConfig.from_dict(data)

    # -- derived objects ---------------------------------------------------- #
    @property
    def width(self) -> int:
        return self.network.width if self.network.width is not None else 40 + self.model.dim

    @property
    def steps(self) -> int:
        s = self.training.steps
        return s if s is not None else 1500 + 100 * self.model.dim

    @property
    def reference_interval(self):
        if self.evaluation.reference is None:
            return None
        ref = np.atleast_1d(np.asarray(self.evaluation.reference, dtype=float))
        return (float(ref[0]), float(ref[-1]))

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(steps=self.steps, batch=t.batch, lr_values=tuple(t.lr_values),
                           lr_fractions=tuple(t.lr_fractions), beta1=t.beta1, beta2=t.beta2,
                           eps=t.eps, seed=t.seed, depth=self.network.depth, width=self.width,
                           activation=self.network.activation, bound=self.network.bound,
                           sampling=t.sampling, pool_batches=t.pool_batches,
                           threads=1 if t.deterministic else t.threads,
                           warm_start=t.warm_start)

    def build(self):
        model = self.model.build()
        return model, self.payoff.build(model.D), self.grid.build()


# --------------------------------------------------------------------------- #
# results
# --------------------------------------------------------------------------- #
@dataclass
class ResultRow:
    D: int
    s0: float
    L0: float
    sigma_L: float
    U0: float
    sigma_U: float
    ci_lo: float
    ci_hi: float
    ref_lo: float | None = None
    ref_hi: float | None = None
    T: float = 0.0
    N: int = 0
    N0: int = 0
    J1: int = 0
    time_primal: float = 0.0
    time_dual: float = 0.0
    time_eval: float = 0.0
    config_hash: str = ""
    precision: str = "float64"
    status: str = "ok"

    @property
    def gap(self) -> float:
        return self.U0 - self.L0

    def reference_covered(self) -> bool | None:
        """CI contains a scalar reference, or overlaps a reference interval."""
        if self.ref_lo is None:
            return None
        return self.ci_lo <= self.ref_hi and self.ref_lo <= self.ci_hi


CSV_COLUMNS = [f.name for f in fields(ResultRow)]
_INTS = {"D", "N", "N0", "J1"}
_STRS = {"config_hash", "precision", "status"}


def write_rows(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_COLUMNS)
        w.writeheader()
        for row in rows:
            d = dataclasses.asdict(row)
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                        for k, v in d.items()})


def read_rows(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {}
            for k, v in rec.items():
                if k in _STRS:
                    vals[k] = v
                elif v == "":
                    vals[k] = None
                else:
                    vals[k] = int(v) if k in _INTS else float(v)
            rows.append(ResultRow(**vals))
    return rows


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _write_metadata(out: Path, cfg: ExperimentConfig, extra: dict) -> None:
    meta = {"config": cfg.resolved(), "config_hash": cfg.config_hash(),
            "seeds": {"train": cfg.training.seed, "eval": cfg.evaluation.seed},
            "precision": "float64", "git_hash": _git_hash(), **extra}
    out.mkdir(parents=True, exist_ok=True)
    (out / "metadata.json").write_text(json.dumps(_plain(meta), indent=2))


# --------------------------------------------------------------------------- #
# driver
# --------------------------------------------------------------------------- #
def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True,
                   log=None) -> ResultRow:
    """Train both bounds, evaluate them on shared fresh paths and assemble a row.

    With ``write`` the row goes to ``results.csv`` next to ``metadata.json``
    and a ``checkpoints/`` directory. A divergence writes a metadata file
    marked ``failed`` before the error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    model, payoff, grid = cfg.build()
    tc = cfg.train_config()
    say = log or (lambda msg: None)
    pool = make_pool(tc, model, grid) if tc.sampling == "pool" else None
    dual = DualTrainer(tc, model, payoff, grid, pool=pool)
    primal = PrimalTrainer(tc, model, payoff, grid, pool=pool)
    t_dual = t_primal = 0.0
    try:
        if cfg.training.interleaved:
            order = [(n, who) for n in range(grid.N - 1, -1, -1) for who in ("dual", "primal")]
        else:
            order = ([(n, "dual") for n in range(grid.N - 1, -1, -1)]
                     + [(n, "primal") for n in range(grid.N - 1, -1, -1)])
        for n, who in order:
            t0 = time.perf_counter()
            if who == "dual":
                dual.train_stage(n)
                t_dual += time.perf_counter() - t0
            else:
                primal.train_stage(n)
                t_primal += time.perf_counter() - t0
            say(f"{who} stage {n} done ({time.perf_counter() - t0:.1f}s)")
    except TrainingDivergenceError as exc:
        if write:
            _write_metadata(out, cfg, {"status": "failed", "error": str(exc),
                                       "stage": exc.stage})
        raise
    dm, pm = dual.result(), primal.result()
    ev = cfg.evaluation
    t0 = time.perf_counter()
    threads = tc.threads
    upper = evaluate_upper(dm, ev.J1, ev.seed, ev.chunk_size, keep_paths=False, threads=threads)
    lower = evaluate_lower(pm, ev.J1, ev.seed, ev.chunk_size, keep_paths=False, threads=threads)
    t_eval = time.perf_counter() - t0
    lo, hi = confidence_interval(lower.L0, upper.U0, lower.sigma_L, upper.sigma_U, ev.J1,
                                 ev.alpha)
    ref = cfg.reference_interval
    x0 = cfg.model.x0()
    row = ResultRow(D=model.D, s0=float(x0[0]), L0=lower.L0, sigma_L=lower.sigma_L,
                    U0=upper.U0, sigma_U=upper.sigma_U, ci_lo=lo, ci_hi=hi,
                    ref_lo=None if ref is None else ref[0], ref_hi=None if ref is None else ref[1],
                    T=grid.T, N=grid.N, N0=grid.N0, J1=ev.J1, time_primal=t_primal,
                    time_dual=t_dual, time_eval=t_eval, config_hash=cfg.config_hash())
    if write:
        write_rows(out / "results.csv", [row])
        _write_metadata(out, cfg, {"status": "ok", "stop_at_zero": pm.stop_at_zero,
                                   "continuation0": primal.continuation0,
                                   "wall_time": {"primal": t_primal, "dual": t_dual,
                                                 "eval": t_eval}})
        if cfg.output.checkpoints:
            save_dual_model(dm, out / "checkpoints" / "dual", {"seed": tc.seed})
            save_primal_model(pm, out / "checkpoints" / "primal", {"seed": tc.seed})
    say(f"L0={row.L0:.4f} U0={row.U0:.4f} CI=[{lo:.4f}, {hi:.4f}]")
    return row


def _sweep(jobs, out: Path, write: bool, log) -> list:
    # the combined CSV is rewritten after every row so a failure keeps finished rows
    rows = []
    for cfg, sub in jobs:
        rows.append(run_experiment(cfg, out / sub, write, log))
        if write:
            write_rows(out / "results.csv", rows)
    return rows


def sweep_n0(cfg: ExperimentConfig, n0_values, out_dir=None, write: bool = True,
             log=None) -> list:
    """Repeat :func:`run_experiment` with only ``N0`` changed."""
    n0_values = [int(v) for v in n0_values]
    if not n0_values:
        raise ConfigError("sweep needs at least one N0 value")
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    return _sweep([(cfg.replace(grid={"N0": v}), f"n0_{v}") for v in n0_values], out, write,
                  log)


def dimension_config(cfg: ExperimentConfig, D: int) -> ExperimentConfig:
    """Same problem in dimension ``D``; width and steps follow their D-rules when unset."""
    s0 = np.asarray(cfg.model.s0, dtype=float)
    model = {"dim": int(D), "s0": float(s0.ravel()[0])}
    for key in ("delta", "sigma"):
        val = getattr(cfg.model, key)
        if isinstance(val, (list, tuple)):
            model[key] = float(val[0])
    return cfg.replace(model=model)


def sweep_dimension(cfg: ExperimentConfig, d_values, out_dir=None, write: bool = True,
                    log=None) -> list:
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    return _sweep([(dimension_config(cfg, D), f"dim_{D}") for D in d_values], out, write, log)


def runtime_slope(rows) -> float:
    """Least-squares slope of log(total wall time) against log(D)."""
    D = np.log([r.D for r in rows])
    t = np.log([r.time_primal + r.time_dual + r.time_eval for r in rows])
    if len(rows) < 2 or np.ptp(D) == 0:
        raise InvalidArgumentError("need at least two distinct dimensions")
    return float(np.polyfit(D, t, 1)[0])


# --------------------------------------------------------------------------- #
# benchmark tables
# --------------------------------------------------------------------------- #
# reference values by (D, s0): a number or a [lo, hi] interval
TABLES = {
    "maxcall-sym": {
        "model": {"kind": "gbm", "r": 0.05, "delta": 0.10, "sigma": 0.20},
        "payoff": {"kind": "maxcall", "K": 100.0, "r": 0.05},
        "refs": {(2, 90): 8.075, (2, 100): 13.902, (2, 110): 21.345,
                 (3, 90): 11.290, (3, 100): 18.690, (3, 110): 27.580,
                 (5, 90): [16.620, 16.653], (5, 100): [26.115, 26.164],
                 (5, 110): [36.710, 36.798]},
    },
    "maxcall-asym": {
        "model": {"kind": "gbm", "r": 0.05, "delta": 0.10, "sigma": "asymmetric"},
        "payoff": {"kind": "maxcall", "K": 100.0, "r": 0.05},
        "refs": {(2, 90): [14.299, 14.367], (2, 100): [19.772, 19.829],
                 (2, 110): [27.138, 27.163], (3, 90): [19.065, 19.104],
                 (3, 100): [26.648, 26.701], (3, 110): [35.806, 35.835],
                 (5, 90): [27.468, 27.686], (5, 100): [37.730, 38.020],
                 (5, 110): [49.155, 49.531]},
    },
    "basketput": {
        "model": {"kind": "gbm", "r": 0.05, "delta": 0.0, "sigma": 0.20},
        "payoff": {"kind": "basketput", "K": 100.0, "r": 0.05},
        "refs": {(5, 90): [10.000, 10.000], (5, 100): [2.475, 2.539],
                 (5, 110): [0.591, 0.635]},
    },
}


def table_configs(which: str, base: ExperimentConfig | None = None, dims=None) -> list:
    """One config per table row, grid/network/training/evaluation taken from ``base``."""
    if which not in TABLES:
        raise ConfigError(f"unknown table {which!r}; choose from {', '.join(TABLES)}")
    table = TABLES[which]
    base = base or ExperimentConfig()
    keys = sorted(table["refs"])
    if dims is not None:
        keys = [k for k in keys if k[0] in set(int(d) for d in dims)]
    out = []
    for D, s0 in keys:
        ref = table["refs"][(D, s0)]
        cfg = base.replace(model={**table["model"], "dim": D, "s0": float(s0), "A1": None,
                                  "b1": None, "A2": None, "b2": None},
                           payoff=dict(table["payoff"]), evaluation={"reference": ref})
        out.append(cfg)
    return out


def table_checks(which: str, row: ResultRow) -> list:
    """Named pass/fail checks applied to one table row."""
    checks = [("reference inside CI", bool(row.reference_covered()))]
    if which == "maxcall-sym" and row.D == 2:
        checks.append(("gap <= 0.20", row.gap <= 0.20))
    if which == "basketput" and row.s0 == 90.0:
        checks.append(("L0 within 0.01 of 10", abs(row.L0 - 10.0) <= 0.01))
        checks.append(("U0 within 0.01 of 10", abs(row.U0 - 10.0) <= 0.01))
    return checks


def run_table(which: str, base: ExperimentConfig | None = None, dims=None, out_dir=None,
              write: bool = True, log=None):
    """Run every row of a benchmark table; returns ``(rows, checks)`` with one check list per row."""
    cfgs = table_configs(which, base, dims)
    out = Path(out_dir if out_dir is not None else (base or ExperimentConfig()).output.dir)
    rows = _sweep([(c, f"D{c.model.dim}_s{int(c.model.x0()[0])}") for c in cfgs], out, write,
                  log)
    return rows, [table_checks(which, r) for r in rows]
