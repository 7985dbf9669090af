"""Experiment configuration, commands, and sweeps.

A config is a YAML tree with blocks ``process``, ``data``, ``field``,
``estimation``, ``output`` and optionally ``sweep``. Missing keys are filled
from ``DEFAULTS`` and the materialized tree is what gets hashed and written
next to every output, so each artifact says exactly how it was made.

Commands return an exit code: 0 pass, 2 config error, 3 numerical failure,
4 invariant violation.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import checkpoint as ckpt
from .data import DatasetError, DatasetSpec
from .entropy import CONTROLLED, DIVERGENCE, FORWARD, NORM, EntropyError, controlled_series, forward_series, integrate_series
from .likelihood import LikelihoodError, ODEConfig, bound_and_gap
from .process import DiffusionProcess, ProcessError
from .quadrature import TimeGrid
from .sampler import SamplerError, reverse_sample
from .scorefield import LinearScore, PerturbationSpec, PerturbedScore, ScoreFieldError, exact_field
from .svg import line_plot, scatter_plot
from .training import FEEDFORWARD, LINEAR, TrainConfig, TrainingDivergence, TrainingError, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

VARIANTS = ("exact", "perturbed", "zero", "linear", "feedforward", "checkpoint")

LINEAR_TRAIN = {"model": LINEAR, "steps": 2000, "batch": 256, "learning_rate": 1e-2, "optimizer": "adam",
                "lr_schedule": "cosine"}
FEEDFORWARD_TRAIN = {"model": FEEDFORWARD, "hidden_sizes": [64, 64], "steps": 2000, "batch": 256,
                     "learning_rate": 1e-3, "optimizer": "adam", "lr_schedule": "cosine"}

DEFAULT_SWEEP = {
    "sigmas": [10.0, 15.0, 20.0, 25.0, 30.0],
    "processes": ["VE", "VP"],
    "data": [{"kind": "GaussianProduct", "d": 4}, {"kind": "UniformUnit", "d": 4}],
    "fields": [
        {"variant": "exact"},
        {"variant": "perturbed", "epsilon": 0.05},
        {"variant": "perturbed", "epsilon": 0.1},
        {"variant": "perturbed", "epsilon": 0.2},
        {"variant": "perturbed", "epsilon": 0.3},
        {"variant": "linear"},
        {"variant": "feedforward"},
    ],
    "workers": 1,
}

DEFAULTS = {
    "process": {"kind": "VE", "sigma": 10.0, "r": 0.5, "dim": None, "prior": "integrated"},
    "data": {"kind": "GaussianProduct", "d": 1},
    "field": {
        "variant": "exact",
        "perturbation": {"epsilon": 0.0, "mode": "additive-noise-field", "seed": 0, "features": 8},
        "train": {},
        "checkpoint": None,
    },
    "estimation": {
        "grid": 64, "spacing": "sqrt", "batch": 4096, "nll_batch": None, "ode_steps": 128,
        "hutchinson_probes": 8, "seed": 0, "picture": CONTROLLED, "plug_in": DIVERGENCE,
        "substeps": 32, "start": "prior", "sample_paths": 512, "sample_steps": 512, "denoise": False,
    },
    "output": {"dir": "out", "formats": ["csv", "json", "svg"]},
}


class ConfigError(ValueError):
    pass


NUMERIC_ERRORS = (LikelihoodError, SamplerError, TrainingDivergence, FloatingPointError, EntropyError)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _canonical(tree) -> str:
    return json.dumps(tree, sort_keys=True, separators=(",", ":"), default=float)


def config_hash(tree: dict) -> str:
    return hashlib.sha256(_canonical(tree).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    tree: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=".") -> "ExperimentConfig":
        raw = dict(raw or {})
        sweep = raw.pop("sweep", None)
        data = raw.pop("data", None)
        tree = _merge(DEFAULTS, raw)
        if data is not None:
            if not isinstance(data, dict):
                raise ConfigError("data block must be a mapping")
            tree["data"] = copy.deepcopy(data)
        if sweep is not None:
            if not isinstance(sweep, dict):
                raise ConfigError("sweep block must be a mapping")
            tree["sweep"] = _merge(DEFAULT_SWEEP, sweep, "sweep.")
        cfg = cls(tree, Path(base_dir))
        cfg._materialize()
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw, path.parent)

    def _materialize(self):
        t = self.tree
        if t["process"]["dim"] is None:
            t["process"]["dim"] = t["data"].get("d")
        fld = t["field"]
        variant = fld["variant"]
        if variant == "checkpoint" and fld["checkpoint"] and self.checkpoint_path.exists():
            try:
                kind = ckpt.peek_variant(self.checkpoint_path.read_bytes())
            except ckpt.CheckpointError:
                kind = None  # reported properly when the field is built
            variant = "linear" if kind == LINEAR else "feedforward"
        if variant in ("linear", "feedforward"):
            base = LINEAR_TRAIN if variant == "linear" else FEEDFORWARD_TRAIN
            try:
                fld["train"] = TrainConfig.from_dict({**base, **fld["train"]}).to_dict()
            except (TrainingError, TypeError) as exc:
                raise ConfigError(f"field.train: {exc}") from None

    def validate(self):
        t = self.tree
        try:
            proc, data = self.process, self.data
            data.check_process(proc)
        except (ProcessError, DatasetError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if proc.dim != data.d:
            raise ConfigError(f"process dim {proc.dim} does not match data d {data.d}")
        fld = t["field"]
        if fld["variant"] not in VARIANTS:
            raise ConfigError(f"unknown field variant {fld['variant']!r}; expected one of {VARIANTS}")
        try:
            PerturbationSpec(**fld["perturbation"])
        except (ScoreFieldError, TypeError) as exc:
            raise ConfigError(f"field.perturbation: {exc}") from None
        if fld["variant"] == "checkpoint":
            if not fld["checkpoint"]:
                raise ConfigError("field.variant 'checkpoint' needs field.checkpoint")
        if fld["checkpoint"] and not self.checkpoint_path.exists():
            raise ConfigError(f"checkpoint file {self.checkpoint_path} does not exist")
        est = t["estimation"]
        minimum = {"grid": 2, "batch": 2, "ode_steps": 1, "hutchinson_probes": 1, "substeps": 1,
                   "sample_paths": 0, "sample_steps": 1}
        for key, lo in minimum.items():
            if not isinstance(est[key], int) or isinstance(est[key], bool) or est[key] < lo:
                raise ConfigError(f"estimation.{key} must be an integer >= {lo}")
        if est["nll_batch"] is not None and (not isinstance(est["nll_batch"], int) or est["nll_batch"] < 2):
            raise ConfigError("estimation.nll_batch must be null or an integer >= 2")
        if not isinstance(est["seed"], int):
            raise ConfigError("estimation.seed must be an explicit integer")
        if est["picture"] not in (FORWARD, CONTROLLED):
            raise ConfigError(f"estimation.picture must be {FORWARD!r} or {CONTROLLED!r}")
        if est["plug_in"] not in (NORM, DIVERGENCE):
            raise ConfigError(f"estimation.plug_in must be {NORM!r} or {DIVERGENCE!r}")
        if est["start"] not in ("prior", "terminal"):
            raise ConfigError("estimation.start must be 'prior' or 'terminal'")
        try:
            self.grid
        except ValueError as exc:
            raise ConfigError(f"estimation: {exc}") from None
        bad = set(t["output"]["formats"]) - {"csv", "json", "svg"}
        if bad:
            raise ConfigError(f"unknown output formats {sorted(bad)}")

    # -- parsed views ---------------------------------------------------

    @property
    def process(self) -> DiffusionProcess:
        return DiffusionProcess.from_dict(self.tree["process"])

    @property
    def data(self) -> DatasetSpec:
        return DatasetSpec.from_dict(self.tree["data"])

    @property
    def grid(self) -> TimeGrid:
        est = self.tree["estimation"]
        return TimeGrid(est["grid"], spacing=est["spacing"])

    @property
    def ode(self) -> ODEConfig:
        est = self.tree["estimation"]
        return ODEConfig(steps=est["ode_steps"], spacing=est["spacing"], probe_seed=est["seed"])

    @property
    def checkpoint_path(self) -> Path:
        p = Path(self.tree["field"]["checkpoint"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def hash(self) -> str:
        return config_hash(self.tree)

    def seeds(self) -> dict:
        fld = self.tree["field"]
        out = {"estimation": self.tree["estimation"]["seed"], "perturbation": fld["perturbation"]["seed"]}
        if "seed" in fld["train"]:
            out["train"] = fld["train"]["seed"]
        return out

    def override(self, seed=None, grid=None, batch=None, ode_steps=None, out=None, fmt=None) -> "ExperimentConfig":
        tree = copy.deepcopy(self.tree)
        est = tree["estimation"]
        if seed is not None:
            est["seed"] = int(seed)
            if "seed" in tree["field"]["train"]:
                tree["field"]["train"]["seed"] = int(seed)
        if grid is not None:
            est["grid"] = int(grid)
        if batch is not None:
            est["batch"] = int(batch)
        if ode_steps is not None:
            est["ode_steps"] = int(ode_steps)
        if out is not None:
            tree["output"]["dir"] = str(out)
        if fmt is not None:
            tree["output"]["formats"] = list(fmt)
        cfg = ExperimentConfig(tree, self.base_dir)
        cfg.validate()
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


# ---------------------------------------------------------------------------
# field construction


def build_field(cfg: ExperimentConfig):
    """Returns ``(field, info)``; trains on the fly for trained variants."""
    proc, data = cfg.process, cfg.data
    fld = cfg.tree["field"]
    variant = fld["variant"]
    info = {"variant": variant}
    if variant == "exact":
        field = exact_field(data, proc)
    elif variant == "perturbed":
        spec = PerturbationSpec(**fld["perturbation"])
        field = PerturbedScore(exact_field(data, proc), spec)
        info["epsilon"] = spec.epsilon
    elif variant == "zero":
        field = LinearScore(proc)
    elif variant in ("linear", "feedforward"):
        tc = TrainConfig.from_dict(fld["train"])
        if (variant == "linear") != (tc.model == LINEAR):
            raise ConfigError(f"field.variant {variant!r} does not match train.model {tc.model!r}")
        field, report = train(tc, data, proc)
        info.update(train_seed=tc.seed, train_final_loss=report.final_loss, train_initial_loss=report.initial_loss)
    else:
        field, step, _ = ckpt.load(cfg.checkpoint_path)
        _check_checkpoint_process(cfg, field)
        info.update(checkpoint=str(cfg.checkpoint_path), checkpoint_step=step)
    field.hutchinson_probes = cfg.tree["estimation"]["hutchinson_probes"]
    return field, info


def _check_checkpoint_process(cfg: ExperimentConfig, field) -> None:
    mine, theirs = cfg.process.to_dict(), field.proc.to_dict()
    keys = ("kind", "sigma", "r", "dim") if mine["kind"] == "VP" else ("kind", "sigma", "dim")
    diff = [k for k in keys if mine[k] != theirs[k]]
    if diff:
        raise ConfigError(f"{cfg.checkpoint_path}: checkpoint process differs from config in {diff}")
    field.proc = cfg.process


def truth_for(cfg: ExperimentConfig):
    return exact_field(cfg.data, cfg.process)


# ---------------------------------------------------------------------------
# output helpers


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.tree["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    return out


def _stamp(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.hash} seeds={json.dumps(cfg.seeds(), sort_keys=True)}\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, cfg: ExperimentConfig, payload: dict):
    body = {"config_hash": cfg.hash, "seeds": cfg.seeds(), **payload}
    path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")


def _svg_stamp(cfg: ExperimentConfig, svg: str) -> str:
    return svg.replace("</svg>", f"<!-- config_hash={cfg.hash} seeds={json.dumps(cfg.seeds(), sort_keys=True)} -->\n</svg>")


def _formats(cfg):
    return set(cfg.tree["output"]["formats"])


# ---------------------------------------------------------------------------
# commands


BOUND_COLUMNS = ["config_hash", "sigma", "process", "data", "d", "field", "epsilon", "train_seed", "S0", "S1",
                 "bound", "nll", "nll_err", "gap", "gap_err", "I_diff", "I_diff_err", "I_diff_polarization",
                 "I_diff_polarization_err", "nll_decomposition", "consistency_residual"]


def _bound_row(cfg, report, info) -> dict:
    proc, data = cfg.process, cfg.data
    return {
        "config_hash": cfg.hash, "sigma": proc.sigma, "process": proc.kind, "data": data.kind, "d": data.d,
        "field": info["variant"], "epsilon": info.get("epsilon", ""), "train_seed": info.get("train_seed", ""),
        "S0": report.S0, "S1": report.S1, "bound": report.bound, "nll": report.nll_ode, "nll_err": report.nll_ode_err,
        "gap": report.gap, "gap_err": report.gap_err, "I_diff": report.I_diff, "I_diff_err": report.I_diff_err,
        "I_diff_polarization": report.I_diff_polarization, "I_diff_polarization_err": report.I_diff_polarization_err,
        "nll_decomposition": report.nll_decomposition, "consistency_residual": report.consistency_residual,
    }


def bound_invariants(report) -> list[str]:
    problems = []
    if not bool(report.bound_holds):
        problems.append(f"bound violated: gap {report.gap:.6g} < -4 x {report.gap_err:.3g}")
    if report.I_diff is not None:
        combined = math.hypot(report.I_diff_err, report.I_diff_polarization_err)
        if abs(report.I_diff - report.I_diff_polarization) > 4.0 * combined:
            problems.append("I_diff direct and polarized estimates disagree beyond 4 stderr")
    values = [report.nll_ode, report.bound, report.gap, report.I_theta]
    if not all(math.isfinite(v) for v in values):
        problems.append("non-finite report entries")
    return problems


def evaluate_bound(cfg: ExperimentConfig):
    """Build the field and compute its bound report. Returns ``(report, info)``."""
    field, info = build_field(cfg)
    est = cfg.tree["estimation"]
    report = bound_and_gap(field, cfg.data, cfg.process, cfg.grid, est["batch"], est["seed"], cfg.ode,
                           truth=truth_for(cfg), nll_batch=est["nll_batch"])
    report.meta.update(config_hash=cfg.hash, seeds=cfg.seeds(), field_info=info)
    return report, info


def cmd_bound(cfg: ExperimentConfig) -> int:
    """Compute the likelihood bound, the ODE NLL and the gap for one config."""
    report, info = evaluate_bound(cfg)
    out = _out_dir(cfg)
    problems = bound_invariants(report)
    fm = _formats(cfg)
    if "json" in fm:
        _write_json(out / "bound.json", cfg, {"report": report.to_dict(), "bpd": report.in_bpd(),
                                              "invariant_failures": problems})
    if "csv" in fm:
        row = _bound_row(cfg, report, info)
        (out / "bound.csv").write_text(_stamp(cfg) + ",".join(BOUND_COLUMNS) + "\n"
                                       + ",".join(_fmt(row[c]) for c in BOUND_COLUMNS) + "\n")
    log.info("bound %.6g  nll %.6g +- %.2g  gap %.6g +- %.2g", report.bound, report.nll_ode, report.nll_ode_err,
             report.gap, report.gap_err)
    for p in problems:
        log.error(p)
    return EXIT_INVARIANT if problems else EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def entropy_series(cfg: ExperimentConfig):
    field, info = build_field(cfg)
    est = cfg.tree["estimation"]
    if est["picture"] == FORWARD:
        plug = est["plug_in"]
        series = forward_series(cfg.process, field, cfg.data, cfg.grid, est["batch"], est["seed"], plug)
    else:
        start = cfg.data if est["start"] == "terminal" else None
        series = controlled_series(cfg.process, field, cfg.grid, est["batch"], est["seed"], est["plug_in"],
                                   est["substeps"], start)
    return series, info


def demon_invariants(series, exact: bool) -> list[str]:
    if not exact or series.picture != CONTROLLED or series.plug_in != DIVERGENCE:
        return []
    err = np.where(series.stderr_ratio_residual > 0, series.stderr_ratio_residual, np.inf)
    z = np.abs(series.ratio_residual) / err
    bad = np.flatnonzero(z > 4.0)
    if bad.size:
        return [f"exchange = -2 x intrinsic fails at {bad.size} grid points (max |z| = {z.max():.2f})"]
    return []


def cmd_entropy(cfg: ExperimentConfig) -> int:
    """Write entropy-rate curves and their integrated totals."""
    series, info = entropy_series(cfg)
    series.meta["config_hash"] = cfg.hash
    out = _out_dir(cfg)
    fm = _formats(cfg)
    si, se, s = integrate_series(series)
    totals = {"intrinsic": si, "exchange": se, "system": s, "removed_by_demon": (-s[0], s[1])}
    problems = demon_invariants(series, cfg.tree["field"]["variant"] == "exact")
    if "csv" in fm:
        (out / "entropy.csv").write_text(_stamp(cfg) + series.to_csv())
    if "json" in fm:
        _write_json(out / "entropy.json", cfg, {"totals": totals, "picture": series.picture,
                                                "plug_in": series.plug_in, "field": info,
                                                "invariant_failures": problems})
    if "svg" in fm:
        xlabel = "tau" if series.picture == CONTROLLED else "t"
        svg = line_plot(series.times, {"intrinsic": series.intrinsic, "exchange": series.exchange,
                                       "system": series.system},
                        title=f"entropy rates ({series.picture})", xlabel=xlabel, ylabel="nats / unit time")
        (out / "entropy.svg").write_text(_svg_stamp(cfg, svg))
    for p in problems:
        log.error(p)
    return EXIT_INVARIANT if problems else EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    """Train a score model by denoising score matching and write a checkpoint."""
    fld = cfg.tree["field"]
    if fld["variant"] not in ("linear", "feedforward", "checkpoint"):
        raise ConfigError("train needs field.variant 'linear', 'feedforward' or 'checkpoint' (to resume)")
    tc = TrainConfig.from_dict(fld["train"])
    proc, data = cfg.process, cfg.data
    field, start, state = None, 0, None
    if fld["checkpoint"]:
        field, start, state = ckpt.load(cfg.checkpoint_path)
        _check_checkpoint_process(cfg, field)
        log.info("resuming from %s at step %d", cfg.checkpoint_path, start)
    try:
        field, report, state = train(tc, data, proc, field, start, state, return_state=True)
    except TrainingDivergence as exc:
        log.error("training diverged at step %d; last finite step %s", exc.step, exc.last_finite_step)
        raise
    out = _out_dir(cfg)
    ckpt.save(out / "checkpoint.bin", field, tc.steps, state)
    if "csv" in _formats(cfg):
        (out / "loss.csv").write_text(_stamp(cfg) + report.to_csv())
    if "json" in _formats(cfg):
        _write_json(out / "train.json", cfg, {"initial_loss": report.initial_loss, "final_loss": report.final_loss,
                                              "steps": tc.steps, "resumed_from": start})
    log.info("trained %d steps in %.1fs, eval loss %.6g -> %.6g", report.steps_run, report.wall_time,
             report.initial_loss, report.final_loss)
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig) -> int:
    """Draw reverse-SDE samples and write trajectories and terminal moments."""
    field, _ = build_field(cfg)
    est = cfg.tree["estimation"]
    ens = reverse_sample(cfg.process, field, est["sample_paths"], est["sample_steps"], est["seed"],
                         denoise=est["denoise"])
    out = _out_dir(cfg)
    ens.write_binary(out / "trajectories.bin")
    x = ens.terminal()
    moments = {"n": int(x.shape[0]), "mean": x.mean(axis=0) if len(x) else [],
               "variance": x.var(axis=0, ddof=1) if len(x) > 1 else []}
    if cfg.data.kind == "UniformUnit" and len(x):
        moments["fraction_in_unit_box"] = float(np.mean(np.all((x >= -0.05) & (x <= 1.05), axis=1)))
    fm = _formats(cfg)
    if "csv" in fm:
        n, m, d = ens.states.shape
        text = ens.to_csv() if n * m <= 200_000 else _terminal_csv(ens)
        (out / "trajectories.csv").write_text(_stamp(cfg) + text)
    if "json" in fm:
        _write_json(out / "samples.json", cfg, {"terminal_moments": moments, "steps": est["sample_steps"]})
    return EXIT_OK


def _terminal_csv(ens) -> str:
    sub = type(ens)(ens.tau[-1:], ens.states[:, -1:, :], ens.seed)
    return sub.to_csv()


# ---------------------------------------------------------------------------
# sweeps


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    """The cross product sigma x data x process x field quality, as config trees.

    Uniform data has no closed-form VP marginal score here, so VP x Uniform
    cells are skipped rather than failed.
    """
    sw = cfg.tree.get("sweep") or DEFAULT_SWEEP
    base = {k: v for k, v in cfg.tree.items() if k != "sweep"}
    cells = []
    for data in sw["data"]:
        for kind in sw["processes"]:
            if str(kind).upper() == "VP" and data["kind"] == "UniformUnit":
                continue
            for sigma in sw["sigmas"]:
                for quality in sw["fields"]:
                    tree = copy.deepcopy(base)
                    tree["data"] = dict(data)
                    tree["process"] = {**tree["process"], "kind": str(kind).upper(), "sigma": float(sigma),
                                       "dim": int(data["d"])}
                    q = dict(quality)
                    variant = q.pop("variant")
                    fld = {"variant": variant, "perturbation": dict(tree["field"]["perturbation"]),
                           "train": {}, "checkpoint": None}
                    if "epsilon" in q:
                        fld["perturbation"]["epsilon"] = float(q.pop("epsilon"))
                    for key in ("mode", "features"):
                        if key in q:
                            fld["perturbation"][key] = q.pop(key)
                    if "train" in q:
                        fld["train"] = dict(q.pop("train"))
                    if "seed" in q:
                        fld["train"]["seed"] = int(q.pop("seed"))
                    if q:
                        raise ConfigError(f"unknown sweep field keys {sorted(q)}")
                    tree["field"] = fld
                    cells.append(tree)
    return cells


def _quality_label(info: dict) -> str:
    if info["variant"] == "perturbed":
        return f"perturbed({info['epsilon']:g})"
    return info["variant"]


def run_cell(index: int, tree: dict, base_dir: str = ".") -> dict:
    """Evaluate one sweep cell. Never raises: failures come back as a status."""
    row = {"cell": index, "status": "ok", "error": ""}
    try:
        cell = ExperimentConfig.from_dict(copy.deepcopy(tree), base_dir)
        report, info = evaluate_bound(cell)
        row.update(_bound_row(cell, report, info))
        row["quality"] = _quality_label(info)
        row["bound_holds"] = bool(report.bound_holds)
        row["invariant_failures"] = bound_invariants(report)
    except ConfigError as exc:
        row.update(status="config-error", error=str(exc))
    except NUMERIC_ERRORS as exc:
        row.update(status="numerical-failure", error=str(exc))
    except (TrainingError, ScoreFieldError, ValueError) as exc:
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


@dataclass
class SweepResult:
    rows: list
    correlations: dict
    config_hash: str

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if r["status"] == "ok"]

    def violations(self) -> list:
        return [r for r in self.ok_rows if r["invariant_failures"]]

    def failures(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]

    def to_csv(self) -> str:
        cols = ["cell", "status", "quality", *BOUND_COLUMNS, "bound_holds", "error"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(_csv_cell(r.get(c)) for c in cols))
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    s = _fmt(v)
    return f'"{s}"' if ("," in s or '"' in s) else s


def correlations(rows: list) -> dict:
    nll = np.array([r["nll"] for r in rows])
    gap = np.array([r["gap"] for r in rows])
    if len(rows) < 3 or np.ptp(nll) == 0 or np.ptp(gap) == 0:
        return {"n": len(rows), "pearson": None, "spearman": None}
    return {"n": len(rows), "pearson": float(stats.pearsonr(nll, gap)[0]),
            "spearman": float(stats.spearmanr(nll, gap)[0])}


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> SweepResult:
    cells = sweep_cells(cfg)
    workers = workers if workers is not None else int((cfg.tree.get("sweep") or DEFAULT_SWEEP)["workers"])
    base_dir = str(cfg.base_dir)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, range(len(cells)), cells, [base_dir] * len(cells)))
    else:
        rows = []
        for i, tree in enumerate(cells):
            rows.append(run_cell(i, tree, base_dir))
            r = rows[-1]
            log.info("cell %d/%d %s", i + 1, len(cells),
                     r["status"] if r["status"] != "ok" else f"{r['quality']} sigma={r['sigma']:g} gap={r['gap']:.4g}")
    ok = [r for r in rows if r["status"] == "ok"]
    corr = {"all": correlations(ok)}
    groups = sorted({(r["data"], r["process"]) for r in ok})
    for data, kind in groups:
        corr[f"{data}/{kind}"] = correlations([r for r in ok if r["data"] == data and r["process"] == kind])
    return SweepResult(rows, corr, cfg.hash)


def cmd_sweep(cfg: ExperimentConfig, workers: int | None = None) -> int:
    """Run the sigma x data x process x field-quality sweep and correlate NLL with gap."""
    result = run_sweep(cfg, workers)
    out = _out_dir(cfg)
    fm = _formats(cfg)
    if "csv" in fm:
        (out / "sweep.csv").write_text(_stamp(cfg) + result.to_csv())
        ok = result.ok_rows
        (out / "scatter.csv").write_text(_stamp(cfg) + "bound,nll,gap,quality,sigma\n" + "".join(
            f"{r['bound']!r},{r['nll']!r},{r['gap']!r},{r['quality']},{r['sigma']!r}\n" for r in ok))
    if "json" in fm:
        _write_json(out / "sweep.json", cfg, {"rows": result.rows, "correlations": result.correlations})
    if "svg" in fm and result.ok_rows:
        ok = result.ok_rows
        svg = scatter_plot([r["bound"] for r in ok], [r["nll"] for r in ok], title="NLL versus lower bound",
                           xlabel="bound (nats)", ylabel="NLL (nats)", diagonal=True)
        (out / "scatter.svg").write_text(_svg_stamp(cfg, svg))
    for r in result.failures():
        log.error("cell %d failed (%s): %s", r["cell"], r["status"], r["error"])
    for r in result.violations():
        log.error("cell %d: %s", r["cell"], "; ".join(r["invariant_failures"]))
    if result.violations():
        return EXIT_INVARIANT
    if result.failures():
        return EXIT_NUMERIC
    return EXIT_OK
