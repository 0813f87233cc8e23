"""Command-line pipeline: simulate, train, sample, grad-check, plan, plot."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import plots
from .checks import check_dispatch_sensitivities, check_policy_gradient, check_sampler_jacobian
from .diffusion import DiffusionScenarioGenerator, ModelFormatError, TrainingDivergedError
from .gridopt.case import SingularNetworkError, load_case
from .gridopt.dispatch import SolverError
from .planner import DemandScaling, PlanConfig, PlanDivergedError, run
from .simkit import (HOURS, POLICY_NAMES, CsvBaselines, LoadDataset, SimNoiseSpec, SyntheticBaselines,
                     generate_training_set)

log = logging.getLogger("diffplan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

STREAMS = {"baselines": 1, "simulate": 2, "train": 3, "sample": 4, "plan": 5, "check": 6}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    """Independent 32-bit seed for a named stage derived from the global seed."""
    return int(np.random.SeedSequence([int(seed), STREAMS[stage]]).generate_state(1)[0])


# --- configuration --------------------------------------------------------------

@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "out"
    dataset: str | None = None
    model: str | None = None
    case: str | None = None
    baselines: str | None = None
    years: int = 3
    M: int = 10_000
    deterministic: bool = False
    train: dict = dataclasses.field(default_factory=dict)
    plan: dict = dataclasses.field(default_factory=dict)

    def path(self, name: str) -> Path:
        return Path(self.out) / name

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.path("dataset.csv")

    @property
    def model_path(self) -> Path:
        return Path(self.model) if self.model else self.path("model.json")

    def plan_config(self) -> PlanConfig:
        try:
            return PlanConfig(**{**self.plan, "seed": stage_seed(self.seed, "plan")})
        except TypeError as exc:
            raise ConfigError(f"[plan] {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"[plan] {exc}") from exc

    def generator(self) -> DiffusionScenarioGenerator:
        params = {**self.train, "random_state": stage_seed(self.seed, "train")}
        try:
            return DiffusionScenarioGenerator(**params)
        except TypeError as exc:
            raise ConfigError(f"[train] {exc}") from exc

    def day_pool(self):
        if self.baselines:
            p = Path(self.baselines)
            if not p.exists():
                raise InputError(f"baseline file {p} does not exist")
            return CsvBaselines(p)
        return SyntheticBaselines(self.years, stage_seed(self.seed, "baselines"))

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_TOP = {f.name for f in dataclasses.fields(PipelineConfig)}


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    flat = {}
    for key, value in doc.items():
        if key in ("paths", "simulate") and isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    unknown = set(flat) - _TOP
    if unknown:
        raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
    return PipelineConfig(**flat)


def parse_pins(items) -> dict:
    pins = {}
    for item in items or []:
        name, _, value = item.partition("=")
        name = name.strip().removeprefix("pi_")
        if name not in POLICY_NAMES or not value:
            raise ConfigError(f"bad --pin {item!r}; expected e.g. pi_ev_adopt=1")
        try:
            pins[name] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad --pin value {value!r}") from exc
    return pins


def parse_policy(text: str) -> np.ndarray:
    try:
        pi = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"bad policy {text!r}") from exc
    if pi.shape != (4,) or np.any(pi < 0) or np.any(pi > 1):
        raise ConfigError(f"policy must be four comma-separated values in [0, 1], got {text!r}")
    return pi


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    for name in ("seed", "out", "dataset", "model", "case", "baselines", "M"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "epochs", None) is not None:
        cfg.train = {**cfg.train, "epochs": args.epochs}
    plan = dict(cfg.plan)
    if getattr(args, "iters", None) is not None:
        plan["max_iter"] = args.iters
    if getattr(args, "lam", None) is not None:
        plan["learning_rate"] = args.lam
    pins = parse_pins(getattr(args, "pin", None))
    if pins:
        plan["pins"] = {**PlanConfig().pins, **plan.get("pins", {}), **pins}
    cfg.plan = plan
    if cfg.M < 1:
        raise ConfigError("M must be at least 1")
    return cfg


# --- artifacts ------------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: PipelineConfig, command: str, outputs: list[Path], started: float, extra=None) -> Path:
    main = outputs[0]
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "seed": cfg.seed,
        "stage_seed": stage_seed(cfg.seed, command) if command in STREAMS else None,
        "wall_time_s": round(time.perf_counter() - started, 3),
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    path = main.with_name(main.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _ensure_out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_model(cfg: PipelineConfig) -> DiffusionScenarioGenerator:
    p = cfg.model_path
    if not p.exists():
        raise InputError(f"model file {p} does not exist; run `train` first")
    try:
        return DiffusionScenarioGenerator.load(p)
    except (ModelFormatError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from exc


def _load_case(cfg: PipelineConfig):
    if cfg.case and not Path(cfg.case).exists():
        raise InputError(f"case file {cfg.case} does not exist")
    try:
        return load_case(cfg.case)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"case {cfg.case or 'bundled'}: {exc}") from exc


def _days(cfg: PipelineConfig):
    pool = cfg.day_pool()
    return list(pool.days)


# --- commands -------------------------------------------------------------------

def cmd_simulate(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    _ensure_out(cfg)
    noise = SimNoiseSpec(deterministic=cfg.deterministic)
    data = generate_training_set(cfg.M, cfg.day_pool(), stage_seed(cfg.seed, "simulate"), noise)
    path = cfg.dataset_path
    try:
        data.to_csv(path)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    peak = data.demand.max(axis=1)
    print(f"wrote {len(data)} scenarios to {path}")
    print(f"daily peak p.u.: mean {peak.mean():.3f} min {peak.min():.3f} max {peak.max():.3f}; "
          f"mean residual {data.residual.mean():.3f}")
    write_manifest(cfg, "simulate", [path], t0)
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    _ensure_out(cfg)
    p = cfg.dataset_path
    if not p.exists():
        raise InputError(f"dataset {p} does not exist; run `simulate` first")
    try:
        data = LoadDataset.from_csv(p)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    model = cfg.generator().fit(data)
    model.save(cfg.model_path)
    print(f"trained on {len(data)} scenarios; final loss {model.loss_history_[-1]:.5f}; wrote {cfg.model_path}")
    write_manifest(cfg, "train", [cfg.model_path], t0, {"loss_history": model.loss_history_})
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    _ensure_out(cfg)
    model = _load_model(cfg)
    pi = parse_policy(args.policy)
    days = _days(cfg)
    if not 0 <= args.day < len(days):
        raise ConfigError(f"--day must be in [0, {len(days) - 1}]")
    ctx = days[args.day]
    rng = np.random.default_rng(stage_seed(cfg.seed, "sample"))
    eps = rng.standard_normal((args.n, HOURS))
    scen, jac = model.sample_with_grad(pi, ctx, eps) if args.jacobian else (model.sample(pi, ctx, eps), None)
    scen = np.atleast_2d(scen)
    path = cfg.path("scenario.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour"] + [f"scenario_{i}" for i in range(scen.shape[0])])
        for t in range(HOURS):
            w.writerow([t, *(repr(float(v)) for v in scen[:, t])])
    outputs = [path]
    if jac is not None:
        jac = jac.reshape(-1, HOURS, 4).mean(axis=0)
        jpath = cfg.path("jacobian.csv")
        with open(jpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["hour", "load"] + [f"d_{n}" for n in POLICY_NAMES])
            mean = scen.mean(axis=0)
            for t in range(HOURS):
                w.writerow([t, repr(float(mean[t])), *(repr(float(v)) for v in jac[t])])
        outputs.append(jpath)
    print(f"wrote {', '.join(map(str, outputs))}")
    write_manifest(cfg, "sample", outputs, t0, {"policy": pi.tolist(), "day": args.day, "n": args.n})
    return EXIT_OK


def cmd_gradcheck(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    _ensure_out(cfg)
    p = cfg.model_path
    results = []
    try:
        model = _load_model(cfg)
        integrity = True
    except InputError as exc:
        if not p.exists():
            raise
        print(f"FAIL model checksum: {exc}")
        integrity = False
        try:
            model = DiffusionScenarioGenerator.load(p, verify=False)
        except (ModelFormatError, KeyError, json.JSONDecodeError) as exc2:
            raise InputError(f"{p}: {exc2}") from exc2
    case = _load_case(cfg)
    days = _days(cfg)
    rng = np.random.default_rng(stage_seed(cfg.seed, "check"))
    tol = args.tol
    results.append(check_sampler_jacobian(model, days, rng, n=args.triples, tol=tol))
    plan_cfg = cfg.plan_config()
    demand_rng = np.random.default_rng(stage_seed(cfg.seed, "check") + 1)
    batch_days = [days[int(i)] for i in demand_rng.integers(len(days), size=1)]
    scaling = DemandScaling.from_model(model, plan_cfg.scale_max)
    full = plan_cfg.full_policy(plan_cfg.initial_free() + 0.3)
    prof = model.sample(full, batch_days[0], demand_rng.standard_normal(HOURS))
    demand = scaling(prof)[:, None] * case.base_demand
    results.append(check_dispatch_sensitivities(case, demand, rng, n=args.perturbations, tol=tol))
    results.append(check_policy_gradient(model, case, days, rng, plan_cfg, tol=max(tol, 10 * tol)))
    for r in results:
        print(r.line())
    report = {"integrity": integrity, "checks": [
        {"name": r.name, "worst": r.worst, "tol": r.tol, "count": r.count, "passed": r.passed} for r in results]}
    rpath = cfg.path("gradcheck.json")
    rpath.write_text(json.dumps(report, indent=1) + "\n")
    write_manifest(cfg, "check", [rpath], t0)
    ok = integrity and all(r.passed for r in results)
    print("all checks passed" if ok else "grad-check FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plan(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    _ensure_out(cfg)
    model = _load_model(cfg)
    case = _load_case(cfg)
    plan_cfg = cfg.plan_config()
    traj = run(plan_cfg, model, case, _days(cfg))
    path = cfg.path("trajectory.csv")
    traj.to_csv(path)
    J = traj.objective
    print(f"{len(traj)} iterations, converged={traj.converged}, wall time {traj.wall_time:.1f}s")
    print(f"final policy {dict(zip(traj.free_names, np.round(traj.final_policy, 4)))}")
    print(f"final generator additions {np.round(traj.final_eta.eta_gen, 4)} MW, "
          f"branch additions {np.round(traj.final_eta.eta_line, 4)} MW")
    print(f"objective first {J[0]:.4g}, last-{plan_cfg.window} mean {J[-plan_cfg.window:].mean():.4g}")
    write_manifest(cfg, "plan", [path], t0, {"converged": traj.converged, "iterations": len(traj),
                                             "plan_config": dataclasses.asdict(plan_cfg)})
    return EXIT_OK


def _read_table(path: Path) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise InputError(f"{path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InputError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from exc
    return rows[0], data


def cmd_plot(cfg: PipelineConfig, args) -> int:
    src = Path(args.csv)
    header, data = _read_table(src)
    kind = args.kind
    if kind == "scenario":
        if header[0] != "hour" or not all(h.startswith("scenario_") for h in header[1:]) or len(header) < 2:
            raise InputError(f"{src}: not a scenario CSV")
        svg = plots.scenario_svg(data[:, 1:], header[1:])
    elif kind == "gradient-arrows":
        expected = ["hour", "load"] + [f"d_{n}" for n in POLICY_NAMES]
        if header != expected:
            raise InputError(f"{src}: not a Jacobian CSV (expected columns {expected})")
        svg = plots.gradient_arrows_svg(data[:, 1], data[:, 2:], POLICY_NAMES)
    elif kind == "trajectory":
        if header[:2] != ["iter", "J_hat"] or header[-2:] != ["grad_norm_eta", "grad_norm_pi"]:
            raise InputError(f"{src}: not a trajectory CSV")
        pol = [i for i, h in enumerate(header) if h.startswith("pi_")]
        gen = [i for i, h in enumerate(header) if h.startswith("eta_g")]
        br = [i for i, h in enumerate(header) if h.startswith("eta_b")]
        if not pol:
            raise InputError(f"{src}: trajectory has no policy column")
        svg = plots.trajectory_svg(data[:, 0], data[:, 1], data[:, pol[0]], data[:, gen], data[:, br],
                                   [header[i][4:] for i in gen], [header[i][4:] for i in br])
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    out = Path(args.output) if args.output else src.with_suffix(".svg")
    out.write_text(svg)
    print(f"wrote {out}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dataset", help="dataset CSV path")
    common.add_argument("--model", help="model JSON path")
    common.add_argument("--case", help="network case JSON (default: bundled 5-bus case)")
    common.add_argument("--baselines", help="baseline days CSV (default: synthetic)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="diffplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate the training set")
    p.add_argument("--M", type=int)
    p.add_argument("--deterministic", action="store_true", help="replace every random draw by its mean")

    p = sub.add_parser("train", parents=[common], help="train the scenario generator")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("sample", parents=[common], help="generate scenarios (and Jacobians)")
    p.add_argument("--policy", default="1,0,0,0", help="ev_adopt,ev_flex,hp_adopt,hp_eff")
    p.add_argument("--day", type=int, default=0, help="index into the day pool")
    p.add_argument("--n", type=int, default=1, help="number of noise draws")
    p.add_argument("--jacobian", action="store_true", help="also write the mean policy Jacobian")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference self-checks")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--triples", type=int, default=5)
    p.add_argument("--perturbations", type=int, default=20)

    p = sub.add_parser("plan", parents=[common], help="co-optimize capacity and policy")
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--pin", action="append", help="fix a policy component, e.g. pi_ev_adopt=1")

    p = sub.add_parser("plot", parents=[common], help="render a CSV artifact to SVG")
    p.add_argument("csv")
    p.add_argument("--kind", choices=["scenario", "gradient-arrows", "trajectory"], required=True)
    p.add_argument("-o", "--output", help="SVG path (default: CSV path with .svg suffix)")
    return parser


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample, "grad-check": cmd_gradcheck,
            "plan": cmd_plan, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, SingularNetworkError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, TrainingDivergedError, PlanDivergedError, NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
