"""Command line entry point.

Settings resolve as command-line flags, then the experiment file, then the
model file, then built-in defaults.  Exit status is 0 on success, 2 for a
usage or configuration error and 3 when a simulation fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import asg, diffusion, harness
from .forward import PopulationState, RateOverflow, simulate
from .measures import FamilyError, ModelParams, build_coupling, equalize_mass, family_from_json, load_family, moran_family
from .rng import STREAM_ASG, check_seed, replicate_rng

OUT_ENV = "LOGBRANCH_OUT"
DEFAULT_OUT = "logbranch-out"

COMMANDS = ("simulate", "asg", "dual", "sde", "growth", "duality", "limits", "run")


class ConfigError(Exception):
    """Bad flags or configuration files."""


# ---------------------------------------------------------------------------
# configuration


class Config:
    """Layered lookup over flags, experiment file and model file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.experiment: dict = {}
        self.model_extras: dict = {}
        self.model_doc: dict | None = None
        if args.experiment:
            self.experiment = _read_json(args.experiment, "experiment")
        model_path = args.model or self.experiment.get("model_file")
        if model_path:
            try:
                family, self.model_extras = load_family(model_path)
            except FileNotFoundError as exc:
                raise ConfigError(f"model file not found: {model_path}") from exc
            except (json.JSONDecodeError, FamilyError) as exc:
                raise ConfigError(f"bad model file {model_path}: {exc}") from exc
            self.model_doc = dict(family.spec)
        elif isinstance(self.experiment.get("model"), dict):
            self.model_doc = self.experiment["model"]
        self.overrides = {k: v for k, v in vars(args).items() if v is not None}

    def get(self, key: str, default=None, kind=None):
        if key in self.overrides:
            value = self.overrides[key]
        elif key in self.experiment:
            value = self.experiment[key]
        elif key in self.experiment.get("grid", {}):
            value = self.experiment["grid"][key]
        elif key in self.model_extras:
            value = self.model_extras[key]
        else:
            value = default
        if kind is not None and value is not None:
            try:
                value = kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot convert {value!r}") from exc
        return value

    def family(self):
        if self.model_doc is None:
            return moran_family(1)
        try:
            return family_from_json(self.model_doc)
        except FamilyError as exc:
            raise ConfigError(f"bad model: {exc}") from exc

    def params(self) -> ModelParams:
        K = self.get("K", 1000)
        K = _positive_int_or_config(K[0] if isinstance(K, list) and K else K, "K")
        try:
            return ModelParams(K, self.family(), self.get("theta_plus", 0.0, float),
                               self.get("theta_minus", 0.0, float))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def seed(self) -> int:
        try:
            return check_seed(self.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def out_dir(self) -> Path:
        out = self.args.out or self.experiment.get("output") or os.environ.get(OUT_ENV) or DEFAULT_OUT
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def spec(self, kind: str) -> harness.ExperimentSpec:
        doc = {k: v for k, v in self.experiment.items() if k not in ("model_file",)}
        doc["kind"] = kind
        if self.model_doc is not None:
            doc["model"] = self.model_doc
        grid = dict(doc.get("grid", {}))
        for key in ("K", "theta_plus", "theta_minus"):
            if key in self.model_extras and key not in doc and key not in grid:
                if key == "K":
                    grid["K"] = [self.model_extras[key]]
                else:
                    doc[key] = self.model_extras[key]
        doc["grid"] = grid
        a = self.args
        if getattr(a, "K", None) is not None:
            doc["grid"]["K"] = [a.K]
        for key in ("theta_plus", "theta_minus", "replicates"):
            if getattr(a, key, None) is not None:
                doc[key] = getattr(a, key)
        if getattr(a, "T", None) is not None:
            doc["grid"]["T"] = a.T
        doc["seed"] = self.seed()
        doc.pop("output", None)
        try:
            return harness.ExperimentSpec.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _read_json(path: str, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} file must hold a JSON object")
    return doc


def _positive_int(x) -> int:
    if isinstance(x, bool) or int(x) != x or int(x) < 1:
        raise ValueError(x)
    return int(x)


def _positive_int_or_config(x, key: str) -> int:
    try:
        return _positive_int(x)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a positive integer, got {x!r}") from exc


def _nonneg_int(x) -> int:
    if isinstance(x, bool) or int(x) != x or int(x) < 0:
        raise ValueError(x)
    return int(x)


def _summary(text: str, anchor: str) -> None:
    print(f"{text} | {anchor}")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: Config) -> int:
    params = cfg.params()
    horizon = cfg.get("horizon", 1.0, float)
    if not horizon >= 0:
        raise ConfigError("horizon must be nonnegative")
    n_plus = cfg.get("n_plus", params.K, _nonneg_int)
    n_minus = cfg.get("n_minus", 0, _nonneg_int)
    traj = simulate(PopulationState(n_plus, n_minus), params, horizon, None, cfg.seed())
    path = cfg.out_dir() / "trajectory.csv"
    traj.to_csv(path)
    fin = traj.final
    _summary(f"simulate: final ({fin.n_plus}, {fin.n_minus}) at t={traj.end_time:g}, status {traj.status}, "
             f"{len(traj.t)} rows -> {path}", "forward logistic branching chain")
    return 0


def cmd_asg(cfg: Config) -> int:
    params = cfg.params()
    K = params.K
    T = cfg.get("T", 1.0, float)
    m = cfg.get("m", 5, _positive_int)
    L = cfg.get("L", None, _positive_int)
    n_minus = cfg.get("n_minus", 0, _nonneg_int)
    n_plus = cfg.get("n_plus", K - n_minus, _nonneg_int)
    seed = cfg.seed()
    try:
        log, _ = asg.simulate_graphical(params, build_coupling(params), T, PopulationState(n_plus, n_minus),
                                        replicate_rng(seed, 0, STREAM_ASG, K, 0), epsilon=cfg.get("epsilon"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    back_rng = replicate_rng(seed, 0, STREAM_ASG, K, 1)
    out = cfg.out_dir()
    log.to_jsonl(out / "events.jsonl")
    if L is None:
        A = asg.lineage_counting(log, m, back_rng)
        extra = ""
    else:
        res = asg.auxiliary_process(log, L, back_rng, m=m)
        A = res.A
        res.B.to_csv(out / "auxiliary.csv")
        extra = f", tau={res.tau:g}, sigma={res.sigma:g}"
    A.to_csv(out / "lineages.csv")
    _summary(f"asg: A(T)={A.final} from m={m}, {len(log.t)} events, frozen={log.frozen}{extra} -> {out}",
             "backward lineage counting process")
    return 0


def cmd_dual(cfg: Config) -> int:
    p = _diffusion_params(cfg)
    n0 = cfg.get("n0", 3, _positive_int)
    horizon = cfg.get("horizon", 1.0, float)
    try:
        path = diffusion.simulate_dual(n0, p, horizon, cfg.seed())
    except diffusion.InvalidDualParams as exc:
        raise ConfigError(str(exc)) from exc
    out = cfg.out_dir() / "dual.csv"
    path.to_csv(out)
    _summary(f"dual: A({horizon:g})={path.value_at(horizon)} from n0={n0} -> {out}", "dual counting chain")
    return 0


def cmd_sde(cfg: Config) -> int:
    p = _diffusion_params(cfg)
    w0 = cfg.get("w0", 0.5, float)
    if not 0 <= w0 <= 1:
        raise ConfigError("w0 must lie in [0, 1]")
    horizon = cfg.get("horizon", 1.0, float)
    path = diffusion.simulate_sde(w0, p, horizon, cfg.get("dt", None, float), cfg.seed())
    out = cfg.out_dir() / "sde.csv"
    path.to_csv(out)
    _summary(f"sde: W({horizon:g})={path.value[-1]:.6g} from w0={w0:g} -> {out}", "frequency diffusion")
    return 0


def _diffusion_params(cfg: Config) -> diffusion.DiffusionParams:
    try:
        return diffusion.DiffusionParams.from_family(cfg.family(), cfg.get("theta_plus", 0.0, float),
                                                     cfg.get("theta_minus", 0.0, float))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _experiment(cfg: Config, kind: str) -> int:
    spec = cfg.spec(kind)
    report = harness.run(spec, cfg.get("jobs", 1, _positive_int))
    js, _ = report.write(cfg.out_dir())
    key = next(iter(report.summary.items()), None)
    stat = f"{key[0]}={key[1]}" if key else f"{len(report.cells)} cells"
    _summary(f"{kind}: {stat} -> {js}", report.anchor)
    return 0


def cmd_growth(cfg: Config) -> int:
    return _experiment(cfg, "growth")


def cmd_duality(cfg: Config) -> int:
    return _experiment(cfg, "duality")


def cmd_limits(cfg: Config) -> int:
    return _experiment(cfg, "limits_probe")


def cmd_run(cfg: Config) -> int:
    kind = cfg.experiment.get("kind")
    if kind is None:
        raise ConfigError("run needs --experiment with a 'kind'")
    return _experiment(cfg, kind)


HANDLERS = {
    "simulate": cmd_simulate,
    "asg": cmd_asg,
    "dual": cmd_dual,
    "sde": cmd_sde,
    "growth": cmd_growth,
    "duality": cmd_duality,
    "limits": cmd_limits,
    "run": cmd_run,
}


# ---------------------------------------------------------------------------
# self test


def selftest() -> bool:
    """Exact small-instance checks: transition law against enumeration,
    closed forms, coupling marginals and death atoms."""
    ok = True
    forms = {"p_plus": asg.p_plus, "p_hat_plus": asg.p_hat_plus, "p_minus": asg.p_minus,
             "p_hat_minus": asg.p_hat_minus}
    for N in range(1, 8):
        for n in range(0, N + 1):
            for i in range(0, N + 1):
                for j in range(0, (N - i) // 2 + 1):
                    d = asg.transition_distribution(i, j, n, N)
                    ok &= d.probs == asg.brute_force_distribution(i, j, n, N).probs and d.total() == 1
                    events = asg.closed_form_events(i, j, n, N)
                    ok &= all(f(i, j, n, N) == events[k] for k, f in forms.items())
    for K in (10, 100):
        params = ModelParams(K, moran_family(1))
        nu = build_coupling(params)
        nh_minus, nh_plus = equalize_mass(params.minus_law, params.plus_law)
        ok &= nu.marginal_plus() == nh_plus.masses and nu.marginal_minus() == nh_minus.masses
        ok &= nu[(0, 0)] == params.plus_law[0]
        ok &= nu[(0, 1)] == params.minus_law[0] - params.plus_law[0]
    print(f"selftest: {'pass' if ok else 'FAIL'}")
    return bool(ok)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logbranch", description="Two-type logistic branching simulations.")
    parser.add_argument("--selftest", action="store_true", help="run the exact small-instance checks and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "") + " command")
        p.add_argument("--model", help="model file (LawFamily JSON)")
        p.add_argument("--experiment", help="experiment file (JSON)")
        p.add_argument("--seed", type=int, help="root seed in [0, 2**64)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--jobs", type=int, help="worker processes for experiments")
        p.add_argument("--selftest", action="store_true", help="run the exact small-instance checks first")
        p.add_argument("--K", type=int, help="carrying capacity")
        p.add_argument("--theta-plus", type=float, dest="theta_plus")
        p.add_argument("--theta-minus", type=float, dest="theta_minus")
        p.add_argument("--replicates", type=int)
        if name == "simulate":
            p.add_argument("--horizon", type=float, help="natural time horizon")
            p.add_argument("--n-plus", type=int, dest="n_plus")
            p.add_argument("--n-minus", type=int, dest="n_minus")
        if name == "asg":
            p.add_argument("--T", type=float, help="rescaled time horizon")
            p.add_argument("--m", type=int, help="sample size")
            p.add_argument("--L", type=int, help="run the auxiliary chain with this level")
            p.add_argument("--epsilon", type=float, help="band half-width relative to K")
            p.add_argument("--n-plus", type=int, dest="n_plus")
            p.add_argument("--n-minus", type=int, dest="n_minus")
        if name == "dual":
            p.add_argument("--n0", type=int)
            p.add_argument("--horizon", type=float)
        if name == "sde":
            p.add_argument("--w0", type=float)
            p.add_argument("--horizon", type=float)
            p.add_argument("--dt", type=float)
        if name == "growth":
            p.add_argument("--beta", type=float)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.selftest:
        if not selftest():
            return 3
        if args.command is None:
            return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("logbranch: error: a command is required", file=sys.stderr)
        return 2
    try:
        cfg = Config(args)
        if args.command == "growth" and args.beta is not None:
            cfg.experiment.setdefault("grid", {})["beta"] = args.beta
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"logbranch: configuration error: {exc}", file=sys.stderr)
        return 2
    except (RateOverflow, asg.GeometryViolation, asg.SampleTooLarge, diffusion.NegativeVariance) as exc:
        print(f"logbranch: simulation error: {exc}", file=sys.stderr)
        return 3
    except harness.SpecError as exc:
        print(f"logbranch: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any other failure inside a simulation
        print(f"logbranch: simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
