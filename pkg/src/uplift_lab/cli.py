"""Command-line entry point: ``uplift-lab <command> ...``.

Exit codes: 0 success, 2 invalid input (a JSON error object is printed on
stderr), 3 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_INTERNAL = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifest ------------------------------------------------------------------


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Record of one command: arguments, seeds, input/output digests, timing."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = list(argv)
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.configs: dict[str, str | None] = {}
        self.seeds: dict[str, int] = {}
        self.notes: list[str] = []

    def add_input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(p)] = _digest(p)
        return p

    def add_output(self, path) -> Path:
        p = Path(path)
        self.outputs.append(p)
        return p

    def write(self, out_dir: Path) -> Path:
        doc = {
            "command": self.command,
            "argv": self.argv,
            "tool_version": __version__,
            "configs": self.configs,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {p.name: _digest(p) for p in self.outputs if p.is_file()},
            "notes": self.notes,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    from .eval import _clean

    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _jobs(args) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    env = os.environ.get("UPLIFT_LAB_JOBS")
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise UsageError(f"UPLIFT_LAB_JOBS must be an integer, got {env!r}") from None
        if jobs < 1:
            raise UsageError("UPLIFT_LAB_JOBS must be >= 1")
        return jobs
    return 1


# -- commands --------------------------------------------------------------------


def cmd_simulate(args, man: RunManifest) -> None:
    from .core import save_dataset
    from .predictor import save_histories
    from .simulator import SimParams, calibration_report, default_params, simulate_experiment

    if args.params:
        params = SimParams.load(man.add_input(args.params))
        man.configs["params"] = args.params
    else:
        params = default_params()
        man.configs["params"] = None
        man.notes.append("built-in calibrated simulator defaults (data/sim_params.json)")
    overrides = {"seed": args.seed}
    if args.users is not None:
        overrides["n_users"] = args.users
    params = params.replace(**overrides)
    man.seeds["seed"] = args.seed
    out = _out_dir(args.out)
    pop, ds = simulate_experiment(params, tuple(args.proportions))
    save_histories(pop.history_table(), man.add_output(out / "population.csv"))
    save_dataset(ds, man.add_output(out / "experiment.csv"))
    params.save(man.add_output(out / "params.json"))
    if all((ds.treatment == a).any() for a in (0, 4)):
        _write_json(man.add_output(out / "calibration_report.json"), calibration_report(ds))
    else:
        man.notes.append("calibration report skipped: CG or TG4 has no users")


def cmd_train_predictor(args, man: RunManifest) -> None:
    from .baselearn import BaseLearnerConfig
    from .predictor import DEFAULT_CLASSIFIER_CONFIG, AmountBinning, load_histories, train_deposit_model

    table = load_histories(man.add_input(args.data))
    binning = AmountBinning.load(man.add_input(args.binning)) if args.binning else AmountBinning()
    man.configs["binning"] = args.binning
    if args.config:
        cfg = BaseLearnerConfig.from_dict(json.loads(man.add_input(args.config).read_text()))
        man.configs["config"] = args.config
    else:
        cfg = DEFAULT_CLASSIFIER_CONFIG
    cfg = cfg.with_(loss="focal" if args.loss == "focal" else "softmax_ce")
    if args.focal_gamma is not None:
        cfg = cfg.with_(focal_gamma=args.focal_gamma)
    man.seeds["seed"] = args.seed
    baselines = tuple(dict.fromkeys(args.baseline or ["heuristic"]))
    model, report = train_deposit_model(table, cfg, binning, seed=args.seed,
                                        validation_fraction=args.validation_fraction, baselines=baselines)
    out = _out_dir(args.out)
    model.save(man.add_output(out / "model.json"))
    _write_json(man.add_output(out / "report.json"), report)


def _load_uplift_config(args, man):
    from .baselearn import BaseLearnerConfig
    from .uplift import DEFAULT_CONFIG, TG_NAMES

    kind = args.learner.upper() if args.learner else None
    if not args.config:
        if args.mode == "local":
            raise UsageError("--mode local needs --config with per-TG winners")
        return kind or "T", DEFAULT_CONFIG
    man.configs["config"] = args.config
    doc = json.loads(man.add_input(args.config).read_text())
    if args.mode == "local":
        local = doc.get("local", doc)
        try:
            kinds = {tg: local[tg]["learner"] for tg in TG_NAMES}
            cfgs = {tg: BaseLearnerConfig.from_dict(local[tg]["config"]) for tg in TG_NAMES}
        except (KeyError, TypeError):
            raise UsageError("local config needs TG1..TG4 entries with 'learner' and 'config'") from None
        if kind:
            kinds = {tg: kind for tg in TG_NAMES}
        return kinds, cfgs
    if "global" in doc:
        g = doc["global"]
        return kind or g["learner"], BaseLearnerConfig.from_dict(g["config"])
    return kind or "T", BaseLearnerConfig.from_dict(doc)


def cmd_uplift(args, man: RunManifest) -> None:
    from .core import load_dataset, save_dataset, split
    from .uplift import (
        assign_policy,
        cross_fit_cate,
        fit_meta,
        noise_margin,
        percent_treated,
        predict_cate,
        save_cate,
        save_configs,
        save_policy,
    )

    ds = load_dataset(man.add_input(args.data))
    kind, cfgs = _load_uplift_config(args, man)
    man.seeds["seed"] = args.seed
    train, test = split(ds, args.test_fraction, args.seed)
    model = fit_meta(kind, train, cfgs, propensity=args.propensity, seed=args.seed)
    margin = args.margin
    if margin == "auto":
        margin = noise_margin(kind, train, cfgs, z=args.margin_z, propensity=args.propensity, seed=args.seed)
        man.notes.append(f"margin auto: {margin!r} ({args.margin_z} x split-half CATE noise sd)")
    if args.cross_fit:
        train_cate = cross_fit_cate(kind, train, cfgs, folds=args.cross_fit, propensity=args.propensity,
                                    seed=args.seed)
        man.notes.append(f"train CATE is out-of-fold ({args.cross_fit} folds)")
    else:
        train_cate = model.train_cate
    out = _out_dir(args.out)
    shares = {}
    for name, part, cate in (("train", train, train_cate), ("test", test, predict_cate(model, test.X))):
        save_dataset(part, man.add_output(out / f"{name}.csv"))
        save_cate(part.user_ids, cate, man.add_output(out / f"cate_{name}.csv"))
        policy = assign_policy(cate, margin=margin, user_ids=part.user_ids)
        save_policy(policy, man.add_output(out / f"policy_{name}.csv"))
        shares[name] = percent_treated(policy)
    save_configs(model.kinds, model.configs, man.add_output(out / "configs.json"))
    _write_json(man.add_output(out / "percent_treated.json"), shares)


def cmd_evaluate(args, man: RunManifest) -> None:
    from .core import load_dataset
    from .eval import align_policy, evaluate, plot_curves, plot_erupt, save_curve
    from .uplift import load_cate, load_policy

    ds = load_dataset(man.add_input(args.data))
    policy = align_policy(load_policy(man.add_input(args.policy)), ds)
    cate = None
    if args.cate:
        ids, mat = load_cate(man.add_input(args.cate))
        pos = {u: i for i, u in enumerate(ids)}
        try:
            cate = mat[[pos[u] for u in ds.user_ids]]
        except KeyError as exc:
            from .errors import UncoveredUser

            raise UncoveredUser(f"CATE file has no row for user {exc.args[0]}") from None
    man.seeds["seed"] = args.seed
    props = tuple(args.propensities)
    report = evaluate(ds, policy, cate, props, n_resamples=args.bootstrap, seed=args.seed)
    out = _out_dir(args.out)
    report.save(man.add_output(out / "report.json"), include_samples=args.samples)
    for name, curve in report.curves.items():
        save_curve(curve, man.add_output(out / f"curve_{name}.csv"))
    if args.plots:
        plot_erupt(report, man.add_output(out / "erupt.svg"))
        if report.curves:
            plot_curves(report.curves, man.add_output(out / "uplift_curves.svg"))


def cmd_search(args, man: RunManifest) -> None:
    from .core import load_dataset
    from .search import SearchSpace, run_search, save_winners

    train = load_dataset(man.add_input(args.train))
    test = load_dataset(man.add_input(args.test))
    if args.space:
        space = SearchSpace.from_dict(json.loads(man.add_input(args.space).read_text()))
        man.configs["space"] = args.space
    else:
        space = SearchSpace()
    man.seeds["seed"] = args.seed
    out = _out_dir(args.out)
    result = run_search(train, test, space, args.trials, seed=args.seed, jobs=_jobs(args),
                        log_path=man.add_output(out / "trials.jsonl"))
    save_winners(result, man.add_output(out / "winners.json"), args.mode)


def cmd_calibrate(args, man: RunManifest) -> None:
    from .simulator import SimParams, calibrate, default_params

    params = SimParams.load(man.add_input(args.params)) if args.params else default_params()
    man.configs["params"] = args.params
    man.seeds["seed"] = args.seed
    tuned, report = calibrate(params.replace(seed=args.seed), n_users=args.users)
    out = _out_dir(args.out)
    tuned.save(man.add_output(out / "params.json"))
    _write_json(man.add_output(out / "calibration_report.json"), report)


# -- parser ----------------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _margin(s):
    if s == "auto":
        return s
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number or 'auto'") from None


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="uplift-lab", description="Upsell intensity uplift modelling toolkit.")
    ap.add_argument("--version", action="version", version=f"uplift-lab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a population and a grid experiment")
    p.add_argument("--params", help="SimParams JSON (default: built-in calibrated params)")
    p.add_argument("--users", type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--proportions", type=float, nargs=5, default=[0.2] * 5, metavar="P")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-predictor", help="fit the deposit-amount classifier")
    p.add_argument("--data", required=True, help="history CSV (as written by simulate)")
    p.add_argument("--binning", help="binning JSON with an 'edges' list")
    p.add_argument("--loss", choices=("ce", "focal"), default="focal")
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--config", help="BaseLearnerConfig JSON")
    p.add_argument("--baseline", action="append", choices=("heuristic", "regressor"))
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("uplift", help="fit a meta-learner and assign the CATE policy")
    p.add_argument("--data", required=True, help="experiment CSV")
    p.add_argument("--learner", choices=("s", "t", "x", "r", "S", "T", "X", "R"))
    p.add_argument("--config", help="BaseLearnerConfig JSON or a winners file from search")
    p.add_argument("--mode", choices=("global", "local"), default="global")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--propensity", type=float, default=0.5)
    p.add_argument("--margin", type=_margin, default=0.0,
                   help="treat only when the best uplift exceeds this; 'auto' estimates it from CATE noise")
    p.add_argument("--margin-z", type=float, default=3.0, help="noise multiplier for --margin auto")
    p.add_argument("--cross-fit", type=int, default=0, metavar="K",
                   help="score training users with K-fold out-of-fold CATE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_uplift)

    p = sub.add_parser("evaluate", help="ERUPT, AUUC and guardrails for a policy")
    p.add_argument("--data", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--cate", help="CATE CSV for uplift curves")
    p.add_argument("--bootstrap", type=int, default=5000)
    p.add_argument("--propensities", type=float, nargs=5, default=[0.2] * 5, metavar="P")
    p.add_argument("--samples", action="store_true", help="include bootstrap samples in the report")
    p.add_argument("--plots", action="store_true", help="write SVG plots (needs matplotlib)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", help="random hyperparameter search")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--mode", choices=("global", "local"), default="global")
    p.add_argument("--space", help="SearchSpace JSON")
    p.add_argument("--jobs", type=_positive_int, help="worker processes (env UPLIFT_LAB_JOBS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("calibrate", help="fit the simulator's intensity coefficients to the targets")
    p.add_argument("--params")
    p.add_argument("--users", type=_positive_int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)
    return ap


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .errors import ValidationError

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        man = RunManifest(args.command, argv)
        args.func(args, man)
        man.write(Path(args.out))
    except UsageError as exc:
        return _fail(EXIT_VALIDATION, "UsageError", str(exc))
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, type(exc).__name__, str(exc))
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, type(exc).__name__, str(exc))
    except Exception as exc:  # pragma: no cover - safety net
        traceback.print_exc(file=sys.stderr)
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
