"""Command-line front-end.

Exit codes: 0 success, 1 usage or configuration error, 2 an embedded
acceptance check failed, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as E
from . import policy as pol
from . import sim
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK, EXIT_USAGE, EXIT_ACCEPTANCE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("featservo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="store_true")


POLICIES = ("fqi", "unweighted-cem", "uniform", *E.BASELINE_FAMILIES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featservo", description="Learned visual servoing with weighted feature dynamics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("generate-data", help="roll the hand-coded policy and write a dataset container")
    _common(p)
    p = sub.add_parser("train-dynamics", help="fit the bilinear feature dynamics")
    _common(p)
    p.add_argument("--dataset", type=Path, help="dataset container (default: OUT/dataset.fsc)")
    p = sub.add_parser("train-fqi", help="learn servoing weights with fitted Q-iteration")
    _common(p)
    p.add_argument("--model", type=Path, help="model container (default: OUT/model.fsc)")
    p = sub.add_parser("evaluate", help="evaluate one policy on the fixed test seeds")
    _common(p)
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--split", choices=E.SPLITS, default="train")
    p.add_argument("--n", type=int, help="number of test trajectories (default from config)")
    p.add_argument("--gain", type=float, help="baseline gain (default: tuned on the validation seeds)")
    p.add_argument("--model", type=Path, help="model container (default: OUT/model.fsc)")
    p.add_argument("--weights", type=Path, help="weights JSON (default: OUT/fqi_weights.json or OUT/cem.json)")
    p = sub.add_parser("compare", help="run the full pipeline and write the result table")
    _common(p)
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def cmd_generate_data(cfg, args) -> int:
    ds = E.generate_data(cfg)
    path = args.out / "dataset.fsc"
    E.save_dataset(ds, path)
    print(f"wrote {path}: {ds.n_triplets} triplets (seed {cfg.seed}, data seed {ds.header['data_seed']})")
    return EXIT_OK


def cmd_train_dynamics(cfg, args) -> int:
    ds = E.load_dataset(_need(args.dataset or args.out / "dataset.fsc", "dataset"))
    if ds.header.get("featurizer", cfg.featurizer) != cfg.featurizer:
        raise ValueError(f"dataset was generated for featurizer {ds.header['featurizer']!r}, config uses {cfg.featurizer!r}")
    tm = E.train_model(cfg, ds)
    E.save_model(tm, args.out / "model.fsc")
    E.write_jsonl(args.out / "dynamics_loss.jsonl", ({"iteration": i, "loss": float(v)} for i, v in enumerate(tm.losses)))
    tail = float(np.mean(tm.losses[-100:])) if len(tm.losses) else float("nan")
    print(f"wrote {args.out / 'model.fsc'}: {len(tm.losses)} iterations, final loss {tm.losses[-1]:.6g} (last-100 mean {tail:.6g})")
    return EXIT_OK


def _load_model(args):
    tm = E.load_model(_need(args.model or args.out / "model.fsc", "model"))
    return tm


def cmd_train_fqi(cfg, args) -> int:
    tm = _load_model(args)
    if tm.featurizer != cfg.featurizer:
        raise ValueError(f"model uses featurizer {tm.featurizer!r}, config uses {cfg.featurizer!r}")
    res = E.run_fqi(cfg, tm)
    E.write_jsonl(args.out / "fqi_log.jsonl", res.history)
    (args.out / "fqi_weights.json").write_text(json.dumps(res.to_dict(), sort_keys=True, indent=1))
    for v in res.validation:
        print(f"validation {v['candidate']}: mean cost {v['mean_cost']:.6g}")
    print(f"wrote {args.out / 'fqi_weights.json'}: {len(res.history)} iterations, {res.n_training_trajectories} training trajectories")
    return EXIT_OK


def _weights_from(path: Path) -> pol.PolicyWeights:
    data = json.loads(path.read_text())
    return pol.PolicyWeights.from_dict(data["weights"] if "weights" in data else data)


def cmd_evaluate(cfg, args) -> int:
    if args.n is not None:
        if args.n < 1:
            raise UsageError("--n must be positive")
        cfg = dataclasses.replace(cfg, evaluation=dataclasses.replace(cfg.evaluation, test_trajectories=args.n))
    env = sim.FollowEnv(cfg.env)
    seeds = E.test_seeds(cfg)
    name = args.policy
    if name in E.BASELINE_FAMILIES:
        gain = args.gain if args.gain is not None else E.tune_gain(cfg, name)[0]
        make = lambda: E.BASELINE_FAMILIES[name](gain)  # noqa: E731
        tag, n_train, params = "ground-truth", 0, f"gain={gain:g}"
    else:
        tm = _load_model(args)
        if name == "uniform":
            weights = E.uniform_weights(tm)
        else:
            default = args.out / ("fqi_weights.json" if name == "fqi" else "cem.json")
            weights = _weights_from(_need(args.weights or default, f"{name} weights"))
        make = E.servo_factory(tm, weights)
        tag, n_train, params = f"{tm.featurizer}/{tm.model.variant}", 0, json.dumps(weights.to_dict(), sort_keys=True)
    recs = E.evaluate_policy(env, make, seeds, args.split)
    row = E.ResultRow.from_costs(name, tag, args.split, n_train, [r["total_cost"] for r in recs], params)
    stem = args.out / f"evaluate-{name}-{args.split}"
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.csv").write_text(E.rows_to_csv([row]))
    Path(f"{stem}.json").write_text(json.dumps({"row": row.to_dict(), "episodes": recs}, sort_keys=True, indent=1))
    print(f"{name} [{args.split}]: mean cost {row.mean_cost:.6g} +/- {row.standard_error:.3g} (n={row.n})")
    return EXIT_OK


def cmd_compare(cfg, args) -> int:
    rows, checks = E.compare(cfg, args.out, plot=not args.no_plot)
    width = max(len(r.method) for r in rows)
    for r in rows:
        print(f"{r.method:<{width}}  {r.split:<5}  {r.mean_cost:12.6g} +/- {r.standard_error:.3g}  (n={r.n})")
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-dynamics": cmd_train_dynamics,
    "train-fqi": cmd_train_fqi,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"featservo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"featservo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported with a runtime exit code
        log.debug("failure", exc_info=True)
        print(f"featservo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
