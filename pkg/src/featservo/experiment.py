"""End-to-end pipeline pieces shared by the CLI and the acceptance tests.

Every step is a function of the config and its inputs; randomness comes from
named sub-streams of the master seed (see :func:`config.stream_seed`).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, dynamics, fqi, sim
from . import policy as pol
from .config import ExperimentConfig, config_to_dict, episode_seeds, stream_seed
from .container import read_container, write_container
from .featurize import Standardizer, fit_standardizer, n_feature_channels, raw_features

log = logging.getLogger(__name__)

SPLITS = ("train", "novel")


# --- dataset ----------------------------------------------------------------------------


@dataclass
class Dataset:
    frames: np.ndarray  # (n_traj, T + 1, 3, R, R)
    actions: np.ndarray  # (n_traj, T, J)
    header: dict

    @property
    def n_triplets(self) -> int:
        return int(self.actions.shape[0] * self.actions.shape[1])


def generate_data(cfg: ExperimentConfig) -> Dataset:
    seed = stream_seed(cfg.seed, "data")
    frames, actions = sim.generate_dataset(cfg.data.trajectories, cfg.data.horizon, seed, cfg.env, cfg.data.noise)
    actions = actions.astype(np.float32)
    header = {
        "kind": "dataset",
        "featurizer": cfg.featurizer,
        "master_seed": cfg.seed,
        "data_seed": seed,
        "trajectories": cfg.data.trajectories,
        "horizon": cfg.data.horizon,
        "noise": cfg.data.noise,
        "resolution": cfg.env.resolution,
    }
    return Dataset(frames, actions, header)


def save_dataset(ds: Dataset, path) -> None:
    write_container(path, ds.header, {"frames": ds.frames, "actions": ds.actions})


def load_dataset(path) -> Dataset:
    header, t = read_container(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset container")
    return Dataset(t["frames"], t["actions"], header)


def feature_triplets(ds: Dataset, featurizer: str):
    """Standardized ``(y_t, u, y_next)`` arrays and the fitted standardizer."""
    n, T1 = ds.frames.shape[:2]
    R = ds.frames.shape[-1]
    C = n_feature_channels(featurizer)
    raw = np.empty((n, T1, C, R, R), dtype=np.float32)
    for i in range(n):
        raw[i] = raw_features(ds.frames[i], featurizer)
    std = fit_standardizer(raw.reshape(-1, C, R, R))
    y = (raw - std.mean.astype(np.float32)[:, None, None]) / std.std.astype(np.float32)[:, None, None]
    yt = y[:, :-1].reshape(-1, C, R, R)
    yn = y[:, 1:].reshape(-1, C, R, R)
    u = np.asarray(ds.actions, dtype=np.float64).reshape(-1, ds.actions.shape[-1])
    return yt, u, yn, std


# --- dynamics model ---------------------------------------------------------------------


@dataclass
class TrainedModel:
    model: dynamics.BilinearModel
    standardizer: Standardizer
    featurizer: str
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def train_model(cfg: ExperimentConfig, ds: Dataset) -> TrainedModel:
    yt, u, yn, std = feature_triplets(ds, cfg.featurizer)
    model, losses = dynamics.train_dynamics(
        yt, u, yn, cfg.depth, cfg.variant, cfg.n_f, cfg.train, stream_seed(cfg.seed, "dynamics")
    )
    return TrainedModel(model, std, cfg.featurizer, losses)


def save_model(tm: TrainedModel, path) -> None:
    m = tm.model
    header = {
        "kind": "dynamics",
        "variant": m.variant,
        "n_f": m.n_f,
        "levels": m.n_levels,
        "featurizer": tm.featurizer,
        "standardizer": tm.standardizer.to_dict(),
    }
    tensors = {}
    for l, (W, B) in enumerate(zip(m.weights, m.biases)):
        tensors[f"W{l}"] = W
        tensors[f"B{l}"] = B
    write_container(path, header, tensors)


def load_model(path) -> TrainedModel:
    header, t = read_container(path)
    if header.get("kind") != "dynamics":
        raise ValueError(f"{path} is not a dynamics container")
    L = header["levels"]
    Ws = tuple(t[f"W{l}"].astype(np.float64) for l in range(L))
    Bs = tuple(t[f"B{l}"].astype(np.float64) for l in range(L))
    model = dynamics.BilinearModel(header["variant"], Ws, Bs, header["n_f"])
    return TrainedModel(model, Standardizer.from_dict(header["standardizer"]), header["featurizer"])


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --- policies -----------------------------------------------------------------------------


def n_weights(tm: TrainedModel) -> tuple[int, int]:
    return tm.model.n_channels * tm.model.n_levels, tm.model.n_controls


def uniform_weights(tm: TrainedModel) -> pol.PolicyWeights:
    F, J = n_weights(tm)
    return pol.PolicyWeights.uniform(F, J)


def validation_seeds(cfg: ExperimentConfig) -> list[int]:
    return episode_seeds(cfg.seed, "validation", cfg.evaluation.validation_trajectories)


def test_seeds(cfg: ExperimentConfig) -> list[int]:
    return episode_seeds(cfg.seed, "evaluation", cfg.evaluation.test_trajectories)


def run_fqi(cfg: ExperimentConfig, tm: TrainedModel) -> fqi.FqiResult:
    env = sim.FollowEnv(cfg.env)
    return fqi.fqi_run(
        env,
        tm.model,
        uniform_weights(tm),
        tm.featurizer,
        tm.standardizer,
        cfg.fqi,
        stream_seed(cfg.seed, "fqi-sampling"),
        validation_seeds(cfg),
    )


def run_cem_unweighted(cfg: ExperimentConfig, tm: TrainedModel):
    """CEM over the control penalties with every feature weight held at 1."""
    F, J = n_weights(tm)
    env = sim.FollowEnv(cfg.env)
    n_roll = cfg.evaluation.cem_rollouts
    seed_rng = np.random.default_rng(stream_seed(cfg.seed, "cem-rollouts"))
    iter_seeds = [[int(s) for s in seed_rng.integers(0, 2**31 - 1, size=n_roll)] for _ in range(cfg.evaluation.cem_iterations)]

    def evaluate(lam, it):
        w = pol.PolicyWeights(np.ones(F), lam)
        costs = fqi.evaluate_weights(env, tm.model, w, tm.featurizer, tm.standardizer, iter_seeds[it])
        return float(costs.mean())

    res = baselines.cem_optimize(evaluate, J, cfg.evaluation.cem_iterations, stream_seed(cfg.seed, "cem"))
    return pol.PolicyWeights(np.ones(F), res.mean), res


# --- evaluation -------------------------------------------------------------------------


@dataclass
class ResultRow:
    method: str
    tag: str
    split: str
    training_trajectories: int
    mean_cost: float
    standard_error: float
    n: int
    parameters: str = ""

    @classmethod
    def from_costs(cls, method, tag, split, n_train, costs, parameters="") -> "ResultRow":
        costs = np.asarray(costs, dtype=np.float64)
        n = len(costs)
        se = float(costs.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(method, tag, split, int(n_train), float(costs.mean()), se, n, parameters)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


FIELDS = ("method", "tag", "split", "training_trajectories", "mean_cost", "standard_error", "n", "parameters")


def evaluate_policy(env: sim.FollowEnv, make_policy, seeds, split: str):
    """Run one fresh policy per seed; returns per-episode records."""
    records = []
    for s in seeds:
        traj, total = sim.rollout(make_policy(), env, int(s), split)
        records.append({"seed": int(s), "split": split, "total_cost": total, "length": len(traj), "reason": traj.reason})
    return records


def servo_factory(tm: TrainedModel, weights: pol.PolicyWeights):
    return lambda: pol.ServoPolicy(tm.model, weights, tm.featurizer, tm.standardizer)


BASELINE_FAMILIES = {
    "ibvs": lambda g: baselines.IbvsPolicy(g),
    "ibvs-next-frame": lambda g: baselines.IbvsPolicy(g, next_frame=True),
    "pbvs": lambda g: baselines.PbvsPolicy(g),
    "pbvs-next-frame": lambda g: baselines.PbvsPolicy(g, next_frame=True),
    "pbvs-translation": lambda g: baselines.PbvsPolicy(g, ignore_rotation=True),
    "pbvs-translation-next-frame": lambda g: baselines.PbvsPolicy(g, next_frame=True, ignore_rotation=True),
}


def tune_gain(cfg: ExperimentConfig, family: str):
    env = sim.FollowEnv(cfg.env)
    seeds = validation_seeds(cfg)
    make = BASELINE_FAMILIES[family]

    def evaluate(g):
        recs = evaluate_policy(env, lambda: make(g), seeds, "train")
        return float(np.mean([r["total_cost"] for r in recs]))

    gains = cfg.evaluation.gains or baselines.GAIN_GRID
    return baselines.gain_sweep(evaluate, gains)


# --- report -------------------------------------------------------------------------------


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = r.to_dict()
        d["mean_cost"] = repr(r.mean_cost)
        d["standard_error"] = repr(r.standard_error)
        w.writerow(d)
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ResultRow]:
    out = []
    for d in csv.DictReader(io.StringIO(text)):
        out.append(
            ResultRow(
                d["method"],
                d["tag"],
                d["split"],
                int(d["training_trajectories"]),
                float(d["mean_cost"]),
                float(d["standard_error"]),
                int(d["n"]),
                d["parameters"],
            )
        )
    return out


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def acceptance_checks(rows: list[ResultRow], fqi_ratio: float = 0.8, oracle_ratio: float = 0.1) -> list[Check]:
    """Embedded acceptance checks of a comparison table."""
    by = {(r.method, r.split): r for r in rows}
    checks = []
    for split in SPLITS:
        a, b = by.get(("fqi", split)), by.get(("unweighted-cem", split))
        if a and b:
            ok = a.mean_cost <= fqi_ratio * b.mean_cost
            checks.append(Check(f"fqi-vs-unweighted-{split}", ok, f"{a.mean_cost:.4f} vs {fqi_ratio} x {b.mean_cost:.4f}"))
    a, b = by.get(("pbvs-next-frame", "train")), by.get(("pbvs", "train"))
    if a and b:
        ok = a.mean_cost <= oracle_ratio * b.mean_cost
        checks.append(Check("pbvs-next-frame-vs-pbvs", ok, f"{a.mean_cost:.4g} vs {oracle_ratio} x {b.mean_cost:.4g}"))
    return checks


@contextmanager
def _timed(timings: dict | None, stage: str):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    log.info("%s took %.1f s", stage, elapsed)
    if timings is not None:
        timings[stage] = timings.get(stage, 0.0) + elapsed


def compare(cfg: ExperimentConfig, out_dir, plot: bool = True, timings: dict | None = None):
    """Build every artefact, evaluate all methods and write the result table.

    Returns ``(rows, checks)``. Files written to ``out_dir``: dataset and
    model containers, training/FQI/CEM logs, per-episode costs, and
    ``results.csv``/``results.json`` (plus ``results.png`` when ``plot``).
    Wall-clock seconds per stage are added to ``timings`` when given; they
    are never written to the output files, which stay byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _timed(timings, "data"):
        ds = generate_data(cfg)
        save_dataset(ds, out / "dataset.fsc")
    with _timed(timings, "dynamics"):
        tm = train_model(cfg, ds)
        save_model(tm, out / "model.fsc")
        write_jsonl(out / "dynamics_loss.jsonl", ({"iteration": i, "loss": float(v)} for i, v in enumerate(tm.losses)))

    with _timed(timings, "fqi"):
        fq = run_fqi(cfg, tm)
        write_jsonl(out / "fqi_log.jsonl", fq.history)
        (out / "fqi_weights.json").write_text(json.dumps(fq.to_dict(), sort_keys=True, indent=1))
    with _timed(timings, "cem"):
        unweighted, cem = run_cem_unweighted(cfg, tm)
        (out / "cem.json").write_text(json.dumps({"weights": unweighted.to_dict(), "history": cem.history}, sort_keys=True, indent=1))

    env = sim.FollowEnv(cfg.env)
    seeds = test_seeds(cfg)
    rows, episodes = [], []
    n_cem = cfg.evaluation.cem_iterations * 3 * tm.model.n_controls * cfg.evaluation.cem_rollouts
    learned = [
        ("fqi", fq.weights, fq.n_training_trajectories),
        ("unweighted-cem", unweighted, n_cem),
    ]
    for split in SPLITS:
        for name, weights, n_train in learned:
            with _timed(timings, f"test-{name}"):
                recs = evaluate_policy(env, servo_factory(tm, weights), seeds, split)
            episodes.extend(dict(r, method=name) for r in recs)
            rows.append(
                ResultRow.from_costs(
                    name, f"{tm.featurizer}/{tm.model.variant}", split, n_train, [r["total_cost"] for r in recs],
                    json.dumps(weights.to_dict(), sort_keys=True),
                )
            )
    for family in BASELINE_FAMILIES:
        with _timed(timings, family):
            gain, _ = tune_gain(cfg, family)
            for split in SPLITS:
                recs = evaluate_policy(env, lambda: BASELINE_FAMILIES[family](gain), seeds, split)
                episodes.extend(dict(r, method=family) for r in recs)
                rows.append(ResultRow.from_costs(family, "ground-truth", split, 0, [r["total_cost"] for r in recs], f"gain={gain:g}"))

    write_jsonl(out / "episodes.jsonl", episodes)
    (out / "results.csv").write_text(rows_to_csv(rows))
    checks = acceptance_checks(rows)
    report = {
        "config": config_to_dict(cfg),
        "rows": [r.to_dict() for r in rows],
        "checks": [c.__dict__ for c in checks],
    }
    (out / "results.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    if plot:
        from .plotting import plot_results

        plot_results(rows, tm.losses, out / "results.png")
    return rows, checks
