"""Experiment harness and command-line interface.

Every verb is a function of a RunConfig, the files written by earlier verbs
and a seed.  Reports are written as text and CSV whose bytes depend only on
those inputs; wall-clock timings go to a separate ``timings/`` directory.

Output layout under ``--out``::

    run_config.json
    fleet/manifest.json, fleet/<vehicle>.jsonl
    encoder/<variant>.params.json, <variant>.meta.json, <variant>_log.csv
    index/<variant>.json
    neighbors/<config>.json
    adapt/<config>_seed<s>.params.json, .meta.json, .report.json
    eval/table.txt, table.csv, report.json
    ablate/table.txt, table.csv, report.json
    report.txt
    timings/<verb>.json
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import adaptation as A
from . import encoder as E
from . import fleet_sim as fs
from . import kinodyn as K
from . import nn
from .neighbors import NEIGHBORS, LatentIndex, NeighborSet, OutOfDistributionError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_OOD = 0, 2, 3
ENCODER_VARIANTS = ("conditional", "simple")
INDEX_VARIANTS = ("conditional", "unconditional", "simple")


class ValidationError(ValueError):
    """Malformed RunConfig, missing upstream artifact or corrupt manifest."""


class ManifestError(ValidationError):
    """Fleet files disagree with their manifest."""


def derive_seed(base: int, *tags) -> int:
    """Stable 32-bit seed for a named stream of a run."""
    keys = [int(base)] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(keys).generate_state(1, dtype=np.uint32)[0])


# -- run configuration ------------------------------------------------------

@dataclass
class FleetSpec:
    configs: list[list[float]] = field(default_factory=lambda: [c.as_array().tolist() for c in fs.default_fleet()])
    trajectories_per_vehicle: int = 100
    H: int = 100
    dt: float = 0.05
    seed: int = 0


@dataclass
class RunConfig:
    """Everything an experiment depends on besides code version and seed."""

    name: str = "desk"
    fleet: FleetSpec = field(default_factory=FleetSpec)
    encoder: E.EncoderHyper = field(default_factory=lambda: E.EncoderHyper(lr=1e-3, max_iters=400, eval_every=50,
                                                                           patience=10))
    kino: K.KinoHyper = field(default_factory=K.KinoHyper)
    budget: int = 400
    n_new_trajectories: int = 3
    n_constraint_trajectories: int = 3
    n_full_trajectories: int = 100
    n_test_trajectories: int = 50
    new_configs: list[list[float]] = field(default_factory=lambda: [[3.0, 0.75, 1.6], [0.6, 0.7, 0.8],
                                                                    [0.6, 0.75, 1.2]])
    ablation_configs: list[list[float]] = field(default_factory=lambda: [[0.6, 0.7, 0.8]])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.fleet, Mapping):
            self.fleet = FleetSpec(**self.fleet)
        if isinstance(self.encoder, Mapping):
            self.encoder = E.EncoderHyper(**self.encoder)
        if isinstance(self.kino, Mapping):
            self.kino = K.KinoHyper(**self.kino)
        self.validate()

    def validate(self) -> None:
        f = self.fleet
        if len(f.configs) < 2:
            raise ValidationError("the fleet needs at least two vehicles")
        if f.trajectories_per_vehicle < 2 or f.H < max(self.kino.T_pred, self.encoder.window_L) or f.dt <= 0:
            raise ValidationError("fleet trajectories too few or too short for the model horizons")
        for c in f.configs:
            fs.VehicleConfig.from_values(c)  # raises on out-of-range fleet members
        if min(self.budget, self.n_new_trajectories, self.n_constraint_trajectories, self.n_full_trajectories,
               self.n_test_trajectories) < 1:
            raise ValidationError("budget and trajectory counts must be positive")
        if len(self.seeds) < 1 or len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be a non-empty list of distinct integers")
        for c in self.new_configs + self.ablation_configs:
            if len(c) != 3:
                raise ValidationError(f"configuration {c} must have three values")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown RunConfig fields: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"invalid RunConfig: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: not valid JSON ({e})") from e

    def fleet_configs(self) -> list[fs.VehicleConfig]:
        return [fs.VehicleConfig.from_values(c) for c in self.fleet.configs]

    @staticmethod
    def vehicle(values: Sequence[float]) -> fs.VehicleConfig:
        return fs.VehicleConfig.from_values(values, allow_out_of_range=True)


def preset(name: str) -> RunConfig:
    """``desk``: the default single-core scale.  ``small``: a seconds-long smoke run."""
    if name == "desk":
        return RunConfig()
    if name == "small":
        return RunConfig(
            name="small",
            fleet=FleetSpec(trajectories_per_vehicle=6, H=40),
            encoder=E.EncoderHyper(n_blocks=2, d=8, n_heads=2, window_L=16, window_stride=8, batch=16, lr=3e-3,
                                   max_iters=20, eval_every=10, patience=2, val_fraction=0.2),
            kino=K.KinoHyper(state_widths=(4, 8), action_widths=(4, 8), head_widths=(8, 8), T_pred=8, steps=30,
                             batch=16, refresh_every=10),
            budget=40, n_full_trajectories=6, n_test_trajectories=4,
            new_configs=[[3.0, 0.75, 1.6], [0.6, 0.7, 0.8]],
        )
    raise ValidationError(f"unknown preset {name!r}; choose desk or small")


# -- file helpers -----------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_timing(out: Path, verb: str, seconds: Mapping[str, float]) -> None:
    _write_json(out / "timings" / f"{verb}.json", {k: round(float(v), 3) for k, v in seconds.items()})


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {path}; run `{producer}` first")
    return path


# -- gen-fleet --------------------------------------------------------------

def trajectory_to_json(tr: fs.Trajectory, index: int, seed: int) -> str:
    return json.dumps({"vehicle_id": tr.vehicle_id, "index": index, "seed": seed, "dt": tr.dt,
                       "s_cur": tr.s_cur.tolist(), "u": tr.u.tolist(), "s_next": tr.s_next.tolist()})


def trajectory_from_json(line: str) -> fs.Trajectory:
    d = json.loads(line)
    return fs.Trajectory(d["vehicle_id"], float(d["dt"]), np.array(d["s_cur"], float), np.array(d["u"], float),
                         np.array(d["s_next"], float))


def cmd_gen_fleet(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    fleet_dir = out / "fleet"
    if fleet_dir.exists() and any(fleet_dir.iterdir()) and not force:
        raise ValidationError(f"{fleet_dir} is not empty; pass --force to overwrite")
    f = cfg.fleet
    configs = cfg.fleet_configs()
    data = fs.generate_fleet(configs, f.trajectories_per_vehicle, f.seed, f.H, f.dt)
    fleet_dir.mkdir(parents=True, exist_ok=True)
    vehicles = {}
    for c in configs:
        path = fleet_dir / f"{c.id}.jsonl"
        lines = [trajectory_to_json(tr, j, fs.trajectory_seed(f.seed, c.id, j)) for j, tr in enumerate(data[c.id])]
        path.write_text("\n".join(lines) + "\n")
        vehicles[c.id] = {"config": c.as_array().tolist(), "file": path.name, "trajectories": len(lines),
                          "sha256": _sha256(path)}
    manifest = {"format": 1, "fleet": asdict(f), "vehicles": vehicles}
    _write_json(fleet_dir / "manifest.json", manifest)
    _write(out / "run_config.json", cfg.to_json())
    return manifest


def load_fleet(out: Path) -> tuple[dict[str, fs.VehicleConfig], dict[str, list[fs.Trajectory]]]:
    """Fleet configs and trajectories, validated against the manifest."""
    fleet_dir = out / "fleet"
    mpath = _require(fleet_dir / "manifest.json", "gen-fleet")
    try:
        manifest = json.loads(mpath.read_text())
        vehicles = manifest["vehicles"]
        if manifest.get("format") != 1 or not isinstance(vehicles, dict) or len(vehicles) < 2:
            raise KeyError("format/vehicles")
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ManifestError(f"{mpath}: malformed manifest ({e})") from e
    configs, data = {}, {}
    for vid, meta in sorted(vehicles.items()):
        try:
            path = fleet_dir / meta["file"]
            expect_hash, expect_n = meta["sha256"], int(meta["trajectories"])
            cfg = fs.VehicleConfig.from_values(meta["config"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"{mpath}: bad entry for {vid} ({e})") from e
        if cfg.id != vid:
            raise ManifestError(f"{mpath}: vehicle {vid} has configuration id {cfg.id}")
        if not path.exists() or _sha256(path) != expect_hash:
            raise ManifestError(f"{path}: missing or checksum mismatch")
        trajs = [trajectory_from_json(line) for line in path.read_text().splitlines() if line]
        if len(trajs) != expect_n or any(t.vehicle_id != vid for t in trajs):
            raise ManifestError(f"{path}: expected {expect_n} trajectories of {vid}")
        configs[vid], data[vid] = cfg, trajs
    return configs, data


# -- train-encoder / embed ----------------------------------------------------

def cmd_train_encoder(cfg: RunConfig, out: Path, variant: str = "conditional") -> E.EncoderResult:
    if variant not in ENCODER_VARIANTS:
        raise ValidationError(f"encoder variant must be one of {ENCODER_VARIANTS}")
    configs, data = load_fleet(out)
    fleet = E.FleetWindows.from_datasets(data, configs)
    res = E.train_encoder(fleet, cfg.encoder, cfg.seed, conditioning=variant == "conditional", progress=True)
    stem = out / "encoder" / variant
    stem.parent.mkdir(parents=True, exist_ok=True)
    E.save_encoder(stem, res.tree, cfg.encoder, {"best_iter": res.best_iter, "best_separation": res.best_separation,
                                                 "seed": cfg.seed, "val_ids": res.val_ids})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss_u", "loss_c", "separation", "separation_uncond"])
    for r in res.log:
        w.writerow([r.iter, f"{r.loss_u:.6e}", f"{r.loss_c:.6e}", f"{r.separation:.6e}", f"{r.separation_uncond:.6e}"])
    _write(out / "encoder" / f"{variant}_log.csv", buf.getvalue())
    _write_timing(out, f"train-encoder-{variant}", {"seconds": res.seconds})
    return res


def knowledge_base(cfg: RunConfig, out: Path, encoder_variant: str = "conditional") -> A.KnowledgeBase:
    configs, data = load_fleet(out)
    stem = _require(out / "encoder" / f"{encoder_variant}.meta.json", f"train-encoder --variant {encoder_variant}")
    tree, hyper, _ = E.load_encoder(stem.with_name(encoder_variant))
    return A.KnowledgeBase(configs, data, tree, hyper).build_indexes()


def index_for(kb: A.KnowledgeBase, variant: str) -> LatentIndex:
    return kb.index_conditional if variant == "conditional" else kb.index_unconditional


def cmd_embed(cfg: RunConfig, out: Path) -> dict[str, LatentIndex]:
    """Latent indexes (PCA, projected centroids, threshold) for every available encoder."""
    kb = knowledge_base(cfg, out)
    indexes = {"conditional": kb.index_conditional, "unconditional": kb.index_unconditional}
    if (out / "encoder" / "simple.meta.json").exists():
        indexes["simple"] = knowledge_base(cfg, out, "simple").index_unconditional
    for name, index in indexes.items():
        _write_json(out / "index" / f"{name}.json", index.to_dict())
    return indexes


# -- new-vehicle data ---------------------------------------------------------

def new_vehicle_data(cfg: RunConfig, c: fs.VehicleConfig, seed: int) -> list[fs.Trajectory]:
    """The few trajectories available from a new vehicle in run-seed ``seed``."""
    return fs.generate_fleet([c], cfg.n_new_trajectories, derive_seed(cfg.seed, "new", seed), cfg.fleet.H,
                             cfg.fleet.dt)[c.id]


def test_data(cfg: RunConfig, c: fs.VehicleConfig) -> list[fs.Trajectory]:
    """Held-out evaluation trajectories, shared by all seeds and methods."""
    return fs.generate_fleet([c], cfg.n_test_trajectories, derive_seed(cfg.seed, "test"), cfg.fleet.H,
                             cfg.fleet.dt)[c.id]


def full_data(cfg: RunConfig, c: fs.VehicleConfig, seed: int) -> list[fs.Trajectory]:
    return fs.generate_fleet([c], cfg.n_full_trajectories, derive_seed(cfg.seed, "full", seed), cfg.fleet.H,
                             cfg.fleet.dt)[c.id]


def identify(kb: A.KnowledgeBase, index_variant: str, d_new: Sequence[fs.Trajectory],
             c: fs.VehicleConfig) -> NeighborSet:
    if index_variant == "conditional":
        return kb.identify(d_new, c)
    return kb.identify(d_new, None)


def cmd_select_neighbors(cfg: RunConfig, out: Path, configs: Sequence[Sequence[float]] | None = None,
                         index_variant: str = "conditional") -> dict[str, dict[int, NeighborSet]]:
    """Neighbor sets for each new configuration and run seed; raises on any out-of-distribution verdict."""
    kb = knowledge_base(cfg, out, "simple" if index_variant == "simple" else "conditional")
    result, ood = {}, []
    for values in configs or cfg.new_configs:
        c = cfg.vehicle(values)
        per_seed = {s: identify(kb, index_variant, new_vehicle_data(cfg, c, s), c) for s in cfg.seeds}
        result[c.id] = per_seed
        _write_json(out / "neighbors" / f"{c.id}.json",
                    {"config": c.as_array().tolist(), "index": index_variant,
                     "seeds": {str(s): ns.to_dict() for s, ns in per_seed.items()}})
        ood += [(c.id, s, ns) for s, ns in per_seed.items() if ns.verdict != NEIGHBORS]
    if ood:
        cid, s, ns = ood[0]
        raise OutOfDistributionError(ns.distances, ns.epsilon)
    return result


# -- model training helpers -------------------------------------------------

def _windows_digest(w: K.KinoWindows | None) -> str | None:
    if w is None:
        return None
    h = hashlib.sha256()
    for a in (w.s0, w.U, w.Y):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _job_key(job: K.KinoJob) -> tuple:
    return (tuple(_windows_digest(p) for p in job.pools), tuple(float(w) for w in job.weights), job.seed,
            _windows_digest(job.constraint), None if job.counts is None else tuple(int(c) for c in job.counts))


def train_unique(jobs: Mapping[str, K.KinoJob], hyper: K.KinoHyper, dt: float) -> dict[str, K.TrainResult]:
    """Train each distinct job once in a single stacked pass; returns per-name single-model results."""
    unique: dict[tuple, int] = {}
    order: list[K.KinoJob] = []
    slot = {}
    for name, job in jobs.items():
        key = _job_key(job)
        if key not in unique:
            unique[key] = len(order)
            order.append(job)
        slot[name] = unique[key]
    if not order:
        return {}
    log.info("training %d kinodynamics models (%d requested)", len(order), len(jobs))
    res = K.train_kino(order, hyper, dt)
    return {name: K.TrainResult([res.trees[m]], res.loss_trace[m:m + 1], [res.projections[m]],
                                [res.min_constraint_dot[m]]) for name, m in slot.items()}


def neighbor_job(cfg: RunConfig, kb: A.KnowledgeBase, vid: str, seed: int) -> K.KinoJob:
    """From-scratch model of a fleet vehicle on its full dataset (the direct-transfer baseline)."""
    return K.KinoJob([kb.kino_windows(vid, cfg.kino.T_pred)], [1.0], derive_seed(cfg.seed, "neighbor", vid, seed))


def scratch_job(cfg: RunConfig, c: fs.VehicleConfig, seed: int) -> K.KinoJob:
    return K.KinoJob([K.make_windows(full_data(cfg, c, seed), cfg.kino.T_pred)], [1.0],
                     derive_seed(cfg.seed, "scratch", c.id, seed))


def car_seed(cfg: RunConfig, c: fs.VehicleConfig, seed: int) -> int:
    return derive_seed(cfg.seed, "car", c.id, seed)


# -- adapt ------------------------------------------------------------------

def cmd_adapt(cfg: RunConfig, out: Path, values: Sequence[float], seed: int) -> A.AdaptationReport:
    kb = knowledge_base(cfg, out)
    c = cfg.vehicle(values)
    d_new = new_vehicle_data(cfg, c, seed)
    prep = A.plan_adaptation(kb, d_new, c, cfg.kino, car_seed(cfg, c, seed), cfg.budget, cfg.n_constraint_trajectories)
    [(tree, report)], _ = A.run_prepared([prep], cfg.kino, kb.dt)
    score = K.rollout_mse(tree, test_data(cfg, c), cfg.kino.T_pred)
    report.metrics = {"test": score.to_dict()}
    stem = out / "adapt" / f"{c.id}_seed{seed}"
    stem.parent.mkdir(parents=True, exist_ok=True)
    K.save_kino(stem, tree, cfg.kino, kb.dt, {"config": c.as_array().tolist(), "seed": seed})
    body = report.to_dict()
    secs = body.pop("seconds")
    _write_json(nn.sidecar(stem, ".report.json"), body)
    _write_timing(out, f"adapt-{c.id}-seed{seed}", {"seconds": secs})
    return report


# -- eval -------------------------------------------------------------------

@dataclass
class Row:
    """One table row: a method's test MSE per run seed."""

    config: str
    method: str
    models: list[str]
    per_seed: list[float]
    window_std: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def seed_std(self) -> float:
        return float(np.std(self.per_seed))

    def to_dict(self) -> dict:
        return {"config": self.config, "method": self.method, "models": self.models, "per_seed": self.per_seed,
                "window_std": self.window_std, "mean": self.mean, "seed_std": self.seed_std}


CSV_HEADER = ["config", "method", "models", "mse_mean", "mse_std_seeds", "mse_std_windows", "n_seeds", "per_seed"]


def rows_to_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.config, r.method, ";".join(r.models), f"{r.mean:.6e}", f"{r.seed_std:.6e}",
                    f"{np.mean(r.window_std):.6e}", len(r.per_seed), ";".join(f"{x:.6e}" for x in r.per_seed)])
    return buf.getvalue()


def rows_to_text(title: str, rows: Sequence[Row], scale: float = 1e4, show_models: bool = True) -> str:
    lines = [title, f"MSE x {1 / scale:.0e}: mean over seeds, +- std over seeds [mean per-window std]", ""]
    width = max(len(r.method) for r in rows) + 2
    last = None
    for r in rows:
        if r.config != last:
            lines.append(f"{r.config}")
            last = r.config
        lines.append(f"  {r.method:<{width}}{r.mean * scale:9.4f} +- {r.seed_std * scale:7.4f}"
                     f"  [{np.mean(r.window_std) * scale:7.4f}]"
                     + (f"  {', '.join(sorted(set(r.models)))}" if show_models else ""))
    return "\n".join(lines) + "\n"


def _score(tree, test, hyper) -> K.RolloutScore:
    return K.rollout_mse(tree, test, hyper.T_pred)


def _neighbor_rows(cid: str, sets: Mapping[int, NeighborSet], seeds: Sequence[int]) -> list[list[tuple[int, str]]]:
    """Neighbor rank j -> [(seed, vehicle id)] for seeds whose set has at least j+1 members."""
    k = max(len(sets[s].members) for s in seeds)
    return [[(s, sets[s].ids[j]) for s in seeds if len(sets[s].members) > j] for j in range(k)]


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    """CAR versus direct neighbor transfer and full-data from-scratch training."""
    t0 = time.perf_counter()
    kb = knowledge_base(cfg, out)
    hyper = cfg.kino
    news = [cfg.vehicle(v) for v in cfg.new_configs]
    sets, preps, jobs = {}, {}, {}
    for c in news:
        for s in cfg.seeds:
            d_new = new_vehicle_data(cfg, c, s)
            ns = kb.identify(d_new, c)
            if ns.verdict != NEIGHBORS:
                raise OutOfDistributionError(ns.distances, ns.epsilon)
            sets[c.id, s] = ns
            preps[c.id, s] = A.plan_adaptation(kb, d_new, c, hyper, car_seed(cfg, c, s), cfg.budget,
                                               cfg.n_constraint_trajectories, neighbors=ns)
            jobs[f"car/{c.id}/{s}"] = preps[c.id, s].job
            jobs[f"scratch/{c.id}/{s}"] = scratch_job(cfg, c, s)
            for vid in ns.ids:
                jobs[f"neighbor/{vid}/{s}"] = neighbor_job(cfg, kb, vid, s)
    t_plan = time.perf_counter()
    trained = train_unique(jobs, hyper, kb.dt)
    t_train = time.perf_counter()

    rows: list[Row] = []
    diagnostics = {}
    for c in news:
        test = test_data(cfg, c)
        per = {s: sets[c.id, s] for s in cfg.seeds}
        diagnostics[c.id] = {"seeds": {str(s): {"neighbors": per[s].to_dict(),
                                                "plan_counts": preps[c.id, s].plan.counts,
                                                "projections": trained[f"car/{c.id}/{s}"].projections[0]}
                                       for s in cfg.seeds}}
        car = [_score(trained[f"car/{c.id}/{s}"].trees[0], test, hyper) for s in cfg.seeds]
        rows.append(Row(c.id, "CAR", [c.id], [x.mse for x in car], [x.std for x in car]))
        for j, members in enumerate(_neighbor_rows(c.id, per, cfg.seeds)):
            sc = [_score(trained[f"neighbor/{vid}/{s}"].trees[0], test, hyper) for s, vid in members]
            rows.append(Row(c.id, f"Neighbor {j + 1}", [vid for _, vid in members], [x.mse for x in sc],
                            [x.std for x in sc]))
        scratch = [_score(trained[f"scratch/{c.id}/{s}"].trees[0], test, hyper) for s in cfg.seeds]
        rows.append(Row(c.id, "From Scratch", [c.id], [x.mse for x in scratch], [x.std for x in scratch]))
        best = [min(_score(trained[f"neighbor/{vid}/{s}"].trees[0], test, hyper).mse for vid in per[s].ids)
                for s in cfg.seeds]
        diagnostics[c.id]["best_neighbor_per_seed"] = best

    report = {"rows": [r.to_dict() for r in rows], "diagnostics": diagnostics, "summary": eval_summary(rows, diagnostics)}
    _write(out / "eval" / "table.csv", rows_to_csv(rows))
    _write(out / "eval" / "table.txt", rows_to_text("Few-shot adaptation on new vehicle configurations", rows)
           + "\n" + summary_text(report["summary"]))
    _write_json(out / "eval" / "report.json", report)
    _write_timing(out, "eval", {"plan": t_plan - t0, "train": t_train - t_plan,
                                "score": time.perf_counter() - t_train, "models": len(trained)})
    return report


def eval_summary(rows: Sequence[Row], diagnostics: Mapping) -> dict:
    """Per config: CAR mean, mean over seeds of the best direct-neighbor MSE, and from-scratch mean."""
    out = {}
    for cid in dict.fromkeys(r.config for r in rows):
        car = next(r for r in rows if r.config == cid and r.method == "CAR").mean
        scratch = next(r for r in rows if r.config == cid and r.method == "From Scratch").mean
        best = float(np.mean(diagnostics[cid]["best_neighbor_per_seed"]))
        out[cid] = {"car": car, "best_neighbor": best, "scratch": scratch, "reduction_vs_best": 1.0 - car / best,
                    "n_neighbors": [len(d["neighbors"]["members"]) for d in diagnostics[cid]["seeds"].values()]}
    return out


def summary_text(summary: Mapping) -> str:
    lines = ["CAR error reduction versus the best direct neighbor (mean over seeds)"]
    for cid, s in summary.items():
        lines.append(f"  {cid}: {100 * s['reduction_vs_best']:+.1f}%  (neighbors per seed: "
                     f"{', '.join(map(str, s['n_neighbors']))}; from scratch <= CAR: {s['scratch'] <= s['car']})")
    return "\n".join(lines) + "\n"


# -- ablate -----------------------------------------------------------------

ENCODER_ROWS = {"Conditional": ("conditional", "conditional"), "Unconditional": ("conditional", "unconditional"),
                "Simple": ("simple", "simple")}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    """The four adaptation ablations and the three encoder variants, paired by seed."""
    t0 = time.perf_counter()
    hyper = cfg.kino
    kbs = {"conditional": knowledge_base(cfg, out, "conditional"), "simple": knowledge_base(cfg, out, "simple")}
    dt = kbs["conditional"].dt
    jobs, meta = {}, {}
    for values in cfg.ablation_configs:
        c = cfg.vehicle(values)
        for s in cfg.seeds:
            d_new = new_vehicle_data(cfg, c, s)
            sets = {}
            for label, (enc, idx) in ENCODER_ROWS.items():
                ns = identify(kbs[enc], idx, d_new, c)
                sets[label] = ns
                prep = A.plan_adaptation(kbs[enc], d_new, c, hyper, car_seed(cfg, c, s), cfg.budget,
                                         cfg.n_constraint_trajectories, neighbors=ns)
                jobs[f"encoder/{label}/{c.id}/{s}"] = prep.job
                meta[f"encoder/{label}/{c.id}/{s}"] = prep.plan.ids
            for label, opts in A.ABLATIONS.items():
                prep = A.plan_adaptation(kbs["conditional"], d_new, c, hyper, car_seed(cfg, c, s), cfg.budget,
                                         cfg.n_constraint_trajectories, options=opts, neighbors=sets["Conditional"])
                jobs[f"ablation/{label}/{c.id}/{s}"] = prep.job
                meta[f"ablation/{label}/{c.id}/{s}"] = prep.plan.ids
    t_plan = time.perf_counter()
    trained = train_unique(jobs, hyper, dt)
    t_train = time.perf_counter()

    tests = {cfg.vehicle(v).id: test_data(cfg, cfg.vehicle(v)) for v in cfg.ablation_configs}
    ids = list(tests)

    def row(kind: str, label: str) -> Row:
        per, wstd, models = [], [], []
        for s in cfg.seeds:
            sc = [_score(trained[f"{kind}/{label}/{cid}/{s}"].trees[0], tests[cid], hyper) for cid in ids]
            per.append(float(np.mean([x.mse for x in sc])))
            wstd.append(float(np.mean([x.std for x in sc])))
            models += [";".join(meta[f"{kind}/{label}/{cid}/{s}"]) for cid in ids]
        return Row("+".join(ids), label, models, per, wstd)

    adapt_rows = [row("ablation", label) for label in A.ABLATIONS]
    enc_rows = [row("encoder", label) for label in ENCODER_ROWS]
    car = adapt_rows[0].mean
    summary = {"degradation": {r.method: r.mean / car - 1.0 for r in adapt_rows[1:]},
               "encoder_order": [r.mean for r in enc_rows]}
    report = {"adaptation": [r.to_dict() for r in adapt_rows], "encoder": [r.to_dict() for r in enc_rows],
              "summary": summary}
    text = (rows_to_text("Adaptation ablations", adapt_rows, show_models=False) + "\n"
            + rows_to_text("Encoder variants", enc_rows, show_models=False)
            + "\nDegradation relative to full CAR\n"
            + "".join(f"  {k}: {100 * v:+.1f}%\n" for k, v in summary["degradation"].items()))
    _write(out / "ablate" / "table.csv", rows_to_csv(adapt_rows + enc_rows))
    _write(out / "ablate" / "table.txt", text)
    _write_json(out / "ablate" / "report.json", report)
    _write_timing(out, "ablate", {"plan": t_plan - t0, "train": t_train - t_plan,
                                  "score": time.perf_counter() - t_train, "models": len(trained)})
    return report


# -- report -----------------------------------------------------------------

def cmd_report(cfg: RunConfig, out: Path) -> str:
    """Collate the eval and ablation tables with the encoder curves into report.txt."""
    parts = [f"Run {cfg.name} (seed {cfg.seed}, seeds {cfg.seeds})", ""]
    for variant in ENCODER_VARIANTS:
        p = out / "encoder" / f"{variant}_log.csv"
        if p.exists():
            rows = list(csv.DictReader(p.read_text().splitlines()))
            best = max(rows, key=lambda r: float(r["separation"]))
            parts.append(f"Encoder ({variant}): best separation {float(best['separation']):.3f} at iteration "
                         f"{best['iter']} of {rows[-1]['iter']}")
    for name in ("eval", "ablate"):
        p = out / name / "table.txt"
        if p.exists():
            parts += ["", p.read_text().rstrip("\n")]
    if len(parts) == 2:
        raise ValidationError("nothing to report; run eval or ablate first")
    text = "\n".join(parts) + "\n"
    _write(out / "report.txt", text)
    return text


# -- CLI --------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("a configuration has three values: alpha_m,mu_f,alpha_s")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetadapt", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run", type=Path, help="RunConfig JSON file (default: the preset)")
    common.add_argument("--preset", default="desk", help="desk or small, used when --run is absent")
    common.add_argument("--out", type=Path, default=Path("runs/desk"), help="output directory")
    common.add_argument("--seed", type=int, help="override the RunConfig base seed")
    common.add_argument("--force", action="store_true", help="overwrite existing fleet files")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("config", parents=[common], help="print the RunConfig as JSON")
    sub.add_parser("gen-fleet", parents=[common], help="simulate the training fleet")
    te = sub.add_parser("train-encoder", parents=[common], help="train the mobility encoder")
    te.add_argument("--variant", choices=ENCODER_VARIANTS, default="conditional")
    sub.add_parser("embed", parents=[common], help="build latent indexes from the trained encoders")
    sn = sub.add_parser("select-neighbors", parents=[common], help="identify neighbors for new vehicles")
    sn.add_argument("--config", type=_floats, action="append", help="alpha_m,mu_f,alpha_s (repeatable)")
    sn.add_argument("--index", choices=INDEX_VARIANTS, default="conditional")
    ad = sub.add_parser("adapt", parents=[common], help="adapt a model to one new vehicle")
    ad.add_argument("--config", type=_floats, required=True, help="alpha_m,mu_f,alpha_s")
    ad.add_argument("--run-seed", type=int, default=0, help="which run seed's new-vehicle data to use")
    sub.add_parser("eval", parents=[common], help="CAR vs neighbor transfer vs from scratch")
    sub.add_parser("ablate", parents=[common], help="adaptation and encoder ablations")
    sub.add_parser("report", parents=[common], help="collate tables into report.txt")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.run) if args.run else preset(args.preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out
        if args.verb == "config":
            sys.stdout.write(cfg.to_json())
        elif args.verb == "gen-fleet":
            m = cmd_gen_fleet(cfg, out, args.force)
            print(f"wrote {len(m['vehicles'])} vehicle files to {out / 'fleet'}")
        elif args.verb == "train-encoder":
            res = cmd_train_encoder(cfg, out, args.variant)
            print(f"best separation {res.best_separation:.3f} at iteration {res.best_iter}")
        elif args.verb == "embed":
            for name, index in cmd_embed(cfg, out).items():
                print(f"{name}: k={index.pca.k} epsilon={index.epsilon:.4f}")
        elif args.verb == "select-neighbors":
            result = cmd_select_neighbors(cfg, out, args.config, args.index)
            for cid, per in result.items():
                for s, ns in per.items():
                    print(cid, s, " ".join(f"{m.vehicle_id}:{m.weight:.3f}" for m in ns.members))
        elif args.verb == "adapt":
            rep = cmd_adapt(cfg, out, args.config, args.run_seed)
            print(f"test MSE {rep.metrics['test']['mse']:.6e}  neighbors {rep.plan.ids}")
        elif args.verb == "eval":
            sys.stdout.write(summary_text(cmd_eval(cfg, out)["summary"]))
        elif args.verb == "ablate":
            cmd_ablate(cfg, out)
            sys.stdout.write((out / "ablate" / "table.txt").read_text())
        elif args.verb == "report":
            sys.stdout.write(cmd_report(cfg, out))
    except OutOfDistributionError as e:
        print(f"out of distribution: {e}", file=sys.stderr)
        return EXIT_OOD
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
