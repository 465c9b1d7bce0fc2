"""Rapid kinodynamics adaptation from weighted mobility neighbors.

Neighbor datasets are sampled in proportion to their weights, their rollout
losses are combined with the same weights, and every training gradient that
would increase the loss on the new vehicle's few trajectories is projected
onto the closest non-conflicting direction.
"""
from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import nn
from .encoder import EncoderHyper, FleetWindows, embed_windows, sliding_windows, vehicle_embeddings
from .fleet_sim import Trajectory, VehicleConfig
from .kinodyn import (KinoHyper, KinoJob, KinoWindows, TrainResult, draw_subset, make_windows, rollout_batch,
                      train_kino, window_mse)
from .neighbors import NEIGHBORS, LatentIndex, NeighborMember, NeighborSet, OutOfDistributionError


def largest_remainder(weights: Sequence[float], budget: int) -> np.ndarray:
    """Integer counts proportional to weights that sum exactly to budget."""
    w = np.asarray(weights, float)
    if budget < 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("largest-remainder apportionment needs non-negative weights and budget")
    quota = budget * w / w.sum()
    counts = np.floor(quota).astype(int)
    short = budget - counts.sum()
    # ties (up to float noise) resolved by position, i.e. by the caller's descending-weight order
    rem = np.round(quota - counts, 9)
    order = sorted(range(len(w)), key=lambda i: (-rem[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _stream(seed: int, vehicle_id: str, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(vehicle_id.encode()), tag]))


def aggregate_datasets(neighbor_ids: Sequence[str], weights: Sequence[float], datasets: Mapping[str, KinoWindows],
                       budget: int, seed: int, counts: Sequence[int] | None = None) -> dict[str, KinoWindows]:
    """Per-neighbor window subsets with sizes apportioned from the budget.

    Sampling is without replacement unless a neighbor's pool is smaller than
    its share.  ``counts`` overrides the apportionment (used by ablations).
    """
    if len(neighbor_ids) == 0:
        raise ValueError("empty neighbor set; out-of-distribution vehicles must be handled before aggregation")
    if counts is None:
        counts = largest_remainder(weights, budget)
    return {vid: datasets[vid].take(draw_subset(_stream(seed, vid, 0), len(datasets[vid]), n))
            for vid, n in zip(neighbor_ids, counts)}


def weighted_loss(tree: nn.ParamTree, batches: Mapping[str, KinoWindows] | Sequence[KinoWindows],
                  weights: Sequence[float], dt: float, hyper: KinoHyper | None = None,
                  mode: str = nn.INFER) -> torch.Tensor:
    """Weighted rollout MSE over per-neighbor batches.

    Every window carries its neighbor's weight and the result is the weighted
    mean over all windows, so for equally sized batches it is
    ``sum_i w_i * mse_i``.
    """
    parts = list(batches.values()) if isinstance(batches, Mapping) else list(batches)
    losses, wts = [], []
    for w, b in zip(weights, parts):
        pred = rollout_batch(tree, b.s0, b.U, dt, mode, hyper)
        losses.append(window_mse(pred, b.Y))
        wts.append(torch.full((len(b),), float(w), dtype=nn.DTYPE))
    total_w = torch.cat(wts)
    return (torch.cat(losses) * total_w).sum() / total_w.sum()


def project_gradient(g_train: Mapping[str, torch.Tensor], g_con: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Remove the component of g_train that conflicts with g_con (single inequality)."""
    nn.check_structure(g_train, g_con)
    names = sorted(g_train)
    g = nn.flatten_grads(g_train, names)
    c = nn.flatten_grads(g_con, names)
    cc = torch.dot(c, c)
    dot = torch.dot(g, c)
    if cc == 0 or dot >= 0:
        return {k: g_train[k].clone() for k in names}
    g = g - (dot / cc) * c
    out, i = {}, 0
    for k in names:
        n = g_train[k].numel()
        out[k] = g[i:i + n].reshape(g_train[k].shape)
        i += n
    return out


# -- knowledge base ---------------------------------------------------------

@dataclass
class KnowledgeBase:
    """Fleet datasets plus the trained encoder and the latent indexes built from it."""

    configs: dict[str, VehicleConfig]
    datasets: dict[str, list[Trajectory]]
    encoder: nn.ParamTree
    encoder_hyper: EncoderHyper
    index_conditional: LatentIndex | None = None
    index_unconditional: LatentIndex | None = None
    _kino_windows: dict = field(default_factory=dict, repr=False)

    @property
    def ids(self) -> list[str]:
        return sorted(self.datasets)

    @property
    def dt(self) -> float:
        return next(iter(self.datasets.values()))[0].dt

    def build_indexes(self, trajectories_per_vehicle: int | None = None) -> "KnowledgeBase":
        ds = self.datasets
        if trajectories_per_vehicle is not None:
            ds = {k: v[:trajectories_per_vehicle] for k, v in ds.items()}
        fw = FleetWindows.from_datasets(ds, self.configs)
        from .encoder import has_conditioning
        if has_conditioning(self.encoder):
            emb = vehicle_embeddings(self.encoder, fw, self.encoder_hyper, conditional=True)
            self.index_conditional = LatentIndex.build(dict(zip(fw.ids, emb)), conditional=True)
        emb = vehicle_embeddings(self.encoder, fw, self.encoder_hyper, conditional=False)
        self.index_unconditional = LatentIndex.build(dict(zip(fw.ids, emb)), conditional=False)
        return self

    def kino_windows(self, vid: str, T: int) -> KinoWindows:
        key = (vid, T)
        if key not in self._kino_windows:
            self._kino_windows[key] = make_windows(self.datasets[vid], T)
        return self._kino_windows[key]

    def embed_new(self, trajs: Sequence[Trajectory], config: VehicleConfig | None) -> np.ndarray:
        tokens = np.stack([t.tokens for t in trajs])
        w = sliding_windows(tokens, self.encoder_hyper.window_L, self.encoder_hyper.window_stride)
        return embed_windows(self.encoder, w, self.encoder_hyper, None if config is None else config.as_array())

    def identify(self, trajs: Sequence[Trajectory], config: VehicleConfig | None) -> NeighborSet:
        """Neighbor query: conditional embeddings when the configuration is known."""
        conditional = config is not None and self.index_conditional is not None
        index = self.index_conditional if conditional else self.index_unconditional
        if index is None:
            raise RuntimeError("knowledge base indexes not built; call build_indexes()")
        return index.query(self.embed_new(trajs, config if conditional else None))


# -- planning ---------------------------------------------------------------

@dataclass
class AdaptOptions:
    """Switches for the four adaptation components (all on = full method)."""

    neighbor_identification: bool = True
    weighted_data: bool = True
    weighted_loss: bool = True
    gradient_regulation: bool = True

    @property
    def label(self) -> str:
        off = [tag for tag, on in (("MN", self.neighbor_identification), ("WD", self.weighted_data),
                                   ("WL", self.weighted_loss), ("GR", self.gradient_regulation)) if not on]
        return "CAR" if not off else "CAR w/o " + "+".join(off)


ABLATIONS = {
    "CAR": AdaptOptions(),
    "CAR w/o MN": AdaptOptions(neighbor_identification=False),
    "CAR w/o WD": AdaptOptions(weighted_data=False),
    "CAR w/o WL": AdaptOptions(weighted_loss=False),
    "CAR w/o GR": AdaptOptions(gradient_regulation=False),
}


@dataclass
class AdaptationPlan:
    neighbors: NeighborSet
    ids: list[str]
    weights: list[float]  # sampling proportions
    loss_weights: list[float]
    counts: list[int]
    budget: int
    n_new_trajectories: int
    new_duration_s: float
    refresh_every: int = 100
    n_constraint_trajectories: int = 3
    options: AdaptOptions = field(default_factory=AdaptOptions)

    def __post_init__(self):
        if self.n_new_trajectories < 1:
            raise ValueError("adaptation needs at least one new-vehicle trajectory")
        if sum(self.counts) != self.budget:
            raise ValueError("sample counts must sum to the budget")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neighbors"] = self.neighbors.to_dict()
        return d


@dataclass
class PreparedAdaptation:
    plan: AdaptationPlan
    job: KinoJob


def plan_adaptation(kb: KnowledgeBase, d_new: Sequence[Trajectory], c_new: VehicleConfig | None,
                    hyper: KinoHyper, seed: int, budget: int = 400, n_constraint_trajectories: int = 3,
                    options: AdaptOptions | None = None, neighbors: NeighborSet | None = None) -> PreparedAdaptation:
    """Neighbor identification, apportionment and the training job for one new vehicle.

    Raises OutOfDistributionError when no training centroid lies within the
    threshold (unless neighbor identification is ablated).
    """
    options = options or AdaptOptions()
    if not d_new:
        raise ValueError("D_new must contain at least one trajectory")
    if neighbors is None:
        neighbors = kb.identify(d_new, c_new)
    if options.neighbor_identification:
        if neighbors.verdict != NEIGHBORS:
            raise OutOfDistributionError(neighbors.distances, neighbors.epsilon)
        ids, w = neighbors.ids, neighbors.weights
    else:
        ids = kb.ids
        w = np.full(len(ids), 1.0 / len(ids))
    uniform = np.full(len(ids), 1.0 / len(ids))
    sample_w = w if options.weighted_data else uniform
    loss_w = w if options.weighted_loss else uniform
    counts = largest_remainder(sample_w, budget)

    constraint = None
    if options.gradient_regulation:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        k = min(n_constraint_trajectories, len(d_new))
        pick = np.sort(rng.choice(len(d_new), k, replace=False))
        constraint = make_windows([d_new[i] for i in pick], hyper.T_pred)

    # the aggregate is redrawn with these counts every epoch of training
    kept = [i for i, n in enumerate(counts) if n > 0]
    job = KinoJob([kb.kino_windows(ids[i], hyper.T_pred) for i in kept], [float(loss_w[i]) for i in kept], seed,
                  constraint, counts=[int(counts[i]) for i in kept])
    plan = AdaptationPlan(
        neighbors, list(ids), [float(x) for x in sample_w], [float(x) for x in loss_w],
        [int(c) for c in counts], budget, len(d_new), float(sum(len(t) * t.dt for t in d_new)),
        hyper.refresh_every, n_constraint_trajectories, options,
    )
    return PreparedAdaptation(plan, job)


@dataclass
class AdaptationReport:
    plan: AdaptationPlan
    loss_trace: list[tuple[int, float]]
    projections: int
    min_constraint_dot: float
    seconds: float
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"verdict": self.plan.neighbors.verdict, "plan": self.plan.to_dict(),
                "loss_trace": self.loss_trace, "projections": self.projections,
                "min_constraint_dot": self.min_constraint_dot, "seconds": self.seconds, "metrics": self.metrics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float) + "\n"


def subsample_trace(trace: np.ndarray, every: int = 50) -> list[tuple[int, float]]:
    idx = list(range(0, len(trace), every))
    if len(trace) and idx[-1] != len(trace) - 1:
        idx.append(len(trace) - 1)
    return [(int(i), float(trace[i])) for i in idx]


def run_prepared(prepared: Sequence[PreparedAdaptation], hyper: KinoHyper, dt: float,
                 extra_jobs: Sequence[KinoJob] = ()) -> tuple[list[tuple[nn.ParamTree, AdaptationReport]], TrainResult]:
    """Train several prepared adaptations (plus any extra jobs) in one stacked pass."""
    t0 = time.perf_counter()
    jobs = [p.job for p in prepared] + list(extra_jobs)
    res = train_kino(jobs, hyper, dt)
    secs = time.perf_counter() - t0
    out = []
    for m, p in enumerate(prepared):
        rep = AdaptationReport(p.plan, subsample_trace(res.loss_trace[m]), res.projections[m],
                               res.min_constraint_dot[m], secs)
        out.append((res.trees[m], rep))
    return out, res


def adapt(kb: KnowledgeBase, d_new: Sequence[Trajectory], c_new: VehicleConfig | None, hyper: KinoHyper,
          seed: int, budget: int = 400, n_constraint_trajectories: int = 3,
          options: AdaptOptions | None = None) -> tuple[nn.ParamTree, AdaptationReport]:
    """Full adaptation for one new vehicle: identify, aggregate, train under regulation."""
    prepared = plan_adaptation(kb, d_new, c_new, hyper, seed, budget, n_constraint_trajectories, options)
    (tree, report), _ = run_prepared([prepared], hyper, kb.dt)
    return tree, report
