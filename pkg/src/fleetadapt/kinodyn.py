"""Forward kinodynamics model, autoregressive rollout and its training loop.

The model maps the current state [roll, pitch, yaw_rate, speed] and control
[steer, speed_cmd] to [dx, dy, dz, roll_next, pitch_next, d_yaw].  Outputs are
de-normalized with dataset statistics; roll_next and pitch_next are decoded as
the current attitude plus a predicted change.  State and
action go through separate LayerNorm/Tanh branches; a translation-and-yaw
head and a roll-pitch head (BatchNorm/ReLU/dropout) read the concatenation.

All functions accept either a single parameter tree or a stacked ensemble
whose arrays carry a leading model axis; ``train_kino`` uses the latter to fit
several independent models in one pass.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import nn
from .fleet_sim import CONTROL_DIM, NEXT_DIM, STATE_DIM, Trajectory

TRANS_IDX = (0, 1, 2, 5)
RP_IDX = (3, 4)


@dataclass
class KinoHyper:
    state_widths: tuple[int, int] = (8, 16)
    action_widths: tuple[int, int] = (8, 16)
    head_widths: tuple[int, int] = (32, 16)
    dropout: float = 0.2
    T_pred: int = 16
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 64
    refresh_every: int = 100

    def __post_init__(self):
        self.state_widths = tuple(self.state_widths)
        self.action_widths = tuple(self.action_widths)
        self.head_widths = tuple(self.head_widths)
        widths = self.state_widths + self.action_widths + self.head_widths
        if min(widths) <= 0 or self.T_pred <= 0 or self.steps < 0 or self.batch <= 0:
            raise ValueError("kinodynamics widths, horizon and batch must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def drop_width(self) -> int:
        return 2 * sum(self.head_widths)


# -- windows ----------------------------------------------------------------

@dataclass
class KinoWindows:
    """Rollout windows: start state (N, 4), controls (N, T, 2), targets (N, T, 6)."""

    s0: np.ndarray
    U: np.ndarray
    Y: np.ndarray

    def __len__(self) -> int:
        return len(self.s0)

    @property
    def T(self) -> int:
        return self.U.shape[1]

    def take(self, idx) -> "KinoWindows":
        return KinoWindows(self.s0[idx], self.U[idx], self.Y[idx])

    @staticmethod
    def concat(parts: Sequence["KinoWindows"]) -> "KinoWindows":
        return KinoWindows(np.concatenate([p.s0 for p in parts]), np.concatenate([p.U for p in parts]),
                           np.concatenate([p.Y for p in parts]))


def make_windows(trajs: Sequence[Trajectory], T: int, stride: int = 1) -> KinoWindows:
    s0, U, Y = [], [], []
    for tr in trajs:
        if len(tr) < T:
            raise ValueError(f"trajectory of {len(tr)} steps shorter than horizon {T}")
        for s in range(0, len(tr) - T + 1, stride):
            s0.append(tr.s_cur[s])
            U.append(tr.u[s:s + T])
            Y.append(tr.s_next[s:s + T])
    return KinoWindows(np.array(s0), np.array(U), np.array(Y))


def normalizer_stats(w: KinoWindows) -> dict[str, np.ndarray]:
    def ms(x):
        x = x.reshape(-1, x.shape[-1])
        sd = x.std(axis=0)
        return x.mean(axis=0), np.where(sd > 1e-9, sd, 1.0)

    s_mean, s_std = ms(w.s0)
    u_mean, u_std = ms(w.U)
    # roll/pitch targets are normalized as per-step changes, matching kino_forward's decoding
    prev = np.concatenate([w.s0[:, None, 0:2], w.Y[:, :-1, 3:5]], axis=1)
    y = w.Y.copy()
    y[..., 3:5] -= prev
    y_mean, y_std = ms(y)
    return {"s_mean": s_mean, "s_std": s_std, "u_mean": u_mean, "u_std": u_std, "y_mean": y_mean, "y_std": y_std}


# -- model ------------------------------------------------------------------

def init_kino(hyper: KinoHyper, seed: int, stats: dict[str, np.ndarray] | None = None) -> nn.ParamTree:
    g = nn.global_seed_generator(seed)
    t = nn.ParamTree()
    for branch, widths, in_dim in (("state", hyper.state_widths, STATE_DIM), ("action", hyper.action_widths, CONTROL_DIM)):
        prev = in_dim
        for i, w in enumerate(widths):
            nn.init_linear(t, f"{branch}.{i}", prev, w, g)
            nn.init_norm(t, f"{branch}.ln{i}", w)
            prev = w
    feat = hyper.state_widths[-1] + hyper.action_widths[-1]
    for head, out_dim in (("trans", len(TRANS_IDX)), ("rp", len(RP_IDX))):
        prev = feat
        for i, w in enumerate(hyper.head_widths):
            nn.init_linear(t, f"{head}.{i}", prev, w, g)
            nn.init_norm(t, f"{head}.bn{i}", w, running=True)
            prev = w
        nn.init_linear(t, f"{head}.out", prev, out_dim, g)
    stats = stats or {}
    defaults = {"s": STATE_DIM, "u": CONTROL_DIM, "y": NEXT_DIM}
    for key, dim in defaults.items():
        t.add_buffer(f"norm.{key}_mean", stats.get(f"{key}_mean", np.zeros(dim)))
        t.add_buffer(f"norm.{key}_std", stats.get(f"{key}_std", np.ones(dim)))
    return t


class DropoutSource:
    """Per-model dropout uniforms so that each ensemble member has its own stream."""

    def __init__(self, seeds: Sequence[int], stacked: bool):
        self.gens = [nn.global_seed_generator(s) for s in seeds]
        self.stacked = stacked

    def draw(self, batch: int, width: int) -> torch.Tensor:
        if not self.stacked:
            return torch.rand(batch, width, generator=self.gens[0], dtype=nn.DTYPE)
        return torch.stack([torch.rand(batch, width, generator=g, dtype=nn.DTYPE) for g in self.gens])


def _norm_buf(tree, name):
    return tree[name].unsqueeze(-2)


def kino_forward(tree: nn.ParamTree, s, u, mode: str, hyper: KinoHyper | None = None,
                 drop: DropoutSource | None = None, update_running: bool = True) -> torch.Tensor:
    """Predict (..., B, 6) from s (..., B, 4) and u (..., B, 2).

    A single (4,) / (2,) input pair is accepted and returns (6,); in that case
    batch statistics are unavailable, so inference mode is required.
    """
    hyper = hyper or KinoHyper()
    s, u = nn.as_tensor(s), nn.as_tensor(u)
    if s.shape[-1] != STATE_DIM or u.shape[-1] != CONTROL_DIM or s.shape[:-1] != u.shape[:-1]:
        raise nn.ShapeError(f"kino_forward expects s (..., {STATE_DIM}) and u (..., {CONTROL_DIM}); "
                            f"got {tuple(s.shape)} and {tuple(u.shape)}")
    single = s.dim() == 1
    if single:
        s, u = s.unsqueeze(0), u.unsqueeze(0)
    training = nn._check_mode(mode)
    xs = (s - _norm_buf(tree, "norm.s_mean")) / _norm_buf(tree, "norm.s_std")
    xu = (u - _norm_buf(tree, "norm.u_mean")) / _norm_buf(tree, "norm.u_std")
    for i in range(len(hyper.state_widths)):
        xs = torch.tanh(nn.layer_norm(tree.scope(f"state.ln{i}"), nn.linear(tree.scope(f"state.{i}"), xs)))
    for i in range(len(hyper.action_widths)):
        xu = torch.tanh(nn.layer_norm(tree.scope(f"action.ln{i}"), nn.linear(tree.scope(f"action.{i}"), xu)))
    feat = torch.cat([xs, xu], dim=-1)
    masks = None
    if training and hyper.dropout > 0 and drop is not None:
        masks = drop.draw(feat.shape[-2], hyper.drop_width)
    outs, offset = [], 0
    for head in ("trans", "rp"):
        h = feat
        for i, w in enumerate(hyper.head_widths):
            h = nn.linear(tree.scope(f"{head}.{i}"), h)
            h = torch.relu(nn.batch_norm(tree.scope(f"{head}.bn{i}"), h, mode, update_running=update_running))
            if masks is not None:
                h = nn.dropout(h, hyper.dropout, mode, mask=masks[..., offset:offset + w])
                offset += w
            elif training and hyper.dropout > 0:
                h = nn.dropout(h, hyper.dropout, mode)
        outs.append(nn.linear(tree.scope(f"{head}.out"), h))
    t, rp = outs
    y = torch.cat([t[..., 0:3], rp, t[..., 3:4]], dim=-1)
    y = y * _norm_buf(tree, "norm.y_std") + _norm_buf(tree, "norm.y_mean")
    # the roll-pitch head is decoded relative to the current attitude
    y = torch.cat([y[..., :3], y[..., 3:5] + s[..., 0:2], y[..., 5:]], dim=-1)
    return y[0] if single else y


def next_input(pred: torch.Tensor, dt: float) -> torch.Tensor:
    """Rebuild [roll, pitch, yaw_rate, speed] from a predicted [dx, dy, dz, roll, pitch, d_yaw]."""
    return torch.stack([pred[..., 3], pred[..., 4], pred[..., 5] / dt, pred[..., 0] / dt], dim=-1)


def rollout_batch(tree: nn.ParamTree, s0, U, dt: float, mode: str, hyper: KinoHyper | None = None,
                  drop: DropoutSource | None = None, update_running: bool = True,
                  forward: Callable = None) -> torch.Tensor:
    """Autoregressive predictions (..., B, T, 6) from start states (..., B, 4) and controls (..., B, T, 2).

    ``forward`` replaces kino_forward (same signature), e.g. with a reference model.
    """
    forward = forward or kino_forward
    s = nn.as_tensor(s0)
    U = nn.as_tensor(U)
    preds = []
    for t in range(U.shape[-2]):
        p = forward(tree, s, U[..., t, :], mode, hyper, drop, update_running)
        preds.append(p)
        s = next_input(p, dt)
    return torch.stack(preds, dim=-2)


def rollout(tree: nn.ParamTree, traj: Trajectory, start: int, T: int, hyper: KinoHyper | None = None) -> np.ndarray:
    """Inference-mode rollout of T steps along a recorded trajectory's controls: (T, 6)."""
    if start < 0 or start + T > len(traj):
        raise ValueError(f"rollout window [{start}, {start + T}) exceeds trajectory length {len(traj)}")
    with torch.no_grad():
        out = rollout_batch(tree, traj.s_cur[start][None], traj.u[start:start + T][None], traj.dt, nn.INFER, hyper)
    return out[0].numpy()


def window_mse(pred: torch.Tensor, Y) -> torch.Tensor:
    """Per-window mean squared error over steps and dimensions: (..., B)."""
    return ((pred - nn.as_tensor(Y)) ** 2).mean(dim=(-1, -2))


@dataclass
class RolloutScore:
    mse: float
    std: float
    per_dim: list[float]
    n_windows: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluation_windows(dataset: Sequence[Trajectory], T_pred: int, seed: int | None = None,
                       n_windows: int | None = None) -> KinoWindows:
    """Non-overlapping horizon-length windows, optionally subsampled with ``seed``."""
    w = make_windows(dataset, T_pred, stride=T_pred)
    if n_windows is not None and n_windows < len(w):
        idx = np.sort(np.random.default_rng(seed).choice(len(w), n_windows, replace=False))
        w = w.take(idx)
    return w


def score_windows(tree: nn.ParamTree, w: KinoWindows, dt: float, hyper: KinoHyper | None = None) -> RolloutScore:
    with torch.no_grad():
        pred = rollout_batch(tree, w.s0, w.U, dt, nn.INFER, hyper)
        err = (pred - nn.as_tensor(w.Y)) ** 2
        per_window = err.mean(dim=(-1, -2)).numpy()
        per_dim = err.mean(dim=(0, 1)).numpy()
    return RolloutScore(float(per_window.mean()), float(per_window.std()), per_dim.tolist(), len(w))


def rollout_mse(tree: nn.ParamTree, dataset: Sequence[Trajectory], T_pred: int = 16, seed: int = 0,
                n_windows: int | None = None, hyper: KinoHyper | None = None) -> RolloutScore:
    if not dataset:
        raise ValueError("empty evaluation dataset")
    return score_windows(tree, evaluation_windows(dataset, T_pred, seed, n_windows), dataset[0].dt, hyper)


# -- training ---------------------------------------------------------------

@dataclass
class KinoJob:
    """One model to fit.

    ``pools`` are per-source window sets concatenated into the training set;
    each window's loss weight is the weight of its pool.  ``constraint``
    windows, when present, regulate the gradient direction.
    """

    pools: list[KinoWindows]
    weights: Sequence[float]
    seed: int
    constraint: KinoWindows | None = None
    counts: Sequence[int] | None = None

    def __post_init__(self):
        if len(self.pools) != len(self.weights) or not self.pools:
            raise ValueError("one weight per non-empty pool required")
        if self.counts is not None and (len(self.counts) != len(self.pools) or sum(self.counts) <= 0):
            raise ValueError("per-pool epoch counts must match the pools and be positive in total")


def draw_subset(rng: np.random.Generator, pool_size: int, n: int) -> np.ndarray:
    """Indices of n windows from a pool: without replacement unless the pool is too small."""
    return np.sort(rng.choice(pool_size, int(n), replace=pool_size < n))


class BatchStream:
    """Minibatch indices into a job's concatenated pools.

    Without per-pool counts batches are uniform draws from all windows.  With
    counts, each epoch draws ``counts[i]`` windows from pool ``i``, shuffles
    them, and batches are consumed from that epoch before the next is drawn.
    """

    def __init__(self, job: KinoJob, sizes: Sequence[int]):
        self.rng = np.random.default_rng(np.random.SeedSequence([job.seed, 2]))
        self.sizes = list(sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int)
        self.counts = None if job.counts is None else [int(c) for c in job.counts]
        self.queue = np.zeros(0, dtype=int)
        self.epochs = 0

    def _epoch(self) -> np.ndarray:
        self.epochs += 1
        idx = [off + draw_subset(self.rng, n, c) for off, n, c in zip(self.offsets, self.sizes, self.counts) if c > 0]
        return self.rng.permutation(np.concatenate(idx))

    def next(self, B: int) -> np.ndarray:
        if self.counts is None:
            total = sum(self.sizes)
            return self.rng.choice(total, B, replace=total < B)
        while len(self.queue) < B:
            self.queue = np.concatenate([self.queue, self._epoch()])
        out, self.queue = self.queue[:B], self.queue[B:]
        return out


@dataclass
class TrainResult:
    trees: list[nn.ParamTree]
    loss_trace: np.ndarray  # (M, steps)
    projections: list[int]
    min_constraint_dot: list[float]
    constraint_loss_trace: list[list[float]] = field(default_factory=list)


def weighted_loss(window_losses: torch.Tensor, window_weights: torch.Tensor) -> torch.Tensor:
    """Weighted mean of per-window losses along the last axis.

    With per-neighbor groups of equal size this equals sum_i w_i * loss_i
    for normalized w; group sizes enter multiplicatively otherwise.
    """
    window_weights = nn.as_tensor(window_weights)
    return (window_losses * window_weights).sum(-1) / window_weights.sum(-1)


def project_rows(G: torch.Tensor, C: torch.Tensor, active: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise single-constraint projection; returns (projected, violated mask)."""
    dot = (G * C).sum(-1)
    cc = (C * C).sum(-1)
    viol = (dot < 0) & (cc > 0)
    if active is not None:
        viol = viol & active
    coef = torch.where(viol, dot / torch.where(cc > 0, cc, torch.ones_like(cc)), torch.zeros_like(dot))
    return G - coef.unsqueeze(-1) * C, viol


def _flat_rows(grads: dict[str, torch.Tensor], names: list[str], M: int) -> torch.Tensor:
    return torch.cat([grads[k].reshape(M, -1) for k in names], dim=1)


def _unflat_rows(rows: torch.Tensor, like: dict[str, torch.Tensor], names: list[str]) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    M = rows.shape[0]
    for k in names:
        n = like[k][0].numel()
        out[k] = rows[:, i:i + n].reshape(like[k].shape)
        i += n
    return out


def train_kino(jobs: Sequence[KinoJob], hyper: KinoHyper, dt: float, constraint_batch: int | None = None,
               trace_constraint: bool = False) -> TrainResult:
    """Fit one model per job with Adam on the rollout loss, all jobs in a single stacked pass.

    For jobs with constraint windows the constraint gradient is recomputed
    every ``hyper.refresh_every`` steps at the current parameters, and each
    training gradient that conflicts with it is projected before the Adam
    update.
    """
    M = len(jobs)
    data, wts = [], []
    for j in jobs:
        data.append(KinoWindows.concat(j.pools))
        wts.append(np.concatenate([np.full(len(p), float(w)) for p, w in zip(j.pools, j.weights)]))
    trees = [init_kino(hyper, j.seed, normalizer_stats(d)) for j, d in zip(jobs, data)]
    tree = nn.ParamTree.stack(trees)
    streams = [BatchStream(j, [len(p) for p in j.pools]) for j in jobs]
    drop = DropoutSource([int(np.random.SeedSequence([j.seed, 3]).generate_state(1)[0]) for j in jobs], stacked=True)
    names = tree.names()

    has_con = torch.tensor([j.constraint is not None for j in jobs])
    con = None
    if bool(has_con.any()):
        sizes = {len(j.constraint) for j in jobs if j.constraint is not None}
        if len(sizes) != 1:
            raise ValueError(f"constraint window counts must agree across stacked jobs, got {sorted(sizes)}")
        nc = sizes.pop()
        filler = [j.constraint if j.constraint is not None else d.take(np.arange(nc) % len(d))
                  for j, d in zip(jobs, data)]
        con = (torch.as_tensor(np.stack([f.s0 for f in filler])), torch.as_tensor(np.stack([f.U for f in filler])),
               np.stack([f.Y for f in filler]))

    loss_trace = np.zeros((M, hyper.steps))
    projections = [0] * M
    min_dot = [math.inf] * M
    con_trace: list[list[float]] = [[] for _ in range(M)]
    C = None
    B = hyper.batch
    for step in range(hyper.steps):
        idx = [st.next(B) for st in streams]
        s0 = np.stack([d.s0[i] for d, i in zip(data, idx)])
        U = np.stack([d.U[i] for d, i in zip(data, idx)])
        Y = np.stack([d.Y[i] for d, i in zip(data, idx)])
        W = np.stack([w[i] for w, i in zip(wts, idx)])

        if con is not None and step % hyper.refresh_every == 0:
            pred_c = rollout_batch(tree, con[0], con[1], dt, nn.TRAIN, replace(hyper, dropout=0.0),
                                   update_running=False)
            lc = window_mse(pred_c, con[2]).mean(-1)
            if trace_constraint:
                for m in range(M):
                    con_trace[m].append(float(lc[m]))
            g_con = nn.backward((lc * has_con.to(nn.DTYPE)).sum(), tree)
            C = _flat_rows(g_con, names, M)

        pred = rollout_batch(tree, s0, U, dt, nn.TRAIN, hyper, drop)
        per_job = weighted_loss(window_mse(pred, Y), W)
        loss = per_job.sum()
        grads = nn.backward(loss, tree)
        loss_trace[:, step] = per_job.detach().numpy()
        if C is not None:
            G = _flat_rows(grads, names, M)
            G, viol = project_rows(G, C, has_con)
            dots = (G * C).sum(-1)
            for m in range(M):
                if bool(has_con[m]):
                    projections[m] += int(viol[m])
                    min_dot[m] = min(min_dot[m], float(dots[m]))
            grads = _unflat_rows(G, grads, names)
        nn.adam_step(tree, grads, hyper.lr)

    return TrainResult([tree.select(m) for m in range(M)], loss_trace, projections,
                       [d if d != math.inf else float("nan") for d in min_dot], con_trace)


def train_from_scratch(trajs: Sequence[Trajectory], hyper: KinoHyper, seed: int) -> nn.ParamTree:
    w = make_windows(trajs, hyper.T_pred)
    return train_kino([KinoJob([w], [1.0], seed)], hyper, trajs[0].dt).trees[0]


def save_kino(path_stem: str | Path, tree: nn.ParamTree, hyper: KinoHyper, dt: float, extra: dict | None = None) -> None:
    stem = Path(path_stem)
    tree.save(nn.sidecar(stem, ".params.json"))
    meta = {"hyper": asdict(hyper), "dt": dt}
    meta.update(extra or {})
    nn.sidecar(stem, ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_kino(path_stem: str | Path) -> tuple[nn.ParamTree, KinoHyper, float]:
    stem = Path(path_stem)
    meta = json.loads(nn.sidecar(stem, ".meta.json").read_text())
    hyper = KinoHyper(**meta["hyper"])
    tree = init_kino(hyper, 0).load(nn.sidecar(stem, ".params.json"))
    return tree, hyper, float(meta["dt"])
