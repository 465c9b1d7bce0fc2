"""AdaLN-conditioned Transformer encoder for trajectory windows.

A window of L transition tokens is projected to width d, a learnable CLS
token is prepended and sinusoidal positions are added.  N-1 plain post-norm
blocks follow; the last block modulates its attention and feed-forward inputs
with shifts and scales computed from a configuration embedding (or from the
learned null embedding when no configuration is given).  The CLS row of the
final block is the mobility embedding.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import nn
from .fleet_sim import CONFIG_RANGES, TOKEN_DIM, Trajectory, VehicleConfig

log = logging.getLogger(__name__)


@dataclass
class EncoderHyper:
    n_blocks: int = 4
    d: int = 16
    n_heads: int = 4
    window_L: int = 32
    margin: float = 4.0
    adaln_scale: float = 0.5
    cond_dropout: float = 0.1
    lr: float = 1e-4
    batch: int = 128
    max_iters: int = 100_000
    eval_every: int = 1000
    patience: int = 10
    ffn_mult: int = 4
    token_dim: int = TOKEN_DIM
    val_fraction: float = 0.1
    window_stride: int = 8

    def __post_init__(self):
        ints = (self.n_blocks, self.d, self.n_heads, self.window_L, self.batch,
                self.max_iters, self.eval_every, self.patience, self.ffn_mult, self.token_dim)
        if min(ints) <= 0 or self.margin <= 0 or self.lr <= 0 or self.adaln_scale <= 0:
            raise ValueError("encoder hyperparameters must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 2:
            raise ValueError("d must be even for sinusoidal positions")


@dataclass
class MobilityEmbedding:
    z: np.ndarray
    conditioned: bool


def normalize_config(values) -> np.ndarray:
    """Min-max normalize [alpha_m, mu_f, alpha_s] to [0, 1], clamping out-of-range values."""
    v = np.asarray(values, dtype=float)
    lo = np.array([r[0] for r in CONFIG_RANGES])
    hi = np.array([r[1] for r in CONFIG_RANGES])
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def init_encoder(hyper: EncoderHyper, seed: int, token_mean=None, token_std=None,
                 conditioning: bool = True) -> nn.ParamTree:
    """Fresh encoder parameters.

    With ``conditioning=False`` the tree has no configuration pathway at all
    (no config MLP, null embedding or modulation head).
    """
    g = nn.global_seed_generator(seed)
    d = hyper.d
    t = nn.ParamTree()
    nn.init_linear(t, "proj", hyper.token_dim, d, g)
    t.add("cls", (torch.rand(d, generator=g, dtype=nn.DTYPE) * 2 - 1) * math.sqrt(1.0 / d))
    for b in range(hyper.n_blocks):
        for part in "qkvo":
            nn.init_linear(t, f"blocks.{b}.attn.{part}", d, d, g)
        nn.init_norm(t, f"blocks.{b}.ln1", d)
        nn.init_linear(t, f"blocks.{b}.ffn.0", d, hyper.ffn_mult * d, g)
        nn.init_linear(t, f"blocks.{b}.ffn.1", hyper.ffn_mult * d, d, g)
        nn.init_norm(t, f"blocks.{b}.ln2", d)
    if conditioning:
        nn.init_linear(t, "cfg.0", 3, 8, g)
        nn.init_linear(t, "cfg.1", 8, d, g)
        t.add("null_embedding", (torch.rand(d, generator=g, dtype=nn.DTYPE) * 2 - 1) * math.sqrt(1.0 / d))
        # zero-initialized modulation: training starts from the unmodulated encoder
        nn.init_linear(t, "modulation", d, 4 * d, g, zero=True)
    t.add_buffer("token_mean", np.zeros(hyper.token_dim) if token_mean is None else token_mean)
    t.add_buffer("token_std", np.ones(hyper.token_dim) if token_std is None else token_std)
    return t


def has_conditioning(tree: nn.ParamTree) -> bool:
    return "modulation.weight" in tree.params


def embed_config(tree: nn.ParamTree, configs) -> torch.Tensor:
    """Config embedding e_c: normalized (..., 3) -> MLP 3->8->16 with Tanh after each layer."""
    if isinstance(configs, VehicleConfig):
        configs = configs.as_array()
    elif isinstance(configs, Sequence) and configs and isinstance(configs[0], VehicleConfig):
        configs = np.stack([c.as_array() for c in configs])
    x = nn.as_tensor(normalize_config(configs))
    h = torch.tanh(nn.linear(tree.scope("cfg.0"), x))
    return torch.tanh(nn.linear(tree.scope("cfg.1"), h))


def _block(tree: nn.ParamTree, b: int, H: torch.Tensor, hyper: EncoderHyper, mods=None) -> torch.Tensor:
    p = tree.scope(f"blocks.{b}")
    if mods is None:
        Ht = H
    else:
        Ht = H * (1 + mods[1].unsqueeze(-2)) + mods[0].unsqueeze(-2)
    H = nn.layer_norm(tree.scope(f"blocks.{b}.ln1"), H + nn.attention(tree.scope(f"blocks.{b}.attn"), Ht, hyper.n_heads))
    if mods is not None:
        Ht = H * (1 + mods[3].unsqueeze(-2)) + mods[2].unsqueeze(-2)
    else:
        Ht = H
    return nn.layer_norm(tree.scope(f"blocks.{b}.ln2"), H + nn.ffn(tree.scope(f"blocks.{b}.ffn"), Ht))


def _check_windows(windows: torch.Tensor, hyper: EncoderHyper) -> None:
    if windows.dim() != 3 or windows.shape[1] != hyper.window_L or windows.shape[2] != hyper.token_dim:
        raise nn.ShapeError(
            f"windows must be (B, {hyper.window_L}, {hyper.token_dim}), got {tuple(windows.shape)}")


def encode_trunk(tree: nn.ParamTree, windows, hyper: EncoderHyper) -> torch.Tensor:
    """Token projection, CLS, positions and the N-1 unmodulated blocks: (B, L+1, d)."""
    windows = nn.as_tensor(windows)
    _check_windows(windows, hyper)
    x = (windows - tree["token_mean"]) / tree["token_std"]
    tok = nn.linear(tree.scope("proj"), x)
    cls = tree["cls"].expand(tok.shape[0], 1, hyper.d)
    H = torch.cat([cls, tok], dim=1) + nn.positional_embedding(hyper.window_L + 1, hyper.d)
    for b in range(hyper.n_blocks - 1):
        H = _block(tree, b, H, hyper)
    return H


def modulation(tree: nn.ParamTree, e: torch.Tensor, hyper: EncoderHyper) -> list[torch.Tensor]:
    """[d_beta1, d_gamma1, d_beta2, d_gamma2], each scaled by adaln_scale."""
    out = nn.linear(tree.scope("modulation"), e) * hyper.adaln_scale
    return list(out.split(hyper.d, dim=-1))


def encode_head(tree: nn.ParamTree, H: torch.Tensor, cond: torch.Tensor | None, hyper: EncoderHyper) -> torch.Tensor:
    """Final block (AdaLN-modulated when the tree has a conditioning pathway); returns CLS rows."""
    if has_conditioning(tree):
        if cond is None:
            cond = tree["null_embedding"].expand(H.shape[0], hyper.d)
        mods = modulation(tree, cond, hyper)
    else:
        mods = None
    H = _block(tree, hyper.n_blocks - 1, H, hyper, mods)
    return H[:, 0]


def encode(tree: nn.ParamTree, windows, cond, hyper: EncoderHyper, mode: str = nn.INFER) -> torch.Tensor:
    """Mobility embeddings (B, d) for windows (B, L, 12).

    ``cond`` is None (null embedding), a (B, d) tensor of config embeddings,
    or a sequence/array of configurations to embed.  No layer here depends on
    mode; it is accepted for interface symmetry with training.
    """
    nn._check_mode(mode)
    if cond is not None and not isinstance(cond, torch.Tensor):
        cond = embed_config(tree, cond)
    return encode_head(tree, encode_trunk(tree, windows, hyper), cond, hyper)


def triplet_loss(za, zp, zn, delta: float) -> torch.Tensor:
    """Per-row hinge max(|za - zp| - |za - zn| + delta, 0)."""
    za, zp, zn = (nn.as_tensor(z) for z in (za, zp, zn))
    if not (za.shape == zp.shape == zn.shape):
        raise nn.ShapeError(f"triplet shapes differ: {tuple(za.shape)}, {tuple(zp.shape)}, {tuple(zn.shape)}")
    d_ap = torch.linalg.vector_norm(za - zp, dim=-1)
    d_an = torch.linalg.vector_norm(za - zn, dim=-1)
    return torch.clamp(d_ap - d_an + delta, min=0.0)


# -- data -------------------------------------------------------------------

@dataclass
class FleetWindows:
    """Per-vehicle token arrays, vehicle ids sorted."""

    ids: list[str]
    configs: np.ndarray  # (V, 3)
    tokens: list[np.ndarray]  # per vehicle (n_traj, H, 12)

    @classmethod
    def from_datasets(cls, datasets: Mapping[str, Sequence[Trajectory]], configs: Mapping[str, VehicleConfig]):
        ids = sorted(datasets)
        return cls(ids, np.stack([configs[i].as_array() for i in ids]),
                   [np.stack([t.tokens for t in datasets[i]]) for i in ids])

    def subset(self, index_lists: Sequence[np.ndarray]) -> "FleetWindows":
        return FleetWindows(list(self.ids), self.configs.copy(), [tok[idx] for tok, idx in zip(self.tokens, index_lists)])


def sliding_windows(tokens: np.ndarray, L: int, stride: int) -> np.ndarray:
    """All stride-spaced length-L windows of (n_traj, H, F) -> (n, L, F)."""
    H = tokens.shape[1]
    if H < L:
        raise ValueError(f"trajectory length {H} shorter than window {L}")
    starts = range(0, H - L + 1, stride)
    return np.concatenate([tokens[:, s:s + L] for s in starts], axis=0)


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_vehicle: np.ndarray
    negative_vehicle: np.ndarray
    c_anchor: np.ndarray
    c_negative: np.ndarray


def sample_triplets(fleet: FleetWindows, batch: int, rng: np.random.Generator | int, L: int) -> TripletBatch:
    """Anchor and positive from one vehicle (distinct windows), negative from another, uniformly."""
    V = len(fleet.ids)
    if V < 2:
        raise ValueError("triplet sampling needs at least two vehicles")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    va = rng.integers(0, V, size=batch)
    vn = (va + rng.integers(1, V, size=batch)) % V

    def draw(vs):
        out = np.empty((batch, L, fleet.tokens[0].shape[-1]))
        keys = np.empty((batch, 2), dtype=np.int64)
        for i, v in enumerate(vs):
            tok = fleet.tokens[v]
            j = rng.integers(0, tok.shape[0])
            s = rng.integers(0, tok.shape[1] - L + 1)
            out[i] = tok[j, s:s + L]
            keys[i] = (j, s)
        return out, keys

    anchor, ka = draw(va)
    positive, kp = draw(va)
    # re-draw positives that coincide with their anchor window
    for i in np.flatnonzero(np.all(ka == kp, axis=1)):
        tok = fleet.tokens[va[i]]
        if tok.shape[0] * (tok.shape[1] - L + 1) < 2:
            raise ValueError(f"vehicle {fleet.ids[va[i]]} has a single window; cannot form a positive pair")
        while True:
            j = rng.integers(0, tok.shape[0])
            s = rng.integers(0, tok.shape[1] - L + 1)
            if (j, s) != tuple(ka[i]):
                positive[i] = tok[j, s:s + L]
                break
    negative, _ = draw(vn)
    return TripletBatch(anchor, positive, negative, va, vn, fleet.configs[va], fleet.configs[vn])


def token_stats(fleet: FleetWindows) -> tuple[np.ndarray, np.ndarray]:
    allt = np.concatenate([t.reshape(-1, t.shape[-1]) for t in fleet.tokens])
    std = allt.std(axis=0)
    return allt.mean(axis=0), np.where(std > 1e-12, std, 1.0)


# -- training ---------------------------------------------------------------

def dual_path_loss(tree: nn.ParamTree, tb: TripletBatch, hyper: EncoderHyper,
                   drop_mask: np.ndarray | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean unconditional and conditional triplet losses for a batch.

    ``drop_mask`` (3, B) marks members whose config embedding is replaced by
    the null embedding on the conditional path.
    """
    B = len(tb.anchor)
    windows = np.concatenate([tb.anchor, tb.positive, tb.negative])
    H = encode_trunk(tree, windows, hyper)
    zu = encode_head(tree, H, None, hyper)
    l_u = triplet_loss(zu[:B], zu[B:2 * B], zu[2 * B:], hyper.margin).mean()
    if not has_conditioning(tree):
        return l_u, torch.zeros((), dtype=nn.DTYPE)
    e = embed_config(tree, np.concatenate([tb.c_anchor, tb.c_anchor, tb.c_negative]))
    if drop_mask is not None:
        m = torch.as_tensor(drop_mask.reshape(-1), dtype=torch.bool).unsqueeze(-1)
        e = torch.where(m, tree["null_embedding"].expand_as(e), e)
    zc = encode_head(tree, H, e, hyper)
    l_c = triplet_loss(zc[:B], zc[B:2 * B], zc[2 * B:], hyper.margin).mean()
    return l_u, l_c


def embed_windows(tree: nn.ParamTree, windows: np.ndarray, hyper: EncoderHyper, config=None,
                  chunk: int = 512) -> np.ndarray:
    """Inference embeddings for (n, L, 12) windows; conditional when ``config`` (3-vector) is given."""
    out = []
    with torch.no_grad():
        e = None
        if config is not None and has_conditioning(tree):
            e_one = embed_config(tree, np.asarray(config, dtype=float).reshape(1, 3))
        for i in range(0, len(windows), chunk):
            w = windows[i:i + chunk]
            if config is not None and has_conditioning(tree):
                e = e_one.expand(len(w), hyper.d)
            out.append(encode_head(tree, encode_trunk(tree, w, hyper), e, hyper).numpy())
    return np.concatenate(out) if out else np.zeros((0, hyper.d))


def vehicle_embeddings(tree: nn.ParamTree, fleet: FleetWindows, hyper: EncoderHyper,
                       conditional: bool) -> list[np.ndarray]:
    return [
        embed_windows(tree, sliding_windows(tok, hyper.window_L, hyper.window_stride), hyper,
                      cfg if conditional else None)
        for tok, cfg in zip(fleet.tokens, fleet.configs)
    ]


def separation_score(embeddings: Sequence[np.ndarray]) -> float:
    """Mean pairwise centroid distance divided by mean distance to own centroid."""
    cents = np.stack([e.mean(axis=0) for e in embeddings])
    V = len(cents)
    inter = np.mean([np.linalg.norm(cents[i] - cents[j]) for i in range(V) for j in range(i + 1, V)])
    intra = np.mean(np.concatenate([np.linalg.norm(e - c, axis=1) for e, c in zip(embeddings, cents)]))
    return float(inter / max(intra, 1e-12))


@dataclass
class EncoderLogRow:
    iter: int
    loss_u: float
    loss_c: float
    separation: float
    separation_uncond: float


@dataclass
class EncoderResult:
    tree: nn.ParamTree
    log: list[EncoderLogRow]
    best_iter: int
    best_separation: float
    train_ids: dict[str, list[int]] = field(default_factory=dict)
    val_ids: dict[str, list[int]] = field(default_factory=dict)
    seconds: float = 0.0


def split_train_val(n_per_vehicle: Sequence[int], fraction: float, seed: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Hold out ceil(fraction * n) trajectories per vehicle (at least one)."""
    rng = np.random.default_rng(seed)
    tr, va = [], []
    for n in n_per_vehicle:
        perm = rng.permutation(n)
        k = max(1, int(math.ceil(fraction * n)))
        if k >= n:
            raise ValueError("validation split leaves no training trajectories")
        va.append(np.sort(perm[:k]))
        tr.append(np.sort(perm[k:]))
    return tr, va


def train_encoder(fleet: FleetWindows, hyper: EncoderHyper, seed: int, conditioning: bool = True,
                  progress: bool = False) -> EncoderResult:
    """Dual-path triplet training with early stopping on conditional separation.

    With ``conditioning=False`` a trajectory-only encoder is trained on the
    unconditional loss alone and early-stopped on its own separation.
    """
    if len(fleet.ids) < 2:
        raise ValueError("encoder training needs at least two vehicles")
    t0 = time.perf_counter()
    tr_idx, va_idx = split_train_val([t.shape[0] for t in fleet.tokens], hyper.val_fraction, seed)
    train, val = fleet.subset(tr_idx), fleet.subset(va_idx)
    mean, std = token_stats(train)
    tree = init_encoder(hyper, seed, mean, std, conditioning=conditioning)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    def evaluate():
        sc = separation_score(vehicle_embeddings(tree, val, hyper, conditional=conditioning))
        su = separation_score(vehicle_embeddings(tree, val, hyper, conditional=False)) if conditioning else sc
        return sc, su

    log_rows: list[EncoderLogRow] = []
    sc, su = evaluate()
    log_rows.append(EncoderLogRow(0, float("nan"), float("nan"), sc, su))
    best, best_iter, best_tree, bad = sc, 0, tree.copy(), 0
    acc_u = acc_c = 0.0
    n_acc = 0
    for it in range(1, hyper.max_iters + 1):
        tb = sample_triplets(train, hyper.batch, rng, hyper.window_L)
        drop = rng.random((3, hyper.batch)) < hyper.cond_dropout
        l_u, l_c = dual_path_loss(tree, tb, hyper, drop)
        loss = l_u + l_c
        if not torch.isfinite(loss):
            raise nn.NonFiniteLossError(f"encoder loss diverged at iteration {it}: L_u={l_u.item()}, L_c={l_c.item()}")
        grads = nn.backward(loss, tree)
        nn.adam_step(tree, grads, hyper.lr)
        acc_u += l_u.item()
        acc_c += l_c.item()
        n_acc += 1
        if it % hyper.eval_every == 0 or it == hyper.max_iters:
            sc, su = evaluate()
            log_rows.append(EncoderLogRow(it, acc_u / n_acc, acc_c / n_acc, sc, su))
            acc_u = acc_c = 0.0
            n_acc = 0
            if progress:
                log.info("iter %d  L_u %.4f  L_c %.4f  sep %.3f (uncond %.3f)", it, log_rows[-1].loss_u,
                         log_rows[-1].loss_c, sc, su)
            if sc > best:
                best, best_iter, bad = sc, it, 0
                best_tree = tree.copy()
            else:
                bad += 1
                if bad >= hyper.patience:
                    break
    return EncoderResult(
        best_tree, log_rows, best_iter, best,
        {i: idx.tolist() for i, idx in zip(fleet.ids, tr_idx)},
        {i: idx.tolist() for i, idx in zip(fleet.ids, va_idx)},
        time.perf_counter() - t0,
    )


def save_encoder(path_stem: str | Path, tree: nn.ParamTree, hyper: EncoderHyper, extra: Mapping | None = None) -> None:
    """Writes ``<stem>.params.json`` and the ``<stem>.meta.json`` sidecar."""
    stem = Path(path_stem)
    tree.save(nn.sidecar(stem, ".params.json"))
    meta = {
        "hyper": asdict(hyper),
        "config_ranges": {"alpha_m": list(CONFIG_RANGES[0]), "mu_f": list(CONFIG_RANGES[1]),
                          "alpha_s": list(CONFIG_RANGES[2])},
        "conditioning": has_conditioning(tree),
    }
    meta.update(extra or {})
    nn.sidecar(stem, ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_encoder(path_stem: str | Path) -> tuple[nn.ParamTree, EncoderHyper, dict]:
    stem = Path(path_stem)
    meta = json.loads(nn.sidecar(stem, ".meta.json").read_text())
    hyper = EncoderHyper(**meta["hyper"])
    tree = init_encoder(hyper, 0, conditioning=meta.get("conditioning", True))
    tree.load(nn.sidecar(stem, ".params.json"))
    return tree, hyper, meta
