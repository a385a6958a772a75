"""Latent denoising diffusion over the packed scene latent.

The forward process corrupts a dense latent with a linear beta schedule; the
model predicts the v-mix of noise and data, which converges faster than plain
noise prediction and converts back to noise algebraically for the ancestral
sampling update. Conditioning on a LiDAR cloud follows classifier-free
guidance: the condition token is dropped with probability rho during
training, and conditioned/unconditioned predictions are blended at inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .autoencoder import SceneVae, TrainingDiverged
from .scenes import GridSpec, voxelize
from .sparse import CellNorm, SparseConv3, SparseDown2, SparseGrid, conv_plan, down_plan


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise factors beta_1..beta_T with the derived alpha products.
    Steps are 1-based; index t-1 addresses step t."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("schedule needs at least two steps")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if np.any(np.diff(beta) <= 0):
            raise ValueError("beta must be strictly increasing")
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if np.any(np.diff(alpha_bar) >= 0) or alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must decrease strictly and stay positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def steps(self) -> int:
        return self.beta.size

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.steps:
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        return t

    def beta_t(self, t: int) -> float:
        return float(self.beta[self._check(t) - 1])

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[self._check(t) - 1])

    def alpha_bar_t(self, t: int) -> float:
        return float(self.alpha_bar[self._check(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar at t-1, with the empty product 1 at t=1."""
        t = self._check(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def snr(self, t: int) -> float:
        ab = self.alpha_bar_t(t)
        return ab / (1.0 - ab)


def make_schedule(beta_start: float, beta_end: float, steps: int) -> NoiseSchedule:
    """Linear interpolation between the endpoint noise factors."""
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    return NoiseSchedule(np.linspace(beta_start, beta_end, steps))


@dataclass(frozen=True)
class DiffusionConfig:
    beta_start: float = 1e-4
    beta_end: float = 0.015
    steps: int = 1000
    snr_gamma: float = 5.0
    epochs: int = 150
    learning_rate: float = 2e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 50
    conditional: bool = False
    null_prob: float = 0.1  # rho: chance the condition token is dropped
    guidance_weight: float = 2.0
    latent_dim: int = 16
    levels: int = 4  # scene-to-latent halvings, matches the autoencoder
    base_channels: int = 64
    depth: int = 2  # spatial halvings inside the denoiser
    time_embed_dim: int = 64
    condition_channels: int = 16

    def __post_init__(self):
        if self.snr_gamma <= 0:
            raise ValueError("snr_gamma must be > 0")
        if not 0.0 <= self.null_prob <= 1.0:
            raise ValueError("null_prob must lie in [0, 1]")
        if self.guidance_weight < 0:
            raise ValueError("guidance_weight must be >= 0")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.beta_start, self.beta_end, self.steps)


# ----------------------------- array ops -----------------------------
#
# These accept numpy arrays or torch tensors of shape (H, W, D, d_z) and
# preserve dtype, so double-precision oracles run through the same code.

def corrupt(z0, t: int, eps, schedule: NoiseSchedule):
    """Noisy latent at step t: sqrt(ab) z0 + sqrt(1 - ab) eps."""
    if tuple(np.shape(z0)) != tuple(np.shape(eps)):
        raise ValueError("z0 and eps shape mismatch")
    ab = schedule.alpha_bar_t(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def v_target(z0, eps, t: int, schedule: NoiseSchedule):
    """Training target: sqrt(ab) eps - sqrt(1 - ab) z0."""
    if tuple(np.shape(z0)) != tuple(np.shape(eps)):
        raise ValueError("z0 and eps shape mismatch")
    ab = schedule.alpha_bar_t(t)
    return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * z0


def eps_from_v(v, zt, t: int, schedule: NoiseSchedule):
    """Invert the v-mix: eps = sqrt(ab) v + sqrt(1 - ab) zt."""
    if tuple(np.shape(v)) != tuple(np.shape(zt)):
        raise ValueError("v and zt shape mismatch")
    ab = schedule.alpha_bar_t(t)
    return math.sqrt(ab) * v + math.sqrt(1.0 - ab) * zt


def min_snr_weight(t: int, schedule: NoiseSchedule, gamma: float) -> float:
    """Per-step loss weight min(SNR, gamma) / (SNR + 1) for v-prediction."""
    snr = schedule.snr(t)
    return min(snr, gamma) / (snr + 1.0)


def guided_v(v_null, v_cond, weight: float):
    """Classifier-free blend of unconditioned and conditioned predictions."""
    return v_null + weight * (v_cond - v_null)


def sample_step(zt, v_pred, t: int, schedule: NoiseSchedule, noise=None, generator=None):
    """One ancestral update from step t to t-1.

    The predicted noise is removed with coefficient (1 - alpha_t) /
    sqrt(1 - alpha_bar_t); fresh noise scaled by
    (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t is injected except at
    the terminal step t=1, which is deterministic.
    """
    t = schedule._check(t)
    eps = eps_from_v(v_pred, zt, t, schedule)
    a = schedule.alpha_t(t)
    ab = schedule.alpha_bar_t(t)
    mean = zt - (1.0 - a) / math.sqrt(1.0 - ab) * eps
    if t == 1:
        return mean
    coeff = (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab) * schedule.beta_t(t)
    if noise is None:
        if isinstance(zt, torch.Tensor):
            noise = torch.empty_like(zt).normal_(generator=generator)
        else:
            noise = np.random.default_rng().standard_normal(np.shape(zt))
    return mean + coeff * noise


# ----------------------------- condition token -----------------------------

@dataclass(frozen=True)
class ConditionToken:
    """Encoded conditioning cloud, or the null token (values None)."""

    values: torch.Tensor | None  # (C, h, w, d)

    @classmethod
    def null(cls) -> "ConditionToken":
        return cls(values=None)

    @property
    def is_null(self) -> bool:
        return self.values is None


class ConditionEncoder(nn.Module):
    """Sparse occupancy encoder: voxelized cloud -> dense token at the latent
    resolution."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        w = cfg.condition_channels
        self.levels = cfg.levels
        self.stem = nn.Linear(4, w)
        self.convs = nn.ModuleList(SparseConv3(w, w) for _ in range(cfg.levels))
        self.norms = nn.ModuleList(CellNorm(w) for _ in range(cfg.levels))
        self.downs = nn.ModuleList(SparseDown2(w, w) for _ in range(cfg.levels))
        self.act = nn.SiLU()

    def forward(self, points: np.ndarray, grid: GridSpec) -> ConditionToken:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if points.shape[0] == 0:
            raise ValueError("empty conditioning cloud; pass the null token instead")
        cloud = voxelize(points, np.ones(points.shape[0], dtype=np.int64), grid, class_count=1)
        if len(cloud) == 0:
            raise ValueError("conditioning cloud lies entirely outside the grid")
        sg = SparseGrid.from_numpy(grid.dims, cloud.coords.astype(np.int64))
        dims = torch.tensor(grid.dims, dtype=torch.float32)
        feats = torch.cat(
            [
                torch.ones((len(sg), 1)),
                (sg.coords.to(torch.float32) + 0.5) / dims - 0.5,
            ],
            dim=1,
        )
        f = self.stem(feats)
        for level in range(self.levels):
            f = self.act(self.norms[level](self.convs[level](f, conv_plan(sg))))
            coarse = sg.coarsen()
            f = self.downs[level](f, down_plan(sg, coarse))
            sg = coarse
        dense = torch.zeros(sg.dims + (f.shape[1],), dtype=f.dtype)
        c = sg.coords
        flat = (c[:, 0] * sg.dims[1] + c[:, 1]) * sg.dims[2] + c[:, 2]
        dense = dense.view(-1, f.shape[1]).index_copy(0, flat, f).view(*sg.dims, f.shape[1])
        return ConditionToken(values=dense.permute(3, 0, 1, 2).contiguous())


# ----------------------------- denoiser network -----------------------------

def sinusoidal_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = float(t) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb


class ModulatedBlock(nn.Module):
    """Two 3x3x3 convolutions with multiplicative step/condition modulation."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, cond_ch: int | None):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.cond_proj = nn.Conv3d(cond_ch, out_ch, 1) if cond_ch else None
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, t_emb, cond):
        h = self.act(self.norm1(self.conv1(x)))
        scale = 1.0 + self.time_proj(t_emb).view(1, -1, 1, 1, 1)
        h = h * scale
        if cond is not None:
            if self.cond_proj is None:
                raise ValueError("block built without conditioning support")
            c = nn.functional.interpolate(cond, size=h.shape[2:], mode="nearest")
            h = h * (1.0 + self.cond_proj(c))
        h = self.act(self.norm2(self.conv2(h)))
        return h + self.skip(x)


def _stride_for(dims: tuple[int, int, int]) -> tuple[int, int, int]:
    # halve only the axes that stay integral
    return tuple(2 if d % 2 == 0 and d > 1 else 1 for d in dims)


class LatentDenoiser(nn.Module):
    """Dense 3-D U-shaped v-predictor over the (H, W, D, d_z) latent."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        cond_ch = cfg.condition_channels if cfg.conditional else None
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.stem = nn.Conv3d(cfg.latent_dim, ch, 3, padding=1)
        self.down_blocks = nn.ModuleList(
            ModulatedBlock(ch * 2**i, ch * 2**i, cfg.time_embed_dim, cond_ch)
            for i in range(cfg.depth)
        )
        self.down_convs = nn.ModuleList(
            nn.Conv3d(ch * 2**i, ch * 2 ** (i + 1), 1) for i in range(cfg.depth)
        )
        mid_ch = ch * 2**cfg.depth
        self.mid = ModulatedBlock(mid_ch, mid_ch, cfg.time_embed_dim, cond_ch)
        self.up_convs = nn.ModuleList(
            nn.Conv3d(ch * 2 ** (i + 1), ch * 2**i, 1) for i in reversed(range(cfg.depth))
        )
        self.up_blocks = nn.ModuleList(
            ModulatedBlock(ch * 2**i, ch * 2**i, cfg.time_embed_dim, cond_ch)
            for i in reversed(range(cfg.depth))
        )
        self.head = nn.Conv3d(ch, cfg.latent_dim, 3, padding=1)

    def forward(self, zt: torch.Tensor, t: int, token: ConditionToken | None = None) -> torch.Tensor:
        """zt: (H, W, D, d_z) tensor; returns the v prediction, same shape."""
        cond = None
        if token is not None and not token.is_null:
            cond = token.values.unsqueeze(0).to(zt.dtype)
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_embed_dim).to(zt.dtype))
        x = zt.permute(3, 0, 1, 2).unsqueeze(0)
        x = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.down_convs):
            x = block(x, t_emb, cond)
            skips.append(x)
            stride = _stride_for(x.shape[2:])
            x = down(nn.functional.avg_pool3d(x, kernel_size=stride, stride=stride))
        x = self.mid(x, t_emb, cond)
        for up, block, skip in zip(self.up_convs, self.up_blocks, reversed(skips)):
            x = nn.functional.interpolate(x, size=skip.shape[2:], mode="nearest")
            x = block(up(x) + skip, t_emb, cond)
        return self.head(x).squeeze(0).permute(1, 2, 3, 0)


class LatentDdpm(nn.Module):
    """Denoiser plus (optionally) the jointly trained condition encoder."""

    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser = LatentDenoiser(cfg)
        self.condition_encoder = ConditionEncoder(cfg) if cfg.conditional else None

    def forward(self, zt, t, token=None):
        return self.denoiser(zt, t, token)

    def encode_condition(self, points, grid: GridSpec) -> ConditionToken:
        if self.condition_encoder is None:
            raise ValueError("model was built without conditioning")
        return self.condition_encoder(points, grid)


# ----------------------------- training -----------------------------

def training_step(
    model,
    z0: torch.Tensor,
    cond: ConditionToken | None,
    cfg: DiffusionConfig,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Single v-prediction objective evaluation: draw (t, eps), corrupt, drop
    the condition with probability rho, and weight the squared residual by the
    Min-SNR rule."""
    t = int(torch.randint(1, schedule.steps + 1, (1,), generator=generator))
    eps = torch.empty_like(z0).normal_(generator=generator)
    zt = corrupt(z0, t, eps, schedule)
    target = v_target(z0, eps, t, schedule)
    token = cond
    if token is not None and not token.is_null and cfg.null_prob > 0:
        if float(torch.rand((), generator=generator)) < cfg.null_prob:
            token = ConditionToken.null()
    v_pred = model(zt, t, token)
    weight = min_snr_weight(t, schedule, cfg.snr_gamma)
    loss = weight * torch.mean((v_pred - target) ** 2)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite diffusion loss at step t={t}")
    return loss


def ddpm_learning_rate_at(cfg: DiffusionConfig, epoch: int) -> float:
    return cfg.learning_rate * (cfg.lr_decay ** (epoch // cfg.lr_decay_every))


def train_ddpm(latents, cfg: DiffusionConfig, seed: int = 0, conditions=None, log_every=None):
    """Optimize a LatentDdpm over dense latents (numpy (H, W, D, d_z) arrays).

    conditions: optional per-latent raw clouds already encoded as
    ConditionToken (null tokens allowed). Deterministic under a fixed seed.
    """
    if len(latents) == 0:
        raise ValueError("empty latent set")
    torch.manual_seed(seed)
    model = LatentDdpm(cfg)
    schedule = cfg.schedule()
    tensors = [torch.as_tensor(np.asarray(z), dtype=torch.float32) for z in latents]
    if conditions is None:
        conditions = [None] * len(tensors)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed + 1)
    order_gen = np.random.default_rng(seed + 2)
    log = []
    try:
        for epoch in range(cfg.epochs):
            lr = ddpm_learning_rate_at(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            total = 0.0
            for i in order_gen.permutation(len(tensors)):
                opt.zero_grad()
                loss = training_step(model, tensors[i], conditions[i], cfg, schedule, gen)
                loss.backward()
                opt.step()
                total += float(loss.detach())
            log.append({"epoch": epoch, "lr": lr, "loss": total / len(tensors)})
            if log_every and epoch % log_every == 0:
                print(f"epoch {epoch:4d} lr {lr:.2e} loss {log[-1]['loss']:.5f}")
    except KeyboardInterrupt:
        print(f"interrupted after {len(log)} epochs; returning current parameters")
    return model, log


# ----------------------------- generation -----------------------------

def sample_latent(
    model,
    cfg: DiffusionConfig,
    latent_dims: tuple[int, int, int],
    seed: int,
    cond: ConditionToken | None = None,
    guidance_weight: float | None = None,
) -> np.ndarray:
    """Ancestral chain from pure noise down to a clean latent."""
    schedule = cfg.schedule()
    gen = torch.Generator().manual_seed(seed)
    z = torch.empty(latent_dims + (cfg.latent_dim,)).normal_(generator=gen)
    w = cfg.guidance_weight if guidance_weight is None else guidance_weight
    model.eval()
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            v = model(z, t, None)
            if cond is not None and not cond.is_null:
                v = guided_v(v, model(z, t, cond), w)
            z = sample_step(z, v, t, schedule, generator=gen)
    return z.numpy()


def generate(
    model,
    vae: SceneVae,
    cfg: DiffusionConfig,
    grid: GridSpec,
    seed: int,
    count: int = 1,
    cond: ConditionToken | None = None,
    guidance_weight: float | None = None,
    latent_scale: float = 1.0,
):
    """Sample `count` scenes; stream i uses seed + i so scenes are independent
    and reproducible. Returns a list of (VoxelScene, empty_flag)."""
    latent_dims = grid.dims
    for _ in range(cfg.levels):
        latent_dims = tuple((d + 1) // 2 for d in latent_dims)
    out = []
    for i in range(count):
        z = sample_latent(model, cfg, latent_dims, seed + i, cond, guidance_weight)
        decoded = vae.decode((z * latent_scale).astype(np.float32), grid, gate="predicted")
        out.append((decoded.scene, decoded.empty))
    return out


# ----------------------------- latent cache -----------------------------

def write_latent_cache(directory, entries: dict, fingerprint: str, scale: float = 1.0):
    """entries: scene id -> dense latent array. The scale divides stored
    latents so the diffusion model sees roughly unit variance; zeros stay
    zeros."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene_id, latent in entries.items():
        np.savez_compressed(directory / f"{scene_id}.npz", latent=np.asarray(latent, np.float32))
    meta = {"fingerprint": fingerprint, "scale": scale, "count": len(entries)}
    (directory / "cache_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_latent_cache(directory):
    """Returns (ids, latents, meta); latents come back in id order."""
    directory = Path(directory)
    meta = json.loads((directory / "cache_meta.json").read_text())
    ids = sorted(p.stem for p in directory.glob("*.npz"))
    latents = [np.load(directory / f"{i}.npz")["latent"] for i in ids]
    return ids, latents, meta


def latent_normalization_scale(latents) -> float:
    """Global std over occupied entries; 1.0 for an all-zero set."""
    vals = np.concatenate([np.asarray(z).ravel() for z in latents])
    nz = vals[vals != 0]
    std = float(nz.std()) if nz.size else 0.0
    return std if std > 1e-8 else 1.0
