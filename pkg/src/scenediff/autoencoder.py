"""Sparse scene autoencoder with per-level pruning supervision.

The encoder reduces an occupied-voxel set through stride-2 stages into a
low-resolution latent; the decoder mirrors it, predicting at every upsampling
stage which candidate cells are occupied (a pruning mask) plus their semantic
class, and carries only surviving cells into the next stage. During training
the ground-truth hierarchy gates the stages (teacher forcing) so every
supervised cell receives gradient; at inference the predicted masks gate.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scenes import DenseLatent, GridSpec, SparseLatent, VoxelScene, downsample_scene
from .sparse import (
    CellNorm,
    SparseConv3,
    SparseDown2,
    SparseGrid,
    SparseUp2,
    conv_plan,
    down_plan,
    up_plan,
)

DICE_SMOOTH = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    levels: int = 4
    latent_dim: int = 16
    widths: tuple = (32, 64, 128, 256)
    class_count: int = 19
    level_loss_weights: tuple = (1.0, 1.0, 2.0, 3.0)  # coarsest upsample first
    prune_weight: float = 1.0
    semantic_weight: float = 1.0
    kl_weight: float = 0.002
    class_weights: tuple | None = None  # None -> inverse frequency of the dataset
    epochs: int = 50
    learning_rate: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 5

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.widths) != self.levels:
            raise ValueError(f"need {self.levels} widths, got {len(self.widths)}")
        if len(self.level_loss_weights) != self.levels:
            raise ValueError(f"need {self.levels} level loss weights")
        for w in (*self.level_loss_weights, self.prune_weight, self.semantic_weight, self.kl_weight):
            if w < 0:
                raise ValueError("loss weights must be >= 0")

    def latent_dims(self, dims: tuple[int, int, int]) -> tuple[int, int, int]:
        out = tuple(dims)
        for _ in range(self.levels):
            out = tuple((d + 1) // 2 for d in out)
        return out


# ------------------------------- losses -------------------------------

def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def bce_loss(pred, target) -> torch.Tensor:
    """Mean binary cross-entropy between occupancy probabilities and a 0/1
    target mask."""
    pred, target = _as_tensor(pred).reshape(-1), _as_tensor(target).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    if pred.numel() == 0:
        return pred.sum()
    with torch.no_grad():
        if float(pred.min()) < 0.0 or float(pred.max()) > 1.0:
            raise ValueError("mask probabilities must lie in [0, 1]")
    eps = torch.finfo(pred.dtype).eps
    p = pred.clamp(eps, 1.0 - eps)
    t = target.to(pred.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def dice_loss(pred, target) -> torch.Tensor:
    """One minus the soft dice coefficient 2|a.b| / (|a| + |b|)."""
    pred, target = _as_tensor(pred).reshape(-1), _as_tensor(target).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    with torch.no_grad():
        if pred.numel() and (float(pred.min()) < 0.0 or float(pred.max()) > 1.0):
            raise ValueError("mask probabilities must lie in [0, 1]")
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    denom = pred.sum() + t.sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def prune_loss(pred_masks, target_masks, level_weights) -> torch.Tensor:
    """Weighted sum over levels of BCE + dice between predicted and target
    occupancy masks."""
    if not (len(pred_masks) == len(target_masks) == len(level_weights)):
        raise ValueError("per-level lists must have equal length")
    total = None
    for pred, target, lam in zip(pred_masks, target_masks, level_weights):
        term = lam * (bce_loss(pred, target) + dice_loss(pred, target))
        total = term if total is None else total + term
    return total


def semantic_loss(pred_logits, targets, class_weights=None) -> torch.Tensor:
    """Sum over levels of the per-level mean (optionally class-weighted)
    cross-entropy. Targets are 1-based class ids; logits column c scores
    class c + 1."""
    if len(pred_logits) != len(targets):
        raise ValueError("per-level lists must have equal length")
    total = None
    for logits, target in zip(pred_logits, targets):
        logits = _as_tensor(logits)
        target = torch.as_tensor(np.asarray(target)).reshape(-1).long()
        if logits.ndim != 2 or logits.shape[0] != target.shape[0]:
            raise ValueError("logits must be (cells, classes) aligned with targets")
        if target.numel() == 0:
            term = logits.sum() * 0.0
        else:
            if int(target.min()) < 1 or int(target.max()) > logits.shape[1]:
                raise ValueError(f"target label outside [1, {logits.shape[1]}]")
            logp = torch.log_softmax(logits, dim=1)
            picked = logp.gather(1, (target - 1).unsqueeze(1)).squeeze(1)
            if class_weights is not None:
                w = _as_tensor(class_weights).reshape(-1).to(logits.dtype)
                picked = picked * w[target]
            term = -picked.mean()
        total = term if total is None else total + term
    return total


def latent_loss(mean, logvar) -> torch.Tensor:
    """Closed-form KL divergence of a diagonal Gaussian from the unit
    Gaussian, averaged over latent entries."""
    mean, logvar = _as_tensor(mean), _as_tensor(logvar)
    if mean.shape != logvar.shape:
        raise ValueError("mean/logvar shape mismatch")
    if not (torch.isfinite(mean).all() and torch.isfinite(logvar).all()):
        raise ValueError("non-finite latent statistics")
    return 0.5 * (torch.exp(logvar) + mean * mean - 1.0 - logvar).mean()


def vae_loss(prune, semantic, latent, cfg: VaeConfig) -> torch.Tensor:
    return (
        cfg.prune_weight * _as_tensor(prune)
        + cfg.semantic_weight * _as_tensor(semantic)
        + cfg.kl_weight * _as_tensor(latent)
    )


def inverse_frequency_weights(scenes, class_count: int) -> torch.Tensor:
    """Per-class weights proportional to inverse label frequency, normalized
    to mean one over present classes; index 0 unused."""
    counts = np.zeros(class_count + 1, dtype=np.float64)
    for scene in scenes:
        counts += np.bincount(scene.labels, minlength=class_count + 1)
    weights = np.ones(class_count + 1, dtype=np.float64)
    present = counts[1:] > 0
    if present.any():
        inv = np.zeros(class_count, dtype=np.float64)
        inv[present] = 1.0 / counts[1:][present]
        inv[present] /= inv[present].mean()
        weights[1:][present] = inv[present]
    return torch.from_numpy(weights)


# ------------------------------ scene plans ------------------------------

@dataclass
class DecodeStagePlan:
    level: int  # spatial level of this stage's output (levels-1 .. 0)
    candidates: SparseGrid
    conv: torch.Tensor
    up: tuple
    mask_target: torch.Tensor  # bool over candidate cells
    keep_idx: torch.Tensor  # candidate rows that are truly occupied
    sem_target: torch.Tensor  # int64 labels over surviving (occupied) cells


@dataclass
class ScenePlan:
    """Precomputed grids, gather plans and supervision targets for one scene."""

    scene: VoxelScene
    levels: int
    grids: list  # occupancy SparseGrid per level 0..L
    enc_conv: list
    enc_down: list
    input_feats: torch.Tensor
    latent_grid: SparseGrid  # dense grid at the latent level
    dec_stages: list  # DecodeStagePlan, coarsest stage first


def _level_dims(dims: tuple[int, int, int], levels: int) -> list[tuple[int, int, int]]:
    out = [tuple(dims)]
    for _ in range(levels):
        out.append(tuple((d + 1) // 2 for d in out[-1]))
    return out


def _input_features(scene: VoxelScene, class_count: int) -> torch.Tensor:
    coords = torch.from_numpy(scene.coords.astype(np.int64))
    labels = torch.from_numpy(scene.labels.astype(np.int64))
    one_hot = torch.zeros((len(scene), class_count))
    if len(scene):
        one_hot[torch.arange(len(scene)), labels - 1] = 1.0
    dims = torch.tensor(scene.grid.dims, dtype=torch.float32)
    centers = (coords.to(torch.float32) + 0.5) / dims - 0.5
    return torch.cat([one_hot, centers], dim=1)


def build_scene_plan(scene: VoxelScene, cfg: VaeConfig) -> ScenePlan:
    if len(scene) == 0:
        raise ValueError("cannot encode an empty scene")
    targets = downsample_scene(scene, cfg.levels)
    dims = _level_dims(scene.grid.dims, cfg.levels)

    grids, sem_by_level = [], []
    for level in range(cfg.levels + 1):
        coords = np.argwhere(targets.masks[level])
        grids.append(SparseGrid.from_numpy(dims[level], coords))
        sem = targets.semantics[level][coords[:, 0], coords[:, 1], coords[:, 2]]
        sem_by_level.append(torch.from_numpy(sem.astype(np.int64)))

    enc_conv = [conv_plan(grids[level]) for level in range(cfg.levels)]
    enc_down = [down_plan(grids[level], grids[level + 1]) for level in range(cfg.levels)]

    latent_grid = SparseGrid.full(dims[cfg.levels])
    dec_stages = []
    parent = latent_grid
    for level in range(cfg.levels - 1, -1, -1):
        candidates = parent.children(fine_dims=dims[level])
        _, in_occupied = grids[level].lookup(candidates.coords)
        dec_stages.append(
            DecodeStagePlan(
                level=level,
                candidates=candidates,
                conv=conv_plan(candidates),
                up=up_plan(parent, candidates),
                mask_target=in_occupied,
                keep_idx=in_occupied.nonzero().squeeze(1),
                sem_target=sem_by_level[level],
            )
        )
        parent = grids[level]

    return ScenePlan(
        scene=scene,
        levels=cfg.levels,
        grids=grids,
        enc_conv=enc_conv,
        enc_down=enc_down,
        input_feats=_input_features(scene, cfg.class_count),
        latent_grid=latent_grid,
        dec_stages=dec_stages,
    )


# ------------------------------- model -------------------------------

@dataclass
class EncoderOutput:
    coords: np.ndarray  # latent-grid occupancy, canonical order
    latent_dims: tuple
    mean: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor

    def to_sparse_latent(self, which: str = "sample") -> SparseLatent:
        feats = {"sample": self.sample, "mean": self.mean}[which]
        return SparseLatent(self.latent_dims, self.coords, feats.detach().numpy())


@dataclass
class DecodedLevel:
    level: int
    candidate_coords: np.ndarray
    mask_probs: np.ndarray
    survivor_coords: np.ndarray
    survivor_logits: np.ndarray


@dataclass
class DecoderOutput:
    levels: list
    scene: VoxelScene
    empty: bool


class SceneEncoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.widths
        self.stem = nn.Linear(cfg.class_count + 3, w[0])
        self.convs = nn.ModuleList(SparseConv3(w[l], w[l]) for l in range(cfg.levels))
        self.norms = nn.ModuleList(CellNorm(w[l]) for l in range(cfg.levels))
        self.downs = nn.ModuleList(
            SparseDown2(w[l], w[min(l + 1, cfg.levels - 1)]) for l in range(cfg.levels)
        )
        self.out_norm = CellNorm(w[-1])
        self.head_mean = nn.Linear(w[-1], cfg.latent_dim)
        self.head_logvar = nn.Linear(w[-1], cfg.latent_dim)
        self.act = nn.SiLU()

    def forward(self, plan: ScenePlan) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.stem(plan.input_feats.to(self.stem.weight.dtype))
        for l in range(len(self.convs)):
            f = self.act(self.norms[l](self.convs[l](f, plan.enc_conv[l])))
            f = self.downs[l](f, plan.enc_down[l])
        f = self.act(self.out_norm(f))
        return self.head_mean(f), self.head_logvar(f)


class PruningDecoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Linear(cfg.latent_dim, w[-1])
        ups, convs, norms, mask_heads, sem_heads = [], [], [], [], []
        for level in range(cfg.levels - 1, -1, -1):
            in_w = w[level + 1] if level + 1 <= cfg.levels - 1 else w[-1]
            ups.append(SparseUp2(in_w, w[level]))
            convs.append(SparseConv3(w[level], w[level]))
            norms.append(CellNorm(w[level]))
            mask_heads.append(nn.Linear(w[level], 1))
            sem_heads.append(nn.Linear(w[level], cfg.class_count))
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.mask_heads = nn.ModuleList(mask_heads)
        self.sem_heads = nn.ModuleList(sem_heads)
        self.act = nn.SiLU()

    def _stage(self, s: int, feats: torch.Tensor, up, conv):
        f = self.ups[s](feats, up)
        f = self.act(self.norms[s](self.convs[s](f, conv)))
        mask = torch.sigmoid(self.mask_heads[s](f).squeeze(-1))
        logits = self.sem_heads[s](f)
        return f, mask, logits

    def forward_teacher(self, latent_flat: torch.Tensor, plan: ScenePlan):
        """Teacher-forced pass: ground-truth occupancy gates every stage.
        Returns per-stage (mask probs over candidates, semantic logits over
        occupied cells), coarsest stage first."""
        f = self.stem(latent_flat)
        masks, sem_logits = [], []
        last = len(plan.dec_stages) - 1
        for s, stage in enumerate(plan.dec_stages):
            f, mask, logits = self._stage(s, f, stage.up, stage.conv)
            masks.append(mask)
            sem_logits.append(logits.index_select(0, stage.keep_idx))
            if s != last:
                f = f.index_select(0, stage.keep_idx)
        return masks, sem_logits


class SceneVae(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg)
        self.decoder = PruningDecoder(cfg)

    def encode(
        self,
        scene: VoxelScene,
        plan: ScenePlan | None = None,
        deterministic: bool = False,
        generator: torch.Generator | None = None,
    ) -> EncoderOutput:
        if plan is None:
            plan = build_scene_plan(scene, self.cfg)
        mean, logvar = self.encoder(plan)
        if deterministic:
            sample = mean
        else:
            eta = torch.empty_like(mean).normal_(generator=generator)
            sample = mean + torch.exp(0.5 * logvar) * eta
        latent_dims = self.cfg.latent_dims(scene.grid.dims)
        return EncoderOutput(
            coords=plan.grids[-1].coords.numpy().copy(),
            latent_dims=latent_dims,
            mean=mean,
            logvar=logvar,
            sample=sample,
        )

    def pack_latent(self, enc: EncoderOutput) -> torch.Tensor:
        """Dense (H, W, D, d_z) tensor, zero outside occupied latent cells."""
        h, w, d = enc.latent_dims
        c = torch.from_numpy(enc.coords.astype(np.int64))
        flat_idx = (c[:, 0] * w + c[:, 1]) * d + c[:, 2]
        dense = torch.zeros((h * w * d, self.cfg.latent_dim), dtype=enc.sample.dtype)
        return dense.index_copy(0, flat_idx, enc.sample).view(h, w, d, self.cfg.latent_dim)

    def decode(
        self,
        dense,
        grid: GridSpec,
        gate: str = "predicted",
        plan: ScenePlan | None = None,
    ) -> DecoderOutput:
        """Run the pruning decoder over a dense latent.

        gate: "predicted" prunes cells with mask prob < 0.5, "teacher" gates
        with the plan's ground-truth occupancy, "none" keeps every candidate.
        """
        if gate not in ("predicted", "teacher", "none"):
            raise ValueError(f"unknown gate mode {gate!r}")
        if gate == "teacher" and plan is None:
            raise ValueError("teacher gating requires a scene plan")
        values = dense.values if isinstance(dense, DenseLatent) else np.asarray(dense)
        dims = _level_dims(grid.dims, self.cfg.levels)
        if tuple(values.shape) != dims[-1] + (self.cfg.latent_dim,):
            raise ValueError(
                f"dense latent shape {values.shape} does not match grid {dims[-1]} "
                f"+ latent_dim {self.cfg.latent_dim}"
            )
        param_dtype = self.decoder.stem.weight.dtype
        flat = torch.as_tensor(values, dtype=param_dtype).reshape(-1, self.cfg.latent_dim)

        levels_out, emptied = [], False
        with torch.no_grad():
            parent = SparseGrid.full(dims[self.cfg.levels])
            f = self.decoder.stem(flat)
            for s, level in enumerate(range(self.cfg.levels - 1, -1, -1)):
                if len(parent) == 0:
                    levels_out.append(
                        DecodedLevel(
                            level,
                            np.zeros((0, 3), np.int32),
                            np.zeros((0,), np.float32),
                            np.zeros((0, 3), np.int32),
                            np.zeros((0, self.cfg.class_count), np.float32),
                        )
                    )
                    continue
                candidates = parent.children(fine_dims=dims[level])
                f, mask, logits = self.decoder._stage(
                    s, f, up_plan(parent, candidates), conv_plan(candidates)
                )
                if gate == "predicted":
                    keep = mask >= 0.5
                elif gate == "none":
                    keep = torch.ones_like(mask, dtype=torch.bool)
                else:
                    _, keep = plan.grids[level].lookup(candidates.coords)
                levels_out.append(
                    DecodedLevel(
                        level=level,
                        candidate_coords=candidates.coords.numpy().astype(np.int32),
                        mask_probs=mask.numpy().astype(np.float32),
                        survivor_coords=candidates.coords[keep].numpy().astype(np.int32),
                        survivor_logits=logits[keep].numpy().astype(np.float32),
                    )
                )
                if not bool(keep.any()):
                    emptied = True
                    parent = SparseGrid(dims[level], torch.zeros((0, 3), dtype=torch.int64))
                    f = f[:0]
                    continue
                # candidate coords are key-sorted, so the boolean subset stays sorted
                parent = SparseGrid(dims[level], candidates.coords[keep])
                f = f[keep]

        last = levels_out[-1]
        if last.survivor_coords.shape[0] == 0:
            scene = VoxelScene(grid, np.zeros((0, 3)), np.zeros((0,)), self.cfg.class_count)
            emptied = True
        else:
            labels = last.survivor_logits.argmax(axis=1) + 1
            scene = VoxelScene(grid, last.survivor_coords, labels, self.cfg.class_count)
        return DecoderOutput(levels=levels_out, scene=scene, empty=emptied)


# ------------------------------- training -------------------------------

def _phase_weights(cfg: VaeConfig, epoch: int, base_weights: torch.Tensor) -> torch.Tensor | None:
    """Class-weighted cross-entropy for the first half of training, unweighted
    afterwards."""
    if epoch < cfg.epochs // 2:
        return base_weights
    return None


def learning_rate_at(cfg: VaeConfig, epoch: int) -> float:
    return cfg.learning_rate * (cfg.lr_decay ** (epoch // cfg.lr_decay_every))


def _training_losses(model: SceneVae, plan: ScenePlan, cfg: VaeConfig, weights, generator):
    enc = model.encode(plan.scene, plan=plan, generator=generator)
    latent_flat = model.pack_latent(enc).reshape(-1, cfg.latent_dim)
    masks, sem_logits = model.decoder.forward_teacher(latent_flat, plan)
    targets = [stage.mask_target for stage in plan.dec_stages]
    sem_targets = [stage.sem_target for stage in plan.dec_stages]
    p = prune_loss(masks, targets, cfg.level_loss_weights)
    s = semantic_loss(sem_logits, sem_targets, weights)
    k = latent_loss(enc.mean, enc.logvar)
    return p, s, k


def train_vae(scenes, cfg: VaeConfig, seed: int = 0, log_every: int | None = None):
    """Optimize a SceneVae on the given scenes. Deterministic for a fixed
    seed. Returns (model, per-epoch metrics list)."""
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    model = SceneVae(cfg)
    plans = [build_scene_plan(s, cfg) for s in scenes]
    base_weights = (
        torch.as_tensor(cfg.class_weights, dtype=torch.float64)
        if cfg.class_weights is not None
        else inverse_frequency_weights(scenes, cfg.class_count)
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed + 1)
    order_gen = np.random.default_rng(seed + 2)
    log = []
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate_at(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            weights = _phase_weights(cfg, epoch, base_weights)
            sums = np.zeros(4)
            for i in order_gen.permutation(len(plans)):
                opt.zero_grad()
                p, s, k = _training_losses(model, plans[i], cfg, weights, gen)
                total = vae_loss(p, s, k, cfg)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}: prune={float(p)} "
                        f"semantic={float(s)} kl={float(k)}"
                    )
                total.backward()
                opt.step()
                sums += [float(total.detach()), float(p.detach()), float(s.detach()), float(k.detach())]
            entry = {
                "epoch": epoch,
                "lr": lr,
                "weighted_phase": weights is not None,
                "loss": sums[0] / len(plans),
                "prune": sums[1] / len(plans),
                "semantic": sums[2] / len(plans),
                "kl": sums[3] / len(plans),
            }
            log.append(entry)
            if log_every and epoch % log_every == 0:
                print(
                    f"epoch {epoch:4d} lr {lr:.2e} loss {entry['loss']:.4f} "
                    f"prune {entry['prune']:.4f} sem {entry['semantic']:.4f} kl {entry['kl']:.4f}"
                )
    except KeyboardInterrupt:
        # cancellation checkpoints: finish cleanly with whatever is trained
        print(f"interrupted after {len(log)} epochs; returning current parameters")
    return model, log


def refine_decoder(scenes, model: SceneVae, noise_sigma: float, cfg: VaeConfig, seed: int = 0):
    """Decoder-only fine-tuning on noise-perturbed latents; the encoder is
    frozen and bit-identical afterwards."""
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    plans = [build_scene_plan(s, cfg) for s in scenes]
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.decoder.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(seed + 1)
    order_gen = np.random.default_rng(seed + 2)
    log = []
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = np.zeros(3)
        for i in order_gen.permutation(len(plans)):
            plan = plans[i]
            with torch.no_grad():
                enc = model.encode(plan.scene, plan=plan, deterministic=True)
                dense = model.pack_latent(enc)
                if noise_sigma > 0:
                    dense = dense + noise_sigma * torch.empty_like(dense).normal_(generator=gen)
            opt.zero_grad()
            masks, sem_logits = model.decoder.forward_teacher(
                dense.reshape(-1, cfg.latent_dim), plan
            )
            p = prune_loss(masks, [st.mask_target for st in plan.dec_stages], cfg.level_loss_weights)
            s = semantic_loss(sem_logits, [st.sem_target for st in plan.dec_stages], None)
            total = cfg.prune_weight * p + cfg.semantic_weight * s
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite refine loss at epoch {epoch}")
            total.backward()
            opt.step()
            sums += [float(total.detach()), float(p.detach()), float(s.detach())]
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": sums[0] / len(plans),
                "prune": sums[1] / len(plans),
                "semantic": sums[2] / len(plans),
            }
        )
    for p in model.encoder.parameters():
        p.requires_grad_(True)
    return model, log


def encoder_checksum(model: SceneVae) -> str:
    digest = hashlib.sha256()
    for name, param in sorted(model.encoder.state_dict().items()):
        digest.update(name.encode())
        digest.update(param.detach().numpy().tobytes())
    return digest.hexdigest()


# ------------------------------ reconstruction ------------------------------

def reconstruct(model: SceneVae, scene: VoxelScene, gate: str = "predicted") -> VoxelScene:
    """Deterministic encode + decode of one scene."""
    model.eval()
    plan = build_scene_plan(scene, model.cfg)
    with torch.no_grad():
        enc = model.encode(scene, plan=plan, deterministic=True)
        dense = model.pack_latent(enc)
    return model.decode(dense.numpy(), scene.grid, gate=gate, plan=plan).scene


def reconstruction_scores(model: SceneVae, scene: VoxelScene) -> tuple[float, float]:
    """(occupancy IoU, label accuracy over the shared occupied cells)."""
    recon = reconstruct(model, scene)
    iou = scene.voxel_iou(recon)
    truth = {tuple(c): int(l) for c, l in zip(scene.coords, scene.labels)}
    hits = total = 0
    for c, lab in zip(recon.coords, recon.labels):
        key = tuple(c)
        if key in truth:
            total += 1
            hits += int(truth[key] == int(lab))
    acc = hits / total if total else 0.0
    return iou, acc


# ------------------------------ benchmark ------------------------------

def pruning_benchmark(scene: VoxelScene, cfg: VaeConfig, repeats: int = 3, model: SceneVae | None = None):
    """Per-upsampling-layer feature bytes and forward time for the decoder
    with and without pruning.

    The pruned variant gates stages with the scene's occupancy hierarchy, so
    byte counts reflect the scene structure rather than an untrained mask
    head. Bytes count float32 features held per surviving cell.
    """
    if model is None:
        torch.manual_seed(0)
        model = SceneVae(cfg)
    model.eval()
    plan = build_scene_plan(scene, cfg)
    with torch.no_grad():
        enc = model.encode(scene, plan=plan, deterministic=True)
        dense = model.pack_latent(enc).numpy()

    def run(gate: str):
        t0 = time.perf_counter()
        for _ in range(repeats):
            out = model.decode(dense, scene.grid, gate=gate, plan=plan)
        elapsed = (time.perf_counter() - t0) / repeats
        return out, elapsed

    try:
        pruned_out, pruned_time = run("teacher")
        unpruned_out, unpruned_time = run("none")
    except (RuntimeError, MemoryError) as exc:
        return {"error": "exceeded", "detail": str(exc)}

    layers = []
    for s, (pl, ul) in enumerate(zip(pruned_out.levels, unpruned_out.levels)):
        width = cfg.widths[pl.level]
        layers.append(
            {
                "layer": s + 1,
                "level": pl.level,
                "channels": width,
                "cells_unpruned": int(ul.candidate_coords.shape[0]),
                "cells_pruned": int(pl.survivor_coords.shape[0]),
                "bytes_unpruned": int(ul.candidate_coords.shape[0]) * width * 4,
                "bytes_pruned": int(pl.survivor_coords.shape[0]) * width * 4,
            }
        )
    return {
        "layers": layers,
        "forward_time_pruned": pruned_time,
        "forward_time_unpruned": unpruned_time,
    }
