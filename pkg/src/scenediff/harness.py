"""Downstream segmentation training with real/synthetic dataset mixing.

Two mixing modes: "fill" replaces a slice of the real training set with
synthetic scenes so the total count stays fixed, and "extend" keeps all real
scenes and adds a synthetic fraction on top. The segmentation network reuses
the sparse U-Net machinery; its active sets follow the known input occupancy,
so no pruning is involved.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .autoencoder import TrainingDiverged, semantic_loss
from .labels import MOVING_CLASS_IDS
from .metrics import ConfusionMatrix
from .scenes import VoxelScene, downsample_scene
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


# ------------------------------- mixing -------------------------------

@dataclass(frozen=True)
class MixSpec:
    """How to compose one training set from a real and a synthetic pool."""

    real_fraction: float = 1.0
    synth_source: str = ""
    mode: str = "fill"  # "fill": synth tops up to total; "extend": synth adds on
    total: int | None = None  # fill-mode target size; defaults to the real pool size
    extend_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real_fraction must lie in [0, 1]")
        if self.mode not in ("fill", "extend"):
            raise ValueError(f"unknown mix mode {self.mode!r}")
        if self.extend_fraction < 0:
            raise ValueError("extend_fraction must be >= 0")

    def counts(self, real_pool_size: int) -> tuple[int, int]:
        """(real count, synthetic count); fractional counts floor."""
        if self.mode == "fill":
            total = real_pool_size if self.total is None else self.total
            n_real = math.floor(self.real_fraction * total)
            return n_real, total - n_real
        total = real_pool_size if self.total is None else self.total
        return total, math.floor(self.extend_fraction * total)


def mix_datasets(real_ids, synth_ids, spec: MixSpec, seed: int) -> list:
    """Uniform without-replacement selection from each pool, shuffled into a
    canonical order. The real selection depends only on (real pool, seed), so
    a 100%-real mix is identical across synthetic sources."""
    real_pool = sorted(real_ids)
    synth_pool = sorted(synth_ids)
    n_real, n_synth = spec.counts(len(real_pool))
    if n_real > len(real_pool):
        raise ValueError(f"need {n_real} real ids, pool has {len(real_pool)}")
    if n_synth > len(synth_pool):
        raise ValueError(f"need {n_synth} synthetic ids, pool has {len(synth_pool)}")
    real_rng = np.random.default_rng([seed, 0])
    picked = [real_pool[i] for i in real_rng.permutation(len(real_pool))[:n_real]]
    if n_synth:
        synth_rng = np.random.default_rng([seed, 1])
        picked += [synth_pool[i] for i in synth_rng.permutation(len(synth_pool))[:n_synth]]
    if len(set(picked)) != len(picked):
        raise ValueError("real and synthetic pools share ids")
    shuffle_rng = np.random.default_rng([seed, 2])
    return [picked[i] for i in shuffle_rng.permutation(len(picked))]


def derive_cell_seed(experiment_id: str, cell_id: str) -> int:
    digest = hashlib.sha256(f"{experiment_id}:{cell_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


# --------------------------- segmentation model ---------------------------

@dataclass(frozen=True)
class SegmenterConfig:
    levels: int = 3
    widths: tuple = (16, 32, 64)
    class_count: int = 19
    epochs: int = 15
    learning_rate: float = 0.24
    momentum: float = 0.9
    ignored_classes: frozenset = field(default_factory=lambda: frozenset(MOVING_CLASS_IDS))
    feature_tap_level: int = 0  # decoder level whose pooled features describe a scene

    def __post_init__(self):
        if len(self.widths) != self.levels:
            raise ValueError(f"need {self.levels} widths")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def cosine_lr(cfg: SegmenterConfig, epoch: int) -> float:
    """Cosine annealing from the base rate at epoch zero down to zero at the
    final epoch."""
    if cfg.epochs == 1:
        return cfg.learning_rate
    phase = math.pi * epoch / (cfg.epochs - 1)
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(phase))


@dataclass
class SegPlan:
    scene: VoxelScene
    grids: list
    conv: list  # per level 0..L-1
    down: list  # level l -> l+1
    up: list  # level l+1 -> l, stage order coarse->fine
    input_feats: torch.Tensor
    target: torch.Tensor


def build_seg_plan(scene: VoxelScene, cfg: SegmenterConfig) -> SegPlan:
    if len(scene) == 0:
        raise ValueError("cannot segment an empty scene")
    targets = downsample_scene(scene, cfg.levels)
    dims = [scene.grid.dims]
    for _ in range(cfg.levels):
        dims.append(tuple((d + 1) // 2 for d in dims[-1]))
    grids = [
        SparseGrid.from_numpy(dims[level], np.argwhere(targets.masks[level]))
        for level in range(cfg.levels + 1)
    ]
    conv = [conv_plan(grids[level]) for level in range(cfg.levels)]
    down = [down_plan(grids[level], grids[level + 1]) for level in range(cfg.levels)]
    up = [up_plan(grids[level + 1], grids[level]) for level in reversed(range(cfg.levels))]
    coords = torch.from_numpy(scene.coords.astype(np.int64))
    dim_t = torch.tensor(scene.grid.dims, dtype=torch.float32)
    feats = torch.cat(
        [torch.ones((len(scene), 1)), (coords.to(torch.float32) + 0.5) / dim_t - 0.5], dim=1
    )
    return SegPlan(
        scene=scene,
        grids=grids,
        conv=conv,
        down=down,
        up=up,
        input_feats=feats,
        target=torch.from_numpy(scene.labels.astype(np.int64)),
    )


class SegmenterNet(nn.Module):
    """Sparse U-Net over the known occupancy; per-voxel class logits."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Linear(4, w[0])
        self.enc_convs = nn.ModuleList(SparseConv3(w[l], w[l]) for l in range(cfg.levels))
        self.enc_norms = nn.ModuleList(CellNorm(w[l]) for l in range(cfg.levels))
        self.downs = nn.ModuleList(
            SparseDown2(w[l], w[min(l + 1, cfg.levels - 1)]) for l in range(cfg.levels)
        )
        ups, dec_convs, dec_norms = [], [], []
        for level in reversed(range(cfg.levels)):
            in_w = w[level + 1] if level + 1 <= cfg.levels - 1 else w[-1]
            ups.append(SparseUp2(in_w, w[level]))
            dec_convs.append(SparseConv3(w[level], w[level]))
            dec_norms.append(CellNorm(w[level]))
        self.ups = nn.ModuleList(ups)
        self.dec_convs = nn.ModuleList(dec_convs)
        self.dec_norms = nn.ModuleList(dec_norms)
        self.head = nn.Linear(w[0], cfg.class_count)
        self.act = nn.SiLU()

    def forward(self, plan: SegPlan, return_features: bool = False):
        f = self.stem(plan.input_feats.to(self.stem.weight.dtype))
        skips = []
        for l in range(self.cfg.levels):
            f = self.act(self.enc_norms[l](self.enc_convs[l](f, plan.conv[l])))
            skips.append(f)
            f = self.downs[l](f, plan.down[l])
        taps = {}
        for s, level in enumerate(reversed(range(self.cfg.levels))):
            f = self.ups[s](f, plan.up[s]) + skips[level]
            f = self.act(self.dec_norms[s](self.dec_convs[s](f, plan.conv[level])))
            taps[level] = f
        logits = self.head(f)
        if return_features:
            return logits, taps
        return logits

    def scene_feature(self, plan: SegPlan) -> np.ndarray:
        """Global-average-pooled decoder features at the configured tap."""
        with torch.no_grad():
            _, taps = self.forward(plan, return_features=True)
            tap = taps[self.cfg.feature_tap_level]
            return tap.mean(dim=0).numpy()


def train_segmenter(scenes, cfg: SegmenterConfig, seed: int = 0, log_every=None):
    """SGD with cosine-annealed learning rate; per-epoch training confusion
    matrices are kept in the log. Deterministic under a fixed seed."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    model = SegmenterNet(cfg)
    plans = [build_seg_plan(s, cfg) for s in scenes]
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    order_rng = np.random.default_rng(seed + 1)
    log = []
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(cfg, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            conf = ConfusionMatrix.empty(cfg.class_count, ignored=cfg.ignored_classes)
            total = 0.0
            for i in order_rng.permutation(len(plans)):
                plan = plans[i]
                opt.zero_grad()
                logits = model(plan)
                loss = semantic_loss([logits], [plan.target])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite segmentation loss at epoch {epoch}")
                loss.backward()
                opt.step()
                total += float(loss.detach())
                conf.add(plan.target.numpy(), logits.detach().argmax(dim=1).numpy() + 1)
            log.append({"epoch": epoch, "lr": lr, "loss": total / len(plans), "confusion": conf})
            if log_every and epoch % log_every == 0:
                print(f"epoch {epoch:3d} lr {lr:.4f} loss {log[-1]['loss']:.4f}")
    except KeyboardInterrupt:
        print(f"interrupted after {len(log)} epochs; returning current parameters")
    return model, log


def evaluate_segmenter(model: SegmenterNet, scenes, ignored=None) -> ConfusionMatrix:
    """Accumulated confusion matrix over labeled scenes."""
    cfg = model.cfg
    ignored = cfg.ignored_classes if ignored is None else frozenset(ignored)
    conf = ConfusionMatrix.empty(cfg.class_count, ignored=ignored)
    model.eval()
    with torch.no_grad():
        for scene in scenes:
            if scene.class_count > cfg.class_count:
                raise ValueError(
                    f"scene has {scene.class_count} classes, model supports {cfg.class_count}"
                )
            plan = build_seg_plan(scene, cfg)
            logits = model(plan)
            conf.add(plan.target.numpy(), logits.argmax(dim=1).numpy() + 1)
    return conf


def scene_features(model: SegmenterNet, scenes) -> np.ndarray:
    """(n_scenes, d) pooled feature matrix for MMD evaluation."""
    model.eval()
    return np.stack([model.scene_feature(build_seg_plan(s, model.cfg)) for s in scenes])


# ----------------------------- experiments -----------------------------

def run_experiment(
    cells,
    real_scenes: dict,
    synth_scenes_by_source: dict,
    cfg: SegmenterConfig,
    eval_scenes,
    experiment_id: str = "mix",
):
    """Train one segmenter per (cell, source) and evaluate each on the held
    scenes. cells: list of (cell_id, MixSpec). Failures are recorded per cell
    and the run continues. Rows are keyed by cell, so execution order never
    matters."""
    from .metrics import iou as compute_iou

    rows = []
    for cell_id, spec in cells:
        seed = derive_cell_seed(experiment_id, cell_id)
        try:
            synth_pool = synth_scenes_by_source.get(spec.synth_source, {})
            ids = mix_datasets(real_scenes.keys(), synth_pool.keys(), spec, seed)
            lookup = {**real_scenes, **synth_pool}
            model, _ = train_segmenter([lookup[i] for i in ids], cfg, seed=seed)
            conf = evaluate_segmenter(model, eval_scenes)
            _, miou = compute_iou(conf)
            rows.append(
                {
                    "cell": cell_id,
                    "source": spec.synth_source,
                    "mode": spec.mode,
                    "real_fraction": spec.real_fraction,
                    "extend_fraction": spec.extend_fraction,
                    "train_size": len(ids),
                    "miou": miou,
                    "confusion": conf,
                    "error": "",
                }
            )
        except Exception as exc:  # record and continue
            rows.append(
                {
                    "cell": cell_id,
                    "source": spec.synth_source,
                    "mode": spec.mode,
                    "real_fraction": spec.real_fraction,
                    "extend_fraction": spec.extend_fraction,
                    "train_size": 0,
                    "miou": float("nan"),
                    "confusion": None,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
    return rows


def format_experiment_table(rows) -> tuple[str, str]:
    lines = ["cell          source      mode    real%   size   mIoU[%]  error"]
    csv_lines = ["cell,source,mode,real_fraction,extend_fraction,train_size,miou,error"]
    for r in rows:
        miou = "nan" if np.isnan(r["miou"]) else f"{r['miou']:.2f}"
        lines.append(
            f"{r['cell']:<13} {r['source'] or '-':<11} {r['mode']:<7} "
            f"{100 * r['real_fraction']:>5.0f} {r['train_size']:>6d} {miou:>8}  {r['error']}"
        )
        csv_lines.append(
            f"{r['cell']},{r['source']},{r['mode']},{r['real_fraction']},"
            f"{r['extend_fraction']},{r['train_size']},{miou},{r['error']}"
        )
    return "\n".join(lines) + "\n", "\n".join(csv_lines) + "\n"
