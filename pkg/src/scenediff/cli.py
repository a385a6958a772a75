"""Unified command-line entry point.

Every run writes a manifest next to its outputs (config fingerprint, seed,
input/output content hashes) so artifacts are reproducible from the manifest
alone. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import artifacts
from .config import load_config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config value")
    parser.add_argument("--seed", type=int, help="overrides run.seed")


def _config(args):
    cfg = load_config(args.config, args.overrides)
    seed = args.seed if args.seed is not None else cfg["run.seed"]
    return cfg, seed


def _load_scene_dir(directory):
    from .scenes import read_scene

    paths = sorted(Path(directory).glob("*.vsc1"))
    if not paths:
        raise FileNotFoundError(f"no .vsc1 scenes under {directory}")
    return {p.stem: read_scene(p) for p in paths}


def _manifest_for(out_path, command, cfg, seed, inputs, outputs):
    target = Path(out_path)
    path = target / "manifest.json" if target.is_dir() else target.with_suffix(
        target.suffix + ".manifest.json"
    )
    artifacts.write_manifest(path, command, cfg.fingerprint(), seed, inputs, outputs)


# ------------------------------- commands -------------------------------

def cmd_build_map(args) -> int:
    from .mapping import aggregate, auto_map_grid, read_scan_dir

    cfg, seed = _config(args)
    scans = read_scan_dir(args.scans) if args.poses is None else _read_scans_with_poses(
        args.scans, args.poses
    )
    moving = set(args.moving_classes or cfg["map.moving_classes"])
    grid = auto_map_grid(scans, cfg["map.resolution"], moving, cfg["map.pad"])
    scene_map = aggregate(scans, grid, moving)
    from .scenes import write_scene

    write_scene(scene_map.scene, args.out)
    np.save(str(args.out) + ".counts.npy", scene_map.counts)
    print(f"map: {len(scene_map.scene)} voxels over dims {grid.dims}")
    _manifest_for(args.out, "build-map", cfg, seed,
                  {"scans": args.scans}, {"map": args.out})
    return 0


def _read_scans_with_poses(scan_dir, poses_path):
    from .mapping import PosedScan

    directory = Path(scan_dir)
    names = sorted(p.stem for p in directory.glob("*.bin"))
    poses = np.loadtxt(poses_path, dtype=np.float64).reshape(-1, 4, 4)
    if poses.shape[0] != len(names):
        raise ValueError(f"{poses.shape[0]} poses for {len(names)} scans")
    scans = []
    for name, mat in zip(names, poses):
        points = np.fromfile(directory / f"{name}.bin", dtype="<f4").reshape(-1, 3)
        labels = np.fromfile(directory / f"{name}.label", dtype=np.uint8)
        scans.append(PosedScan(points.astype(np.float64), labels.astype(np.int64),
                               mat[:3, :3], mat[:3, 3], name))
    return scans


def cmd_train_vae(args) -> int:
    from .autoencoder import train_vae

    cfg, seed = _config(args)
    scenes = list(_load_scene_dir(args.scenes).values())
    model, log = train_vae(scenes, cfg.vae_config(), seed=seed, log_every=args.log_every)
    artifacts.save_checkpoint(args.out, "vae", model, cfg.vae_config(), len(log))
    print(f"trained {len(log)} epochs; final loss {log[-1]['loss']:.4f}")
    _manifest_for(args.out, "train-vae", cfg, seed, {"scenes": args.scenes}, {"checkpoint": args.out})
    return 0


def cmd_refine_vae(args) -> int:
    import dataclasses

    from .autoencoder import refine_decoder

    cfg, seed = _config(args)
    model, vae_cfg, extra = artifacts.load_vae_checkpoint(args.checkpoint)
    scenes = list(_load_scene_dir(args.scenes).values())
    refine_cfg = dataclasses.replace(vae_cfg, epochs=cfg["vae.refine_epochs"])
    sigma = cfg["vae.refine_noise_sigma"] if args.noise_sigma is None else args.noise_sigma
    model, log = refine_decoder(scenes, model, sigma, refine_cfg, seed=seed)
    artifacts.save_checkpoint(args.out, "vae", model, vae_cfg, len(log), extra)
    print(f"refined decoder for {len(log)} epochs at sigma {sigma}")
    _manifest_for(args.out, "refine-vae", cfg, seed,
                  {"scenes": args.scenes, "checkpoint": args.checkpoint}, {"checkpoint": args.out})
    return 0


def cmd_encode_latents(args) -> int:
    from .autoencoder import build_scene_plan
    from .diffusion import latent_normalization_scale, write_latent_cache

    cfg, seed = _config(args)
    model, vae_cfg, _ = artifacts.load_vae_checkpoint(args.checkpoint)
    scenes = _load_scene_dir(args.scenes)
    entries = {}
    with torch.no_grad():
        for scene_id, scene in scenes.items():
            plan = build_scene_plan(scene, vae_cfg)
            enc = model.encode(scene, plan=plan, deterministic=True)
            entries[scene_id] = model.pack_latent(enc).numpy()
    scale = latent_normalization_scale(list(entries.values())) if args.normalize else 1.0
    if scale != 1.0:
        entries = {k: v / scale for k, v in entries.items()}
    write_latent_cache(args.out, entries, fingerprint=cfg.fingerprint(), scale=scale)
    print(f"encoded {len(entries)} latents (scale {scale:.4f})")
    _manifest_for(args.out, "encode-latents", cfg, seed,
                  {"scenes": args.scenes, "checkpoint": args.checkpoint}, {"latents": args.out})
    return 0


def cmd_train_ddpm(args) -> int:
    from .diffusion import read_latent_cache, train_ddpm

    cfg, seed = _config(args)
    ids, latents, meta = read_latent_cache(args.latents)
    ddpm_cfg = cfg.ddpm_config()
    model, log = train_ddpm(latents, ddpm_cfg, seed=seed, log_every=args.log_every)
    artifacts.save_checkpoint(args.out, "ddpm", model, ddpm_cfg, len(log),
                              extra={"latent_scale": meta.get("scale", 1.0)})
    print(f"trained {len(log)} epochs on {len(ids)} latents; final loss {log[-1]['loss']:.5f}")
    _manifest_for(args.out, "train-ddpm", cfg, seed, {"latents": args.latents}, {"checkpoint": args.out})
    return 0


def cmd_generate(args) -> int:
    from .diffusion import generate
    from .scenes import write_scene

    cfg, seed = _config(args)
    vae, _, _ = artifacts.load_vae_checkpoint(args.vae)
    ddpm, ddpm_cfg, extra = artifacts.load_ddpm_checkpoint(args.ddpm)
    grid = cfg.grid_spec()
    cond = None
    if args.condition:
        points = np.fromfile(args.condition, dtype="<f4").reshape(-1, 3)
        with torch.no_grad():
            cond = ddpm.encode_condition(points.astype(np.float64), grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = generate(
        ddpm, vae, ddpm_cfg, grid, seed=seed, count=args.count, cond=cond,
        guidance_weight=args.guidance_w, latent_scale=float(extra.get("latent_scale", 1.0)),
    )
    for i, (scene, empty) in enumerate(results):
        name = f"gen_{seed:08d}_{i:04d}"
        write_scene(scene, out_dir / f"{name}.vsc1")
        meta = {"source": Path(args.condition).stem if args.condition else "unconditional",
                "empty": empty}
        (out_dir / f"{name}.meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        status = " (empty)" if empty else ""
        print(f"{name}: {len(scene)} voxels{status}")
    inputs = {"vae": args.vae, "ddpm": args.ddpm}
    if args.condition:
        inputs["condition"] = args.condition
    _manifest_for(out_dir, "generate", cfg, seed, inputs, {"scenes": out_dir})
    return 0


def cmd_simulate_lidar(args) -> int:
    from .lidar import default_sensor, simulate, write_cloud
    from .scenes import read_scene

    cfg, seed = _config(args)
    scene = read_scene(args.scene)
    sensor = default_sensor(
        args.profile or cfg["lidar.profile"],
        azimuth_step_deg=cfg["lidar.azimuth_step"],
        origin=(cfg["lidar.origin_x"], cfg["lidar.origin_y"], cfg["lidar.origin_z"]),
        min_range=cfg["lidar.min_range"],
        max_range=cfg["lidar.max_range"],
    )
    points, labels = simulate(scene, sensor)
    write_cloud(args.out, points, labels)
    print(f"{points.shape[0]} returns from {len(sensor.elevations_deg)} beams")
    _manifest_for(args.out, "simulate-lidar", cfg, seed, {"scene": args.scene}, {"cloud": args.out})
    return 0


def _parse_mix(spec_text: str):
    from .harness import MixSpec

    fields = {}
    for part in spec_text.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        fields[key.strip()] = value.strip()
    return MixSpec(
        real_fraction=float(fields.get("real", 1.0)),
        mode=fields.get("mode", "fill"),
        synth_source=fields.get("source", ""),
        total=int(fields["total"]) if "total" in fields else None,
        extend_fraction=float(fields.get("extend", 0.0)),
    )


def cmd_train_semseg(args) -> int:
    from .harness import mix_datasets, train_segmenter

    cfg, seed = _config(args)
    spec = _parse_mix(args.mix)
    real = _load_scene_dir(args.real)
    synth = _load_scene_dir(args.synth) if args.synth else {}
    ids = mix_datasets(real.keys(), synth.keys(), spec, seed)
    lookup = {**real, **synth}
    model, log = train_segmenter([lookup[i] for i in ids], cfg.segmenter_config(), seed=seed,
                                 log_every=args.log_every)
    artifacts.save_checkpoint(args.out, "semseg", model, cfg.segmenter_config(), len(log))
    final_conf = log[-1]["confusion"]
    Path(str(args.out) + ".confusion.csv").write_text(final_conf.to_csv())
    print(f"trained on {len(ids)} scenes ({spec.mode}, real {spec.real_fraction:.0%})")
    inputs = {"real": args.real}
    if args.synth:
        inputs["synth"] = args.synth
    _manifest_for(args.out, "train-semseg", cfg, seed, inputs, {"checkpoint": args.out})
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import (
        ConfusionMatrix,
        class_distribution,
        format_distribution_report,
        format_gap_report,
        format_iou_report,
        iou,
        mmd,
    )

    cfg, seed = _config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "mmd":
        a = np.load(args.features_a)["features"]
        b = np.load(args.features_b)["features"]
        value = mmd(a, b, kernel=args.kernel, estimator=args.estimator)
        text = f"mmd,{value:.6f}\nkernel,{args.kernel}\nestimator,{args.estimator}\n"
        (out_dir / "report.csv").write_text(text)
        (out_dir / "report.txt").write_text(f"MMD ({args.kernel}, {args.estimator}): {value:.6f}\n")
        print(f"MMD: {value:.6f}")
    elif args.mode == "miou":
        if args.confusion:
            conf = ConfusionMatrix.from_csv(Path(args.confusion).read_text())
        else:
            from .harness import evaluate_segmenter

            model, _, _ = artifacts.load_segmenter_checkpoint(args.model)
            scenes = list(_load_scene_dir(args.scenes).values())
            conf = evaluate_segmenter(model, scenes)
            (out_dir / "confusion.csv").write_text(conf.to_csv())
        per_class, mean = iou(conf)
        text, csv_text = format_iou_report(per_class, mean, conf.ignored)
        (out_dir / "report.txt").write_text(text)
        (out_dir / "report.csv").write_text(csv_text)
        print(text, end="")
    elif args.mode == "dist":
        scenes = list(_load_scene_dir(args.scenes).values())
        frac = class_distribution(scenes)
        text, csv_text = format_distribution_report(frac)
        (out_dir / "report.txt").write_text(text)
        (out_dir / "report.csv").write_text(csv_text)
        print(text, end="")
    elif args.mode == "gap":
        real = _read_iou_csv(args.real)
        synth = _read_iou_csv(args.synth)
        text, csv_text = format_gap_report(real, synth)
        (out_dir / "report.txt").write_text(text)
        (out_dir / "report.csv").write_text(csv_text)
        print(text, end="")
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown mode {args.mode}")
    _manifest_for(out_dir, f"evaluate:{args.mode}", cfg, seed, {}, {"report": out_dir})
    return 0


def _read_iou_csv(path):
    from .labels import CLASS_NAMES

    name_to_id = {name: cid for cid, name in CLASS_NAMES.items()}
    table = {}
    for line in Path(path).read_text().splitlines()[1:]:
        name, value = line.split(",")[:2]
        if name == "mIoU":
            continue
        cid = name_to_id.get(name)
        if cid is None and name.startswith("class-"):
            cid = int(name.split("-", 1)[1])
        table[cid] = float(value) if value not in ("", "n/a") else None
    return table


def cmd_bench_pruning(args) -> int:
    from .autoencoder import VaeConfig, pruning_benchmark
    from .synthetic import slab_scene

    cfg, seed = _config(args)
    size = cfg["bench.size"]
    scene = slab_scene(dims=(size, size, size), occupancy=cfg["bench.occupancy"])
    bench_cfg = VaeConfig(
        levels=cfg["vae.levels"],
        latent_dim=cfg["vae.latent_dim"],
        widths=cfg["vae.widths"],
        class_count=max(scene.class_count, 2),
        level_loss_weights=cfg["vae.level_loss_weights"],
    )
    report = pruning_benchmark(scene, bench_cfg, repeats=cfg["bench.repeats"])
    if "error" in report:
        print(f"unpruned path exceeded resources: {report['detail']}")
        return 0
    header = f"{'layer':>5} {'level':>5} {'cells(full)':>12} {'cells(pruned)':>13} {'MB(full)':>9} {'MB(pruned)':>10}"
    lines = [header]
    for row in report["layers"]:
        lines.append(
            f"{row['layer']:>5} {row['level']:>5} {row['cells_unpruned']:>12} "
            f"{row['cells_pruned']:>13} {row['bytes_unpruned'] / 2**20:>9.2f} "
            f"{row['bytes_pruned'] / 2**20:>10.2f}"
        )
    lines.append(
        f"forward time: pruned {report['forward_time_pruned']:.3f}s, "
        f"unpruned {report['forward_time_unpruned']:.3f}s"
    )
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
        _manifest_for(args.out, "bench-pruning", cfg, seed, {}, {"report": args.out})
    return 0


def cmd_serve_curation(args) -> int:
    from .curation import serve_curation

    host, _, port = args.bind.partition(":")
    server = serve_curation(args.scenes, args.records, (host or "127.0.0.1", int(port or 8781)))
    print(
        f"curation service on http://{server.server_address[0]}:{server.server_address[1]}",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_export_curated(args) -> int:
    from .curation import export_curated

    cfg, seed = _config(args)
    manifest = export_curated(args.records, args.scenes, args.out)
    print(f"exported {manifest['total']} scenes: {manifest['per_source']}")
    _manifest_for(args.out, "export-curated", cfg, seed,
                  {"records": args.records, "scenes": args.scenes}, {"curated": args.out})
    return 0


# ------------------------------- wiring -------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenediff",
        description="Latent-diffusion generation of labeled voxel scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-map", help="aggregate posed scans into a labeled map")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", help="pose file; defaults to <scans>/poses.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--moving-classes", type=int, nargs="*", metavar="ID")
    _add_common(p)
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("train-vae", help="train the scene autoencoder")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("refine-vae", help="decoder-only fine-tuning on noisy latents")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-sigma", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_refine_vae)

    p = sub.add_parser("encode-latents", help="cache dense latents for diffusion training")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true", default=True)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    _add_common(p)
    p.set_defaults(func=cmd_encode_latents)

    p = sub.add_parser("train-ddpm", help="train the latent denoiser")
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("generate", help="sample scenes from noise")
    p.add_argument("--vae", required=True)
    p.add_argument("--ddpm", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--condition", help="float32 xyz cloud for guided generation")
    p.add_argument("--guidance-w", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate-lidar", help="cast beams through a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--profile", choices=("64-beam", "128-beam"))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate_lidar)

    p = sub.add_parser("train-semseg", help="train the downstream segmenter on a mix")
    p.add_argument("--mix", required=True, metavar="real=0.25,mode=fill[,extend=0.5][,total=N]")
    p.add_argument("--real", required=True)
    p.add_argument("--synth")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_semseg)

    p = sub.add_parser("evaluate", help="realism and downstream metrics")
    p.add_argument("--mode", required=True, choices=("mmd", "miou", "dist", "gap"))
    p.add_argument("--out", required=True)
    p.add_argument("--features-a")
    p.add_argument("--features-b")
    p.add_argument("--kernel", default="rbf", choices=("rbf", "linear"))
    p.add_argument("--estimator", default="unbiased", choices=("unbiased", "biased"))
    p.add_argument("--confusion")
    p.add_argument("--model")
    p.add_argument("--scenes")
    p.add_argument("--real")
    p.add_argument("--synth")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-pruning", help="per-layer decoder memory, pruned vs not")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_bench_pruning)

    p = sub.add_parser("serve-curation", help="HTTP review service for generated scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--bind", default="127.0.0.1:8781")
    p.set_defaults(func=cmd_serve_curation)

    p = sub.add_parser("export-curated", help="copy accepted scenes into a dataset dir")
    p.add_argument("--records", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export_curated)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # uniform diagnostics, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
