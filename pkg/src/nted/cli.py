"""Command-line front end: ``nted {synth|train|eval|bench|edit}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench as benchmod
from . import synth
from . import tensor_core as tc
from .appearance import optimize_masks
from .losses import LossWeights
from .renderer import RendererConfig
from .training import Trainer, batches, compute_losses, load_checkpoint

log = logging.getLogger("nted")

EVAL_SCHEMA = "nted.eval.v1"
TRAIN_LOG_SCHEMA = "nted.trainlog.v1"
TRACE_SCHEMA = "nted.edittrace.v1"

DEFAULTS = {
    "synth": {"n_train": 500, "n_test": 50, "canvas": 64, "sigma_hm": 1.5, "preview": 4},
    "train": {
        "manifest": "manifest.json",
        "renderer": {},
        "steps": 3000,
        "batch_size": 4,
        "lr": 1e-3,
        "lr_schedule": "linear",
        "ema_decay": 0.999,
        "weights": {"attn": 15.0, "rec": 2.0},
        "swap_pairs": True,
        "log_every": 100,
        "resume": None,
        "eval_batch_size": 25,
    },
    "eval": {"manifest": "manifest.json", "checkpoint": "checkpoint.npz", "use_ema": True, "batch_size": 25, "split": "test"},
    "bench": {"grid": [256, 1024, 4096], "c": 64, "k": 32, "reps": 5, "warmup": 2, "guard": benchmod.VANILLA_GUARD},
    "edit": {
        "checkpoint": "checkpoint.npz",
        "reference1_seed": 0,
        "reference2_seed": 1,
        "target_seed": 2,
        "region": "torso",
        "weights": {"regu": 1.0, "r1": 3e5, "r2": 9e5},
        "sigma": None,
        "iters": 200,
        "lr": 0.05,
        "freeze_selection": False,
        "force_m": None,
        "canvas": 64,
        "sigma_hm": 1.5,
        "use_ema": True,
    },
}

SEED_REQUIRED = {"train", "bench", "edit"}


class ConfigError(ValueError):
    pass


def load_config(command: str, path: str | None) -> tuple[dict, Path]:
    """Defaults for ``command`` overlaid with the JSON file at ``path``.

    Returns the merged config and the directory relative paths resolve against.
    """
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    base = Path.cwd()
    if path:
        p = Path(path)
        user = json.loads(p.read_text())
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown {command} config keys: {sorted(unknown)}")
        cfg.update(user)
        base = p.resolve().parent
    return cfg, base


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict, seed: int, out: Path, dtype) -> None:
    manifest = synth.generate_split(cfg["n_train"], cfg["n_test"], seed, cfg["canvas"], cfg["sigma_hm"])
    synth.save_manifest(manifest, out / "manifest.json")
    rows = []
    for s in manifest["train_seeds"][: cfg["preview"]]:
        pair = synth.generate_pair(s, cfg["canvas"], cfg["sigma_hm"])
        hm_ref = np.repeat(pair.reference.heatmaps.max(axis=-1, keepdims=True), 3, axis=-1)
        hm_tgt = np.repeat(pair.target.heatmaps.max(axis=-1, keepdims=True), 3, axis=-1)
        rows.append([pair.reference.image, hm_ref, pair.target.image, hm_tgt])
    if rows:
        synth.write_ppm(out / "preview.ppm", synth.image_grid(rows))
    log.info("wrote manifest with %d train / %d test pairs", cfg["n_train"], cfg["n_test"])


def evaluate(params, rcfg: RendererConfig, data: dict, weights: LossWeights, batch_size: int) -> dict:
    """Mean pixel L1, mean attention loss and the identity-copy baseline."""
    n = data["ref_image"].shape[0]
    pix = attn = 0.0
    preds = []
    for i in range(0, n, batch_size):
        batch = {k: v[i:i + batch_size] for k, v in data.items()}
        _, l_attn, _, out = compute_losses(params, batch, rcfg, weights)
        pred = out.image.value
        preds.append(pred)
        m = pred.shape[0]
        pix += float(np.abs(pred - batch["tgt_image"]).mean()) * m
        attn += float(l_attn.value) * m
    identity = float(np.abs(data["ref_image"] - data["tgt_image"]).mean())
    return {
        "n": n,
        "pixel_l1": pix / n,
        "identity_l1": identity,
        "l_attn": attn / n,
        "predictions": np.concatenate(preds) if preds else None,
    }


def _split_data(manifest: dict, split: str, dtype):
    pairs = synth.pairs_from_manifest(manifest, split)
    if not pairs:
        return None
    return synth.stack_pairs(pairs, dtype)


def _renderer_config(cfg: dict, manifest: dict) -> RendererConfig:
    spec = dict(cfg.get("renderer") or {})
    spec.setdefault("resolution", manifest["canvas"])
    spec.setdefault("keypoints", manifest["K"])
    return RendererConfig.from_dict(spec)


def cmd_train(cfg: dict, seed: int, out: Path, dtype, base: Path) -> dict:
    manifest = synth.load_manifest(_resolve(base, cfg["manifest"]))
    rcfg = _renderer_config(cfg, manifest)
    weights = LossWeights(**cfg["weights"])
    train = _split_data(manifest, "train", dtype)
    if train is None:
        raise ConfigError("training split is empty")
    test = _split_data(manifest, "test", dtype)
    if cfg["resume"]:
        trainer = Trainer.resume(_resolve(base, cfg["resume"]), rcfg, dtype=dtype, weights=weights, lr=cfg["lr"])
    else:
        trainer = Trainer(rcfg, seed, dtype=dtype, lr=cfg["lr"], weights=weights, ema_decay=cfg["ema_decay"])
    summary = {"seed": seed, "config_hash": rcfg.hash(), "renderer": rcfg.to_dict(), "steps": cfg["steps"]}
    if test is not None:
        init = evaluate(trainer.params, rcfg, test, weights, cfg["eval_batch_size"])
        summary["test_init"] = {k: init[k] for k in ("pixel_l1", "identity_l1", "l_attn")}

    rng = np.random.default_rng([seed, 1])
    stream = batches(train, cfg["batch_size"], rng, swap=cfg["swap_pairs"])
    rows = []
    start = trainer.step_count
    total_steps = start + cfg["steps"]
    for step in range(start, total_steps):
        if cfg["lr_schedule"] == "linear":
            trainer.opt.lr = cfg["lr"] * (1.0 - step / total_steps)
        elif cfg["lr_schedule"] != "constant":
            raise ConfigError(f"unknown lr_schedule {cfg['lr_schedule']!r}")
        lr = trainer.opt.lr
        losses = trainer.train_step(next(stream))
        rows.append({"schema": TRAIN_LOG_SCHEMA, "step": step, "lr": _fmt(lr),
                     "loss": _fmt(losses["loss"]), "attn": _fmt(losses["attn"]), "rec": _fmt(losses["rec"])})
        if cfg["log_every"] and (step % cfg["log_every"] == 0 or step == total_steps - 1):
            log.info("step %d loss %.4f attn %.4f rec %.4f", step, losses["loss"], losses["attn"], losses["rec"])
    write_csv(out / "train_log.csv", ["schema", "step", "lr", "loss", "attn", "rec"], rows)
    trainer.save(out / "checkpoint.npz")
    if test is not None:
        final = evaluate(trainer.ema, rcfg, test, weights, cfg["eval_batch_size"])
        summary["test_final"] = {k: final[k] for k in ("pixel_l1", "identity_l1", "l_attn")}
        _sample_grid(out / "samples.ppm", test, final["predictions"])
    write_json(out / "train_summary.json", summary)
    return summary


def _sample_grid(path: Path, data: dict, preds: np.ndarray, n: int = 6) -> None:
    rows = [[data["ref_image"][i], data["tgt_image"][i], preds[i]] for i in range(min(n, preds.shape[0]))]
    synth.write_ppm(path, synth.image_grid(rows))


def _load_params(path: Path, use_ema: bool, dtype):
    ckpt = load_checkpoint(path)
    params = ckpt["ema"] if use_ema else ckpt["params"]
    return ckpt["config"], {k: v.astype(dtype) for k, v in params.items()}


def cmd_eval(cfg: dict, seed: int | None, out: Path, dtype, base: Path) -> dict:
    manifest = synth.load_manifest(_resolve(base, cfg["manifest"]))
    rcfg, params = _load_params(_resolve(base, cfg["checkpoint"]), cfg["use_ema"], dtype)
    data = _split_data(manifest, cfg["split"], dtype)
    if data is None:
        raise ConfigError(f"{cfg['split']} split is empty")
    metrics = evaluate(params, rcfg, data, LossWeights(), cfg["batch_size"])
    row = {"schema": EVAL_SCHEMA, "split": cfg["split"], "n": metrics["n"],
           "pixel_l1": _fmt(metrics["pixel_l1"]), "identity_l1": _fmt(metrics["identity_l1"]),
           "l_attn": _fmt(metrics["l_attn"]),
           "ratio_to_identity": _fmt(metrics["pixel_l1"] / metrics["identity_l1"])}
    write_csv(out / "eval_metrics.csv", list(row), [row])
    _sample_grid(out / "eval_samples.ppm", data, metrics["predictions"])
    return metrics


def cmd_bench(cfg: dict, seed: int, out: Path, precision: str) -> list:
    rows = benchmod.run_grid(
        tuple(cfg["grid"]), cfg["c"], cfg["k"], seed, tc.dtype_for(precision),
        cfg["reps"], cfg["warmup"], cfg["guard"],
    )
    # counts are deterministic; wall times live in a separate file
    write_csv(out / "bench.csv", benchmod.COUNT_FIELDS, benchmod.count_records(rows))
    write_csv(out / "bench_timing.csv", benchmod.TIMING_FIELDS, benchmod.timing_records(rows, precision, cfg["reps"]))
    for r in rows:
        log.info("hw=%d nted %.3gs vanilla %.3gs macs %d vs %d", r.hw, r.nted_time, r.vanilla_time, r.nted_macs, r.vanilla_macs)
    return rows


def region_mean(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return image[mask.astype(bool)].mean(axis=0)


def cmd_edit(cfg: dict, seed: int, out: Path, dtype, base: Path) -> dict:
    rcfg, params = _load_params(_resolve(base, cfg["checkpoint"]), cfg["use_ema"], dtype)
    canvas, s_hm = cfg["canvas"], cfg["sigma_hm"]
    if cfg["region"] not in synth.PARTS:
        raise ConfigError(f"unknown region {cfg['region']!r}; expected one of {synth.PARTS}")
    ref1 = synth.generate_pair(cfg["reference1_seed"], canvas, s_hm).reference
    ref2 = synth.generate_pair(cfg["reference2_seed"], canvas, s_hm).reference
    target = synth.generate_pair(cfg["target_seed"], canvas, s_hm).target
    region = target.masks[cfg["region"]]
    result = optimize_masks(
        params, rcfg, ref1.image, ref2.image, target.heatmaps, region,
        weights=LossWeights(**cfg["weights"]), sigma=cfg["sigma"], max_iters=cfg["iters"],
        lr=cfg["lr"], freeze_selection=cfg["freeze_selection"], force_m=cfg["force_m"],
    )
    synth.write_ppm(out / "edited.ppm", result.image)
    synth.write_ppm(out / "transfer_r1.ppm", result.transfer_r1)
    synth.write_ppm(out / "transfer_r2.ppm", result.transfer_r2)
    masks = result.masks.to_dict()
    masks["selections"] = [[int(v) for v in s] for s in result.selections]
    masks["complements"] = [[int(v) for v in s] for s in result.complements]
    write_json(out / "masks.json", masks)
    trace_fields = ["schema", "iter", "loss", "regu", "r1", "r2", "best"]
    write_csv(out / "loss_trace.csv", trace_fields, [
        {"schema": TRACE_SCHEMA, **{k: (_fmt(v) if isinstance(v, float) else v) for k, v in t.items()}}
        for t in result.trace
    ])
    edited_mean = region_mean(result.image, region)
    ref1_mean = region_mean(ref1.image, ref1.masks[cfg["region"]])
    ref2_mean = region_mean(ref2.image, ref2.masks[cfg["region"]])
    summary = {
        "seed": seed,
        "region": cfg["region"],
        "edited_region_mean": [float(v) for v in edited_mean],
        "reference1_region_mean": [float(v) for v in ref1_mean],
        "reference2_region_mean": [float(v) for v in ref2_mean],
        "l1_to_reference1": float(np.abs(edited_mean - ref1_mean).sum()),
        "l1_to_reference2": float(np.abs(edited_mean - ref2_mean).sum()),
        "final_loss": result.trace[-1]["loss"] if result.trace else None,
    }
    write_json(out / "edit_summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nted", description=__doc__)
    parser.add_argument("command", choices=sorted(DEFAULTS))
    parser.add_argument("--config", help="JSON config; keys override the subcommand defaults")
    parser.add_argument("--seed", type=int, help="u64 seed (required for train, bench, edit)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--precision", choices=["f32", "f64"], default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command in SEED_REQUIRED and args.seed is None:
        print(f"nted {args.command}: --seed is required", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("nted: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    precision = args.precision or ("f32" if args.command in ("train", "bench") else "f64")
    threads = args.threads
    if tc.verification_mode():
        precision, threads = "f64", 1
    elif threads is None and args.command == "bench":
        threads = 1
    dtype = tc.dtype_for(precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, base = load_config(args.command, args.config)
    seed = args.seed if args.seed is not None else 0

    limiter = tc.limit_threads(threads) if threads else contextlib.nullcontext()
    with limiter:
        if args.command == "synth":
            cmd_synth(cfg, seed, out, dtype)
        elif args.command == "train":
            cmd_train(cfg, seed, out, dtype, base)
        elif args.command == "eval":
            cmd_eval(cfg, args.seed, out, dtype, base)
        elif args.command == "bench":
            cmd_bench(cfg, seed, out, precision)
        elif args.command == "edit":
            cmd_edit(cfg, seed, out, dtype, base)
    return 0


if __name__ == "__main__":
    sys.exit(main())
