"""``dvan`` command line: data, canvases, training, evaluation, ablations, maps.

Every command reads a flat ``key=value`` config (``--config``), applies
overrides (``--set key=value`` or ``--key value``), validates the result and
only then touches the filesystem. Exit codes: 0 success, 1 config error,
2 runtime error, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, pnm
from .canvas import (Canvas, attention_support, generate_canvases, normalize_image, plan_layout,
                     render, resize_bilinear)
from .config import RunConfig
from .data import load_image, write_manifest
from .errors import ConfigError, DvanError
from .experiments import format_table, load_dataset, run_ablation, write_rows
from .tensor import no_grad
from .training import Model, Trainer, prepare

logger = logging.getLogger("dvan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
CHECKPOINT = "checkpoint.dvan"
TRAIN_LOG = "train_log.csv"


class CheckFailed(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        return p

    command("gen-data", "write the synthetic dataset as PPM files plus manifests")
    p = command("canvases", "cut one image into its attention canvases")
    p.add_argument("image", help="PPM/PGM image")
    p = command("train", "run the three-stage schedule")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = command("eval", "score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    command("ablate", "train several variants and tabulate them")
    p = command("attmaps", "export per-step attention maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    command("gradcheck", "finite-difference check of every op and the tiny model")
    return parser


def _split_extra(extra) -> list:
    """``--key value`` / ``--key=value`` leftovers become overrides."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            out.append(key)
            i += 1
            continue
        if i + 1 >= len(extra):
            raise ConfigError(f"missing value for {tok}")
        out.append(f"{key}={extra[i + 1]}")
        i += 2
    return out


def resolve_config(args, extra) -> RunConfig:
    overrides = list(args.set) + _split_extra(extra)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    return RunConfig.load(args.config, overrides)


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    return path


def _run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    return out


# ---------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, args) -> int:
    if cfg.dataset:
        raise ConfigError("gen-data writes synthetic data; unset 'dataset'")
    dataset = load_dataset(cfg)
    out = _run_dir(cfg)
    for name, split in (("train", dataset.train), ("test", dataset.test)):
        folder = out / name
        folder.mkdir(exist_ok=True)
        rows, boxes = [], []
        for i, (img, label) in enumerate(zip(split.images, split.labels)):
            rel = f"{name}/{i:05d}.ppm"
            pnm.write_image(out / rel, img)
            rows.append((rel, int(label)))
            for box in split.glyph_boxes[i]:
                boxes.append((rel, *box))
        write_manifest(out / f"{name}_manifest.txt", rows)
        with open(out / f"{name}_glyph_boxes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("relative_path", "x0", "y0", "x1", "y1"))
            w.writerows(boxes)
    print(f"wrote {len(dataset.train)} train and {len(dataset.test)} test images to {out}")
    return EXIT_OK


def cmd_canvases(cfg: RunConfig, args) -> int:
    image = normalize_image(load_image(_require_file(args.image)), cfg.short_edge)
    canvases = generate_canvases(image, cfg.canvas_plan())
    out = _run_dir(cfg)
    with open(out / "canvases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("file", "sequence_index", "scale_index", "x0", "y0", "x1", "y1"))
        for c in canvases:
            name = f"canvas_{c.sequence_index:03d}.ppm"
            pnm.write_image(out / name, c.pixels)
            w.writerow((name, c.sequence_index, c.scale_index, *c.footprint.as_tuple()))
    print(f"wrote {len(canvases)} canvases to {out}")
    return EXIT_OK


def _trainer(cfg: RunConfig, dataset=None, log_path=None) -> Trainer:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    data = prepare(dataset, cfg.canvas_plan(), cfg.dtype)
    model = Model(cfg.model_config(num_classes=dataset.num_classes), cfg.seed)
    return Trainer(model, data, cfg.train_config(), log_path)


def cmd_train(cfg: RunConfig, args) -> int:
    resume = _require_file(args.resume) if args.resume else None
    dataset = load_dataset(cfg)
    out = _run_dir(cfg)
    log_path = out / TRAIN_LOG
    trainer = _trainer(cfg, dataset, log_path)
    if resume is not None:
        trainer.load(resume)
    elif log_path.exists():
        log_path.unlink()  # a fresh run starts a fresh log
    trainer.run_schedule(out / CHECKPOINT)
    if trainer.progress == (0, 0):
        trainer.save(out / CHECKPOINT)
    stage, epoch = trainer.progress
    last = trainer.records[-1] if trainer.records else None
    acc = f", train accuracy {last.accuracy:.4f}" if last else ""
    print(f"finished stage {stage} epoch {epoch}{acc}; checkpoint {out / CHECKPOINT}")
    return EXIT_OK


def eval_report(trainer: Trainer, split: str) -> dict:
    stage = 1 if trainer.progress[0] <= 1 else 3
    ev = trainer.evaluate(split, stage=stage)
    return {"split": split, "examples": len(ev.predictions), "accuracy": ev.accuracy,
            "mean_Ldiv": ev.mean_ldiv, "mean_overlap": ev.mean_overlap,
            "overlap_violation_rate": ev.violation_rate}


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = _require_file(args.checkpoint)
    trainer = _trainer(cfg)
    trainer.load(ckpt)
    report = eval_report(trainer, args.split)
    out = _run_dir(cfg)
    text = "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in report.items())
    (out / f"eval_{args.split}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    dataset = load_dataset(cfg)
    out = _run_dir(cfg)
    rows = run_ablation(cfg, dataset, out)
    write_rows(out / f"ablation_{cfg.sweep}.csv", rows)
    print(format_table(rows))
    return EXIT_OK


def attention_heatmaps(att_maps: np.ndarray, layout) -> list:
    """Each ``l_t`` scaled to 0-255 and bilinearly resized onto its footprint."""
    k = int(round(np.sqrt(att_maps.shape[-1])))
    out = []
    for l_t, fp in zip(att_maps, layout.footprints):
        grid = l_t.reshape(k, k).astype(np.float64)
        up = resize_bilinear(grid[None], fp.side, fp.side)[0]
        peak = up.max()
        out.append(np.round(255.0 * up / peak).astype(np.uint8) if peak > 0 else np.zeros_like(up, np.uint8))
    return out


def cmd_attmaps(cfg: RunConfig, args) -> int:
    if cfg.variant != "dvan":
        raise ConfigError("attmaps needs variant=dvan")
    ckpt, image_path = _require_file(args.checkpoint), _require_file(args.image)
    image = normalize_image(load_image(image_path), cfg.short_edge)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    layout = plan_layout(image.shape[1:], cfg.canvas_plan())
    model = Model(cfg.model_config(), cfg.seed)
    model.load_arrays(checkpoint.load(ckpt))
    pixels = render(image[None].astype(cfg.dtype), layout)
    with no_grad():
        outs = model.head_outputs(model.features(pixels))
    maps = np.stack([o.attention.data[0] for o in outs]).astype(np.float64)
    probs = np.mean([o.probs.data[0] for o in outs], axis=0)
    out = _run_dir(cfg)
    with open(out / "attmaps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("file", "step", "x0", "y0", "x1", "y1", "support_cells", "support_area"))
        for t, (heat, fp) in enumerate(zip(attention_heatmaps(maps, layout), layout.footprints)):
            name = f"attention_{t:03d}.pgm"
            pnm.write_gray(out / name, heat)
            support = attention_support(maps[t], Canvas(None, fp, 0, t, layout.image_size),
                                        cfg.mass_threshold)
            w.writerow((name, t, *fp.as_tuple(), " ".join(str(c) for c in support.cells), support.area))
    np.savetxt(out / "attention.txt", maps, fmt="%.9g")
    print(f"predicted class {int(np.argmax(probs))}; wrote {len(maps)} maps to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(cfg.gradcheck_eps, cfg.gradcheck_tolerance, cfg.seed)
    out = _run_dir(cfg)
    lines = [r.line() for r in results]
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [r for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} gradient check(s) failed")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "canvases": cmd_canvases, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "attmaps": cmd_attmaps, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args, extra)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (DvanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
