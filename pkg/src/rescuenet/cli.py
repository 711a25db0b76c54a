"""Command-line entry point: ``rescuenet <subcommand> ...``.

Exit codes: 0 success, 1 validation or IO error, 2 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import DatasetError, GeneratorConfig, generate_scenes, load_dataset, save_scene, stack_pairs
from .data.io import labels_json, netpbm_bytes, read_netpbm, scene_ids, load_scene
from .data.synth import DOMAIN_SHIFTS
from .metrics import ConfusionMatrix, accumulate, atomic_write, report_from_confusion
from .model import FUSIONS, ConfigError
from .training import TrainConfig, TrainingError, load_checkpoint, predict, run_ablations, save_checkpoint, train

# Class colours for rendered masks.
PALETTE = {
    0: (0, 0, 255),  # background: blue
    1: (0, 200, 0),  # no damage: green
    2: (255, 165, 0),  # minor: orange
    3: (255, 105, 180),  # major: pink
    4: (255, 0, 0),  # destroyed: red
    255: (0, 0, 0),  # unclassified
}

LOSS_FLAGS = {"ce": "ce", "locaware": "locaware", "locaware-dice": "locaware_dice"}
HEAD_FLAGS = {"simple": "simple", "encdec": "encoder_decoder"}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _jobs(value: int | None) -> int:
    env = os.environ.get("RESCUENET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"RESCUENET_THREADS must be an integer, got {env!r}") from None
    return max(1, value or 1)


def render_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    bad = ~np.isin(mask, list(PALETTE))
    if bad.any():
        raise UsageError(f"invalid class value {int(mask[bad][0])} in mask")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for k, rgb in PALETTE.items():
        lut[k] = rgb
    return lut[mask]


# -- subcommands -----------------------------------------------------------

def cmd_generate(args) -> int:
    dist = GeneratorConfig.class_distribution
    if args.class_dist:
        try:
            dist = tuple(float(v) for v in args.class_dist.split(","))
        except ValueError:
            raise UsageError(f"--class-dist must be comma-separated numbers, got {args.class_dist!r}") from None
        if len(dist) != 4:
            raise UsageError(f"--class-dist needs 4 values, got {len(dist)}")
    cfg = GeneratorConfig(image_size=args.image_size, class_distribution=dist, domain_shift=args.domain_shift)
    cfg.validate()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    scenes = generate_scenes(cfg, args.count, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        files = save_scene(s, out)
        print(f"scene={s.scene_id} seed={s.seed} buildings={len(s.labels)} files={len(files)}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        batch=args.batch,
        crop=args.crop,
        learning_rate=args.lr,
        momentum=args.momentum,
        lr_schedule=args.lr_schedule,
        seed=args.seed,
        loss_mode=LOSS_FLAGS[args.loss],
        seg_head=HEAD_FLAGS[args.seg_head],
        change_head=args.change_head == "on",
        fusion=args.fusion,
        eval_every=args.eval_every,
        augment=not args.no_augment,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    cfg.validate()
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(args.data, cfg, val_dir=args.val, resume=resume, log=lambda s: print(s, flush=True))
    save_checkpoint(result.checkpoint, args.out)
    print(f"checkpoint={args.out} step={result.checkpoint.step}")
    return 0


def _evaluate_parallel(params, mcfg, pairs, fusion, jobs, pred_out=None):
    chunks = [pairs[i : i + 8] for i in range(0, len(pairs), 8)]

    def work(chunk):
        b = stack_pairs(chunk)
        pred = predict(params, mcfg, b.pre, b.post, fusion)
        return b, pred

    cm = ConfusionMatrix()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        # map preserves order, so the merge is deterministic
        for b, pred in pool.map(work, chunks):
            cm = accumulate(cm, b.mask, pred)
            if pred_out is not None:
                for sid, p in zip(b.scene_ids, pred):
                    atomic_write(os.fspath(Path(pred_out) / f"{sid}_mask.pgm"), netpbm_bytes(p))
    return report_from_confusion(cm)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    fusion = args.fusion or ckpt.train_config.fusion
    if fusion == "change_only" and not ckpt.model_config.change_head_enabled:
        raise ConfigError("fusion 'change_only' requested but the checkpoint has no change head")
    pairs = load_dataset(args.data)
    if not pairs:
        raise DatasetError(f"no scenes in {args.data}")
    if args.pred_out:
        Path(args.pred_out).mkdir(parents=True, exist_ok=True)
    report = _evaluate_parallel(ckpt.params, ckpt.model_config, pairs, fusion, _jobs(args.jobs), args.pred_out)
    report.write(args.report)
    print(report.to_text(), end="")
    return 0


def _gt_masks(directory: str) -> dict[str, np.ndarray]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"directory {d} does not exist")
    ids = {p.name[: -len("_mask.pgm")] for p in d.glob("*_mask.pgm")}
    ids |= {p.name[: -len("_labels.json")] for p in d.glob("*_labels.json")}
    out = {}
    with_images = set(scene_ids(d))
    for sid in sorted(ids):
        if sid in with_images:
            out[sid] = load_scene(d, sid).combined_mask
        else:
            out[sid] = read_netpbm(d / f"{sid}_mask.pgm")
    return out


def cmd_score(args) -> int:
    gt = _gt_masks(args.gt)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DatasetError(f"directory {pred_dir} does not exist")
    pred = {p.name[: -len("_mask.pgm")]: p for p in pred_dir.glob("*_mask.pgm")}
    missing = sorted(set(gt) - set(pred))
    extra = sorted(set(pred) - set(gt))
    if missing or extra:
        raise DatasetError(f"unpaired masks: missing predictions {missing}, no ground truth for {extra}")
    if not gt:
        raise DatasetError("no masks to score")
    cm = ConfusionMatrix()
    for sid in sorted(gt):
        p = read_netpbm(pred[sid])
        if p.shape != gt[sid].shape:
            raise DatasetError(f"{sid}: prediction {p.shape} vs ground truth {gt[sid].shape}")
        cm = accumulate(cm, gt[sid], p)
    report = report_from_confusion(cm)
    report.write(args.report)
    print(report.to_text(), end="")
    return 0


def cmd_render(args) -> int:
    mask = read_netpbm(args.mask)
    if mask.ndim != 2:
        raise UsageError(f"{args.mask} is not a single-channel mask")
    atomic_write(args.out, netpbm_bytes(render_mask(mask)))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(trials=args.trials, seed=args.seed)
    ok = True
    for r in results:
        status = "ok" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{r.name:<22} trials={r.trials} max_rel_err={r.max_error:.3e} {status}")
    if args.end_to_end:
        err = gradcheck.end_to_end_error(args.seed)
        passed = err <= args.end_to_end_tol
        ok &= passed
        print(f"{'end_to_end':<22} trials=1 max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def cmd_ablate(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    base = TrainConfig(steps=args.steps, batch=args.batch, crop=args.crop, learning_rate=args.lr)
    base.validate()
    report = run_ablations(args.data, base, seeds, val_dir=args.val, log=lambda s: print(s, flush=True))
    print(report.to_text(), end="")
    if args.report:
        atomic_write(args.report, report.to_json().encode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rescuenet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic scene pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--class-dist")
    g.add_argument("--domain-shift", choices=sorted(DOMAIN_SHIFTS))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--loss", choices=sorted(LOSS_FLAGS), default="locaware-dice")
    t.add_argument("--seg-head", choices=sorted(HEAD_FLAGS), default="encdec")
    t.add_argument("--change-head", choices=("on", "off"), default="on")
    t.add_argument("--fusion", choices=FUSIONS, default="mean_logprob")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--crop", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lr-schedule", choices=("constant", "poly"), default="constant")
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run inference and score against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--fusion", choices=FUSIONS)
    e.add_argument("--report", required=True)
    e.add_argument("--pred-out")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score externally produced masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("render", help="colour a class mask")
    r.add_argument("--mask", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--end-to-end", action="store_true", help="also check the full model gradient on an 8x8 pair")
    c.add_argument("--end-to-end-tol", type=float, default=1e-3)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and score the ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--val")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--steps", type=int, default=600)
    a.add_argument("--batch", type=int, default=4)
    a.add_argument("--crop", type=int, default=64)
    a.add_argument("--lr", type=float, default=0.05)
    a.add_argument("--report")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AssertionError, RuntimeError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
