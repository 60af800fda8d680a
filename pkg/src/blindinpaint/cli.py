"""Command-line entry points: synth, train, infer, eval, selftest and toy-images."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import synth
from .errors import ConfigError, TrainingFault

log = logging.getLogger("blindinpaint")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synth_one(job: tuple) -> dict:
    index, global_seed, size, truth_paths, noise_paths, spec = job
    seed = synth.sample_seed(global_seed, index)
    rng = np.random.default_rng(seed)
    truth_path = truth_paths[index % len(truth_paths)]
    candidates = [p for p in noise_paths if p.resolve() != truth_path.resolve()]
    if not candidates:
        raise ConfigError(f"no noise image differs from truth {truth_path}")
    noise_path = candidates[int(rng.integers(len(candidates)))]
    truth = synth.load_image(truth_path, size)
    noise = synth.load_image(noise_path, size, rng=rng)
    t = synth.make_training_tuple(truth, noise, spec=spec, seed=seed)
    return {
        "index": index,
        "tuple": t,
        "record": {
            "id": f"{index:06d}",
            "truth_path": str(truth_path),
            "noise_path": str(noise_path),
            "seed": seed,
            "coverage": synth.damage_ratio(t.mask),
        },
    }


def cmd_synth(args) -> int:
    truth_paths = synth.list_images(args.truth_dir)
    noise_paths = synth.list_images(args.noise_dir)
    if not truth_paths or not noise_paths:
        raise ConfigError("truth and noise directories must both contain images")
    if args.count < 1 or args.size < 16:
        raise ConfigError("--count must be >= 1 and --size >= 16")
    spec = synth.StrokeSpec().for_size(args.size, args.size)
    lo = spec.num_strokes_range[0] if args.strokes_min is None else args.strokes_min
    hi = spec.num_strokes_range[1] if args.strokes_max is None else args.strokes_max
    spec = dataclasses.replace(spec, num_strokes_range=(lo, hi))
    spec.validate()

    out = Path(args.out)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    jobs = [(i, args.seed, args.size, truth_paths, noise_paths, spec) for i in range(args.count)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_synth_one, jobs, chunksize=8))
    else:
        results = [_synth_one(j) for j in jobs]

    records = []
    for r in sorted(results, key=lambda r: r["index"]):
        t, rec = r["tuple"], r["record"]
        stem = images / rec["id"]
        synth.save_image(f"{stem}_I.png", t.degraded)
        synth.save_image(f"{stem}_O.png", t.truth)
        synth.save_mask(f"{stem}_M.png", t.mask)
        synth.save_mask(f"{stem}_Msoft.png", t.soft_mask)
        records.append(rec)
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    cov = np.array([r["coverage"] for r in records])
    finite = cov[np.isfinite(cov)]
    summary = {
        "count": len(records),
        "mean": float(finite.mean()) if finite.size else math.inf,
        "std": float(finite.std()) if finite.size else 0.0,
        "min": float(cov.min()),
        "max": float(cov.max()),
    }
    if args.coverage_report:
        (out / "coverage_report.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(f"coverage rho: mean {summary['mean']:.3f} std {summary['std']:.3f} "
              f"range [{summary['min']:.3f}, {summary['max']:.3f}]")
    print(f"wrote {len(records)} tuples to {out}")
    return 0


def cmd_toy_images(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        synth.save_image(out / f"toy_{i:05d}.png", synth.procedural_image(synth.sample_seed(args.seed, i), args.size, args.size))
    print(f"wrote {args.count} images to {out}")
    return 0


# ---------------------------------------------------------------------------
# train / infer / eval
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import training

    state = training.load_state(args.resume) if args.resume else None
    base = state.cfg if state is not None else training.TrainConfig()
    cfg = training.load_config(args.config, base) if args.config else base
    overrides = {"stage": args.stage, "data": args.data, "out": args.out}
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()

    data = training.load_dataset(args.data)
    if data.degraded.shape[-1] != cfg.net.image_size or data.degraded.shape[-2] != cfg.net.image_size:
        raise ConfigError(f"dataset is {tuple(data.degraded.shape[-2:])} px but net.image_size = {cfg.net.image_size}")
    if args.stage == "joint" and state is None:
        raise ConfigError("joint training needs --resume with a pretrained state")

    logger = training.JsonlLog(Path(args.out) / "train_log.jsonl")
    if args.stage == "joint":
        state = training.joint_train(cfg, state, data, logger)
    else:
        state = training.STAGE_FUNCS[args.stage](cfg, data, state, logger)
    last = state.history[-1] if state.history else {}
    print(f"stage {args.stage}: step {state.step}; last {json.dumps(last)}")
    print(f"checkpoint: {Path(args.out) / 'last.ckpt'}")
    return 0


def _load_models(path: str):
    from .networks import load_checkpoint, models_from_tensors

    mpn, rin, _ = models_from_tensors(load_checkpoint(path))
    return mpn, rin


def cmd_infer(args) -> int:
    from .metrics import binarize_mask
    from .training import predict

    mpn, rin = _load_models(args.ckpt)
    src = Path(args.input)
    paths = synth.list_images(src) if src.is_dir() else [src]
    if not paths:
        raise ConfigError(f"no images under {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = mpn.cfg.image_size
    for p in paths:
        x = torch.from_numpy(np.moveaxis(synth.load_image(p, size), -1, 0)[None].copy())
        repaired, mask = predict(mpn, rin, x)
        synth.save_image(out / f"{p.stem}_out.png", np.moveaxis(repaired[0].numpy(), 0, -1))
        if args.save_mask:
            m = mask[0, 0].numpy()
            synth.save_mask(out / f"{p.stem}_mask.png", m)
            synth.save_mask(out / f"{p.stem}_maskbin.png", binarize_mask(m, args.mask_threshold))
    print(f"processed {len(paths)} image(s) into {out}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_dataset

    mpn, rin = _load_models(args.ckpt)
    data = load_dataset(args.data)
    report = {"dataset": str(args.data), **evaluate(mpn, rin, data)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _selftest_checks():
    from .losses import disc_loss_gp
    from .metrics import eval_bce, psnr, ssim
    from .networks import TINY, build_models, vcn_forward
    from .numerics import STEP_LADDER, grad_check, standard_ops
    from .pcn import PCB, SeGate, pcn_apply, transfer_op

    g = torch.Generator().manual_seed(0)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    def u(*shape):
        return torch.rand(*shape, generator=g, dtype=torch.float64)

    for name, (op, inputs) in standard_ops(0).items():
        yield f"grad {name}", grad_check(op, inputs, 1e-4, step=STEP_LADDER)

    torch.manual_seed(0)
    gate = SeGate(4, 2).double()
    yield "grad transfer_op", grad_check(lambda x, h: transfer_op(x, h, 1e-8), [r(1, 4, 5, 5), u(1, 1, 5, 5)], 1e-4, step=STEP_LADDER)
    yield "grad pcn_apply", grad_check(lambda x, h: pcn_apply(x, h, gate, 1e-8), [r(2, 4, 5, 5), u(2, 1, 5, 5)], 1e-4, step=STEP_LADDER)
    block = PCB(4, 2, 1e-8).double()
    yield "grad pcb_forward", grad_check(block, [r(1, 4, 6, 6), u(1, 1, 12, 12)], 1e-4, step=STEP_LADDER)

    cfg = dataclasses.replace(TINY, eps=1e-8)
    mpn, rin, disc = build_models(cfg, seed=0, dtype=torch.float64)

    class Full(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.mpn, self.rin = mpn, rin

        def forward(self, x):
            o, m = vcn_forward(self.mpn, self.rin, x)
            return torch.cat([o.flatten(), m.flatten()])

    x = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (1, 3, 16, 16)))
    yield "grad vcn_forward 16px", grad_check(Full(), [x], 1e-4, step=STEP_LADDER)
    fake, real, t = x * 0.5, torch.flip(x, [-1]), torch.tensor([0.3], dtype=torch.float64)
    yield "grad gradient penalty", grad_check(lambda: disc_loss_gp(disc, fake, real, 10.0, t=t).total.reshape(1), [], 1e-4,
                                              wrt=list(disc.named_parameters()), step=STEP_LADDER, atol=1e-6)

    a = np.random.default_rng(1).uniform(0, 0.8, (16, 16, 3))
    yield "psnr 0.1 offset = 20 dB", abs(psnr(a, a + 0.1) - 20.0) <= 0.01
    yield "ssim constant closed form", abs(ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.6)) - 0.6001) <= 1e-3
    yield "eval_bce(0.5) = ln 2", abs(eval_bce(np.full((8, 8), 0.5), np.eye(8)) - math.log(2)) <= 1e-6

    ok = True
    for i in range(20):
        tt = synth.make_training_tuple(synth.procedural_image(i, 32, 32), synth.procedural_image(i + 100, 32, 32), seed=i)
        a = tt.soft_mask.astype(np.float32)
        ok &= np.array_equal(tt.degraded, tt.truth * (1 - a) + tt.noise * a)
    yield "composition identity", ok


def cmd_selftest(args) -> int:
    torch.set_num_threads(1)
    failed = 0
    for name, result in _selftest_checks():
        passed = bool(result)
        failed += not passed
        detail = " " + str(result).split(" ", 1)[1] if not isinstance(result, (bool, np.bool_)) else ""
        print(f"{'PASS' if passed else 'FAIL'} {name}{detail}")
    print(f"{failed} failure(s)")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blindinpaint", description="Blind image inpainting at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize (degraded, truth, mask) training tuples")
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strokes-min", type=int, default=None, help="fewest strokes per mask")
    p.add_argument("--strokes-max", type=int, default=None, help="most strokes per mask")
    p.add_argument("--coverage-report", action="store_true", help="write coverage_report.json")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("mpn", "rin", "joint"), required=True)
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", help="state checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="repair images with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--save-mask", action="store_true", help="also write soft and binary masks")
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="BCE / PSNR / SSIM on a synthesized dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="gradient checks and metric fixtures")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("toy-images", help="write procedural RGB images usable as truth/noise sources")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_images)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
