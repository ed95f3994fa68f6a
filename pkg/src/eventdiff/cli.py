"""``eventdiff`` command line: gen-data, train, infer, eval, ablate.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Flags override values from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .training import ConfigError

log = logging.getLogger("eventdiff")


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v < 1:
            raise argparse.ArgumentTypeError(f"must be >= 1, got {s}")
        return v
    return parse


def _interior(s):
    t = float(s)
    if not 0.0 < t < 1.0:
        raise argparse.ArgumentTypeError(f"t must lie strictly inside (0, 1), got {s}")
    return t


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eventdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                         help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--run-dir", help="run directory root (default $EVENTDIFF_RUN_DIR or ./runs)")

    g = sub.add_parser("gen-data", parents=[verbose], help="render synthetic scenes and simulate events")
    common(g)
    g.add_argument("--out", help="output directory (dataset.out_dir)")
    g.add_argument("--skips", type=_positive(int), help="frames skipped between boundary frames")
    g.add_argument("--task", choices=("interpolate", "deblur"))

    t = sub.add_parser("train", parents=[verbose], help="train stage 1 or stage 2")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--from-stage1", help="stage-1 checkpoint (required for --stage 2)")
    t.add_argument("--variant", choices=[f"V{i}" for i in range(7)])
    t.add_argument("--steps", type=int, help="optimisation steps")
    t.add_argument("--manifest", help="dataset manifest")

    i = sub.add_parser("infer", parents=[verbose], help="interpolate or deblur one sample")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--mode", choices=("interpolate", "deblur"), required=True)
    i.add_argument("--sample", required=True, help="sample file written by gen-data")
    i.add_argument("--t", type=_interior, help="normalized target time (interpolate; default: the sample's)")
    i.add_argument("--steps", type=_positive(int), help="diffusion steps at inference")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", help="output prefix (default: next to the sample)")

    e = sub.add_parser("eval", parents=[verbose], help="PSNR/SSIM of a stage-2 checkpoint over a manifest split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--steps", type=_positive(int))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write the report as JSON")

    a = sub.add_parser("ablate", parents=[verbose], help="run an ablation suite")
    common(a)
    a.add_argument("--suite", required=True, help="scheme, fusion, embed_size or step_sweep")
    a.add_argument("--stage1-ckpt")
    a.add_argument("--stage2-ckpt")
    return p


def _load_config(args, overrides: dict) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("training", {})["seed"] = args.seed
        overrides.setdefault("dataset", {})["seed"] = args.seed
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_raw({}, overrides=overrides)


def cmd_gen_data(args) -> int:
    from .synth import make_dataset, make_deblur_dataset

    ov = {"dataset": {k: v for k, v in (("out_dir", args.out), ("skips", args.skips), ("task", args.task)) if v is not None}}
    cfg = _load_config(args, ov)
    d = cfg.dataset
    scenes = cfg.scene_configs()
    if d.task == "interpolate":
        m = make_dataset(scenes, d.out_dir, d.skips, d.interior, d.val_fraction, d.upsample,
                         d.contrast_threshold, d.seed)
    else:
        m = make_deblur_dataset(scenes, d.out_dir, d.exposure, d.val_fraction, d.upsample,
                                d.contrast_threshold, d.seed)
    print(m.path)
    print(f"{len(m)} samples")
    return 0


def cmd_train(args) -> int:
    from .training import load_checkpoint, save_checkpoint, train_stage1, train_stage2

    ov: dict = {"training": {}}
    if args.steps is not None:
        ov["training"]["stage1_steps" if args.stage == 1 else "stage2_steps"] = args.steps
    if args.variant:
        ov["training"]["variant"] = args.variant
    if args.manifest:
        ov["training"]["manifest"] = args.manifest
    cfg = _load_config(args, ov)
    run_dir = cfg.run_dir(args.run_dir)
    tc = cfg.train_config(args.stage)
    if args.stage == 1:
        ckpt = train_stage1(tc, cfg.hae_config())
        name = "stage1.pt"
    else:
        if not args.from_stage1:
            raise UsageError("--stage 2 requires --from-stage1 <checkpoint>")
        s1 = load_checkpoint(args.from_stage1)
        log.info("variant %s uses the %s loss", tc.ablation.variant,
                 "direct embedding" if tc.ablation.direct_loss else "per-step noise")
        ckpt = train_stage2(tc, s1, cfg.denoiser_config(), cfg.beta_range)
        name = f"stage2_{tc.ablation.variant}.pt"
    path = save_checkpoint(ckpt, run_dir / name)
    with open(run_dir / f"{Path(name).stem}_metrics.jsonl", "w") as f:
        for entry in ckpt["history"]:
            f.write(json.dumps(entry) + "\n")
        f.write(json.dumps({"final_val_psnr": ckpt["final_val_psnr"], "step": ckpt["step"]}) + "\n")
    final = ckpt["losses"][-1] if ckpt["losses"] else float("nan")
    print(path)
    print(f"final loss {final:.6f}  validation PSNR {ckpt['final_val_psnr']:.2f} dB")
    return 0


def _save_image(prefix: Path, img: np.ndarray):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    np.save(prefix.with_suffix(".npy"), img.astype(np.float32))
    shown = img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))
    plt.imsave(prefix.with_suffix(".png"), np.clip(shown, 0, 1), cmap="gray", vmin=0, vmax=1,
               metadata={"Software": None})


def cmd_infer(args) -> int:
    from .metrics import MetricReport
    from .synth import DeblurSample, TripletSample
    from .training import deblur, interpolate, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    if ckpt.get("task") != args.mode:
        raise ConfigError(f"checkpoint was trained for {ckpt.get('task')!r}, not {args.mode!r}")
    sample = Path(args.sample)
    prefix = Path(args.out) if args.out else sample.with_name(sample.stem + f"_{args.mode}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "interpolate":
        s = TripletSample.load(sample)
        t = args.t if args.t is not None else s.t_gt
        out = interpolate(ckpt, s.I0, s.I1, s.events, t, steps=args.steps, seed=args.seed)
        gt = s.Igt if args.t is None or abs(args.t - s.t_gt) < 1e-12 else None
    else:
        if args.t is not None:
            raise UsageError("--t only applies to interpolate")
        s = DeblurSample.load(sample)
        out = deblur(ckpt, s.blur, s.events, steps=args.steps, seed=args.seed)
        gt = s.sharp
    _save_image(prefix, out)
    print(prefix.with_suffix(".npy"))
    if gt is not None:
        rep = MetricReport(step_count=args.steps or ckpt["schedule"]["T_steps"])
        rep.add(out, gt)
        prefix.with_suffix(".json").write_text(json.dumps(rep.as_dict(), indent=2))
        print(f"PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint, load_manifest

    ckpt = load_checkpoint(args.ckpt)
    train, val = load_manifest(args.manifest, ckpt["task"], ckpt["hae_config"]["bins"])
    rep = evaluate(ckpt, val if args.split == "val" else train, steps=args.steps, seed=args.seed)
    text = json.dumps(rep.as_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(f"PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f}  {1e3 * rep.runtime_per_frame:.1f} ms/frame")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import SUITES, run_ablation

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; valid suites: {', '.join(SUITES)}")
    ov = {"ablation": {k: v for k, v in (("stage1_ckpt", args.stage1_ckpt), ("stage2_ckpt", args.stage2_ckpt)) if v}}
    cfg = _load_config(args, ov)
    rep = run_ablation(args.suite, cfg, args.run_dir)
    print(rep.table)
    for r in rep.rows:
        print(f"{r['variant']:>12}  {r['psnr_db']:7.2f} dB  {r['ssim']:.4f}  {1e3 * r['runtime_s']:8.1f} ms")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"eventdiff {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"eventdiff {args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
