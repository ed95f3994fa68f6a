"""Ablation suites: training schemes, fusion methods, embedding size, step sweep.

Each suite writes ``<suite>.tsv`` (suite, variant, psnr_db, ssim, runtime_s,
steps, seed) and a PNG plot into the run directory. Everything except the
runtime column is reproducible for a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import RunConfig  # noqa: E402
from .training import (  # noqa: E402
    ConfigError,
    PairData,
    SchemeFlags,
    evaluate,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    time_inference,
    train_stage1,
    train_stage2,
    variant_checkpoint,
)

log = logging.getLogger(__name__)

SUITES = ("scheme", "fusion", "embed_size", "step_sweep")
COLUMNS = ("suite", "variant", "psnr_db", "ssim", "runtime_s", "steps", "seed")


@dataclass
class AblationReport:
    suite: str
    rows: list[dict]
    table: Path
    plot: Path
    checkpoints: dict[str, Path] = field(default_factory=dict)

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)


def write_table(rows, path) -> Path:
    path = Path(path)
    lines = ["\t".join(COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            r["suite"], r["variant"], f"{r['psnr_db']:.4f}", f"{r['ssim']:.6f}",
            f"{r['runtime_s']:.6f}", str(r["steps"]), str(r["seed"]),
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        r = dict(zip(head, line.split("\t")))
        for k in ("psnr_db", "ssim", "runtime_s"):
            r[k] = float(r[k])
        r["steps"], r["seed"] = int(r["steps"]), int(r["seed"])
        out.append(r)
    return out


def _row(suite, variant, report, steps, seed) -> dict:
    return {"suite": suite, "variant": variant, "psnr_db": report.mean_psnr, "ssim": report.mean_ssim,
            "runtime_s": report.runtime_per_frame, "steps": steps, "seed": seed}


def _plot(rows, path, suite: str) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if suite == "step_sweep":
        steps = [r["steps"] for r in rows]
        ax.plot(steps, [r["psnr_db"] for r in rows], "o-", color="C0")
        ax.set_xscale("log")
        ax.set_xlabel("diffusion steps")
        ax.set_ylabel("PSNR (dB)", color="C0")
        ax2 = ax.twinx()
        ax2.plot(steps, [1e3 * r["runtime_s"] for r in rows], "s--", color="C1")
        ax2.set_ylabel("ms / frame", color="C1")
    else:
        names = [r["variant"] for r in rows]
        ax.bar(range(len(rows)), [r["psnr_db"] for r in rows], color="C0")
        ax.set_xticks(range(len(rows)), names, rotation=30 if suite == "embed_size" else 0)
        ax.set_ylabel("PSNR (dB)")
        lo = min(r["psnr_db"] for r in rows)
        ax.set_ylim(max(0.0, lo - 3), max(r["psnr_db"] for r in rows) + 1)
    ax.set_title(suite)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def _eval_data(cfg: RunConfig, bins: int) -> tuple[PairData, PairData]:
    try:
        train, val = load_manifest(cfg.manifest, cfg.dataset.task, bins)
    except FileNotFoundError as e:
        raise ConfigError(f"{e}; generate the base dataset first (gen-data)") from e
    return train, (val if cfg.ablation.eval_split == "val" else train)


def _need(path, key: str) -> dict:
    if path is None:
        raise ConfigError(f"this suite needs a prerequisite checkpoint: set [ablation] {key}")
    return load_checkpoint(path)


def run_ablation(suite: str, cfg: RunConfig, root=None) -> AblationReport:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; valid suites: {', '.join(SUITES)}")
    run_dir = cfg.run_dir(root)
    hae_cfg = cfg.hae_config()
    seed = cfg.training.seed
    train, eval_data = _eval_data(cfg, hae_cfg.bins)
    rows, ckpts = [], {}
    denoiser = cfg.denoiser_config()

    def stage2(stage1, variant, denoiser=denoiser):
        if variant in ("V0", "V1"):
            return variant_checkpoint(stage1, variant, denoiser, cfg.schedule.T_steps, cfg.beta_range)
        tc = cfg.train_config(2)
        tc = replace(tc, ablation=replace(tc.ablation, variant=variant))
        return train_stage2(tc, stage1, denoiser, cfg.beta_range, train, train)

    if suite == "scheme":
        s1 = _need(cfg.ablation.stage1_ckpt, "stage1_ckpt")
        for v in cfg.ablation.variants:
            SchemeFlags(variant=v)
            ck = stage2(s1, v)
            ckpts[v] = save_checkpoint(ck, run_dir / f"scheme_{v}.pt")
            rep = evaluate(ck, eval_data, seed=seed)
            rows.append(_row(suite, v, rep, rep.step_count, seed))
    elif suite == "fusion":
        for fusion in cfg.ablation.fusions:
            tc = cfg.train_config(1)
            tc = replace(tc, ablation=replace(tc.ablation, fusion=fusion))
            s1 = train_stage1(tc, hae_cfg, train, train)
            ckpts[fusion] = save_checkpoint(s1, run_dir / f"fusion_{fusion}.pt")
            rep = evaluate(variant_checkpoint(s1, "V0", denoiser), eval_data, seed=seed)
            rows.append(_row(suite, fusion, rep, 0, seed))
    elif suite == "embed_size":
        for n in cfg.ablation.n_down_values:
            tc = cfg.train_config(1)
            tc = replace(tc, ablation=replace(tc.ablation, n_down=n))
            s1 = train_stage1(tc, hae_cfg, train, train)
            ckpts[f"f{n}-stage1"] = save_checkpoint(s1, run_dir / f"embed_f{n}_stage1.pt")
            rep = evaluate(variant_checkpoint(s1, "V0", cfg.denoiser_config(n)), eval_data, seed=seed)
            rows.append(_row(suite, f"f{n}-stage1", rep, 0, seed))
            s2 = stage2(s1, cfg.training.variant, cfg.denoiser_config(n))
            ckpts[f"f{n}-stage2"] = save_checkpoint(s2, run_dir / f"embed_f{n}_stage2.pt")
            rep = evaluate(s2, eval_data, seed=seed)
            rows.append(_row(suite, f"f{n}-stage2", rep, rep.step_count, seed))
    else:
        s2 = _need(cfg.ablation.stage2_ckpt, "stage2_ckpt")
        if s2["stage"] != 2 or s2.get("variant") in ("V0", "V1"):
            raise ConfigError("step_sweep needs a trained stage-2 checkpoint (variant V2..V6)")
        for steps in sorted(cfg.ablation.step_counts):
            rep = evaluate(s2, eval_data, steps=steps, seed=seed)
            rep.runtime_per_frame = time_inference(s2, eval_data, steps, cfg.ablation.timing_repeats)
            rows.append(_row(suite, f"T={steps}", rep, steps, seed))
    for r in rows:
        log.info("%s %s psnr=%.2f ssim=%.4f", suite, r["variant"], r["psnr_db"], r["ssim"])
    table = write_table(rows, run_dir / f"{suite}.tsv")
    plot = _plot(rows, run_dir / f"{suite}.png", suite)
    return AblationReport(suite, rows, table, plot, ckpts)
