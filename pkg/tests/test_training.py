from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import TINY_HAE, TINY_UNET
from eventdiff.hae import HybridAutoEncoder
from eventdiff.synth import Manifest, TripletSample
from eventdiff.training import (
    ConfigError,
    SchemeFlags,
    TrainConfig,
    _lr_factor,
    build_system,
    evaluate,
    interpolate,
    interpolation_inputs,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    stage2_step,
    train_stage1,
    train_stage2,
    variant_checkpoint,
)


def s1_config(manifest, **kw):
    return TrainConfig(stage=1, manifest=str(manifest.path), batch_size=2, eval_every=0, **kw)


def s2_config(manifest, variant="V5", **kw):
    return TrainConfig(stage=2, manifest=str(manifest.path), batch_size=2, eval_every=0,
                       ablation=SchemeFlags(variant=variant), **kw)


@pytest.fixture(scope="module")
def stage1(tiny_triplets):
    return train_stage1(s1_config(tiny_triplets, steps=3), TINY_HAE)


@pytest.fixture(scope="module")
def stage2(tiny_triplets, stage1):
    return train_stage2(s2_config(tiny_triplets, steps=2), stage1, TINY_UNET)


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# -- stage 1 -------------------------------------------------------------------

def test_zero_steps_returns_initialisation(tiny_triplets):
    ck = train_stage1(s1_config(tiny_triplets, steps=0, seed=4), TINY_HAE)
    torch.manual_seed(4)
    assert states_equal(ck["state_dict"], HybridAutoEncoder(TINY_HAE).state_dict())
    assert ck["step"] == 0 and ck["losses"] == []


def test_stage1_is_deterministic(tiny_triplets, stage1):
    again = train_stage1(s1_config(tiny_triplets, steps=3), TINY_HAE)
    assert again["losses"] == stage1["losses"] and len(stage1["losses"]) == 3
    assert states_equal(again["state_dict"], stage1["state_dict"])
    other = train_stage1(s1_config(tiny_triplets, steps=3, seed=1), TINY_HAE)
    assert other["losses"] != stage1["losses"]


def test_history_and_validation(tiny_triplets):
    ck = train_stage1(replace(s1_config(tiny_triplets, steps=2), eval_every=1), TINY_HAE)
    assert [h["epoch"] for h in ck["history"]] == [1, 2]
    assert all("val_psnr" in h for h in ck["history"])
    assert np.isfinite(ck["final_val_psnr"])


def test_stage1_errors(tiny_triplets, tmp_path):
    with pytest.raises(ConfigError):
        train_stage1(TrainConfig(stage=1), TINY_HAE)
    with pytest.raises(ConfigError):
        train_stage1(s1_config(tiny_triplets, crop_size=6), TINY_HAE)
    with pytest.raises(ConfigError):
        train_stage1(replace(s1_config(tiny_triplets), task="deblur"), TINY_HAE)
    with pytest.raises(ConfigError):
        TrainConfig(stage=3)
    with pytest.raises(ConfigError):
        TrainConfig(start="middle")
    # a broken sample is reported by name
    bad = tmp_path / "broken.npz"
    bad.write_bytes(b"not an archive")
    Manifest(tmp_path / "m.txt", [("broken.npz", "train")]).write()
    with pytest.raises(ValueError, match="broken"):
        load_manifest(tmp_path / "m.txt", "interpolate", 2)


def test_lr_decay_factor():
    assert _lr_factor(5, None) == 1.0
    assert _lr_factor(89, 90) == 1.0 and _lr_factor(90, 90) == 0.1


def test_crop_training_runs(tiny_triplets):
    ck = train_stage1(s1_config(tiny_triplets, steps=1, crop_size=16), TINY_HAE)
    assert ck["step"] == 1


# -- stage 2 -------------------------------------------------------------------

def test_stage2_requires_compatible_stage1(tiny_triplets, stage1, stage2):
    with pytest.raises(ConfigError):
        train_stage2(s2_config(tiny_triplets), None, TINY_UNET)
    with pytest.raises(ConfigError):
        train_stage2(s2_config(tiny_triplets), stage2, TINY_UNET)
    with pytest.raises(ConfigError):
        train_stage2(replace(s2_config(tiny_triplets), task="deblur"), stage1, TINY_UNET)
    flags = SchemeFlags(variant="V5", n_down=3)
    with pytest.raises(ConfigError):
        train_stage2(replace(s2_config(tiny_triplets), ablation=flags), stage1, TINY_UNET)
    with pytest.raises(ConfigError):
        train_stage2(s1_config(tiny_triplets), stage1, TINY_UNET)


@pytest.mark.parametrize("variant", ["V2", "V3", "V4", "V5", "V6"])
def test_trainable_parts_per_variant(tiny_triplets, stage1, variant):
    # two steps: the zero-initialised output layer passes no gradient to the conditions on step one
    ck = train_stage2(s2_config(tiny_triplets, variant, steps=2), stage1, TINY_UNET)
    enc0 = {k[8:]: v for k, v in stage1["state_dict"].items() if k.startswith("encoder.")}
    dec0 = {k: v for k, v in stage1["state_dict"].items() if k.startswith("decoder.")}
    assert states_equal(ck["gt_encoder_state"], enc0)  # frozen snapshot, bit-identical
    enc = {k[8:]: v for k, v in ck["state_dict"].items() if k.startswith("encoder.")}
    dec = {k: v for k, v in ck["state_dict"].items() if k.startswith("decoder.")}
    assert states_equal(enc, enc0) == (variant != "V6")
    assert states_equal(dec, dec0) == (variant not in ("V5", "V6"))
    assert states_equal(ck["cond_encoder_state"], enc0) == (variant in ("V2", "V3"))
    assert ck["variant"] == variant and ck["stage"] == 2


def test_v2_uses_noise_regression(tiny_triplets, stage1):
    system = build_system(variant_checkpoint(stage1, "V1", TINY_UNET))
    train, _ = load_manifest(tiny_triplets.path, "interpolate", TINY_HAE.bins)
    batch = train.subset([0, 1])
    gen = torch.Generator().manual_seed(0)
    loss = stage2_step(system, SchemeFlags(variant="V2"), batch, "noised_gt", gen)
    # zero-initialised noise predictor: MSE against unit Gaussian noise, about 1
    assert 0.5 < loss.item() < 1.5
    direct = stage2_step(system, SchemeFlags(variant="V3"), batch, "noised_gt", gen)
    assert direct.item() != loss.item()


def test_stage2_deterministic(tiny_triplets, stage1, stage2):
    again = train_stage2(s2_config(tiny_triplets, steps=2), stage1, TINY_UNET)
    assert again["losses"] == stage2["losses"]
    assert states_equal(again["unet_state"], stage2["unet_state"])


# -- inference -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, stage2):
    p = save_checkpoint(stage2, tmp_path / "c.pt")
    back = load_checkpoint(p)
    assert states_equal(back["unet_state"], stage2["unet_state"])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")


def test_interpolate_shape_determinism_and_steps(tiny_triplets, stage2):
    s = TripletSample.load(tiny_triplets.files()[0])
    a = interpolate(stage2, s.I0, s.I1, s.events, s.t_gt, seed=3)
    b = interpolate(stage2, s.I0, s.I1, s.events, s.t_gt, seed=3)
    assert a.shape == s.I0.shape and np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    sys3 = build_system(stage2, steps=3)
    assert sys3.sched.T == 3
    with pytest.raises(ValueError):
        interpolate(stage2, s.I0, s.I1, s.events, 0.0)
    with pytest.raises(ValueError):
        interpolate(stage2, s.I0, s.I1, s.events, 1.0)


def test_sampler_call_count(tiny_triplets, stage2):
    train, _ = load_manifest(tiny_triplets.path, "interpolate", TINY_HAE.bins)
    system = build_system(stage2, steps=4)
    with torch.no_grad():
        system.predict(train.subset([0]))
    assert system.unet.n_calls == 4


def test_split_inputs_use_boundary_halves(tiny_triplets):
    s = TripletSample.load(tiny_triplets.files()[0])
    (i0, v0), (i1, v1) = interpolation_inputs(s.I0, s.I1, s.events, s.t_gt, 2)
    ts = s.events.timestamp
    t0, t1 = s.events.window
    cut = t0 + s.t_gt * (t1 - t0)
    assert v0.sum() == np.sum(ts < cut) and v1.sum() == np.sum(ts > cut)
    assert np.array_equal(i0, s.I0) and np.array_equal(i1, s.I1)


def test_v0_and_v1_containers(tiny_triplets, stage1):
    train, _ = load_manifest(tiny_triplets.path, "interpolate", TINY_HAE.bins)
    v0 = variant_checkpoint(stage1, "V0", TINY_UNET)
    rep = evaluate(v0, train)
    assert rep.step_count == 0 and len(rep.psnr) == len(train)
    s = TripletSample.load(tiny_triplets.files()[0])
    with pytest.raises(ConfigError):
        interpolate(v0, s.I0, s.I1, s.events, s.t_gt)
    v1 = variant_checkpoint(stage1, "V1", TINY_UNET)
    system = build_system(v1)
    batch = train.subset([0])
    with torch.no_grad():
        conds = system.conditions(batch)
        manual = system.hae.decode(system.hae.quantize((conds[0] + conds[1]) / 2).z_q,
                                   *system.pyramids(batch), *batch.images)
        assert torch.allclose(system.predict_mean(batch), manual, atol=1e-6)
    with pytest.raises(ConfigError):
        variant_checkpoint(stage1, "V3")
    with pytest.raises(ConfigError):
        evaluate(stage1, train)


def test_evaluate_report(tiny_triplets, stage2):
    _, val = load_manifest(tiny_triplets.path, "interpolate", TINY_HAE.bins)
    a = evaluate(stage2, val, seed=1)
    b = evaluate(stage2, val, seed=1)
    assert a.psnr == b.psnr and a.ssim == b.ssim
    assert a.step_count == 5 and a.runtime_per_frame > 0
    assert evaluate(stage2, val, steps=2).step_count == 2


def test_deblur_pipeline(tiny_deblur):
    from eventdiff.synth import DeblurSample
    from eventdiff.training import deblur

    cfg = replace(TINY_HAE, decoder_head="simple_unet", bins=3)
    s1 = train_stage1(TrainConfig(stage=1, manifest=str(tiny_deblur.path), task="deblur", batch_size=2,
                                  steps=1, eval_every=0), cfg)
    s2 = train_stage2(TrainConfig(stage=2, manifest=str(tiny_deblur.path), task="deblur", batch_size=2,
                                  steps=1, eval_every=0), s1, TINY_UNET)
    assert s2["denoiser_config"]["n_cond"] == 1
    s = DeblurSample.load(tiny_deblur.files()[0])
    a, b = deblur(s2, s.blur, s.events, seed=2), deblur(s2, s.blur, s.events, seed=2)
    assert a.shape == s.blur.shape and np.array_equal(a, b)
    with pytest.raises(ConfigError):
        interpolate(s2, s.blur, s.blur, s.events, 0.5)
