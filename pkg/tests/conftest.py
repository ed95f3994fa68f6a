import pytest
import torch

from eventdiff.diffusion import DenoiserConfig
from eventdiff.hae import HAEConfig
from eventdiff.synth import make_dataset, make_deblur_dataset, random_scenes

torch.set_num_threads(1)

TINY_HAE = HAEConfig(bins=2, base_channels=4, event_channels=2, res_blocks=1, n_down=2, codebook_size=16)
TINY_UNET = DenoiserConfig(channels=(8, 16), time_embed_dim=8)


@pytest.fixture(scope="session")
def tiny_triplets(tmp_path_factory):
    """Two 32x32 scenes, four triplets, one of them held out for validation."""
    out = tmp_path_factory.mktemp("tiny_vfi")
    scenes = random_scenes(2, (32, 32), seed=11, size=(6, 10), duration=0.375)
    return make_dataset(scenes, out, skips=1, val_fraction=0.25, upsample=4)


@pytest.fixture(scope="session")
def tiny_deblur(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_deblur")
    scenes = random_scenes(2, (32, 32), seed=12, size=(6, 10), duration=0.375)
    return make_deblur_dataset(scenes, out, exposure=2, upsample=4)


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Store one PASS/FAIL line for the end-of-session summary and echo it."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
