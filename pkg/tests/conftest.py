import os
from pathlib import Path

import numpy as np
import pytest

from semguide import tensor as T
from semguide.cli import main

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("SEMGUIDE_ARTIFACTS", ROOT / "artifacts"))
DEFAULT_CFG = ROOT / "configs" / "default.cfg"


def central_difference(f, x, h=1e-5):
    """Central differences of a scalar function, evaluated in extended precision."""
    xl = np.asarray(x, dtype=np.longdouble)
    hl = np.longdouble(h)
    out = np.empty(xl.shape)
    for i in np.ndindex(xl.shape):
        xp = xl.copy()
        xp[i] += hl
        xm = xl.copy()
        xm[i] -= hl
        out[i] = float((f(xp) - f(xm)) / (2 * hl))
    return out


def rel_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def scalar_of(build):
    """Wrap ``build(Tensor) -> Tensor`` into a no-grad float function."""
    def f(x):
        with T.no_grad():
            return build(T.Tensor(x)).data
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])


def cli(*argv) -> None:
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"semguide {' '.join(map(str, argv))} exited with {code}")


@pytest.fixture(scope="session")
def trained():
    """Artifacts of the default pipeline: corpus, denoiser, encoders.

    Missing pieces are built through the CLI; training commands resume from
    their checkpoints, so a finished run costs only the reload.
    """
    art = ARTIFACTS
    c = ("--config", DEFAULT_CFG)
    if not (art / "corpus" / "metadata.txt").exists():
        cli(*c, "--out", art / "corpus", "gen-corpus")
    cli(*c, "--out", art / "denoiser", "train", "--corpus", art / "corpus")
    cli(*c, "--out", art / "encoders", "pretrain-encoder", "--corpus", art / "corpus")
    cli(*c, "--out", art / "encoders", "finetune-encoder", "--corpus", art / "corpus",
        "--encoder", art / "encoders" / "encoder_pretrained.ckpt")
    return art
