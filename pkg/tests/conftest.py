import numpy as np
import pytest

from polynext.model import set_norm_momentum
from polynext.tensor import Tensor, hadamard, sum as tsum


def project(t: Tensor, seed: int = 123) -> Tensor:
    """Scalar ``<t, w>`` with fixed random ``w`` so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(t.shape)
    if t.ndim == 0:
        return t * float(w)
    return tsum(hadamard(t, Tensor(w)))


def calibrate(model, images: np.ndarray, batch_size: int | None = None) -> None:
    """Running statistics as the plain average over train-mode passes of ``images``."""
    batch_size = batch_size or len(images)
    for k, start in enumerate(range(0, len(images), batch_size)):
        set_norm_momentum(model, 1.0 / (k + 1))
        model(Tensor(images[start:start + batch_size]), "train")
    set_norm_momentum(model, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
