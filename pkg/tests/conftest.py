import numpy as np
import pytest

from twobranch.branches import ModelDims, init_model
from twobranch.synthetic import SyntheticSpec, generate_synthetic

H = 1e-5


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (edited in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / (||a|| + ||b||)``; 0 when both are at roundoff level."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-8:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def small_dims(nonlinear=True) -> ModelDims:
    return ModelDims(image_in=7, text_in=6, image_hidden=9, text_hidden=8, embed=5,
                     head_hidden=(6, 4), nonlinear=nonlinear)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def loc_ds():
    """Small synthetic localization dataset (all splits)."""
    spec = SyntheticSpec(task="localization", train_items=40, val_items=0, test_items=10,
                         latent_dim=4, image_dim=12, text_dim=10, seed=7)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def ret_ds():
    spec = SyntheticSpec(task="retrieval", train_items=40, val_items=0, test_items=10,
                         latent_dim=4, image_dim=12, text_dim=10, seed=11)
    return generate_synthetic(spec)


def model_for(ds, kind="embedding", seed=0, nonlinear=True):
    if ds.task == "localization":
        dims = (ds.images[0].regions[0].feature.size, ds.phrase_features.shape[1])
    else:
        dims = (ds.image_features.shape[1], ds.sentence_features.shape[1])
    return init_model(kind, ModelDims(dims[0], dims[1], 16, 16, 8, (8, 4), nonlinear), seed)


# one result line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
