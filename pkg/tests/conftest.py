import numpy as np
import pytest

from anchorrec.config import ModelConfig
from anchorrec.ingest import FeatureBank, InteractionDataset, build_similarity_graph
from anchorrec.model import build_context, init_state


def random_context(seed=0, users=12, items=15, dims=None, k_sim=3, density=0.3):
    rng = np.random.default_rng(seed)
    dims = dims or {"mm": 6, "t": 5, "v": 7}
    hit = rng.random((users, items)) < density
    hit[np.arange(users), rng.integers(0, items, users)] = True
    u, i = np.nonzero(hit)
    train = InteractionDataset(users, items, np.stack([u, i], axis=1))
    bank = FeatureBank({m: rng.standard_normal((items, k)) for m, k in dims.items()})
    return build_context(train, bank, build_similarity_graph(bank["mm"], k_sim))


@pytest.fixture
def small():
    """(context, state) pair with d = d_proj = 8."""
    ctx = random_context()
    return ctx, init_state(ctx, ModelConfig(d=8, d_proj=8), 0)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
