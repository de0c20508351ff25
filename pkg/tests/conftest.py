import pytest

from poul.cuckoo import FilterConfig
from poul.data import gen_dataset
from poul.ml import Hyperparams
from poul.protocol import PoulConfig


@pytest.fixture(scope="session")
def small_ds():
    return gen_dataset(120, 20, dim=24, informative=8, seed=3)


def small_config(n_shards=1, n_slices=3, dim=24, epochs=2, seed=0, multi_owner=False, buckets=256):
    return PoulConfig(
        n_shards=n_shards,
        n_slices=n_slices,
        dims=(dim, 16, 2),
        hp=Hyperparams(batch_size=32, epochs=epochs, learning_rate=0.1, rng_seed=seed),
        model_seed=seed,
        plan_seed=seed,
        filter=FilterConfig(bucket_count=buckets),
        multi_owner=multi_owner,
    )


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the terminal summary prints one line per criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
