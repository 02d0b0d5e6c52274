import numpy as np
import pytest
from hypothesis import strategies as st

from descdet import descriptors as ds


def unit(*xs):
    v = np.asarray(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


def table_encoder(table):
    """Text encoder backed by a dict of phrase -> vector."""
    return lambda phrase: np.asarray(table[ds.normalize_phrase(phrase)], dtype=np.float64)


def random_dictionary(rng, n_categories, k_max, dim, k_min=1):
    cats = [f"c{i}" for i in range(n_categories)]
    table, seeds = {}, {}
    for c in cats:
        k = int(rng.integers(k_min, k_max + 1))
        seeds[c] = [f"{c} d{j}" for j in range(k)]
        for p in seeds[c]:
            table[p] = rng.standard_normal(dim)
    return ds.init_dictionary(cats, seeds, table_encoder(table))


@pytest.fixture
def cat_dog():
    table = {"whiskers": [1, 0, 0, 0], "fur": [0, 1, 0, 0], "bark": [0, 0, 1, 0], "tail": [0, 0, 0, 1]}
    return ds.init_dictionary(["cat", "dog"], {"cat": ["whiskers", "fur"], "dog": ["bark", "tail"]}, table_encoder(table))


seeds = st.integers(min_value=0, max_value=2**32 - 1)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for the acceptance summary, then assert."""

    def record(name, ok, detail=""):
        _ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
