"""Shared fixtures: one small generated catalog reused across modules."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from demandgrid.datagen import CatalogSpec, generate_catalog  # noqa: E402
from demandgrid.features import CovariateSchema, FeatureBuilder  # noqa: E402
from demandgrid.imputation import impute_catalog  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def small_spec():
    return CatalogSpec(n_articles=40, n_weeks=80, seed=3)


@pytest.fixture(scope="session")
def small_catalog(small_spec):
    return generate_catalog(small_spec)


@pytest.fixture(scope="session")
def small_imputed(small_catalog):
    return impute_catalog(small_catalog[0])


@pytest.fixture(scope="session")
def small_schema():
    return CovariateSchema(window=16)


@pytest.fixture(scope="session")
def small_builder(small_schema, small_catalog, small_imputed):
    return FeatureBuilder(small_schema, small_catalog[0], small_imputed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
