import numpy as np
import pytest

from figrot import diffcore as dc
from figrot.synth import gen_synthetic, load_fixture
from figrot.vagfem import FusionConfig


@pytest.fixture(scope="session")
def small_cfg():
    return FusionConfig(embed_dim=16, model_dim=32, layers=1, heads=4,
                        head_dim=8)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    gen_synthetic(24, 32, 7, out)
    return out


@pytest.fixture(scope="session")
def fixture_data(fixture_dir):
    return load_fixture(fixture_dir)


def op_fd_check(build, params, h=1e-5, tol=1e-6):
    """Finite-difference check a single-op graph built by `build()`."""
    err = dc.finite_diff_check(build, params, h=h)
    assert err <= tol, f"fd error {err:.3e} > {tol}"
    return err
