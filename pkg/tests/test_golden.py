"""Frozen outputs guard against silent numerical drift."""

import numpy as np
import pytest

from golden.make_golden import compute

TOLERANCES = {"forward_tokens": 1e-10, "light_map": 1e-10, "query": 1e-9, "loss_history": 1e-9,
              "attention": 1e-9}


@pytest.fixture(scope="module")
def current():
    return compute()


@pytest.fixture(scope="module")
def frozen(golden_dir):
    with np.load(golden_dir / "golden.npz") as data:
        return dict(data)


@pytest.mark.parametrize("name", sorted(TOLERANCES))
def test_matches_golden(name, current, frozen):
    assert current[name].shape == frozen[name].shape
    np.testing.assert_allclose(current[name], frozen[name], rtol=TOLERANCES[name], atol=TOLERANCES[name])


def test_golden_attention_is_normalised(frozen):
    np.testing.assert_allclose(frozen["attention"].sum(axis=0), 1.0, atol=1e-12)
