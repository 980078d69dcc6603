"""Training properties of the reference toy runs (shared with the acceptance suite)."""

import numpy as np

from golden.make_golden import history_array


def test_loss_halves_at_every_seed(full_runs):
    runs, _ = full_runs
    for run in runs:
        history = run.checkpoint.history
        assert history[-1]["total"] < 0.5 * history[0]["total"], run.config.seed


def test_reference_history_matches_golden(full_runs, golden_dir):
    runs, _ = full_runs
    assert runs[0].config.seed == 0
    with np.load(golden_dir / "toy_golden.npz") as frozen:
        np.testing.assert_allclose(history_array(runs[0].checkpoint.history), frozen["toy_loss_history"],
                                   rtol=1e-9, atol=1e-12)


def test_reference_history_trends_down(golden_dir):
    with np.load(golden_dir / "toy_golden.npz") as frozen:
        total = frozen["toy_loss_history"][:, 3]
    assert np.all(np.diff(total[:8]) < 0)
    assert total[-5:].mean() < total[:5].mean() / 10
