"""Metric definitions checked against hand computations and closed forms."""

import numpy as np
import pytest

from srat.evaluation import (
    EvalError,
    EvalGrid,
    MetricsReport,
    eval_adherence_identity,
    eval_leakage,
    eval_prior,
    frechet_diagonal,
    pearson,
    write_csv,
)
from srat.generator import SamplerConfig, VelocityModel
from srat.params import ParamStore
from srat.world import caption_for


# ---------------------------------------------------------------------------
# pearson


def test_pearson_hand_value():
    # x = [1, 2, 3], y = [1, 2, 4]: sum(xc*yc) = 3, sum(xc^2) = 2, sum(yc^2) = 42/9
    expected = 3.0 / np.sqrt(2.0 * 42.0 / 9.0)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(expected, abs=1e-12)


def test_pearson_extremes_and_invariance():
    xs = np.random.default_rng(0).normal(size=50)
    assert pearson(xs, 3.0 * xs + 2.0) == pytest.approx(1.0)
    assert pearson(xs, -xs) == pytest.approx(-1.0)
    assert abs(pearson(xs, np.roll(xs, 25))) < 1.0


def test_pearson_rejects_degenerate_input():
    with pytest.raises(EvalError):
        pearson([1.0], [2.0])
    with pytest.raises(EvalError):
        pearson([1, 2], [5, 5])
    with pytest.raises(EvalError):
        pearson([1, 2, 3], [1, 2])


# ---------------------------------------------------------------------------
# diagonal Fréchet distance


def test_frechet_identical_sets_is_zero():
    a = np.random.default_rng(1).normal(size=(100, 8))
    assert frechet_diagonal(a, a.copy()) == 0.0


def test_frechet_mean_shift_closed_form():
    # equal variances, means differing by delta: fd = sum(delta^2)
    rng = np.random.default_rng(2)
    a = rng.normal(size=(200000, 4))
    b = a + np.array([1.0, 0.0, -2.0, 0.5])
    assert frechet_diagonal(a, b) == pytest.approx(1.0 + 4.0 + 0.25, abs=1e-2)


def test_frechet_variance_only_closed_form():
    # zero means, per-dim sigmas s1 and s2: fd = sum((s1 - s2)^2)
    rng = np.random.default_rng(3)
    a = rng.normal(0, 1.0, size=(400000, 2))
    b = rng.normal(0, 3.0, size=(400000, 2))
    assert frechet_diagonal(a, b) == pytest.approx(2.0 * (3.0 - 1.0) ** 2, rel=0.02)


def test_frechet_rejects_shape_mismatch():
    with pytest.raises(EvalError):
        frechet_diagonal(np.zeros((3, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# grid construction


def test_grid_rotations_are_stratified_and_cover_buckets():
    grid = EvalGrid(seed=0, n_refs=32)
    thetas = [f.theta for f in grid.references]
    assert thetas == sorted(thetas)
    assert min(thetas) > -45.0 and max(thetas) < 45.0
    assert len({caption_for(f).rot_bucket for f in grid.references}) >= 8
    assert grid.ref_images.shape == (32, 256)


def test_grid_is_deterministic_in_seed():
    a = EvalGrid(seed=5, n_refs=16)
    b = EvalGrid(seed=5, n_refs=16)
    assert np.array_equal(a.ref_images, b.ref_images)
    c = EvalGrid(seed=6, n_refs=16)
    assert not np.array_equal(a.ref_images, c.ref_images)


def test_grid_rejects_tiny_reference_sets():
    with pytest.raises(EvalError):
        EvalGrid(n_refs=8)


# ---------------------------------------------------------------------------
# metric plumbing on an untrained model (fast, pure noise output)


@pytest.fixture(scope="module")
def noise_model():
    store = ParamStore()
    return VelocityModel(store, hidden=32, blocks=2, init_seed=0)


@pytest.fixture(scope="module")
def small_grid():
    return EvalGrid(seed=0, n_refs=16, sampler=SamplerConfig(steps=4))


def test_adherence_counts_all_grid_cells(noise_model, small_grid):
    out = eval_adherence_identity(noise_model, small_grid)
    assert out["cells"] == 9 * 16
    assert out["undefined"] + len(small_grid.references) >= 0
    assert 0.0 <= out["identity_acc"] <= 1.0
    assert out["rot_adherence_err"] >= 0.0


def test_leakage_returns_bounded_correlations(noise_model, small_grid):
    out = eval_leakage(noise_model, small_grid)
    assert -1.0 <= out["rot_leakage_corr"] <= 1.0
    assert -1.0 <= out["bright_leakage_corr"] <= 1.0
    assert out["cells"] == 16


def test_prior_fd_zero_against_itself(noise_model, small_grid):
    # same model, same seeds, no adapter attached: identical generations
    assert eval_prior(noise_model, noise_model, small_grid, n=16) == 0.0


# ---------------------------------------------------------------------------
# report serialization


def make_report(**kw):
    base = dict(
        preset="vanilla", seed=0, identity_acc=0.5, fill_err=0.1,
        rot_adherence_err=12.0, pos_adherence_err=1.0, rot_leakage_corr=0.4,
        bright_leakage_corr=0.2, prior_fd=0.3, adherence_undefined=1,
        leakage_undefined=0, adherence_cells=576, leakage_cells=64,
    )
    base.update(kw)
    return MetricsReport(**base)


def test_report_validates_correlation_range():
    with pytest.raises(EvalError):
        make_report(rot_leakage_corr=1.5)


def test_report_json_roundtrip(tmp_path):
    import json

    rep = make_report()
    rep.to_json(tmp_path / "r.json")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["rot_leakage_corr"] == 0.4
    assert loaded["preset"] == "vanilla"


def test_write_csv_layout(tmp_path):
    path = tmp_path / "t.csv"
    write_csv([make_report(), make_report(seed=1, prior_fd=0.7)], path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["preset", "seed", "identity_acc"]
    assert len(lines) == 3
    assert lines[2].split(",")[header.index("prior_fd")] == "0.7"
