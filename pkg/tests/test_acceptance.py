"""End-to-end acceptance scenarios on the synthetic sequence (about 3 minutes in total)."""

import pytest

import scenarios


def test_robust_em_beats_least_squares_under_corruption():
    r = scenarios.criterion_1()
    assert r["em_mean_deg"] <= 3.0, r
    assert r["baseline_mean_deg"] >= 2 * r["em_mean_deg"], r


def test_end_to_end_pipeline_with_perturbed_poses(tmp_path):
    r = scenarios.criterion_2(str(tmp_path))
    assert r["normal_mean_deg"] <= 2.0, r
    assert max(r["albedo_rel_rms"]) <= 0.05, r


def test_lighting_from_ratios():
    r = scenarios.criterion_3()
    assert all(e <= 0.02 for e in r["shading_rel_rms"]), r


def test_chromaticity_matching_beats_intensity_matching():
    r = scenarios.criterion_4()
    assert 2.5 <= r["initial_misalignment_px"] <= 4.0, r
    assert r["chroma"] <= 0.5, r
    assert r["intensity"] > r["chroma"], r


def test_integration_halves_prior_error():
    r = scenarios.criterion_5()
    assert r["refined_rmse_m"] <= 0.5 * r["prior_rmse_m"], r


@pytest.mark.slow
def test_normal_solver_agrees_with_grid_search():
    r = scenarios.criterion_7()
    assert r["max_disagreement_deg"] <= 1.0, r
