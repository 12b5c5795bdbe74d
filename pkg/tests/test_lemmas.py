import json

import numpy as np
import pytest

from exo_rl.env import build_decoupling_counterexample
from exo_rl.lemmas import (
    FAIL,
    PASS,
    SKIP,
    LemmaResult,
    check_instance,
    exo_dependent_counterexample,
    instance_for,
    verify_lemmas,
)


def test_suite_passes_on_default_family():
    report = verify_lemmas(30, seed=3)
    assert report["all_passed"]
    assert len(report["instances"]) == 30
    assert all(row["in_regime"] for row in report["instances"])
    json.dumps(report)


def test_named_fixtures_present():
    fixtures = verify_lemmas(0)["fixtures"]
    assert fixtures["exo_dependent_counterexample"]["status"] == PASS
    assert "id-counterexample/margin_dichotomy" in fixtures
    assert "combolock/perturbation" in fixtures


def test_zero_instances_still_checks_fixtures():
    report = verify_lemmas(0)
    assert report["instances"] == [] and report["all_passed"]


def test_instances_are_reproducible():
    a, b = instance_for(5, 7), instance_for(5, 7)
    assert a.counts == b.counts
    for Ta, Tb in zip(a.endo.T, b.endo.T):
        np.testing.assert_array_equal(Ta, Tb)


def test_eta_scale_beyond_regime_skips_margin_check():
    report = verify_lemmas(10, seed=0, eta_scale=3.0)
    statuses = {row["lemmas"]["margin_dichotomy"]["status"] for row in report["instances"]}
    assert statuses == {SKIP}
    assert not any(row["in_regime"] for row in report["instances"])
    # the remaining facts hold without the regime assumption
    assert report["all_passed"]


def test_check_instance_names():
    env = instance_for(0, 1)
    names = [r.name for r in check_instance(env, np.random.default_rng(0))]
    assert names == ["margin_dichotomy", "factorization", "endogenous_decoupling", "endogenous_optimality", "perturbation"]


def test_counterexample_needs_a_real_gap():
    assert exo_dependent_counterexample(min_gap=0.3).status == FAIL
    assert build_decoupling_counterexample().H == 2


@pytest.mark.parametrize("status,passed", [(PASS, True), (SKIP, True), (FAIL, False)])
def test_result_passed(status, passed):
    r = LemmaResult("x", status, {"k": 1})
    assert r.passed is passed
    assert r.to_dict() == {"status": status, "k": 1}
