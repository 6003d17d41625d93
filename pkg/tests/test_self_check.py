import pytest
import torch

from geowalk.services import manifold as mf
from geowalk.services import training as tr
from geowalk.services.self_check import CHECKS, results_payload, run_checks

FAST_CHECKS = [
    "spec_validation",
    "lorentz_inner_example",
    "mobius_identity",
    "sage_aggregate_oracle",
    "gate_simplex",
    "expert_contributions_mean",
    "smooth_l1_examples",
    "combined_loss_affine",
    "r2_oracle",
    "f1_oracle",
]


def test_registry_is_large_and_ordered():
    assert len(CHECKS) >= 25
    assert list(CHECKS)[:2] == ["spec_validation", "lorentz_inner_example"]


def test_fast_subset_passes():
    results = run_checks(FAST_CHECKS)
    assert [r.name for r in results] == FAST_CHECKS
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert not failed


@pytest.mark.slow
def test_full_suite_passes():
    payload = results_payload(run_checks(seed=0))
    assert payload["check_count"] >= 25
    assert payload["failed"] == []


def test_payload_structure():
    payload = results_payload(run_checks(["lorentz_inner_example", "smooth_l1_examples"]))
    assert payload["check_count"] == 2
    assert payload["passed"] == 2
    assert payload["failed"] == []
    assert set(payload["results"][0]) == {"name", "passed", "detail"}


def test_unknown_check_name():
    with pytest.raises(KeyError):
        run_checks(["no_such_check"])


def test_broken_lorentz_inner_is_reported(monkeypatch):
    monkeypatch.setattr(mf, "lorentz_inner", lambda a, b: torch.tensor(0.0))
    (result,) = run_checks(["lorentz_inner_example"])
    assert not result.passed


def test_broken_smooth_l1_is_reported(monkeypatch):
    monkeypatch.setattr(tr, "smooth_l1", lambda pred, target, beta=1.0: torch.tensor(1.0))
    payload = results_payload(run_checks(["smooth_l1_examples", "r2_oracle"]))
    assert payload["failed"] == ["smooth_l1_examples"]


def test_exceptions_become_failures(monkeypatch):
    def explode(a, b):
        raise RuntimeError("kernel unavailable")

    monkeypatch.setattr(mf, "lorentz_inner", explode)
    (result,) = run_checks(["lorentz_inner_example"])
    assert not result.passed
    assert "RuntimeError" in result.detail
