"""
File: test_grad_check.py
Purpose: Finite-difference gradient suites over ops, losses and the adapter forward
Version: 1.0.0
Last Updated: 2026-10-16
"""
import numpy as np
import pytest

from src.exceptions import ConfigurationError
from src.grad_check import (GRAD_TOLERANCE, STRICT_IMAGE_IDS, STRICT_OBJECT_IDS, STRICT_SUITES, SUITES, run_suite,
                            run_suites, tiny_adapter_model)


class TestSuites:
    """Every differentiable path against central differences."""

    @pytest.mark.parametrize("name", ["tensor_core", "oitc", "oiic", "oid", "itc"])
    def test_loss_suites(self, name):
        assert run_suite(name, seeds=range(20)) < GRAD_TOLERANCE

    def test_adapter_suite(self):
        assert run_suite("adapter", seeds=range(3)) < GRAD_TOLERANCE

    @pytest.mark.slow
    def test_adapter_suite_twenty_seeds(self):
        assert run_suite("adapter", seeds=range(20)) < GRAD_TOLERANCE

    @pytest.mark.parametrize("name", STRICT_SUITES)
    def test_loss_suites_every_coordinate_literal_floor(self, name):
        assert run_suite(name, seeds=range(3), strict=True) < GRAD_TOLERANCE

    def test_strict_layout_is_not_degenerate(self):
        positives = ((STRICT_IMAGE_IDS[:, None] == STRICT_IMAGE_IDS[None, :])
                     & (STRICT_OBJECT_IDS[:, None] == STRICT_OBJECT_IDS[None, :]))
        assert positives.sum(axis=1).max() == 2
        assert not positives.all(axis=1).any()
        assert len(set(STRICT_OBJECT_IDS.tolist())) > 1

    def test_unknown_suite(self):
        with pytest.raises(ConfigurationError):
            run_suite("attention")
        with pytest.raises(ConfigurationError):
            run_suite("adapter", seeds=range(1), strict=True)
        assert list(run_suites(["all"], seeds=range(1), strict=True)) == list(STRICT_SUITES)

    def test_all_expands(self):
        results = run_suites(["oid", "itc"], seeds=range(2))
        assert list(results) == ["oid", "itc"]
        assert set(SUITES) == {"tensor_core", "oitc", "oiic", "oid", "itc", "adapter"}

    def test_perturbed_adapter_is_not_identity(self):
        model = tiny_adapter_model(np.random.default_rng(0))
        for name, tensor in model.adapter_tensors():
            if name.endswith("w_o"):
                assert np.any(tensor.data != 0.0)
