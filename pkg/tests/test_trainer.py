"""
File: test_trainer.py
Purpose: Tests for the optimizer, batch sampling, pretraining and frozen-backbone adapter training
Version: 1.0.0
Last Updated: 2026-10-16
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from src.ag_adapter import AdapterConfig
from src.checkpoint import encode_checkpoint, load_checkpoint
from src.exceptions import ConfigurationError, DivergenceError, FrozenParameterError
from src.run_logger import read_log
from src.synth_moinst import CLASS_NAMES
from src.tensor_core import Tensor
from src.trainer import (ADAPTER_CHECKPOINT, LAST_GOOD_CHECKPOINT, PRETRAIN_CHECKPOINT, AdamHyper, AdamState,
                         PairedBatchSampler, PerformanceTracker, TrainConfig, _check_frozen_grads, adam_step,
                         clip_grad_norm, pretrain, train_adapter)
import src.trainer as trainer_module

from tests.conftest import TINY_MODEL

ADAPTER = AdapterConfig(d_mlp=8, n_heads=2)


def _adapter_config(**overrides):
    values = dict(stage="adapter", steps=4, batch_size=8, log_every=0)
    values.update(overrides)
    return TrainConfig(**values)


class TestAdam:
    """Test suite for the Adam update."""

    def test_matches_reference(self):
        hyper = AdamHyper(lr=0.1, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.01)
        w = Tensor(np.array([[1.0, 2.0], [-3.0, 0.5]]))
        b = Tensor(np.array([0.25, -0.75]))
        grads_seq = [{"w": np.array([[0.5, -1.0], [0.1, 0.0]]), "b": np.array([1.0, -2.0])},
                     {"w": np.array([[-0.2, 0.3], [0.4, 1.0]]), "b": np.array([0.5, 0.5])}]
        ref = {"w": w.data.copy(), "b": b.data.copy()}
        m = {k: np.zeros_like(v) for k, v in ref.items()}
        v = {k: np.zeros_like(v) for k, v in ref.items()}
        state = AdamState()
        for t, grads in enumerate(grads_seq, start=1):
            adam_step([("w", w), ("b", b)], grads, state, hyper)
            for k, g in grads.items():
                m[k] = 0.9 * m[k] + 0.1 * g
                v[k] = 0.98 * v[k] + 0.02 * g * g
                m_hat = m[k] / (1 - 0.9 ** t)
                v_hat = v[k] / (1 - 0.98 ** t)
                if k == "w":
                    ref[k] = ref[k] - 0.1 * 0.01 * ref[k]
                ref[k] = ref[k] - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert state.step == 2
        assert np.allclose(w.data, ref["w"], atol=1e-14)
        assert np.allclose(b.data, ref["b"], atol=1e-14)

    def test_zero_gradient_vector_is_untouched(self):
        bias = Tensor(np.array([1.0, 2.0]))
        adam_step([("bias", bias)], {"bias": np.zeros(2)}, AdamState(), AdamHyper(weight_decay=0.5))
        assert np.array_equal(bias.data, [1.0, 2.0])

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0, 4.0]])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        assert total == pytest.approx(1.0)
        small = {"a": np.array([0.1])}
        clip_grad_norm(small, 1.0)
        assert small["a"][0] == 0.1

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_clip_leaves_non_finite_gradients(self, bad):
        grads = {"a": np.array([3.0, bad]), "b": np.array([4.0])}
        assert not math.isfinite(clip_grad_norm(grads, 1.0))
        assert grads["b"][0] == 4.0
        assert grads["a"][0] == 3.0


class TestTrainConfig:
    """Test suite for stage settings."""

    def test_stage_defaults(self):
        assert TrainConfig(stage="pretrain").steps == 3000
        assert TrainConfig(stage="pretrain").tau == 0.07
        assert TrainConfig(stage="adapter").steps == 2000
        assert TrainConfig(stage="adapter").tau == 1.0

    @pytest.mark.parametrize("overrides", [
        {"stage": "finetune"},
        {"batch_size": 1},
        {"fusion": "middle"},
        {"loss_weights": (0, 0, 0)},
        {"holdout_classes": ("purple circle",)},
        {"lr": 0.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides)

    def test_to_dict_is_json_ready(self):
        values = TrainConfig(holdout_classes=CLASS_NAMES[-2:]).to_dict()
        assert values["holdout_classes"] == list(CLASS_NAMES[-2:])
        assert values["loss_weights"] == [1.0, 1.0, 1.0]


class TestSampling:
    """Test suite for paired batch sampling."""

    def test_paired_batches(self, small_dataset, rng):
        records = small_dataset.triplets("train")
        sampler = PairedBatchSampler(records, 8, rng)
        for _ in range(20):
            batch = sampler.sample()
            assert len(set(batch.tolist())) == 8
            objects = [records[i].object for i in batch]
            paired = sum(1 for o in objects if objects.count(o) >= 2)
            assert paired >= 2

    def test_batch_larger_than_records(self, small_dataset, rng):
        with pytest.raises(ConfigurationError):
            PairedBatchSampler(small_dataset.triplets("train")[:4], 8, rng)

    def test_performance_report(self):
        tracker = PerformanceTracker(report_interval=0, batch_size=4)
        for _ in range(3):
            started = tracker.start_step()
            with tracker.time_operation("forward"):
                pass
            tracker.end_step(started)
        report = tracker.get_final_report()
        assert report["steps"] == 3
        assert set(report["timings"]) == {"forward", "step"}


class TestPretrain:
    """Test suite for contrastive pretraining."""

    def test_run_writes_checkpoint_and_log(self, small_dataset, tmp_out):
        config = TrainConfig(stage="pretrain", steps=2, batch_size=8, log_every=0, val_records=8)
        result = pretrain(config, small_dataset, TINY_MODEL, out_dir=tmp_out, session_id="s1")
        assert result.checkpoint_path == tmp_out / PRETRAIN_CHECKPOINT
        ckpt = load_checkpoint(result.checkpoint_path)
        assert all(ckpt.frozen.values())
        assert ckpt.step == 2
        records = read_log(tmp_out / "pretrain_log.jsonl")
        assert [r["step"] for r in records] == [0, 1]
        assert {"session_id", "component", "step", "itc", "total"} <= set(records[0])
        assert records[0]["session_id"] == "s1"
        assert result.val_loss_start is not None and result.val_loss_end is not None

    def test_deterministic(self, small_dataset):
        config = TrainConfig(stage="pretrain", steps=2, batch_size=8, log_every=0, val_records=0)
        first = pretrain(config, small_dataset, TINY_MODEL)
        second = pretrain(config, small_dataset, TINY_MODEL)
        assert encode_checkpoint(first.checkpoint) == encode_checkpoint(second.checkpoint)

    def test_wrong_stage(self, small_dataset):
        with pytest.raises(ConfigurationError):
            pretrain(TrainConfig(stage="adapter"), small_dataset, TINY_MODEL)


class TestAdapterTraining:
    """Test suite for adapter training on a frozen backbone."""

    def test_freezing_contract(self, tiny_backbone, small_dataset):
        start = train_adapter(_adapter_config(steps=0), tiny_backbone, small_dataset, ADAPTER)
        result = train_adapter(_adapter_config(steps=6), tiny_backbone, small_dataset, ADAPTER)
        after = result.checkpoint
        for name, array in tiny_backbone.backbone().items():
            assert np.array_equal(after.tensors[name], array), name
        grads = dict(result.model.adapter_tensors())
        for name, initial in start.checkpoint.trainable().items():
            if name.endswith(("norm_w", "norm_b")):
                # Single-key attention: the query-side LayerNorm never receives gradient
                assert np.array_equal(after.tensors[name], initial), name
                assert np.all(grads[name].grad == 0.0), name
            else:
                assert not np.array_equal(after.tensors[name], initial), name

    def test_log_breakdown(self, tiny_backbone, small_dataset, tmp_out):
        result = train_adapter(_adapter_config(steps=2, tags=("unit",)), tiny_backbone, small_dataset, ADAPTER,
                               out_dir=tmp_out)
        assert result.checkpoint_path == tmp_out / ADAPTER_CHECKPOINT
        records = read_log(tmp_out / "adapter_log.jsonl")
        assert len(records) == 2
        assert {"session_id", "component", "step", "oitc", "oiic", "oid", "total", "tags"} <= set(records[0])
        assert records[0]["tags"] == ["unit"]
        assert records[1]["total"] == pytest.approx(records[1]["oitc"] + records[1]["oiic"] + records[1]["oid"])

    def test_no_instruction_tag(self, tiny_backbone, small_dataset, tmp_out):
        train_adapter(_adapter_config(steps=1, use_instruction=False), tiny_backbone, small_dataset, ADAPTER,
                      out_dir=tmp_out)
        assert "no-instruction" in read_log(tmp_out / "adapter_log.jsonl")[0]["tags"]

    def test_fusion_mode_applied(self, tiny_backbone, small_dataset):
        result = train_adapter(_adapter_config(steps=1, fusion="late"), tiny_backbone, small_dataset, ADAPTER)
        assert result.model.adapter.mask == (False, True)
        assert result.checkpoint.config["adapter"]["mode"] == "late"

    def test_holdout_runs(self, tiny_backbone, small_dataset):
        config = _adapter_config(steps=1, holdout_classes=CLASS_NAMES[-4:])
        result = train_adapter(config, tiny_backbone, small_dataset, ADAPTER)
        assert result.checkpoint.config["train"]["holdout_classes"] == list(CLASS_NAMES[-4:])

    def test_deterministic(self, tiny_backbone, small_dataset):
        first = train_adapter(_adapter_config(steps=2), tiny_backbone, small_dataset, ADAPTER)
        second = train_adapter(_adapter_config(steps=2), tiny_backbone, small_dataset, ADAPTER)
        assert encode_checkpoint(first.checkpoint) == encode_checkpoint(second.checkpoint)

    def test_divergence_keeps_last_good(self, tiny_backbone, small_dataset, monkeypatch):
        real = trainer_module.total_giv_loss

        def diverging(*args, **kwargs):
            total, parts = real(*args, **kwargs)
            return total, dict(parts, total=float("nan"))
        monkeypatch.setattr(trainer_module, "total_giv_loss", diverging)
        with pytest.raises(DivergenceError) as exc:
            train_adapter(_adapter_config(steps=3), tiny_backbone, small_dataset, ADAPTER)
        assert exc.value.step == 0
        assert exc.value.last_good is not None
        assert set(exc.value.last_good.backbone()) == set(tiny_backbone.backbone())

    def test_frozen_gradient_rejected(self):
        frozen = Tensor(np.zeros(3))
        frozen.grad = np.array([0.0, 1e-9, 0.0])
        with pytest.raises(FrozenParameterError):
            _check_frozen_grads([("backbone.x", frozen)])


class TestDivergence:
    """Test suite for aborting on non-finite values with the last good parameters."""

    @staticmethod
    def _poison_gradient_at(call_index, monkeypatch):
        real = trainer_module.clip_grad_norm
        calls = []

        def poisoning(grads, max_norm):
            calls.append(len(calls))
            if len(calls) == call_index + 1:
                name = sorted(grads)[0]
                grads[name] = np.full_like(grads[name], np.nan)
            return real(grads, max_norm)
        monkeypatch.setattr(trainer_module, "clip_grad_norm", poisoning)

    def test_nan_gradient_stops_before_update(self, tiny_backbone, small_dataset, monkeypatch, tmp_out):
        reference = train_adapter(_adapter_config(steps=1), tiny_backbone, small_dataset, ADAPTER)
        self._poison_gradient_at(1, monkeypatch)
        with pytest.raises(DivergenceError) as exc:
            train_adapter(_adapter_config(steps=4), tiny_backbone, small_dataset, ADAPTER, out_dir=tmp_out)
        assert exc.value.step == 1
        assert exc.value.reason == "non-finite gradient"
        last_good = exc.value.last_good
        assert last_good.step == 1
        assert last_good.rng_state == reference.checkpoint.rng_state
        for name, array in last_good.tensors.items():
            assert np.all(np.isfinite(array)), name
            assert np.array_equal(array, reference.checkpoint.tensors[name]), name
        saved = load_checkpoint(tmp_out / LAST_GOOD_CHECKPOINT)
        assert saved.step == 1
        assert encode_checkpoint(saved) == encode_checkpoint(last_good)

    def test_poisoned_update_rolls_back_one_step(self, tiny_backbone, small_dataset, monkeypatch):
        start = train_adapter(_adapter_config(steps=0), tiny_backbone, small_dataset, ADAPTER)
        real = trainer_module.adam_step

        def poisoning(params, grads, state, hyper):
            result = real(params, grads, state, hyper)
            for name, tensor in params:
                if name.endswith("w_o"):
                    tensor.data = np.full_like(tensor.data, np.nan)
            return result
        monkeypatch.setattr(trainer_module, "adam_step", poisoning)
        with pytest.raises(DivergenceError) as exc:
            train_adapter(_adapter_config(steps=4), tiny_backbone, small_dataset, ADAPTER)
        assert exc.value.step == 1
        assert exc.value.reason == "non-finite loss"
        last_good = exc.value.last_good
        assert last_good.step == 0
        for name, array in start.checkpoint.tensors.items():
            assert np.array_equal(last_good.tensors[name], array), name

    def test_pretrain_nan_gradient(self, small_dataset, monkeypatch, tmp_out):
        config = TrainConfig(stage="pretrain", steps=3, batch_size=8, log_every=0, val_records=0)
        reference = pretrain(replace(config, steps=1), small_dataset, TINY_MODEL)
        self._poison_gradient_at(1, monkeypatch)
        with pytest.raises(DivergenceError) as exc:
            pretrain(config, small_dataset, TINY_MODEL, out_dir=tmp_out)
        assert exc.value.step == 1
        assert encode_checkpoint(exc.value.last_good) == encode_checkpoint(reference.checkpoint)
        assert [r["step"] for r in read_log(tmp_out / "pretrain_log.jsonl")] == [0, 1]
        assert (tmp_out / LAST_GOOD_CHECKPOINT).exists()


@pytest.mark.slow
class TestFreezingLong:
    """Freezing contract over a 100-step adapter run."""

    def test_hundred_steps(self, tiny_backbone, small_dataset):
        start = train_adapter(_adapter_config(steps=0), tiny_backbone, small_dataset, ADAPTER)
        result = train_adapter(_adapter_config(steps=100), tiny_backbone, small_dataset, ADAPTER)
        for name, array in tiny_backbone.backbone().items():
            assert np.array_equal(result.checkpoint.tensors[name], array)
        for name, initial in start.checkpoint.trainable().items():
            changed = not np.array_equal(result.checkpoint.tensors[name], initial)
            assert changed != name.endswith(("norm_w", "norm_b")), name
