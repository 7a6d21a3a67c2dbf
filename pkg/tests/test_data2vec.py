import numpy as np
import pytest

from sskws.data2vec import (
    CollapseMonitor,
    MaskSpec,
    PretrainTargets,
    TauSchedule,
    TeacherState,
    apply_mask,
    build_targets,
    ema_update,
    init_teacher,
    is_encoder_param,
    pretrain_loss,
    pretrain_loss_and_grad,
    sample_mask,
    target_stats,
    tau_at,
)
from sskws.seeding import substream


class TestSampleMask:
    def test_p_zero_forces_single_span(self):
        spec = sample_mask(98, 0.0, 10, substream(0, "mask"))
        assert len(spec.start_indices) == 1
        assert spec.masked.sum() == 10
        s = spec.start_indices[0]
        assert spec.masked[s : s + 10].all()

    def test_p_one_masks_everything(self):
        spec = sample_mask(98, 1.0, 10, substream(0, "mask"))
        assert spec.masked.all()

    def test_spans_truncated_at_end(self):
        for seed in range(50):
            spec = sample_mask(20, 0.2, 8, substream(seed, "mask"))
            assert spec.masked.shape == (20,)
            # masked exactly where some sampled span covers
            expected = np.zeros(20, dtype=bool)
            for s in spec.start_indices:
                expected[s : s + 8] = True
            assert np.array_equal(spec.masked, expected)

    def test_never_empty(self):
        for seed in range(200):
            spec = sample_mask(30, 0.01, 3, substream(seed, "mask"))
            assert spec.masked.any()

    def test_masked_fraction_matches_monte_carlo_oracle(self):
        # oracle written independently of sample_mask: vectorized Bernoulli
        # starts + cumulative-sum window coverage, same rule
        seq_len, p, span, n = 98, 0.65, 10, 100_000
        rng = np.random.default_rng(2024)
        starts = rng.random((n, seq_len)) < p
        csum = np.zeros((n, seq_len + 1), dtype=np.int64)
        np.cumsum(starts, axis=1, out=csum[:, 1:])
        covered = csum[:, 1:] - csum[:, np.maximum(np.arange(seq_len) - span + 1, 0)] > 0
        assert covered.any(axis=1).all()  # no empty draws at this p
        oracle = covered.mean(axis=1)

        impl_rng = substream(99, "mask")
        impl = np.array([sample_mask(seq_len, p, span, impl_rng).masked.mean() for _ in range(n)])

        tol = 3.0 * np.sqrt(oracle.var() / n + impl.var() / n)
        assert abs(impl.mean() - oracle.mean()) < tol

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            sample_mask(10, -0.1, 2, substream(0, "mask"))
        with pytest.raises(ValueError):
            sample_mask(10, 0.5, 0, substream(0, "mask"))
        with pytest.raises(ValueError):
            sample_mask(10, 0.5, 11, substream(0, "mask"))


class TestApplyMask:
    def test_empty_mask_is_identity(self):
        tokens = np.random.default_rng(0).normal(size=(9, 4)).astype(np.float32)
        out = apply_mask(tokens, np.zeros(9, dtype=bool), np.full(4, 7.0, dtype=np.float32))
        assert np.array_equal(out, tokens)

    def test_full_mask_replaces_every_row(self):
        tokens = np.random.default_rng(1).normal(size=(9, 4)).astype(np.float32)
        token = np.arange(4, dtype=np.float32)
        out = apply_mask(tokens, np.ones(9, dtype=bool), token)
        assert np.array_equal(out, np.tile(token, (9, 1)))

    def test_single_index_locality(self):
        tokens = np.random.default_rng(2).normal(size=(9, 4)).astype(np.float32)
        masked = np.zeros(9, dtype=bool)
        masked[5] = True
        out = apply_mask(tokens, MaskSpec(masked=masked), np.full(4, -1.0, dtype=np.float32))
        differs = (out != tokens).any(axis=1)
        assert differs.tolist() == [False] * 5 + [True] + [False] * 3

    def test_batched(self):
        tokens = np.random.default_rng(3).normal(size=(2, 5, 3)).astype(np.float32)
        masks = np.zeros((2, 5), dtype=bool)
        masks[0, 1] = masks[1, 4] = True
        out = apply_mask(tokens, masks, np.zeros(3, dtype=np.float32))
        assert np.all(out[0, 1] == 0) and np.all(out[1, 4] == 0)
        assert np.array_equal(out[0, 0], tokens[0, 0])


class TestTauSchedule:
    def test_endpoints_and_midpoint(self):
        sched = TauSchedule()
        assert tau_at(0, sched) == 0.999
        assert tau_at(1000, sched) == pytest.approx(0.9999, abs=1e-15)
        assert tau_at(5000, sched) == pytest.approx(0.9999, abs=1e-15)
        assert tau_at(500, sched) == pytest.approx(0.99945, abs=1e-12)

    def test_nondecreasing_and_clamped(self):
        sched = TauSchedule()
        values = [tau_at(s, sched) for s in range(0, 2000, 7)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert max(values) <= 0.9999

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            TauSchedule(tau0=0.9999, tau_end=0.999)
        with pytest.raises(ValueError):
            TauSchedule(tau0=0.0, tau_end=0.5)


def _toy_teacher_student():
    rng = np.random.default_rng(0)
    student = {
        "embed.weight": rng.normal(size=(4, 3)).astype(np.float32),
        "pos": rng.normal(size=(5, 3)).astype(np.float32),
        "mask_token": rng.normal(size=3).astype(np.float32),
        "reg_head.weight": rng.normal(size=(3, 3)).astype(np.float32),
    }
    return init_teacher(student), student


class TestEmaUpdate:
    def test_teacher_excludes_student_only_tensors(self):
        teacher, student = _toy_teacher_student()
        assert set(teacher.weights) == {"embed.weight", "pos"}
        assert not is_encoder_param("cls_head.fc1.weight")
        assert not is_encoder_param("mask_token")
        assert is_encoder_param("blocks.0.attn.qkv.weight")

    def test_tau_one_leaves_teacher_unchanged(self):
        teacher, student = _toy_teacher_student()
        before = {k: v.copy() for k, v in teacher.weights.items()}
        student["embed.weight"][:] += 1.0
        ema_update(teacher, student, 1.0)
        for k in before:
            assert np.array_equal(teacher.weights[k], before[k])
        assert teacher.update_count == 1

    def test_tau_zero_copies_student(self):
        teacher, student = _toy_teacher_student()
        student["pos"][:] = 42.0
        ema_update(teacher, student, 0.0)
        assert np.array_equal(teacher.weights["pos"], student["pos"])

    def test_scalar_arithmetic(self):
        teacher = TeacherState(weights={"w": np.array([2.0])})
        ema_update(teacher, {"w": np.array([4.0])}, 0.5)
        assert teacher.weights["w"][0] == 3.0

    def test_fixed_point_when_equal(self):
        teacher, student = _toy_teacher_student()
        for tau in (0.9, 0.99, 0.5):
            ema_update(teacher, student, tau)
            for k in teacher.weights:
                assert np.array_equal(teacher.weights[k], student[k])

    def test_shape_mismatch_aborts(self):
        teacher, student = _toy_teacher_student()
        student["pos"] = student["pos"][:2]
        with pytest.raises(ValueError, match="pos"):
            ema_update(teacher, student, 0.5)

    def test_update_is_exactly_the_ema_formula(self):
        # recomputing the update with the same op order must reproduce the
        # stored teacher bit for bit
        teacher, student = _toy_teacher_student()
        student["embed.weight"][:] += 0.25
        tau = 0.97
        before = {k: v.copy() for k, v in teacher.weights.items()}
        ema_update(teacher, student, tau)
        for k in teacher.weights:
            expect = before[k].copy()
            expect += (1.0 - tau) * (student[k] - before[k])
            assert np.array_equal(teacher.weights[k], expect)
            # and it agrees with the two-term form to rounding error
            np.testing.assert_allclose(teacher.weights[k], tau * before[k] + (1 - tau) * student[k], rtol=1e-6)


class TestBuildTargets:
    def _hiddens(self, n=4, t=6, d=8, seed=0):
        rng = np.random.default_rng(seed)
        return [rng.normal(size=(t, d)).astype(np.float32) * (i + 1) for i in range(n)]

    def test_k1_equals_normalized_last(self):
        hiddens = self._hiddens()
        out = build_targets(hiddens, 1)
        h = hiddens[-1]
        mu = h.mean(axis=-1, keepdims=True)
        norm = (h - mu) / np.sqrt(h.var(axis=-1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(out.targets, norm, rtol=1e-6)

    def test_identical_blocks_average_to_one(self):
        h = self._hiddens(1)[0]
        out = build_targets([h, h.copy(), h.copy()], 3)
        single = build_targets([h], 1)
        np.testing.assert_allclose(out.targets, single.targets, rtol=1e-6)

    def test_rows_standardized_then_mean_zero(self):
        hiddens = self._hiddens(6, t=10, d=32)
        for h in hiddens[-3:]:
            mu = h.mean(axis=-1, keepdims=True)
            norm = (h - mu) / np.sqrt(h.var(axis=-1, keepdims=True) + 1e-6)
            assert np.abs(norm.mean(axis=-1)).max() < 1e-5
            assert np.abs(norm.var(axis=-1) - 1.0).max() < 1e-3
        out = build_targets(hiddens, 3)
        assert np.abs(out.targets.mean(axis=-1)).max() < 1e-5

    def test_zero_variance_rows_floored_not_failed(self):
        h = np.ones((4, 8), dtype=np.float32)
        out = build_targets([h], 1)
        assert np.isfinite(out.targets).all()
        assert np.all(out.targets == 0.0)

    def test_per_layer_stats_collected(self):
        out = build_targets(self._hiddens(5), 4)
        assert len(out.per_layer_stats) == 4

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            build_targets(self._hiddens(3), 4)


class TestPretrainLoss:
    def test_zero_when_equal(self):
        t = np.random.default_rng(0).normal(size=(6, 4)).astype(np.float32)
        masked = np.array([True, False, True, True, False, True])
        assert pretrain_loss(t.copy(), t, masked) == 0.0

    def test_constant_residual(self):
        t = np.random.default_rng(1).normal(size=(6, 4)).astype(np.float64)
        masked = np.array([True, False, True, True, False, True])
        preds = t + 0.5
        assert pretrain_loss(preds, t, masked) == pytest.approx(0.25, rel=1e-12)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        preds = rng.normal(size=(4, 3))
        targets = rng.normal(size=(4, 3))
        masked = np.array([True, False, True, False])
        total, count = 0.0, 0
        for i in range(4):
            if masked[i]:
                for j in range(3):
                    total += (preds[i, j] - targets[i, j]) ** 2
                    count += 1
        assert pretrain_loss(preds, targets, masked) == pytest.approx(total / count, rel=1e-12)

    def test_insensitive_to_unmasked_perturbation(self):
        rng = np.random.default_rng(3)
        preds = rng.normal(size=(8, 5))
        targets = rng.normal(size=(8, 5))
        masked = np.zeros(8, dtype=bool)
        masked[[1, 4]] = True
        base = pretrain_loss(preds, targets, masked)
        perturbed = preds.copy()
        perturbed[~masked] += rng.normal(size=(6, 5)) * 100.0
        assert pretrain_loss(perturbed, targets, masked) == base

    def test_gradient_zero_at_unmasked_steps(self):
        rng = np.random.default_rng(4)
        preds = rng.normal(size=(8, 5))
        targets = rng.normal(size=(8, 5))
        masked = np.zeros(8, dtype=bool)
        masked[[0, 7]] = True
        _, grad = pretrain_loss_and_grad(preds, targets, masked)
        assert np.all(grad[~masked] == 0.0)
        assert np.any(grad[masked] != 0.0)

    def test_accepts_wrapped_targets_and_maskspec(self):
        t = np.zeros((4, 2))
        wrapped = PretrainTargets(targets=t, per_layer_stats=[])
        spec = MaskSpec(masked=np.array([True, True, False, False]))
        assert pretrain_loss(np.ones((4, 2)), wrapped, spec) == 1.0

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            pretrain_loss(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3, dtype=bool))


class TestTargetStats:
    def test_identical_targets_zero_variance(self):
        t = np.tile(np.arange(6.0), (10, 1))
        stats = target_stats(t)
        assert stats["mean_variance"] == 0.0
        assert stats["min_variance"] == 0.0

    def test_standard_normal_near_unit_variance(self):
        t = np.random.default_rng(5).standard_normal((5000, 16))
        stats = target_stats(t)
        assert abs(stats["mean_variance"] - 1.0) < 0.05

    def test_collapse_monitor_fires_after_patience(self):
        mon = CollapseMonitor(threshold=0.01, patience=3)
        assert not mon.update(0.5)
        assert not mon.update(0.005)
        assert not mon.update(0.004)
        assert mon.update(0.003)
        assert not mon.update(0.5)
