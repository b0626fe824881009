import numpy as np
import pytest

from abpkit.losses import LossConfig
from abpkit.models import (
    BackboneConfig,
    FeatureExtractorConfig,
    build_bundle,
    params_checksum,
)
from abpkit.signals import window_record
from abpkit.synthetic import SubjectProfile, generate_cohort, generate_subject
from abpkit.training import (
    AdamState,
    TrainConfig,
    desk_profile,
    finetune_subject,
    optimizer_step,
    pretrain_cohort,
    sequential_split,
)

EXT = FeatureExtractorConfig(in_channels=2)
BB = BackboneConfig(kind="unet")


def tiny_subject(seed=0, duration=60.0, subject_id="S1"):
    subj = generate_subject(SubjectProfile(), duration=duration, seed=seed, subject_id=subject_id)
    return window_record(subj.to_record(stride=4), window_len=512)


def tiny_cfg(**kw):
    defaults = dict(epochs=1, batch_size=8, lr=1e-3, seed=0)
    defaults.update(kw)
    return desk_profile(**defaults)


class TestAdam:
    def test_zero_gradients_zero_decay_leave_params(self):
        params = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        state = AdamState()
        out = state.step(params, grads, lr=0.1, weight_decay=0.0)
        for k in params:
            np.testing.assert_array_equal(out[k], params[k])

    def test_quadratic_convergence(self):
        # f(w) = w^2, w0 = 1, 500 steps at lr 0.1 -> |w| < 1e-3
        params = {"w": np.array([1.0])}
        state = AdamState()
        for _ in range(500):
            grads = {"w": 2.0 * params["w"]}
            params = state.step(params, grads, lr=0.1, weight_decay=0.0)
        assert abs(float(params["w"])) < 1e-3

    def test_non_finite_gradient_skips_step(self, caplog):
        params = {"w": np.array([1.0])}
        state = AdamState()
        with caplog.at_level("WARNING"):
            out = state.step(params, {"w": np.array([np.nan])}, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(out["w"], params["w"])
        assert any("non-finite" in r.message for r in caplog.records)

    def test_weight_decay_is_decoupled_and_multiplicative(self):
        params = {"w": np.array([2.0])}
        state = AdamState()
        out = state.step(params, {"w": np.array([0.0])}, lr=0.1, weight_decay=0.01)
        # zero gradient: only the decay factor moves the weight
        np.testing.assert_allclose(out["w"], 2.0 * (1.0 - 0.1 * 0.01), rtol=1e-15)

    def test_optimizer_step_wrapper(self):
        cfg = TrainConfig(lr=0.0, weight_decay=0.0)
        params = {"w": np.array([3.0])}
        out = optimizer_step(params, {"w": np.array([1.0])}, cfg, AdamState())
        np.testing.assert_array_equal(out["w"], params["w"])  # lr 0 moves nothing


class TestSequentialSplit:
    def test_boundary_is_floor(self):
        train, test = sequential_split(100, 0.8)
        np.testing.assert_array_equal(train, np.arange(80))
        np.testing.assert_array_equal(test, np.arange(80, 100))

    def test_no_shuffling_and_ordering(self):
        train, test = sequential_split(57, 0.33)
        assert train.max() < test.min()
        assert len(train) + len(test) == 57

    def test_complementary_fractions(self):
        t1, _ = sequential_split(100, 0.1)
        t9, _ = sequential_split(100, 0.9)
        assert len(t1) == 10 and len(t9) == 90

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            sequential_split(10, 0.01)
        with pytest.raises(ValueError):
            sequential_split(10, 1.0)


class TestPretrainCohort:
    def _cohort(self, n=3, duration=50.0):
        cohort = generate_cohort(n, variability=0.5, duration=duration, seed=5)
        return [window_record(s.to_record(stride=4), window_len=512) for s in cohort]

    def test_holdout_must_exist(self):
        cohort = self._cohort(2)
        bundle = build_bundle(EXT, BB, seed=0)
        with pytest.raises(ValueError, match="holdout"):
            pretrain_cohort(cohort, "nope", bundle, tiny_cfg())

    def test_epochs_zero_returns_input_params(self):
        cohort = self._cohort(2)
        bundle = build_bundle(EXT, BB, seed=0)
        out, logs = pretrain_cohort(cohort, cohort[-1].subject_id, bundle, tiny_cfg(epochs=0))
        assert params_checksum(out.params) == params_checksum(bundle.params)
        assert logs == []

    def test_single_training_subject_reduces_to_plain_loss(self):
        # cohort of 2: one train subject; the aggregate equals that loss each step
        cohort = self._cohort(2)
        bundle = build_bundle(EXT, BB, seed=0)
        rows: list = []
        pretrain_cohort(cohort, cohort[-1].subject_id, bundle,
                        tiny_cfg(epochs=1, reg_warmup_epochs=0), step_rows=rows)
        for row in rows:
            assert row[5] == pytest.approx(row[4], rel=1e-12)  # cohort == subject mean

    def test_training_makes_progress(self):
        cohort = self._cohort(3, duration=60.0)
        bundle = build_bundle(EXT, BB, seed=1)
        cfg = tiny_cfg(epochs=4, lr=3e-3, batch_size=16)
        best, logs = pretrain_cohort(cohort, cohort[-1].subject_id, bundle, cfg)
        assert logs[-1].val_loss is not None
        vals = [l.val_loss for l in logs]
        assert min(vals) < vals[0] * 1.05  # best checkpoint at or below the start

    def test_warmup_disables_cohort_penalty(self):
        # with omega forced to 0 during warm-up, the aggregate is the plain
        # sum of per-subject losses: n_train_subjects * their mean
        cohort = self._cohort(3, duration=40.0)
        bundle = build_bundle(EXT, BB, seed=2)
        rows: list = []
        pretrain_cohort(
            cohort, cohort[-1].subject_id, bundle,
            tiny_cfg(epochs=1, reg_warmup_epochs=1), step_rows=rows,
        )
        assert rows
        for row in rows:
            assert row[5] == pytest.approx(2 * row[4], rel=1e-12)

    def test_omega_zero_throughout_gives_plain_sum(self):
        cohort = self._cohort(3, duration=40.0)
        bundle = build_bundle(EXT, BB, seed=2)
        cfg = tiny_cfg(epochs=2, reg_warmup_epochs=0)
        cfg = TrainConfig(**{**cfg.__dict__, "loss": LossConfig(omega=0.0)})
        rows: list = []
        pretrain_cohort(cohort, cohort[-1].subject_id, bundle, cfg, step_rows=rows)
        for row in rows:
            assert row[5] == pytest.approx(2 * row[4], rel=1e-12)

    def test_determinism_bitwise(self):
        cohort = self._cohort(2, duration=40.0)
        bundle = build_bundle(EXT, BB, seed=3)
        cfg = tiny_cfg(epochs=2)
        a, _ = pretrain_cohort(cohort, cohort[-1].subject_id, bundle, cfg)
        b, _ = pretrain_cohort(cohort, cohort[-1].subject_id, bundle, cfg)
        assert params_checksum(a.params) == params_checksum(b.params)
        assert params_checksum(a.state) == params_checksum(b.state)


class TestFinetuneSubject:
    def test_split_boundary_contract(self):
        ws = tiny_subject(duration=80.0)
        train, test = sequential_split(ws.n_windows, 0.8)
        assert len(train) == int(np.floor(0.8 * ws.n_windows))
        assert train.max() < test.min()

    def test_split_is_temporal_for_non_overlapping_windows(self):
        # stride == cycles_per_window: every training window's end sample
        # precedes every test window's start sample
        ws = tiny_subject(duration=80.0)  # built with stride 4 = window cycles
        train, test = sequential_split(ws.n_windows, 0.7)
        train_end = ws.window_ranges[train, 1].max()
        test_start = ws.window_ranges[test, 0].min()
        assert train_end <= test_start

    def test_lr_zero_keeps_backbone_params(self):
        ws = tiny_subject(duration=50.0)
        bundle = build_bundle(EXT, BB, seed=4)
        cfg = tiny_cfg(lr=0.0, weight_decay=0.0, epochs=1)
        tuned, _ = finetune_subject(bundle, ws, 0.8, cfg)
        assert params_checksum(tuned.backbone_params()) == params_checksum(
            bundle.backbone_params()
        )

    def test_backbone_warm_started_not_reinitialized(self):
        ws = tiny_subject(duration=50.0)
        bundle = build_bundle(EXT, BB, seed=5)
        before = params_checksum(bundle.backbone_params())
        cfg = tiny_cfg(lr=0.0, weight_decay=0.0, epochs=0)
        tuned, _ = finetune_subject(bundle, ws, 0.8, cfg)
        assert params_checksum(tuned.backbone_params()) == before

    def test_extractor_reinitialized(self):
        ws = tiny_subject(duration=50.0)
        bundle = build_bundle(EXT, BB, seed=6)
        cfg = tiny_cfg(lr=0.0, weight_decay=0.0, epochs=0, seed=123)
        tuned, _ = finetune_subject(bundle, ws, 0.8, cfg)
        assert params_checksum(tuned.extractor_params()) != params_checksum(
            bundle.extractor_params()
        )

    def test_freeze_backbone_flag(self):
        ws = tiny_subject(duration=50.0)
        bundle = build_bundle(EXT, BB, seed=7)
        cfg = tiny_cfg(epochs=1, lr=1e-3, freeze_backbone=True)
        tuned, _ = finetune_subject(bundle, ws, 0.8, cfg)
        assert params_checksum(tuned.backbone_params()) == params_checksum(
            bundle.backbone_params()
        )
        assert params_checksum(tuned.extractor_params()) != params_checksum(
            bundle.extractor_params()
        )

    def test_determinism_bitwise(self):
        ws = tiny_subject(duration=50.0)
        bundle = build_bundle(EXT, BB, seed=8)
        cfg = tiny_cfg(epochs=1)
        a, _ = finetune_subject(bundle, ws, 0.8, cfg)
        b, _ = finetune_subject(bundle, ws, 0.8, cfg)
        assert params_checksum(a.params) == params_checksum(b.params)


class TestConfigs:
    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 512
        assert cfg.lr == 1e-5
        assert cfg.weight_decay == 1e-2
        assert cfg.epochs == 75
        assert cfg.reg_warmup_epochs == 10

    def test_desk_profile_overrides(self):
        cfg = desk_profile(seed=3)
        assert cfg.batch_size == 32 and cfg.epochs == 30
        assert cfg.seed == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
