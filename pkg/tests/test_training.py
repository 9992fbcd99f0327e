import dataclasses

import numpy as np
import pytest

from rcmcl.data import GeneratorSpec, generate, split
from rcmcl.linalg import SplitRng
from rcmcl.losses import LossConfig
from rcmcl.model import ModelDims, init_params
from rcmcl.training import (
    AugmentParams,
    HISTORY_COLUMNS,
    OptimState,
    TrainConfig,
    adamw_step,
    augment,
    augment_points,
    augment_rgbd,
    augment_skeleton,
    full_finetune,
    history_csv,
    linear_probe,
    lr_at,
    pretrain,
    pretrain_batch,
)

SPEC = GeneratorSpec(num_classes=3, frames=4, joints=4, points_per_frame=8,
                     rgbd_dim=10, seed=6)


def small_cfg(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=6, seed=0,
                feature_dim=8, proj_dim=4, hidden_dim=8,
                probe_epochs=50, finetune_epochs=2)
    base.update(kw)
    return TrainConfig(**base)


DIMS = ModelDims.from_generator(SPEC, feature_dim=8, proj_dim=4, hidden_dim=8)


class TestAdamW:
    def test_zero_gradient_no_decay_is_identity(self):
        p = init_params(DIMS, seed=0)
        before = {n: a.copy() for n, a in p.named_arrays()}
        state = OptimState(p, weight_decay=0.0)
        adamw_step(p, p.zero_grads(), state, lr=0.1)
        for n, a in p.named_arrays():
            assert np.array_equal(a, before[n]), n

    def test_constant_gradient_steps_near_lr(self):
        # with a constant gradient the bias-corrected Adam direction has
        # unit magnitude, so each step moves by ~lr
        p = init_params(DIMS, seed=0)
        state = OptimState(p, ["cls_b"], weight_decay=0.0)
        grads = p.zero_grads()
        grads["cls_b"][...] = 3.7
        start = p.cls_b.copy()
        for _ in range(500):
            adamw_step(p, grads, state, lr=1e-3)
        moved = start - p.cls_b
        assert np.all(np.abs(moved - 500 * 1e-3) < 0.01 * 500 * 1e-3)

    def test_matches_hand_stepped_reference(self):
        # independent 10-step reference implementation on a scalar
        b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.05, 0.01
        theta, m, v = 1.5, 0.0, 0.0
        gs = [0.3, -0.2, 0.7, 0.1, -0.5, 0.4, 0.0, 0.9, -0.1, 0.2]
        for t, g in enumerate(gs, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            update = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            theta -= lr * (update + wd * theta)

        p = init_params(DIMS, seed=0)
        p.cls_b[...] = 0.0
        p.cls_b[0] = 1.5
        state = OptimState(p, ["cls_b"], weight_decay=wd)
        grads = p.zero_grads()
        for g in gs:
            grads["cls_b"][...] = 0.0
            grads["cls_b"][0] = g
            adamw_step(p, grads, state, lr)
        assert abs(p.cls_b[0] - theta) < 1e-12

    def test_unknown_parameter_rejected(self):
        p = init_params(DIMS, seed=0)
        with pytest.raises(KeyError):
            OptimState(p, ["nope"])


class TestSchedule:
    CFG = small_cfg(epochs=100, warmup_epochs=10, base_lr=2e-3)

    def test_starts_at_zero(self):
        assert lr_at(0.0, self.CFG) == 0.0

    def test_warmup_end_hits_base_lr(self):
        assert lr_at(0.1, self.CFG) == pytest.approx(2e-3, rel=1e-12)

    def test_warmup_linear(self):
        assert lr_at(0.05, self.CFG) == pytest.approx(1e-3, rel=1e-12)

    def test_decay_midpoint_is_half(self):
        mid = 0.1 + 0.45  # halfway through the cosine segment
        assert lr_at(mid, self.CFG) == pytest.approx(1e-3, abs=1e-9)

    def test_final_near_zero(self):
        assert lr_at(1.0, self.CFG) < 1e-3 * self.CFG.base_lr

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(1.5, self.CFG)


class TestAugment:
    IDENTITY = AugmentParams(rotate_max_deg=0.0, jitter_sigma=0.0,
                             rgbd_dropout=0.0, point_resample=False)

    def test_zero_strength_identity(self, rng):
        ds = generate(SPEC, 3)
        r, s, p = augment((ds.rgbd, ds.skeleton, ds.points), rng,
                          self.IDENTITY)
        assert np.array_equal(r, ds.rgbd)
        assert np.array_equal(s, ds.skeleton)
        assert np.array_equal(p, ds.points)

    def test_rotation_is_isometry(self, rng):
        ap = AugmentParams(rotate_max_deg=45.0, jitter_sigma=0.0)
        x = rng.standard_normal((4, 3, 5, 3))
        out = augment_skeleton(x, rng, ap)
        # a rigid rotation preserves norms and all pairwise dot products
        assert np.allclose(np.linalg.norm(out, axis=-1),
                           np.linalg.norm(x, axis=-1), atol=1e-9)
        for i in range(4):
            a = x[i].reshape(-1, 3)
            b = out[i].reshape(-1, 3)
            assert np.allclose(a @ a.T, b @ b.T, atol=1e-9)

    def test_resample_draws_existing_points(self, rng):
        ap = AugmentParams(rotate_max_deg=0.0, jitter_sigma=0.0,
                           point_resample=True)
        x = rng.standard_normal((2, 3, 6, 3))
        out = augment_points(x, rng, ap)
        for i in range(2):
            orig = {tuple(p) for t in range(3) for p in x[i, t]}
            for t in range(3):
                for p in out[i, t]:
                    assert tuple(p) in orig

    def test_rgbd_dropout_zeroes_whole_features(self, rng):
        ap = AugmentParams(jitter_sigma=0.0, rgbd_dropout=0.5)
        x = rng.standard_normal((8, 4, 20)) + 5.0  # bounded away from zero
        out = augment_rgbd(x, rng, ap)
        zeroed = out == 0.0
        # a dropped feature is dropped across all frames of a sample
        assert np.all(zeroed.any(axis=1) == zeroed.all(axis=1))
        frac = zeroed.mean()
        assert 0.3 < frac < 0.7

    def test_distinct_views(self):
        ds = generate(SPEC, 2)
        rng = SplitRng(0)
        v1 = augment((ds.rgbd, ds.skeleton, ds.points),
                     rng.child("view1").generator(), AugmentParams())
        v2 = augment((ds.rgbd, ds.skeleton, ds.points),
                     rng.child("view2").generator(), AugmentParams())
        assert not np.allclose(v1[1], v2[1])

    def test_input_untouched(self, rng):
        ds = generate(SPEC, 2)
        before = ds.skeleton.copy()
        augment((ds.rgbd, ds.skeleton, ds.points), rng, AugmentParams())
        assert np.array_equal(ds.skeleton, before)


class TestPretrainBatch:
    def test_all_zero_weights_gives_empty_components(self):
        cfg = small_cfg(loss=LossConfig(lambda_cm=0.0, lambda_im=0.0,
                                        lambda_deg=0.0, lambda_fuse=0.0))
        ds = generate(SPEC, 3)
        p = init_params(DIMS, seed=0)
        comps, grads = pretrain_batch(
            p, (ds.rgbd, ds.skeleton, ds.points), cfg, SplitRng(0).child("b"))
        assert comps == {}
        for name, g in grads.items():
            assert not g.any(), name

    def test_gradients_cover_all_pretrain_parameters(self):
        cfg = small_cfg(degrade_prob=0.5)
        ds = generate(SPEC, 4)
        p = init_params(DIMS, seed=0)
        comps, grads = pretrain_batch(
            p, (ds.rgbd, ds.skeleton, ds.points), cfg, SplitRng(0).child("b"))
        assert set(comps) == {"cm", "im", "deg", "fusion"}
        from rcmcl.training import PRETRAIN_PARAM_PREFIXES
        for name, g in grads.items():
            if name.startswith(PRETRAIN_PARAM_PREFIXES):
                assert g.any(), f"no gradient reached {name}"
            if name.startswith("cls_"):
                assert not g.any(), "labels/classifier must not be touched"

    def test_deterministic(self):
        cfg = small_cfg()
        ds = generate(SPEC, 3)
        p = init_params(DIMS, seed=0)
        batch = (ds.rgbd, ds.skeleton, ds.points)
        c1, g1 = pretrain_batch(p, batch, cfg, SplitRng(7).child("b"))
        c2, g2 = pretrain_batch(p, batch, cfg, SplitRng(7).child("b"))
        assert c1 == c2
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


class TestPretrain:
    def test_loss_decreases(self):
        ds = generate(SPEC, 8)
        cfg = small_cfg(epochs=8, warmup_epochs=2, batch_size=12)
        _, history = pretrain(ds, cfg)
        assert len(history) == 8
        first = history[0]["l_total"]
        last = history[-1]["l_total"]
        assert last < first

    def test_deterministic(self):
        ds = generate(SPEC, 4)
        cfg = small_cfg()
        p1, h1 = pretrain(ds, cfg)
        p2, h2 = pretrain(ds, cfg)
        assert h1 == h2
        for (n1, a1), (n2, a2) in zip(p1.named_arrays(), p2.named_arrays()):
            assert np.array_equal(a1, a2), n1

    def test_label_blind(self):
        # shuffling the labels must not change the pre-trained weights
        ds = generate(SPEC, 4)
        shuffled = dataclasses.replace(
            ds, labels=np.roll(ds.labels, 1), spec=ds.spec)
        cfg = small_cfg()
        p1, _ = pretrain(ds, cfg)
        p2, _ = pretrain(shuffled, cfg)
        for (n1, a1), (_, a2) in zip(p1.named_arrays(), p2.named_arrays()):
            assert np.array_equal(a1, a2), n1

    def test_classifier_untouched(self):
        ds = generate(SPEC, 4)
        cfg = small_cfg()
        init = init_params(DIMS, cfg.seed)
        trained, _ = pretrain(ds, cfg)
        assert np.array_equal(trained.cls_w, init.cls_w)
        assert np.array_equal(trained.cls_b, init.cls_b)

    def test_history_csv_layout(self):
        ds = generate(SPEC, 3)
        _, history = pretrain(ds, small_cfg(epochs=2, warmup_epochs=1))
        csv = history_csv(history)
        lines = csv.strip().split("\n")
        assert lines[0] == ",".join(HISTORY_COLUMNS)
        assert len(lines) == 3
        assert lines[1].split(",")[0] == "0"


class TestLinearProbe:
    def test_backbone_frozen(self):
        ds = generate(SPEC, 6)
        tr, te = split(ds, 0.5, seed=0)
        cfg = small_cfg()
        p = init_params(DIMS, seed=0)
        out, _, _ = linear_probe(p, tr, te, cfg)
        for (n1, a1), (_, a2) in zip(p.named_arrays(), out.named_arrays()):
            if n1.startswith("cls_"):
                continue
            assert np.array_equal(a1, a2), n1
        assert not np.array_equal(p.cls_w, out.cls_w)

    def test_deterministic(self):
        ds = generate(SPEC, 6)
        tr, te = split(ds, 0.5, seed=0)
        cfg = small_cfg()
        p = init_params(DIMS, seed=0)
        o1, a1, t1 = linear_probe(p, tr, te, cfg)
        o2, a2, t2 = linear_probe(p, tr, te, cfg)
        assert (a1, t1) == (a2, t2)
        assert np.array_equal(o1.cls_w, o2.cls_w)

    def test_separable_features_reach_high_accuracy(self):
        # with a large class-separation oracle dataset even random encoders
        # plus a probe should beat chance decisively on train data
        ds = generate(SPEC, 20)
        tr, te = split(ds, 0.8, seed=0)
        cfg = small_cfg(probe_epochs=300)
        p = init_params(DIMS, seed=0)
        _, train_acc, _ = linear_probe(p, tr, te, cfg)
        assert train_acc > 100.0 / SPEC.num_classes


class TestFullFinetune:
    def test_updates_only_finetune_parameters(self):
        ds = generate(SPEC, 6)
        tr, te = split(ds, 0.5, seed=0)
        cfg = small_cfg()
        p = init_params(DIMS, seed=0)
        out, _ = full_finetune(p, tr, te, cfg)
        for (n1, a1), (_, a2) in zip(p.named_arrays(), out.named_arrays()):
            if n1.startswith(("proj_", "dec_s")):
                assert np.array_equal(a1, a2), n1
        assert not np.array_equal(p.cls_w, out.cls_w)
        assert not np.array_equal(p.enc_r[0].w, out.enc_r[0].w)

    def test_average_mode_freezes_gates(self):
        ds = generate(SPEC, 6)
        tr, te = split(ds, 0.5, seed=0)
        cfg = small_cfg(fusion_mode="average")
        p = init_params(DIMS, seed=0)
        out, _ = full_finetune(p, tr, te, cfg)
        assert np.array_equal(p.gate_w, out.gate_w)
        assert np.array_equal(p.gate_b, out.gate_b)

    def test_deterministic(self):
        ds = generate(SPEC, 6)
        tr, te = split(ds, 0.5, seed=0)
        cfg = small_cfg()
        p = init_params(DIMS, seed=0)
        o1, acc1 = full_finetune(p, tr, te, cfg)
        o2, acc2 = full_finetune(p, tr, te, cfg)
        assert acc1 == acc2
        for (n1, a1), (_, a2) in zip(o1.named_arrays(), o2.named_arrays()):
            assert np.array_equal(a1, a2), n1


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            small_cfg(warmup_epochs=3, epochs=3)
        with pytest.raises(ValueError):
            small_cfg(batch_size=1)
        with pytest.raises(ValueError):
            small_cfg(fusion_mode="bogus")
        with pytest.raises(ValueError):
            small_cfg(degrade_prob=1.5)
