import math

import numpy as np
import pytest

from attralign import autodiff as ad, data, explainers as ex, nn, training as tr
from attralign.autodiff import Tensor


rng = np.random.default_rng(55)


def adamw_oracle(theta0, grads, lr, b1, b2, eps, wd):
    """Scalar AdamW recurrence, implemented independently."""
    m = v = 0.0
    theta = theta0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps) - lr * wd * theta
    return theta


class TestAdamW:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = Tensor([1.5, -2.0], requires_grad=True, name="p")
        opt = tr.AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step({p: ad.zeros(p.shape)})
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_closed_form(self):
        p = Tensor(1.0, requires_grad=True, name="p")
        opt = tr.AdamW([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        opt.step({p: Tensor(0.5)})
        expected = adamw_oracle(1.0, [0.5], 0.01, 0.9, 0.999, 1e-8, 0.0)
        assert p.data == pytest.approx(expected, abs=1e-15)

    def test_decoupled_decay_with_zero_gradient(self):
        p = Tensor(2.0, requires_grad=True, name="p")
        opt = tr.AdamW([p], lr=0.1, weight_decay=0.05)
        opt.step({p: Tensor(0.0)})
        assert p.data == pytest.approx(2.0 - 0.1 * 0.05 * 2.0)

    def test_matches_reference_recurrence_over_100_steps(self):
        theta0 = float(rng.uniform(-1, 1))
        grads = rng.uniform(-2, 2, 100)
        lr, wd = 0.013, 0.021
        p = Tensor(theta0, requires_grad=True, name="p")
        opt = tr.AdamW([p], lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
        for g in grads:
            opt.step({p: Tensor(float(g))})
        expected = adamw_oracle(theta0, grads, lr, 0.9, 0.999, 1e-8, wd)
        assert abs(float(p.data) - expected) < 1e-12

    def test_nonfinite_gradient_aborts_naming_parameter(self):
        p = Tensor(1.0, requires_grad=True, name="conv1.weight")
        opt = tr.AdamW([p], lr=0.1)
        before = p.data.copy()
        with pytest.raises(RuntimeError, match="conv1.weight"):
            opt.step({p: Tensor(float("nan"))})
        np.testing.assert_array_equal(p.data, before)

    def test_functional_wrapper(self):
        p = Tensor(1.0, requires_grad=True, name="p")
        state = tr.AdamW([p], lr=0.01, weight_decay=0.0)
        out = tr.adamw_step([p], {p: Tensor(1.0)}, state)
        assert out is state and state.step_count == 1


class TestAugmentation:
    def make_sample(self):
        img = np.zeros((1, 8, 8))
        img[0, 1:3, 5:7] = 0.9
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[1:3, 5:7] = 1
        return data.AnnotatedSample(image=img, labels=np.array([1]),
                                    masks={0: mask}, sample_id="t")

    def test_right_angle_rotation_keeps_mask_registered(self):
        s = self.make_sample()
        for angle in (90, 180, 270):
            r = tr.rotate_sample(s, angle)
            np.testing.assert_array_equal((r.image[0] > 0.5).astype(np.uint8),
                                          r.masks[0])

    def test_arbitrary_angle_keeps_mask_binary(self):
        r = tr.rotate_sample(self.make_sample(), 33.5)
        assert set(np.unique(r.masks[0])) <= {0, 1}
        assert r.image.min() >= 0 and r.image.max() <= 1

    def test_zero_rotation_is_identity(self):
        s = self.make_sample()
        assert tr.rotate_sample(s, 0) is s


def separable_dataset(n_train=60, n_val=20, size=16, seed=0):
    """Two labels, each marked by a bright block on its own side."""
    r = np.random.default_rng(seed)
    samples, ids = {}, []
    for i in range(n_train + n_val):
        labels = r.integers(0, 2, 2)
        if labels.sum() == 0:
            labels[r.integers(0, 2)] = 1
        img = r.uniform(0, 0.05, (1, size, size))
        masks = {}
        if labels[0]:
            img[0, 4:12, 1:6] = 0.9
            m = np.zeros((size, size), dtype=np.uint8)
            m[4:12, 1:6] = 1
            masks[0] = m
        if labels[1]:
            img[0, 4:12, 10:15] = 0.9
            m = np.zeros((size, size), dtype=np.uint8)
            m[4:12, 10:15] = 1
            masks[1] = m
        sid = f"{i:04d}"
        samples[sid] = data.AnnotatedSample(image=img, labels=labels, masks=masks,
                                            sample_id=sid)
        ids.append(sid)
    splits = {"train": ids[:n_train], "val": ids[n_train:],
              "finetune": ids[:n_train], "eval": ids[n_train:]}
    return data.Dataset(samples=samples, splits=splits,
                        class_names=["left", "right"])


class TestTrainBase:
    def test_separable_task_reaches_perfect_auroc(self):
        ds = separable_dataset()
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=1)
        cfg = tr.TrainConfig(epochs=10, batch_size=16, lr=1e-3, seed=0,
                             weight_decay=0.0)
        model, log = tr.train_base(model, ds, cfg)
        train_auroc = tr.model_macro_auroc(model, ds.split("train"))
        assert train_auroc == pytest.approx(1.0, abs=1e-9)
        assert log[-1]["val_auroc"] > 0.95
        assert [r["epoch"] for r in log] == list(range(10))

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            tr.TrainConfig(epochs=0)

    def test_same_seed_identical_checkpoints(self, tmp_path):
        ds = separable_dataset()
        outs = []
        for _ in range(2):
            m = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=1)
            cfg = tr.TrainConfig(epochs=3, batch_size=16, lr=1e-3, seed=7)
            m, log = tr.train_base(m, ds, cfg)
            path = str(tmp_path / f"ck{len(outs)}.ckpt")
            nn.save_checkpoint(m, path)
            outs.append((open(path, "rb").read(), [r["loss"] for r in log]))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]

    def test_divergence_reports_epoch(self):
        ds = separable_dataset(n_train=8, n_val=4)
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=1)
        model.parameters()[0].data[:] = np.nan
        with pytest.raises(RuntimeError, match="epoch 0"):
            tr.train_base(model, ds, tr.TrainConfig(epochs=1, batch_size=8))


class TestFinetune:
    def test_lrp_on_attention_model_rejected_upfront(self):
        ds = separable_dataset(n_train=8, n_val=4)
        model = nn.build_tiny_vit((1, 16, 16), 2, patch=8, depth=1, heads=1, dim=8)
        cfg = tr.TrainConfig(epochs=1, scenario="align", target_labels=(0,))
        with pytest.raises(ValueError, match="LRP"):
            tr.finetune_alignment(model, ex.ExplainerConfig(method="lrp"), ds, cfg)

    def test_scenario_and_labels_validated(self):
        ds = separable_dataset(n_train=8, n_val=4)
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25)
        with pytest.raises(ValueError, match="scenario"):
            tr.finetune_alignment(model, ex.ExplainerConfig(method="vg"), ds,
                                  tr.TrainConfig(epochs=1, scenario="base",
                                                 target_labels=(0,)))
        with pytest.raises(ValueError, match="target_labels"):
            tr.finetune_alignment(model, ex.ExplainerConfig(method="vg"), ds,
                                  tr.TrainConfig(epochs=1, scenario="align"))

    def test_align_finetune_reduces_alignment_loss(self):
        ds = separable_dataset(n_train=48, n_val=16, seed=3)
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=2)
        model, _ = tr.train_base(model, ds, tr.TrainConfig(
            epochs=4, batch_size=16, lr=1e-3, seed=1, weight_decay=0.0))
        cfg = tr.TrainConfig(epochs=6, batch_size=16, lr=3e-4, seed=2,
                             scenario="align", target_labels=(0,),
                             weight_decay=0.0, val_subset=8)
        model, log = tr.finetune_alignment(model, ex.ExplainerConfig(method="vg"),
                                           ds, cfg)
        assert log[-1]["alignment_loss"] < log[0]["alignment_loss"]
        assert {"classification_loss", "alignment_loss", "val_mass",
                "val_rank"} <= set(log[-1])

    def test_alpha_zero_is_classification_only_finetune(self):
        ds = separable_dataset(n_train=16, n_val=8)
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=2)
        cfg = tr.TrainConfig(epochs=1, batch_size=16, lr=1e-4, seed=0, alpha=0.0,
                             scenario="align", target_labels=(0,))
        model2, log = tr.finetune_alignment(
            model, ex.ExplainerConfig(method="vg"), ds, cfg)
        assert len(log) == 1  # runs the classification-only path without error

    def test_sg_seed_advances_per_step(self):
        # two steps with identical batches must not reuse the same noise
        ds = separable_dataset(n_train=4, n_val=4, seed=5)
        model = nn.build_small_cnn((1, 16, 16), 2, width_multiplier=0.25, seed=2)
        calls = []
        import attralign.metrics as mt
        orig = mt.loss_align

        def spy(model, config, samples, label, seed_offset=0, scale_stats=None):
            calls.append(seed_offset)
            return orig(model, config, samples, label, seed_offset, scale_stats)

        mt.loss_align = spy
        try:
            cfg = tr.TrainConfig(epochs=2, batch_size=4, lr=1e-5, seed=0,
                                 scenario="align", target_labels=(0,), val_subset=0)
            tr.finetune_alignment(model, ex.ExplainerConfig(method="sg",
                                                            sg_samples=1), ds, cfg)
        finally:
            mt.loss_align = orig
        assert calls == sorted(set(calls)) and len(calls) >= 2


class TestWriteLog:
    def test_jsonl_roundtrip(self, tmp_path):
        import json
        path = str(tmp_path / "log.jsonl")
        tr.write_jsonl([{"epoch": 0, "loss": 1.0}, {"epoch": 1, "loss": 0.5}], path)
        lines = [json.loads(line) for line in open(path)]
        assert lines[1]["loss"] == 0.5
