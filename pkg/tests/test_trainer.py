import copy
import csv

import numpy as np
import pytest

from conftest import tiny_config
from ffl import checkpoint as ckpt_io
from ffl import tensor as T
from ffl.data import iterate, load_dataset, synth_blobs
from ffl.errors import CheckpointError, NonFiniteLossError
from ffl.fusion import AverageFusion, FusionModule
from ffl.model import FFLModel, VanillaModel
from ffl.nn import count_parameters
from ffl.trainer import (
    SGD, build_model, csv_header, evaluate, export_branch, export_fused, lr_at, make_checkpoint,
    restore_model, top1_error, train, train_step,
)


def first_batch(cfg):
    return next(iterate(load_dataset(cfg.dataset_spec("train")), cfg.data.batch_size))


class TestSGD:
    def test_zero_lr_leaves_parameters(self):
        cfg = tiny_config()
        model = build_model(cfg)
        before = copy.deepcopy(model.state_dict())
        opt = SGD(model.named_parameters(), lr=0.0)
        train_step(model, first_batch(cfg), opt, cfg.distill_config())
        after = model.state_dict()
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(after[name], before[name])

    def test_momentum_and_decay_rule(self):
        cfg = tiny_config()
        model = build_model(cfg)
        (name, w), = [(n, p) for n, p in model.named_parameters() if p.decay][:1]
        opt = SGD([(name, w)], lr=0.1, momentum=0.9, weight_decay=0.01)
        w0 = w.data.copy()
        g = np.ones_like(w0)
        w.grad = g.copy()
        opt.step()
        buf1 = g + 0.01 * w0
        np.testing.assert_allclose(w.data, w0 - 0.1 * buf1, rtol=1e-6)
        w1 = w.data.copy()
        w.grad = g.copy()
        opt.step()
        np.testing.assert_allclose(w.data, w1 - 0.1 * (0.9 * buf1 + g + 0.01 * w1), rtol=1e-5)

    def test_no_decay_on_bn_and_bias(self):
        cfg = tiny_config()
        model = build_model(cfg)
        flags = {n: p.decay for n, p in model.named_parameters()}
        assert all(not d for n, d in flags.items() if ".bn" in n or n.endswith("bias"))
        assert all(d for n, d in flags.items() if n.endswith("conv.weight") or n.endswith("fc.weight"))

    def test_schedule_is_monotone_step_decay(self):
        lrs = [lr_at(e, 0.1, [20, 30], 0.1) for e in range(40)]
        assert lrs[0] == 0.1 and lrs[19] == 0.1
        assert lrs[20] == pytest.approx(0.01) and lrs[30] == pytest.approx(0.001)
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestTrainStep:
    def test_updates_trunk_branches_and_fusion_together(self):
        cfg = tiny_config()
        model = build_model(cfg)
        before = model.state_dict()
        train_step(model, first_batch(cfg), SGD(model.named_parameters(), 0.1), cfg.distill_config())
        after = model.state_dict()
        changed = {n for n, _ in model.named_parameters() if not np.array_equal(before[n], after[n])}
        for prefix in ("ensemble.stem.", "ensemble.shared.", "ensemble.branches.0.", "ensemble.branches.1.",
                       "head.depthwise.", "head.pointwise.", "head.fc."):
            assert any(n.startswith(prefix) for n in changed), prefix

    def test_ablation_d_trains_fusion_through_ce(self):
        cfg = tiny_config("ablation=D")
        model = build_model(cfg)
        before = model.head.pointwise.weight.data.copy()
        bd = train_step(model, first_batch(cfg), SGD(model.named_parameters(), 0.1), cfg.distill_config(),
                        use_ekd=False, use_fkd=False)
        assert bd.ekd == 0 and bd.fkd == 0
        assert bd.total == pytest.approx(bd.ce_sub_sum + bd.ce_fused, rel=1e-6)
        assert not np.array_equal(before, model.head.pointwise.weight.data)

    def test_ablation_b_uses_average(self):
        assert isinstance(build_model(tiny_config("ablation=B")).head, AverageFusion)
        assert isinstance(build_model(tiny_config("ablation=A")).head, FusionModule)

    def test_non_finite_loss_aborts_after_three(self, monkeypatch):
        cfg = tiny_config("data.samples=80")
        import ffl.trainer as trainer

        real = trainer.total_loss

        def poisoned(*args, **kwargs):
            bd = real(*args, **kwargs)
            bd.total = float("nan")
            return bd

        monkeypatch.setattr(trainer, "total_loss", poisoned)
        with pytest.raises(NonFiniteLossError, match="3 consecutive"):
            train(cfg)


class TestEvaluate:
    class Oracle:
        """Stand-in model emitting given logits batch by batch."""

        n = 2
        training = False

        def __init__(self, logits):
            self.logits, self.pos = logits, 0

        def eval(self):
            return self

        def train(self, mode=True):
            return self

        def __call__(self, x):
            from ffl.losses import LogitSet
            b = x.shape[0]
            z = self.logits[self.pos:self.pos + b]
            self.pos += b
            return LogitSet.build([T.Tensor(z), T.Tensor(z)], T.Tensor(z))

    def test_perfect_logits(self):
        ds = synth_blobs(4, 40, 8)
        record = evaluate(self.Oracle(np.eye(4)[ds.labels] * 10), ds, batch_size=16)
        assert record.branch_err == [0.0, 0.0] and record.fused_err == 0.0 and record.ensemble_err == 0.0

    def test_random_logits_near_chance(self):
        ds = synth_blobs(4, 4000, 4)
        logits = np.random.default_rng(0).standard_normal((4000, 4))
        err = evaluate(self.Oracle(logits), ds).fused_err
        assert abs(err - 75.0) < 3 * 100 * np.sqrt(0.75 * 0.25 / 4000)

    def test_top1_error(self):
        assert top1_error(np.array([[1, 0], [0, 1], [1, 0]]), np.array([0, 0, 0])) == pytest.approx(100 / 3)

    def test_eval_mode_restored(self):
        cfg = tiny_config()
        model = build_model(cfg).train()
        record = evaluate(model, load_dataset(cfg.dataset_spec("test")))
        assert model.training
        assert all(0 <= e <= 100 for e in record.branch_err + [record.fused_err, record.ensemble_err])


class TestTrain:
    def test_one_epoch_loss_decreases(self):
        cfg = tiny_config("train.epochs=1", "data.samples=256", "data.image_size=16")
        losses = []
        result = train(cfg, on_step=lambda step, bd: losses.append(bd.total))
        k = max(1, len(losses) // 4)
        assert np.mean(losses[-k:]) < np.mean(losses[:k])
        assert np.isfinite(list(result.final.losses.values())).all()

    def test_identity_holds_every_step(self):
        gaps = []
        train(tiny_config("train.epochs=1"), on_step=lambda s, bd: gaps.append(bd.identity_error()))
        assert gaps and max(gaps) < 1e-6

    def test_vanilla(self):
        cfg = tiny_config("model.mode=vanilla")
        result = train(cfg)
        assert isinstance(result.model, VanillaModel)
        assert result.final.fused_err is None and len(result.final.branch_err) == 1
        assert result.final.losses["ekd"] == 0 and result.final.losses["ce_fused"] == 0

    def test_csv_layout_and_determinism(self, tmp_path):
        cfg = tiny_config("train.checkpoint_every=1")
        train(cfg, out_dir=tmp_path / "a")
        train(cfg, out_dir=tmp_path / "b")
        rows = []
        for run in ("a", "b"):
            with open(tmp_path / run / "metrics.csv") as fh:
                rows.append(list(csv.reader(fh)))
        assert rows[0][0] == csv_header(2)
        assert rows[0][0][:4] == ["epoch", "branch0_err", "branch1_err", "ensemble_err"]
        assert len(rows[0]) == 3
        strip = lambda table: [r[:-1] for r in table]
        assert strip(rows[0]) == strip(rows[1])
        assert (tmp_path / "a" / "epoch_1.ckpt").exists() and (tmp_path / "a" / "final.ckpt").exists()

    def test_resume_reproduces_next_eval(self, tmp_path):
        cfg = tiny_config("train.epochs=3", "train.checkpoint_every=1", "train.milestones=[2]")
        full = train(cfg, out_dir=tmp_path / "full")
        ckpt = ckpt_io.load_checkpoint(tmp_path / "full" / "epoch_1.ckpt", cfg.digest())
        resumed = train(cfg, out_dir=tmp_path / "resumed", resume=ckpt)
        assert [r.epoch for r in resumed.history] == [2, 3]
        for a, b in zip(full.history[1:], resumed.history):
            assert a.branch_err == b.branch_err
            assert a.fused_err == b.fused_err and a.ensemble_err == b.ensemble_err
            assert a.losses == b.losses

    def test_resume_refuses_other_config(self, tmp_path):
        cfg = tiny_config("train.epochs=1")
        train(cfg, out_dir=tmp_path)
        ckpt = ckpt_io.load_checkpoint(tmp_path / "final.ckpt")
        with pytest.raises(CheckpointError, match="digest"):
            train(tiny_config("train.epochs=2"), resume=ckpt)

    def test_checkpoint_write_failure_aborts(self, tmp_path):
        target = tmp_path / "out"
        target.mkdir()
        (target / "final.ckpt.tmp").mkdir()  # blocks the temp file
        with pytest.raises(CheckpointError, match="failed to write"):
            train(tiny_config("train.epochs=1"), out_dir=target)


class TestCheckpoint:
    def trained(self, tmp_path, *extra):
        cfg = tiny_config("train.epochs=1", *extra)
        result = train(cfg, out_dir=tmp_path)
        return cfg, result, tmp_path / "final.ckpt"

    def test_save_load_save_byte_identical(self, tmp_path):
        _, _, path = self.trained(tmp_path)
        data = path.read_bytes()
        ckpt = ckpt_io.load_checkpoint(path)
        assert ckpt_io.to_bytes(ckpt) == data

    def test_round_trip_restores_eval_outputs(self, tmp_path):
        cfg, result, path = self.trained(tmp_path)
        model, _ = restore_model(ckpt_io.load_checkpoint(path))
        x = T.Tensor(np.random.default_rng(0).standard_normal((3, 3, 8, 8)))
        result.model.eval(), model.eval()
        a, b = result.model(x), model(x)
        np.testing.assert_array_equal(a.z_f.data, b.z_f.data)
        for za, zb in zip(a.z, b.z):
            np.testing.assert_array_equal(za.data, zb.data)
        for name, value in result.model.state_dict().items():
            np.testing.assert_array_equal(model.state_dict()[name], value)

    def test_header_layout(self, tmp_path):
        cfg, _, path = self.trained(tmp_path)
        data = path.read_bytes()
        assert data[:4] == b"FFLC"
        assert int.from_bytes(data[4:8], "little") == 1
        assert data[8:40] == cfg.digest()

    @pytest.mark.parametrize("cut", [1, 100, 1000])
    def test_truncated_rejected(self, tmp_path, cut):
        _, _, path = self.trained(tmp_path)
        data = path.read_bytes()
        with pytest.raises(CheckpointError):
            ckpt_io.from_bytes(data[:-cut])

    def test_corrupt_byte_rejected(self, tmp_path):
        _, _, path = self.trained(tmp_path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            ckpt_io.from_bytes(bytes(data))

    def test_bad_magic_and_version(self, tmp_path):
        _, _, path = self.trained(tmp_path)
        data = path.read_bytes()
        with pytest.raises(CheckpointError, match="magic"):
            ckpt_io.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError, match="version"):
            ckpt_io.from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])

    def test_digest_mismatch_refused(self, tmp_path):
        _, _, path = self.trained(tmp_path)
        with pytest.raises(CheckpointError, match="digest"):
            ckpt_io.load_checkpoint(path, tiny_config("train.seed=5").digest())

    def test_failed_load_leaves_model_untouched(self, tmp_path):
        cfg, _, path = self.trained(tmp_path)
        model = build_model(cfg)
        before = model.state_dict()
        with pytest.raises(CheckpointError):
            ckpt = ckpt_io.from_bytes(path.read_bytes()[:-7])
            model.load_state_dict(ckpt.tensors)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])


class TestExport:
    @pytest.mark.parametrize("extra", [(), ("model.mode=case2", "model.branch_stages=[[4, 8], [6]]")])
    def test_branch_export_bit_exact(self, tmp_path, extra):
        cfg = tiny_config("train.epochs=1", *extra)
        result = train(cfg, out_dir=tmp_path)
        ckpt = ckpt_io.load_checkpoint(tmp_path / "final.ckpt")
        x = T.Tensor(np.random.default_rng(1).standard_normal((4, 3, 8, 8)))
        result.model.eval()
        full = result.model(x)
        for k in range(2):
            single, single_cfg = restore_model(export_branch(ckpt, k))
            assert isinstance(single, VanillaModel)
            np.testing.assert_array_equal(single.eval()(x).z[0].data, full.z[k].data)
            vanilla = build_model(single_cfg)
            assert count_parameters(single) == count_parameters(vanilla)

    def test_fused_export(self, tmp_path):
        cfg = tiny_config("train.epochs=1")
        result = train(cfg, out_dir=tmp_path)
        exported = export_fused(ckpt_io.load_checkpoint(tmp_path / "final.ckpt"))
        assert exported.optimizer == {}
        model, _ = restore_model(exported)
        assert isinstance(model, FFLModel)
        test = load_dataset(cfg.dataset_spec("test"))
        assert evaluate(model, test).fused_err == evaluate(result.model, test).fused_err

    def test_make_checkpoint_captures_optimizer(self):
        cfg = tiny_config()
        model = build_model(cfg)
        opt = SGD(model.named_parameters(), 0.1)
        train_step(model, first_batch(cfg), opt, cfg.distill_config())
        ckpt = make_checkpoint(cfg, model, opt, 1, 4)
        assert set(ckpt.optimizer) == {n for n, _ in model.named_parameters()}
        assert ckpt.epoch == 1 and ckpt.step == 4
