import numpy as np
import pytest
import torch

from conftest import random_image
from shadowseg.backbone import ToyEncoder, encode_text, toy_config
from shadowseg.errors import CheckpointMismatchError, InputError
from shadowseg.model import ShadowHead
from shadowseg.objectives import LossConfig, total_loss
from shadowseg.synthetic import synthetic_dataset
from shadowseg.trainer import (Checkpoint, TrainConfig, TrainState,
                               build_optimizer, fit, poly_lr,
                               snapshot_checkpoint, toy_train_config,
                               train_step, trainable_fraction)


def tiny_state(iters=20, seed=0, **train_overrides):
    cfg = toy_config()
    encoder = ToyEncoder(cfg)
    text = encode_text(["a photo of a shadow"], cfg, encoder)
    head = ShadowHead(cfg, hidden_width=8, seed=seed)
    train_cfg = toy_train_config(total_iters=iters, batch_size=2, **train_overrides)
    return TrainState(head=head, encoder=encoder, text=text,
                      optimizer=build_optimizer(head, train_cfg),
                      train_cfg=train_cfg,
                      loss_cfg=LossConfig(total_iters=max(iters, 1)))


def tiny_batch(rng, count=2):
    batch = []
    for _ in range(count):
        image = random_image(rng)
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[:16, :24] = 1
        batch.append((image, mask))
    return batch


class TestPolyLr:
    def test_start_is_base(self):
        assert poly_lr(0, TrainConfig()) == 5e-3

    def test_end_is_zero(self):
        cfg = TrainConfig()
        assert poly_lr(cfg.total_iters, cfg) == 0.0

    def test_midpoint_value(self):
        cfg = TrainConfig()
        assert poly_lr(cfg.total_iters // 2, cfg) == \
            pytest.approx(5e-3 * 0.5 ** 0.9, abs=1e-12)

    def test_strictly_decreasing(self):
        cfg = TrainConfig(total_iters=100)
        values = [poly_lr(i, cfg) for i in range(101)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(InputError):
            poly_lr(-1, TrainConfig())
        with pytest.raises(InputError):
            poly_lr(11_000, TrainConfig())


class TestTrainStep:
    def test_zero_lr_leaves_parameters(self, rng):
        state = tiny_state(iters=20)
        before = {k: v.clone() for k, v in state.head.state_dict().items()}
        train_step(state, tiny_batch(rng), iteration=20)  # poly_lr(20, 20) == 0
        after = state.head.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_empty_batch_rejected(self, rng):
        with pytest.raises(InputError):
            train_step(tiny_state(), [], 0)

    def test_bad_mask_shape_rejected(self, rng):
        state = tiny_state()
        with pytest.raises(InputError):
            train_step(state, [(random_image(rng), np.zeros((8, 8)))], 0)

    def test_matches_hand_rolled_sgd(self, rng):
        """Two steps compared against a manual momentum/weight-decay update."""
        state = tiny_state(iters=50)
        batch = tiny_batch(rng, count=1)
        cfg = state.train_cfg

        reference = ShadowHead(state.head.config, hidden_width=8, seed=0)
        reference.load_state_dict(state.head.state_dict())
        decay, no_decay = reference.parameter_groups()
        decayed_ids = {id(p) for p in decay}
        buffers = {id(p): torch.zeros_like(p) for p in list(decay) + list(no_decay)}

        for iteration in (0, 1):
            mask_t = torch.tensor(batch[0][1], dtype=torch.float64)
            pyramid = state.encoder.encode_image(batch[0][0])
            report = total_loss(reference(pyramid, state.text), mask_t,
                                iteration, state.loss_cfg)
            grads = torch.autograd.grad(report.total, list(reference.parameters()))
            lr = poly_lr(iteration, cfg)
            with torch.no_grad():
                for p, g in zip(reference.parameters(), grads):
                    d = g + cfg.weight_decay * p if id(p) in decayed_ids else g
                    buf = buffers[id(p)]
                    buf.mul_(cfg.momentum).add_(d)
                    p.sub_(lr * buf)
            train_step(state, batch, iteration)

        for (name, actual), expected in zip(state.head.named_parameters(),
                                            reference.parameters()):
            assert torch.allclose(actual, expected, atol=1e-12), name

    def test_nonfinite_loss_aborts_with_component_name(self, rng):
        state = tiny_state()
        with torch.no_grad():
            state.head.fusion.refine[-1].weight.fill_(float("nan"))
        with pytest.raises(InputError) as err:
            train_step(state, tiny_batch(rng), 0)
        assert "final_loss" in str(err.value)


class TestFit:
    def test_loss_log_has_one_row_per_iteration(self):
        state = tiny_state(iters=5)
        rows = []
        fit(state, synthetic_dataset(3, seed=1), log_rows=rows)
        assert len(rows) == 5
        assert [r[0] for r in rows] == list(range(5))

    def test_empty_dataset_rejected(self):
        with pytest.raises(InputError):
            fit(tiny_state(), [])

    def test_zero_iterations_checkpoint_equals_init(self):
        state = tiny_state(iters=0)
        init_state = {k: v.clone() for k, v in state.head.state_dict().items()}
        ckpt = fit(state, synthetic_dataset(2, seed=1))
        assert ckpt.iteration == 0
        assert all(torch.equal(init_state[k], ckpt.head_state[k]) for k in init_state)

    def test_backbone_checksum_unchanged(self):
        state = tiny_state(iters=5)
        before = state.encoder.state_checksum()
        fit(state, synthetic_dataset(3, seed=1))
        assert state.encoder.state_checksum() == before

    def test_same_seed_reproduces_checkpoint_and_losses(self):
        runs = []
        for _ in range(2):
            state = tiny_state(iters=8, seed=3)
            rows = []
            ckpt = fit(state, synthetic_dataset(3, seed=2), log_rows=rows)
            runs.append((ckpt, rows))
        a, b = runs
        assert a[1] == b[1]
        assert all(torch.equal(a[0].head_state[k], b[0].head_state[k])
                   for k in a[0].head_state)

    def test_periodic_checkpoints_written(self, tmp_path):
        state = tiny_state(iters=6, checkpoint_every=2)
        fit(state, synthetic_dataset(2, seed=1), out_dir=str(tmp_path))
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "checkpoint_000002.pt" in names
        assert "checkpoint_000004.pt" in names
        assert "checkpoint_final.pt" in names
        assert "loss_log.csv" in names
        header = (tmp_path / "loss_log.csv").read_text().splitlines()[0]
        assert header == "iter,lr,l_final,l_gi,l_lc,l_ratio,total"


class TestCheckpoint:
    def test_round_trip_forward_bit_identical(self, tmp_path, rng):
        state = tiny_state(iters=3)
        fit(state, synthetic_dataset(2, seed=1))
        ckpt = snapshot_checkpoint(state, 3)
        path = tmp_path / "ckpt.pt"
        ckpt.save(path)
        loaded = Checkpoint.load(path)

        restored = ShadowHead(state.head.config, hidden_width=8, seed=99)
        restored.load_state_dict(loaded.head_state)
        probe = random_image(rng)
        with torch.no_grad():
            a = state.head(state.encoder.encode_image(probe), state.text)
            b = restored(state.encoder.encode_image(probe), state.text)
        assert torch.equal(a.final_logits, b.final_logits)
        assert torch.equal(a.ratio_logit, b.ratio_logit)

    def test_version_checked(self, tmp_path):
        state = tiny_state()
        ckpt = snapshot_checkpoint(state, 0)
        payload_path = tmp_path / "bad.pt"
        torch.save({"version": 999, "iteration": 0, "head_state": ckpt.head_state,
                    "optimizer_state": {}, "config": {}}, payload_path)
        with pytest.raises(CheckpointMismatchError):
            Checkpoint.load(payload_path)


class TestTrainableFraction:
    def test_no_frozen_params_means_one(self):
        head = ShadowHead(toy_config(), hidden_width=8)
        assert trainable_fraction(head, 0) == 1.0

    def test_arithmetic(self):
        head = ShadowHead(toy_config(), hidden_width=8)
        n = head.trainable_parameter_count()
        frozen = 300_000_000
        assert trainable_fraction(head, frozen) == pytest.approx(n / (n + frozen))
