import csv
import math
import struct

import numpy as np
import pytest
import torch

from na_irstd.checkpoint import (
    MAGIC,
    CheckpointError,
    apply_checkpoint,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from na_irstd.data import SynthConfig, synth_generate
from na_irstd.losses import seg_loss_with_logits
from na_irstd.model import ModelConfig, NaIRSTD, RelevanceNet
from na_irstd.training import (
    LOG_FIELDS,
    TrainConfig,
    build_stage2_model,
    make_schedule,
    model_from_checkpoint,
    params_digest,
    patch_label_matrix,
    stage1_train,
    stage2_optimizer,
    stage2_train,
)

MODEL = ModelConfig(image_size=64, patch_size=16, in_channels=1, native_widths=[4, 4, 4, 4], native_blocks=1,
                    backbone_widths=[4, 8, 8, 8], decoder_width=4)


@pytest.fixture(scope="module")
def data():
    ds = synth_generate(SynthConfig(count=8, test_count=4, image_size=64, seed=3))
    return ds.split("train"), ds.split("test")


@pytest.fixture(scope="module")
def stage1(data):
    return stage1_train(data[0], MODEL, TrainConfig(batch_size=4, k=2), epochs=2)


class TestSchedule:
    def test_cosine_points(self):
        rate = make_schedule(1e-4, 100)
        assert rate(0) == 1e-4
        assert rate(50) == pytest.approx(5e-5)
        assert rate(100) == pytest.approx(0, abs=1e-20)
        assert all(rate(e + 1) <= rate(e) for e in range(100))

    def test_formula(self):
        rate = make_schedule(2.0, 7)
        for e in range(8):
            assert rate(e) == pytest.approx(2.0 * 0.5 * (1 + math.cos(math.pi * e / 7)))

    def test_rejects_zero_epochs(self):
        with pytest.raises(ValueError):
            make_schedule(1e-4, 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr_stage1": 0}, {"k": 0}, {"label_mode": "fuzzy"}, {"sigma": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


class TestStage1:
    def test_only_relevance_modules(self, stage1):
        assert isinstance(stage1.model, RelevanceNet)
        assert stage1.checkpoint.modules == ("native", "scorer")
        assert stage1.checkpoint.stage == 1

    def test_history(self, stage1, tmp_path, data):
        assert [r["epoch"] for r in stage1.history] == [0, 1]
        log = tmp_path / "log.csv"
        stage1_train(data[0], MODEL, TrainConfig(batch_size=4), val=data[1], log_path=log, epochs=1)
        rows = list(csv.DictReader(open(log)))
        assert list(rows[0]) == LOG_FIELDS
        assert 0 <= float(rows[0]["val_coverage"]) <= 1

    def test_deterministic(self, data, stage1):
        again = stage1_train(data[0], MODEL, TrainConfig(batch_size=4, k=2), epochs=2)
        assert params_digest(again.model) == params_digest(stage1.model)
        other = stage1_train(data[0], MODEL, TrainConfig(batch_size=4, k=2, seed=1), epochs=2)
        assert params_digest(other.model) != params_digest(stage1.model)

    def test_label_modes(self, data):
        soft = patch_label_matrix(data[0], MODEL, 8.0, "soft")
        hard = patch_label_matrix(data[0], MODEL, 8.0, "hard")
        assert soft.shape == hard.shape == (8, 16)
        assert set(hard.unique().tolist()) <= {0.0, 1.0}
        assert ((hard == 1) <= (soft > 0)).all()


class TestStage2:
    def test_freeze_and_groups(self, stage1):
        model = build_stage2_model(stage1.checkpoint, MODEL, 2)
        assert not any(p.requires_grad for p in model.scorer.parameters())
        opt = stage2_optimizer(model, TrainConfig())
        groups = {g["name"]: g for g in opt.param_groups}
        assert groups["native"]["lr"] == 1e-6
        assert groups["backbone_fusion"]["lr"] == 1e-4
        scorer_ids = {id(p) for p in model.scorer.parameters()}
        assert not any(id(p) in scorer_ids for g in opt.param_groups for p in g["params"])

    def test_single_step_rates(self, stage1, data):
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            model = build_stage2_model(stage1.checkpoint, MODEL, 2)
            with torch.no_grad():
                for f in model.fusion:
                    f.alpha.fill_(0.5)  # so the native branch receives gradient on the first step
            opt = stage2_optimizer(model, TrainConfig())
            x = torch.from_numpy(data[0].images()[:2]).unsqueeze(1).double()
            y = torch.from_numpy(data[0].masks()[:2]).unsqueeze(1).double()
            seg_loss_with_logits(model(x).logits, y).backward()
            before = {n: p.detach().clone() for n, p in model.named_parameters()}
            grads = {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}
            opt.step()
        finally:
            torch.set_default_dtype(prev)
        assert not any(n.startswith("scorer") for n in grads)
        # closed form of Adam's first step: m_hat = g, v_hat = g^2
        for n, p in model.named_parameters():
            if n.startswith("scorer"):
                assert torch.equal(p.detach(), before[n])
                continue
            lr = 1e-6 if n.startswith("native") else 1e-4
            g = grads[n]
            expected = before[n] - lr * g / (g.abs() + 1e-8)
            assert torch.allclose(p.detach(), expected, rtol=0, atol=1e-15), n

    def test_scorer_unchanged(self, stage1, data):
        grads = []

        def check(model):
            grads.extend(p.grad for p in model.scorer.parameters())

        r = stage2_train(data[0], stage1.checkpoint, MODEL, TrainConfig(batch_size=4, k=2), epochs=2, on_step=check)
        assert all(g is None or not g.any() for g in grads)
        trained = {n: v for n, v in r.checkpoint.params["scorer"].items()}
        for n, v in stage1.checkpoint.params["scorer"].items():
            assert np.array_equal(trained[n], v)
        assert r.checkpoint.stage == 2
        assert r.history[0]["lr_scorer"] == 0.0

    def test_rejects_wrong_stage(self, stage1, data):
        r = stage2_train(data[0], stage1.checkpoint, MODEL, TrainConfig(batch_size=4), epochs=1)
        with pytest.raises(CheckpointError):
            stage2_train(data[0], r.checkpoint, MODEL, TrainConfig(), epochs=1)

    def test_rejects_config_mismatch(self, stage1):
        other = ModelConfig(**{**MODEL.__dict__, "native_widths": [4, 4, 4, 8]})
        with pytest.raises(CheckpointError):
            build_stage2_model(stage1.checkpoint, other, 2)

    def test_train_eval_selection_parity(self, stage1, data):
        model = build_stage2_model(stage1.checkpoint, MODEL, 3)
        x = torch.from_numpy(data[1].images()).unsqueeze(1)
        model.train()
        a = model(x).indices
        model.eval()
        with torch.no_grad():
            b = model(x).indices
        assert torch.equal(a, b)


class TestCheckpoint:
    def test_round_trip(self, stage1, tmp_path):
        path = tmp_path / "s1.ckpt"
        save_checkpoint(path, stage1.checkpoint)
        loaded = load_checkpoint(path)
        assert loaded.stage == 1 and loaded.config == stage1.checkpoint.config
        net = model_from_checkpoint(loaded)
        assert isinstance(net, RelevanceNet)
        assert params_digest(net) == params_digest(stage1.model)
        assert to_bytes(loaded) == path.read_bytes()

    def test_stable_bytes(self, stage1):
        assert to_bytes(stage1.checkpoint) == to_bytes(stage1.checkpoint)
        assert to_bytes(stage1.checkpoint).startswith(MAGIC)

    def test_truncated(self, stage1):
        blob = to_bytes(stage1.checkpoint)
        for cut in (4, 30, len(blob) - 1):
            with pytest.raises(CheckpointError):
                from_bytes(blob[:cut])

    def test_version_and_magic(self, stage1):
        blob = bytearray(to_bytes(stage1.checkpoint))
        bumped = bytes(blob[:8]) + struct.pack("<I", 99) + bytes(blob[12:])
        with pytest.raises(CheckpointError, match="version"):
            from_bytes(bumped)
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"X" + bytes(blob[1:]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_shape_mismatch(self, stage1):
        model = NaIRSTD(ModelConfig(**{**MODEL.__dict__, "native_widths": [4, 4, 4, 8]}))
        with pytest.raises(CheckpointError):
            apply_checkpoint(model, stage1.checkpoint, modules=("native",))
        with pytest.raises(CheckpointError, match="no module"):
            apply_checkpoint(model, stage1.checkpoint, modules=("decoder",))

    def test_stage2_round_trip(self, stage1, data):
        r = stage2_train(data[0], stage1.checkpoint, MODEL, TrainConfig(batch_size=4, k=2), epochs=1)
        loaded = from_bytes(to_bytes(r.checkpoint))
        assert loaded.params["fusion"]["0.alpha"].shape == ()
        model = model_from_checkpoint(loaded)
        assert isinstance(model, NaIRSTD)
        assert params_digest(model) == params_digest(r.model)
