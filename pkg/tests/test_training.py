import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from blindinpaint import synth
from blindinpaint.errors import ConfigError, TrainingFault
from blindinpaint.losses import LossWeights
from blindinpaint.networks import TINY
from blindinpaint.training import (
    JsonlLog,
    TrainConfig,
    batch_indices,
    evaluate,
    iterate_dataset,
    joint_train,
    load_dataset,
    load_state,
    mask_bce,
    new_state,
    parse_config,
    pretrain_mpn,
    pretrain_rin,
    procedural_dataset,
    save_state,
)

CFG = TrainConfig(steps=3, batch_size=2, net=TINY, seed=7)


@pytest.fixture(scope="module")
def data():
    return procedural_dataset(6, 16, seed=1)


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_parse(self):
        cfg = parse_config(
            """
            # toy run
            stage = rin
            steps = 12
            lr_g = 3e-4
            lambda_m = 0.5   # mask weight
            lambda_a = 0
            net.image_size = 16
            net.base_channels = 4
            net.n_down = 2
            net.disc_layers = 2
            """
        )
        assert (cfg.stage, cfg.steps, cfg.lr_g) == ("rin", 12, 3e-4)
        assert cfg.weights == LossWeights(mask=0.5, adv=0.0)
        assert (cfg.net.image_size, cfg.net.base_channels) == (16, 4)

    @pytest.mark.parametrize("text", ["steps = -1", "batch_size = 0", "stage = warmup", "bogus = 1",
                                      "net.bogus = 1", "steps = ten", "lambda_r = -2", "just words"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_dict_round_trip(self):
        assert TrainConfig.from_dict(json.loads(json.dumps(CFG.to_dict()))) == CFG


class TestIterate:
    def test_epoch_covers_everything_once(self):
        n, b = 10, 5
        for epoch in range(3):
            idx = np.concatenate([batch_indices(n, b, 3, epoch * 2 + k) for k in range(2)])
            assert sorted(idx.tolist()) == list(range(n))

    def test_same_seed_same_order(self):
        assert all(np.array_equal(batch_indices(9, 4, 5, s), batch_indices(9, 4, 5, s)) for s in range(10))

    def test_different_seed_different_order(self):
        a = np.concatenate([batch_indices(50, 10, 1, s) for s in range(5)])
        b = np.concatenate([batch_indices(50, 10, 2, s) for s in range(5)])
        assert not np.array_equal(a, b)

    def test_batch_straddles_epochs(self):
        # 7 items, batch 3: step 2 takes the last item of epoch 0 and two of epoch 1
        idx = batch_indices(7, 3, 0, 2)
        assert idx[0] == batch_indices(7, 7, 0, 0)[6]
        assert idx[1:].tolist() == batch_indices(7, 7, 0, 1)[:2].tolist()

    def test_iterator_matches_indices(self, data):
        it = iterate_dataset(data, 4, 11, start_step=3)
        first = next(it)
        assert torch.equal(first.truth, data.take(batch_indices(len(data), 4, 11, 3)).truth)


class TestStages:
    def test_zero_steps_returns_init(self, data):
        fresh = new_state(CFG)
        state = pretrain_mpn(dataclasses.replace(CFG, steps=0), data)
        assert state.step == 0 and same(params(state.mpn), params(fresh.mpn))

    def test_mpn_deterministic(self, data):
        runs = []
        for _ in range(2):
            trace = []
            pretrain_mpn(CFG, data, logger=trace.append)
            runs.append([r["L_m"] for r in trace])
        assert runs[0] == runs[1]
        assert all(math.isfinite(v) for v in runs[0])

    def test_rin_zero_weights_leave_params(self, data):
        cfg = dataclasses.replace(CFG, weights=LossWeights(0, 0, 0, 0, 10.0, 0))
        state = new_state(cfg)
        before = params(state.rin), params(state.disc)
        pretrain_rin(cfg, data, state)
        assert same(before[0], params(state.rin)) and same(before[1], params(state.disc))

    def test_rin_deterministic_and_logged(self, data):
        traces = []
        for _ in range(2):
            trace = []
            pretrain_rin(CFG, data, logger=trace.append)
            traces.append(trace)
        assert traces[0] == traces[1]
        rec = traces[0][-1]
        assert set(rec) == {"step", "L_m", "L_recon", "L_sem", "L_mrf", "L_adv", "L_D", "gp"}
        assert rec["L_m"] is None and rec["gp"] >= 0

    def test_rin_does_not_touch_mpn(self, data):
        state = new_state(CFG)
        before = params(state.mpn)
        pretrain_rin(CFG, data, state)
        assert same(before, params(state.mpn))

    def test_joint_updates_everything(self, data):
        warm = pretrain_mpn(CFG, data)
        before = params(warm.mpn), params(warm.rin), params(warm.disc)
        trace = []
        state = joint_train(CFG, warm, data, logger=trace.append)
        assert state.step == 6
        after = params(state.mpn), params(state.rin), params(state.disc)
        assert all(not same(a, b) for a, b in zip(before, after))
        assert all(math.isfinite(r[k]) for r in trace for k in r)

    def test_generation_loss_reaches_mpn(self, data):
        # with the mask term off, every MPN gradient comes from the generator loss
        cfg = dataclasses.replace(CFG, steps=1, weights=LossWeights(mask=0.0))
        state = new_state(cfg)
        joint_train(cfg, state, data)
        norm = sum(float(p.grad.norm()) for p in state.mpn.parameters() if p.grad is not None)
        assert norm > 0

    def test_nan_aborts_with_snapshot(self, data, tmp_path):
        cfg = dataclasses.replace(CFG, out=str(tmp_path))
        state = new_state(cfg)
        with torch.no_grad():
            state.mpn.head.bias.fill_(float("nan"))
        with pytest.raises(TrainingFault, match="snapshot"):
            pretrain_mpn(cfg, data, state)
        assert list(tmp_path.glob("fault_step*.ckpt"))

    def test_network_mismatch_rejected(self, data):
        warm = new_state(CFG)
        other = dataclasses.replace(CFG, net=dataclasses.replace(TINY, base_channels=8))
        with pytest.raises(ConfigError):
            joint_train(other, warm, data)


class TestResume:
    @pytest.mark.parametrize("stage", ["mpn", "joint"])
    def test_resume_matches_uninterrupted(self, data, tmp_path, stage):
        cfg = dataclasses.replace(CFG, steps=4)
        run = pretrain_mpn if stage == "mpn" else (lambda c, d, s, logger: joint_train(c, s, d, logger))

        full_trace = []
        state = new_state(cfg)
        run(cfg, data, state, logger=full_trace.append)
        run(dataclasses.replace(cfg, steps=10), data, state, logger=full_trace.append)

        state = new_state(cfg)
        run(cfg, data, state, logger=lambda r: None)
        save_state(tmp_path / "k.ckpt", state)
        resumed = load_state(tmp_path / "k.ckpt")
        trace = []
        run(dataclasses.replace(cfg, steps=10), data, resumed, logger=trace.append)
        assert trace == full_trace[4:]

    def test_resave_is_byte_identical(self, data, tmp_path):
        state = joint_train(CFG, new_state(CFG), data)
        save_state(tmp_path / "a.ckpt", state)
        save_state(tmp_path / "b.ckpt", load_state(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_last_checkpoint_and_snapshots(self, data, tmp_path):
        cfg = dataclasses.replace(CFG, steps=4, snapshot_every=2, out=str(tmp_path))
        pretrain_mpn(cfg, data)
        names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
        assert names == ["last.ckpt", "step_000002.ckpt", "step_000004.ckpt"]
        assert load_state(tmp_path / "last.ckpt").step == 4


class TestDataOnDisk:
    def test_load_dataset(self, tmp_path):
        images = tmp_path / "images"
        images.mkdir()
        with open(tmp_path / "manifest.jsonl", "w") as fh:
            for i in range(3):
                t = synth.make_training_tuple(synth.procedural_image(i, 16, 16), synth.procedural_image(i + 9, 16, 16), seed=i)
                synth.save_image(images / f"{i:05d}_I.png", t.degraded)
                synth.save_image(images / f"{i:05d}_O.png", t.truth)
                synth.save_mask(images / f"{i:05d}_M.png", t.mask)
                synth.save_mask(images / f"{i:05d}_Msoft.png", t.soft_mask)
                fh.write(json.dumps({"id": f"{i:05d}"}) + "\n")
        before = {p.name: p.read_bytes() for p in images.iterdir()}
        data = load_dataset(tmp_path)
        assert data.degraded.shape == (3, 3, 16, 16) and data.mask.shape == (3, 1, 16, 16)
        assert set(data.mask.unique().tolist()) <= {0.0, 1.0}
        pretrain_mpn(dataclasses.replace(CFG, steps=2), data)
        assert before == {p.name: p.read_bytes() for p in images.iterdir()}

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text("")
        with pytest.raises(ValueError):
            load_dataset(tmp_path)


class TestEvaluation:
    def test_report_fields(self, data):
        state = new_state(CFG)
        report = evaluate(state.mpn, state.rin, data)
        assert report["n"] == len(data)
        assert set(report) == {"n", "bce", "psnr", "ssim"}
        assert mask_bce(state.mpn, data) > 0

    def test_jsonl_log(self, data, tmp_path):
        log = JsonlLog(tmp_path / "train_log.jsonl")
        pretrain_mpn(CFG, data, logger=log)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [1, 2, 3]
