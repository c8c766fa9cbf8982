import numpy as np
import pytest
import torch

from octdehaze.depth_proxy import StubDepth
from octdehaze.errors import TrainingDivergedError, ValidationError
from octdehaze.trainer import (
    DomainSampler,
    ImagePool,
    TrainConfig,
    augment,
    lr_at_epoch,
    train,
)

from oracles import adam_step


def tiny_config(**kw):
    defaults = dict(
        epochs=2,
        batch_size=1,
        image_size=32,
        seed=0,
        gen_name="6B-Oct",
        disc_name="3L-OctN",
        base_width=8,
        history_size=4,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_domains(rng, n=4, size=32):
    hazy = [rng.random((size, size, 3)) for _ in range(n)]
    clear = [rng.random((size, size, 3)) for _ in range(n)]
    return hazy, clear


class TestLrSchedule:
    def test_constant_then_linear_to_zero(self):
        cfg = tiny_config(epochs=20, lr=2e-4, decay_schedule=(10, 10))
        assert lr_at_epoch(cfg, 0) == 2e-4
        assert lr_at_epoch(cfg, 9) == 2e-4
        assert abs(lr_at_epoch(cfg, 15) - 1e-4) < 1e-12
        assert lr_at_epoch(cfg, 20) == 0.0

    def test_never_negative(self):
        cfg = tiny_config(epochs=20, decay_schedule=(5, 5))
        assert lr_at_epoch(cfg, 100) == 0.0


class TestAugment:
    def test_double_flip_is_identity(self, rng):
        batch = torch.tensor(rng.random((4, 3, 8, 8)))
        flipped = torch.flip(batch, dims=[-1])
        assert torch.equal(torch.flip(flipped, dims=[-1]), batch)

    def test_zero_prob_is_identity(self, rng):
        batch = torch.tensor(rng.random((4, 3, 8, 8)))
        out = augment(batch, 0.0, np.random.default_rng(0))
        assert torch.equal(out, batch)

    def test_flip_frequency(self):
        r = np.random.default_rng(1)
        batch = torch.zeros(1, 1, 1, 2)
        batch[0, 0, 0, 0] = 1.0
        flips = 0
        n = 10_000
        for _ in range(n):
            out = augment(batch, 0.5, r)
            flips += int(out[0, 0, 0, 1] == 1.0)
        assert abs(flips / n - 0.5) < 0.02

    def test_flip_is_mirror_not_permutation(self):
        batch = torch.arange(4.0).reshape(1, 1, 1, 4)
        out = augment(batch, 1.0, np.random.default_rng(0))
        assert torch.equal(out[0, 0, 0], torch.tensor([3.0, 2.0, 1.0, 0.0]))


class TestSamplersAndPool:
    def test_unpaired_sampling(self):
        sx = DomainSampler(50, 2, seed=1)
        sy = DomainSampler(50, 2, seed=2)
        for _ in range(100):
            sx.next_indices()
            sy.next_indices()
        assert sx.history != sy.history

    def test_sampler_deterministic(self):
        a = DomainSampler(10, 2, seed=3)
        b = DomainSampler(10, 2, seed=3)
        assert [a.next_indices().tolist() for _ in range(5)] == [
            b.next_indices().tolist() for _ in range(5)
        ]

    def test_empty_domain(self):
        with pytest.raises(ValidationError):
            DomainSampler(0, 1, seed=0)

    def test_pool_fills_then_swaps(self, rng):
        pool = ImagePool(2, seed=0)
        b1 = torch.tensor(rng.random((2, 3, 4, 4)))
        out1 = pool.query(b1)
        assert torch.equal(out1, b1)  # filling phase passes batches through
        assert len(pool.images) == 2
        b2 = torch.tensor(rng.random((2, 3, 4, 4)))
        out2 = pool.query(b2)
        assert len(pool.images) == 2
        # every returned image comes either from the batch or the old pool
        for img in out2:
            assert any(torch.equal(img, c) for c in (*b2, *b1))

    def test_zero_size_pool_is_passthrough(self, rng):
        pool = ImagePool(0, seed=0)
        b = torch.tensor(rng.random((2, 3, 4, 4)))
        assert torch.equal(pool.query(b), b)


class TestAdamAgainstOracle:
    def test_single_step_closed_form(self):
        w0 = np.array([0.5, -1.2, 3.0])
        grad = np.array([0.1, -0.4, 0.2])
        param = torch.tensor(w0, requires_grad=True)
        opt = torch.optim.Adam([param], lr=2e-4, betas=(0.5, 0.999))
        param.grad = torch.tensor(grad)
        opt.step()
        expected, _, _ = adam_step(
            w0, grad, np.zeros(3), np.zeros(3), step=1, lr=2e-4, beta1=0.5, beta2=0.999
        )
        assert np.abs(param.detach().numpy() - expected).max() < 1e-10

    def test_three_steps_closed_form(self):
        w = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        param = torch.tensor(w, requires_grad=True)
        opt = torch.optim.Adam([param], lr=1e-3, betas=(0.5, 0.999))
        grads = [np.array([0.3, -0.1]), np.array([-0.2, 0.5]), np.array([0.05, 0.05])]
        for step, g in enumerate(grads, start=1):
            param.grad = torch.tensor(g)
            opt.step()
            w, m, v = adam_step(w, g, m, v, step=step, lr=1e-3, beta1=0.5, beta2=0.999)
        assert np.abs(param.detach().numpy() - w).max() < 1e-10


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            tiny_config(batch_size=0)
        with pytest.raises(ValidationError):
            tiny_config(lr=0.0)
        with pytest.raises(ValidationError):
            tiny_config(image_size=15)
        with pytest.raises(ValidationError):
            tiny_config(loss_flag="nope")

    def test_log_columns_follow_loss_flag(self, rng):
        hazy, clear = tiny_domains(rng)
        res = train(tiny_config(epochs=1, loss_flag="base"), hazy, clear)
        assert "loss_depth" not in res.loss_log[0]
        assert "loss_ssim" not in res.loss_log[0]
        res = train(
            tiny_config(epochs=1, loss_flag="CPD"),
            hazy,
            clear,
            depth_estimator=StubDepth(),
        )
        assert "loss_depth" in res.loss_log[0]
        res = train(tiny_config(epochs=1, loss_flag="SSIM"), hazy, clear)
        assert "loss_ssim" in res.loss_log[0]

    def test_cpd_requires_depth_estimator(self, rng):
        hazy, clear = tiny_domains(rng)
        with pytest.raises(ValidationError, match="depth"):
            train(tiny_config(epochs=1, loss_flag="CPD"), hazy, clear)

    def test_image_size_mismatch(self, rng):
        hazy, clear = tiny_domains(rng, size=16)
        with pytest.raises(ValidationError, match="no resizing"):
            train(tiny_config(), hazy, clear)


class TestTrainLoop:
    def test_runs_and_logs(self, rng, tmp_path):
        hazy, clear = tiny_domains(rng)
        res = train(tiny_config(), hazy, clear, run_dir=tmp_path / "run")
        assert len(res.loss_log) == 2 * 4  # epochs * steps_per_epoch
        assert (tmp_path / "run" / "config.json").exists()
        assert (tmp_path / "run" / "log.csv").exists()
        assert res.checkpoint_paths[-1].name == "final.ckpt"
        lines = (tmp_path / "run" / "log.csv").read_text().splitlines()
        assert len(lines) == 1 + len(res.loss_log)
        assert lines[0].startswith("step,epoch,lr,")

    def test_all_losses_finite_and_recorded(self, rng):
        hazy, clear = tiny_domains(rng)
        res = train(tiny_config(epochs=1), hazy, clear)
        for row in res.loss_log:
            for key, val in row.items():
                assert np.isfinite(val), key

    def test_byte_identical_repeat_runs(self, rng, tmp_path):
        hazy, clear = tiny_domains(rng)
        train(tiny_config(seed=7), hazy, clear, run_dir=tmp_path / "a")
        train(tiny_config(seed=7), hazy, clear, run_dir=tmp_path / "b")
        assert (tmp_path / "a" / "log.csv").read_bytes() == (
            tmp_path / "b" / "log.csv"
        ).read_bytes()

    def test_different_seed_differs(self, rng, tmp_path):
        hazy, clear = tiny_domains(rng)
        r1 = train(tiny_config(seed=1), hazy, clear)
        r2 = train(tiny_config(seed=2), hazy, clear)
        assert r1.loss_log != r2.loss_log

    def test_max_steps(self, rng):
        hazy, clear = tiny_domains(rng)
        res = train(tiny_config(epochs=10, max_steps=3), hazy, clear)
        assert len(res.loss_log) == 3

    def test_resume_is_bit_for_bit(self, rng, tmp_path):
        from octdehaze.archive import load_archive

        hazy, clear = tiny_domains(rng)
        cfg = tiny_config(epochs=4, checkpoint_every_epochs=2, seed=5)
        full = train(cfg, hazy, clear, run_dir=tmp_path / "full")
        mid = tmp_path / "full" / "ckpt" / "epoch0001.ckpt"
        assert mid.exists()
        resumed = train(
            cfg, hazy, clear, run_dir=tmp_path / "resumed", resume_from=mid
        )
        t_full, m_full = load_archive(full.checkpoint_paths[-1])
        t_res, m_res = load_archive(resumed.checkpoint_paths[-1])
        assert m_full["step"] == m_res["step"]
        assert sorted(t_full) == sorted(t_res)
        for key in t_full:
            assert np.array_equal(t_full[key], t_res[key]), key
        # the resumed log holds exactly the second half of the full log
        assert resumed.loss_log == full.loss_log[len(full.loss_log) // 2 :]

    def test_divergence_dump(self, rng, tmp_path):
        class NanExtractor(torch.nn.Module):
            tap_count = 1

            def forward(self, x):
                return [x * float("nan")]

        hazy, clear = tiny_domains(rng)
        with pytest.raises(TrainingDivergedError) as err:
            train(
                tiny_config(epochs=1),
                hazy,
                clear,
                run_dir=tmp_path / "run",
                extractor=NanExtractor(),
            )
        assert err.value.dump_path is not None and err.value.dump_path.exists()
        dump = np.load(err.value.dump_path)
        assert "batch_x" in dump and "batch_y" in dump
