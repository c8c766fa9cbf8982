"""Unpaired adversarial training loop: two generators, two discriminators,
alternating updates, linear learning-rate decay, history-buffered
discriminator batches, CSV loss logging and resumable checkpoints.

The two image domains are sampled by independent seeded generators and are
never indexed jointly anywhere in the loop. All stochastic decisions (batch
indices, flips, history-buffer swaps) come from numpy generators whose state
is checkpointed, so deterministic-mode runs and resumes are exactly
reproducible.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .archive import load_archive, save_archive
from .errors import TrainingDivergedError, ValidationError
from .losses import LossWeights, make_extractor, parse_loss_flag
from .networks import build_discriminator, build_generator, discriminator_spec, generator_spec


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 2
    lr: float = 2e-4
    decay_schedule: tuple[int, int] = (10, 10)  # (constant epochs, decay epochs)
    image_size: int = 64
    flip_prob: float = 0.5
    seed: int = 0
    gen_name: str = "6B-Oct"
    disc_name: str = "3L-OctN"
    loss_flag: str = "base"
    base_width: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    history_size: int = 50
    max_steps: int | None = None
    checkpoint_every_epochs: int = 0  # 0: final checkpoint only
    adam_betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.image_size < 16 or self.image_size % 2:
            raise ValidationError("image_size must be even and >= 16")
        parse_loss_flag(self.loss_flag)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decay_schedule"] = list(self.decay_schedule)
        d["adam_betas"] = list(self.adam_betas)
        return d


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant for the first ``constant`` epochs, then linear to zero over
    the following ``decay`` epochs."""
    constant, decay = config.decay_schedule
    if epoch < constant:
        return config.lr
    frac = 1.0 - (epoch - constant) / max(1, decay)
    return config.lr * max(0.0, frac)


def augment(batch: torch.Tensor, flip_prob: float, rng: np.random.Generator):
    """Horizontal flip with probability flip_prob, per sample. The only
    augmentation performed; no crops, no color jitter."""
    if flip_prob <= 0:
        return batch
    flips = rng.random(batch.shape[0]) < flip_prob
    if not flips.any():
        return batch
    out = batch.clone()
    idx = np.nonzero(flips)[0]
    out[idx] = torch.flip(out[idx], dims=[-1])
    return out


class DomainSampler:
    """Draws batch indices for one domain from its own seeded generator and
    records the full draw history (unpairedness is assertable from it)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValidationError("domain is empty")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.history: list[list[int]] = []

    def next_indices(self) -> np.ndarray:
        idx = self.rng.integers(0, self.n, size=self.batch_size)
        self.history.append(idx.tolist())
        return idx


class ImagePool:
    """History buffer of generated images feeding discriminator updates."""

    def __init__(self, size: int, seed: int):
        self.size = size
        self.rng = np.random.default_rng(seed)
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return batch
        out = []
        for img in batch:
            img = img.detach()
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                slot = int(self.rng.integers(0, self.size))
                out.append(self.images[slot].clone())
                self.images[slot] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


def _to_batch(images: list[np.ndarray], indices, dtype) -> torch.Tensor:
    sel = [
        torch.from_numpy(np.ascontiguousarray(images[i].transpose(2, 0, 1)))
        for i in indices
    ]
    return torch.stack(sel).to(dtype) * 2.0 - 1.0  # [0,1] -> [-1,1]


class TrainState:
    """Everything a training run mutates; fully serializable."""

    def __init__(self, config: TrainConfig, n_hazy: int, n_clear: int,
                 depth_estimator=None, extractor=None, dtype=torch.float32):
        self.config = config
        self.dtype = dtype
        torch.manual_seed(config.seed)
        gspec = lambda: generator_spec(config.gen_name, config.base_width)
        dspec = lambda: discriminator_spec(config.disc_name, config.base_width)
        self.g = build_generator(gspec()).module.to(dtype)  # hazy -> clear
        self.f = build_generator(gspec()).module.to(dtype)  # clear -> hazy
        self.d_clear = build_discriminator(dspec()).module.to(dtype)
        self.d_hazy = build_discriminator(dspec()).module.to(dtype)

        self.flags = parse_loss_flag(config.loss_flag)
        self.weights = config.weights
        self.extractor = (extractor or make_extractor("stub", seed=config.seed)).to(dtype)
        phi = depth_estimator
        if phi is None and self.flags["use_depth"]:
            raise ValidationError("loss flag CPD requires a depth estimator")
        # phi sees [0,1] images and its raw output is affine-normalized so the
        # loss scale is backend independent
        self.phi = L.NormalizedDepth(phi.to(dtype)) if phi is not None else None

        self.opt_g = torch.optim.Adam(
            itertools.chain(self.g.parameters(), self.f.parameters()),
            lr=config.lr, betas=config.adam_betas,
        )
        self.opt_d = torch.optim.Adam(
            itertools.chain(self.d_clear.parameters(), self.d_hazy.parameters()),
            lr=config.lr, betas=config.adam_betas,
        )
        self.sampler_hazy = DomainSampler(n_hazy, config.batch_size, config.seed * 1000 + 1)
        self.sampler_clear = DomainSampler(n_clear, config.batch_size, config.seed * 1000 + 2)
        self.pool_clear = ImagePool(config.history_size, config.seed * 1000 + 3)
        self.pool_hazy = ImagePool(config.history_size, config.seed * 1000 + 4)
        self.aug_rng = np.random.default_rng(config.seed * 1000 + 5)
        self.step = 0
        self.epoch = 0

    # -- serialization ------------------------------------------------------

    def _modules(self):
        return {
            "g": self.g, "f": self.f,
            "d_clear": self.d_clear, "d_hazy": self.d_hazy,
        }

    def checkpoint_tensors(self) -> tuple[dict, dict]:
        tensors = {}
        for name, mod in self._modules().items():
            for key, val in mod.state_dict().items():
                tensors[f"model.{name}.{key}"] = val.detach().cpu().numpy()
        for oname, opt in (("g", self.opt_g), ("d", self.opt_d)):
            sd = opt.state_dict()
            for pidx, pstate in sd["state"].items():
                for skey, sval in pstate.items():
                    tensors[f"optim.{oname}.{pidx}.{skey}"] = (
                        sval.detach().cpu().numpy()
                        if torch.is_tensor(sval)
                        else np.asarray(sval)
                    )
        for pname, pool in (("clear", self.pool_clear), ("hazy", self.pool_hazy)):
            for i, img in enumerate(pool.images):
                tensors[f"pool.{pname}.{i:04d}"] = img.cpu().numpy()
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "rng": {
                "sampler_hazy": self.sampler_hazy.rng.bit_generator.state,
                "sampler_clear": self.sampler_clear.rng.bit_generator.state,
                "pool_clear": self.pool_clear.rng.bit_generator.state,
                "pool_hazy": self.pool_hazy.rng.bit_generator.state,
                "aug": self.aug_rng.bit_generator.state,
            },
        }
        return tensors, meta

    def save(self, path):
        tensors, meta = self.checkpoint_tensors()
        save_archive(path, tensors, meta)

    def load(self, path):
        tensors, meta = load_archive(path)
        for name, mod in self._modules().items():
            prefix = f"model.{name}."
            sd = {
                k[len(prefix):]: torch.from_numpy(v.copy())
                for k, v in tensors.items() if k.startswith(prefix)
            }
            mod.load_state_dict(sd)
        for oname, opt in (("g", self.opt_g), ("d", self.opt_d)):
            sd = opt.state_dict()
            state = {}
            prefix = f"optim.{oname}."
            for k, v in tensors.items():
                if not k.startswith(prefix):
                    continue
                _, _, pidx, skey = k.split(".", 3)
                entry = state.setdefault(int(pidx), {})
                entry[skey] = (
                    torch.from_numpy(v.copy()).to(self.dtype)
                    if v.ndim else torch.tensor(v.item())
                )
            sd["state"] = state
            opt.load_state_dict(sd)
        for pname, pool in (("clear", self.pool_clear), ("hazy", self.pool_hazy)):
            prefix = f"pool.{pname}."
            keys = sorted(k for k in tensors if k.startswith(prefix))
            pool.images = [torch.from_numpy(tensors[k].copy()).to(self.dtype) for k in keys]
        rng = meta["rng"]
        self.sampler_hazy.rng.bit_generator.state = rng["sampler_hazy"]
        self.sampler_clear.rng.bit_generator.state = rng["sampler_clear"]
        self.pool_clear.rng.bit_generator.state = rng["pool_clear"]
        self.pool_hazy.rng.bit_generator.state = rng["pool_hazy"]
        self.aug_rng.bit_generator.state = rng["aug"]
        self.step = meta["step"]
        self.epoch = meta["epoch"]


def _phi01(phi):
    # training tensors live in [-1,1]; depth backends expect [0,1]
    return lambda img: phi((img + 1.0) / 2.0)


def training_step(state: TrainState, batch_x: torch.Tensor, batch_y: torch.Tensor) -> dict:
    """One generator update followed by one discriminator update.

    ``batch_x`` is hazy-domain, ``batch_y`` clear-domain, both in [-1,1].
    Returns the per-term loss record for this step.
    """
    cfg, w, flags = state.config, state.weights, state.flags
    g, f = state.g, state.f

    fake_clear = g(batch_x)
    rec_hazy = f(fake_clear)
    fake_hazy = f(batch_y)
    rec_clear = g(fake_hazy)

    # the generator side of the least-squares objective only involves the
    # discriminator's score on fakes, so no real batch is scored here
    d_fake_clear = state.d_clear(fake_clear)
    d_fake_hazy = state.d_hazy(fake_hazy)
    adv_g_clear, _ = L.adversarial_losses(d_fake_clear.detach(), d_fake_clear)
    adv_g_hazy, _ = L.adversarial_losses(d_fake_hazy.detach(), d_fake_hazy)
    loss_adv = adv_g_clear + adv_g_hazy
    loss_cyc = L.cycle_consistency_loss(batch_x, rec_hazy, batch_y, rec_clear)
    loss_idt = L.identity_loss(batch_y, g(batch_y)) + L.identity_loss(batch_x, f(batch_x))
    loss_perc = L.perceptual_loss(batch_x, rec_hazy, state.extractor) + L.perceptual_loss(
        batch_y, rec_clear, state.extractor
    )
    total = w.w_adv * loss_adv + w.w_cyc * loss_cyc + w.w_idt * loss_idt + w.w_perc * loss_perc

    record = {
        "loss_adv": float(loss_adv.detach()),
        "loss_cyc": float(loss_cyc.detach()),
        "loss_idt": float(loss_idt.detach()),
        "loss_perc": float(loss_perc.detach()),
    }
    if flags["use_depth"]:
        phi = _phi01(state.phi)
        loss_depth = L.depth_consistency_loss(batch_x, rec_hazy, phi) + \
            L.depth_consistency_loss(batch_y, rec_clear, phi)
        total = total + w.w_depth * loss_depth
        record["loss_depth"] = float(loss_depth.detach())
    if flags["use_ssim"]:
        loss_ssim = L.ssim_loss(batch_x, rec_hazy, data_range=2.0) + \
            L.ssim_loss(batch_y, rec_clear, data_range=2.0)
        total = total + w.w_ssim * loss_ssim
        record["loss_ssim"] = float(loss_ssim.detach())

    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    pooled_clear = state.pool_clear.query(fake_clear.detach())
    pooled_hazy = state.pool_hazy.query(fake_hazy.detach())
    _, d_loss_clear = L.adversarial_losses(state.d_clear(batch_y), state.d_clear(pooled_clear))
    _, d_loss_hazy = L.adversarial_losses(state.d_hazy(batch_x), state.d_hazy(pooled_hazy))
    loss_d = d_loss_clear + d_loss_hazy
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    record["loss_g_total"] = float(total.detach())
    record["loss_d"] = float(loss_d.detach())
    state.step += 1
    return record


def _log_columns(flags) -> list[str]:
    cols = ["step", "epoch", "lr", "loss_adv", "loss_cyc", "loss_idt", "loss_perc"]
    if flags["use_depth"]:
        cols.append("loss_depth")
    if flags["use_ssim"]:
        cols.append("loss_ssim")
    cols += ["loss_g_total", "loss_d"]
    return cols


@dataclass
class TrainResult:
    loss_log: list[dict]
    run_dir: Path | None
    log_path: Path | None
    checkpoint_paths: list[Path]
    state: TrainState


def train(
    config: TrainConfig,
    hazy_set: list[np.ndarray],
    clear_set: list[np.ndarray],
    run_dir=None,
    depth_estimator=None,
    extractor=None,
    dtype=torch.float32,
    resume_from=None,
) -> TrainResult:
    """Run the full loop over unpaired hazy/clear image sets ([0,1] HxWx3).

    Writes runs/<name>-style artifacts when ``run_dir`` is given:
    config.json, log.csv (append-only, one row per step) and ckpt/ archives.
    """
    if not hazy_set or not clear_set:
        raise ValidationError("both domains must be non-empty")
    for img in (*hazy_set[:1], *clear_set[:1]):
        if img.shape[0] != config.image_size or img.shape[1] != config.image_size:
            raise ValidationError(
                f"images are {img.shape[:2]}, config.image_size is {config.image_size} "
                "(no resizing is performed)"
            )

    state = TrainState(
        config, len(hazy_set), len(clear_set),
        depth_estimator=depth_estimator, extractor=extractor, dtype=dtype,
    )
    if resume_from is not None:
        state.load(resume_from)

    log_path = ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "ckpt"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=1)
        )
        log_path = run_dir / "log.csv"

    cols = _log_columns(state.flags)
    log_rows: list[dict] = []
    log_file = None
    if log_path is not None:
        fresh = resume_from is None or not log_path.exists()
        log_file = open(log_path, "a")
        if fresh:
            log_file.write(",".join(cols) + "\n")

    steps_per_epoch = max(1, min(len(hazy_set), len(clear_set)) // config.batch_size)
    checkpoint_paths: list[Path] = []

    def dump_and_raise(record, bx, by):
        dump_path = None
        if run_dir is not None:
            dump_path = run_dir / f"diverged_step{state.step}.npz"
            np.savez(dump_path, batch_x=bx.numpy(), batch_y=by.numpy(), **record)
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: {record}", dump_path=dump_path
        )

    try:
        done = False
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            lr = lr_at_epoch(config, epoch)
            for group in (*state.opt_g.param_groups, *state.opt_d.param_groups):
                group["lr"] = lr
            for _ in range(steps_per_epoch):
                idx_x = state.sampler_hazy.next_indices()
                idx_y = state.sampler_clear.next_indices()
                bx = _to_batch(hazy_set, idx_x, dtype)
                by = _to_batch(clear_set, idx_y, dtype)
                bx = augment(bx, config.flip_prob, state.aug_rng)
                by = augment(by, config.flip_prob, state.aug_rng)
                record = training_step(state, bx, by)
                record["step"] = state.step
                record["epoch"] = epoch
                record["lr"] = lr
                if not all(np.isfinite(v) for v in record.values()):
                    dump_and_raise(record, bx, by)
                log_rows.append(record)
                if log_file is not None:
                    log_file.write(",".join(repr(record[c]) for c in cols) + "\n")
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                    break
            # a checkpoint taken here resumes at the *next* epoch
            state.epoch = epoch + 1
            if ckpt_dir is not None and config.checkpoint_every_epochs and \
                    (epoch + 1) % config.checkpoint_every_epochs == 0:
                path = ckpt_dir / f"epoch{epoch:04d}.ckpt"
                state.save(path)
                checkpoint_paths.append(path)
            if done:
                break
        if ckpt_dir is not None:
            final = ckpt_dir / "final.ckpt"
            state.save(final)
            checkpoint_paths.append(final)
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(
        loss_log=log_rows,
        run_dir=run_dir,
        log_path=log_path,
        checkpoint_paths=checkpoint_paths,
        state=state,
    )
