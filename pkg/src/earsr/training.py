"""Cycle-consistency adversarial training over unpaired patch streams.

Each step alternates one discriminator update and one generator update.
The generator objective is lambda_rec * L_rec + lambda_adv * L_adv where
L_rec is the two-way L1 cycle reconstruction and L_adv the two-domain GAN
term; discriminators maximize log-likelihood of real/fake separation.
All randomness (weight init, data order, dropout masks) derives from the
config seed, so runs replay bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NonFiniteLoss, ShapeError
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    ModelBundle,
    build_bundle,
    derive_seed,
    load_checkpoint,
    save_checkpoint,
)

LOG_PROB_FLOOR = 1e-7

# Seed stream tags; bundle init uses 0..3 inside build_bundle.
_STREAM_DATA_L = 201
_STREAM_DATA_H = 202
_STREAM_DROPOUT_GL = 301
_STREAM_DROPOUT_GH = 302


@dataclass
class TrainConfig:
    lambda_rec: float = 10.0
    lambda_adv: float = 1.0
    batch_size: int = 5
    learning_rate: float = 1e-4
    epochs: int = 50
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 200
    max_steps: int | None = None  # cap on total steps, for toy runs
    non_saturating: bool = False
    dtype: str = "float64"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def validate(self):
        if min(self.lambda_rec, self.lambda_adv) < 0 or not all(
            math.isfinite(v) for v in (self.lambda_rec, self.lambda_adv)
        ):
            raise ValueError(f"lambda weights must be finite and >= 0: {self}")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError(f"batch size, learning rate, epochs out of range: {self}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        self.generator.validate()
        self.discriminator.validate()

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class LossReport:
    step: int
    l_rec: float
    l_adv_g: float
    l_adv_d: float
    l_total: float

    def as_json(self) -> str:
        return json.dumps(asdict(self))


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=LOG_PROB_FLOOR))


def _check_batch(x: torch.Tensor, y: torch.Tensor):
    if x.ndim != 4 or y.ndim != 4 or x.shape[0] == 0 or y.shape[0] == 0:
        raise ShapeError(f"batches must be non-empty (B,1,H,W), got {x.shape} / {y.shape}")
    if x.shape[1:] != y.shape[1:]:
        raise ShapeError(f"domain batches must share patch shape, got {x.shape} / {y.shape}")


def cycle_loss(x_batch: torch.Tensor, y_batch: torch.Tensor, bundle: ModelBundle,
               fake_h: torch.Tensor | None = None,
               fake_l: torch.Tensor | None = None) -> torch.Tensor:
    """Two-way L1 self-reconstruction: |x - G_H(G_L(x))| + |y - G_L(G_H(y))|."""
    _check_batch(x_batch, y_batch)
    if fake_h is None:
        fake_h = bundle.g_l(x_batch)
    if fake_l is None:
        fake_l = bundle.g_h(y_batch)
    rec_x = bundle.g_h(fake_h)
    rec_y = bundle.g_l(fake_l)
    return (x_batch - rec_x).abs().mean() + (y_batch - rec_y).abs().mean()


def adversarial_losses(
    x_batch: torch.Tensor,
    y_batch: torch.Tensor,
    bundle: ModelBundle,
    non_saturating: bool = False,
    fake_h: torch.Tensor | None = None,
    fake_l: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-domain GAN objective with probability-floor-clamped logs.

    Returns (generator loss, discriminator loss), both to be minimized.
    The discriminator loss is the negated real/fake log-likelihood; the
    generator term is the minimax form log(1 - D(G(.))) by default, or
    -log D(G(.)) when ``non_saturating`` is set. Per-patch discriminator
    maps contribute through the mean of their per-cell log terms.
    """
    _check_batch(x_batch, y_batch)
    if fake_h is None:
        fake_h = bundle.g_l(x_batch)
    if fake_l is None:
        fake_l = bundle.g_h(y_batch)

    real_term = _clamped_log(bundle.d_l(x_batch)).mean() + _clamped_log(bundle.d_h(y_batch)).mean()
    fake_term = (
        _clamped_log(1.0 - bundle.d_h(fake_h.detach())).mean()
        + _clamped_log(1.0 - bundle.d_l(fake_l.detach())).mean()
    )
    disc_loss = -(real_term + fake_term)

    if non_saturating:
        gen_loss = -(
            _clamped_log(bundle.d_h(fake_h)).mean() + _clamped_log(bundle.d_l(fake_l)).mean()
        )
    else:
        gen_loss = (
            _clamped_log(1.0 - bundle.d_h(fake_h)).mean()
            + _clamped_log(1.0 - bundle.d_l(fake_l)).mean()
        )

    if not (torch.isfinite(gen_loss) and torch.isfinite(disc_loss)):
        raise NonFiniteLoss("adversarial term is not finite after clamping")
    return gen_loss, disc_loss


def _as_patch_stack(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        stack = data
    else:
        stack = np.stack([getattr(p, "data", p) for p in data])
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise ShapeError(f"patch stream must be a non-empty (N,H,W) stack, got {stack.shape}")
    return stack


def _sample_batch(stack: np.ndarray, rng: np.random.Generator, batch_size: int,
                  dtype: torch.dtype) -> torch.Tensor:
    idx = rng.integers(0, stack.shape[0], size=batch_size)
    batch = torch.from_numpy(stack[idx]).unsqueeze(1)
    return batch.to(dtype)


def _set_train_dropout(model: Generator, generator: torch.Generator):
    for m in model.dropout_modules():
        m.generator = generator


def train(
    data_l,
    data_h,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[ModelBundle, list[LossReport]]:
    """Run the adversarial training loop over two unpaired patch streams.

    ``data_l`` / ``data_h`` are (N,H,W) stacks or lists of patches, sampled
    independently each step. When ``out_dir`` is given, loss reports are
    appended to ``losses.ndjson`` and checkpoints written every
    ``checkpoint_every`` steps plus at the end; a non-finite loss aborts
    with the last good checkpoint left in place.
    """
    cfg.validate()
    dtype = cfg.torch_dtype()
    stack_l = _as_patch_stack(data_l)
    stack_h = _as_patch_stack(data_h)
    if stack_l.shape[1:] != stack_h.shape[1:]:
        raise ShapeError(
            f"domains must share patch dims, got {stack_l.shape[1:]} vs {stack_h.shape[1:]}"
        )

    start_step = 0
    if resume is not None:
        bundle, manifest = load_checkpoint(resume, dtype)
        start_step = int(manifest.get("step", 0))
    else:
        bundle = build_bundle(cfg.generator, cfg.discriminator, seed=cfg.seed).to(dtype)

    _set_train_dropout(bundle.g_l, torch.Generator().manual_seed(derive_seed(cfg.seed, _STREAM_DROPOUT_GL)))
    _set_train_dropout(bundle.g_h, torch.Generator().manual_seed(derive_seed(cfg.seed, _STREAM_DROPOUT_GH)))
    rng_l = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, _STREAM_DATA_L)))
    rng_h = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, _STREAM_DATA_H)))

    gen_params = [p for m in bundle.generators() for p in m.parameters()]
    disc_params = [p for m in bundle.discriminators() for p in m.parameters()]
    opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc_params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))

    steps_per_epoch = math.ceil(max(stack_l.shape[0], stack_h.shape[0]) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    report_path = ckpt_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "losses.ndjson"
        ckpt_path = out_dir / "checkpoint.zip"
        extra = {"lambda_rec": cfg.lambda_rec, "lambda_adv": cfg.lambda_adv,
                 "train_config": _jsonable_cfg(cfg)}
        save_checkpoint(bundle, ckpt_path, step=start_step, extra=extra)

    reports: list[LossReport] = []
    for m in [*bundle.generators(), *bundle.discriminators()]:
        m.train()

    for step in range(start_step + 1, start_step + total_steps + 1):
        x = _sample_batch(stack_l, rng_l, cfg.batch_size, dtype)
        y = _sample_batch(stack_h, rng_h, cfg.batch_size, dtype)

        # Discriminator half-step: fakes detached, generators untouched.
        with torch.no_grad():
            fake_h = bundle.g_l(x)
            fake_l = bundle.g_h(y)
        _, d_loss = adversarial_losses(x, y, bundle, cfg.non_saturating, fake_h, fake_l)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # Generator half-step on fresh graphs.
        fake_h = bundle.g_l(x)
        fake_l = bundle.g_h(y)
        g_adv, _ = adversarial_losses(x, y, bundle, cfg.non_saturating, fake_h, fake_l)
        rec = cycle_loss(x, y, bundle, fake_h, fake_l)
        g_total = cfg.lambda_rec * rec + cfg.lambda_adv * g_adv
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        l_rec = float(rec.detach())
        l_adv_g = float(g_adv.detach())
        l_adv_d = float(d_loss.detach())
        l_total = cfg.lambda_rec * l_rec + cfg.lambda_adv * l_adv_g
        if not all(math.isfinite(v) for v in (l_rec, l_adv_g, l_adv_d, l_total)):
            raise NonFiniteLoss(f"training diverged at step {step}")
        report = LossReport(step, l_rec, l_adv_g, l_adv_d, l_total)
        reports.append(report)
        if report_path is not None:
            with report_path.open("a") as fh:
                fh.write(report.as_json() + "\n")
        if ckpt_path is not None and step % cfg.checkpoint_every == 0:
            _write_checkpoint(bundle, ckpt_path, step, cfg)

    if ckpt_path is not None and total_steps > 0:
        _write_checkpoint(bundle, ckpt_path, start_step + total_steps, cfg)
    return bundle, reports


def _jsonable_cfg(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def _write_checkpoint(bundle: ModelBundle, path: Path, step: int, cfg: TrainConfig):
    extra = {"lambda_rec": cfg.lambda_rec, "lambda_adv": cfg.lambda_adv,
             "train_config": _jsonable_cfg(cfg)}
    save_checkpoint(bundle, path, step=step, extra=extra)
