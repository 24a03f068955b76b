"""Training stages and their configuration.

Stage 0 trains the toy generative prior (latent autoencoder, then the
epsilon U-Net). Stage 1 optimizes encoder, hyperprior, gain units and the
auxiliary decoder on the rate plus MS-SSIM pretext objective. Stage 2 trains
only the adapter and fusion against the frozen codec and prior. A prior swap
re-runs stage 2, warm-started, against a second prior.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .adapter_fusion import ConditionedDenoiser
from .checkpoints import (
    ADAPTER_FILE,
    AUX_FILE,
    CODEC_FILE,
    PRIOR_FILE,
    file_checksum,
    load_into,
    save_module,
    state_checksum,
)
from .codec_core import (
    NUM_RATE_LEVELS,
    TOY_LAMBDAS,
    AuxDecoder,
    VariableRateCodec,
    bits_of,
    gaussian_likelihood,
    pretext_loss,
)
from .corpus import ToyCorpus
from .diffusion_prior import DiffusionPrior, forward_noise
from .entropy_coding import SYMBOL_HI, SYMBOL_LO
from .errors import MissingCheckpointError
from .metrics import ms_ssim
from .pipeline import load_codec, load_prior

log = logging.getLogger(__name__)

STAGES = ("prior", "pretext", "adapter", "swap", "ablation", "all")
LEVEL_SCHEDULES = ("per_step", "per_image")
METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    """Non-finite loss; the last good parameters were written before raising."""


class FrozenModuleError(RuntimeError):
    """A module that must stay fixed changed during training."""


@dataclass
class TrainConfig:
    """Declarative training configuration (loadable from YAML).

    Epoch counts are passes over ``n_train`` images; a stage with 0 epochs is
    skipped. Learning rates must be positive.
    """

    stage: str = "all"
    out_dir: str = "checkpoints"
    corpus_dir: Optional[str] = None
    style: str = "shapes"
    seed: int = 0
    n_train: int = 2000
    n_test: int = 100
    image_size: int = 64
    deterministic: bool = False
    # stage 0
    ae_epochs: int = 20
    ae_batch: int = 32
    ae_lr: float = 1e-4
    unet_epochs: int = 40
    unet_batch: int = 32
    unet_lr: float = 1e-4
    # stage 1
    pretext_epochs: int = 30
    pretext_batch: int = 8
    pretext_lr: float = 1e-4
    pretext_crop: Optional[int] = None
    level_schedule: str = "per_step"
    lambdas: list = field(default_factory=lambda: list(TOY_LAMBDAS))
    # stage 2
    adapter_epochs: int = 10
    adapter_batch: int = 16
    adapter_lr: float = 1e-4
    fusion_mode: str = "attentive"
    adapter_file: str = ADAPTER_FILE
    adapter_init: Optional[str] = None
    # prior swap
    swap_style: str = "blobs"
    swap_prior_epochs: int = 10
    swap_prior_file: str = "prior_swap.safetensors"
    swap_adapter_file: str = "adapter_swap.safetensors"
    swap_fraction: float = 0.25
    swap_scratch_file: Optional[str] = "adapter_swap_scratch.safetensors"
    # fusion ablation
    additive_adapter_file: str = "adapter_additive.safetensors"
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.level_schedule not in LEVEL_SCHEDULES:
            raise ValueError(f"unknown level schedule {self.level_schedule!r}")
        for name in ("ae_lr", "unet_lr", "pretext_lr", "adapter_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if len(self.lambdas) != NUM_RATE_LEVELS or any(a <= b for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError(f"lambdas must be {NUM_RATE_LEVELS} strictly decreasing values")
        if not 0 < self.swap_fraction <= 1:
            raise ValueError("swap_fraction must lie in (0, 1]")

    @classmethod
    def from_yaml(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def corpus(self, style: Optional[str] = None) -> ToyCorpus:
        return ToyCorpus(self.seed, self.n_train, self.n_test, self.image_size,
                         style or self.style, self.corpus_dir)


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def _check_finite(loss: torch.Tensor, on_diverge, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        path = on_diverge()
        raise TrainingDiverged(f"{stage}: non-finite loss at step {step}; last good parameters in {path}")


def _steps(epochs: int, n: int, batch: int) -> tuple[int, int]:
    per_epoch = max(n // batch, 1)
    return epochs * per_epoch, per_epoch


def _random_crop(x: np.ndarray, size: int, rng) -> np.ndarray:
    h, w = x.shape[-2:]
    i, j = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
    return x[..., i:i + size, j:j + size]


# stage 0 --------------------------------------------------------------------


def train_prior(cfg: TrainConfig, style: Optional[str] = None, init: Optional[str] = None,
                path: Optional[Path] = None, train_autoencoder: bool = True) -> Path:
    """Train (or fine-tune from ``init``) the toy latent diffusion prior."""
    rng = seed_everything(cfg.seed, cfg.deterministic)
    corpus = cfg.corpus(style)
    metrics = MetricsLog(cfg.out / METRICS_FILE)
    path = path or cfg.out / PRIOR_FILE
    prior = DiffusionPrior()
    if init is not None:
        load_into(prior, init, "prior")
    schedule = prior.schedule

    def save(extra=None):
        save_module(prior, path, "prior", prior.config, {"style": style or cfg.style, **(extra or {})})
        return path

    ae = prior.autoencoder
    if train_autoencoder and cfg.ae_epochs:
        opt = torch.optim.Adam(ae.parameters(), lr=cfg.ae_lr)
        total, per_epoch = _steps(cfg.ae_epochs, len(corpus.train), cfg.ae_batch)
        batches = corpus.batches(cfg.ae_batch, rng)
        ae.latent_scale.fill_(1.0)
        for step in range(1, total + 1):
            x = torch.from_numpy(next(batches))
            rec = ae.decode(ae.enc(x), clamp=False)
            loss = F.l1_loss(rec, x) + 0.2 * (1 - ms_ssim(x, rec.clamp(0, 1))).mean()
            _check_finite(loss, save, "autoencoder", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % per_epoch == 0:
                metrics.write(stage="prior_ae", epoch=step // per_epoch, step=step, loss=loss.item())
            if step % cfg.log_every == 0:
                log.info("autoencoder step %d/%d loss %.4f", step, total, loss.item())
        with torch.no_grad():
            z = ae.enc(torch.from_numpy(corpus.train[:512]))
            ae.latent_scale.fill_(1.0 / z.std().item())

    with torch.no_grad():
        z0_all = torch.cat([ae.encode(torch.from_numpy(corpus.train[i:i + 256]))
                            for i in range(0, len(corpus.train), 256)])
    unet = prior.unet
    ae.requires_grad_(False)
    opt = torch.optim.Adam(unet.parameters(), lr=cfg.unet_lr)
    total, per_epoch = _steps(cfg.unet_epochs, len(z0_all), cfg.unet_batch)
    gen = torch.Generator().manual_seed(cfg.seed)
    running = []
    for step in range(1, total + 1):
        idx = torch.from_numpy(rng.integers(0, len(z0_all), cfg.unet_batch))
        z0 = z0_all[idx]
        t = torch.randint(1, schedule.T + 1, (len(z0),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = F.mse_loss(unet(forward_noise(schedule, z0, t.numpy(), eps), t), eps)
        _check_finite(loss, save, "unet", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        running.append(loss.item())
        if step % per_epoch == 0:
            metrics.write(stage="prior_unet", epoch=step // per_epoch, step=step,
                          loss=float(np.mean(running)))
            running = []
        if step % cfg.log_every == 0:
            log.info("unet step %d/%d loss %.4f", step, total, loss.item())
    ae.requires_grad_(True)
    return save()


# stage 1 --------------------------------------------------------------------


@torch.no_grad()
def evaluate_pretext(codec: VariableRateCodec, aux: AuxDecoder, images: np.ndarray,
                     batch: int = 50) -> list[dict]:
    """Hard-quantized estimated bpp and aux-decoder MS-SSIM per rate level."""
    rows = []
    pixels = images.shape[-1] * images.shape[-2]
    for s in range(codec.levels):
        bpp, quality = [], []
        for i in range(0, len(images), batch):
            x = torch.from_numpy(images[i:i + batch])
            ys = codec.analysis(x, s)
            y_q = ys.round().clamp(SYMBOL_LO, SYMBOL_HI)
            z_q = codec.hyper_encoder(ys).round().clamp(SYMBOL_LO, SYMBOL_HI)
            means, scales = codec.hyper_decoder(z_q)
            bits = bits_of(gaussian_likelihood(y_q, means, scales, fold_tails=True))
            bits = bits + bits_of(gaussian_likelihood(z_q, *codec.z_prior.params(z_q), fold_tails=True))
            bpp.append((bits / pixels).numpy())
            rec = aux(y_q * codec.gains.inverse_gain(s)).clamp(0, 1)
            quality.append(ms_ssim(x, rec).numpy())
        rows.append({"rate_level": s, "bpp": float(np.concatenate(bpp).mean()),
                     "ms_ssim": float(np.concatenate(quality).mean())})
    return rows


def train_pretext(cfg: TrainConfig, steps: Optional[int] = None) -> tuple[Path, Path, list[float]]:
    """Stage 1. Returns the codec and aux-decoder paths and the per-step loss trace.

    ``steps`` overrides the epoch-derived step count (used by smoke tests).
    """
    rng = seed_everything(cfg.seed, cfg.deterministic)
    corpus = cfg.corpus()
    metrics = MetricsLog(cfg.out / METRICS_FILE)
    codec, aux = VariableRateCodec(), AuxDecoder()
    params = list(codec.parameters()) + list(aux.parameters())
    opt = torch.optim.Adam(params, lr=cfg.pretext_lr)
    total, per_epoch = _steps(cfg.pretext_epochs, len(corpus.train), cfg.pretext_batch)
    total = steps if steps is not None else total
    codec_path, aux_path = cfg.out / CODEC_FILE, cfg.out / AUX_FILE

    def save():
        save_module(codec, codec_path, "codec", codec.config)
        save_module(aux, aux_path, "aux_decoder")
        return codec_path

    batches = corpus.batches(cfg.pretext_batch, rng)
    trace = []
    t0 = time.time()
    for step in range(1, total + 1):
        x = next(batches)
        if cfg.pretext_crop:
            x = _random_crop(x, cfg.pretext_crop, rng)
        x = torch.from_numpy(np.ascontiguousarray(x))
        if cfg.level_schedule == "per_step":
            s = int(rng.integers(0, NUM_RATE_LEVELS))
        else:
            s = torch.from_numpy(rng.integers(0, NUM_RATE_LEVELS, len(x)))
        loss, stats = pretext_loss(codec, aux, x, s, cfg.lambdas)
        _check_finite(loss, save, "pretext", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if step % cfg.log_every == 0:
            log.info("pretext step %d/%d loss %.4f bpp %.3f ms-ssim %.4f (%.0fs)", step, total,
                     loss.item(), stats["bpp"], stats["ms_ssim"], time.time() - t0)
        if step % per_epoch == 0 or step == total:
            epoch = -(-step // per_epoch)
            for row in evaluate_pretext(codec.eval(), aux.eval(), corpus.test):
                metrics.write(stage="pretext", epoch=epoch, step=step, **row)
            codec.train()
            aux.train()
            save()
    save()
    return codec_path, aux_path, trace


# stage 2 --------------------------------------------------------------------


@torch.no_grad()
def codec_latents(codec: VariableRateCodec, images: np.ndarray, batch: int = 100) -> torch.Tensor:
    """Unscaled encoder output ``E(x)``; rate-level independent."""
    return torch.cat([codec.encoder(torch.from_numpy(images[i:i + batch]).clamp(0, 1))
                      for i in range(0, len(images), batch)])


def quantized_latent(codec: VariableRateCodec, y: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
    """The decoder-side ``y_hat`` for raw latents at per-image rate levels."""
    with torch.no_grad():
        y_q = (y * codec.gains.gain(levels)).round().clamp(SYMBOL_LO, SYMBOL_HI)
        return y_q * codec.gains.inverse_gain(levels)


@torch.no_grad()
def denoising_loss(prior: DiffusionPrior, denoiser: Optional[ConditionedDenoiser], y_hat: torch.Tensor,
                   z0: torch.Tensor, seed: int = 1234, draws: int = 4) -> float:
    """Mean held-out epsilon MSE over fixed ``(t, eps)`` draws; ``denoiser=None`` is unconditioned."""
    gen = torch.Generator().manual_seed(seed)
    schedule = prior.schedule
    losses = []
    for _ in range(draws):
        t = torch.randint(1, schedule.T + 1, (len(z0),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_noise(schedule, z0, t.numpy(), eps)
        if denoiser is None:
            pred = prior.unet(z_t, t)
        else:
            pred = denoiser.eps(prior.unet, z_t, t, denoiser.adapt(y_hat))
        losses.append(F.mse_loss(pred, eps).item())
    return float(np.mean(losses))


def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise MissingCheckpointError(f"stage 2 needs {p}; train the earlier stages first")


def train_adapter(cfg: TrainConfig, prior_path: Optional[Path] = None, out_path: Optional[Path] = None,
                  init: Optional[str] = None, steps: Optional[int] = None, tag: str = "adapter") -> Path:
    """Stage 2: fit adapter + fusion; codec and prior are frozen and checksum-verified."""
    rng = seed_everything(cfg.seed, cfg.deterministic)
    codec_path = cfg.out / CODEC_FILE
    prior_path = Path(prior_path or cfg.out / PRIOR_FILE)
    out_path = Path(out_path or cfg.out / cfg.adapter_file)
    _require(codec_path, prior_path)
    frozen_files = {p: file_checksum(p) for p in (codec_path, prior_path)}
    codec, prior = load_codec(codec_path), load_prior(prior_path)
    codec.requires_grad_(False)
    prior.requires_grad_(False)
    frozen_states = {"codec": state_checksum(codec), "prior": state_checksum(prior)}

    corpus = cfg.corpus()
    metrics = MetricsLog(cfg.out / METRICS_FILE)
    schedule = prior.schedule
    side = cfg.image_size // 8
    denoiser = ConditionedDenoiser(prior.unet.tap_shapes(side, side), cfg.fusion_mode,
                                   codec.config["latent"], cfg.image_size // 4)
    init = init or cfg.adapter_init
    if init is not None:
        load_into(denoiser, init, "adapter")

    y_all = codec_latents(codec, corpus.train)
    with torch.no_grad():
        z0_all = torch.cat([prior.autoencoder.encode(torch.from_numpy(corpus.train[i:i + 256]))
                            for i in range(0, len(corpus.train), 256)])
        y_test = codec_latents(codec, corpus.test)
        z0_test = prior.autoencoder.encode(torch.from_numpy(corpus.test))
    test_levels = torch.arange(len(y_test)) % NUM_RATE_LEVELS
    y_hat_test = quantized_latent(codec, y_test, test_levels)

    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.adapter_lr)
    total, per_epoch = _steps(cfg.adapter_epochs, len(y_all), cfg.adapter_batch)
    total = steps if steps is not None else total
    gen = torch.Generator().manual_seed(cfg.seed)

    def save():
        save_module(denoiser, out_path, "adapter", denoiser.config, {
            "prior_checksum": state_checksum(prior),
            "codec_checksum": frozen_states["codec"],
            "prior_file": prior_path.name,
        })
        return out_path

    metrics.write(stage=tag, epoch=0, step=0, held_out_loss=denoising_loss(prior, denoiser, y_hat_test, z0_test))
    running = []
    for step in range(1, total + 1):
        idx = torch.from_numpy(rng.integers(0, len(y_all), cfg.adapter_batch))
        levels = torch.from_numpy(rng.integers(0, NUM_RATE_LEVELS, cfg.adapter_batch))
        y_hat = quantized_latent(codec, y_all[idx], levels)
        z0 = z0_all[idx]
        t = torch.randint(1, schedule.T + 1, (len(z0),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_noise(schedule, z0, t.numpy(), eps)
        pred = denoiser.eps(prior.unet, z_t, t, denoiser.adapt(y_hat))
        loss = F.mse_loss(pred, eps)
        _check_finite(loss, save, tag, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        running.append(loss.item())
        if step % cfg.log_every == 0:
            log.info("%s step %d/%d loss %.4f", tag, step, total, float(np.mean(running[-cfg.log_every:])))
        if step % per_epoch == 0 or step == total:
            metrics.write(stage=tag, epoch=-(-step // per_epoch), step=step,
                          loss=float(np.mean(running)),
                          held_out_loss=denoising_loss(prior, denoiser, y_hat_test, z0_test))
            running = []

    if state_checksum(codec) != frozen_states["codec"] or state_checksum(prior) != frozen_states["prior"]:
        raise FrozenModuleError("frozen codec or prior parameters changed during adapter training")
    for p, digest in frozen_files.items():
        if file_checksum(p) != digest:
            raise FrozenModuleError(f"{p} changed on disk during adapter training")
    return save()


def swap_prior(cfg: TrainConfig, new_prior: Optional[Path] = None) -> Path:
    """Retrain only adapter + fusion for another prior, warm-started from the current adapter.

    If ``new_prior`` is not given, a second prior is produced by fine-tuning
    the current one on the ``swap_style`` corpus. The fine-tune budget is
    ``swap_fraction`` of a full stage-2 run.
    """
    base_prior = cfg.out / PRIOR_FILE
    adapter = cfg.out / cfg.adapter_file
    _require(cfg.out / CODEC_FILE, base_prior, adapter)
    if new_prior is None:
        new_prior = cfg.out / cfg.swap_prior_file
        if not new_prior.exists():
            tuned = dataclasses.replace(cfg, unet_epochs=cfg.swap_prior_epochs)
            train_prior(tuned, style=cfg.swap_style, init=str(base_prior), path=new_prior,
                        train_autoencoder=False)
    codec_digest = file_checksum(cfg.out / CODEC_FILE)
    full, _ = _steps(cfg.adapter_epochs, cfg.n_train, cfg.adapter_batch)
    out = train_adapter(cfg, prior_path=new_prior, out_path=cfg.out / cfg.swap_adapter_file,
                        init=str(adapter), steps=max(1, int(full * cfg.swap_fraction)), tag="swap_adapter")
    if file_checksum(cfg.out / CODEC_FILE) != codec_digest:
        raise FrozenModuleError("encoder checkpoint changed during the prior swap")
    return out


def run(cfg: TrainConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    with (cfg.out / "train_config.yaml").open("w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    stages = STAGES[:-1] if cfg.stage == "all" else (cfg.stage,)
    for stage in stages:
        log.info("stage %s", stage)
        if stage == "prior":
            train_prior(cfg)
        elif stage == "pretext":
            train_pretext(cfg)
        elif stage == "adapter":
            train_adapter(cfg)
        elif stage == "swap":
            swap_prior(cfg)
            if cfg.swap_scratch_file:
                # reference run for the warm-start budget comparison
                train_adapter(cfg, prior_path=cfg.out / cfg.swap_prior_file,
                              out_path=cfg.out / cfg.swap_scratch_file, tag="swap_scratch")
        else:
            additive = dataclasses.replace(cfg, fusion_mode="additive")
            train_adapter(additive, out_path=cfg.out / cfg.additive_adapter_file, tag="adapter_additive")
