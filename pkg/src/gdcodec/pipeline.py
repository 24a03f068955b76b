"""End-to-end generative codec: image -> byte stream -> image.

Encoding runs the variable-rate encoder, range-codes the hyper-latent and
the main latent, measures block renormalization targets and packs it all
into a :mod:`bitstream` record. Decoding reverses the entropy coding, feeds
the dequantized latent to the adapter and runs deterministic DDIM sampling
in the frozen prior, then decodes and renormalizes the result.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import bitstream
from .adapter_fusion import ConditionedDenoiser
from .checkpoints import (
    ADAPTER_FILE,
    CODEC_FILE,
    PRIOR_FILE,
    load_into,
    read_metadata,
    state_checksum,
)
from .codec_core import CompressedLatent, VariableRateCodec, check_image
from .diffusion_prior import DiffusionPrior, ddim_sample, initial_noise
from .entropy_coding import SYMBOL_LO, RangeDecoder, RangeEncoder, build_cdfs
from .errors import AdapterMismatchError, InvalidHeaderError, RenormFormatError
from .fidelity_renorm import (
    DEFAULT_BLOCK,
    RenormParams,
    apply_renorm,
    compute_params,
    deserialize_params,
    grid_shape,
    serialize_params,
)

DIM_MULTIPLE = 16
PRIOR_MULTIPLE = 32  # prior latent (H/8) must halve twice inside the U-Net; pad up to it
DEFAULT_MAX_DIM = 1024
CHUNK = 16384  # symbols per CDF batch; bounds table memory on large images


def model_checksum(codec: VariableRateCodec, prior: DiffusionPrior,
                   denoiser: Optional[ConditionedDenoiser]) -> bytes:
    """8-byte identity of every module the decoder depends on."""
    h = hashlib.sha256()
    for m in (codec, prior, denoiser):
        h.update(b"none" if m is None else state_checksum(m).encode())
    return h.digest()[:8]


def load_codec(path) -> VariableRateCodec:
    meta = read_metadata(path)
    codec = VariableRateCodec(**meta["config"])
    load_into(codec, path, "codec")
    return codec.eval()


def load_prior(path) -> DiffusionPrior:
    meta = read_metadata(path)
    prior = DiffusionPrior(**meta["config"])
    load_into(prior, path, "prior")
    return prior.eval()


def load_denoiser(path, prior: Optional[DiffusionPrior] = None) -> ConditionedDenoiser:
    """Load adapter + fusion; refuse it if it was tuned against another prior."""
    meta = read_metadata(path)
    cfg = dict(meta["config"])
    cfg["tap_shapes"] = [tuple(s) for s in cfg["tap_shapes"]]
    denoiser = ConditionedDenoiser(**cfg)
    load_into(denoiser, path, "adapter")
    if prior is not None and "prior_checksum" in meta:
        actual = state_checksum(prior)
        if meta["prior_checksum"] != actual:
            raise AdapterMismatchError(
                f"{path} was trained against prior {meta['prior_checksum'][:16]}, "
                f"loaded prior is {actual[:16]}"
            )
    return denoiser.eval()


@dataclass
class ParsedStream:
    stream: bitstream.CodedStream
    latent: CompressedLatent
    renorm: RenormParams


class GenerativeCodec:
    """Bundle of the frozen codec, the frozen prior and the trained adapter.

    Args:
        codec: Encoder, hyperprior and gain units.
        prior: Latent autoencoder, U-Net and noise schedule.
        denoiser: Adapter and fusion; ``None`` allows only unconditioned decoding.
        block_size: Renormalization block size in pixels.
        steps: Default number of DDIM steps.
        max_dim: Largest width or height the decoder accepts.
    """

    def __init__(self, codec: VariableRateCodec, prior: DiffusionPrior,
                 denoiser: Optional[ConditionedDenoiser] = None, block_size: int = DEFAULT_BLOCK,
                 steps: int = 10, max_dim: int = DEFAULT_MAX_DIM):
        self.codec = codec.eval()
        self.prior = prior.eval()
        self.denoiser = None if denoiser is None else denoiser.eval()
        self.block_size = block_size
        self.steps = steps
        self.max_dim = max_dim
        self.checksum = model_checksum(self.codec, self.prior, self.denoiser)

    @classmethod
    def load(cls, ckpt_dir, adapter: Optional[str] = None, prior: Optional[str] = None, **kwargs):
        """Load from a checkpoint directory; ``adapter``/``prior`` override the file names."""
        ckpt_dir = Path(ckpt_dir)
        codec = load_codec(ckpt_dir / CODEC_FILE)
        prior_model = load_prior(ckpt_dir / (prior or PRIOR_FILE))
        denoiser = load_denoiser(ckpt_dir / (adapter or ADAPTER_FILE), prior_model)
        return cls(codec, prior_model, denoiser, **kwargs)

    # encoding -----------------------------------------------------------

    def _check_size(self, height: int, width: int, error=ValueError) -> None:
        if height % DIM_MULTIPLE or width % DIM_MULTIPLE or not height or not width:
            raise error(f"image size {height}x{width} must be a positive multiple of {DIM_MULTIPLE}")
        if max(height, width) > self.max_dim:
            raise error(f"image size {height}x{width} exceeds the decoder limit of {self.max_dim}")

    def entropy_encode(self, lat: CompressedLatent) -> tuple[bytes, bytes]:
        zm, zs = self.codec.hyper_params(lat.z_q.shape)
        enc = RangeEncoder()
        enc.encode(lat.z_q.reshape(-1), (build_cdfs(zm.reshape(-1), zs.reshape(-1)), SYMBOL_LO))
        hyper = enc.finish()
        ym, ys = self.codec.main_params(lat.z_q)
        ym, ys, sym = ym.reshape(-1), ys.reshape(-1), lat.y_q.reshape(-1)
        enc = RangeEncoder()
        for start in range(0, len(sym), CHUNK):
            sl = slice(start, start + CHUNK)
            enc.encode(sym[sl], (build_cdfs(ym[sl], ys[sl]), SYMBOL_LO))
        return hyper, enc.finish()

    def entropy_decode(self, hyper: bytes, main: bytes, height: int, width: int,
                       rate_level: int) -> CompressedLatent:
        c_y = self.codec.config["latent"]
        c_z = self.codec.config["hyper"]
        z_shape = (c_z, height // 16, width // 16)
        zm, zs = self.codec.hyper_params(z_shape)
        z_q = RangeDecoder(hyper).decode((build_cdfs(zm.reshape(-1), zs.reshape(-1)), SYMBOL_LO))
        z_q = z_q.reshape(z_shape)
        ym, ys = self.codec.main_params(z_q)
        ym, ys = ym.reshape(-1), ys.reshape(-1)
        dec = RangeDecoder(main)
        parts = [dec.decode((build_cdfs(ym[s:s + CHUNK], ys[s:s + CHUNK]), SYMBOL_LO))
                 for s in range(0, len(ym), CHUNK)]
        y_q = np.concatenate(parts).reshape(c_y, height // 4, width // 4)
        return CompressedLatent(y_q.astype(np.int64), z_q.astype(np.int64), rate_level)

    def encode_stream(self, x: torch.Tensor, rate_level: int, seed: int = 0) -> bitstream.CodedStream:
        check_image(x)
        if x.dim() == 4:
            if x.shape[0] != 1:
                raise ValueError("encode takes a single image")
            x = x[0]
        height, width = x.shape[-2:]
        self._check_size(height, width)
        lat = self.codec.encode_latent(x, rate_level)
        hyper, main = self.entropy_encode(lat)
        renorm = serialize_params(compute_params(x.clamp(0, 1), self.block_size))
        return bitstream.CodedStream(width, height, rate_level, int(seed), self.checksum,
                                     renorm, hyper, main)

    def encode(self, x: torch.Tensor, rate_level: int, seed: int = 0) -> bytes:
        return bitstream.pack(self.encode_stream(x, rate_level, seed))

    # decoding -----------------------------------------------------------

    def parse(self, data: bytes) -> ParsedStream:
        """Validate a stream against this model and recover latents and renorm targets."""
        stream = bitstream.unpack(data, expected_checksum=self.checksum)
        self._check_size(stream.height, stream.width, InvalidHeaderError)
        params = deserialize_params(stream.renorm)
        if params.grid != grid_shape(stream.height, stream.width, params.block_size):
            raise RenormFormatError(
                f"renorm grid {params.grid} does not cover a {stream.height}x{stream.width} image "
                f"with block {params.block_size}"
            )
        lat = self.entropy_decode(stream.hyper, stream.main, stream.height, stream.width,
                                  stream.rate_level)
        return ParsedStream(stream, lat, params)

    @torch.no_grad()
    def reconstruct(self, y_q: Sequence[np.ndarray] | torch.Tensor, rate_levels, seeds: Sequence[int],
                    steps: Optional[int] = None, use_adapter: bool = True,
                    sites: Optional[Sequence[int]] = None) -> torch.Tensor:
        """Batched generative decode (no renormalization) of same-size latents.

        Sizes that are not a multiple of 32 are decoded on a zero-padded
        latent and cropped. Returns images ``[N, 3, H, W]`` in ``[0, 1]``.
        """
        y_q = torch.as_tensor(np.stack(y_q) if not torch.is_tensor(y_q) else y_q)
        n, _, h, w = y_q.shape
        levels = torch.as_tensor(rate_levels).reshape(-1).expand(n)
        y_hat = self.codec.dequantize(y_q, levels)
        m = PRIOR_MULTIPLE // 4
        ph, pw = -h % m, -w % m
        if ph or pw:
            y_hat = torch.nn.functional.pad(y_hat, (0, pw, 0, ph))
        shape = self.prior.latent_shape((h + ph) * 4, (w + pw) * 4)
        z_init = torch.stack([initial_noise(s, shape) for s in seeds])
        unet = self.prior.unet
        if use_adapter:
            if self.denoiser is None:
                raise ValueError("no adapter loaded")
            control = self.denoiser.adapt(y_hat)

            def eps_fn(z, t):
                return self.denoiser.eps(unet, z, t, control, sites)
        else:
            def eps_fn(z, t):
                return unet(z, t)

        z0 = ddim_sample(eps_fn, self.prior.schedule, z_init.shape, seed=0,
                         steps=steps or self.steps, z_init=z_init)
        return self.prior.autoencoder.decode(z0)[..., :h * 4, :w * 4]

    def decode_parsed(self, parsed: ParsedStream, steps: Optional[int] = None, use_adapter: bool = True,
                      renorm: bool = True, sites: Optional[Sequence[int]] = None) -> np.ndarray:
        img = self.reconstruct([parsed.latent.y_q], parsed.latent.rate_level, [parsed.stream.seed],
                               steps, use_adapter, sites)[0]
        out = apply_renorm(img, parsed.renorm) if renorm else img.double().numpy()
        return out.astype(np.float32)

    def decode(self, data: bytes, steps: Optional[int] = None, use_adapter: bool = True,
               renorm: bool = True, sites: Optional[Sequence[int]] = None) -> np.ndarray:
        """Decode a stream to a ``[3, H, W]`` float32 image in ``[0, 1]``."""
        return self.decode_parsed(self.parse(data), steps, use_adapter, renorm, sites)
