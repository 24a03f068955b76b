import numpy as np
import pytest
import torch

from gdcodec import pipeline
from gdcodec.adapter_fusion import ConditionedDenoiser
from gdcodec.bitstream import HEADER_OVERHEAD, unpack
from gdcodec.checkpoints import ADAPTER_FILE, CODEC_FILE, PRIOR_FILE, save_module, state_checksum
from gdcodec.codec_core import VariableRateCodec
from gdcodec.corpus import synth_image
from gdcodec.diffusion_prior import DiffusionPrior
from gdcodec.errors import AdapterMismatchError, InvalidHeaderError, MissingCheckpointError
from gdcodec.pipeline import GenerativeCodec


def make_system(seed=0, **kw):
    torch.manual_seed(seed)
    codec = VariableRateCodec(width=8).eval()
    prior = DiffusionPrior().eval()
    denoiser = ConditionedDenoiser(prior.unet.tap_shapes(8, 8)).eval()
    with torch.no_grad():
        for site in denoiser.fusion.sites:
            torch.nn.init.normal_(site.proj.weight, std=0.05)
    return GenerativeCodec(codec, prior, denoiser, **kw)


@pytest.fixture(scope="module")
def system():
    return make_system()


def image(i, size=64):
    return torch.from_numpy(synth_image(2, i, size=size))


def test_encode_is_deterministic(system):
    x = image(0)
    assert system.encode(x, 4, seed=3) == system.encode(x, 4, seed=3)


def test_stream_fields_and_size(system):
    x = image(1)
    data = system.encode(x, 6, seed=11)
    stream = unpack(data)
    assert (stream.width, stream.height, stream.rate_level, stream.seed) == (64, 64, 6, 11)
    assert stream.checksum == system.checksum
    assert len(stream.renorm) == 5 + (4 * 4 * 3 * 2 * 6 + 7) // 8 == 77
    assert len(data) == HEADER_OVERHEAD + 77 + stream.payload_bytes


def test_parse_recovers_encoder_latent(system):
    x = image(2)
    for level in (0, 5, 9):
        lat = system.codec.encode_latent(x, level)
        parsed = system.parse(system.encode(x, level))
        assert np.array_equal(parsed.latent.y_q, lat.y_q)
        assert np.array_equal(parsed.latent.z_q, lat.z_q)
        assert parsed.latent.rate_level == level


def test_chunked_coding_matches_single_pass(system, monkeypatch):
    x = image(3)
    whole = system.encode(x, 2)
    monkeypatch.setattr(pipeline, "CHUNK", 1000)
    chunked = system.encode(x, 2)
    assert chunked == whole
    assert np.array_equal(system.parse(chunked).latent.y_q, system.codec.encode_latent(x, 2).y_q)


def test_decode_deterministic_and_seed_dependent(system):
    x = image(4)
    a = system.decode(system.encode(x, 3, seed=5), steps=2)
    b = system.decode(system.encode(x, 3, seed=5), steps=2)
    c = system.decode(system.encode(x, 3, seed=6), steps=2)
    assert a.shape == (3, 64, 64) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("height,width", [(16, 16), (48, 80), (32, 64)])
def test_sizes_not_multiple_of_prior_grid(system, height, width):
    x = torch.rand(3, height, width, generator=torch.Generator().manual_seed(height + width))
    out = system.decode(system.encode(x, 5), steps=1)
    assert out.shape == (3, height, width)


def test_batched_reconstruct_matches_single(system):
    parsed = [system.parse(system.encode(image(i), 4, seed=i)) for i in range(3)]
    batch = system.reconstruct([p.latent.y_q for p in parsed], 4, [0, 1, 2], steps=2)
    for i, p in enumerate(parsed):
        single = system.reconstruct([p.latent.y_q], 4, [i], steps=2)[0]
        assert torch.allclose(batch[i], single, atol=1e-4)  # float32 batch-order noise only


def test_adapter_changes_the_decode(system):
    data = system.encode(image(5), 4, seed=1)
    with_adapter = system.decode(data, steps=2, renorm=False)
    without = system.decode(data, steps=2, use_adapter=False, renorm=False)
    assert not np.allclose(with_adapter, without)


def test_renorm_moves_block_means_to_targets(system):
    x = image(6)
    data = system.encode(x, 0, seed=2)
    raw = system.decode(data, steps=2, renorm=False)
    fixed = system.decode(data, steps=2, renorm=True)

    def block_means(img):
        return img.reshape(3, 4, 16, 4, 16).mean(axis=(2, 4))

    target = block_means(x.numpy())
    assert np.abs(block_means(fixed) - target).mean() < np.abs(block_means(raw) - target).mean()


@pytest.mark.parametrize("shape", [(3, 64, 40), (3, 8, 8)])
def test_encode_rejects_bad_sizes(system, shape):
    with pytest.raises(ValueError):
        system.encode(torch.zeros(shape), 0)


def test_max_dim_enforced_on_both_sides():
    small = make_system(max_dim=32)
    with pytest.raises(ValueError):
        small.encode(torch.zeros(3, 64, 64), 0)
    data = make_system().encode(torch.zeros(3, 64, 64), 0)
    with pytest.raises(InvalidHeaderError):
        small.parse(data)


def test_checksum_covers_adapter(system):
    other = make_system()
    assert other.checksum == system.checksum
    with torch.no_grad():
        next(other.denoiser.adapter.parameters()).add_(1e-3)
    assert pipeline.model_checksum(other.codec, other.prior, other.denoiser) != system.checksum


def save_system(system, path, prior_checksum=None):
    save_module(system.codec, path / CODEC_FILE, "codec", system.codec.config)
    save_module(system.prior, path / PRIOR_FILE, "prior", system.prior.config)
    save_module(system.denoiser, path / ADAPTER_FILE, "adapter", system.denoiser.config,
                {"prior_checksum": prior_checksum or state_checksum(system.prior)})


def test_load_round_trip(system, tmp_path):
    save_system(system, tmp_path)
    loaded = GenerativeCodec.load(tmp_path)
    assert loaded.checksum == system.checksum
    data = system.encode(image(7), 1, seed=4)
    assert np.array_equal(loaded.decode(data, steps=1), system.decode(data, steps=1))


def test_adapter_for_other_prior_refused(system, tmp_path):
    save_system(system, tmp_path, prior_checksum="0" * 64)
    with pytest.raises(AdapterMismatchError):
        GenerativeCodec.load(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpointError):
        GenerativeCodec.load(tmp_path)
