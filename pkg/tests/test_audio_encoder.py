import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import micro_audio
from mmer.audio_encoder import AudioEncoder, AudioEncoderConfig, largest_window, reflect_pad
from mmer.nncore import grad_check


def test_full_size_grids_and_output_dim():
    cfg = AudioEncoderConfig()
    assert cfg.padded_shape == (64, 256)
    assert cfg.stage_grids() == [(16, 64), (8, 32), (4, 16), (2, 8)]
    enc = AudioEncoder(cfg).eval()
    with torch.no_grad():
        out = enc(torch.randn(2, 1, 64, 256))
    assert out.shape == (2, 768)
    assert enc.last_grids == [(16, 64), (8, 32), (4, 16), (2, 8)]


def test_window_sizes_follow_grid():
    assert largest_window(64, 8) == 8
    assert largest_window(2, 8) == 2
    assert largest_window(12, 8) == 6
    assert largest_window(7, 8) == 7
    enc = AudioEncoder(AudioEncoderConfig())
    last = enc.stages[-1][1]
    assert last.window == (2, 8) and last.shift == (0, 0)  # one window along frequency; 8 | 8 along time
    assert enc.stages[0][1].shift == (4, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(2, 70))
def test_reflect_pad_mirrors(n, length):
    x = torch.arange(n, dtype=torch.float64)
    y = reflect_pad(x, length, 0)
    assert y.shape == (length,)
    m = min(n, length)
    assert torch.equal(y[:m], x[:m])
    if n < length <= 2 * n - 1:
        assert torch.equal(y[n:], x.flip(0)[1 : 1 + length - n])


def test_short_input_is_padded_and_long_input_cropped():
    enc = AudioEncoder(micro_audio()).eval()
    with torch.no_grad():
        short = enc(torch.randn(1, 1, 32, 20))
        long = torch.randn(1, 1, 32, 50)
        assert torch.equal(enc(long), enc(long[..., :32]))
    assert short.shape == (1, 64)
    with pytest.raises(ValueError, match="mel bands"):
        enc(torch.randn(1, 1, 30, 32))


def test_zero_input_tokens_are_bias_plus_position():
    torch.manual_seed(1)
    single = AudioEncoder(micro_audio())
    z = torch.zeros(2, 1, 32, 32)
    expect = single.patch_embed.proj.bias + single.pos_embed
    assert torch.allclose(single.tokens(z), expect.expand(2, -1, -1, -1))
    multi = AudioEncoder(micro_audio(fusion_mode="sum_pe", channels=3))
    expect = 3 * multi.patch_embed.proj.bias + multi.pos_embed
    assert torch.allclose(multi.tokens(torch.zeros(2, 3, 32, 32)), expect.expand(2, -1, -1, -1))


def _manual_bin_norm(enc, xs):
    """Training-mode batch norm per mel bin, statistics pooled over batch, channel and time."""
    g = enc.bn0.weight.detach().numpy().astype(np.float64)[None, None, :, None]
    beta = enc.bn0.bias.detach().numpy().astype(np.float64)[None, None, :, None]
    mu = xs.mean(axis=(0, 1, 3), keepdims=True)
    var = xs.var(axis=(0, 1, 3), keepdims=True)
    return (xs - mu) / np.sqrt(var + enc.bn0.eps) * g + beta


def _manual_patch_embed(enc, x):
    """Bin norm, then per-channel projection written out as unfold + matmul, summed over channels."""
    p = enc.cfg.patch_size
    w = enc.patch_embed.proj.weight.detach().reshape(enc.cfg.embed_dim, -1).numpy().astype(np.float64)
    bias = enc.patch_embed.proj.bias.detach().numpy().astype(np.float64)
    b, c, fq, t = x.shape
    out = np.zeros((b, fq // p, t // p, enc.cfg.embed_dim))
    xs = _manual_bin_norm(enc, x.numpy().astype(np.float64))
    for ch in range(c):
        patches = xs[:, ch].reshape(b, fq // p, p, t // p, p).transpose(0, 1, 3, 2, 4).reshape(b, fq // p, t // p, p * p)
        out += patches @ w.T + bias
    return out


def test_sum_pe_matches_per_channel_oracle():
    enc = AudioEncoder(micro_audio(fusion_mode="sum_pe", channels=3))
    with torch.no_grad():
        enc.bn0.weight.uniform_(0.5, 2.0)
        enc.bn0.bias.normal_()
    x = torch.randn(2, 3, 32, 32) * torch.linspace(0.5, 3.0, 32)[:, None] + torch.linspace(-4, 4, 32)[:, None]
    got = enc.channel_tokens(x).detach().numpy()
    assert np.allclose(got, _manual_patch_embed(enc, x), atol=1e-4)


def test_bin_norm_running_stats_and_state():
    enc = AudioEncoder(micro_audio(fusion_mode="avg_mel", channels=2))
    x = torch.randn(4, 2, 32, 32) + torch.arange(32.0)[:, None]
    enc.channel_tokens(x)
    avg = x.mean(dim=1)
    mom = enc.bn0.momentum
    # running statistics follow the averaged input, not the raw channels
    assert torch.allclose(enc.bn0.running_mean, mom * avg.mean(dim=(0, 2)), atol=1e-5)
    assert torch.allclose(enc.bn0.running_var, (1 - mom) + mom * avg.var(dim=(0, 2), unbiased=True), atol=1e-4)
    enc.eval()
    y = enc.normalize(avg[:, None])
    ref = (avg - enc.bn0.running_mean[:, None]) / torch.sqrt(enc.bn0.running_var[:, None] + enc.bn0.eps)
    assert torch.allclose(y[:, 0], ref, atol=1e-5)
    sd = enc.state_dict()
    assert "bn0.running_mean" in sd and not any("num_batches" in k for k in sd)


def test_sum_pe_identical_channels_scale_projection():
    enc = AudioEncoder(micro_audio(fusion_mode="sum_pe", channels=4))
    one = torch.randn(1, 1, 32, 32)
    proj = enc.patch_embed.proj(enc.normalize(one)).permute(0, 2, 3, 1)
    tokens = enc.channel_tokens(one.repeat(1, 4, 1, 1))
    assert torch.allclose(tokens, 4 * proj, atol=1e-5)
    bias = enc.patch_embed.proj.bias
    assert torch.allclose(tokens, 4 * (proj - bias) + 4 * bias, atol=1e-5)


def test_avg_mel_equals_single_on_identical_channels():
    torch.manual_seed(2)
    single = AudioEncoder(micro_audio()).eval()
    avg = AudioEncoder(micro_audio(fusion_mode="avg_mel", channels=3)).eval()
    avg.load_state_dict(single.state_dict())
    x = torch.randn(2, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(avg(x.repeat(1, 3, 1, 1)), single(x))


def test_single_rejects_multichannel_and_config_errors():
    enc = AudioEncoder(micro_audio())
    with pytest.raises(ValueError, match="3 channels"):
        enc(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError, match="heads"):
        AudioEncoderConfig(embed_dim=10, heads=[3, 6, 12, 24])
    with pytest.raises(ValueError, match="fusion_mode"):
        AudioEncoderConfig(fusion_mode="max")


def test_batch_equivariance():
    enc = AudioEncoder(micro_audio()).eval()
    x = torch.randn(4, 1, 32, 32)
    with torch.no_grad():
        full = enc(x)
        parts = torch.cat([enc(x[i : i + 1]) for i in range(4)])
        perm = enc(x[[2, 0, 3, 1]])
    assert torch.allclose(full, parts, atol=1e-5)
    assert torch.allclose(perm, full[[2, 0, 3, 1]], atol=1e-5)


def test_nan_input_names_the_block():
    enc = AudioEncoder(micro_audio())
    x = torch.randn(1, 1, 32, 32)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(FloatingPointError, match="group 0 block 0"):
        enc(x)


def test_end_to_end_gradients():
    enc = AudioEncoder(micro_audio(fusion_mode="sum_pe", channels=2, mel_bands=16, frames=16)).to(torch.float64)
    x = torch.randn(1, 2, 16, 16, dtype=torch.float64)
    w = torch.randn(enc.cfg.output_dim, dtype=torch.float64)
    params = list(enc.parameters())

    def f(inp, *ps):
        return (enc(inp) * w).sum()

    report = grad_check(f, [x] + params, tol=1e-3, h=1e-5, max_coords=8)
    assert report.passed, report
