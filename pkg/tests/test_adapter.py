import math

import pytest
import torch

from avsync.adapter import ARMS, AdapterConfig, DeltaUpsampler, FeatureAdapter, GatedFFN, delta_upsample, repeat_upsample
from avsync.errors import ConfigError, ModeError, ShapeError


@pytest.mark.parametrize("T", range(1, 65))
def test_delta_upsample_length_and_identity_start(T):
    x = torch.randn(T, 6, dtype=torch.float64)
    y = delta_upsample(x)
    assert y.shape == (2 * T, 6)
    assert torch.equal(y, repeat_upsample(x))


def test_repetition_oracle_two_frames():
    a, b = torch.randn(3), torch.randn(3)
    y = delta_upsample(torch.stack([a, b]))
    oracle = torch.stack([a, a, b, b])
    assert torch.equal(y, oracle)


def test_delta_upsampler_interleaves_even_odd():
    up = DeltaUpsampler(2).double()
    with torch.no_grad():
        up.proj_even.bias.fill_(1.0)
        up.proj_odd.bias.fill_(-1.0)
    x = torch.zeros(3, 2, dtype=torch.float64)
    y = up(x)
    assert y[0::2].eq(1.0).all() and y[1::2].eq(-1.0).all()


def test_delta_uses_centered_difference():
    up = DeltaUpsampler(1).double()
    x = torch.tensor([[0.0], [1.0], [4.0], [9.0]], dtype=torch.float64)
    d = up.delta(x.T[None]).squeeze()
    # zero padded: (x[t+1] - x[t-1]) / 2
    assert d.tolist() == [0.5, 2.0, 4.0, -2.0]


def test_gated_ffn_zero_init_is_identity():
    ffn = GatedFFN(8).double()
    x = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(ffn(x), x)


def test_gated_ffn_constant_one():
    ffn = GatedFFN(3).double()
    with torch.no_grad():
        ffn.fc2.bias[1] = 1.0
    x = torch.zeros(2, 3, dtype=torch.float64)
    out = ffn(x)
    assert out[:, 1].tolist() == pytest.approx([1 / (1 + math.exp(-1))] * 2, abs=1e-12)
    assert out[:, 0].eq(0).all() and out[:, 2].eq(0).all()


def test_plain_ffn_variant():
    ffn = GatedFFN(3, gated=False).double()
    with torch.no_grad():
        ffn.fc2.bias[0] = 2.0
    assert ffn(torch.zeros(1, 3, dtype=torch.float64))[0, 0].item() == 2.0


def test_fresh_adapter_is_projection_of_repeated_input():
    cfg = AdapterConfig(in_dim=8, out_dim=12, num_heads=4)
    ad = FeatureAdapter(cfg).double()
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    out = ad(x)
    ref = ad.in_proj(repeat_upsample(x))
    assert out.shape == (2, 10, 12)
    assert ((out - ref).norm() / ref.norm()).item() < 1e-6


def test_self_mode_shape():
    ad = FeatureAdapter(AdapterConfig(in_dim=8, out_dim=8, num_heads=2))
    assert ad.adapt_features(torch.randn(8, 8)).shape == (8, 8)


def test_cross_mode_errors():
    ad = FeatureAdapter(AdapterConfig(in_dim=8, out_dim=8, num_heads=2, attention_mode="cross"))
    with pytest.raises(ModeError):
        ad.adapt_features(torch.randn(8, 8))
    with pytest.raises(ShapeError):
        ad.adapt_features(torch.randn(8, 8), audio_query=torch.randn(6, 8))


def test_cross_mode_residual_on_query():
    ad = FeatureAdapter(AdapterConfig(in_dim=4, out_dim=8, num_heads=2, attention_mode="cross")).double()
    q = torch.randn(1, 6, 8, dtype=torch.float64)
    out = ad(torch.randn(1, 3, 4, dtype=torch.float64), audio_query=q)
    assert torch.allclose(out, q)  # zero-initialised attention output and FFN


def test_padding_does_not_change_valid_frames():
    ad = FeatureAdapter(AdapterConfig(in_dim=4, out_dim=8, num_heads=2)).double()
    torch.manual_seed(1)
    for p in ad.parameters():
        p.data.normal_(0, 0.3)
    x = torch.randn(3, 4, dtype=torch.float64)
    single = ad(x[None])[0]
    padded = torch.cat([x, torch.randn(2, 4, dtype=torch.float64)])[None]
    batched = ad(padded, lengths=torch.tensor([3]))[0, :6]
    assert torch.allclose(single, batched, atol=1e-12)


@pytest.mark.parametrize("arm", sorted(ARMS))
def test_arms_build(arm):
    cfg = AdapterConfig(in_dim=8, out_dim=8, num_heads=2).with_arm(arm)
    ad = FeatureAdapter(cfg)
    assert ad(torch.randn(1, 3, 8)).shape == (1, 6, 8)
    assert (ad.upsampler is None) == (ARMS[arm]["upsampler"] == "repeat")


def test_invalid_config():
    with pytest.raises(ConfigError):
        AdapterConfig(out_dim=10, num_heads=4).validate()
    with pytest.raises(ConfigError):
        AdapterConfig().with_arm("bogus")
