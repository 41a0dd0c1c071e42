import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dpk.losses import feature_loss
from dpk.transform import (
    ConfigurationError,
    PatchEmbed,
    StageTransform,
    TokenDecoder,
    TokenEncoder,
    TrainingOnly,
    TransformParams,
    decode,
    default_dim,
    default_patch_size,
    encode,
    fill_masked,
    patchify,
    reset_transform_calls,
    stitch,
    transform_call_count,
)


def test_patchify_token_counts():
    assert patchify(torch.randn(1, 4, 8, 8), PatchEmbed(4, 6, 2)).shape == (1, 16, 6)
    assert patchify(torch.randn(1, 4, 8, 8), PatchEmbed(4, 6, 8)).shape == (1, 1, 6)


def test_patchify_identity_projection_is_reshape():
    embed = PatchEmbed(3, 3, 1)
    with torch.no_grad():
        embed.proj.weight.copy_(torch.eye(3).view(3, 3, 1, 1))
        embed.proj.bias.zero_()
    f = torch.randn(2, 3, 4, 5)
    np.testing.assert_array_equal(
        patchify(f, embed).detach().numpy(), f.flatten(2).transpose(1, 2).numpy()
    )


def test_patchify_equals_flatten_then_project():
    torch.manual_seed(0)
    embed = PatchEmbed(2, 5, 2).double()
    f = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    patches = f.unfold(2, 2, 2).unfold(3, 2, 2)  # B, C, r, c, k, k
    flat = patches.permute(0, 2, 3, 1, 4, 5).reshape(1, 4, -1)
    expected = flat @ embed.proj.weight.reshape(5, -1).T + embed.proj.bias
    torch.testing.assert_close(patchify(f, embed), expected)


def test_patchify_is_linear():
    embed = PatchEmbed(2, 4, 2).double()
    with torch.no_grad():
        embed.proj.bias.zero_()
    a, b = torch.randn(2, 1, 2, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(patchify(2 * a + b, embed), 2 * patchify(a, embed) + patchify(b, embed))


def test_bad_patch_size_is_a_build_error():
    with pytest.raises(ConfigurationError):
        StageTransform((4, 6, 6), (8, 6, 6), TransformParams(patch_size=4))
    with pytest.raises(ConfigurationError):
        StageTransform((4, 6, 6), (8, 4, 4))


def test_defaults():
    assert default_patch_size(32, 32) == 4
    assert default_patch_size(4, 4) == 1
    assert default_patch_size(14, 14) == 2
    assert default_dim(128) == 128 and default_dim(2048) == 256


def test_encoder_zero_depth_adds_position_table_exactly():
    enc = TokenEncoder(4, 8, 0, 2)
    x = torch.randn(3, 4, 8)
    assert torch.equal(encode(x, enc), x + enc.pos_embed)


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_encoder_preserves_shape(depth):
    enc = TokenEncoder(6, 8, depth, 2)
    assert encode(torch.randn(2, 6, 8), enc).shape == (2, 6, 8)


def test_encoder_rejects_wrong_dim():
    with pytest.raises(ValueError):
        TokenEncoder(4, 8, 1, 2)(torch.randn(1, 4, 6))


def test_encoder_gradcheck():
    torch.manual_seed(1)
    enc = TokenEncoder(4, 8, 1, 2).double()
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    params = list(enc.parameters())
    # central differences on every parameter tensor
    assert torch.autograd.gradcheck(
        lambda *p: torch.func.functional_call(enc, dict(zip(dict(enc.named_parameters()), p)), (x,)),
        tuple(q.detach().clone().requires_grad_(True) for q in params),
        eps=1e-6,
        atol=1e-6,
        rtol=1e-4,
    )


def test_decoder_zero_depth_identity_head_is_reshape():
    dec = TokenDecoder((2, 3), 4, 0, 1, out_channels=4, patch_size=1)
    with torch.no_grad():
        dec.pos_embed.zero_()
        dec.head.weight.copy_(torch.eye(4))
        dec.head.bias.zero_()
    tokens = torch.randn(2, 6, 4)
    out = decode(tokens, dec, (4, 2, 3))
    torch.testing.assert_close(out, tokens.transpose(1, 2).reshape(2, 4, 2, 3))


def test_decoder_shape_contract_and_error():
    dec = TokenDecoder((2, 2), 8, 1, 2, out_channels=5, patch_size=2)
    assert decode(torch.randn(3, 4, 8), dec, (5, 4, 4)).shape == (3, 5, 4, 4)
    with pytest.raises(ConfigurationError):
        decode(torch.randn(3, 4, 8), dec, (5, 8, 8))


def test_decoder_gradcheck_wrt_hybrid_tokens():
    torch.manual_seed(2)
    dec = TokenDecoder((2, 2), 4, 1, 2, out_channels=3, patch_size=1).double()
    target = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    h = torch.randn(1, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: ((dec(t) - target) ** 2).mean(), (h,), rtol=1e-4)


def test_stitch_examples():
    s, t = torch.zeros(2, 8, 5), torch.ones(2, 8, 5)
    none = torch.zeros(2, 8, dtype=torch.bool)
    assert torch.equal(stitch(s, t, none), s)
    assert torch.equal(stitch(s, t, ~none), t)
    m = none.clone()
    m[:, [1, 4, 6]] = True
    assert stitch(s, t, m).sum(dim=(1, 2)).tolist() == [15.0, 15.0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_stitch_idempotent(seed):
    g = torch.Generator().manual_seed(seed)
    s, t = torch.randn(2, 6, 3, generator=g), torch.randn(2, 6, 3, generator=g)
    m = torch.rand(2, 6, generator=g) > 0.5
    once = stitch(s, t, m)
    assert torch.equal(stitch(once, t, m), once)


def test_stitch_gradient_masking():
    s = torch.randn(1, 4, 3, requires_grad=True)
    t = torch.randn(1, 4, 3, requires_grad=True)
    m = torch.tensor([[True, False, True, False]])
    stitch(s, t, m).pow(2).sum().backward()
    assert torch.all(s.grad[0, [0, 2]] == 0)
    assert torch.all(s.grad[0, [1, 3]] != 0)
    assert t.grad is None


def test_stitch_shape_errors():
    with pytest.raises(ValueError):
        stitch(torch.zeros(1, 4, 3), torch.zeros(1, 4, 2), torch.zeros(1, 4, dtype=torch.bool))
    with pytest.raises(ValueError):
        stitch(torch.zeros(1, 4, 3), torch.zeros(1, 4, 3), torch.zeros(1, 5, dtype=torch.bool))


def test_fillers():
    s, t = torch.randn(2, 4, 3), torch.randn(2, 4, 3)
    full = torch.ones(2, 4, dtype=torch.bool)
    assert torch.equal(fill_masked(s, full, "zero"), torch.zeros_like(s))
    token = torch.tensor([1.0, 2.0, 3.0])
    assert torch.equal(fill_masked(s, full, "learnable", learnable_token=token), token.expand(2, 4, 3))
    m = torch.tensor([[True, False, False, True], [False, False, True, False]])
    assert torch.equal(fill_masked(s, m, "teacher", teacher=t), stitch(s, t, m))
    with pytest.raises(ConfigurationError):
        fill_masked(s, m, "teacher")
    with pytest.raises(ConfigurationError):
        fill_masked(s, m, "learnable")
    with pytest.raises(ConfigurationError):
        fill_masked(s, m, "noise")


SMALL = dict(dim=16, encoder_blocks=1, decoder_blocks=1, heads=2)


@pytest.mark.parametrize("variant", ["encoder_decoder", "mlp_decoder", "conv"])
@pytest.mark.parametrize("filler", ["teacher", "zero", "learnable"])
def test_stage_transform_round_trip_shape(variant, filler):
    tr = StageTransform((8, 8, 8), (12, 8, 8), TransformParams(variant=variant, **SMALL))
    mask = torch.rand(2, *tr.grid) > 0.5
    out = tr(torch.randn(2, 8, 8, 8), torch.randn(2, 12, 8, 8), mask, filler)
    assert out.shape == (2, 12, 8, 8)


def test_mlp_decoder_has_no_encoder_blocks():
    tr = StageTransform((8, 4, 4), (8, 4, 4), TransformParams(variant="mlp_decoder", **SMALL))
    assert len(tr.student_encoder.blocks) == 0 and len(tr.decoder.blocks) == 1


def test_feature_loss_gradient_zero_at_masked_student_tokens():
    torch.manual_seed(3)
    tr = StageTransform((4, 4, 4), (6, 4, 4), TransformParams(patch_size=2, **SMALL))
    fs, ft = torch.randn(2, 4, 4, 4), torch.randn(2, 6, 4, 4)
    mask = torch.tensor([[[True, False], [False, True]], [[False, False], [True, False]]])
    s_tok, t_tok = tr.tokens(fs, ft)
    s_tok.retain_grad()
    out = tr.decoder(stitch(s_tok, t_tok, mask))
    feature_loss(out, ft).backward()
    flat = mask.reshape(2, -1)
    assert torch.all(s_tok.grad[flat] == 0)
    assert torch.all(s_tok.grad[~flat].abs().sum(-1) > 0)


def test_transform_init_is_seed_deterministic():
    def build():
        torch.manual_seed(11)
        return StageTransform((4, 4, 4), (8, 4, 4), TransformParams(**SMALL))

    a, b = build().state_dict(), build().state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_training_only_flag_and_call_counter():
    tr = StageTransform((4, 4, 4), (8, 4, 4), TransformParams(**SMALL))
    assert isinstance(tr, TrainingOnly) and tr.training_only
    assert all(getattr(m, "training_only", False) for m in (tr.student_embed, tr.decoder))
    reset_transform_calls()
    tr(torch.randn(1, 4, 4, 4), torch.randn(1, 8, 4, 4), torch.zeros(1, *tr.grid, dtype=torch.bool))
    assert transform_call_count() > 0
    reset_transform_calls()
    assert transform_call_count() == 0


def test_transform_params_validation():
    with pytest.raises(ConfigurationError):
        TransformParams(variant="resnet")
    with pytest.raises(ConfigurationError):
        TransformParams(encoder_blocks=-1)
    with pytest.raises(ConfigurationError):
        StageTransform((4, 4, 4), (8, 4, 4), TransformParams(dim=10, heads=4))
