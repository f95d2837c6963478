from __future__ import annotations

import pytest
import torch
import torch.nn.functional as F

from src.codec import encode
from src.errors import ConfigurationError, ShapeMismatchError
from src.models import FusionStrategy, Injection, Interaction, MultiplicationDomain, Process
from src.unet import (
    FewShotUNet,
    PreparedSupport,
    TransformerBlock,
    adapt_input_layer,
    block_forward,
    patchify,
    prepare_support,
)

from .conftest import random_image, random_mask, small_run


def build(**changes) -> FewShotUNet:
    torch.manual_seed(0)
    return FewShotUNet(small_run(**changes).unet).eval()


def query_input(cfg, seed: int = 5) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((2 * cfg.latent_channels, *cfg.latent_size), generator=generator)


def test_adapted_kernel_preserves_duplicated_input():
    torch.manual_seed(0)
    kernel = torch.randn(8, 3, 3, 3, dtype=torch.float64)
    z = torch.randn(1, 3, 10, 10, dtype=torch.float64)
    adapted = adapt_input_layer(kernel)
    assert adapted.shape == (8, 6, 3, 3)
    original = F.conv2d(z, kernel, padding=1)
    assert torch.allclose(F.conv2d(torch.cat([z, z], 1), adapted, padding=1), original, atol=1e-12)
    half = F.conv2d(torch.cat([z, torch.zeros_like(z)], 1), adapted, padding=1)
    assert torch.allclose(half, 0.5 * original, atol=1e-12)
    assert torch.equal(adapt_input_layer(kernel, 1), kernel)


def test_block_with_zeroed_branches_is_identity():
    block = TransformerBlock(32, 32, heads=2, dim_head=16)
    with torch.no_grad():
        for layer in (block.attn_1.to_out, block.attn_2.to_out, block.ff[2]):
            layer.weight.zero_()
            layer.bias.zero_()
    x = torch.randn(6, 32)
    out = block_forward(x, torch.randn(1, 32), block)
    assert out.shape == x.shape
    assert torch.equal(out, x)


def test_block_gradients_match_finite_differences():
    torch.manual_seed(2)
    block = TransformerBlock(8, 8, heads=2, dim_head=4).double()
    x = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    tokens = torch.randn(2, 8, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda a: block_forward(a, tokens, block), (x,))


def test_block_rejects_width_mismatch():
    block = TransformerBlock(32, 32, heads=2, dim_head=16)
    with pytest.raises(ShapeMismatchError):
        block_forward(torch.randn(4, 16), torch.randn(1, 32), block)


def test_full_mask_multiplication_equals_plain_image():
    image = random_image(1)
    full = torch.ones(image.shape[-2:], dtype=torch.bool)
    for domain in MultiplicationDomain:
        cfg = small_run(injection=Injection.MULTIPLICATION, multiplication_domain=domain).unet
        latent = prepare_support(image, full, cfg).latent
        assert torch.allclose(latent, torch.cat([encode(image), encode(image)]), atol=1e-6)


def test_concatenation_pairs_image_and_mask_latents():
    cfg = small_run().unet
    image = random_image(1)
    mask = random_mask(2)
    prepared = prepare_support(image, mask, cfg)
    expected_mask = encode(mask.float().expand(3, -1, -1))
    assert torch.allclose(prepared.latent, torch.cat([encode(image), expected_mask]), atol=1e-6)
    assert prepared.gate_mask is None


def test_addition_of_constant_image_and_full_mask():
    cfg = small_run(injection=Injection.ADDITION).unet
    image = torch.full((3, 32, 32), 0.4)
    prepared = prepare_support(image, torch.ones(32, 32, dtype=torch.bool), cfg)
    assert torch.allclose(prepared.latent, torch.full_like(prepared.latent, 0.7), atol=1e-6)


def test_attention_mask_keeps_plain_latent_and_gate():
    cfg = small_run(injection=Injection.ATTENTION_MASK).unet
    image, mask = random_image(1), random_mask(2)
    prepared = prepare_support(image, mask, cfg)
    assert torch.allclose(prepared.latent, torch.cat([encode(image), encode(image)]))
    assert torch.equal(prepared.gate_mask, mask)


def test_token_preparation_for_tca():
    image, mask = random_image(1), random_mask(2)
    concat = prepare_support(image, mask, small_run(interaction=Interaction.TCA).unet)
    assert concat.latent is None
    assert concat.patches.shape == (2 * 16, 3 * 64)
    gated = prepare_support(
        image, mask, small_run(interaction=Interaction.TCA, injection=Injection.ATTENTION_MASK).unet
    )
    assert torch.equal(gated.patches, patchify(image, 8))
    assert gated.patch_gate.shape == (16,)


def test_support_mask_shape_is_checked():
    with pytest.raises(ShapeMismatchError):
        prepare_support(random_image(1), torch.ones(16, 16, dtype=torch.bool), small_run().unet)


def test_forward_returns_mask_latent_and_is_deterministic():
    model = build()
    cfg = model.cfg
    support = prepare_support(random_image(1), random_mask(2), cfg)
    with torch.no_grad():
        first = model(query_input(cfg), [support])
        second = model(query_input(cfg), [support])
    assert first.shape == (cfg.latent_channels, *cfg.latent_size)
    assert torch.isfinite(first).all()
    assert torch.equal(first, second)


def test_empty_attention_gate_reduces_to_single_branch():
    model = build(injection=Injection.ATTENTION_MASK)
    cfg = model.cfg
    empty = torch.zeros(32, 32, dtype=torch.bool)
    support = prepare_support(random_image(1), empty, cfg)
    with torch.no_grad():
        gated = model(query_input(cfg), [support])
        alone = model(query_input(cfg))
    assert torch.allclose(gated, alone, atol=1e-6)


def test_full_attention_gate_equals_ungated_fusion():
    model = build(injection=Injection.ATTENTION_MASK)
    cfg = model.cfg
    support = prepare_support(random_image(1), torch.ones(32, 32, dtype=torch.bool), cfg)
    ungated = PreparedSupport(latent=support.latent)
    with torch.no_grad():
        assert torch.equal(model(query_input(cfg), [support]), model(query_input(cfg), [ungated]))


def test_supports_change_the_query_output():
    model = build()
    cfg = model.cfg
    support = prepare_support(random_image(1), random_mask(2), cfg)
    with torch.no_grad():
        assert not torch.allclose(model(query_input(cfg), [support]), model(query_input(cfg)))


def test_no_fusion_layers_isolates_the_query_branch():
    model = build(fusion_layers=())
    cfg = model.cfg
    support = prepare_support(random_image(1), random_mask(2), cfg)
    with torch.no_grad():
        assert torch.allclose(model(query_input(cfg), [support]), model(query_input(cfg)), atol=1e-6)


@pytest.mark.parametrize(
    "changes",
    [
        {"fusion": FusionStrategy.QKV},
        {"interaction": Interaction.TCA},
        {"interaction": Interaction.TCA, "injection": Injection.ATTENTION_MASK},
        {"injection": Injection.MULTIPLICATION, "multiplication_domain": MultiplicationDomain.LATENT},
        {"fusion_layers": (0, 3)},
    ],
)
def test_forward_variants_run_with_several_supports(changes):
    model = build(**changes)
    cfg = model.cfg
    supports = [prepare_support(random_image(s), random_mask(s + 10), cfg) for s in range(3)]
    with torch.no_grad():
        out = model(query_input(cfg), supports)
    assert out.shape == (cfg.latent_channels, *cfg.latent_size)
    assert torch.isfinite(out).all()


def test_kv_sampling_is_seeded():
    model = build()
    cfg = model.cfg
    supports = [prepare_support(random_image(s), random_mask(s + 10), cfg) for s in range(3)]
    with torch.no_grad():
        first = model(query_input(cfg), supports, kv_sample_seed=4)
        again = model(query_input(cfg), supports, kv_sample_seed=4)
    assert torch.equal(first, again)


def test_branches_share_every_parameter():
    model = build()
    names = [name for name, _ in model.named_parameters()]
    assert not any("support" in name or "query" in name for name in names)
    assert "token_encoder.proj.weight" not in names
    assert "token_encoder.proj.weight" in dict(build(interaction=Interaction.TCA).named_parameters())

    cfg = model.cfg
    support = prepare_support(random_image(1), random_mask(2), cfg)
    model(query_input(cfg), [support]).sum().backward()
    assert model.conv_in.weight.grad is not None
    assert model.null_token.grad is not None


def test_forward_input_checks():
    model = build()
    cfg = model.cfg
    with pytest.raises(ShapeMismatchError):
        model(torch.zeros(cfg.latent_channels, *cfg.latent_size))
    with pytest.raises(ShapeMismatchError):
        model(query_input(cfg), [PreparedSupport(latent=torch.zeros(3, 8, 8))])

    timed = build(process=Process.MN2M)
    assert timed.time_embedding is not None
    with pytest.raises(ConfigurationError):
        timed(query_input(timed.cfg))
    assert timed(query_input(timed.cfg), timestep=10).shape == (cfg.latent_channels, *cfg.latent_size)
