import numpy as np
import pytest

from conftest import assert_close, rand_tensor
from srkit.fusion import (
    BranchGroup,
    LoraFactors,
    TrafficCounter,
    branch_forward,
    collapse_branches,
    compose_convs,
    fused_attention,
    lora_forward,
    lora_merge,
    reference_attention,
    sequential_extended,
)
from srkit.models import random_conv
from srkit.tensor import ConvSpec, ShapeError, Tensor, conv2d, tensor

SPECIALIZED_WIDTHS = (1, 16, 28, 32, 48, 52)


class TestFusedAttention:
    def test_direct_scalar_evaluation(self):
        x, f3 = tensor([[[[2.0]]]]), tensor([[[[3.0]]]])
        attn = ConvSpec(1, 1, (1, 1), (0, 0), [[[[0.5]]]], bias=[0.1])
        out = fused_attention(x, f3, attn)
        assert out.data[0, 0, 0, 0] == pytest.approx((2 + 3) * (0.1 + 0.5 * 3))

    def test_zero_weight_unit_bias_is_residual(self, rng):
        x, f3 = rand_tensor(rng, 1, 8, 4, 4), rand_tensor(rng, 1, 8, 4, 4)
        attn = ConvSpec(
            8,
            8,
            (1, 1),
            (0, 0),
            np.zeros((8, 8, 1, 1), np.float32),
            bias=np.ones(8, np.float32),
        )
        assert_close(fused_attention(x, f3, attn), x.data + f3.data)

    @pytest.mark.parametrize("c", SPECIALIZED_WIDTHS)
    def test_matches_reference_across_widths(self, c):
        rng = np.random.default_rng(c)
        x, f3 = rand_tensor(rng, 1, c, 6, 6), rand_tensor(rng, 1, c, 6, 6)
        attn = random_conv(rng, c, c, k=1)
        assert_close(
            fused_attention(x, f3, attn), reference_attention(x, f3, attn)
        )

    def test_missing_bias_treated_as_zero(self, rng):
        c = 4
        x, f3 = rand_tensor(rng, 1, c, 3, 3), rand_tensor(rng, 1, c, 3, 3)
        attn = random_conv(rng, c, c, k=1, bias=False)
        assert_close(fused_attention(x, f3, attn), reference_attention(x, f3, attn))

    def test_shape_mismatch(self, rng):
        attn = random_conv(rng, 4, 4, k=1)
        with pytest.raises(ShapeError):
            fused_attention(
                Tensor.zeros(1, 4, 3, 3), Tensor.zeros(1, 4, 3, 4), attn
            )

    def test_rejects_3x3_gate(self, rng):
        attn = random_conv(rng, 4, 4, k=3)
        with pytest.raises(ShapeError, match="1x1"):
            fused_attention(Tensor.zeros(1, 4, 3, 3), Tensor.zeros(1, 4, 3, 3), attn)


class TestTraffic:
    def test_exact_counts_example_shape(self, rng):
        c, h, w = 32, 16, 16
        numel = c * h * w
        x, f3 = rand_tensor(rng, 1, c, h, w), rand_tensor(rng, 1, c, h, w)
        attn = random_conv(rng, c, c, k=1)
        fused, ref = TrafficCounter(), TrafficCounter()
        fused_attention(x, f3, attn, fused)
        reference_attention(x, f3, attn, ref)
        assert fused.element_reads == 2 * numel
        assert fused.element_writes == numel
        assert ref.element_reads == 5 * numel
        assert ref.element_writes == 3 * numel
        assert fused.total == 24_576
        assert ref.total == 65_536

    @pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 16, 5, 7), (1, 52, 9, 3)])
    def test_counts_are_3n_vs_8n_for_all_shapes(self, shape):
        rng = np.random.default_rng(0)
        n, c, h, w = shape
        numel = n * c * h * w
        x, f3 = rand_tensor(rng, *shape), rand_tensor(rng, *shape)
        attn = random_conv(rng, c, c, k=1)
        fused, ref = TrafficCounter(), TrafficCounter()
        fused_attention(x, f3, attn, fused)
        reference_attention(x, f3, attn, ref)
        assert (fused.total, ref.total) == (3 * numel, 8 * numel)

    def test_counter_accumulates_and_resets(self, rng):
        x = rand_tensor(rng, 1, 4, 2, 2)
        attn = random_conv(rng, 4, 4, k=1)
        counter = TrafficCounter()
        fused_attention(x, x, attn, counter)
        fused_attention(x, x, attn, counter)
        assert counter.total == 2 * 3 * x.numel
        counter.reset()
        assert counter.total == 0


class TestComposeConvs:
    def test_identity_units(self):
        eye = ConvSpec.identity(3)
        out = compose_convs(eye, eye)
        assert np.array_equal(out.weight, eye.weight)
        delta = np.zeros((1, 1, 3, 3), np.float32)
        delta[0, 0, 1, 1] = 1.0
        d3 = ConvSpec(1, 1, (3, 3), (1, 1), delta)
        comp = compose_convs(d3, d3)
        assert comp.kernel == (5, 5) and comp.padding == (2, 2)
        want = np.zeros((1, 1, 5, 5), np.float32)
        want[0, 0, 2, 2] = 1.0
        assert np.array_equal(comp.weight, want)

    def test_interior_equivalence_random(self, rng):
        first = random_conv(rng, 3, 4, k=3)
        second = random_conv(rng, 4, 2, k=3)
        comp = compose_convs(first, second)
        x = rand_tensor(rng, 1, 3, 12, 12)
        seq = conv2d(conv2d(x, first), second)
        got = conv2d(x, comp)
        assert got.shape == seq.shape
        assert_close(
            got.data[:, :, 1:-1, 1:-1], seq.data[:, :, 1:-1, 1:-1]
        )

    def test_extended_intermediate_full_plane(self, rng):
        first = random_conv(rng, 2, 3, k=3)
        second = random_conv(rng, 3, 2, k=3)
        x = rand_tensor(rng, 1, 2, 9, 9)
        assert_close(
            conv2d(x, compose_convs(first, second)),
            sequential_extended(first, second, x),
        )

    def test_1x1_into_3x3_bias_folding(self, rng):
        first = random_conv(rng, 3, 5, k=1)
        second = random_conv(rng, 5, 2, k=3)
        comp = compose_convs(first, second)
        assert comp.kernel == (3, 3)
        want = second.bias + second.weight.sum(axis=(2, 3)) @ first.bias
        assert_close(comp.bias, want)
        x = Tensor.full(1, 3, 6, 6, 0.35)
        seq = conv2d(conv2d(x, first), second)
        got = conv2d(x, comp)
        assert_close(got.data[:, :, 1:-1, 1:-1], seq.data[:, :, 1:-1, 1:-1])

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            compose_convs(random_conv(rng, 3, 4, k=3), random_conv(rng, 5, 2, k=3))

    def test_grouped_rejected(self, rng):
        dw = random_conv(rng, 4, 4, k=3, groups=4)
        with pytest.raises(ShapeError, match="grouped"):
            compose_convs(dw, random_conv(rng, 4, 4, k=3))

    def test_head_contraction_saves_about_5k_params(self, rng):
        head = random_conv(rng, 3, 26, k=3)
        body = random_conv(rng, 26, 26, k=3)
        comp = compose_convs(head, body)
        assert comp.kernel == (5, 5)
        saved = head.param_count + body.param_count - comp.param_count
        assert saved == 4862
        assert abs(saved - 5000) <= 500


class TestLora:
    def test_zero_update_is_exact_identity(self, rng):
        base = random_conv(rng, 3, 4, k=3)
        zero = LoraFactors(
            a=np.zeros((2 * 3, 3 * 3), np.float32),
            b=np.zeros((4 * 3, 2 * 3), np.float32),
            rank=2,
        )
        merged = lora_merge(base, zero)
        assert np.array_equal(merged.weight, base.weight)
        assert np.array_equal(merged.bias, base.bias)

    def test_rank1_scalar_arithmetic(self):
        base = ConvSpec(1, 1, (1, 1), (0, 0), [[[[2.0]]]])
        lora = LoraFactors(a=[[4.0]], b=[[3.0]], rank=1, alpha=1.0)
        assert lora_merge(base, lora).weight[0, 0, 0, 0] == 14.0

    def test_alpha_linearity(self, rng):
        base = random_conv(rng, 2, 3, k=3)
        a = rng.normal(0, 0.3, (1 * 3, 2 * 3)).astype(np.float32)
        b = rng.normal(0, 0.3, (3 * 3, 1 * 3)).astype(np.float32)
        d1 = lora_merge(base, LoraFactors(a, b, 1, alpha=1.0)).weight - base.weight
        d2 = lora_merge(base, LoraFactors(a, b, 1, alpha=2.0)).weight - base.weight
        assert np.allclose(d2, 2.0 * d1, atol=1e-7)

    def test_merged_equals_base_plus_branch(self, rng):
        base = random_conv(rng, 4, 6, k=3)
        lora = LoraFactors(
            a=rng.normal(0, 0.2, (2 * 3, 4 * 3)).astype(np.float32),
            b=rng.normal(0, 0.2, (6 * 3, 2 * 3)).astype(np.float32),
            rank=2,
            alpha=1.5,
        )
        x = rand_tensor(rng, 1, 4, 7, 7)
        assert_close(conv2d(x, lora_merge(base, lora)), lora_forward(x, base, lora))

    def test_scale_is_alpha_over_rank(self, rng):
        base = random_conv(rng, 1, 1, k=1)
        lora = LoraFactors(
            a=np.ones((4, 1), np.float32), b=np.ones((1, 4), np.float32), rank=4, alpha=2.0
        )
        merged = lora_merge(base, lora)
        # B @ A = 4, scaled by alpha/rank = 0.5
        assert merged.weight[0, 0, 0, 0] - base.weight[0, 0, 0, 0] == pytest.approx(2.0)

    def test_shape_inconsistency_rejected(self, rng):
        base = random_conv(rng, 3, 4, k=3)
        bad = LoraFactors(
            a=np.zeros((6, 8), np.float32), b=np.zeros((12, 6), np.float32), rank=2
        )
        with pytest.raises(ShapeError):
            lora_merge(base, bad)


class TestCollapseBranches:
    def test_single_branch_is_itself(self, rng):
        b = random_conv(rng, 3, 3, k=3)
        out = collapse_branches([b])
        assert np.array_equal(out.weight, b.weight)
        assert np.array_equal(out.bias, b.bias)

    def test_identity_plus_zero_conv_is_center_delta(self):
        zero = ConvSpec(3, 3, (3, 3), (1, 1), np.zeros((3, 3, 3, 3), np.float32))
        out = collapse_branches([zero], include_identity=True)
        want = np.zeros((3, 3, 3, 3), np.float32)
        for i in range(3):
            want[i, i, 1, 1] = 1.0
        assert np.array_equal(out.weight, want)

    def test_three_branch_sum_matches_execution(self, rng):
        c = 6
        branches = [random_conv(rng, c, c, k=3), random_conv(rng, c, c, k=1)]
        group = BranchGroup(tuple(branches), include_identity=True)
        merged = collapse_branches(branches, include_identity=True)
        for _ in range(3):
            x = rand_tensor(rng, 1, c, 7, 7)
            assert_close(conv2d(x, merged), branch_forward(x, group))

    def test_identity_requires_square_widths(self, rng):
        branches = [random_conv(rng, 3, 5, k=3)]
        with pytest.raises(ShapeError, match="identity"):
            collapse_branches(branches, include_identity=True)

    def test_rejects_even_or_large_kernels(self, rng):
        big = random_conv(rng, 3, 3, k=5)
        with pytest.raises(ShapeError, match="<= 3x3"):
            collapse_branches([big])

    def test_width_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError, match="branch"):
            collapse_branches([random_conv(rng, 3, 3, k=3), random_conv(rng, 3, 4, k=3)])

    def test_bias_is_sum_of_biases(self, rng):
        c = 4
        b1, b2 = random_conv(rng, c, c, k=3), random_conv(rng, c, c, k=1)
        merged = collapse_branches([b1, b2])
        assert_close(merged.bias, b1.bias + b2.bias)
