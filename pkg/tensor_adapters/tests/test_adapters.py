"""
Tests for tensorization, the LoRA-PT / LoRA / PISSA adapters and
parameter counting.
"""

import math
from dataclasses import replace

import torch
from django.test import SimpleTestCase

from tensor_adapters.adapters import (
    METHOD_FULL,
    METHOD_LORA,
    METHOD_LORA_PT,
    METHOD_PISSA,
    EncoderWeights,
    StackedTensors,
    TensorSplit,
    adapter_array_shapes,
    build_lorapt,
    build_matrix_lora,
    build_pissa,
    detensorize,
    effective_weights,
    param_count,
    pissa_split,
    role_shape,
    tensorize,
)
from tensor_adapters.exceptions import InvalidArgumentError
from tensor_adapters.tensor3 import Tensor3, fnorm
from tensor_adapters.tsvd import LowRankFactors, fourier_singular_values
from tensor_adapters.verification import lorapt_pissa_gap


def random_weights(d=4, L=2, seed=0, correlation=0.0):
    return EncoderWeights.random(d, L, torch.Generator().manual_seed(seed), correlation=correlation)


def max_weight_gap(a, b):
    return max(
        float((m1 - m2).abs().max())
        for (_, m1), (_, m2) in zip(a.named_matrices(), b.named_matrices())
    )


class TensorizeTests(SimpleTestCase):
    """Test stacking encoder matrices into w_sa, w_up and w_down"""

    def test_shapes(self):
        stacked = tensorize(random_weights(d=4, L=3))
        self.assertEqual(stacked.w_sa.shape, (4, 4, 12))
        self.assertEqual(stacked.w_up.shape, (4, 16, 3))
        self.assertEqual(stacked.w_down.shape, (16, 4, 3))

    def test_layer_major_order(self):
        """Test w_sa slices run q, k, v, o of layer 1, then layer 2"""
        weights = random_weights(d=3, L=2)
        stacked = tensorize(weights)
        self.assertTrue(torch.equal(stacked.w_sa.frontal(0), weights.layers[0].q))
        self.assertTrue(torch.equal(stacked.w_sa.frontal(3), weights.layers[0].o))
        self.assertTrue(torch.equal(stacked.w_sa.frontal(5), weights.layers[1].k))
        self.assertTrue(torch.equal(stacked.w_down.frontal(1), weights.layers[1].down))

    def test_round_trip_is_exact(self):
        weights = random_weights(d=4, L=3)
        self.assertEqual(max_weight_gap(detensorize(tensorize(weights)), weights), 0.0)

    def test_detensorize_rejects_bad_slice_counts(self):
        bad = StackedTensors(
            w_sa=Tensor3.zeros(2, 2, 6), w_up=Tensor3.zeros(2, 8, 1), w_down=Tensor3.zeros(8, 2, 1)
        )
        with self.assertRaises(InvalidArgumentError):
            detensorize(bad)
        mismatched = StackedTensors(
            w_sa=Tensor3.zeros(2, 2, 8), w_up=Tensor3.zeros(2, 8, 1), w_down=Tensor3.zeros(8, 2, 2)
        )
        with self.assertRaises(InvalidArgumentError):
            detensorize(mismatched)
        with self.assertRaises(InvalidArgumentError):
            detensorize(StackedTensors(
                w_sa=Tensor3.zeros(2, 2, 4), w_up=Tensor3.zeros(2, 8, 1),
                w_down=Tensor3.zeros(8, 2, 1), stack_order='role-major',
            ))

    def test_no_layers(self):
        with self.assertRaises(InvalidArgumentError):
            tensorize(EncoderWeights(d=4, layers=[]))

    def test_encoder_weight_validation(self):
        weights = random_weights(d=4, L=1)
        weights.layers[0].up = torch.zeros(4, 4, dtype=torch.float64)
        with self.assertRaises(InvalidArgumentError):
            EncoderWeights(d=4, layers=weights.layers)

    def test_opaque_arrays_survive_round_trip(self):
        """Test biases ride through tensorize/detensorize untouched"""
        weights = random_weights(d=3, L=2)
        bias = torch.arange(3, dtype=torch.float64)
        weights.layers[1].extras['q_bias'] = bias
        stacked = tensorize(weights)
        self.assertEqual(list(stacked.extras), ['layer.2.q_bias'])
        back = detensorize(stacked)
        self.assertEqual(back.layers[0].extras, {})
        self.assertTrue(torch.equal(back.layers[1].extras['q_bias'], bias))

    def test_opaque_array_outside_the_layers(self):
        stacked = tensorize(random_weights(d=2, L=1))
        for name in ('layer.2.q_bias', 'layer.1.up', 'head.bias'):
            bad = StackedTensors(
                w_sa=stacked.w_sa, w_up=stacked.w_up, w_down=stacked.w_down,
                extras={name: torch.zeros(2, dtype=torch.float64)},
            )
            with self.assertRaises(InvalidArgumentError):
                detensorize(bad)

    def test_named_matrices_are_one_based(self):
        names = [name for name, _ in random_weights(d=2, L=2).named_matrices()]
        self.assertEqual(names[0], 'layer.1.q')
        self.assertEqual(names[-1], 'layer.2.down')
        self.assertEqual(len(names), 12)

    def test_role_shapes(self):
        self.assertEqual(role_shape('v', 5), (5, 5))
        self.assertEqual(role_shape('up', 5), (5, 20))
        self.assertEqual(role_shape('down', 5), (20, 5))
        with self.assertRaises(InvalidArgumentError):
            role_shape('bias', 5)

    def test_correlated_layers_concentrate_in_first_fourier_slice(self):
        """Test correlated layers put most stacked-tensor energy in Fourier slice 0"""

        def first_slice_share(correlation):
            sigma = fourier_singular_values(tensorize(random_weights(d=6, L=4, correlation=correlation)).w_up)
            return float((sigma[0] ** 2).sum() / (sigma ** 2).sum())

        self.assertGreater(first_slice_share(0.95), 0.8)
        self.assertLess(first_slice_share(0.0), 0.6)


class LoRAPTAdapterTests(SimpleTestCase):
    """Test LoRA-PT construction and the effective weights it induces"""

    def test_untrained_adapter_reproduces_weights(self):
        weights = random_weights(d=4, L=2)
        adapter = build_lorapt(tensorize(weights), 2)
        self.assertLessEqual(max_weight_gap(effective_weights(adapter), weights), 1e-10)

    def test_full_rank_residual_vanishes(self):
        adapter = build_lorapt(tensorize(random_weights(d=3, L=1)), 3)
        for split in adapter.splits().values():
            self.assertLessEqual(fnorm(split.residual), 1e-9)

    def test_zeroed_principal_leaves_residual(self):
        weights = random_weights(d=4, L=2)
        adapter = build_lorapt(tensorize(weights), 1)
        split = adapter.w_sa
        zero_principal = LowRankFactors.from_tubes(
            split.principal.U, torch.zeros_like(split.principal.s_tubes), split.principal.V
        )
        zeroed = TensorSplit(principal=zero_principal, residual=split.residual)
        self.assertEqual(fnorm(zeroed.effective() - split.residual), 0.0)

    def test_stored_array_count_matches_formula(self):
        adapter = build_lorapt(tensorize(random_weights(d=4, L=2)), 2)
        self.assertEqual(adapter.trainable_parameter_count(), param_count(METHOD_LORA_PT, 4, 2, 2))
        self.assertEqual(tuple(adapter.stored_arrays()['w_up.S_tubes'].shape), (2, 2))
        self.assertEqual(tuple(adapter.stored_arrays()['w_sa.U'].shape), (8, 4, 2))

    def test_biases_pass_through_unadapted(self):
        weights = random_weights(d=4, L=2)
        bias = torch.ones(16, dtype=torch.float64)
        weights.layers[0].extras['up_bias'] = bias
        adapter = build_lorapt(tensorize(weights), 1)
        self.assertEqual(adapter.trainable_parameter_count(), param_count(METHOD_LORA_PT, 4, 2, 1))
        self.assertNotIn('layer.1.up_bias', adapter.stored_arrays())
        merged = effective_weights(adapter)
        self.assertTrue(torch.equal(merged.layers[0].extras['up_bias'], bias))

    def test_attention_factors_do_not_touch_mlp_matrices(self):
        """Test perturbing w_sa's U leaves every up/down matrix bit-identical"""
        adapter = build_lorapt(tensorize(random_weights(d=4, L=2)), 1)
        split = adapter.w_sa
        nudged = LowRankFactors.from_tubes(
            Tensor3(split.principal.U.slices + 0.1), split.principal.s_tubes, split.principal.V
        )
        perturbed = replace(adapter, w_sa=TensorSplit(principal=nudged, residual=split.residual))
        before, after = effective_weights(adapter), effective_weights(perturbed)
        for index in range(2):
            self.assertTrue(torch.equal(before.layers[index].up, after.layers[index].up))
            self.assertTrue(torch.equal(before.layers[index].down, after.layers[index].down))
        self.assertFalse(torch.equal(before.layers[0].q, after.layers[0].q))

    def test_rank_range(self):
        stacked = tensorize(random_weights(d=3, L=1))
        for r in (0, 4):
            with self.assertRaises(InvalidArgumentError):
                build_lorapt(stacked, r)

    def test_single_layer_matches_pissa(self):
        """Test with one layer (n3 = 1) the w_up split equals the PISSA split"""
        self.assertLessEqual(lorapt_pissa_gap(random_weights(d=5, L=1, seed=4), 2), 1e-10)


class MatrixAdapterTests(SimpleTestCase):
    """Test the matrix LoRA and PISSA baselines"""

    def test_lora_starts_neutral(self):
        weights = random_weights(d=4, L=2)
        adapters = build_matrix_lora(weights, 2, seed=1)
        self.assertEqual(max_weight_gap(adapters.effective_weights(), weights), 0.0)
        adapter = adapters.adapters['layer.2.up']
        self.assertEqual(tuple(adapter.A.shape), (4, 2))
        self.assertEqual(tuple(adapter.B.shape), (2, 16))
        self.assertEqual(float(adapter.B.abs().max()), 0.0)

    def test_lora_init_is_seeded(self):
        weights = random_weights(d=4, L=1)
        first = build_matrix_lora(weights, 2, seed=5).adapters['layer.1.q'].A
        second = build_matrix_lora(weights, 2, seed=5).adapters['layer.1.q'].A
        self.assertTrue(torch.equal(first, second))

    def test_pissa_split_is_best_rank_r(self):
        matrix = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        U, sigma, V, residual = pissa_split(matrix, 2)
        self.assertLessEqual(float(((U * sigma) @ V.T + residual - matrix).abs().max()), 1e-12)
        s = torch.linalg.svdvals(matrix)
        self.assertAlmostEqual(float(torch.linalg.matrix_norm(residual)), float(torch.sqrt((s[2:] ** 2).sum())), places=10)

    def test_pissa_reproduces_weights(self):
        weights = random_weights(d=4, L=2)
        adapters = build_pissa(weights, 3)
        self.assertLessEqual(max_weight_gap(adapters.effective_weights(), weights), 1e-12)

    def test_counts_match_formulas(self):
        weights = random_weights(d=4, L=2)
        self.assertEqual(build_matrix_lora(weights, 2, 0).trainable_parameter_count(), param_count(METHOD_LORA, 4, 2, 2))
        self.assertEqual(build_pissa(weights, 2).trainable_parameter_count(), param_count(METHOD_PISSA, 4, 2, 2))

    def test_matrix_adapters_keep_biases(self):
        weights = random_weights(d=4, L=1)
        bias = torch.full((4,), 0.5, dtype=torch.float64)
        weights.layers[0].extras['o_bias'] = bias
        for adapters in (build_matrix_lora(weights, 1, seed=0), build_pissa(weights, 1)):
            merged = adapters.effective_weights()
            self.assertTrue(torch.equal(merged.layers[0].extras['o_bias'], bias))

    def test_rank_range(self):
        weights = random_weights(d=3, L=1)
        with self.assertRaises(InvalidArgumentError):
            build_matrix_lora(weights, 4, 0)
        with self.assertRaises(InvalidArgumentError):
            build_pissa(weights, 0)


class ParamCountTests(SimpleTestCase):
    """Test the closed-form trainable parameter counts"""

    def test_lorapt_base_configuration(self):
        self.assertEqual(param_count(METHOD_LORA_PT, 768, 12, 1), 165960)

    def test_lora_rank_32(self):
        self.assertEqual(param_count(METHOD_LORA, 768, 12, 32), 5308416)

    def test_full_tuning(self):
        self.assertEqual(param_count(METHOD_FULL, 768, 12, 1), 12 * 12 * 768 * 768)

    def test_pissa_equals_lorapt(self):
        for r in (1, 4, 16):
            self.assertEqual(param_count(METHOD_PISSA, 64, 3, r), param_count(METHOD_LORA_PT, 64, 3, r))

    def test_enumerated_array_sizes(self):
        """Test counts agree with the sizes of every stored array"""
        for method, d, L, r in [
            (METHOD_LORA_PT, 768, 12, 1),
            (METHOD_LORA, 768, 12, 32),
            (METHOD_PISSA, 16, 2, 3),
            (METHOD_FULL, 8, 2, 1),
        ]:
            shapes = adapter_array_shapes(method, d, L, r)
            self.assertEqual(sum(math.prod(s) for s in shapes.values()), param_count(method, d, L, r))

    def test_lorapt_at_its_rank_below_lora_at_its_rank(self):
        self.assertLess(param_count(METHOD_LORA_PT, 768, 12, 1), param_count(METHOD_LORA, 768, 12, 32))

    def test_invalid_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            param_count(METHOD_LORA_PT, 768, 12, 0)
        with self.assertRaises(InvalidArgumentError):
            param_count('adapter', 768, 12, 1)
        with self.assertRaises(InvalidArgumentError):
            param_count(METHOD_LORA, 0, 12, 1)
