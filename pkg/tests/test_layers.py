"""
Tests for the parameter registry and the shared transformer block
"""

import unittest
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

import rec_tensor as T
from rec_layers import (
    BLOCK_PARAM_SUFFIXES,
    Module,
    attention_mask,
    block_forward,
    block_param_count,
    init_block,
)
from rec_tensor import Tensor
from lab_fixtures import parameter_gradient_error


def make_block(d=8, ffn=16, seed=0):
    module = Module()
    init_block(module, "layers.0", d, ffn, np.random.default_rng(seed))
    return module


class TestModuleRegistry(unittest.TestCase):
    """Named parameters, trainability and state round trips"""

    def test_params_are_float32_copies(self):
        module = Module()
        source = np.ones(3)
        p = module.add_param("w", source)
        source[0] = 5.0
        self.assertEqual(p.data.dtype, np.float32)
        assert_array_equal(p.data, np.ones(3))
        self.assertTrue(p.requires_grad)

    def test_duplicate_name_rejected(self):
        module = Module()
        module.add_param("w", np.zeros(2))
        with self.assertRaises(ValueError):
            module.add_param("w", np.zeros(2))

    def test_set_trainable_is_exact(self):
        module = make_block()
        keep = ["layers.0.attn.wq", "layers.0.ffn.b2"]
        module.set_trainable(keep)
        self.assertEqual(sorted(module.trainable_names()), sorted(keep))
        self.assertEqual(len(module.parameters(trainable_only=True)), 2)

    def test_set_trainable_unknown_name(self):
        with self.assertRaises(KeyError):
            make_block().set_trainable(["layers.9.attn.wq"])

    def test_state_dict_round_trip(self):
        a, b = make_block(seed=1), make_block(seed=2)
        b.load_state_dict(a.state_dict())
        for name in a.params:
            assert_array_equal(a.params[name].data, b.params[name].data)

    def test_state_dict_is_a_copy(self):
        module = make_block()
        state = module.state_dict()
        state["layers.0.attn.wq"][...] = 9.0
        self.assertFalse(np.any(module.params["layers.0.attn.wq"].data == 9.0))

    def test_load_state_dict_errors(self):
        module = make_block()
        state = module.state_dict()
        del state["layers.0.ln1.gamma"]
        with self.assertRaises(KeyError):
            module.load_state_dict(state)
        state = module.state_dict()
        state["layers.0.ln1.gamma"] = np.ones(3)
        with self.assertRaises(T.ShapeError):
            module.load_state_dict(state)

    def test_load_state_dict_ignores_extra_keys(self):
        module = make_block()
        state = module.state_dict()
        state["unrelated"] = np.zeros(1)
        module.load_state_dict(state)

    def test_zero_grad(self):
        module = make_block()
        for p in module.params.values():
            p.grad = np.ones_like(p.data)
        module.zero_grad()
        self.assertTrue(all(p.grad is None for p in module.params.values()))


class TestBlock(unittest.TestCase):
    """Parameter layout, masking and gradients of one block"""

    def test_block_parameter_names(self):
        module = make_block()
        expected = [f"layers.0.{s}" for s in BLOCK_PARAM_SUFFIXES]
        self.assertEqual(sorted(module.params), sorted(expected))

    def test_block_param_count_matches_registry(self):
        for d, ffn in [(8, 16), (12, 48), (64, 256)]:
            module = make_block(d, ffn)
            self.assertEqual(module.parameter_count(), block_param_count(d, ffn))

    def test_attention_mask_shape_and_padding(self):
        mask = attention_mask(np.array([[1, 1, 0]]), causal=False)
        self.assertEqual(mask.shape, (1, 1, 3, 3))
        assert_array_equal(mask[0, 0, :, 2], [False, False, False])
        self.assertTrue(mask[0, 0, 2, 0])

    def test_attention_mask_causal(self):
        mask = attention_mask(np.ones((1, 4)), causal=True)
        assert_array_equal(mask[0, 0], np.tril(np.ones((4, 4), dtype=bool)))

    def test_causal_block_ignores_future_positions(self):
        module = make_block()
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 4, 8))
        y = x.copy()
        y[0, 3] += 10.0
        mask = attention_mask(np.ones((1, 4)), causal=True)
        out_x = block_forward(module, "layers.0", Tensor(x), 2, mask).data
        out_y = block_forward(module, "layers.0", Tensor(y), 2, mask).data
        assert_allclose(out_x[0, :3], out_y[0, :3], atol=1e-5)
        self.assertFalse(np.allclose(out_x[0, 3], out_y[0, 3]))

    def test_padded_keys_do_not_leak(self):
        module = make_block()
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 8))
        y = x.copy()
        y[0, 2] = rng.normal(size=8)
        mask = attention_mask(np.array([[1, 1, 0]]), causal=False)
        out_x = block_forward(module, "layers.0", Tensor(x), 2, mask).data
        out_y = block_forward(module, "layers.0", Tensor(y), 2, mask).data
        assert_allclose(out_x[0, :2], out_y[0, :2], atol=1e-5)

    def test_capture_records_attention(self):
        module = make_block()
        capture = []
        x = Tensor(np.random.default_rng(6).normal(size=(2, 3, 8)))
        block_forward(module, "layers.0", x, 2, attention_mask(np.ones((2, 3)), False), capture=capture)
        self.assertEqual(len(capture), 1)
        self.assertEqual(capture[0].shape, (2, 2, 3, 3))
        assert_allclose(capture[0].sum(axis=-1), np.ones((2, 2, 3)), rtol=1e-5)

    def test_block_gradients(self):
        module = make_block()
        # larger weights so the attention path contributes measurably
        rng = np.random.default_rng(8)
        for name, p in module.params.items():
            p.data[...] = rng.normal(0.0, 0.3, p.shape)
        x = np.random.default_rng(9).normal(size=(2, 3, 8))
        w = np.random.default_rng(10).normal(size=(2, 3, 8))
        mask = attention_mask(np.array([[1, 1, 1], [1, 1, 0]]), causal=True)

        def loss():
            out = block_forward(module, "layers.0", Tensor(x), 2, mask)
            return T.tsum(T.mul(out, Tensor(w)))

        self.assertLess(parameter_gradient_error(module, loss, entries=3), 1e-4)
        self.assertLess(parameter_gradient_error(module, loss, entries=3, h=1e-3), 1e-4)


if __name__ == '__main__':
    unittest.main()
