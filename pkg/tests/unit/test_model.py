"""
Unit tests for the neural process model and its checkpoints
"""

import json
import math
import struct
import unittest
import sys
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call
from hypothesis import given, settings, strategies as st

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from tests import RNPxTestCase
from models.rnp_v1.errors import DomainError, IntegrityError
from models.rnp_v1.model import (CHECKPOINT_MAGIC, DiagGaussian, ModelConfig, NeuralProcess,
                                 build_model, load_checkpoint, read_checkpoint_header,
                                 reparam_sample, save_checkpoint)
from models.rnp_v1.numkit import RngStream, as_tensor, finite_diff_check
from models.rnp_v1.taskgen import Task


class TestEncoder(RNPxTestCase):
    """DeepSet encoder and latent heads"""

    def setUp(self):
        super().setUp()
        self.model = self.make_model(seed=1)
        self.task = self.make_task(num_context=6, num_target=4)

    def test_permutation_invariance(self):
        perm = np.random.default_rng(0).permutation(6)
        base = self.model.encode_set(self.task.x_ctx, self.task.y_ctx)
        shuffled = self.model.encode_set(self.task.x_ctx[perm], self.task.y_ctx[perm])
        self.assertTrue(torch.allclose(base, shuffled, atol=1e-12, rtol=0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=30))
    def test_permutation_invariance_on_random_sets(self, seed, size):
        rng = RngStream(seed, "set", (size,))
        x, y = rng.normal(size, 1).numpy(), rng.normal(size, 1).numpy()
        perm = rng.permutation(size)
        base = self.model.encode_set(x, y)
        shuffled = self.model.encode_set(x[perm], y[perm])
        self.assertTrue(torch.allclose(base, shuffled, atol=1e-12, rtol=0))

    def test_duplication_invariance(self):
        """Mean pooling ignores uniform duplication of the set"""
        base = self.model.encode_set(self.task.x_ctx, self.task.y_ctx)
        doubled = self.model.encode_set(np.concatenate([self.task.x_ctx] * 2),
                                        np.concatenate([self.task.y_ctx] * 2))
        self.assertTrue(torch.allclose(base, doubled, atol=1e-12, rtol=0))

    def test_empty_set_rejected(self):
        with self.assertRaises(DomainError):
            self.model.encode_set(np.zeros((0, 1)), np.zeros((0, 1)))

    def test_zero_heads_give_floor_plus_log2(self):
        """With zeroed heads the std is floor + softplus(0)"""
        with torch.no_grad():
            self.model.latent_std.weight.zero_()
            self.model.latent_std.bias.zero_()
        dist = self.model.prior(self.task)
        expected = self.model.config.latent_std_floor + math.log(2.0)
        self.assertTrue(torch.allclose(dist.std, torch.full_like(dist.std, expected), atol=1e-12))

    def test_prior_equals_posterior_on_same_set(self):
        """Both paths share one encoder, so identical point sets give identical latents"""
        same = Task(self.task.x_ctx, self.task.y_ctx, self.task.x_ctx, self.task.y_ctx)
        prior = self.model.prior(same)
        posterior = self.model.latent_dist(self.model.encode_set(same.x_ctx, same.y_ctx))
        self.assertTrue(torch.equal(prior.mean, posterior.mean))
        self.assertTrue(torch.equal(prior.std, posterior.std))

    def test_prior_ignores_targets(self):
        other = Task(self.task.x_ctx, self.task.y_ctx, self.task.x_tgt, self.task.y_tgt + 5.0)
        self.assertTrue(torch.equal(self.model.prior(self.task).mean, self.model.prior(other).mean))
        self.assertFalse(torch.equal(self.model.posterior(self.task).mean,
                                     self.model.posterior(other).mean))


class TestSampling(RNPxTestCase):
    """Reparameterised sampling"""

    def test_reparam_formula(self):
        dist = DiagGaussian(as_tensor([1.0, -2.0]), as_tensor([0.5, 3.0]))
        z = reparam_sample(dist, as_tensor([[2.0, -1.0]]))
        self.assertTrue(torch.equal(z, as_tensor([[2.0, -5.0]])))

    def test_sample_moments(self):
        dist = DiagGaussian(as_tensor([0.3, -1.2]), as_tensor([0.7, 2.0]))
        z = reparam_sample(dist, RngStream(0, "moments").normal(50000, 2))
        self.assertTrue(torch.allclose(z.mean(0), dist.mean, atol=0.05))
        self.assertTrue(torch.allclose(z.std(0), dist.std, atol=0.05))


class TestDecoder(RNPxTestCase):
    """Gaussian decoder"""

    def test_output_shapes(self):
        model = self.make_model()
        z = RngStream(0, "z").normal(5, 2)
        pred = model.decode(np.linspace(-1, 1, 7)[:, None], z)
        self.assertEqual(tuple(pred.mean.shape), (5, 7, 1))
        self.assertEqual(tuple(pred.point_log_likelihood(np.zeros((7, 1))).shape), (5, 7))
        self.assertEqual(tuple(pred.joint_log_likelihood(np.zeros((7, 1))).shape), (5,))
        self.assertTrue(bool((pred.std >= model.config.decoder_std_floor).all()))

    def test_perfect_fit_hits_ceiling(self):
        """mean = y and std at its floor give log N(0 | 0, 0.1^2) per point"""
        model = self.make_model()
        with torch.no_grad():
            model.decoder_mean.weight.zero_()
            model.decoder_mean.bias.fill_(0.25)
            model.decoder_std.weight.zero_()
            model.decoder_std.bias.fill_(-60.0)
        pred = model.decode(np.zeros((3, 1)), torch.zeros(1, 2, dtype=torch.float64))
        ll = pred.point_log_likelihood(np.full((3, 1), 0.25))
        self.assertTrue(torch.allclose(ll, torch.full_like(ll, 1.383647), atol=1e-6))

    def test_decode_gradient_matches_finite_differences(self):
        model = self.make_model(config=ModelConfig(hidden=8, layers=1, z_dim=2, activation='tanh'))
        x, y = np.linspace(-1, 1, 4)[:, None], np.linspace(0.5, -0.5, 4)[:, None]

        def f(params):
            return model.decode(x, params[0]).joint_log_likelihood(y).sum()

        result = finite_diff_check(f, [as_tensor([[0.3, -0.4]])], 1e-6)
        self.assertLess(result.max_rel_error, 1e-6)

    def test_stds_respect_floors_on_extreme_inputs(self):
        model = self.make_model(seed=2)
        task = Task(np.array([[1e3], [-1e3], [0.0]]), np.array([[-50.0], [50.0], [1e-9]]),
                    np.array([[1e3]]), np.array([[0.0]]))
        dist = model.prior(task)
        self.assertTrue(bool((dist.std >= model.config.latent_std_floor).all()))
        pred = model.decode(np.array([[1e3], [-1e3]]), dist.mean.unsqueeze(0))
        self.assertTrue(bool((pred.std >= model.config.decoder_std_floor).all()))


class _TargetLogLikelihood(torch.nn.Module):
    """Posterior-sampled target log-likelihood as a module, for functional_call."""

    def __init__(self, model, task, eps):
        super().__init__()
        self.model = model
        self.task = task
        self.eps = eps

    def forward(self):
        z = reparam_sample(self.model.posterior(self.task), self.eps)
        return self.model.decode(self.task.x_tgt, z).joint_log_likelihood(self.task.y_tgt).mean()


class TestModelGradient(RNPxTestCase):
    """Whole-model forward and backward"""

    def test_parameter_gradients_match_finite_differences(self):
        """Every parameter of a tanh model on a 3-context/2-target task"""
        model = self.make_model(seed=4, config=ModelConfig(hidden=8, layers=1, z_dim=2, activation='tanh'))
        task = self.make_task(num_context=3, num_target=2, seed=4)
        wrapper = _TargetLogLikelihood(model, task, RngStream(4, 'grad-check').normal(3, 2))
        names = [f"model.{name}" for name, _ in model.named_parameters()]

        def f(params):
            return functional_call(wrapper, dict(zip(names, params)), ())

        result = finite_diff_check(f, [p.detach() for p in model.parameters()], 1e-6)
        self.assertIsNone(result.failed_index)
        self.assertLess(result.max_rel_error, 1e-4)


class TestCheckpoints(RNPxTestCase):
    """Self-describing checkpoint files"""

    def setUp(self):
        super().setUp()
        self.model = self.make_model(seed=3)
        self.path = self.test_runs_dir / 'ckpt_final'

    def test_roundtrip_is_byte_identical(self):
        save_checkpoint(self.model, self.path, 'abc123', 3)
        reloaded = load_checkpoint(self.path)
        second = save_checkpoint(reloaded, self.test_runs_dir / 'again', 'abc123', 3)
        self.assertEqual(self.path.read_bytes(), second.read_bytes())

    def test_reload_gives_identical_predictions(self):
        save_checkpoint(self.model, self.path)
        reloaded = load_checkpoint(self.path)
        task = self.make_task()
        z = RngStream(0, "z").normal(3, 2)
        with torch.no_grad():
            before = self.model.decode(task.x_tgt, z).mean
            after = reloaded.decode(task.x_tgt, z).mean
        self.assertTrue(torch.equal(before, after))
        self.assertTrue(torch.equal(self.model.prior(task).std, reloaded.prior(task).std))

    def test_header_fields(self):
        save_checkpoint(self.model, self.path, 'deadbeef', 11)
        header = read_checkpoint_header(self.path)
        self.assertEqual(header.config_hash, 'deadbeef')
        self.assertEqual(header.seed, 11)
        self.assertEqual(header.model, self.model.config)

    def _rewrite_header(self, mutate):
        raw = self.path.read_bytes()
        start = len(CHECKPOINT_MAGIC) + 8
        (length,) = struct.unpack('<Q', raw[len(CHECKPOINT_MAGIC):start])
        meta = json.loads(raw[start:start + length])
        mutate(meta)
        header = json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
        self.path.write_bytes(CHECKPOINT_MAGIC + struct.pack('<Q', len(header)) + header
                              + raw[start + length:])

    def test_tampered_shape_rejected(self):
        save_checkpoint(self.model, self.path)

        def swap_shape(meta):
            meta['layers'][0]['shape'] = list(reversed(meta['layers'][0]['shape']))

        self._rewrite_header(swap_shape)
        with self.assertRaises(IntegrityError) as ctx:
            load_checkpoint(self.path)
        self.assertIn(self._first_layer_name(), str(ctx.exception))

    def _first_layer_name(self):
        return next(iter(self.model.state_dict()))

    def test_tampered_payload_rejected(self):
        save_checkpoint(self.model, self.path)
        raw = bytearray(self.path.read_bytes())
        raw[-1] ^= 0xFF
        self.path.write_bytes(bytes(raw))
        with self.assertRaises(IntegrityError):
            load_checkpoint(self.path)

    def test_incomplete_layer_entries_rejected(self):
        """Missing or malformed layer fields surface as IntegrityError"""
        mutations = [
            lambda meta: meta['layers'][0].pop('count'),
            lambda meta: meta['layers'][0].pop('offset'),
            lambda meta: meta['layers'][1].pop('shape'),
            lambda meta: meta['layers'][0].update(shape='8x3'),
            lambda meta: meta['layers'][0].update(count=None),
            lambda meta: meta['layers'].__setitem__(0, 'weights'),
        ]
        for mutate in mutations:
            save_checkpoint(self.model, self.path)
            self._rewrite_header(mutate)
            with self.assertRaises(IntegrityError):
                load_checkpoint(self.path)

    def test_architecture_mismatch_rejected(self):
        save_checkpoint(self.model, self.path)
        self._rewrite_header(lambda meta: meta['model'].update(hidden=16))
        with self.assertRaises(IntegrityError):
            load_checkpoint(self.path)

    def test_not_a_checkpoint(self):
        self.path.write_bytes(b'not a checkpoint at all')
        with self.assertRaises(IntegrityError):
            load_checkpoint(self.path)
        with self.assertRaises(IntegrityError):
            load_checkpoint(self.test_runs_dir / 'missing')

    def test_initialisation_is_seeded(self):
        a, b = build_model(ModelConfig(hidden=8, layers=1, z_dim=2), 5), self.make_model(seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(p, q))
        self.assertIsInstance(a, NeuralProcess)


if __name__ == '__main__':
    unittest.main()
