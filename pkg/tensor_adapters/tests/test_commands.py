"""
Tests for the management commands and their exit codes.
"""

import csv
import os
import tempfile
from io import StringIO

import numpy as np
import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from tensor_adapters.cli import (
    EXIT_FAILURE,
    EXIT_INVALID_ARGS,
    EXIT_MALFORMED,
    EXIT_UNDEFINED_METRIC,
    exit_code_for,
)
from tensor_adapters.container import load_checkpoint, read_container, save_mask, write_container
from tensor_adapters.exceptions import (
    ConfigError,
    ContainerError,
    DecompositionError,
    InvalidArgumentError,
    NumericError,
    UndefinedMetricError,
)
from tensor_adapters.models import ExperimentRun
from tensor_adapters.segmetrics import Mask3D

SMALL_CONFIG = """\
# toy run small enough for the test suite
d = 8
n_heads = 2
layers = 2
seq_len = 4
rank = 1
method = lora-pt
lr0 = 0.01
total_iters = {total_iters}
batch = 4
seed = 0
task = regression
"""


def run(name, *args):
    out = StringIO()
    call_command(name, *args, stdout=out)
    return out.getvalue()


def relative_gap(a, b):
    return max(
        float(torch.linalg.matrix_norm(m1 - m2) / torch.linalg.matrix_norm(m2))
        for (_, m1), (_, m2) in zip(a.named_matrices(), b.named_matrices())
    )


class CommandTestMixin:

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmpdir.cleanup()

    def path(self, name):
        return os.path.join(self.tmpdir.name, name)

    def write_config(self, total_iters=5):
        path = self.path('toy.cfg')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(SMALL_CONFIG.format(total_iters=total_iters))
        return path

    def assertExitCode(self, code, name, *args):
        with self.assertRaises(CommandError) as caught:
            run(name, *args)
        self.assertEqual(caught.exception.returncode, code)
        return caught.exception


class ExitCodeTests(SimpleTestCase):
    """Test the library error to exit code mapping"""

    def test_mapping(self):
        self.assertEqual(exit_code_for(UndefinedMetricError('x')), EXIT_UNDEFINED_METRIC)
        self.assertEqual(exit_code_for(ContainerError('x')), EXIT_MALFORMED)
        self.assertEqual(exit_code_for(ConfigError('x')), EXIT_MALFORMED)
        self.assertEqual(exit_code_for(InvalidArgumentError('x')), EXIT_INVALID_ARGS)
        self.assertEqual(exit_code_for(NumericError('x')), EXIT_FAILURE)
        self.assertEqual(exit_code_for(DecompositionError('x')), EXIT_FAILURE)


class CountParamsCommandTests(CommandTestMixin, SimpleTestCase):
    """Test the count_params command"""

    def test_lorapt_base(self):
        output = run('count_params', '--method', 'lora-pt', '--d', '768', '--layers', '12', '--rank', '1')
        self.assertEqual(output.strip(), '165960')

    def test_share_of_full_tuning(self):
        output = run('count_params', '--method', 'lora-pt', '--d', '768', '--layers', '12', '--rank', '1', '--share')
        lines = output.splitlines()
        self.assertEqual(lines[0], '165960')
        self.assertEqual(lines[1], '0.1954% of full fine-tuning (84934656)')

    def test_lora_rank_32(self):
        output = run('count_params', '--method', 'lora', '--d', '768', '--layers', '12', '--rank', '32')
        self.assertEqual(output.strip(), '5308416')

    def test_rank_zero(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'count_params', '--method', 'lora-pt', '--rank', '0')

    def test_rank_above_d(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'count_params', '--method', 'lora', '--d', '4', '--rank', '5')

    def test_unknown_method(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'count_params', '--method', 'adapter')

    def test_missing_flag_exits_invalid_args(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'count_params', '--rank', '1')

    def test_non_integer_flag(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'count_params', '--method', 'lora', '--rank', 'two')


class VerifyCommandTests(CommandTestMixin, SimpleTestCase):
    """Test the verify command"""

    def test_tprod_seed_7(self):
        output = run('verify', '--suite', 'tprod', '--seed', '7')
        self.assertIn('PASS', output)
        self.assertNotIn('FAIL', output)
        self.assertIn('seed 7', output)

    def test_oracle_limit_setting(self):
        with override_settings(TSPT={'ORACLE_LIMIT': 1}):
            self.assertExitCode(EXIT_INVALID_ARGS, 'verify', '--suite', 'tprod', '--seed', '7')

    def test_unknown_suite(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'verify', '--suite', 'fft', '--seed', '7')


class ContainerCommandTests(CommandTestMixin, SimpleTestCase):
    """Test synth_checkpoint, inspect, tensorize, decompose and merge"""

    def synth(self, name='ckpt.tspt', d=4, layers=2, dtype='f32'):
        path = self.path(name)
        run('synth_checkpoint', '--out', path, '--d', str(d), '--layers', str(layers), '--seed', '3', '--dtype', dtype)
        return path

    def test_decompose_merge_round_trip_f32(self):
        ckpt = self.synth()
        adapter = self.path('adapter.tspt')
        merged = self.path('merged.tspt')
        output = run('decompose', '--in', ckpt, '--rank', '1', '--out', adapter)
        self.assertIn('w_sa 4x4x8', output)
        self.assertIn('energy captured at r=1', output)
        self.assertIn('trainable parameters: 156', output)
        run('merge', '--adapter', adapter, '--out', merged)
        self.assertLessEqual(relative_gap(load_checkpoint(merged), load_checkpoint(ckpt)), 1e-6)

    def test_decompose_merge_round_trip_f64(self):
        ckpt = self.synth(dtype='f64')
        adapter = self.path('adapter.tspt')
        merged = self.path('merged.tspt')
        run('decompose', '--in', ckpt, '--rank', '2', '--out', adapter, '--dtype', 'f64')
        run('merge', '--adapter', adapter, '--out', merged, '--dtype', 'f64')
        self.assertLessEqual(relative_gap(load_checkpoint(merged), load_checkpoint(ckpt)), 1e-12)

    def test_biases_survive_decompose_and_merge(self):
        ckpt = self.synth()
        container = read_container(ckpt)
        bias = np.arange(4, dtype=np.float32)
        container.arrays['layer.1.q_bias'] = bias
        write_container(ckpt, container.arrays, container.meta)
        adapter = self.path('adapter.tspt')
        merged = self.path('merged.tspt')
        output = run('decompose', '--in', ckpt, '--rank', '1', '--out', adapter)
        self.assertIn('trainable parameters: 156', output)
        self.assertIn('layer.1.q_bias', read_container(adapter).arrays)
        run('merge', '--adapter', adapter, '--out', merged)
        merged_arrays = read_container(merged).arrays
        self.assertTrue(np.array_equal(merged_arrays['layer.1.q_bias'], bias))
        self.assertNotIn('layer.2.q_bias', merged_arrays)
        self.assertEqual(load_checkpoint(merged).layers[0].extras.keys(), {'q_bias'})

    def test_merge_non_numeric_meta_exits_malformed(self):
        ckpt = self.synth()
        adapter = self.path('adapter.tspt')
        run('decompose', '--in', ckpt, '--rank', '1', '--out', adapter)
        container = read_container(adapter)
        container.meta['rank'] = 'one'
        write_container(adapter, container.arrays, container.meta)
        self.assertExitCode(EXIT_MALFORMED, 'merge', '--adapter', adapter, '--out', self.path('m.tspt'))

    def test_merge_non_finite_adapter_exits_malformed(self):
        ckpt = self.synth()
        adapter = self.path('adapter.tspt')
        run('decompose', '--in', ckpt, '--rank', '1', '--out', adapter)
        container = read_container(adapter)
        container.arrays['w_down.residual'][0, 0, 0] = np.inf
        write_container(adapter, container.arrays, container.meta)
        self.assertExitCode(EXIT_MALFORMED, 'merge', '--adapter', adapter, '--out', self.path('m.tspt'))

    def test_decompose_tubal_rank_tolerance_setting(self):
        ckpt = self.synth()
        output = run('decompose', '--in', ckpt, '--rank', '1', '--out', self.path('a.tspt'))
        self.assertIn('tubal rank 4', output)
        with override_settings(TSPT={'TUBAL_RANK_TOL': 2.0}):
            output = run('decompose', '--in', ckpt, '--rank', '1', '--out', self.path('b.tspt'))
        self.assertEqual(output.count('tubal rank 0'), 3)

    def test_decompose_malformed_container(self):
        junk = self.path('junk.tspt')
        with open(junk, 'wb') as f:
            f.write(b'NOTATSPTFILE')
        self.assertExitCode(EXIT_MALFORMED, 'decompose', '--in', junk, '--rank', '1', '--out', self.path('a.tspt'))

    def test_decompose_rank_out_of_range(self):
        ckpt = self.synth()
        out = self.path('a.tspt')
        self.assertExitCode(EXIT_INVALID_ARGS, 'decompose', '--in', ckpt, '--rank', '5', '--out', out)
        self.assertExitCode(EXIT_INVALID_ARGS, 'decompose', '--in', ckpt, '--rank', '0', '--out', out)
        self.assertFalse(os.path.exists(out))

    def test_merge_rejects_checkpoint(self):
        ckpt = self.synth()
        self.assertExitCode(EXIT_MALFORMED, 'merge', '--adapter', ckpt, '--out', self.path('m.tspt'))

    def test_inspect(self):
        ckpt = self.synth()
        output = run('inspect', ckpt)
        self.assertIn('TSPT0001, 12 arrays', output)
        self.assertIn('layer.2.down', output)
        self.assertIn('"kind": "checkpoint"', output)

    def test_inspect_malformed(self):
        junk = self.path('junk.tspt')
        with open(junk, 'wb') as f:
            f.write(b'TSPT0001')
        self.assertExitCode(EXIT_MALFORMED, 'inspect', junk)

    def test_tensorize(self):
        ckpt = self.synth(layers=3)
        stacked = self.path('stacked.tspt')
        output = run('tensorize', '--in', ckpt, '--out', stacked)
        self.assertIn('w_up: 4x16x3', output)
        self.assertEqual(read_container(stacked).arrays['w_sa'].shape, (12, 4, 4))

    def test_bad_dtype(self):
        self.assertExitCode(EXIT_INVALID_ARGS, 'synth_checkpoint', '--out', self.path('x.tspt'), '--dtype', 'f16')


class SegMetricsCommandTests(CommandTestMixin, SimpleTestCase):
    """Test the seg_metrics command"""

    def mask(self, name, blocks, spacing=(1.0, 1.0, 1.0)):
        voxels = np.zeros((20, 4, 4), dtype=bool)
        for block in blocks:
            voxels[block] = True
        path = self.path(name)
        save_mask(path, Mask3D(voxels, spacing))
        return path

    def test_identical_masks(self):
        pred = self.mask('pred.tspt', [np.s_[2:6, 1:3, 1:3]])
        output = run('seg_metrics', '--pred', pred, '--gt', pred)
        self.assertIn('dice=1.0 hd95=0.0', output)

    def test_small_blob_removed_leaves_hd95_undefined(self):
        pred = self.mask('pred.tspt', [np.s_[0:10, 0, 0]])
        gt = self.mask('gt.tspt', [np.s_[15:18, 2, 2]])
        out = StringIO()
        with self.assertRaises(CommandError) as caught:
            call_command('seg_metrics', '--pred', pred, '--gt', gt, '--postprocess', '1000', stdout=out)
        self.assertEqual(caught.exception.returncode, EXIT_UNDEFINED_METRIC)
        self.assertIn('dice=0.0 hd95=undefined', out.getvalue())

    def test_without_postprocess(self):
        pred = self.mask('pred.tspt', [np.s_[0:1, 0, 0]])
        gt = self.mask('gt.tspt', [np.s_[3:4, 0, 0]])
        self.assertIn('dice=0.0 hd95=3.0', run('seg_metrics', '--pred', pred, '--gt', gt))

    def test_shape_mismatch(self):
        pred = self.mask('pred.tspt', [np.s_[0:2, 0, 0]])
        other = self.path('other.tspt')
        save_mask(other, Mask3D(np.ones((2, 2, 2), dtype=bool)))
        self.assertExitCode(EXIT_INVALID_ARGS, 'seg_metrics', '--pred', pred, '--gt', other)

    def test_negative_threshold(self):
        pred = self.mask('pred.tspt', [np.s_[0:2, 0, 0]])
        self.assertExitCode(EXIT_INVALID_ARGS, 'seg_metrics', '--pred', pred, '--gt', pred, '--postprocess', '-1')


class ExperimentCommandTests(CommandTestMixin, TestCase):
    """Test train_toy and rank_sweep, including the runs they record"""

    def test_train_toy(self):
        output = run('train_toy', '--config', self.write_config())
        self.assertIn('method=lora-pt rank=1 params=300 seed=0', output)
        self.assertIn('final_loss=', output)
        run_row = ExperimentRun.objects.get()
        self.assertEqual(run_row.status, 'COMPLETED')
        self.assertEqual(run_row.params, 300)
        self.assertEqual(len(run_row.config_checksum), 64)

    def test_train_toy_saves_adapter(self):
        adapter = self.path('trained.tspt')
        run('train_toy', '--config', self.write_config(), '--save-adapter', adapter)
        container = read_container(adapter)
        self.assertEqual(container.meta['trained_steps'], 5)
        self.assertEqual(container.arrays['w_up.U'].shape, (2, 8, 1))

    def test_zero_iterations_is_bad_config(self):
        self.assertExitCode(EXIT_MALFORMED, 'train_toy', '--config', self.write_config(total_iters=0))
        self.assertEqual(ExperimentRun.objects.count(), 0)

    def test_missing_config(self):
        self.assertExitCode(EXIT_MALFORMED, 'train_toy', '--config', self.path('absent.cfg'))

    def test_rank_sweep_csv(self):
        output = run('rank_sweep', '--config', self.write_config(total_iters=3), '--ranks', '1,2,4')
        rows = list(csv.reader(StringIO(output)))
        self.assertEqual(rows[0], ['method', 'rank', 'params', 'final_loss', 'seed'])
        self.assertEqual(len(rows), 4)
        self.assertEqual([row[1] for row in rows[1:]], ['1', '2', '4'])
        self.assertEqual(rows[1][2], '300')
        self.assertEqual(ExperimentRun.objects.count(), 3)

    def test_rank_sweep_to_file(self):
        out = self.path('sweep.csv')
        run('rank_sweep', '--config', self.write_config(total_iters=2), '--ranks', '1',
            '--methods', 'lora-pt,lora', '--out', out)
        with open(out, encoding='utf-8') as f:
            rows = list(csv.reader(f))
        self.assertEqual([row[0] for row in rows[1:]], ['lora-pt', 'lora'])

    def test_rank_sweep_bad_ranks(self):
        config = self.write_config()
        self.assertExitCode(EXIT_INVALID_ARGS, 'rank_sweep', '--config', config, '--ranks', '1,x')
        self.assertExitCode(EXIT_INVALID_ARGS, 'rank_sweep', '--config', config, '--ranks', '9')
        self.assertExitCode(EXIT_INVALID_ARGS, 'rank_sweep', '--config', config, '--ranks', '1', '--methods', 'adapter')
