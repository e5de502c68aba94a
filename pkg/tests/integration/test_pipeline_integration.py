"""
Integration tests for the RNPx training and evaluation pipeline
"""

import math
import unittest
import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from tests import RNPxTestCase
from models.rnp_v1.evaluate import (EvalSplit, MisspecProtocol, SweepKind, emit_prediction_dump,
                                    evaluate_splits, read_metrics, run_misspec_protocol, run_sweep,
                                    write_metrics)
from models.rnp_v1.model import load_checkpoint, read_checkpoint_header
from models.rnp_v1.taskgen import TaskSource, read_task_cache
from models.rnp_v1.train import train
from scripts.prepare_datasets import DatasetPreparator
from scripts.rnpx import run_labels
from scripts.run_config import load_run_config


class TestPipelineIntegration(RNPxTestCase):
    """Configuration -> training -> checkpoint -> evaluation, sweeps and protocols"""

    def setUp(self):
        super().setUp()
        fixture = self.test_root / 'tests' / 'fixtures' / 'tiny_run.ini'
        self.cfg = load_run_config(fixture, [f'paths.output_dir={self.test_runs_dir}/{{name}}/seed{{seed}}'])

    def test_train_then_evaluate(self):
        """A trained checkpoint reloads and feeds every evaluation path"""
        # Step 1: train
        result = train(self.cfg.train_config(), self.cfg.output_dir, progress=False)
        self.assertEqual(result.final_checkpoint, self.cfg.checkpoint_path)
        header = read_checkpoint_header(result.final_checkpoint)
        self.assertEqual(header.config_hash, self.cfg.config_hash())
        self.assertEqual(len(read_metrics(self.cfg.metrics_path)), 4)

        # Step 2: evaluate the reloaded model on the test split
        model = load_checkpoint(result.final_checkpoint)
        tasks = TaskSource(self.cfg.dataset, self.cfg.seed, 'test').take(self.cfg.eval.n_tasks)
        records = evaluate_splits(model, tasks, self.cfg.eval.num_samples, self.cfg.eval.seeds,
                                  run_labels(self.cfg))
        self.assertEqual(len(records), 2 * 2)
        self.assertTrue(all(math.isfinite(r.ll_mean) for r in records))

        # Step 3: the same estimate from the in-memory model
        direct = evaluate_splits(result.model, tasks, self.cfg.eval.num_samples, self.cfg.eval.seeds,
                                 run_labels(self.cfg))
        self.assertEqual([r.ll_mean for r in records], [r.ll_mean for r in direct])

        # Step 4: K sweep and noisy-context protocol append to one metrics file
        sweep = run_sweep(SweepKind.K, [1, 8], self.cfg.dataset, self.cfg.eval,
                          result.final_checkpoint, run_labels(self.cfg), self.cfg.seed)
        noisy = run_misspec_protocol(MisspecProtocol.NOISY_CONTEXT, model, self.cfg.dataset,
                                     self.cfg.eval, run_labels(self.cfg), self.cfg.seed)
        out = self.test_runs_dir / 'eval.csv'
        write_metrics(records + sweep + noisy, out)
        stored = read_metrics(out)
        self.assertEqual(len(stored), 4 + 2 * 2 * 2 + 2 * 2)
        self.assertEqual({r.split for r in noisy}, {EvalSplit.TARGET.value})

        # Step 5: prediction dump
        frame = emit_prediction_dump(model, tasks[0], self.cfg.eval.num_samples,
                                     self.test_runs_dir / 'predictions.csv', grid_points=50)
        self.assertEqual(len(frame), 50 + tasks[0].num_context)

    def test_train_on_prepared_cache(self):
        """Cached tasks are identical to generated ones, so training on either matches"""
        preparator = DatasetPreparator(self.cfg.dataset, self.cfg.seed, self.test_data_dir)
        path = preparator.prepare_split('train', progress=False)
        self.assertTrue(preparator.verify('train'))
        cached, manifest = read_task_cache(path)
        self.assertEqual(manifest['seed'], self.cfg.seed)
        self.assertEqual(len(cached), self.cfg.dataset.n_train)

        generated = train(self.cfg.train_config(), self.test_runs_dir / 'generated', progress=False)
        from_cache = train(self.cfg.train_config(), self.test_runs_dir / 'cached',
                           train_tasks=cached, progress=False)
        self.assertEqual(generated.losses, from_cache.losses)


if __name__ == '__main__':
    unittest.main()
