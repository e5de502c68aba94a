"""
RNPx Test Configuration and Base Classes
"""

import logging
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add project root to path for imports
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from models.rnp_v1.model import ModelConfig, NeuralProcess, build_model
from models.rnp_v1.taskgen import DatasetSpec, Task, TaskSplit, generate_task

# Configure test logging
logging.basicConfig(level=logging.DEBUG, format='%(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

RUN_SLOW = os.environ.get('RNPX_RUN_SLOW') == '1'
slow = unittest.skipUnless(RUN_SLOW, 'set RNPX_RUN_SLOW=1 to run full-budget reproductions')

TINY_MODEL = ModelConfig(hidden=8, layers=1, z_dim=2)


class RNPxTestCase(unittest.TestCase):
    """Base test case for RNPx tests"""

    def setUp(self):
        """Set up test environment"""
        self.test_root = Path(__file__).parent.parent
        self.temp_dir = Path(tempfile.mkdtemp(prefix='rnpx_test_'))

        self.test_data_dir = self.temp_dir / 'data'
        self.test_data_dir.mkdir()
        self.test_configs_dir = self.temp_dir / 'configs'
        self.test_configs_dir.mkdir()
        self.test_runs_dir = self.temp_dir / 'runs'
        self.test_runs_dir.mkdir()

    def tearDown(self):
        """Clean up test environment"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def make_task(self, index=0, num_context=3, num_target=2, seed=0, dataset=None):
        """A small GP task with a fixed context/target split"""
        return generate_task(dataset or DatasetSpec(), seed, 'test', index,
                             TaskSplit.fixed(num_context, num_target))

    def make_model(self, seed=0, config=TINY_MODEL) -> NeuralProcess:
        return build_model(config, seed)

    def make_fixed_task(self) -> Task:
        """Hand-written 3-context / 2-target task"""
        return Task(np.array([[-1.0], [0.0], [1.0]]), np.array([[0.5], [-0.2], [0.3]]),
                    np.array([[-0.5], [0.5]]), np.array([[0.1], [0.0]]))

    def create_run_config(self, name='tiny', **sections):
        """Write a small, fast run configuration; keyword args override whole sections"""
        content = {
            'run': {'name': name, 'seed': 0},
            'dataset': {'kind': 'gp', 'kernel': 'rbf', 'n_train': 32, 'n_val': 4, 'n_test': 8,
                        'context_max': 10, 'total_points': 20},
            'model': {'hidden': 8, 'layers': 1, 'z_dim': 2},
            'objective': {'kind': 'rnp_vi', 'alpha': 0.7, 'num_samples': 4},
            'trainer': {'batch_tasks': 2, 'steps': 4, 'checkpoint_interval': 2, 'val_tasks': 2},
            'eval': {'num_samples': 4, 'n_tasks': 3, 'seeds': '0', 'hare_lynx_splits': 2},
            'paths': {'output_dir': str(self.test_runs_dir / '{name}' / 'seed{seed}'),
                      'hare_lynx': str(self.test_root / 'data' / 'hare_lynx' / 'hare_lynx.csv')},
        }
        for section, values in sections.items():
            content.setdefault(section, {}).update(values)

        lines = []
        for section, values in content.items():
            lines.append(f'[{section}]')
            lines += [f'{key} = {value}' for key, value in values.items()]
            lines.append('')
        config_path = self.test_configs_dir / f'{name}.ini'
        config_path.write_text('\n'.join(lines), encoding='utf-8')
        return config_path

    def create_hare_lynx_csv(self, rows=90, name='hare_lynx.csv', bad_row=None):
        """Synthetic year,hare,lynx series; `bad_row` (0-based) gets a non-numeric lynx value"""
        years = np.arange(1845, 1845 + rows)
        hare = 50 + 30 * np.sin(years / 1.6)
        lynx = 30 + 20 * np.sin(years / 1.6 - 1.0)
        lines = ['year,hare,lynx']
        for i, (y, h, l) in enumerate(zip(years, hare, lynx)):
            lines.append(f'{y},{h:.3f},{"n/a" if i == bad_row else f"{l:.3f}"}')
        path = self.test_data_dir / name
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path


if __name__ == '__main__':
    unittest.main()
