#!/usr/bin/env python3
"""
Pre-generate RNPx task datasets.

Writes each split of the configured dataset as a JSON-lines task cache
(`<output-dir>/<label>_<split>.jsonl`) with a `.manifest.json` sidecar
recording the dataset spec, seed and code version. Generation is a pure
function of (spec, seed, split, index), so caches are only a speed-up.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional

from tqdm import tqdm

sys.path.insert(0, str(Path(__file__).parent.parent))

from models.rnp_v1.errors import ConfigError, RNPError
from models.rnp_v1.taskgen import DatasetSpec, TaskSource, read_task_cache, write_task_cache
from scripts.run_config import PROJECT_ROOT, load_run_config

logger = logging.getLogger(__name__)


class DatasetPreparator:
    def __init__(self, dataset: DatasetSpec, seed: int, output_dir):
        self.dataset = dataset
        self.seed = seed
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def cache_path(self, split: str) -> Path:
        return self.output_dir / f"{self.dataset.label}_{split}.jsonl"

    def prepare_split(self, split: str, limit: Optional[int] = None, progress: bool = True) -> Path:
        source = TaskSource(self.dataset, self.seed, split)
        count = min(limit or len(source), len(source))
        logger.info(f"Generating {count} {self.dataset.label} {split} tasks (seed {self.seed})")
        tasks = (source[i] for i in tqdm(range(count), desc=split, disable=not progress, leave=False))
        manifest = {"dataset": self.dataset.model_dump(mode="json"), "seed": self.seed, "split": split}
        return write_task_cache(tasks, self.cache_path(split), manifest)

    def prepare(self, splits: Iterable[str], limit: Optional[int] = None,
                progress: bool = True) -> List[Path]:
        return [self.prepare_split(split, limit, progress) for split in splits]

    def verify(self, split: str) -> bool:
        """Re-generate the first cached task and compare it with the cache."""
        tasks, manifest = read_task_cache(self.cache_path(split))
        if manifest.get("seed") != self.seed or not tasks:
            return False
        fresh = TaskSource(self.dataset, self.seed, split)[0]
        return fresh.to_record() == tasks[0].to_record()


def main():
    parser = argparse.ArgumentParser(description='Pre-generate RNPx task caches')
    parser.add_argument('--config', help='INI run configuration')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override one configuration key')
    parser.add_argument('--output-dir', default=str(PROJECT_ROOT / 'data' / 'cache'), help='Output directory')
    parser.add_argument('--splits', default='train,val,test', help='Comma-separated splits')
    parser.add_argument('--limit', type=int, help='Generate at most this many tasks per split')
    parser.add_argument('--verify', action='store_true', help='Check existing caches instead of writing')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        cfg = load_run_config(args.config, args.overrides)
    except ConfigError as e:
        logger.error(str(e))
        sys.exit(2)

    preparator = DatasetPreparator(cfg.dataset, cfg.seed, args.output_dir)
    splits = [s.strip() for s in args.splits.split(',') if s.strip()]
    try:
        if args.verify:
            bad = [s for s in splits if not preparator.verify(s)]
            for split in bad:
                logger.error(f"Cache for {split} does not match regeneration")
            sys.exit(1 if bad else 0)
        paths = preparator.prepare(splits, args.limit)
    except RNPError as e:
        logger.error(f"Dataset preparation failed: {e}")
        sys.exit(1)

    logger.info("Dataset preparation complete!")
    for path in paths:
        logger.info(f"  {path}")


if __name__ == '__main__':
    main()
