"""Order-preserving sharded execution over a process pool"""

import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def shard_ranges(total: int, shard_size: int) -> List[range]:
    """Split [0, total) into consecutive ranges of at most `shard_size`"""
    if shard_size < 1:
        raise ValueError(f"shard size must be positive, got {shard_size}")
    return [range(start, min(start + shard_size, total)) for start in range(0, total, shard_size)]


class ParallelProcessor:
    """Run a picklable function over shards; results come back in shard order"""

    def __init__(self, num_workers: Optional[int] = 1):
        """
        Args:
            num_workers: Number of worker processes (None or 0: CPU count, 1: run inline)
        """
        self.num_workers = num_workers or mp.cpu_count()

    def map(self, fn: Callable[[T], R], shards: Sequence[T]) -> List[R]:
        """
        Apply `fn` to every shard.

        Each shard carries its own seed, so the combined result does not
        depend on the worker count or completion order.
        """
        if not shards:
            return []

        if self.num_workers <= 1 or len(shards) == 1:
            return [fn(shard) for shard in shards]

        results: Dict[int, R] = {}
        with ProcessPoolExecutor(max_workers=min(self.num_workers, len(shards))) as executor:
            futures = {executor.submit(fn, shard): i for i, shard in enumerate(shards)}
            for future in as_completed(futures):
                results[futures[future]] = future.result()

        logger.debug("Processed %d shards on %d workers", len(shards), self.num_workers)
        return [results[i] for i in range(len(shards))]
