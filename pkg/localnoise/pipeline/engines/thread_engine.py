from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List

from .base_engine import BaseEvalEngine, Item, Result


class ThreadEvalEngine(BaseEvalEngine):
    """Thread pool over jobs; numpy releases the GIL inside the matmuls."""

    name = "threads"

    def __init__(self, workers: int = 4):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers

    def map(self, fn: Callable[[Item], Result], items: Iterable[Item]) -> List[Result]:
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            # Executor.map yields in submission order
            return list(pool.map(fn, items))
