from typing import Callable, Iterable, List

from .base_engine import BaseEvalEngine, Item, Result


class SequentialEvalEngine(BaseEvalEngine):
    name = "sequential"

    def map(self, fn: Callable[[Item], Result], items: Iterable[Item]) -> List[Result]:
        return [fn(item) for item in items]
