from abc import ABC, abstractmethod
from typing import Callable, Iterable, List, TypeVar

Item = TypeVar("Item")
Result = TypeVar("Result")


class BaseEvalEngine(ABC):
    """Runs independent evaluation jobs against a shared read-only network.

    Implementations must return results in input order so reports do not
    depend on the engine that produced them.
    """

    name: str = "base"

    @abstractmethod
    def map(self, fn: Callable[[Item], Result], items: Iterable[Item]) -> List[Result]:
        pass
