from typing import Optional

from localnoise.settings import Settings, get_settings

from .engines.base_engine import BaseEvalEngine
from .engines.sequential_engine import SequentialEvalEngine
from .engines.thread_engine import ThreadEvalEngine


class EvalEngineFactory:
    @staticmethod
    def get_engine(settings: Optional[Settings] = None) -> BaseEvalEngine:
        settings = settings or get_settings()
        engine_type = settings.eval_engine.lower()
        if engine_type == "sequential":
            return SequentialEvalEngine()
        elif engine_type == "threads":
            return ThreadEvalEngine(workers=settings.eval_workers)
        else:
            raise ValueError(f"Unsupported eval engine type: {engine_type}")
