import os
import logging
from typing import Any, Callable, Iterable, List

from joblib import Parallel, delayed
from pydantic import BaseModel, Field


class Settings(BaseModel):
    """Process-level settings read from the environment"""
    workers: int = Field(1, ge=1, description="Worker-pool size for per-market and per-pair fits")
    log_level: str = Field("INFO", description="Root logging level")

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            workers=int(os.environ.get("TAILDEP_WORKERS", "1")),
            log_level=os.environ.get("TAILDEP_LOG_LEVEL", "INFO").upper(),
        )


settings = Settings.from_env()

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level, logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)


def run_parallel(func: Callable[..., Any], items: Iterable[Any], n_jobs: int = None) -> List[Any]:
    """Apply func to every item on the bounded worker pool, results in input order"""
    items = list(items)
    n_jobs = n_jobs or settings.workers
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logging.debug(f"Dispatching {len(items)} tasks to {n_jobs} workers")
    return Parallel(n_jobs=n_jobs)(delayed(func)(item) for item in items)
