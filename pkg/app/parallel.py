import os
from typing import Callable, Iterable, Optional, TypeVar

from joblib import Parallel, delayed

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int] = None) -> int:
    """Thread count from the argument, then GAC_THREADS, then 1."""
    if threads is None:
        threads = int(os.environ.get("GAC_THREADS", "1"))
    return max(1, threads)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> list[R]:
    """Apply fn to every item; results keep input order whatever the completion order."""
    items = list(items)
    n_threads = resolve_threads(threads)
    if n_threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    # numpy releases the GIL in the heavy kernels, so threads avoid pickling models to worker processes
    return Parallel(n_jobs=min(n_threads, len(items)), prefer="threads")(delayed(fn)(item) for item in items)
