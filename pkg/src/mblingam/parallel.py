"""Order-preserving fan-out over worker processes."""
import os
from concurrent.futures import ProcessPoolExecutor


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def ordered_map(fn, tasks, threads=1):
    """``[fn(*t) for t in tasks]``, optionally spread over ``threads`` processes.

    Results are returned in task order whatever the completion order, so the
    output never depends on the worker count.
    """
    tasks = list(tasks)
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]
