"""Fan-out of independent runs, capped by ``TDSCALE_THREADS``."""

import os
from concurrent.futures import ProcessPoolExecutor


def max_workers() -> int:
    raw = os.environ.get("TDSCALE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TDSCALE_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def fan_out(fn, items: list) -> list:
    """``[fn(x) for x in items]``, in worker processes when allowed.

    Results come back in input order whatever the worker count, so outputs
    do not depend on the fan-out setting.
    """
    n = min(max_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
