import os

THREADS_ENV = "QUAKECAST_THREADS"


def worker_count(default: int | None = None) -> int:
    """Worker cap from ``QUAKECAST_THREADS``, else ``default`` or the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, default if default is not None else (os.cpu_count() or 1))
