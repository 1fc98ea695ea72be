"""Staged machine unlearning for a tiny vision-language-action policy."""

import os

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def thread_limit() -> int | None:
    """Validate FORGELAB_THREADS; returns the cap or None when unset."""
    raw = os.environ.get("FORGELAB_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        from .world import ConfigError

        raise ConfigError(f"FORGELAB_THREADS must be a positive integer, got {raw!r}")
    return n


# BLAS pools read these once at load time, so the cap has to be in place before numpy is imported
if os.environ.get("FORGELAB_THREADS", "").isdigit() and int(os.environ["FORGELAB_THREADS"]) > 0:
    for _var in _THREAD_VARS:
        os.environ.setdefault(_var, os.environ["FORGELAB_THREADS"])

__version__ = "0.1.0"
