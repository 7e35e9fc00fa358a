"""Numba acceleration switch.

Hot kernels (matcher search, CSR spmm) compile with numba when it is
importable and CFLINK_JIT is not set to 0/false/off. Every kernel has a
pure-numpy twin; both paths must return identical arrays. The flag is
read once at import time.
"""

import os


def _jit_wanted() -> bool:
    val = os.environ.get("CFLINK_JIT", "1").strip().lower()
    return val not in ("0", "false", "off", "no")


JIT_ENABLED = False
if _jit_wanted():
    try:
        # workqueue is always built in and keeps thread count changes safe
        os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
        import numba  # noqa: F401

        JIT_ENABLED = True
    except ImportError:
        JIT_ENABLED = False

if JIT_ENABLED:
    from numba import njit, prange

    def set_threads(n: int) -> None:
        # worker count must never change results, only wall time
        import numba as _nb

        _nb.set_num_threads(min(max(1, int(n)), _nb.config.NUMBA_NUM_THREADS))

else:

    def njit(*args, **kwargs):  # pragma: no cover - exercised via CFLINK_JIT=0
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    def prange(*args):  # pragma: no cover
        return range(*args)

    def set_threads(n: int) -> None:  # pragma: no cover
        return None
