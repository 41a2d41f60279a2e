"""Multi-scale simulation toolkit for interacting fiber lay-down."""
import os

__version__ = "0.1.0"

# worker override applies to the numba-threaded kernels; results are
# worker-count independent (every thread writes disjoint output slots)
_workers = os.environ.get("FIBERFIELD_WORKERS")
if _workers:
    import numba

    numba.set_num_threads(max(1, min(int(_workers), numba.config.NUMBA_NUM_THREADS)))
