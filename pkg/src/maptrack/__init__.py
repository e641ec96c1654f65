"""Map-based 6-DoF camera tracking by rendering and direct image alignment."""

import numba

# prefer portable threading layers; the TBB layer is often present but outdated
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
