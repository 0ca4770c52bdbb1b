"""Road network representation learning toolkit.

Pipeline: ingest or synthesize a road network and trajectories, extract
features and traffic dynamics, build the trajectory transition matrix,
pre-train the graph/hypergraph contrastive branch and the traffic
sequence branch, fuse the representations, and evaluate on road- and
trajectory-based downstream tasks.
"""

import os

# Single-threaded BLAS keeps seeded runs byte-identical.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
