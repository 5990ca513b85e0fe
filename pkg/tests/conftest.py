# Pin BLAS to one thread before numpy loads: the per-step tensors here are
# tiny, so thread fan-out only adds sync overhead and perturbs timings.
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
