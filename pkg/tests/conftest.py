import os

# Pin BLAS pools before numpy loads so timed tests measure one thread
# and threaded pipeline runs stay bit-deterministic.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
