import os

# Pin BLAS to one thread before numpy loads: keeps runs single-core and the
# acceptance timings honest.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
