"""Single-path vision transformer pruning: unified MSA/conv layers with learnable gates."""
import os as _os

# SPVIT_THREADS caps BLAS worker threads; it must be applied before numpy loads.
_threads = _os.environ.get("SPVIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .model import ModelConfig, build_model, forward  # noqa: E402
from .search import ArchitectureDescriptor, SearchConfig, run_search  # noqa: E402

__version__ = "0.1.0"

__all__ = ["ArchitectureDescriptor", "ModelConfig", "SearchConfig", "build_model", "forward",
           "run_search"]
