"""Hot-loop kernels: compiled Cython core when built, numpy fallback otherwise.

Set ``COTS_PURE_PYTHON=1`` to force the fallback. Even with the extension
built, kernels listed in ``NUMPY_PREFERRED`` keep the numpy version because
it measured faster (``benchmarks/bench_kernels.py``): the all-pairs fusion
stub is a dense contraction that BLAS handles better than a hand loop.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("COTS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

NUMPY_PREFERRED = frozenset({"pair_fusion_scores"})


def _pick(name: str):
    return getattr(_kernels_py if name in NUMPY_PREFERRED else _impl, name)


layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
rank_counts = _impl.rank_counts
pair_fusion_scores = _pick("pair_fusion_scores")

__all__ = [
    "BACKEND",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "rank_counts",
    "pair_fusion_scores",
]
