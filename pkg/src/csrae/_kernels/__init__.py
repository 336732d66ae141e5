"""Hot numerical kernels with a compiled core and a numpy fallback.

The Cython extension ``_ckernels`` is used when it has been built; otherwise
(or when ``CSRAE_PURE_PYTHON`` is set to a non-empty value other than ``0``)
the functions in ``_pykernels`` are used. Both backends share the argument
validation below, so callers always get the same contract.
"""

import os

import numpy as np

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

_force_python = os.environ.get("CSRAE_PURE_PYTHON", "") not in ("", "0")
active = python_backend if (_force_python or compiled_backend is None) else compiled_backend
BACKEND = "python" if active is python_backend else "cython"

__all__ = [
    "BACKEND",
    "active",
    "compiled_backend",
    "python_backend",
    "pairwise_log_overlap",
    "pairwise_log_overlap_grad",
    "knn_predict",
    "jacobi_eigh",
]


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _check_pair(mu_a, var_a, mu_b, var_b):
    mu_a, var_a, mu_b, var_b = (_f64(x) for x in (mu_a, var_a, mu_b, var_b))
    if mu_a.ndim != 2 or mu_b.ndim != 2:
        raise ValueError("means must be 2-D (components x dims)")
    if mu_a.shape != var_a.shape or mu_b.shape != var_b.shape:
        raise ValueError("mean/variance shape mismatch")
    if mu_a.shape[1] != mu_b.shape[1]:
        raise ValueError(f"dimension mismatch: {mu_a.shape[1]} vs {mu_b.shape[1]}")
    return mu_a, var_a, mu_b, var_b


def pairwise_log_overlap(mu_a, var_a, mu_b, var_b, backend=None):
    """``out[i, j] = log N(mu_a[i] | mu_b[j], diag(var_a[i] + var_b[j]))``."""
    args = _check_pair(mu_a, var_a, mu_b, var_b)
    return (backend or active).pairwise_log_overlap(*args)


def pairwise_log_overlap_grad(mu_a, var_a, mu_b, var_b, grad_out, backend=None):
    """Vector-Jacobian product of :func:`pairwise_log_overlap`.

    Returns gradients with respect to ``(mu_a, var_a, mu_b, var_b)``.
    """
    args = _check_pair(mu_a, var_a, mu_b, var_b)
    grad_out = _f64(grad_out)
    if grad_out.shape != (args[0].shape[0], args[2].shape[0]):
        raise ValueError("grad_out shape does not match the overlap matrix")
    return (backend or active).pairwise_log_overlap_grad(*args, grad_out)


def knn_predict(train, labels, query, k, backend=None):
    train = _f64(train)
    query = _f64(query)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if train.ndim != 2 or query.ndim != 2 or train.shape[1] != query.shape[1]:
        raise ValueError("train and query must be 2-D with equal feature dimension")
    if labels.shape != (train.shape[0],):
        raise ValueError("one label per training row required")
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k must be in [1, n_train={train.shape[0]}], got {k}")
    return (backend or active).knn_predict(train, labels, query, int(k))


def jacobi_eigh(a, tol=1e-14, max_sweeps=100, backend=None):
    a = _f64(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("square matrix required")
    return (backend or active).jacobi_eigh(a, tol, max_sweeps)
