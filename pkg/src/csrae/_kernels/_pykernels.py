"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or disabled through
``CSRAE_PURE_PYTHON=1``). Semantics match ``_ckernels.pyx`` exactly; the
arguments are assumed to be validated, C-contiguous float64 arrays.
"""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def pairwise_log_overlap(mu_a, var_a, mu_b, var_b):
    s = var_a[:, None, :] + var_b[None, :, :]
    d = mu_a[:, None, :] - mu_b[None, :, :]
    return -0.5 * np.sum(LOG_2PI + np.log(s) + d * d / s, axis=2)


def pairwise_log_overlap_grad(mu_a, var_a, mu_b, var_b, grad_out):
    s = var_a[:, None, :] + var_b[None, :, :]
    d = mu_a[:, None, :] - mu_b[None, :, :]
    g = grad_out[:, :, None]
    g_mu = -g * d / s
    g_var = 0.5 * g * (d * d / s - 1.0) / s
    return g_mu.sum(axis=1), g_var.sum(axis=1), -g_mu.sum(axis=0), g_var.sum(axis=0)


def _vote(labels, dists):
    best = None
    for lab in np.unique(labels):
        sel = labels == lab
        key = (-int(sel.sum()), float(np.mean(dists[sel])), int(lab))
        if best is None or key < best:
            best = key
    return best[2]


def knn_predict(train, labels, query, k, chunk=512):
    n_query = query.shape[0]
    out = np.empty(n_query, dtype=np.int64)
    for start in range(0, n_query, chunk):
        q = query[start:start + chunk]
        diff = q[:, None, :] - train[None, :, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        # stable sort keeps the lower training index first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for row in range(q.shape[0]):
            idx = order[row]
            out[start + row] = _vote(labels[idx], np.sqrt(d2[row, idx]))
    return out


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ascending eigenvalues and the matching column eigenvectors.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.sum(a * a)), 1e-300)
    prev_off = np.inf
    for _ in range(max_sweeps):
        off = 2.0 * float(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * tol * scale or off >= prev_off:
            break
        prev_off = off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]
