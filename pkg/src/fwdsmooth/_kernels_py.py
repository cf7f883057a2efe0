"""Pure numpy implementation of the compiled kernels (same contract)."""

import numpy as np

_CHUNK_ELEMENTS = 1 << 20


def gauss_backward_apply(log_w, mean_prev, x_cur, sigma, features_t):
    n_prev = log_w.shape[0]
    n_cur = x_cur.shape[0]
    q = features_t.shape[0]
    out = np.empty((n_cur, q))
    log_den = np.empty(n_cur)
    h = 0.5 / (sigma * sigma)
    feats = np.ascontiguousarray(features_t.T)
    step = max(1, _CHUNK_ELEMENTS // max(n_prev, 1))
    for start in range(0, n_cur, step):
        sl = slice(start, min(start + step, n_cur))
        d = x_cur[sl, None] - mean_prev[None, :]
        lt = log_w[None, :] - h * d * d
        mx = lt.max(axis=1)
        e = np.exp(lt - mx[:, None])
        s = e.sum(axis=1)
        out[sl] = (e @ feats) / s[:, None]
        log_den[sl] = mx + np.log(s)
    return out, log_den
