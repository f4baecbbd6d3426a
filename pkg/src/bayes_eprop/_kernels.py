"""Batched simulation + e-prop accumulation, compiled with numba.

Every simulation in a batch has its own weight sample, input raster, loss
mask and target. Simulations are independent and run in a ``prange`` loop;
per-simulation gradients are returned unsummed so the caller can reduce
them in a fixed order (results do not depend on the thread count).
"""
import os
import warnings

import numba
import numpy as np
from numba import njit, prange

THREADS_ENV = "BAYES_EPROP_THREADS"

# numba falls back to another threading layer when the system TBB is too old
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")


def configure_threads() -> int:
    n = numba.config.NUMBA_NUM_THREADS
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = max(1, min(n, int(cap)))
    numba.set_num_threads(n)
    return n


@njit(cache=True)
def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@njit(parallel=True, cache=True)
def simulate_batch(x, mask, target, w_in, w_rec, w_out, b_out, feedback,
                   alpha, rho, kappa, v_base, beta, gamma_pd, want_grad):
    """Run ``S`` simulations.

    Shapes: ``x (S,T,I)``, ``mask (S,T)``, ``target (S,K)``, ``w_in (S,H,I)``,
    ``w_rec (S,H,H)``, ``w_out (S,K,H)``, ``b_out (S,K)``, ``feedback (S,H,K)``.

    Returns ``(y, spike_count, g_in, g_rec, g_out, g_b)`` with ``y (S,T,K)``.
    Gradient arrays are all-zero when ``want_grad`` is false.
    """
    S, T, I = x.shape
    H = w_rec.shape[1]
    K = w_out.shape[1]
    y_all = np.zeros((S, T, K))
    counts = np.zeros(S)
    gs = S if want_grad else 0
    g_in = np.zeros((gs, H, I))
    g_rec = np.zeros((gs, H, H))
    g_out = np.zeros((gs, K, H))
    g_b = np.zeros((gs, K))

    for s in prange(S):
        v = np.zeros(H)
        a = np.zeros(H)
        z = np.zeros(H)
        z_new = np.zeros(H)
        y = np.zeros(K)
        h = np.zeros(H)
        h_prev = np.zeros(H)
        z_filt = np.zeros(H)
        err = np.zeros(K)
        L = np.zeros(H)
        # presynaptic traces are identical across postsynaptic rows
        ev_in = np.zeros(I)
        ev_rec = np.zeros(H)
        ea_in = np.zeros((H, I))
        ea_rec = np.zeros((H, H))
        eb_in = np.zeros((H, I))
        eb_rec = np.zeros((H, H))
        nspk = 0.0

        for t in range(T):
            xt = x[s, t]
            for j in range(H):
                acc = alpha * v[j] - v_base * z[j]
                for i in range(I):
                    if xt[i] != 0.0:
                        acc += w_in[s, j, i] * xt[i]
                for i in range(H):
                    if z[i] != 0.0:
                        acc += w_rec[s, j, i] * z[i]
                v[j] = acc
                a[j] = rho * a[j] + beta * z[j]
                thr = v_base + a[j]
                z_new[j] = 1.0 if v[j] >= thr else 0.0
                d = 1.0 - abs(v[j] - thr) / v_base
                h[j] = gamma_pd * d if d > 0.0 else 0.0
            for k in range(K):
                acc = kappa * y[k] + b_out[s, k]
                for j in range(H):
                    if z_new[j] != 0.0:
                        acc += w_out[s, k, j]
                y[k] = acc
                y_all[s, t, k] = acc

            if want_grad:
                m = mask[s, t] != 0.0
                for j in range(H):
                    z_filt[j] = kappa * z_filt[j] + z_new[j]
                if m:
                    for k in range(K):
                        err[k] = _sigmoid(y[k]) - target[s, k]
                        g_b[s, k] += err[k]
                        for j in range(H):
                            g_out[s, k, j] += err[k] * z_filt[j]
                    for j in range(H):
                        acc = 0.0
                        for k in range(K):
                            acc += feedback[s, j, k] * err[k]
                        L[j] = acc
                for j in range(H):
                    hp = h_prev[j]
                    hn = h[j]
                    decay = rho - hp * beta
                    Lj = L[j] if m else 0.0
                    for i in range(I):
                        ea = hp * ev_in[i] + decay * ea_in[j, i]
                        ea_in[j, i] = ea
                        e = hn * (alpha * ev_in[i] + xt[i] - beta * ea)
                        eb = kappa * eb_in[j, i] + e
                        eb_in[j, i] = eb
                        g_in[s, j, i] += Lj * eb
                    for i in range(H):
                        ea = hp * ev_rec[i] + decay * ea_rec[j, i]
                        ea_rec[j, i] = ea
                        e = hn * (alpha * ev_rec[i] + z[i] - beta * ea)
                        eb = kappa * eb_rec[j, i] + e
                        eb_rec[j, i] = eb
                        g_rec[s, j, i] += Lj * eb
                for i in range(I):
                    ev_in[i] = alpha * ev_in[i] + xt[i]
                for i in range(H):
                    ev_rec[i] = alpha * ev_rec[i] + z[i]
                for j in range(H):
                    h_prev[j] = h[j]

            for j in range(H):
                z[j] = z_new[j]
                nspk += z_new[j]
        counts[s] = nspk
        if want_grad:
            for j in range(H):
                g_rec[s, j, j] = 0.0
    return y_all, counts, g_in, g_rec, g_out, g_b
