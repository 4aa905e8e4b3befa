"""Compiled log-density and gradient for :class:`bvcqr.model.BVCQRModel`.

Mirrors ``BVCQRModel._evaluate`` term for term; the numpy version stays the
reference and the two are checked against each other in the test suite.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
LOG_4 = math.log(4.0)

# layout of the ``consts`` vector
C_ALPHA0, C_GAMMA0, C_ALPHA, C_GAMMA, C_NU0 = 0, 1, 2, 3, 4
C_DF_LAM, C_DF_TAU, C_A0 = 5, 6, 7
C_WISHART, C_HT_LAM, C_HT_TAU = 8, 9, 10
C_IG0, C_IG = 11, 12  # shape*log(rate) - gammaln(shape)
C_THETA_SD, C_TAU_POWER = 13, 14
N_CONSTS = 15


@njit(cache=True)
def logp_grad(u, g, Y, X, q, subj, age, T_inv, gam, psi, consts, off, ncm, M, n, horseshoe, noncentered):
    """Fill ``g`` with the gradient at ``u`` and return the log-density.

    ``off`` holds the start offsets of the layout blocks: beta, theta, phi,
    lambda, tau, sigma, chol, h, b. ``ncm`` is the non-centering weight of
    each theta slot: the slot holds ``theta / xi**ncm``.
    """
    N, k = X.shape
    ob, oth, ophi, olam, otau, osig, ochol, oh, obb = (
        off[0], off[1], off[2], off[3], off[4], off[5], off[6], off[7], off[8]
    )
    alpha0 = consts[C_ALPHA0]
    gamma0 = consts[C_GAMMA0]
    alpha = consts[C_ALPHA]
    gamma = consts[C_GAMMA]
    nu0 = consts[C_NU0]
    tp = consts[C_TAU_POWER]
    M2 = 2 * M

    # ---- forward
    log_s = np.empty(2)
    s = np.empty(2)
    phi = np.empty(2)
    for l in range(2):
        log_s[l] = u[ophi + l]
        s[l] = math.exp(log_s[l])
        phi[l] = math.sqrt(s[l])
    log_v = u[osig]
    v = math.exp(log_v)
    a = u[ochol]
    c = u[ochol + 1]
    dd = u[ochol + 2]
    # raw factor: of sigma_sq * D when non-centered, of D otherwise
    l11r = math.exp(a)
    l22r = math.exp(dd)
    sv = math.sqrt(v)
    if noncentered:
        l11 = l11r / sv
        cl = c / sv
        l22 = l22r / sv
        logdetD = 2.0 * (a + dd) - 2.0 * log_v
    else:
        l11 = l11r
        cl = c
        l22 = l22r
        logdetD = 2.0 * (a + dd)
    D11 = l11 * l11
    D21 = cl * l11
    D22 = cl * cl + l22 * l22

    log_tau = np.zeros(2)
    tau = np.zeros(2)
    log_lam = np.zeros(M2)
    lam = np.zeros(M2)
    xi = np.zeros(M2)
    theta = np.empty(M2)
    if horseshoe:
        for l in range(2):
            log_tau[l] = u[otau + l]
            tau[l] = math.exp(log_tau[l])
        for j in range(M2):
            l = j // M
            if noncentered:
                log_lam[j] = u[olam + j] - 0.5 * tp * log_tau[l]
                xi[j] = math.exp(u[olam + j])
            else:
                log_lam[j] = u[olam + j]
            lam[j] = math.exp(log_lam[j])
    if noncentered:
        for j in range(M2):
            if horseshoe:
                theta[j] = u[oth + j] * math.exp(ncm[j] * u[olam + j])
            else:
                theta[j] = u[oth + j] * consts[C_THETA_SD]
    else:
        for j in range(M2):
            theta[j] = u[oth + j]

    mean_h = np.zeros(2 * n)
    for i in range(n):
        a1 = 0.0
        a2 = 0.0
        for m in range(M):
            a1 += q[i, m] * theta[m]
            a2 += q[i, m] * theta[M + m]
        mean_h[i] = a1
        mean_h[n + i] = a2
    h = np.empty(2 * n)
    for i in range(n):
        if noncentered:
            h[i] = mean_h[i] + phi[0] * u[oh + i]
            h[n + i] = mean_h[n + i] + phi[1] * u[oh + n + i]
        else:
            h[i] = u[oh + i]
            h[n + i] = u[oh + n + i]
    # beta = T_inv u_beta - gam h when non-centered
    beta = np.empty(k)
    for r in range(k):
        if noncentered:
            acc = 0.0
            for cc in range(k):
                acc += T_inv[r, cc] * u[ob + cc]
            for j in range(2 * n):
                acc -= gam[r, j] * h[j]
            beta[r] = acc
        else:
            beta[r] = u[ob + r]
    b = np.empty((n, 2))
    for i in range(n):
        r0 = u[obb + 2 * i]
        r1 = u[obb + 2 * i + 1]
        if noncentered:
            b[i, 0] = l11r * r0
            b[i, 1] = c * r0 + l22r * r1
        else:
            b[i, 0] = r0
            b[i, 1] = r1

    # ---- log-density
    R = np.empty(N)
    RR = 0.0
    for o in range(N):
        i = subj[o]
        t = age[o]
        mu = h[i] + t * h[n + i] + b[i, 0] + t * b[i, 1]
        for r in range(k):
            mu += X[o, r] * beta[r]
        R[o] = Y[o] - mu
        RR += R[o] * R[o]
    lp = -0.5 * N * (LOG_2PI + log_v) - 0.5 * RR / v

    ss_h = np.zeros(2)
    dh = np.empty(2 * n)
    for j in range(2 * n):
        dh[j] = h[j] - mean_h[j]
    for i in range(n):
        ss_h[0] += dh[i] * dh[i]
        ss_h[1] += dh[n + i] * dh[n + i]
    for l in range(2):
        lp += -0.5 * n * (LOG_2PI + log_s[l]) - 0.5 * ss_h[l] / s[l]
        lp += consts[C_IG0] - (alpha0 + 1.0) * log_s[l] - gamma0 / s[l]
    lp += consts[C_IG] - (alpha + 1.0) * log_v - gamma / v

    detD = math.exp(logdetD)
    Di11 = D22 / detD
    Di12 = -D21 / detD
    Di22 = D11 / detD
    S_b = 0.0
    B11 = 0.0
    B12 = 0.0
    B22 = 0.0
    bD = np.empty((n, 2))
    for i in range(n):
        b0 = b[i, 0]
        b1 = b[i, 1]
        bD[i, 0] = b0 * Di11 + b1 * Di12
        bD[i, 1] = b0 * Di12 + b1 * Di22
        S_b += bD[i, 0] * b0 + bD[i, 1] * b1
        B11 += b0 * b0
        B12 += b0 * b1
        B22 += b1 * b1
    lp += -n * LOG_2PI - n * log_v - 0.5 * n * logdetD - 0.5 * S_b / v
    tr = psi[0, 0] * Di11 + 2.0 * psi[0, 1] * Di12 + psi[1, 1] * Di22
    lp += consts[C_WISHART] - 0.5 * (nu0 + 3.0) * logdetD - 0.5 * tr

    var_th = np.empty(M2)
    tau_scale = np.zeros(2)
    if horseshoe:
        nu_l = consts[C_DF_LAM]
        nu_t = consts[C_DF_TAU]
        for j in range(M2):
            l = j // M
            lv = 2.0 * log_lam[j] + tp * log_tau[l]
            var_th[j] = math.exp(lv)
            lp += -0.5 * LOG_2PI - 0.5 * lv - 0.5 * theta[j] * theta[j] / var_th[j]
            lp += consts[C_HT_LAM] - 0.5 * (nu_l + 1.0) * math.log1p(lam[j] * lam[j] / nu_l)
        for l in range(2):
            tau_scale[l] = consts[C_A0] * s[l]
            x = tau[l] / tau_scale[l]
            lp += consts[C_HT_TAU] - math.log(tau_scale[l]) - 0.5 * (nu_t + 1.0) * math.log1p(x * x / nu_t)
    else:
        sd = consts[C_THETA_SD]
        for j in range(M2):
            lp += -0.5 * LOG_2PI - math.log(sd) - 0.5 * theta[j] * theta[j] / (sd * sd)

    # jacobian
    lp += log_s[0] + log_s[1] + log_v + LOG_4 + 3.0 * a + 2.0 * dd
    if noncentered:
        lp -= 3.0 * log_v
    if horseshoe:
        for j in range(M2):
            lp += log_lam[j]
        lp += log_tau[0] + log_tau[1]
    if noncentered:
        if horseshoe:
            for j in range(M2):
                lp += ncm[j] * u[olam + j]
        else:
            lp += M2 * math.log(consts[C_THETA_SD])
        lp += 0.5 * n * (log_s[0] + log_s[1])
        lp += n * (a + dd)

    # ---- partials w.r.t. constrained quantities
    g_beta = np.zeros(k)
    g_h = np.zeros(2 * n)
    g_b = np.zeros((n, 2))
    for o in range(N):
        i = subj[o]
        t = age[o]
        ro = R[o] / v
        for r in range(k):
            g_beta[r] += X[o, r] * ro
        g_h[i] += ro
        g_h[n + i] += t * ro
        g_b[i, 0] += ro
        g_b[i, 1] += t * ro
    g_v = -0.5 * N / v + 0.5 * RR / (v * v)

    g_theta = np.zeros(M2)
    g_s = np.empty(2)
    for l in range(2):
        for i in range(n):
            g_h[l * n + i] -= dh[l * n + i] / s[l]
        g_s[l] = -0.5 * n / s[l] + 0.5 * ss_h[l] / (s[l] * s[l])
        g_s[l] += -(alpha0 + 1.0) / s[l] + gamma0 / (s[l] * s[l])
    for i in range(n):
        d1 = dh[i] / s[0]
        d2 = dh[n + i] / s[1]
        for m in range(M):
            g_theta[m] += q[i, m] * d1
            g_theta[M + m] += q[i, m] * d2
    g_v += -(alpha + 1.0) / v + gamma / (v * v)

    for i in range(n):
        g_b[i, 0] -= bD[i, 0] / v
        g_b[i, 1] -= bD[i, 1] / v
    g_v += -n / v + 0.5 * S_b / (v * v)
    # g_D = -0.5 (n + nu0 + 3) Dinv + Dinv (0.5/v B + 0.5 psi) Dinv
    A11 = 0.5 * B11 / v + 0.5 * psi[0, 0]
    A12 = 0.5 * B12 / v + 0.5 * psi[0, 1]
    A22 = 0.5 * B22 / v + 0.5 * psi[1, 1]
    E11 = Di11 * A11 + Di12 * A12
    E12 = Di11 * A12 + Di12 * A22
    E21 = Di12 * A11 + Di22 * A12
    E22 = Di12 * A12 + Di22 * A22
    cst = -0.5 * (n + nu0 + 3.0)
    gD11 = cst * Di11 + E11 * Di11 + E12 * Di12
    gD12 = cst * Di12 + E11 * Di12 + E12 * Di22
    gD21 = cst * Di12 + E21 * Di11 + E22 * Di12
    gD22 = cst * Di22 + E21 * Di12 + E22 * Di22

    g_loglam = np.zeros(M2)
    g_logtau = np.zeros(2)
    if horseshoe:
        nu_l = consts[C_DF_LAM]
        nu_t = consts[C_DF_TAU]
        for j in range(M2):
            l = j // M
            g_theta[j] -= theta[j] / var_th[j]
            t2 = theta[j] * theta[j] / var_th[j]
            g_loglam[j] = -1.0 + t2 - (nu_l + 1.0) * lam[j] * lam[j] / (nu_l + lam[j] * lam[j])
            g_logtau[l] += 0.5 * tp * (t2 - 1.0)
        for l in range(2):
            den = nu_t * tau_scale[l] * tau_scale[l] + tau[l] * tau[l]
            g_logtau[l] -= (nu_t + 1.0) * tau[l] * tau[l] / den
            g_s[l] += consts[C_A0] * (-1.0 / tau_scale[l] + (nu_t + 1.0) * tau[l] * tau[l] / (tau_scale[l] * den))
    else:
        sd2 = consts[C_THETA_SD] ** 2
        for j in range(M2):
            g_theta[j] -= theta[j] / sd2

    # ---- back through the transforms
    # g_L = 2 g_D L, L = [[l11, 0], [cl, l22]] the factor of D
    gL11 = 2.0 * (gD11 * l11 + gD12 * cl)
    gL21 = 2.0 * (gD21 * l11 + gD22 * cl)
    gL22 = 2.0 * gD22 * l22
    if noncentered:
        # L = raw / sqrt(v)
        g_v -= 0.5 * (gL11 * l11 + gL21 * cl + gL22 * l22) / v
        gL11 /= sv
        gL21 /= sv
        gL22 /= sv
        for i in range(n):
            r0 = u[obb + 2 * i]
            r1 = u[obb + 2 * i + 1]
            gb0 = g_b[i, 0]
            gb1 = g_b[i, 1]
            g[obb + 2 * i] = gb0 * l11r + gb1 * c
            g[obb + 2 * i + 1] = gb1 * l22r
            gL11 += gb0 * r0
            gL21 += gb1 * r0
            gL22 += gb1 * r1

        for cc in range(k):
            acc = 0.0
            for r in range(k):
                acc += T_inv[r, cc] * g_beta[r]
            g[ob + cc] = acc
        for j in range(2 * n):
            acc = 0.0
            for r in range(k):
                acc += gam[r, j] * g_beta[r]
            g_h[j] -= acc

        rh = np.zeros(2)
        for l in range(2):
            for i in range(n):
                j = l * n + i
                g[oh + j] = phi[l] * g_h[j]
                rh[l] += u[oh + j] * g_h[j]
            g_s[l] += rh[l] / (2.0 * phi[l])
        for i in range(n):
            for m in range(M):
                g_theta[m] += q[i, m] * g_h[i]
                g_theta[M + m] += q[i, m] * g_h[n + i]

        for j in range(M2):
            if horseshoe:
                g[oth + j] = g_theta[j] * math.exp(ncm[j] * u[olam + j])
            else:
                g[oth + j] = g_theta[j] * consts[C_THETA_SD]
    else:
        for i in range(n):
            g[obb + 2 * i] = g_b[i, 0]
            g[obb + 2 * i + 1] = g_b[i, 1]
        for j in range(2 * n):
            g[oh + j] = g_h[j]
        for r in range(k):
            g[ob + r] = g_beta[r]
        for j in range(M2):
            g[oth + j] = g_theta[j]

    for l in range(2):
        g[ophi + l] = g_s[l] * s[l]
    g[osig] = g_v * v
    if horseshoe:
        for j in range(M2):
            l = j // M
            if noncentered:
                g[olam + j] = g_loglam[j] + ncm[j] * g_theta[j] * theta[j]
                g_logtau[l] -= 0.5 * tp * g_loglam[j]
            else:
                g[olam + j] = g_loglam[j]
        for l in range(2):
            g[otau + l] = g_logtau[l]
    g[ochol] = gL11 * l11r
    g[ochol + 1] = gL21
    g[ochol + 2] = gL22 * l22r

    # jacobian gradient
    hn = 0.5 * n if noncentered else 0.0
    fn = float(n) if noncentered else 0.0
    g[ophi] += 1.0 + hn
    g[ophi + 1] += 1.0 + hn
    g[osig] += -2.0 if noncentered else 1.0
    g[ochol] += 3.0 + fn
    g[ochol + 2] += 2.0 + fn
    if horseshoe:
        for j in range(M2):
            g[olam + j] += (1.0 + ncm[j]) if noncentered else 1.0
        for l in range(2):
            g[otau + l] += (1.0 - 0.5 * tp * M) if noncentered else 1.0
    return lp
