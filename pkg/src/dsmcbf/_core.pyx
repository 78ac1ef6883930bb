# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Dormand-Prince 5(4) kernel for the prestabilized flow.

Same step-control logic as :mod:`dsmcbf._dopri`, with the right-hand side
evaluated in C for the built-in model kinds.

kind 0 (affine):   params = [n, m, l, F, G, K, Lv, f0, p0]
kind 1 (pendulum): params = [m_c, m_p, L, g, K_pi(4)]

mode 0: flow plus sensitivities, y = [phi, S_x (row-major), S_v (row-major)]
mode 1: flow only, y = phi
mode 2: plant under constant input u, y = x
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fabs, pow, isfinite, M_PI, INFINITY
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy, memset

cnp.import_array()

cdef double A21 = 1.0 / 5
cdef double A31 = 3.0 / 40
cdef double A32 = 9.0 / 40
cdef double A41 = 44.0 / 45
cdef double A42 = -56.0 / 15
cdef double A43 = 32.0 / 9
cdef double A51 = 19372.0 / 6561
cdef double A52 = -25360.0 / 2187
cdef double A53 = 64448.0 / 6561
cdef double A54 = -212.0 / 729
cdef double A61 = 9017.0 / 3168
cdef double A62 = -355.0 / 33
cdef double A63 = 46732.0 / 5247
cdef double A64 = 49.0 / 176
cdef double A65 = -5103.0 / 18656
cdef double A71 = 35.0 / 384
cdef double A73 = 500.0 / 1113
cdef double A74 = 125.0 / 192
cdef double A75 = -2187.0 / 6784
cdef double A76 = 11.0 / 84
cdef double E1 = 71.0 / 57600
cdef double E3 = -71.0 / 16695
cdef double E4 = 71.0 / 1920
cdef double E5 = -17253.0 / 339200
cdef double E6 = 22.0 / 525
cdef double E7 = -1.0 / 40

cdef double SAFE = 0.9
cdef double FAC_MIN = 0.2
cdef double FAC_MAX = 10.0
cdef double BETA = 0.04


cdef struct Ctx:
    int kind
    int mode
    int n, m, l
    double* p          # raw params
    double* F
    double* G
    double* K
    double* Lv
    double* f0
    double* p0
    double* Apre       # affine A_pi
    double* Bpre       # affine B_pi
    double* v
    double* u
    double* A          # scratch n*n
    double* B          # scratch n*l
    double* fbuf       # scratch n
    double* gbuf       # scratch n*m
    double* ubuf       # scratch m


cdef void affine_fg(Ctx* c, const double* x, double* f, double* g) nogil:
    cdef int i, j
    for i in range(c.n):
        f[i] = c.f0[i]
        for j in range(c.n):
            f[i] += c.F[i * c.n + j] * x[j]
    memcpy(g, c.G, c.n * c.m * sizeof(double))


cdef void affine_pi(Ctx* c, const double* x, double* u) nogil:
    cdef int i, j
    for i in range(c.m):
        u[i] = c.p0[i]
        for j in range(c.n):
            u[i] -= c.K[i * c.n + j] * x[j]
        for j in range(c.l):
            u[i] += c.Lv[i * c.l + j] * c.v[j]


cdef void pend_fg(Ctx* c, const double* x, double* f, double* g) nogil:
    cdef double mc = c.p[0], mp = c.p[1], L = c.p[2], gr = c.p[3]
    cdef double s = sin(x[1]), co = cos(x[1]), thd = x[3]
    cdef double D = mc + mp * s * s
    f[0] = x[2]
    f[1] = thd
    f[2] = (mp * L * s * thd * thd + mp * gr * co * s) / D
    f[3] = (-co * mp * L * s * thd * thd - (mc + mp) * gr * s) / (L * D)
    g[0] = 0.0
    g[1] = 0.0
    g[2] = 1.0 / D
    g[3] = -co / (L * D)


cdef double pend_pi(Ctx* c, const double* x) nogil:
    cdef double* K = c.p + 4
    return -(K[0] * (x[0] - c.v[0]) + K[1] * (x[1] - M_PI) + K[2] * x[2] + K[3] * x[3])


cdef void pend_jac(Ctx* c, const double* x, double* fpi, double* A, double* B) nogil:
    cdef double mc = c.p[0], mp = c.p[1], L = c.p[2], gr = c.p[3]
    cdef double* K = c.p + 4
    cdef double s = sin(x[1]), co = cos(x[1]), thd = x[3]
    cdef double D = mc + mp * s * s
    cdef double D_th = 2 * mp * s * co
    cdef double N2 = mp * L * s * thd * thd + mp * gr * co * s
    cdef double N3 = -co * mp * L * s * thd * thd - (mc + mp) * gr * s
    cdef double u = pend_pi(c, x)
    cdef double g2 = 1.0 / D, g3 = -co / (L * D)
    cdef double N3_th = -mp * L * thd * thd * (co * co - s * s) - (mc + mp) * gr * co
    cdef int j
    fpi[0] = x[2]
    fpi[1] = thd
    fpi[2] = N2 / D + g2 * u
    fpi[3] = N3 / (L * D) + g3 * u
    memset(A, 0, 16 * sizeof(double))
    A[0 * 4 + 2] = 1.0
    A[1 * 4 + 3] = 1.0
    A[2 * 4 + 1] = (mp * L * co * thd * thd + mp * gr * (co * co - s * s) - N2 * D_th / D) / D
    A[2 * 4 + 3] = 2 * mp * L * s * thd / D
    A[3 * 4 + 1] = (N3_th - N3 * D_th / D) / (L * D)
    A[3 * 4 + 3] = -2 * co * mp * L * s * thd / (L * D)
    A[2 * 4 + 1] += (-D_th / (D * D)) * u
    A[3 * 4 + 1] += ((s + co * D_th / D) / (L * D)) * u
    for j in range(4):
        A[2 * 4 + j] -= g2 * K[j]
        A[3 * 4 + j] -= g3 * K[j]
    B[0] = 0.0
    B[1] = 0.0
    B[2] = g2 * K[0]
    B[3] = g3 * K[0]


cdef void field(Ctx* c, const double* x, double* out) nogil:
    """f_pi (modes 0/1) or f + g u (mode 2) into out[0:n]."""
    cdef int i, j
    cdef double u
    if c.kind == 1:
        pend_fg(c, x, c.fbuf, c.gbuf)
        u = c.u[0] if c.mode == 2 else pend_pi(c, x)
        for i in range(4):
            out[i] = c.fbuf[i] + c.gbuf[i] * u
    else:
        affine_fg(c, x, c.fbuf, c.gbuf)
        if c.mode == 2:
            memcpy(c.ubuf, c.u, c.m * sizeof(double))
        else:
            affine_pi(c, x, c.ubuf)
        for i in range(c.n):
            out[i] = c.fbuf[i]
            for j in range(c.m):
                out[i] += c.gbuf[i * c.m + j] * c.ubuf[j]


cdef void rhs(Ctx* c, const double* y, double* dy) nogil:
    cdef int n = c.n, l = c.l
    cdef int i, j, k
    cdef double acc
    cdef const double* Sx
    cdef const double* Sv
    if c.mode != 0:
        field(c, y, dy)
        return
    if c.kind == 1:
        pend_jac(c, y, dy, c.A, c.B)
    else:
        field(c, y, dy)
        memcpy(c.A, c.Apre, n * n * sizeof(double))
        memcpy(c.B, c.Bpre, n * l * sizeof(double))
    Sx = y + n
    Sv = y + n + n * n
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += c.A[i * n + k] * Sx[k * n + j]
            dy[n + i * n + j] = acc
        for j in range(l):
            acc = c.B[i * l + j]
            for k in range(n):
                acc += c.A[i * n + k] * Sv[k * l + j]
            dy[n + n * n + i * l + j] = acc


cdef double rms(const double* e, const double* sc, int d) nogil:
    cdef double s = 0.0, q
    cdef int i
    for i in range(d):
        q = e[i] / sc[i]
        s += q * q
    return sqrt(s / d)


def integrate(int kind, double[::1] params, int mode, double[::1] y0, double[::1] v,
              double[::1] u, double t_end, double rtol, double atol, double max_step,
              double min_step, long max_steps, double[::1] targets):
    """Returns ``(ts, ys, status, t_last)``; status 0 ok, 1 underflow, 2 max_steps.

    ``targets`` is the sorted list of exact-hit times ending with ``t_end``.
    """
    cdef Ctx c
    cdef int d = y0.shape[0]
    cdef int i, n, m, l, off
    cdef long cap = 256, cnt = 1, nsteps = 0
    cdef double* buf
    cdef double* ts
    cdef double* y
    cdef double* ynew
    cdef double* tmp
    cdef double* k1
    cdef double* k2
    cdef double* k3
    cdef double* k4
    cdef double* k5
    cdef double* k6
    cdef double* k7
    cdef double* sc
    cdef double* ev
    cdef double* swap
    cdef double t = 0.0, h, h_natural, h_new, err, fac, fac11, facold = 1e-4
    cdef double d0, d1, d2, dm, h0, h1, target
    cdef double expo1 = 0.2 - BETA * 0.75
    cdef int hit, reject = 0, status = 0
    cdef long ti = 0, nt = targets.shape[0]

    c.kind = kind
    c.mode = mode
    c.p = &params[0]
    c.v = &v[0] if v.shape[0] > 0 else NULL
    c.u = &u[0] if u.shape[0] > 0 else NULL
    if kind == 1:
        n, m, l = 4, 1, 1
    else:
        n, m, l = <int>params[0], <int>params[1], <int>params[2]
    c.n, c.m, c.l = n, m, l
    off = 3
    c.F = c.p + off; off += n * n
    c.G = c.p + off; off += n * m
    c.K = c.p + off; off += m * n
    c.Lv = c.p + off; off += m * l
    c.f0 = c.p + off; off += n
    c.p0 = c.p + off; off += m

    tmp = <double*>malloc((11 * d + 2 * n * n + 3 * n * l + n + n * m + m + 8) * sizeof(double))
    ts = <double*>malloc(cap * sizeof(double))
    buf = <double*>malloc(cap * d * sizeof(double))
    if tmp == NULL or ts == NULL or buf == NULL:
        free(tmp); free(ts); free(buf)
        raise MemoryError()
    y = tmp; ynew = y + d; k1 = ynew + d; k2 = k1 + d; k3 = k2 + d; k4 = k3 + d
    k5 = k4 + d; k6 = k5 + d; k7 = k6 + d; sc = k7 + d; ev = sc + d
    c.A = ev + d
    c.B = c.A + n * n
    c.Apre = c.B + n * l
    c.Bpre = c.Apre + n * n
    c.fbuf = c.Bpre + n * l
    c.gbuf = c.fbuf + n
    c.ubuf = c.gbuf + n * m

    cdef int j, kk
    if kind == 0:
        for i in range(n):
            for j in range(n):
                c.Apre[i * n + j] = c.F[i * n + j]
                for kk in range(m):
                    c.Apre[i * n + j] -= c.G[i * m + kk] * c.K[kk * n + j]
            for j in range(l):
                c.Bpre[i * l + j] = 0.0
                for kk in range(m):
                    c.Bpre[i * l + j] += c.G[i * m + kk] * c.Lv[kk * l + j]

    for i in range(d):
        y[i] = y0[i]
    ts[0] = 0.0
    memcpy(buf, y, d * sizeof(double))

    try:
        with nogil:
            if t_end > 0:
                rhs(&c, y, k1)
                # initial step
                for i in range(d):
                    sc[i] = atol + rtol * fabs(y[i])
                d0 = rms(y, sc, d)
                d1 = rms(k1, sc, d)
                if d0 < 1e-5 or d1 < 1e-5:
                    h0 = 1e-6
                else:
                    h0 = 0.01 * d0 / d1
                if h0 > max_step:
                    h0 = max_step
                for i in range(d):
                    ynew[i] = y[i] + h0 * k1[i]
                rhs(&c, ynew, k2)
                for i in range(d):
                    ev[i] = k2[i] - k1[i]
                d2 = rms(ev, sc, d) / h0
                dm = d1 if d1 > d2 else d2
                if dm <= 1e-15:
                    h1 = h0 * 1e-3
                    if h1 < 1e-6:
                        h1 = 1e-6
                else:
                    h1 = pow(0.01 / dm, 0.2)
                h = 100 * h0
                if h1 < h:
                    h = h1
                if max_step < h:
                    h = max_step

                while True:
                    target = targets[ti]
                    if h > max_step:
                        h = max_step
                    h_natural = h
                    hit = 0
                    if t + 1.01 * h >= target:
                        h = target - t
                        hit = 1
                    elif h < min_step:
                        status = 1
                        break
                    if nsteps >= max_steps:
                        status = 2
                        break
                    nsteps += 1

                    for i in range(d):
                        ynew[i] = y[i] + h * A21 * k1[i]
                    rhs(&c, ynew, k2)
                    for i in range(d):
                        ynew[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
                    rhs(&c, ynew, k3)
                    for i in range(d):
                        ynew[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
                    rhs(&c, ynew, k4)
                    for i in range(d):
                        ynew[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
                    rhs(&c, ynew, k5)
                    for i in range(d):
                        ynew[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i])
                    rhs(&c, ynew, k6)
                    for i in range(d):
                        ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i])
                    rhs(&c, ynew, k7)
                    for i in range(d):
                        ev[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
                        sc[i] = atol + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(ynew[i]) else fabs(ynew[i]))
                    err = rms(ev, sc, d)
                    if not isfinite(err):
                        err = 1e10

                    fac11 = pow(err, expo1) if err > 0 else 0.0
                    if err <= 1.0:
                        fac = fac11 / pow(facold, BETA)
                        fac = fac / SAFE
                        if fac > 1.0 / FAC_MIN:
                            fac = 1.0 / FAC_MIN
                        if fac < 1.0 / FAC_MAX:
                            fac = 1.0 / FAC_MAX
                        h_new = h / fac
                        facold = err if err > 1e-4 else 1e-4
                        if hit:
                            t = target
                        else:
                            t = t + h
                        swap = y; y = ynew; ynew = swap
                        swap = k1; k1 = k7; k7 = swap
                        if cnt == cap:
                            cap *= 2
                            ts = <double*>realloc(ts, cap * sizeof(double))
                            buf = <double*>realloc(buf, cap * d * sizeof(double))
                            if ts == NULL or buf == NULL:
                                status = 3
                                break
                        ts[cnt] = t
                        memcpy(buf + cnt * d, y, d * sizeof(double))
                        cnt += 1
                        if reject and h < h_new:
                            h_new = h
                        reject = 0
                        if hit:
                            ti += 1
                            if ti == nt:
                                break
                            if h_natural > h_new:
                                h_new = h_natural
                        h = h_new
                    else:
                        fac = fac11 / SAFE
                        if fac > 1.0 / FAC_MIN:
                            fac = 1.0 / FAC_MIN
                        h = h / fac
                        reject = 1
                        if h < min_step:
                            status = 1
                            break
        if status == 3:
            raise MemoryError()
        ts_arr = np.empty(cnt)
        ys_arr = np.empty((cnt, d))
        memcpy(cnp.PyArray_DATA(ts_arr), ts, cnt * sizeof(double))
        memcpy(cnp.PyArray_DATA(ys_arr), buf, cnt * d * sizeof(double))
    finally:
        free(tmp)
        free(ts)
        free(buf)
    return ts_arr, ys_arr, status, t


def linear_rows(const double[:, ::1] Gx, const double[:, :, ::1] sx, const double[:, :, ::1] sv,
                const double[:, ::1] Gv, const double[:, ::1] values, const double[::1] gain,
                const double[::1] fx, const double[:, ::1] gx):
    """Barrier rows for margins whose state gradient ``Gx`` (q x n) is fixed.

    For sample k and component i (row index ``k*q + i``):
        a_u = Gx_i S_x(k) g,  a_w = Gx_i S_v(k) + Gv_i,
        r   = -gain_i * values[k, i] - Gx_i S_x(k) f.
    """
    cdef Py_ssize_t K1 = sx.shape[0], n = sx.shape[1], q = Gx.shape[0]
    cdef Py_ssize_t m = gx.shape[1], l = sv.shape[2]
    cdef Py_ssize_t k, i, a, j, row
    a_u_arr = np.zeros((K1 * q, m))
    a_w_arr = np.zeros((K1 * q, l))
    r_arr = np.zeros(K1 * q)
    cdef double[:, ::1] a_u = a_u_arr
    cdef double[:, ::1] a_w = a_w_arr
    cdef double[::1] r = r_arr
    cdef double* js = <double*>malloc(n * sizeof(double))
    cdef double acc, gi
    try:
        for k in range(K1):
            for i in range(q):
                row = k * q + i
                for j in range(n):
                    acc = 0.0
                    for a in range(n):
                        gi = Gx[i, a]
                        if gi != 0.0:
                            acc += gi * sx[k, a, j]
                    js[j] = acc
                for j in range(m):
                    acc = 0.0
                    for a in range(n):
                        acc += js[a] * gx[a, j]
                    a_u[row, j] = acc
                for j in range(l):
                    acc = Gv[i, j]
                    for a in range(n):
                        gi = Gx[i, a]
                        if gi != 0.0:
                            acc += gi * sv[k, a, j]
                    a_w[row, j] = acc
                acc = 0.0
                for a in range(n):
                    acc += js[a] * fx[a]
                r[row] = -gain[i] * values[k, i] - acc
    finally:
        free(js)
    return a_u_arr, a_w_arr, r_arr


# ---------------------------------------------------------------------------
# Dense QP: Goldfarb-Idnani dual active set in scaled coordinates.
# Mirrors dsmcbf.qp._gi / QpSolver.solve; see that module for the method.

cdef double QP_FEAS_TOL = 1e-12
cdef double QP_ZERO_DIR = 1e-10
cdef double QP_DUAL_RAY = 1e100


cdef int small_solve(double* G, double* rhs, double* out, int k) nogil:
    """Solve G out = rhs (k x k, row-major) by Gaussian elimination with partial pivoting.

    G and rhs are overwritten.  Returns 1 if a pivot vanishes.
    """
    cdef int i, j, c, piv
    cdef double best, t, f
    for c in range(k):
        piv = c
        best = fabs(G[c * k + c])
        for i in range(c + 1, k):
            if fabs(G[i * k + c]) > best:
                best = fabs(G[i * k + c])
                piv = i
        if best == 0.0:
            return 1
        if piv != c:
            for j in range(k):
                t = G[c * k + j]
                G[c * k + j] = G[piv * k + j]
                G[piv * k + j] = t
            t = rhs[c]
            rhs[c] = rhs[piv]
            rhs[piv] = t
        for i in range(c + 1, k):
            f = G[i * k + c] / G[c * k + c]
            if f != 0.0:
                for j in range(c, k):
                    G[i * k + j] -= f * G[c * k + j]
                rhs[i] -= f * rhs[c]
    for i in range(k - 1, -1, -1):
        t = rhs[i]
        for j in range(i + 1, k):
            t -= G[i * k + j] * out[j]
        out[i] = t / G[i * k + i]
    return 0


cdef int proj_coeffs(const double* Nm, const int* act, int k, const double* vec, int N,
                     double* G, double* rhs, double* out) nogil:
    """out = (Na Na^T)^-1 (Na vec) for the active rows."""
    cdef int i, j, a
    cdef double acc
    for i in range(k):
        acc = 0.0
        for a in range(N):
            acc += Nm[act[i] * N + a] * vec[a]
        rhs[i] = acc
        for j in range(k):
            acc = 0.0
            for a in range(N):
                acc += Nm[act[i] * N + a] * Nm[act[j] * N + a]
            G[i * k + j] = acc
    return small_solve(G, rhs, out, k)


cdef void eq_project(const double* Nm, const double* b, const int* act, int k, const double* y0,
                     int N, double* G, double* rhs, double* mu, double* y) nogil:
    """Projection of y0 onto {N_act y = b_act}; multipliers in mu."""
    cdef int i, j, a
    cdef double acc
    for i in range(k):
        acc = 0.0
        for a in range(N):
            acc += Nm[act[i] * N + a] * y0[a]
        rhs[i] = b[act[i]] - acc
    for i in range(k):
        for j in range(k):
            acc = 0.0
            for a in range(N):
                acc += Nm[act[i] * N + a] * Nm[act[j] * N + a]
            G[i * k + j] = acc
    if k > 0:
        small_solve(G, rhs, mu, k)
    for a in range(N):
        y[a] = y0[a]
    for i in range(k):
        for a in range(N):
            y[a] += Nm[act[i] * N + a] * mu[i]


cdef double min_slack(const double* Nm, const double* b, const double* y, int R, int N,
                      int* argmin) nogil:
    cdef int i, a
    cdef double s, best = INFINITY
    argmin[0] = -1
    for i in range(R):
        s = -b[i]
        for a in range(N):
            s += Nm[i * N + a] * y[a]
        if s < best:
            best = s
            argmin[0] = i
    return best


def qp_solve(const double[:, ::1] a_u, const double[:, ::1] a_w, const double[::1] r,
             const double[::1] u_lo, const double[::1] u_hi, const double[::1] target,
             double eta, const long[::1] warm, int max_iter):
    """Solve min ||u - u_t||^2 + eta ||w - w_t||^2 s.t. rows and the u box.

    Row order of the extended system: the given rows, then the finite lower
    bounds, then the finite upper bounds.  Returns ``(status, z, active,
    lam, iterations, warm_used, kkt)`` with status 0 optimal, 1 infeasible,
    2 max_iter; ``z = (u, w)`` unscaled, ``lam`` in scaled units.
    """
    cdef int R0 = r.shape[0], m = a_u.shape[1], l = a_w.shape[1]
    cdef int N = m + l
    cdef int i, j, a, R, nlo = 0, nhi = 0
    for i in range(m):
        if isfinite(u_lo[i]):
            nlo += 1
        if isfinite(u_hi[i]):
            nhi += 1
    R = R0 + nlo + nhi
    cdef double sq = sqrt(eta)
    cdef double* Nm = <double*>malloc((R * N + 1) * sizeof(double))
    cdef double* b = <double*>malloc((R + 1) * sizeof(double))
    cdef double* y = <double*>malloc(N * sizeof(double))
    cdef double* y0 = <double*>malloc(N * sizeof(double))
    cdef double* yp = <double*>malloc(N * sizeof(double))
    cdef double* z = <double*>malloc(N * sizeof(double))
    cdef double* G = <double*>malloc((N + 1) * (N + 1) * sizeof(double))
    cdef double* rhs = <double*>malloc((N + 1) * sizeof(double))
    cdef double* rr = <double*>malloc((N + 1) * sizeof(double))
    cdef double* lam = <double*>malloc((N + 1) * sizeof(double))
    cdef double* mu = <double*>malloc((N + 1) * sizeof(double))
    cdef int* act = <int*>malloc((N + 1) * sizeof(int))
    cdef int* zero = <int*>malloc((R + 1) * sizeof(int))
    cdef int k = 0, status = 0, it = 0, warm_used = 0, p, kk, drop, bad, trivial = 0
    cdef double nrm, scale, sp, t1, t2, t, zz, lam_p, acc, kkt = INFINITY, ms, ms_pol
    try:
        # scaled, row-normalized data
        for i in range(R0):
            for a in range(m):
                Nm[i * N + a] = a_u[i, a]
            for a in range(l):
                Nm[i * N + m + a] = a_w[i, a] / sq
            b[i] = r[i]
        j = R0
        for i in range(m):
            if isfinite(u_lo[i]):
                for a in range(N):
                    Nm[j * N + a] = 0.0
                Nm[j * N + i] = 1.0
                b[j] = u_lo[i]
                j += 1
        for i in range(m):
            if isfinite(u_hi[i]):
                for a in range(N):
                    Nm[j * N + a] = 0.0
                Nm[j * N + i] = -1.0
                b[j] = -u_hi[i]
                j += 1
        for i in range(R):
            acc = 0.0
            for a in range(N):
                acc += Nm[i * N + a] * Nm[i * N + a]
            nrm = sqrt(acc)
            zero[i] = nrm == 0.0
            if zero[i]:
                if b[i] > 0:
                    trivial = 1
                b[i] = -INFINITY
            else:
                for a in range(N):
                    Nm[i * N + a] /= nrm
                b[i] /= nrm
        for a in range(m):
            y0[a] = target[a]
        for a in range(l):
            y0[m + a] = target[m + a] * sq
        scale = 1.0
        for a in range(N):
            if fabs(y0[a]) > scale:
                scale = fabs(y0[a])
        if trivial:
            status = 1
            for a in range(N):
                y[a] = y0[a]
            k = 0
        else:
            # warm start: accept the previous active set if it is optimal here
            if warm.shape[0] > 0 and warm.shape[0] <= N:
                k = warm.shape[0]
                for i in range(k):
                    act[i] = <int>warm[i]
                eq_project(Nm, b, act, k, y0, N, G, rhs, mu, y)
                bad = 0
                for i in range(k):
                    if not (mu[i] >= 0.0):
                        bad = 1
                if not bad:
                    ms = min_slack(Nm, b, y, R, N, &p)
                    if ms < -QP_FEAS_TOL * scale:
                        bad = 1
                if bad:
                    k = 0
                else:
                    warm_used = 1
                    for i in range(k):
                        lam[i] = mu[i]
            if not warm_used:
                k = 0
                for a in range(N):
                    y[a] = y0[a]
                while True:
                    sp = min_slack(Nm, b, y, R, N, &p)
                    if R == 0 or sp >= -QP_FEAS_TOL * scale:
                        status = 0
                        break
                    lam_p = 0.0
                    while True:
                        it += 1
                        if it > max_iter:
                            status = 2
                            break
                        for a in range(N):
                            z[a] = Nm[p * N + a]
                        if k > 0:
                            proj_coeffs(Nm, act, k, &Nm[p * N], N, G, rhs, rr)
                            for i in range(k):
                                for a in range(N):
                                    z[a] -= Nm[act[i] * N + a] * rr[i]
                        t1 = INFINITY
                        drop = -1
                        for i in range(k):
                            if rr[i] > 1e-14:
                                t = lam[i] / rr[i]
                                if t < t1:
                                    t1 = t
                                    drop = i
                        if t1 >= QP_DUAL_RAY:
                            t1 = INFINITY
                            drop = -1
                        zz = 0.0
                        for a in range(N):
                            zz += z[a] * z[a]
                        t2 = INFINITY
                        if sqrt(zz) > QP_ZERO_DIR:
                            acc = b[p]
                            for a in range(N):
                                acc -= Nm[p * N + a] * y[a]
                            t2 = acc / zz
                        if t1 == INFINITY and t2 == INFINITY:
                            status = 1
                            break
                        if t2 == INFINITY:
                            for i in range(k):
                                lam[i] -= t1 * rr[i]
                            lam_p += t1
                            for i in range(drop, k - 1):
                                act[i] = act[i + 1]
                                lam[i] = lam[i + 1]
                            k -= 1
                            continue
                        t = t1 if t1 < t2 else t2
                        for a in range(N):
                            y[a] += t * z[a]
                        for i in range(k):
                            lam[i] -= t * rr[i]
                        lam_p += t
                        if t2 <= t1:
                            act[k] = p
                            lam[k] = lam_p
                            k += 1
                            break
                        for i in range(drop, k - 1):
                            act[i] = act[i + 1]
                            lam[i] = lam[i + 1]
                        k -= 1
                    if status != 0:
                        break
                if status == 0:
                    # polish on the final active set
                    eq_project(Nm, b, act, k, y0, N, G, rhs, mu, yp)
                    bad = 0
                    for i in range(k):
                        if not (mu[i] >= -1e-12):
                            bad = 1
                    if not bad:
                        ms_pol = min_slack(Nm, b, yp, R, N, &p)
                        ms = min_slack(Nm, b, y, R, N, &p)
                        if R == 0 or ms_pol >= ms - 1e-15:
                            for a in range(N):
                                y[a] = yp[a]
                            for i in range(k):
                                lam[i] = mu[i] if mu[i] > 0.0 else 0.0
        if status == 0:
            # normalized KKT residual
            kkt = 0.0
            for a in range(N):
                rhs[0] = y[a] - y0[a]
                for i in range(k):
                    rhs[0] -= Nm[act[i] * N + a] * lam[i]
                if fabs(rhs[0]) > kkt:
                    kkt = fabs(rhs[0])
            for i in range(R):
                if zero[i]:
                    continue
                acc = -b[i]
                for a in range(N):
                    acc += Nm[i * N + a] * y[a]
                if -acc > kkt:
                    kkt = -acc
                for j in range(k):
                    if act[j] == i:
                        if fabs(lam[j] * acc) > kkt:
                            kkt = fabs(lam[j] * acc)
            for i in range(k):
                if -lam[i] > kkt:
                    kkt = -lam[i]
            acc = scale
            for a in range(N):
                if fabs(y[a]) > acc:
                    acc = fabs(y[a])
            kkt /= acc
        z_arr = np.empty(N)
        for a in range(m):
            z_arr[a] = y[a]
        for a in range(l):
            z_arr[m + a] = y[m + a] / sq
        act_arr = np.array([act[i] for i in range(k)], dtype=np.int64)
        lam_arr = np.array([lam[i] for i in range(k)], dtype=float)
        return status, z_arr, act_arr, lam_arr, it, warm_used, kkt
    finally:
        free(Nm); free(b); free(y); free(y0); free(yp); free(z); free(G); free(rhs)
        free(rr); free(lam); free(mu); free(act); free(zero)
