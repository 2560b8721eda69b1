"""Negacyclic ring arithmetic mod NTT-friendly primes.

Coefficient vectors live in numpy uint64 arrays of shape (rows, N), one row
per RNS prime.  Hot loops are numba kernels: forward/inverse NTT with Shoup
multiplication for the constant twiddles, Barrett reduction for
variable-variable products (primes up to ~2^38, so 128-bit intermediate
products are assembled from 32-bit halves).
"""

from __future__ import annotations

import numpy as np
import sympy
from numba import njit, prange

U32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)


@njit(inline="always")
def _mulhi(a, b):
    a0 = a & U32
    a1 = a >> S32
    b0 = b & U32
    b1 = b >> S32
    t = a0 * b0
    m1 = a1 * b0 + (t >> S32)
    m2 = a0 * b1 + (m1 & U32)
    return a1 * b1 + (m1 >> S32) + (m2 >> S32)


@njit(inline="always")
def _mul_shoup(a, w, wsh, p):
    # Harvey: w constant with dual wsh = floor(w * 2^64 / p); result < p
    q = _mulhi(a, wsh)
    r = a * w - q * p
    if r >= p:
        r -= p
    return r


@njit(inline="always")
def _mul_barrett(a, b, p, mu, sh):
    # general a*b mod p for a, b < p < 2^38; mu = floor(2^(63+k)/p), sh = k-1
    lo = a * b
    hi = _mulhi(a, b)
    t = (hi << (np.uint64(64) - sh)) | (lo >> sh)
    q = _mulhi(t, mu)
    r = lo - q * p
    while r >= p:
        r -= p
    return r


@njit(inline="always")
def _addmod(a, b, p):
    r = a + b
    if r >= p:
        r -= p
    return r


@njit(inline="always")
def _submod(a, b, p):
    r = a + p - b
    if r >= p:
        r -= p
    return r


@njit(cache=True)
def _ntt_fwd_row(a, psi, psish, p):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            w = psi[m + i]
            ws = psish[m + i]
            j1 = 2 * i * t
            for j in range(j1, j1 + t):
                u = a[j]
                v = _mul_shoup(a[j + t], w, ws, p)
                a[j] = _addmod(u, v, p)
                a[j + t] = _submod(u, v, p)
        m <<= 1


@njit(cache=True)
def _ntt_inv_row(a, ipsi, ipsish, p, ninv, ninvsh):
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        j1 = 0
        h = m >> 1
        for i in range(h):
            w = ipsi[h + i]
            ws = ipsish[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                a[j] = _addmod(u, v, p)
                a[j + t] = _mul_shoup(_submod(u, v, p), w, ws, p)
            j1 += 2 * t
        t <<= 1
        m = h
    for j in range(n):
        a[j] = _mul_shoup(a[j], ninv, ninvsh, p)


@njit(cache=True, parallel=True)
def ntt_fwd(a, gidx, psi, psish, p):
    for r in prange(a.shape[0]):
        g = gidx[r]
        _ntt_fwd_row(a[r], psi[g], psish[g], p[g])


@njit(cache=True, parallel=True)
def ntt_inv(a, gidx, ipsi, ipsish, p, ninv, ninvsh):
    for r in prange(a.shape[0]):
        g = gidx[r]
        _ntt_inv_row(a[r], ipsi[g], ipsish[g], p[g], ninv[g], ninvsh[g])


@njit(cache=True, parallel=True)
def pw_mul(out, a, b, gidx, p, mu, sh):
    for r in prange(a.shape[0]):
        g = gidx[r]
        pp, mm, ss = p[g], mu[g], sh[g]
        for n in range(a.shape[1]):
            out[r, n] = _mul_barrett(a[r, n], b[r, n], pp, mm, ss)


@njit(cache=True, parallel=True)
def pw_mul_accum_perm(outb, outa, de, kb, ka, krow, perm, gidx, p, mu, sh):
    """outb/outa[r] += perm(de[i][r]) * kb/ka[i][krow[r]] summed over digits i.

    krow maps evaluation rows onto key rows (trimmed keys keep their special
    row last); perm applies a Galois slot permutation to the decomposition."""
    ndig = de.shape[0]
    for r in prange(outb.shape[0]):
        g = gidx[r]
        pp, mm, ss = p[g], mu[g], sh[g]
        kr = krow[r]
        for n in range(outb.shape[1]):
            sb = outb[r, n]
            sa = outa[r, n]
            dn = perm[n]
            for i in range(ndig):
                x = de[i, r, dn]
                sb = _addmod(sb, _mul_barrett(x, kb[i, kr, n], pp, mm, ss), pp)
                sa = _addmod(sa, _mul_barrett(x, ka[i, kr, n], pp, mm, ss), pp)
            outb[r, n] = sb
            outa[r, n] = sa


@njit(cache=True, parallel=True)
def pw_add(out, a, b, gidx, p):
    for r in prange(a.shape[0]):
        pp = p[gidx[r]]
        for n in range(a.shape[1]):
            out[r, n] = _addmod(a[r, n], b[r, n], pp)


@njit(cache=True, parallel=True)
def pw_sub(out, a, b, gidx, p):
    for r in prange(a.shape[0]):
        pp = p[gidx[r]]
        for n in range(a.shape[1]):
            out[r, n] = _submod(a[r, n], b[r, n], pp)


@njit(cache=True, parallel=True)
def scalar_mul(a, c, gidx, p, mu, sh):
    """a[r] *= c[r] in place (per-row constants)."""
    for r in prange(a.shape[0]):
        g = gidx[r]
        pp, mm, ss = p[g], mu[g], sh[g]
        cc = c[r]
        for n in range(a.shape[1]):
            a[r, n] = _mul_barrett(a[r, n], cc, pp, mm, ss)


@njit(cache=True)
def lift_center(x, p, out):
    """u64 residues mod p -> centered int64 in (-p/2, p/2]."""
    half = p >> np.uint64(1)
    for n in range(x.shape[0]):
        v = x[n]
        if v > half:
            out[n] = np.int64(v) - np.int64(p)
        else:
            out[n] = np.int64(v)


@njit(cache=True, parallel=True)
def reduce_rows(c, gidx, p, out):
    """centered int64 coeffs -> u64 residues per target prime row."""
    for r in prange(out.shape[0]):
        pp = np.int64(p[gidx[r]])
        for n in range(c.shape[0]):
            v = c[n] % pp
            if v < 0:
                v += pp
            out[r, n] = np.uint64(v)


@njit(cache=True, parallel=True)
def sub_scaled_inv(rows, corr, pinv, gidx, p, mu, sh):
    """rows[r] = (rows[r] - corr[r]) * pinv[r]  (the rescale / mod-down core)."""
    for r in prange(rows.shape[0]):
        g = gidx[r]
        pp, mm, ss = p[g], mu[g], sh[g]
        iv = pinv[r]
        for n in range(rows.shape[1]):
            d = _submod(rows[r, n], corr[r, n], pp)
            rows[r, n] = _mul_barrett(d, iv, pp, mm, ss)


def _bit_reverse(x: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (x & 1)
        x >>= 1
    return r


def primitive_2n_root(p: int, two_n: int) -> int:
    g = sympy.primitive_root(p)
    return pow(g, (p - 1) // two_n, p)


def schoolbook_negacyclic(a, b, p: int):
    """O(N^2) reference product in Z_p[X]/(X^N+1) (tests only)."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        ai = int(a[i])
        if ai == 0:
            continue
        for j in range(n):
            k = i + j
            term = ai * int(b[j])
            if k >= n:
                out[k - n] = (out[k - n] - term) % p
            else:
                out[k] = (out[k] + term) % p
    return [x % p for x in out]


class RingContext:
    """Per-parameter-set tables: twiddles, Barrett constants, the NTT's
    evaluation-exponent map and Galois slot permutations."""

    def __init__(self, params):
        self.params = params
        self.n = params.n
        self.logn = self.n.bit_length() - 1
        self.primes = list(params.chain_primes) + [params.special_prime]
        self.special_idx = len(self.primes) - 1
        k = len(self.primes)
        self.p = np.array(self.primes, dtype=np.uint64)
        bits = np.array([q.bit_length() for q in self.primes])
        self.sh = np.array(bits - 1, dtype=np.uint64)
        self.mu = np.array([(1 << (63 + b)) // q for q, b in zip(self.primes, bits)],
                           dtype=np.uint64)
        self.psi = np.zeros((k, self.n), dtype=np.uint64)
        self.psish = np.zeros((k, self.n), dtype=np.uint64)
        self.ipsi = np.zeros((k, self.n), dtype=np.uint64)
        self.ipsish = np.zeros((k, self.n), dtype=np.uint64)
        self.ninv = np.zeros(k, dtype=np.uint64)
        self.ninvsh = np.zeros(k, dtype=np.uint64)
        two_n = 2 * self.n
        for i, q in enumerate(self.primes):
            if q % two_n != 1:
                raise ValueError(f"prime {q} is not NTT-friendly for 2N={two_n}")
            root = primitive_2n_root(q, two_n)
            rinv = pow(root, -1, q)
            pw = [pow(root, _bit_reverse(j, self.logn), q) for j in range(self.n)]
            ipw = [pow(rinv, _bit_reverse(j, self.logn) + 1, q) for j in range(self.n)]
            self.psi[i] = np.array(pw, dtype=np.uint64)
            self.ipsi[i] = np.array(ipw, dtype=np.uint64)
            self.psish[i] = np.array([(w << 64) // q for w in pw], dtype=np.uint64)
            self.ipsish[i] = np.array([(w << 64) // q for w in ipw], dtype=np.uint64)
            ninv = pow(self.n, -1, q)
            self.ninv[i] = ninv
            self.ninvsh[i] = (ninv << 64) // q
        self._exp_map = self._probe_exponent_map()
        self._perm_cache: dict[int, np.ndarray] = {}
        self._coeff_perm_cache: dict[int, tuple] = {}

    # -- wrappers -----------------------------------------------------------

    def fwd(self, rows: np.ndarray, gidx):
        ntt_fwd(rows, np.asarray(gidx, dtype=np.intp), self.psi, self.psish, self.p)

    def inv(self, rows: np.ndarray, gidx):
        ntt_inv(rows, np.asarray(gidx, dtype=np.intp), self.ipsi, self.ipsish,
                self.p, self.ninv, self.ninvsh)

    def mul(self, a, b, gidx, out=None):
        out = np.empty_like(a) if out is None else out
        pw_mul(out, a, b, np.asarray(gidx, dtype=np.intp), self.p, self.mu, self.sh)
        return out

    def add(self, a, b, gidx, out=None):
        out = np.empty_like(a) if out is None else out
        pw_add(out, a, b, np.asarray(gidx, dtype=np.intp), self.p)
        return out

    def sub(self, a, b, gidx, out=None):
        out = np.empty_like(a) if out is None else out
        pw_sub(out, a, b, np.asarray(gidx, dtype=np.intp), self.p)
        return out

    # -- Galois machinery -----------------------------------------------------

    def _probe_exponent_map(self) -> np.ndarray:
        """NTT output index -> exponent e with out[j] = poly(psi^e).

        Probed with the polynomial X over the first prime: its NTT values are
        exactly the evaluation points psi^e."""
        q = self.primes[0]
        root = primitive_2n_root(q, 2 * self.n)
        a = np.zeros((1, self.n), dtype=np.uint64)
        a[0, 1] = 1
        self.fwd(a, [0])
        val_to_exp = {pow(root, e, q): e for e in range(2 * self.n)}
        exps = np.array([val_to_exp[int(v)] for v in a[0]], dtype=np.int64)
        if len(set(exps.tolist())) != self.n:
            raise RuntimeError("NTT evaluation points are not distinct")
        return exps

    def galois_element(self, r: int) -> int:
        """X -> X^g realizing a left slot rotation by r."""
        return pow(5, r % (self.n // 2), 2 * self.n)

    def ntt_perm(self, g: int) -> np.ndarray:
        """Index permutation applying X -> X^g in the NTT domain:
        out[j] = in[perm[j]]."""
        if g not in self._perm_cache:
            two_n = 2 * self.n
            pos = np.full(two_n, -1, dtype=np.int64)
            pos[self._exp_map] = np.arange(self.n)
            perm = pos[(self._exp_map * g) % two_n]
            if perm.min() < 0:
                raise RuntimeError("automorphism leaves the evaluation set")
            self._perm_cache[g] = perm.astype(np.intp)
        return self._perm_cache[g]

    def coeff_automorphism(self, coeffs: np.ndarray, g: int) -> np.ndarray:
        """X -> X^g on centered integer coefficients (sign-folded)."""
        if g not in self._coeff_perm_cache:
            k = np.arange(self.n, dtype=np.int64)
            e = (k * g) % (2 * self.n)
            idx = e % self.n
            sign = np.where((e // self.n) % 2 == 1, -1, 1).astype(np.int64)
            self._coeff_perm_cache[g] = (idx, sign)
        idx, sign = self._coeff_perm_cache[g]
        out = np.zeros_like(coeffs)
        out[idx] = coeffs * sign
        return out
