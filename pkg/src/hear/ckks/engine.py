"""Leveled RNS-CKKS engine: ternary-secret keygen, raised-modulus public-key
encryption, relinearized multiplication, Galois rotations with per-prime
digit decomposition and one special modulus, hoisting, and exact RNS
rescaling.

Ciphertext payloads are (c0, c1) pairs of uint64 arrays (level+1 rows, N) in
NTT form, rows ascending from the output prime q0.  Key switching follows
the single-special-prime design: the switch input is decomposed into its
per-prime residues (digits), each digit is base-extended to every active
prime plus the special one, multiplied against the matching key component,
and the special modulus divided away afterwards."""

from __future__ import annotations

import numpy as np

from ..backend import BackendBase, Ct, LevelScaleError, Pt
from .encoder import Embedding, decode_coeffs, encode_coeffs
from .params import ParameterSet
from .ring import RingContext, lift_center, pw_mul_accum_perm, reduce_rows, sub_scaled_inv


class MissingRotationKey(RuntimeError):
    pass


class KeyMaterial:
    """Secret/public/relinearization keys plus per-amount rotation keys."""

    def __init__(self):
        self.s_coeffs = None
        self.s_ntt = None          # (L+2, N), special row last
        self.pk_b = None
        self.pk_a = None
        self.relin = None          # _Ksk
        self.rot: dict[int, "_Ksk"] = {}


class _Ksk:
    __slots__ = ("b", "a", "lmax")

    def __init__(self, b, a, lmax):
        self.b = b                 # (digits, lmax+2, N)
        self.a = a
        self.lmax = lmax


class CkksBackend(BackendBase):
    """Real-HE realization of the backend contract."""

    exact = False

    def __init__(self, params: ParameterSet, seed: int = 0):
        super().__init__(params)
        self.ring = RingContext(params)
        self.emb = Embedding(params.n)
        self.rng = np.random.default_rng(seed)
        self.n = params.n
        self.L = params.max_level
        self.S = self.ring.special_idx         # global index of the special prime
        self.P = params.special_prime
        self._pmod = np.array([self.P % q for q in params.chain_primes],
                              dtype=np.uint64)
        self._pinv = np.array([pow(self.P, -1, q) for q in params.chain_primes],
                              dtype=np.uint64)
        # chain-prime inverses for rescaling: inv[l][j] = p_l^{-1} mod p_j
        self._resc_inv = [
            np.array([pow(params.chain_primes[lvl], -1, params.chain_primes[j])
                      for j in range(lvl)], dtype=np.uint64)
            for lvl in range(self.L + 1)
        ]
        self.keys = KeyMaterial()
        self._keygen()

    # ---------- key generation ----------

    def _ternary(self) -> np.ndarray:
        return self.rng.integers(-1, 2, self.n).astype(np.int64)

    def _gauss(self) -> np.ndarray:
        return np.rint(self.rng.normal(0.0, self.params.error_std, self.n)
                       ).astype(np.int64)

    def _coeffs_to_ntt(self, coeffs: np.ndarray, gidx) -> np.ndarray:
        out = np.empty((len(gidx), self.n), dtype=np.uint64)
        reduce_rows(coeffs, np.asarray(gidx, dtype=np.intp), self.ring.p, out)
        self.ring.fwd(out, gidx)
        return out

    def _uniform_rows(self, gidx) -> np.ndarray:
        out = np.empty((len(gidx), self.n), dtype=np.uint64)
        for r, g in enumerate(gidx):
            out[r] = self.rng.integers(0, self.ring.primes[g], self.n,
                                       dtype=np.uint64)
        return out

    def _full_gidx(self, lmax: int | None = None) -> list[int]:
        lmax = self.L if lmax is None else lmax
        return list(range(lmax + 1)) + [self.S]

    def _keygen(self):
        k = self.keys
        gidx = self._full_gidx()
        k.s_coeffs = self._ternary()
        k.s_ntt = self._coeffs_to_ntt(k.s_coeffs, gidx)
        k.pk_a = self._uniform_rows(gidx)
        e = self._coeffs_to_ntt(self._gauss(), gidx)
        k.pk_b = self.ring.sub(e, self.ring.mul(k.pk_a, k.s_ntt, gidx), gidx)
        s2 = self.ring.mul(k.s_ntt, k.s_ntt, gidx)
        k.relin = self._make_ksk(s2, self.L)

    def _make_ksk(self, target_ntt: np.ndarray, lmax: int) -> _Ksk:
        """Key encrypting P*target under s, one component per digit prime."""
        gidx = self._full_gidx(lmax)
        rows = len(gidx)
        ndig = lmax + 1
        kb = np.empty((ndig, rows, self.n), dtype=np.uint64)
        ka = np.empty((ndig, rows, self.n), dtype=np.uint64)
        s = self.keys.s_ntt[[*range(lmax + 1), -1]]
        from .ring import scalar_mul
        for i in range(ndig):
            a = self._uniform_rows(gidx)
            e = self._coeffs_to_ntt(self._gauss(), gidx)
            b = self.ring.sub(e, self.ring.mul(a, s, gidx), gidx)
            # digit i's component carries P*s' on its own prime row only
            prod = target_ntt[i:i + 1].copy()
            scalar_mul(prod, self._pmod[i:i + 1], np.array([i], dtype=np.intp),
                       self.ring.p, self.ring.mu, self.ring.sh)
            b[i] = self.ring.add(b[i:i + 1], prod, [i])[0]
            kb[i] = b
            ka[i] = a
        return _Ksk(kb, ka, lmax)

    def ensure_rotation_keys(self, rot_levels: dict[int, int]):
        """Generate keys for the given {amount: max evaluation level} map."""
        for amount, lmax in sorted(rot_levels.items()):
            amount %= self.n2
            if amount == 0:
                continue
            have = self.keys.rot.get(amount)
            if have is not None and have.lmax >= lmax:
                continue
            g = self.ring.galois_element(amount)
            target = self._coeffs_to_ntt(
                self.ring.coeff_automorphism(self.keys.s_coeffs, g),
                self._full_gidx(lmax))
            self.keys.rot[amount] = self._make_ksk(target, lmax)

    # ---------- codec ----------

    def _raw_encode(self, values, level, scale):
        coeffs = encode_coeffs(self.emb, values, float(scale))
        rows = self._coeffs_to_ntt(coeffs, list(range(level + 1)))
        return Pt(rows, level, scale, self.n2)

    def _decrypt_coeffs(self, ct: Ct, keep: int) -> np.ndarray:
        c0, c1 = ct.payload
        gidx = list(range(keep))
        m = self.ring.mul(c1[:keep].copy(), self.keys.s_ntt[:keep], gidx)
        m = self.ring.add(m, c0[:keep], gidx)
        self.ring.inv(m, gidx)
        primes = [self.params.chain_primes[j] for j in range(keep)]
        q = 1
        for p in primes:
            q *= p
        recon = np.zeros(self.n, dtype=object)
        for j, p in enumerate(primes):
            qi = q // p
            recon += m[j].astype(object) * (qi * pow(qi, -1, p))
        half = q // 2
        out = np.empty(self.n, dtype=np.float64)
        for idx in range(self.n):
            v = recon[idx] % q
            out[idx] = float(v - q) if v > half else float(v)
        return out

    def _rows_needed(self, scale) -> int:
        """Chain prefix big enough to hold value*scale + noise comfortably."""
        need_bits = max(np.log2(float(scale)), 0.0) + 40
        bits = 0.0
        for k, p in enumerate(self.params.chain_primes):
            bits += np.log2(p)
            if bits >= need_bits:
                return k + 1
        return self.L + 1

    def _raw_dec(self, ct: Ct) -> np.ndarray:
        keep = min(ct.level + 1, self._rows_needed(ct.scale))
        coeffs = self._decrypt_coeffs(ct, keep)
        return decode_coeffs(self.emb, coeffs, float(ct.scale))

    # ---------- encryption ----------

    def _raw_enc(self, values, level, scale):
        rows = list(range(level + 1))
        gidx = rows + [self.S]
        m = self._raw_encode(values, level, scale).payload
        u = self._coeffs_to_ntt(self._ternary(), gidx)
        e0 = self._coeffs_to_ntt(self._gauss(), gidx)
        e1 = self._coeffs_to_ntt(self._gauss(), gidx)
        sel = np.array(rows + [self.L + 1], dtype=np.intp)
        c0 = self.ring.add(self.ring.mul(u, self.keys.pk_b[sel], gidx), e0, gidx)
        c1 = self.ring.add(self.ring.mul(u, self.keys.pk_a[sel], gidx), e1, gidx)
        pm = m.copy()
        from .ring import scalar_mul
        scalar_mul(pm, self._pmod[:level + 1], np.asarray(rows, dtype=np.intp),
                   self.ring.p, self.ring.mu, self.ring.sh)
        c0[:level + 1] = self.ring.add(c0[:level + 1], pm, rows)
        c0 = self._drop_special(c0, level)
        c1 = self._drop_special(c1, level)
        return Ct((c0, c1), level, scale, self.n2)

    def _drop_special(self, rows_sp: np.ndarray, level: int) -> np.ndarray:
        """(x - [x]_P) / P over the chain rows; input has the special row last."""
        gidx = list(range(level + 1))
        xs = rows_sp[-1:].copy()
        self.ring.inv(xs, [self.S])
        lifted = np.empty(self.n, dtype=np.int64)
        lift_center(xs[0], np.uint64(self.P), lifted)
        corr = np.empty((level + 1, self.n), dtype=np.uint64)
        reduce_rows(lifted, np.asarray(gidx, dtype=np.intp), self.ring.p, corr)
        self.ring.fwd(corr, gidx)
        out = rows_sp[:level + 1].copy()
        sub_scaled_inv(out, corr, self._pinv[:level + 1],
                       np.asarray(gidx, dtype=np.intp),
                       self.ring.p, self.ring.mu, self.ring.sh)
        return out

    # ---------- arithmetic ----------

    def _raw_add(self, a: Ct, b: Ct) -> Ct:
        gidx = list(range(a.level + 1))
        c0 = self.ring.add(a.payload[0], b.payload[0], gidx)
        c1 = self.ring.add(a.payload[1], b.payload[1], gidx)
        return Ct((c0, c1), a.level, a.scale, self.n2)

    def _raw_add_plain(self, a: Ct, p: Pt) -> Ct:
        gidx = list(range(a.level + 1))
        c0 = self.ring.add(a.payload[0], p.payload[:a.level + 1], gidx)
        return Ct((c0, a.payload[1].copy()), a.level, a.scale, self.n2)

    def _raw_mult_plain(self, a: Ct, p: Pt) -> Ct:
        gidx = list(range(a.level + 1))
        rows = p.payload[:a.level + 1]
        c0 = self.ring.mul(a.payload[0], rows, gidx)
        c1 = self.ring.mul(a.payload[1], rows, gidx)
        return Ct((c0, c1), a.level, a.scale * p.scale, self.n2)

    def _raw_mult(self, a: Ct, b: Ct) -> Ct:
        lvl = a.level
        gidx = list(range(lvl + 1))
        a0, a1 = a.payload
        b0, b1 = b.payload
        d0 = self.ring.mul(a0, b0, gidx)
        d1 = self.ring.add(self.ring.mul(a0, b1, gidx),
                           self.ring.mul(a1, b0, gidx), gidx)
        d2 = self.ring.mul(a1, b1, gidx)
        ks0, ks1 = self._keyswitch(d2, self.keys.relin, lvl)
        c0 = self.ring.add(d0, ks0, gidx)
        c1 = self.ring.add(d1, ks1, gidx)
        return Ct((c0, c1), lvl, a.scale * b.scale, self.n2)

    def _raw_rescale(self, a: Ct) -> Ct:
        lvl = a.level
        gidx = list(range(lvl))
        out = []
        for poly in a.payload:
            xs = poly[lvl:lvl + 1].copy()
            self.ring.inv(xs, [lvl])
            lifted = np.empty(self.n, dtype=np.int64)
            lift_center(xs[0], np.uint64(self.params.chain_primes[lvl]), lifted)
            corr = np.empty((lvl, self.n), dtype=np.uint64)
            reduce_rows(lifted, np.asarray(gidx, dtype=np.intp), self.ring.p, corr)
            self.ring.fwd(corr, gidx)
            rows = poly[:lvl].copy()
            sub_scaled_inv(rows, corr, self._resc_inv[lvl],
                           np.asarray(gidx, dtype=np.intp),
                           self.ring.p, self.ring.mu, self.ring.sh)
            out.append(rows)
        scale = a.scale / self.params.chain_primes[lvl]
        return Ct((out[0], out[1]), lvl - 1, scale, self.n2)

    def _raw_mod_down(self, a: Ct, to_level: int) -> Ct:
        c0, c1 = a.payload
        return Ct((c0[:to_level + 1].copy(), c1[:to_level + 1].copy()),
                  to_level, a.scale, self.n2)

    # ---------- rotations / key switching ----------

    def _decompose(self, d: np.ndarray, lvl: int) -> np.ndarray:
        """Digits of d extended to chain rows 0..lvl plus the special prime."""
        ndig = lvl + 1
        rows = lvl + 2
        gidx = list(range(lvl + 1)) + [self.S]
        coeffs = d.copy()
        self.ring.inv(coeffs, list(range(lvl + 1)))
        de = np.empty((ndig, rows, self.n), dtype=np.uint64)
        lifted = np.empty(self.n, dtype=np.int64)
        for i in range(ndig):
            lift_center(coeffs[i], np.uint64(self.params.chain_primes[i]), lifted)
            reduce_rows(lifted, np.asarray(gidx, dtype=np.intp), self.ring.p, de[i])
            self.ring.fwd(de[i], gidx)
        return de

    def _ks_apply(self, de: np.ndarray, key: _Ksk, lvl: int,
                  perm: np.ndarray | None):
        ndig = lvl + 1
        rows = lvl + 2
        if key.lmax < lvl:
            raise LevelScaleError(
                f"key switching key trimmed to level {key.lmax}, need {lvl}")
        gidx = np.array(list(range(lvl + 1)) + [self.S], dtype=np.intp)
        if perm is None:
            perm = self._identity_perm
        outb = np.zeros((rows, self.n), dtype=np.uint64)
        outa = np.zeros((rows, self.n), dtype=np.uint64)
        krow = np.array(list(range(lvl + 1)) + [key.lmax + 1], dtype=np.intp)
        kb = key.b[:ndig]
        ka = key.a[:ndig]
        _ks_mac(outb, outa, de, kb, ka, krow, perm, gidx,
                self.ring.p, self.ring.mu, self.ring.sh)
        return self._drop_special(outb, lvl), self._drop_special(outa, lvl)

    def _keyswitch(self, d: np.ndarray, key: _Ksk, lvl: int,
                   perm: np.ndarray | None = None):
        return self._ks_apply(self._decompose(d, lvl), key, lvl, perm)

    @property
    def _identity_perm(self) -> np.ndarray:
        if not hasattr(self, "_idperm"):
            self._idperm = np.arange(self.n, dtype=np.intp)
        return self._idperm

    def _rot_key(self, amount: int) -> _Ksk:
        key = self.keys.rot.get(amount % self.n2)
        if key is None:
            raise MissingRotationKey(
                f"no rotation key for amount {amount % self.n2}")
        return key

    def _apply_rot(self, a: Ct, k: int, de=None) -> Ct:
        lvl = a.level
        g = self.ring.galois_element(k)
        perm = self.ring.ntt_perm(g)
        key = self._rot_key(k)
        if de is None:
            de = self._decompose(a.payload[1], lvl)
        ks0, ks1 = self._ks_apply(de, key, lvl, perm)
        gidx = list(range(lvl + 1))
        c0 = self.ring.add(np.ascontiguousarray(a.payload[0][:, perm]), ks0, gidx)
        return Ct((c0, ks1), lvl, a.scale, self.n2)

    def _raw_rot(self, a: Ct, k: int) -> Ct:
        return self._apply_rot(a, k)

    def _raw_rot_many(self, a: Ct, ks) -> dict[int, Ct]:
        if not ks:
            return {}
        de = self._decompose(a.payload[1], a.level)
        return {k: self._apply_rot(a, k, de=de) for k in ks}


def _ks_mac(outb, outa, de, kb, ka, krow, perm, gidx, p, mu, sh):
    pw_mul_accum_perm(outb, outa, de, kb, ka, krow, perm, gidx, p, mu, sh)
