"""Canonical-embedding codec: N/2 real slots <-> length-N real coefficient
vectors, via length-2N FFTs.

Slot j is the evaluation of the coefficient polynomial at xi^(5^j) with
xi = exp(i*pi/N); the conjugate evaluation points carry the mirrored values,
which keeps coefficients real.  Rotating slots left by r is the ring
automorphism X -> X^(5^r)."""

from __future__ import annotations

import numpy as np

MAX_ENCODE_COEFF = float(1 << 52)   # rounding past this loses integer exactness


class Embedding:
    def __init__(self, n: int):
        self.n = n
        self.n2 = n // 2
        two_n = 2 * n
        g = np.empty(self.n2, dtype=np.int64)
        cur = 1
        for j in range(self.n2):
            g[j] = cur
            cur = (cur * 5) % two_n
        self.rot_group = g
        self.conj_group = (two_n - g) % two_n

    def to_slots(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate real coefficients at the slot points."""
        buf = np.zeros(2 * self.n, dtype=np.float64)
        buf[:self.n] = coeffs
        spec = np.fft.ifft(buf) * (2 * self.n)
        return spec[self.rot_group]

    def to_coeffs(self, slots: np.ndarray) -> np.ndarray:
        """Inverse embedding of a (complex) slot vector, conjugate-extended."""
        spec = np.zeros(2 * self.n, dtype=np.complex128)
        spec[self.rot_group] = slots
        spec[self.conj_group] = np.conj(slots)
        return np.fft.fft(spec)[:self.n].real / self.n


class EncodeOverflow(ValueError):
    """Scaled coefficients exceed exact float64 integer range."""


def encode_coeffs(emb: Embedding, values: np.ndarray, scale: float) -> np.ndarray:
    """Real slot values -> rounded integer coefficients at the given scale."""
    coeffs = emb.to_coeffs(values.astype(np.complex128)) * scale
    peak = np.abs(coeffs).max() if coeffs.size else 0.0
    if peak >= MAX_ENCODE_COEFF:
        raise EncodeOverflow(
            f"encoded coefficient magnitude {peak:.3g} exceeds 2^52; "
            "scale too large for these values")
    return np.rint(coeffs).astype(np.int64)


def decode_coeffs(emb: Embedding, coeffs: np.ndarray, scale: float) -> np.ndarray:
    return emb.to_slots(coeffs.astype(np.float64)).real / scale
