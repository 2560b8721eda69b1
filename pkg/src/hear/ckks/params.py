"""Encryption parameter profiles: NTT-friendly modulus chains per Table-style
bit layouts, message/mask scale factors, and the error distribution width.

Profiles:
  hear       N=2^14, L=10, 37/35/-/37-bit primes, log2 q = 387
  fast-hear  N=2^14, L=12, 33/31/28/33-bit primes, log2 q = 399
             (28-bit mask primes sit at chain positions 5 and 9, the levels
             consumed by the two pre-processing rescales)
  toy-hear / toy-fast   N=2^12 scaled-down chains for fast unit tests;
             NOT secure, flagged insecure=True.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import sympy


@dataclass(frozen=True)
class ParameterSet:
    name: str
    n: int                      # ring degree (power of two)
    chain_primes: tuple[int, ...]   # p_0 .. p_L (p_0 = output modulus)
    special_prime: int
    msg_scale: int              # Delta_msg
    mask_scale: int             # Delta_mask (merge pre-processing masks)
    error_std: float = 3.2
    insecure: bool = False

    @property
    def n2(self) -> int:
        return self.n // 2

    @property
    def max_level(self) -> int:
        return len(self.chain_primes) - 1

    @property
    def log2_q(self) -> float:
        total = 1
        for p in self.chain_primes:
            total *= p
        return total.bit_length() - 1

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n}|{self.chain_primes}|{self.special_prime}"
                 f"|{self.msg_scale}|{self.mask_scale}".encode())
        return h.hexdigest()[:16]

    def scale_of(self, kind: str) -> Fraction:
        return Fraction(self.msg_scale if kind == "msg" else self.mask_scale)


def _ntt_primes(bits: int, two_n: int, count: int, taken: set[int]) -> list[int]:
    """`count` distinct primes = 1 mod two_n as close to 2^bits as possible,
    alternating above/below the target."""
    target = 1 << bits
    base = target // two_n * two_n + 1
    found: list[int] = []
    step = 0
    while len(found) < count:
        step += 1
        for cand in (base + step * two_n, base - step * two_n):
            if cand <= two_n or cand in taken or len(found) >= count:
                continue
            if cand.bit_length() not in (bits, bits + 1):
                continue
            if sympy.isprime(cand):
                found.append(cand)
                taken.add(cand)
        if step > 200000:
            raise RuntimeError(f"no NTT prime found near 2^{bits} for 2N={two_n}")
    return found


def _build(name, n, q0_bits, msg_bits, mask_bits, special_bits, levels,
           mask_positions=(), insecure=False) -> ParameterSet:
    two_n = 2 * n
    taken: set[int] = set()
    q0 = _ntt_primes(q0_bits, two_n, 1, taken)[0]
    special = _ntt_primes(special_bits, two_n, 1, taken)[0]
    n_mask = len(mask_positions)
    msg = _ntt_primes(msg_bits, two_n, levels - n_mask, taken)
    mask = _ntt_primes(mask_bits, two_n, n_mask, taken) if n_mask else []
    chain = [q0]
    mi = iter(msg)
    ki = iter(mask)
    for pos in range(1, levels + 1):
        chain.append(next(ki) if pos in mask_positions else next(mi))
    return ParameterSet(
        name=name, n=n, chain_primes=tuple(chain), special_prime=special,
        msg_scale=1 << msg_bits, mask_scale=1 << mask_bits if n_mask else 1 << msg_bits,
        insecure=insecure,
    )


_PROFILES = {}


def gen_params(profile: str = "fast-hear") -> ParameterSet:
    """Parameter set for a named profile (results are cached: prime search is
    deterministic but not free)."""
    key = profile.lower()
    if key in _PROFILES:
        return _PROFILES[key]
    if key == "hear":
        ps = _build("hear", 1 << 14, 37, 35, 0, 37, levels=10)
    elif key == "fast-hear":
        ps = _build("fast-hear", 1 << 14, 33, 31, 28, 33, levels=12,
                    mask_positions=(5, 9))
    elif key == "toy-hear":
        ps = _build("toy-hear", 1 << 12, 30, 27, 0, 30, levels=10, insecure=True)
    elif key == "toy-fast":
        ps = _build("toy-fast", 1 << 12, 30, 27, 22, 30, levels=12,
                    mask_positions=(5, 9), insecure=True)
    else:
        raise KeyError(f"unknown profile '{profile}'")
    _PROFILES[key] = ps
    return ps


def gen_params_custom(n: int, chain_bits: list[int], special_bits: int,
                      msg_scale_bits: int, mask_scale_bits: int | None = None,
                      name: str = "custom") -> ParameterSet:
    """Explicit chain layout (every custom set is treated as insecure)."""
    two_n = 2 * n
    taken: set[int] = set()
    chain = []
    for b in chain_bits:
        chain.append(_ntt_primes(b, two_n, 1, taken)[0])
    special = _ntt_primes(special_bits, two_n, 1, taken)[0]
    return ParameterSet(
        name=name, n=n, chain_primes=tuple(chain), special_prime=special,
        msg_scale=1 << msg_scale_bits,
        mask_scale=1 << (mask_scale_bits if mask_scale_bits else msg_scale_bits),
        insecure=True,
    )
