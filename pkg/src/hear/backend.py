"""Slot-semantics evaluation contract shared by the simulator and the CKKS
engine, plus the exact simulator.

Both backends expose the same operations over opaque ciphertext handles with
(level, scale) metadata.  Scales are exact Fractions so the strict add
contract and the per-step ladder assertions compare without float fuzz; the
engines convert to float only when quantizing at encode time.  The simulator
stores logical slot values verbatim: every op is the plain float64 slot
operation and only the (level, scale) ledger moves.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class LevelScaleError(RuntimeError):
    """Level or scale contract violation (no silent alignment)."""


COUNTER_KEYS = ("rot", "hoisted_rot_groups", "hoisted_rot_total",
                "mult", "mult_plain", "rescale", "add")


@dataclass
class OpCounters:
    """Per-layer-label tallies of homomorphic operations."""

    layers: dict[str, dict[str, int]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, label: str, key: str, n: int = 1):
        if key not in COUNTER_KEYS:
            raise KeyError(key)
        with self._lock:
            d = self.layers.setdefault(label, {k: 0 for k in COUNTER_KEYS})
            d[key] += n

    def layer(self, label: str) -> dict[str, int]:
        return dict(self.layers.get(label, {k: 0 for k in COUNTER_KEYS}))

    def total(self) -> dict[str, int]:
        out = {k: 0 for k in COUNTER_KEYS}
        for d in self.layers.values():
            for k in COUNTER_KEYS:
                out[k] += d[k]
        return out

    @property
    def all_rotations(self) -> int:
        t = self.total()
        return t["rot"] + t["hoisted_rot_total"]

    def as_dict(self) -> dict:
        return {label: dict(d) for label, d in sorted(self.layers.items())}

    def dump_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


@dataclass
class Ct:
    """Backend-opaque ciphertext handle with level/scale/slot metadata."""

    payload: object
    level: int
    scale: Fraction
    slots: int


@dataclass
class Pt:
    """Encoded plaintext: slot values at an encoding level and scale."""

    payload: object
    level: int
    scale: Fraction
    slots: int


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


class BackendBase:
    """Common contract plumbing: counters, layer labels, level/scale checks.

    Concrete backends implement the _raw_* slot operations; everything
    metadata-related lives here so the two engines cannot drift apart.
    """

    exact = False

    def __init__(self, params):
        self.params = params
        self.n2 = params.n2
        self.max_level = params.max_level
        self.counters = OpCounters()
        self._label = "setup"

    # -- counter labels ----------------------------------------------------

    @contextmanager
    def layer(self, label: str):
        prev = self._label
        self._label = label
        try:
            yield self
        finally:
            self._label = prev

    def _count(self, key: str, n: int = 1):
        self.counters.bump(self._label, key, n)

    def reset_counters(self):
        self.counters = OpCounters()

    # -- scale bookkeeping -------------------------------------------------

    def prime_at(self, level: int) -> int:
        """Chain prime dropped when rescaling from `level`."""
        return self.params.chain_primes[level]

    def assert_scale(self, ct: Ct, target):
        if ct.scale != _frac(target):
            raise LevelScaleError(
                f"scale mismatch: have {float(ct.scale):.6g}, want {float(_frac(target)):.6g}")

    # -- contract ops --------------------------------------------------------

    def encode(self, values, level: int, scale) -> Pt:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n2,):
            raise ValueError(f"plaintext must have {self.n2} slots")
        if level > self.max_level:
            raise LevelScaleError(f"encode level {level} above chain top {self.max_level}")
        return self._raw_encode(values, level, _frac(scale))

    def enc(self, values, level: int | None = None, scale=None) -> Ct:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n2,):
            raise ValueError(f"ciphertext must have {self.n2} slots")
        level = self.max_level if level is None else level
        if not 0 <= level <= self.max_level:
            raise LevelScaleError(f"encryption level {level} out of range")
        scale = _frac(self.params.msg_scale if scale is None else scale)
        return self._raw_enc(values, level, scale)

    def dec(self, ct: Ct) -> np.ndarray:
        return self._raw_dec(ct)

    def add(self, a: Ct, b: Ct) -> Ct:
        if a.level != b.level:
            raise LevelScaleError(f"add level mismatch: {a.level} vs {b.level}")
        if a.scale != b.scale:
            raise LevelScaleError(
                f"add scale mismatch: {float(a.scale):.6g} vs {float(b.scale):.6g}")
        self._count("add")
        return self._raw_add(a, b)

    def add_plain(self, a: Ct, p: Pt) -> Ct:
        if p.level < a.level:
            raise LevelScaleError("plaintext encoded below ciphertext level")
        if a.scale != p.scale:
            raise LevelScaleError(
                f"plain add scale mismatch: {float(a.scale):.6g} vs {float(p.scale):.6g}")
        self._count("add")
        return self._raw_add_plain(a, p)

    def mult(self, a: Ct, b: Ct) -> Ct:
        if a.level != b.level:
            raise LevelScaleError(f"mult level mismatch: {a.level} vs {b.level}")
        self._count("mult")
        return self._raw_mult(a, b)

    def mult_plain(self, a: Ct, p: Pt) -> Ct:
        if p.level < a.level:
            raise LevelScaleError(
                f"level-aware encoding violated: plaintext at {p.level}, ciphertext at {a.level}")
        self._count("mult_plain")
        return self._raw_mult_plain(a, p)

    def rot(self, a: Ct, k: int) -> Ct:
        k %= self.n2
        if k == 0:
            return a
        self._count("rot")
        return self._raw_rot(a, k)

    def rot_many(self, a: Ct, ks) -> dict[int, Ct]:
        """Rotations of one ciphertext sharing the hoisted preprocessing.
        Results are identical to individual rot calls; only counting differs."""
        ks = [k % self.n2 for k in ks]
        nonzero = sorted({k for k in ks if k != 0})
        if nonzero:
            self._count("hoisted_rot_groups")
            self._count("hoisted_rot_total", len(nonzero))
        out = self._raw_rot_many(a, nonzero)
        out[0] = a
        return {k: out[k] for k in ks}

    def rescale(self, a: Ct) -> Ct:
        if a.level < 1:
            raise LevelScaleError("cannot rescale below level 0")
        self._count("rescale")
        return self._raw_rescale(a)

    def mod_down(self, a: Ct, to_level: int) -> Ct:
        if to_level > a.level:
            raise LevelScaleError("mod_down cannot raise the level")
        if to_level == a.level:
            return a
        return self._raw_mod_down(a, to_level)


class SimBackend(BackendBase):
    """Exact slot simulator: float64 vectors with level/scale bookkeeping."""

    exact = True

    def _raw_encode(self, values, level, scale):
        return Pt(values.copy(), level, scale, self.n2)

    def _raw_enc(self, values, level, scale):
        return Ct(values.copy(), level, scale, self.n2)

    def _raw_dec(self, ct):
        return ct.payload.copy()

    def _raw_add(self, a, b):
        return Ct(a.payload + b.payload, a.level, a.scale, self.n2)

    def _raw_add_plain(self, a, p):
        return Ct(a.payload + p.payload, a.level, a.scale, self.n2)

    def _raw_mult(self, a, b):
        return Ct(a.payload * b.payload, a.level, a.scale * b.scale, self.n2)

    def _raw_mult_plain(self, a, p):
        return Ct(a.payload * p.payload, a.level, a.scale * p.scale, self.n2)

    def _raw_rot(self, a, k):
        return Ct(np.roll(a.payload, -k), a.level, a.scale, self.n2)

    def _raw_rot_many(self, a, ks):
        return {k: Ct(np.roll(a.payload, -k), a.level, a.scale, self.n2) for k in ks}

    def _raw_rescale(self, a):
        return Ct(a.payload.copy(), a.level - 1,
                  a.scale / self.prime_at(a.level), self.n2)

    def _raw_mod_down(self, a, to_level):
        return Ct(a.payload.copy(), to_level, a.scale, self.n2)

    # test hook: overwrite slots selected by `mask` with garbage, proving
    # downstream consumers zero every non-valid position
    def poison(self, ct: Ct, mask, value: float = 1e30):
        vals = ct.payload.copy()
        vals[np.asarray(mask, dtype=bool)] = value
        return Ct(vals, ct.level, ct.scale, self.n2)
