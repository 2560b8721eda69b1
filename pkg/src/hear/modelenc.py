"""Binding of trained parameters to a compiled pipeline: weight plaintexts,
activation coefficient vectors, merge masks, FC diagonals, and the byte
accounting behind the level-aware encoding ablation."""

from __future__ import annotations

import numpy as np

from .backend import BackendBase, Pt
from .convolution import ConvWeights
from .fastpath import CompiledPipeline
from .model import CollapsedParams

_HEADER_BYTES = 32          # per-plaintext serialized header (ids, level, scale)


class ModelEncoder:
    """Lazily encodes every model plaintext at its schedule (level, scale).

    Conv weight tables can dwarf memory at full parameters, so each layer
    caches its per-output tables only while the estimated footprint fits in
    `cache_budget` bytes; everything else (masks, coefficients, diagonals)
    is small and cached unconditionally.
    """

    def __init__(self, compiled: CompiledPipeline, params: CollapsedParams,
                 backend: BackendBase, cache_budget: int = 1 << 31):
        if params.shape != compiled.shape:
            raise ValueError("model shape does not match the compiled pipeline")
        params.validate()
        self.compiled = compiled
        self.model = params
        self.backend = backend
        self._conv: dict[int, ConvWeights] = {}
        self._coeff: dict = {}
        self._mask: dict[int, Pt] = {}
        self._fc: dict = {}
        self._budget = cache_budget

    # -- conv weights -------------------------------------------------------

    def conv_weights(self, t: int) -> ConvWeights:
        if t not in self._conv:
            cp = self.compiled
            plan = cp.plans[t - 1]
            level, scale = cp.encode_at[f"F{t}"]
            per_pt = (level + 1) * self.backend.params.n * 8 if not self.backend.exact \
                else cp.params.n2 * 8
            est = plan.f * plan.ell_i * plan.m * plan.n_o * per_pt
            self._conv[t] = ConvWeights(
                self.model.filters[t - 1], plan, self.backend, level, scale,
                cache=est <= self._budget)
        return self._conv[t]

    # -- activation coefficients ---------------------------------------------

    def coeff_pts(self, t: int):
        cp = self.compiled
        plan = cp.plans[t - 1]
        lay = cp.layouts[f"conv{t}"]
        c = self.model.coeffs[t - 1]

        def provider(j: int):
            key = (t, j)
            if key not in self._coeff:
                pts = []
                for deg, kind in ((2, f"c2_{t}"), (1, f"c1_{t}"), (0, f"c0_{t}")):
                    level, scale = cp.encode_at[kind]
                    per = lay.channels_per_ct
                    vals = np.zeros(per)
                    for b in range(per):
                        ch = j * per + b
                        if ch < plan.c_out:
                            vals[b] = c[deg, ch]
                    pts.append(self.backend.encode(
                        np.repeat(vals, lay.block), level, scale))
                self._coeff[key] = tuple(pts)
            return self._coeff[key]

        return provider

    # -- merge masks ----------------------------------------------------------

    def mask_pt(self, t: int) -> Pt:
        if t not in self._mask:
            cp = self.compiled
            level, scale = cp.encode_at[f"mask{t}"]
            lay = cp.layouts[f"pool{t - 1}"]
            self._mask[t] = self.backend.encode(lay.valid_slot_mask(), level, scale)
        return self._mask[t]

    # -- FC diagonals ----------------------------------------------------------

    def fc_pts(self, i: int, l: int) -> Pt:
        key = (i, l)
        if key not in self._fc:
            cp = self.compiled
            level, scale = cp.encode_at["W"]
            lay = cp.layouts["fc"]
            c = lay.channels_per_ct
            dist = cp.dist
            w = self.model.fc_w
            d_o, d_i = w.shape
            vals = np.zeros(cp.params.n2)
            for u in range(c):
                row = (u - l) % c
                col = i * c + u
                if row < d_o and col < d_i:
                    vals[dist * u] = w[row, col]
            self._fc[key] = self.backend.encode(vals, level, scale)
        return self._fc[key]

    @property
    def has_fc_bias(self) -> bool:
        return bool(np.any(self.model.fc_b))

    def fc_bias_pt(self) -> Pt:
        cp = self.compiled
        st = cp.expected("fc")
        vals = np.zeros(cp.params.n2)
        for m, b in enumerate(self.model.fc_b):
            vals[cp.dist * m] = b
        return self.backend.encode(vals, st.level, st.scale)

    # -- inventory / storage accounting ----------------------------------------

    def plaintext_inventory(self) -> list[tuple[str, int, int]]:
        """(kind, count, encode_level) for every plaintext the model needs."""
        cp = self.compiled
        inv = []
        for t in (1, 2, 3):
            plan = cp.plans[t - 1]
            inv.append((f"F{t}", plan.f * plan.ell_i * plan.m * plan.n_o,
                        cp.encode_at[f"F{t}"][0]))
            for kind in (f"c2_{t}", f"c1_{t}", f"c0_{t}"):
                inv.append((kind, plan.n_o, cp.encode_at[kind][0]))
            if cp.mode == "fast" and t > 1:
                inv.append((f"mask{t}", 1, cp.encode_at[f"mask{t}"][0]))
        lay = cp.layouts["fc"]
        inv.append(("W", lay.n_ct * lay.channels_per_ct, cp.encode_at["W"][0]))
        return inv

    def storage_bytes(self, level_aware: bool = True) -> int:
        """Serialized size of the encoded model: each plaintext stores one
        little-endian u64 limb vector per RNS prime at (or, without the
        level-aware optimization, for the full chain) plus a fixed header."""
        n = self.compiled.params.n
        top = self.compiled.params.max_level
        total = 0
        for _, count, level in self.plaintext_inventory():
            limbs = (level + 1) if level_aware else (top + 1)
            total += count * (limbs * n * 8 + _HEADER_BYTES)
        return total

    def storage_report(self) -> dict:
        la, full = self.storage_bytes(True), self.storage_bytes(False)
        return {
            "mode": self.compiled.mode,
            "plaintexts": sum(c for _, c, _ in self.plaintext_inventory()),
            "bytes_level_aware": la,
            "bytes_full_level": full,
            "ratio": la / full,
        }
