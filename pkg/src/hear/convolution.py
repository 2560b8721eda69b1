"""Homomorphic convolution over packed slots.

A conv layer consumes n_I ciphertexts of ell channel blocks each and emits
n_O ciphertexts whose block b holds output channel j*ell_O + b.  Per output
the evaluator sums MultPlain(rot(ct_i, r_k + block*l), pt[i,j,k,l]) over
input ciphertexts i, kernel taps k and block alignments l; the three
strategies only reschedule which handle gets rotated:

  full   pre-rotate every r_k + block*l per input        (one hoist group/input)
  giant  pre-rotate block*l, tap-rotate the partial sums (counter-rotated pts)
  baby   pre-rotate r_k, block-rotate the partial sums   (counter-rotated pts)

Weight plaintexts carry zeros wherever a tap would read across the map
boundary (same padding), across a block seam, a junk lattice position, or a
channel that does not exist, so garbage slots never leak into valid ones.

Two evaluators produce the partial sums:
  * the op path issues one MultPlain per plaintext (the only possibility on
    the CKKS engine);
  * the fused path, used on exact backends, contracts the same products with
    BLAS matmuls against the filter tensor directly.  Partial-sum values are
    identical up to float addition order (bit-identical on dyadic data, and
    the 0/1 masks factor out exactly); rotation/rescale scheduling and all
    counter cardinalities are the same ops either way.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .backend import BackendBase, Ct, Pt
from .layout import PackedLayout


@dataclass(frozen=True)
class MergeGrid:
    """Sub-offset occupancy of a merged ciphertext: sources interleave into
    n_rows x n_cols adjacent slot rows/columns of each stride cell."""

    n_p: int
    n_cols: int
    n_rows: int


@dataclass
class ConvPlan:
    t: int
    strategy: str
    layout_in: PackedLayout      # per-source geometry of the conv input
    merge: MergeGrid | None      # None outside the fast path / for conv1
    taps: list[tuple[int, int]]
    n_i: int                     # unmerged input ciphertext count
    n_o: int
    ell_i: int                   # block-alignment rotations (2 for conv1 replicas)
    ell_o: int
    c_in: int
    c_out: int

    @property
    def n_p(self) -> int:
        return self.merge.n_p if self.merge else 1

    @property
    def m(self) -> int:
        return self.n_i // self.n_p

    @property
    def block(self) -> int:
        return self.layout_in.block

    @property
    def tap_amounts(self) -> list[int]:
        lay = self.layout_in
        return [(dy * lay.map_w + dx) * lay.stride for dy, dx in self.taps]

    @property
    def f(self) -> int:
        return len(self.taps)

    def rotation_amounts(self) -> set[int]:
        """Slot-rotation amounts this plan needs (strategy dependent)."""
        blocks = [self.block * l for l in range(self.ell_i)]
        taps = self.tap_amounts
        if self.strategy == "full":
            amts = {r + b for r in taps for b in blocks}
        elif self.strategy == "giant":
            amts = set(blocks) | set(taps)
        elif self.strategy == "baby":
            amts = set(taps) | set(blocks)
        else:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        return {a % self.layout_in.n2 for a in amts if a % self.layout_in.n2}

    def describe(self) -> dict:
        return {
            "layer": f"conv{self.t}",
            "strategy": self.strategy,
            "n_I": self.n_i, "n_O": self.n_o, "n_P": self.n_p,
            "ell_I": self.ell_i, "ell_O": self.ell_o,
            "taps": self.tap_amounts,
            "rotations": sorted(self.rotation_amounts()),
        }


def make_plan(t: int, shape, layout_in: PackedLayout, strategy: str,
              merge: MergeGrid | None = None) -> ConvPlan:
    ell = layout_in.channels_per_ct
    c_in, c_out = shape.channels_in(t), shape.channels_out(t)
    if t == 1:
        n_i, ell_i = 1, c_in
    else:
        n_i, ell_i = -(-c_in // ell), ell
    return ConvPlan(
        t=t, strategy=strategy, layout_in=layout_in, merge=merge,
        taps=shape.taps, n_i=n_i, n_o=-(-c_out // ell),
        ell_i=ell_i, ell_o=ell, c_in=c_in, c_out=c_out,
    )


class _Geometry:
    """Per-slot masks of one conv input layout (everything is block-periodic,
    so q-space (block,) arrays suffice)."""

    def __init__(self, plan: ConvPlan):
        lay = plan.layout_in
        b = lay.block
        q = np.arange(b)
        row = q // lay.map_w
        col = q % lay.map_w
        pad = q >= lay.map_h * lay.map_w
        s = lay.stride
        dr, dc = row % s, col % s
        if plan.merge:
            self.n_rows, self.n_cols = plan.merge.n_rows, plan.merge.n_cols
        else:
            self.n_rows = self.n_cols = 1
        src_ok = ~pad & (dr < self.n_rows) & (dc < self.n_cols)
        br, bc = (row - dr) // s, (col - dc) // s
        self.src = np.where(src_ok, dr * self.n_cols + dc, -1)
        self.out_valid = src_ok & (br < lay.cur_h) & (bc < lay.cur_w)
        self.tap_ok = [
            self.out_valid
            & (br + dy >= 0) & (br + dy < lay.cur_h)
            & (bc + dx >= 0) & (bc + dx < lay.cur_w)
            for dy, dx in plan.taps
        ]


class ConvWeights:
    """Weight plaintexts of one conv layer, built lazily per output block.

    Slot s of pt[i, j, k, l] holds F[out(s), in(s, i, l), k] when the slot is
    a partial-result position of its source lattice and the tap lands in-map,
    else 0.  Giant/baby tables are the counter-rotated full tables.
    """

    def __init__(self, filters: np.ndarray, plan: ConvPlan, backend: BackendBase,
                 level: int, scale: Fraction, cache: bool = True):
        self.filters = np.asarray(filters, dtype=np.float64)
        self.plan = plan
        self.backend = backend
        self.level = level
        self.scale = scale
        self.cache = cache
        self._cached: dict[int, dict] = {}
        self.geom = _Geometry(plan)

    def pt_count(self) -> int:
        return self.plan.f * self.plan.ell_i * self.plan.m * self.plan.n_o

    def tap_matrix(self, k: int) -> np.ndarray:
        """Filter tensor slice for tap k as (n_o*ell_o, contraction rows)."""
        plan = self.plan
        dy, dx = plan.taps[k]
        ky = 0 if self.filters.shape[2] == 1 else dy + 1
        fk = self.filters[:, :, ky, dx + 1]
        rows = plan.n_o * plan.ell_o
        out = np.zeros((rows, fk.shape[1]))
        out[:plan.c_out] = fk
        return out

    def for_output(self, j: int) -> dict[tuple[int, int, int], Pt]:
        if j in self._cached:
            return self._cached[j]
        table = {}
        plan = self.plan
        for i in range(plan.m):
            for l in range(plan.ell_i):
                vals = self._values(j, i, l)          # (f, n2)
                for k in range(plan.f):
                    v = vals[k]
                    if plan.strategy == "giant":
                        v = np.roll(v, plan.tap_amounts[k])
                    elif plan.strategy == "baby":
                        v = np.roll(v, plan.block * l)
                    table[(i, k, l)] = self.backend.encode(v, self.level, self.scale)
        if self.cache:
            self._cached[j] = table
        return table

    def _values(self, j: int, i: int, l: int) -> np.ndarray:
        """Full-strategy weight vectors for all taps of one (j, i, l)."""
        g = self.geom
        plan = self.plan
        lay = plan.layout_in
        per = lay.channels_per_ct
        blk = np.repeat(np.arange(per), lay.block)
        src = np.tile(g.src, per)
        oc = j * plan.ell_o + blk
        oc_ok = oc < plan.c_out
        in_blk = (blk + l) % per
        if lay.replicas > 1:
            ch = in_blk % lay.channels
        else:
            ch = (i * plan.n_p + np.maximum(src, 0)) * per + in_blk
        ch_ok = (ch < plan.c_in) & (src >= 0)
        base = oc_ok & ch_ok
        occ = np.minimum(oc, plan.c_out - 1)
        chc = np.minimum(ch, plan.c_in - 1)
        w = self.filters[occ, chc]                    # (n2, kh, kw)
        out = np.empty((plan.f, lay.n2))
        for k, (dy, dx) in enumerate(plan.taps):
            ky = 0 if w.shape[1] == 1 else dy + 1
            ok = base & np.tile(g.tap_ok[k], per)
            out[k] = np.where(ok, w[:, ky, dx + 1], 0.0)
        return out


# ---------- evaluation ----------

def simple_conv(ct: Ct, pts: list[Pt], amounts: list[int], backend: BackendBase) -> Ct:
    """Single-ciphertext convolution: sum_k MultPlain(rot(ct, r_k), pt_k).
    Caller rescales (lazy rescaling)."""
    if len(pts) != len(amounts):
        raise ValueError("one plaintext per tap")
    rots = backend.rot_many(ct, amounts)
    acc = None
    for r, pt in zip(amounts, pts):
        term = backend.mult_plain(rots[r % backend.n2], pt)
        acc = term if acc is None else backend.add(acc, term)
    return acc


def hconv(cts: list[Ct], weights: ConvWeights, plan: ConvPlan,
          backend: BackendBase, fused: bool | None = None) -> list[Ct]:
    """Multi-channel convolution of all output blocks under plan.strategy,
    one rescale per output ciphertext."""
    if len(cts) != plan.m:
        raise ValueError(f"expected {plan.m} input ciphertexts, got {len(cts)}")
    if backend.exact if fused is None else fused:
        partials = _fused_partials(cts, weights, plan, backend)
    else:
        partials = _op_partials(cts, weights, plan, backend)
    taps = plan.tap_amounts
    blocks = [plan.block * l for l in range(plan.ell_i)]
    outs = []
    for j in range(plan.n_o):
        out = None
        if plan.strategy == "baby":
            for l in range(plan.ell_i):
                part = backend.rot(partials[(j, l)], blocks[l])
                out = part if out is None else backend.add(out, part)
        else:
            for k in range(plan.f):
                part = partials[(j, k)]
                if plan.strategy == "giant":
                    part = backend.rot(part, taps[k])
                out = part if out is None else backend.add(out, part)
        outs.append(backend.rescale(out))
    return outs


def _op_partials(cts, weights: ConvWeights, plan: ConvPlan, backend) -> dict:
    """Per-plaintext MultPlain/Add schedule; keys (j, k) for full/giant
    (pre-rotation amounts baked per strategy), (j, l) for baby."""
    n2 = backend.n2
    taps = plan.tap_amounts
    blocks = [plan.block * l for l in range(plan.ell_i)]
    if plan.strategy == "full":
        pre = [backend.rot_many(ct, [r + b for r in taps for b in blocks])
               for ct in cts]
    elif plan.strategy == "giant":
        pre = [backend.rot_many(ct, blocks) for ct in cts]
    else:
        pre = [backend.rot_many(ct, taps) for ct in cts]
    partials = {}
    for j in range(plan.n_o):
        pts = weights.for_output(j)
        if plan.strategy == "baby":
            for l in range(plan.ell_i):
                acc = None
                for k in range(plan.f):
                    for i in range(plan.m):
                        term = backend.mult_plain(pre[i][taps[k] % n2], pts[(i, k, l)])
                        acc = term if acc is None else backend.add(acc, term)
                partials[(j, l)] = acc
        else:
            for k in range(plan.f):
                acc = None
                for l in range(plan.ell_i):
                    for i in range(plan.m):
                        if plan.strategy == "full":
                            src = (taps[k] + blocks[l]) % n2
                        else:
                            src = blocks[l] % n2
                        term = backend.mult_plain(pre[i][src], pts[(i, k, l)])
                        acc = term if acc is None else backend.add(acc, term)
                partials[(j, k)] = acc
    return partials


def _fused_partials(cts, weights: ConvWeights, plan: ConvPlan, backend) -> dict:
    """Same partial sums as _op_partials, contracted against the filter
    tensor with matmuls.  The strategy's hoisted pre-rotations are still
    performed (they are the schedule; on the simulator a rotation is an
    exact permutation), and MultPlain/Add counters are bumped to the same
    cardinalities the op path would produce."""
    n2 = backend.n2
    lay = plan.layout_in
    per, blk = lay.channels_per_ct, lay.block
    taps = plan.tap_amounts
    blocks = [plan.block * l for l in range(plan.ell_i)]
    g = weights.geom
    label = backend._label

    if plan.strategy == "full":
        for ct in cts:
            backend.rot_many(ct, [r + bl for r in taps for bl in blocks])
    elif plan.strategy == "giant":
        for ct in cts:
            backend.rot_many(ct, blocks)
    else:
        for ct in cts:
            backend.rot_many(ct, taps)
    level = cts[0].level
    scale = cts[0].scale * weights.scale

    col_sets = None
    if plan.merge is not None:
        col_sets = [np.flatnonzero(g.src == s)
                    for s in range(g.n_rows * g.n_cols)]

    partials = {}
    if plan.strategy in ("full", "giant"):
        for k in range(plan.f):
            gk = _tap_gemm(cts, weights, plan, k, col_sets)   # (n_o*per, blk)
            mask = np.tile(g.tap_ok[k], per).astype(np.float64)
            rolled = np.roll(mask, taps[k]) if plan.strategy == "giant" else None
            for j in range(plan.n_o):
                flat = gk[j * per:(j + 1) * per].reshape(n2)
                if plan.strategy == "giant":
                    vals = rolled * flat
                else:
                    vals = mask * np.roll(flat, -taps[k])
                partials[(j, k)] = Ct(vals, level, scale, n2)
        n_products = plan.ell_i * plan.m
        backend.counters.bump(label, "mult_plain", plan.f * n_products * plan.n_o)
        backend.counters.bump(label, "add", plan.f * (n_products - 1) * plan.n_o)
    else:
        hsum = np.zeros((per, plan.n_o * plan.ell_o, blk))    # (b, o, q)
        for k in range(plan.f):
            _tap_h_accum(cts, weights, plan, k, col_sets,
                         g.tap_ok[k].astype(np.float64), hsum)
        brange = np.arange(per)
        for l in range(plan.ell_i):
            o_idx = (np.arange(plan.n_o)[:, None] * plan.ell_o
                     + (brange[None, :] - l) % per).reshape(-1)
            b_idx = np.tile(brange, plan.n_o)
            flat = hsum[b_idx, o_idx, :]                      # (n_o*per, blk)
            for j in range(plan.n_o):
                vals = flat[j * per:(j + 1) * per].reshape(n2)
                partials[(j, l)] = Ct(vals, level, scale, n2)
        backend.counters.bump(label, "mult_plain",
                              plan.f * plan.m * plan.ell_i * plan.n_o)
        backend.counters.bump(label, "add",
                              plan.ell_i * (plan.f * plan.m - 1) * plan.n_o)
    return partials


def _tap_gemm(cts, weights, plan, k, col_sets) -> np.ndarray:
    """Giant-form tap contraction over every input channel:
    G[o, q] = sum_c F[o, c, k] * (channel c's block values at offset q)."""
    lay = plan.layout_in
    per, blk = lay.channels_per_ct, lay.block
    fk = weights.tap_matrix(k)
    if lay.replicas > 1:
        v = np.stack([cts[0].payload[c * blk:(c + 1) * blk]
                      for c in range(lay.channels)])
        return fk[:, :lay.channels] @ v
    v = np.concatenate([ct.payload.reshape(per, blk) for ct in cts])
    if plan.merge is None:
        c = min(plan.c_in, v.shape[0])
        return fk[:, :c] @ v[:c]
    out = np.zeros((fk.shape[0], blk))
    for s in range(plan.merge.n_rows * plan.merge.n_cols):
        cols = col_sets[s]
        if cols.size == 0:
            continue
        fsel, rows = _merged_channels(plan, s, per)
        out[:, cols] = fk[:, fsel] @ v[np.ix_(rows, cols)]
    return out


def _tap_h_accum(cts, weights, plan, k, col_sets, qmask, hsum):
    """Baby-form tap contraction keeping the input block axis, accumulated
    into hsum[b, o, q] += sum_i F[o, ch(i, b, src(q)), k] * masked-rolled ct."""
    lay = plan.layout_in
    per, blk = lay.channels_per_ct, lay.block
    r = plan.tap_amounts[k]
    fk = weights.tap_matrix(k)
    if lay.replicas > 1:
        vr = np.roll(cts[0].payload, -r).reshape(per, blk) * qmask[None, :]
        for b in range(per):
            hsum[b] += np.outer(fk[:, b % lay.channels], vr[b])
        return
    vrb = np.empty((per, plan.m, blk))                        # (b, i, q)
    for i, ct in enumerate(cts):
        vrb[:, i, :] = np.roll(ct.payload, -r).reshape(per, blk)
    vrb *= qmask[None, None, :]
    rows_o = fk.shape[0]
    # channels are laid out (i, s, b)-major, so the per-(source, block)
    # contraction tensors are one reshape-transpose of the tap matrix
    full_cols = plan.m * plan.n_p * per
    fpad = fk if fk.shape[1] == full_cols else \
        np.pad(fk, ((0, 0), (0, full_cols - fk.shape[1])))
    if plan.merge is None:
        f4 = np.ascontiguousarray(
            fpad.reshape(rows_o, plan.m, per).transpose(2, 0, 1))
        hsum += np.matmul(f4, vrb)                            # (b, o, q)
        return
    fs = np.ascontiguousarray(
        fpad.reshape(rows_o, plan.m, plan.n_p, per).transpose(2, 3, 0, 1))
    for s in range(plan.merge.n_rows * plan.merge.n_cols):
        cols = col_sets[s]
        if cols.size == 0:
            continue
        h = np.matmul(fs[s], np.ascontiguousarray(vrb[:, :, cols]))
        hsum[:, :, cols] += h


def _merged_channels(plan, s, per):
    """(filter columns, V rows) of source s inside merged ciphertexts."""
    fsel, rows = [], []
    for i in range(plan.m):
        base = (i * plan.n_p + s) * per
        for b in range(per):
            if base + b < plan.c_in:
                fsel.append(base + b)
                rows.append(i * per + b)
    return np.array(fsel, dtype=np.intp), np.array(rows, dtype=np.intp)
