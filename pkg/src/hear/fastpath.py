"""Pipeline scheduling: pooling, merge-and-conquer convolution, collapsed
activations, global pooling + FC, and the end-to-end evaluator with its
level/scale ladder assertions.

Mode "hear" consumes 10 levels (conv, square, activation per block, FC);
mode "fast" consumes 12, spending one extra level per merge pre-processing
(multiplicative zero-one masks at the small mask scale, whose rescale drops
the matching 28-bit chain prime).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .backend import BackendBase, Ct, LevelScaleError
from .convolution import ConvPlan, ConvWeights, MergeGrid, hconv, make_plan
from .layout import PackedLayout, input_layout, load_factor
from .model import CollapsedParams, NetworkShape


class ScheduleError(LevelScaleError):
    """A pipeline step deviated from the declared level/scale ladder."""


@dataclass(frozen=True)
class MergeSpec:
    """Pre/post-processing recipe for one merged conv layer."""

    n_p: int
    n_cols: int
    n_rows: int
    mu: tuple[int, ...]          # per-source right-shift amounts (source 0 fixed)
    nu: tuple[int, ...]          # post-processing rotate-and-sum amounts

    @property
    def grid(self) -> MergeGrid:
        return MergeGrid(self.n_p, self.n_cols, self.n_rows)


def build_merge_spec(layout: PackedLayout, n_i: int, t: int, dim: int) -> MergeSpec:
    """Interleave n_P pooled sources into one ciphertext's junk lattice.

    Column sub-offsets fill first (up to the stride), then row sub-offsets;
    post-processing inverts the interleave by per-axis rotate-and-sum."""
    n_p = load_factor(t, n_i, dim)
    if n_p & (n_p - 1):
        raise ValueError(f"load factor must be a power of two, got {n_p}")
    s = layout.stride
    n_cols = min(n_p, s)
    n_rows = n_p // n_cols
    if n_rows > s or (layout.map_h == 1 and n_rows > 1):
        raise ValueError(f"cannot interleave {n_p} sources into a stride-{s} lattice")
    mu = tuple((u % n_cols) + (u // n_cols) * layout.map_w for u in range(n_p))
    nu = tuple(1 << j for j in range((n_cols - 1).bit_length())) + \
         tuple((1 << j) * layout.map_w for j in range((n_rows - 1).bit_length()))
    spec = MergeSpec(n_p, n_cols, n_rows, mu, nu)
    _check_disjoint(layout, spec)
    return spec


def _check_disjoint(layout: PackedLayout, spec: MergeSpec):
    mask = layout.valid_slot_mask(channels_in_ct=layout.channels_per_ct)
    total = np.zeros_like(mask)
    for off in spec.mu:
        total += np.roll(mask, off)
    if total.max() > 1:
        raise ValueError("merge offsets collide: shifted valid lattices overlap")


def avg_pool(cts: list[Ct], layout: PackedLayout, backend: BackendBase
             ) -> tuple[list[Ct], PackedLayout]:
    """Rotate-and-add window sums; valid values stay at the leftmost slot of
    each patch (division is pre-folded into the activation coefficients)."""
    if layout.cur_w < 2 or (layout.map_h > 1 and layout.cur_h < 2):
        raise ValueError("map extent smaller than the pooling window")
    s = layout.stride
    out = []
    for ct in cts:
        ct = backend.add(ct, backend.rot(ct, s))
        if layout.map_h > 1:
            ct = backend.add(ct, backend.rot(ct, s * layout.map_w))
        out.append(ct)
    return out, layout.after_pool()


def pre_process(cts: list[Ct], spec: MergeSpec, mask_pt, backend: BackendBase) -> list[Ct]:
    """Mask out junk, shift each source into its sub-offset, add, rescale."""
    merged = []
    for g in range(len(cts) // spec.n_p):
        group = cts[g * spec.n_p:(g + 1) * spec.n_p]
        acc = backend.mult_plain(group[0], mask_pt)
        for u in range(1, spec.n_p):
            shifted = backend.rot(backend.mult_plain(group[u], mask_pt), -spec.mu[u])
            acc = backend.add(acc, shifted)
        merged.append(backend.rescale(acc))
    return merged


def post_process(cts: list[Ct], spec: MergeSpec, backend: BackendBase) -> list[Ct]:
    """Fold the n_P partial sums back onto the source lattice."""
    out = []
    for ct in cts:
        for a in spec.nu:
            ct = backend.add(ct, backend.rot(ct, a))
        out.append(ct)
    return out


def fast_hconv(cts: list[Ct], weights: ConvWeights, plan: ConvPlan,
               spec: MergeSpec, mask_pt, backend: BackendBase) -> list[Ct]:
    """Merge-and-conquer convolution: pre-process, convolve merged inputs,
    rotate-and-sum the partials."""
    if plan.n_p != spec.n_p:
        raise ValueError("plan/merge-spec load factors disagree")
    merged = pre_process(cts, spec, mask_pt, backend)
    conv = hconv(merged, weights, plan, backend)
    return post_process(conv, spec, backend)


def poly_activate(cts: list[Ct], coeff_pts, backend: BackendBase) -> list[Ct]:
    """Per-channel x -> c0 + c1*x + c2*x^2 on every slot.

    Square first (with its own rescale), then both coefficient products at
    the square's level, one more rescale, then the constant as a plain add
    encoded at the post-rescale scale.  Junk slots keep whatever this makes
    of them; every consumer zeroes non-valid positions."""
    out = []
    for j, ct in enumerate(cts):
        c2pt, c1pt, c0pt = coeff_pts(j)
        sq = backend.rescale(backend.mult(ct, ct))
        t2 = backend.mult_plain(sq, c2pt)
        t1 = backend.mult_plain(backend.mod_down(ct, sq.level), c1pt)
        lin = backend.rescale(backend.add(t2, t1))
        out.append(backend.add_plain(lin, c0pt))
    return out


def rotate_sum(ct: Ct, count: int, step: int, backend: BackendBase) -> Ct:
    """Accumulate `count` entries spaced `step` slots onto the first one:
    doubling over the power-of-two part, then one hoisted pass over the odd
    part (junk-reading doublings would corrupt non-power-of-two counts)."""
    b = (count & -count).bit_length() - 1
    odd = count >> b
    for i in range(b):
        ct = backend.add(ct, backend.rot(ct, step << i))
    if odd > 1:
        stride = step << b
        rots = backend.rot_many(ct, [stride * j for j in range(1, odd)])
        for j in range(1, odd):
            ct = backend.add(ct, rots[(stride * j) % backend.n2])
    return ct


def global_sum(cts: list[Ct], layout: PackedLayout, backend: BackendBase) -> list[Ct]:
    """Per-channel total at each block's first slot."""
    out = []
    for ct in cts:
        ct = rotate_sum(ct, layout.cur_w, layout.stride, backend)
        if layout.map_h > 1:
            ct = rotate_sum(ct, layout.cur_h, layout.stride * layout.map_w, backend)
        out.append(ct)
    return out


def fc_diagonal(cts: list[Ct], fc_pts, ell: int, dist: int,
                backend: BackendBase) -> Ct:
    """Diagonal-method matrix-vector product over block-sparse inputs:
    sum_l rot(sum_i pt[i][l] * ct_i, dist*l) with exactly ell-1 rotations."""
    out = None
    for l in range(ell):
        acc = None
        for i, ct in enumerate(cts):
            term = backend.mult_plain(ct, fc_pts(i, l))
            acc = term if acc is None else backend.add(acc, term)
        part = backend.rot(acc, dist * l)
        out = part if out is None else backend.add(out, part)
    return backend.rescale(out)


# ---------- compiled pipeline ----------

@dataclass
class Step:
    name: str
    level: int
    scale: Fraction


@dataclass
class CompiledPipeline:
    """Everything static about one (network, mode, strategy, parameters) run:
    stage layouts, conv plans, merge specs, the level/scale ladder, plaintext
    encode points and the rotation-amount set."""

    shape: NetworkShape
    mode: str
    strategy: str
    params: object
    layouts: dict = field(default_factory=dict)
    plans: list = field(default_factory=list)
    merges: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    encode_at: dict = field(default_factory=dict)   # kind -> (level, scale)
    rotations: dict = field(default_factory=dict)   # amount -> max level used

    @property
    def dist(self) -> int:
        lay = self.layouts["fc"]
        return lay.n2 // lay.channels_per_ct

    def expected(self, name: str) -> Step:
        for st in self.steps:
            if st.name == name:
                return st
        raise KeyError(name)

    def ladder_levels(self) -> list[int]:
        return [st.level for st in self.steps]


def compile_pipeline(shape: NetworkShape, mode: str, strategy: str, params
                     ) -> CompiledPipeline:
    if mode not in ("hear", "fast"):
        raise ValueError(f"mode must be 'hear' or 'fast', got '{mode}'")
    cp = CompiledPipeline(shape, mode, strategy, params)
    n2 = params.n2
    h, w = shape.map0
    lay = input_layout(h, w, n2)
    if shape.classes > lay.channels_per_ct:
        raise ValueError("more classes than channels per ciphertext")
    needed = 10 if mode == "hear" else 12
    if params.max_level != needed:
        raise ValueError(f"mode '{mode}' needs an L={needed} chain, "
                         f"profile '{params.name}' has L={params.max_level}")

    delta = Fraction(params.msg_scale)
    dmask = Fraction(params.mask_scale)
    lvl = params.max_level
    s = delta
    cp.layouts["input"] = lay
    cp.steps.append(Step("input", lvl, s))

    def note_rot(amount: int, level: int):
        a = amount % n2
        if a:
            cp.rotations[a] = max(cp.rotations.get(a, 0), level)

    for t in (1, 2, 3):
        merge = None
        if t > 1:
            n_i = -(-shape.channels_in(t) // lay.channels_per_ct)
            if mode == "fast":
                spec = build_merge_spec(lay, n_i, t, shape.dim)
                cp.merges[t] = spec
                merge = spec.grid
                cp.encode_at[f"mask{t}"] = (lvl, dmask)
                for u in range(1, spec.n_p):
                    note_rot(-spec.mu[u], lvl)
                s = s * dmask / params.chain_primes[lvl]
                lvl -= 1
                cp.steps.append(Step(f"merge{t}", lvl, s))
        plan = make_plan(t, shape, lay, strategy, merge)
        cp.plans.append(plan)
        cp.encode_at[f"F{t}"] = (lvl, delta)
        for a in plan.rotation_amounts():
            note_rot(a, lvl)
        s = s * delta / params.chain_primes[lvl]
        lvl -= 1
        cp.steps.append(Step(f"conv{t}", lvl, s))
        if mode == "fast" and t > 1:
            for a in cp.merges[t].nu:
                note_rot(a, lvl)
        s_conv = s
        s = s * s / params.chain_primes[lvl]
        lvl -= 1
        cp.steps.append(Step(f"sqr{t}", lvl, s))
        cp.encode_at[f"c2_{t}"] = (lvl, delta)
        cp.encode_at[f"c1_{t}"] = (lvl, s * delta / s_conv)
        s = s * delta / params.chain_primes[lvl]
        lvl -= 1
        cp.encode_at[f"c0_{t}"] = (lvl, s)
        cp.steps.append(Step(f"act{t}", lvl, s))
        lay = lay.with_channels(shape.channels_out(t))
        cp.layouts[f"conv{t}"] = lay
        if t < 3:
            note_rot(lay.stride, lvl)
            if lay.map_h > 1:
                note_rot(lay.stride * lay.map_w, lvl)
            lay = lay.after_pool()
            cp.steps.append(Step(f"pool{t}", lvl, s))
            cp.layouts[f"pool{t}"] = lay

    # global sum + FC
    cp.layouts["fc"] = lay
    b = (lay.cur_w & -lay.cur_w).bit_length() - 1
    for i in range(b):
        note_rot(lay.stride << i, lvl)
    for j in range(1, lay.cur_w >> b):
        note_rot((lay.stride << b) * j, lvl)
    if lay.map_h > 1:
        rb = (lay.cur_h & -lay.cur_h).bit_length() - 1
        for i in range(rb):
            note_rot((lay.stride * lay.map_w) << i, lvl)
        for j in range(1, lay.cur_h >> rb):
            note_rot(((lay.stride * lay.map_w) << rb) * j, lvl)
    cp.encode_at["W"] = (lvl, delta)
    if lvl < 1:
        raise ValueError("level budget exhausted before the FC layer")
    for l in range(1, lay.channels_per_ct):
        note_rot(cp.dist * l, lvl)
    s = s * delta / params.chain_primes[lvl]
    lvl -= 1
    cp.steps.append(Step("fc", lvl, s))
    if lvl != 0:
        raise ValueError(f"ladder ends at level {lvl}, expected 0")
    return cp


# ---------- end-to-end evaluation ----------

def _assert_step(cts, cp: CompiledPipeline, name: str):
    st = cp.expected(name)
    for ct in (cts if isinstance(cts, list) else [cts]):
        if ct.level != st.level:
            raise ScheduleError(f"{name}: level {ct.level}, ladder says {st.level}")
        if ct.scale != st.scale:
            raise ScheduleError(
                f"{name}: scale {float(ct.scale):.6g}, "
                f"ladder says {float(st.scale):.6g}")


def run_pipeline(encoder, input_ct: Ct, backend: BackendBase,
                 debug_hook=None) -> Ct:
    """Evaluate the full network on one packed input ciphertext.

    `encoder` is a ModelEncoder binding model weights to a CompiledPipeline;
    every step's (level, scale) is checked against the ladder and any
    deviation raises ScheduleError.  Returns the logits ciphertext at
    level 0 (logit m sits at slot dist*m)."""
    cp = encoder.compiled
    _assert_step(input_ct, cp, "input")
    cts = [input_ct]
    for t in (1, 2, 3):
        plan = cp.plans[t - 1]
        if cp.mode == "fast" and t > 1:
            spec = cp.merges[t]
            with backend.layer(f"pre{t}"):
                cts = pre_process(cts, spec, encoder.mask_pt(t), backend)
            _assert_step(cts, cp, f"merge{t}")
            with backend.layer(f"conv{t}"):
                cts = hconv(cts, encoder.conv_weights(t), plan, backend)
            _assert_step(cts, cp, f"conv{t}")
            with backend.layer(f"post{t}"):
                cts = post_process(cts, spec, backend)
        else:
            with backend.layer(f"conv{t}"):
                cts = hconv(cts, encoder.conv_weights(t), plan, backend)
            _assert_step(cts, cp, f"conv{t}")
        with backend.layer(f"act{t}"):
            cts = poly_activate(cts, encoder.coeff_pts(t), backend)
        _assert_step(cts, cp, f"act{t}")
        if debug_hook is not None:
            cts = debug_hook(f"act{t}", cts, cp.layouts[f"conv{t}"]) or cts
        if t < 3:
            with backend.layer(f"pool{t}"):
                cts, _ = avg_pool(cts, cp.layouts[f"conv{t}"], backend)
            _assert_step(cts, cp, f"pool{t}")
    with backend.layer("global"):
        cts = global_sum(cts, cp.layouts["fc"], backend)
    lay = cp.layouts["fc"]
    with backend.layer("fc"):
        out = fc_diagonal(cts, encoder.fc_pts, lay.channels_per_ct, cp.dist, backend)
        if encoder.has_fc_bias:
            out = backend.add_plain(out, encoder.fc_bias_pt())
    _assert_step(out, cp, "fc")
    return out


def encrypt_input(x: np.ndarray, cp: CompiledPipeline, backend: BackendBase) -> Ct:
    from .layout import pack_input
    vec, lay = pack_input(np.asarray(x), backend.n2)
    if lay.block != cp.layouts["input"].block:
        raise ValueError("input tensor does not match the compiled network")
    return backend.enc(vec, level=cp.params.max_level)


def dec_logits(out_ct: Ct, cp: CompiledPipeline, backend: BackendBase) -> np.ndarray:
    """Decrypt and read the logits from the stride-`dist` lattice."""
    vals = backend.dec(out_ct)
    d = cp.dist
    return vals[[d * m for m in range(cp.shape.classes)]]


def infer(params: CollapsedParams, x: np.ndarray, mode: str, strategy: str,
          backend: BackendBase, encoder=None, debug_hook=None):
    """Convenience end-to-end run; returns (logits, counters, encoder)."""
    from .modelenc import ModelEncoder
    if encoder is None:
        cp = compile_pipeline(params.shape, mode, strategy, backend.params)
        encoder = ModelEncoder(cp, params, backend)
    ct = encrypt_input(x, encoder.compiled, backend)
    out = run_pipeline(encoder, ct, backend, debug_hook=debug_hook)
    return dec_logits(out, encoder.compiled, backend), backend.counters, encoder
