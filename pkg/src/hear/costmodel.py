"""Closed-form operation counts per conv layer and whole-network totals,
with a comparator against measured counters.

Conv rows follow the published cost table with f = total tap count and
n_P = 1 outside the fast path:

            Rot                                  Hoisted          MultPlain              Rescale
  full      (nP-1)m + nO*log2 nP                 m*H(f*lI)        nI + f*lI*m*nO         nO + m
  giant     (nP-1)m + nO*log2 nP + (f-1)nO       m*H(lI)            (nI and m terms        (m only
  baby      (nP-1)m + nO*log2 nP + (lI-1)nO      m*H(f)              drop when nP=1)        when nP>1)

where m = nI/nP and H(k) costs k-1 rotations.  Non-conv layers are not in
the published table; the activation / pooling / global-sum / FC rows here
are derived from the evaluation procedure and labeled "extended".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, log2

from .backend import COUNTER_KEYS, OpCounters
from .fastpath import CompiledPipeline

_KEYS = ("rot", "hoisted_rot_groups", "hoisted_rot_total", "mult",
         "mult_plain", "rescale")


def _zero() -> dict[str, int]:
    return {k: 0 for k in _KEYS}


def predict_conv(plan, merged: bool) -> dict[str, int]:
    """Operation counts of one conv layer (pre + core + post when merged)."""
    c = _zero()
    f, li, m, no, np_ = plan.f, plan.ell_i, plan.m, plan.n_o, plan.n_p
    if merged and np_ > 1:
        c["rot"] += (np_ - 1) * m
        c["mult_plain"] += plan.n_i
        c["rescale"] += m
        c["rot"] += no * ceil(log2(np_))
    c["mult_plain"] += f * li * m * no
    c["rescale"] += no
    if plan.strategy == "full":
        group = f * li - 1
    elif plan.strategy == "giant":
        group = li - 1
        c["rot"] += (f - 1) * no
    else:
        group = f - 1
        c["rot"] += (li - 1) * no
    if group > 0:
        c["hoisted_rot_groups"] += m
        c["hoisted_rot_total"] += m * group
    return c


def _rotate_sum_counts(count: int) -> tuple[int, int, int]:
    """(ordinary rots, hoisted groups, hoisted rots) of one rotate_sum call."""
    b = (count & -count).bit_length() - 1
    odd = count >> b
    return b, (1 if odd > 1 else 0), (odd - 1 if odd > 1 else 0)


def predict_network(cp: CompiledPipeline) -> dict[str, dict[str, int]]:
    """Per-label predicted counts for a full run (labels match run_pipeline)."""
    out: dict[str, dict[str, int]] = {}
    for t in (1, 2, 3):
        plan = cp.plans[t - 1]
        merged = cp.mode == "fast" and t > 1
        row = predict_conv(plan, merged)
        conv, pre, post = _zero(), _zero(), _zero()
        if merged:
            spec = cp.merges[t]
            pre["rot"] = (spec.n_p - 1) * plan.m
            pre["mult_plain"] = plan.n_i
            pre["rescale"] = plan.m
            post["rot"] = plan.n_o * len(spec.nu)
            out[f"pre{t}"], out[f"post{t}"] = pre, post
        for k in _KEYS:
            conv[k] = row[k] - pre[k] - post[k]
        out[f"conv{t}"] = conv
        act = _zero()
        act["mult"] = plan.n_o
        act["rescale"] = 2 * plan.n_o
        act["mult_plain"] = 2 * plan.n_o
        out[f"act{t}"] = act
        if t < 3:
            pool = _zero()
            pool["rot"] = plan.n_o * (2 if cp.shape.dim == 2 else 1)
            out[f"pool{t}"] = pool
    lay = cp.layouts["fc"]
    n_ct = lay.n_ct
    g = _zero()
    r, hg, ht = _rotate_sum_counts(lay.cur_w)
    if lay.map_h > 1:
        r2, hg2, ht2 = _rotate_sum_counts(lay.cur_h)
        r, hg, ht = r + r2, hg + hg2, ht + ht2
    g["rot"], g["hoisted_rot_groups"], g["hoisted_rot_total"] = n_ct * r, n_ct * hg, n_ct * ht
    out["global"] = g
    fc = _zero()
    fc["mult_plain"] = n_ct * lay.channels_per_ct
    fc["rot"] = lay.channels_per_ct - 1
    fc["rescale"] = 1
    out["fc"] = fc
    return out


def predict_totals(cp: CompiledPipeline) -> dict[str, int]:
    tot = _zero()
    for row in predict_network(cp).values():
        for k in _KEYS:
            tot[k] += row[k]
    tot["all_rotations"] = tot["rot"] + tot["hoisted_rot_total"]
    return tot


@dataclass
class CostReport:
    """Predicted vs measured counts, one row per layer label."""

    rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)

    def table(self) -> str:
        head = f"{'layer':<8}" + "".join(f"{k:>14}" for k in _KEYS) + "   ok"
        lines = [head]
        for r in self.rows:
            cells = "".join(
                f"{r['predicted'][k]:>7}/{r['measured'][k]:<6}" for k in _KEYS)
            lines.append(f"{r['layer']:<8}{cells}   {'yes' if r['ok'] else 'NO'}")
        return "\n".join(lines)


def conv_layer_measured(counters: OpCounters, t: int) -> dict[str, int]:
    """Measured conv-layer row: pre + core + post labels combined."""
    total = _zero()
    for label in (f"pre{t}", f"conv{t}", f"post{t}"):
        row = counters.layer(label)
        for k in _KEYS:
            total[k] += row[k]
    return total


def compare(cp: CompiledPipeline, counters: OpCounters) -> CostReport:
    """Exact comparison of predicted vs measured per layer label (and the
    combined conv rows the published table speaks about)."""
    predicted = predict_network(cp)
    report = CostReport()
    for t in (1, 2, 3):
        merged = cp.mode == "fast" and t > 1
        pred = predict_conv(cp.plans[t - 1], merged)
        meas = conv_layer_measured(counters, t)
        report.rows.append({
            "layer": f"conv{t}", "predicted": pred, "measured": meas,
            "ok": all(pred[k] == meas[k] for k in _KEYS),
        })
    for label in ("act1", "act2", "act3", "pool1", "pool2", "global", "fc"):
        if label not in predicted:
            continue
        meas_all = counters.layer(label)
        meas = {k: meas_all[k] for k in _KEYS}
        report.rows.append({
            "layer": label, "predicted": predicted[label], "measured": meas,
            "ok": all(predicted[label][k] == meas[k] for k in _KEYS),
        })
    return report


def measured_totals(counters: OpCounters) -> dict[str, int]:
    tot = counters.total()
    out = {k: tot[k] for k in COUNTER_KEYS}
    out["all_rotations"] = counters.all_rotations
    return out
