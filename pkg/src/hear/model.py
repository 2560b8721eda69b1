"""Network shapes, trained parameters, layer collapsing and the cleartext oracle.

The network family: three conv blocks (kernel 3 or 3x3, stride 1, same
padding), each followed by batch norm, a degree-2 polynomial activation and
window-2 average pooling (blocks 1 and 2 only), then global average pooling
and a fully-connected readout.  Bias, BN, activation and the pooling divisor
collapse into one degree-2 polynomial per channel, so the encrypted path only
ever evaluates conv -> poly -> rotate-and-sum.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .layout import pot


@dataclass(frozen=True)
class NetworkShape:
    dim: int                      # 1 or 2
    frames: int                   # T
    joints: int                   # J
    widths: tuple[int, int, int]  # channels out of conv1..conv3
    classes: int
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if len(self.widths) != 3:
            raise ValueError("exactly 3 conv blocks")
        w1, w2, w3 = self.widths
        if w2 != 2 * w1 or w3 != 2 * w2:
            raise ValueError(f"widths must double per block, got {self.widths}")
        if self.kernel != 3 or self.pool != 2:
            raise ValueError("the shape family is fixed to kernel 3, pool 2")

    @property
    def map0(self) -> tuple[int, int]:
        """Slot-grid extents of the input map (1D nets flatten to one row)."""
        if self.dim == 1:
            return 1, self.frames * self.joints
        return self.frames, self.joints

    def map_at(self, t: int) -> tuple[int, int]:
        """Conv-t output map extents (floor division under each pooling)."""
        h, w = self.map0
        for _ in range(t - 1):
            h, w = (h // 2 if h > 1 else h), w // 2
        return h, w

    @property
    def taps(self) -> list[tuple[int, int]]:
        """Kernel offsets (dy, dx) in map coordinates."""
        if self.dim == 1:
            return [(0, d) for d in (-1, 0, 1)]
        return [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]

    @property
    def fc_inputs(self) -> int:
        return self.widths[2]

    @property
    def global_pool_count(self) -> int:
        h, w = self.map_at(3)
        return h * w

    def channels_in(self, t: int) -> int:
        return 2 if t == 1 else self.widths[t - 2]

    def channels_out(self, t: int) -> int:
        return self.widths[t - 1]


STANDARD_NETS = {
    "1d-w64": NetworkShape(1, 32, 15, (64, 128, 256), 10),
    "1d-w128": NetworkShape(1, 32, 15, (128, 256, 512), 10),
    "2d-w64": NetworkShape(2, 32, 15, (64, 128, 256), 10),
    "2d-w128": NetworkShape(2, 32, 15, (128, 256, 512), 10),
}


def net_by_name(name: str) -> NetworkShape:
    key = name.lower()
    if key not in STANDARD_NETS:
        raise KeyError(f"unknown network '{name}' (have {sorted(STANDARD_NETS)})")
    return STANDARD_NETS[key]


@dataclass
class RawLayerParams:
    """Trained parameters before collapsing."""

    shape: NetworkShape
    filters: list[np.ndarray]        # per block: (c_out, c_in, kh, kw)
    conv_bias: list[np.ndarray]      # per block: (c_out,)
    bn_mean: list[np.ndarray]
    bn_std: list[np.ndarray]         # sigma > 0
    bn_gamma: list[np.ndarray]
    bn_beta: list[np.ndarray]
    act: list[tuple[float, float, float]]   # (a0, a1, a2) per block
    fc_w: np.ndarray                 # (classes, widths[2])
    fc_b: np.ndarray | None = None   # optional, defaults to zero

    def validate(self):
        s = self.shape
        kh = 1 if s.dim == 1 else 3
        for t in range(3):
            co, ci = s.channels_out(t + 1), s.channels_in(t + 1)
            if self.filters[t].shape != (co, ci, kh, 3):
                raise ValueError(f"conv{t+1} filters must be {(co, ci, kh, 3)}, "
                                 f"got {self.filters[t].shape}")
            for arr in (self.conv_bias[t], self.bn_mean[t], self.bn_std[t],
                        self.bn_gamma[t], self.bn_beta[t]):
                if arr.shape != (co,):
                    raise ValueError(f"per-channel stats of conv{t+1} must be ({co},)")
            if np.any(self.bn_std[t] <= 0):
                raise ValueError(f"conv{t+1} has non-positive BN std")
            if not np.all(np.isfinite(self.act[t])):
                raise ValueError("activation coefficients must be finite")
        if self.fc_w.shape != (s.classes, s.fc_inputs):
            raise ValueError(f"fc matrix must be {(s.classes, s.fc_inputs)}")


@dataclass
class CollapsedParams:
    """Inference-ready parameters: filters, per-channel degree-2 coefficients
    (pooling divisor folded in), FC matrix with the global-average divisor
    folded in."""

    shape: NetworkShape
    filters: list[np.ndarray]
    coeffs: list[np.ndarray]         # per block: (3, c_out) rows c0, c1, c2
    fc_w: np.ndarray
    fc_b: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def validate(self):
        s = self.shape
        for t in range(3):
            if self.coeffs[t].shape != (3, s.channels_out(t + 1)):
                raise ValueError(f"conv{t+1} coefficients must be (3, c_out)")
        if self.fc_b.size == 0:
            self.fc_b = np.zeros(s.classes)


def collapse_layers(raw: RawLayerParams, shape: NetworkShape) -> CollapsedParams:
    """Fold bias + BN + activation + pooling divisor into (c0, c1, c2).

    With d1 = gamma/sigma and d0 = beta + d1*(b - mu), the composed map
    x -> act(d0 + d1*x) is a degree-2 polynomial whose coefficients are
    divided by the pooling window area (1 for the last block; the global
    average divisor moves into the FC matrix instead).
    """
    if raw.shape != shape:
        raise ValueError("parameter record does not match the given shape")
    raw.validate()
    pool_area = 2 if shape.dim == 1 else 4
    coeffs = []
    for t in range(3):
        a0, a1, a2 = raw.act[t]
        d1 = raw.bn_gamma[t] / raw.bn_std[t]
        d0 = raw.bn_beta[t] + d1 * (raw.conv_bias[t] - raw.bn_mean[t])
        e0 = a0 + a1 * d0 + a2 * d0 * d0
        e1 = a1 * d1 + 2.0 * a2 * d0 * d1
        e2 = a2 * d1 * d1
        area = pool_area if t < 2 else 1
        coeffs.append(np.stack([e0, e1, e2]) / area)
    fc_b = raw.fc_b if raw.fc_b is not None else np.zeros(shape.classes)
    out = CollapsedParams(
        shape=shape,
        filters=[f.copy() for f in raw.filters],
        coeffs=coeffs,
        fc_w=raw.fc_w / shape.global_pool_count,
        fc_b=np.asarray(fc_b, dtype=np.float64).copy(),
    )
    out.validate()
    return out


# ---------- cleartext reference path ----------

def conv_same(x: np.ndarray, filt: np.ndarray, taps) -> np.ndarray:
    """Same-padding cross-correlation: out[o] = sum_c sum_k F[o,c,k] * x[c,.+k]."""
    c_in, h, w = x.shape
    ph = 1 if h > 1 else 0
    xp = np.pad(x, ((0, 0), (ph, ph), (1, 1)))
    out = np.zeros((filt.shape[0], h, w))
    for k, (dy, dx) in enumerate(taps):
        ky, kx = dy + 1, dx + 1
        if h == 1:
            patch = xp[:, :, kx:kx + w]
        else:
            patch = xp[:, ky:ky + h, kx:kx + w]
        out += np.einsum("oc,chw->ohw", filt[:, :, 0 if h == 1 else ky, kx], patch)
    return out


def pool_sum(x: np.ndarray, dim: int) -> np.ndarray:
    """Window-2, stride-2 sum pooling with floor extents (no divisor)."""
    c, h, w = x.shape
    w2 = w // 2
    out = x[:, :, : 2 * w2].reshape(c, h, w2, 2).sum(axis=3)
    if dim == 2:
        h2 = h // 2
        out = out[:, : 2 * h2, :].reshape(c, h2, 2, w2).sum(axis=2)
    return out


def tensor_to_maps(x: np.ndarray, shape: NetworkShape) -> np.ndarray:
    """T x J x 2 input tensor -> channel-major maps on the slot grid."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.frames, shape.joints, 2):
        raise ValueError(f"input must be {(shape.frames, shape.joints, 2)}, got {x.shape}")
    h, w = shape.map0
    return np.stack([x[:, :, 0].reshape(h, w), x[:, :, 1].reshape(h, w)])


def infer_clear(params: CollapsedParams, x: np.ndarray) -> np.ndarray:
    """Pre-softmax logits of the collapsed network (softmax is rank-preserving
    so argmax of these decides the class)."""
    shape = params.shape
    params.validate()
    z = tensor_to_maps(x, shape)
    for t in range(3):
        z = conv_same(z, params.filters[t], shape.taps)
        c0, c1, c2 = params.coeffs[t][:, :, None, None]
        z = c0 + c1 * z + c2 * z * z
        if t < 2:
            z = pool_sum(z, shape.dim)
    v = z.sum(axis=(1, 2))
    return params.fc_w @ v + params.fc_b


def forward_uncollapsed(raw: RawLayerParams, x: np.ndarray) -> np.ndarray:
    """Straightforward conv+bias / BN / activation / average-pool forward pass.
    Oracle for collapse_layers equivalence."""
    shape = raw.shape
    z = tensor_to_maps(x, shape)
    for t in range(3):
        z = conv_same(z, raw.filters[t], shape.taps)
        z = z + raw.conv_bias[t][:, None, None]
        z = (raw.bn_gamma[t][:, None, None] * (z - raw.bn_mean[t][:, None, None])
             / raw.bn_std[t][:, None, None]) + raw.bn_beta[t][:, None, None]
        a0, a1, a2 = raw.act[t]
        z = a0 + a1 * z + a2 * z * z
        if t < 2:
            area = 2 if shape.dim == 1 else 4
            z = pool_sum(z, shape.dim) / area
    v = z.mean(axis=(1, 2))
    fc_b = raw.fc_b if raw.fc_b is not None else 0.0
    return raw.fc_w @ v + fc_b


# ---------- serialization ----------

_MAGIC = b"HEARMDL1"


def save_model(raw: RawLayerParams, path: str):
    arrays: dict[str, np.ndarray] = {}
    for t in range(3):
        arrays[f"filters{t}"] = raw.filters[t]
        arrays[f"conv_bias{t}"] = raw.conv_bias[t]
        arrays[f"bn_mean{t}"] = raw.bn_mean[t]
        arrays[f"bn_std{t}"] = raw.bn_std[t]
        arrays[f"bn_gamma{t}"] = raw.bn_gamma[t]
        arrays[f"bn_beta{t}"] = raw.bn_beta[t]
    arrays["fc_w"] = raw.fc_w
    arrays["fc_b"] = raw.fc_b if raw.fc_b is not None else np.zeros(raw.shape.classes)
    manifest = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        arrays[name] = arr
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "shape": {"dim": raw.shape.dim, "frames": raw.shape.frames,
                  "joints": raw.shape.joints, "widths": list(raw.shape.widths),
                  "classes": raw.shape.classes},
        "act": [list(a) for a in raw.act],
        "arrays": manifest,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for arr in arrays.values():
            f.write(arr.tobytes())


def load_model(path: str) -> RawLayerParams:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError("not a model container")
        n = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(n))
        payload = f.read()
    sh = header["shape"]
    shape = NetworkShape(sh["dim"], sh["frames"], sh["joints"],
                         tuple(sh["widths"]), sh["classes"])
    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    raw = RawLayerParams(
        shape=shape,
        filters=[arrays[f"filters{t}"] for t in range(3)],
        conv_bias=[arrays[f"conv_bias{t}"] for t in range(3)],
        bn_mean=[arrays[f"bn_mean{t}"] for t in range(3)],
        bn_std=[arrays[f"bn_std{t}"] for t in range(3)],
        bn_gamma=[arrays[f"bn_gamma{t}"] for t in range(3)],
        bn_beta=[arrays[f"bn_beta{t}"] for t in range(3)],
        act=[tuple(a) for a in header["act"]],
        fc_w=arrays["fc_w"],
        fc_b=arrays["fc_b"],
    )
    raw.validate()
    return raw


def model_digest(raw: RawLayerParams) -> str:
    h = hashlib.sha256()
    for t in range(3):
        for arr in (raw.filters[t], raw.conv_bias[t], raw.bn_mean[t],
                    raw.bn_std[t], raw.bn_gamma[t], raw.bn_beta[t]):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(np.asarray(raw.act[t], dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(raw.fc_w, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------- random instances for tests and demos ----------

def make_random_model(shape: NetworkShape, seed: int) -> RawLayerParams:
    """Random trained-looking parameters with activations kept near unit range
    so deep products neither vanish nor blow past fixed-point headroom."""
    rng = np.random.default_rng(seed)
    kh = 1 if shape.dim == 1 else 3
    filters, bias, mean, std, gamma, beta, act = [], [], [], [], [], [], []
    for t in range(3):
        co, ci = shape.channels_out(t + 1), shape.channels_in(t + 1)
        fan_in = ci * kh * 3
        filters.append(rng.normal(0, 1.0 / np.sqrt(fan_in), size=(co, ci, kh, 3)))
        bias.append(rng.normal(0, 0.1, size=co))
        mean.append(rng.normal(0, 0.1, size=co))
        std.append(rng.uniform(0.8, 1.6, size=co))
        gamma.append(rng.uniform(0.7, 1.3, size=co) * rng.choice([-1.0, 1.0], size=co))
        beta.append(rng.normal(0, 0.1, size=co))
        act.append((rng.normal(0, 0.05), rng.uniform(0.6, 1.0), rng.normal(0, 0.12)))
    fc_w = rng.normal(0, 1.0 / np.sqrt(shape.fc_inputs), size=(shape.classes, shape.fc_inputs))
    raw = RawLayerParams(shape, filters, bias, mean, std, gamma, beta, act,
                         fc_w, np.zeros(shape.classes))
    _normalize_logit_range(raw, rng)
    return raw


def _normalize_logit_range(raw: RawLayerParams, rng, target: float = 1.5):
    """Rescale the FC matrix so probe logits stay within fixed-point headroom
    (|logit| must stay below q0/scale at level 0)."""
    probes = rng.uniform(0, 1, size=(3, raw.shape.frames, raw.shape.joints, 2))
    worst = max(np.abs(forward_uncollapsed(raw, p)).max() for p in probes)
    if worst > target or worst < 1e-3:
        raw.fc_w *= target / max(worst, 1e-9)


def quantize_dyadic(x: np.ndarray, bits: int) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) * (1 << bits)) / (1 << bits)


def make_dyadic_collapsed(shape: NetworkShape, seed: int, bits: int = 5) -> CollapsedParams:
    """Collapsed parameters on a coarse dyadic grid with a linear activation
    (c2 = 0).  Every sum in any evaluation order is then exact in float64,
    which is what makes cross-schedule bit-identity checks meaningful."""
    rng = np.random.default_rng(seed)
    kh = 1 if shape.dim == 1 else 3
    filters, coeffs = [], []
    for t in range(3):
        co, ci = shape.channels_out(t + 1), shape.channels_in(t + 1)
        f = rng.normal(0, 1.0 / np.sqrt(ci * kh * 3), size=(co, ci, kh, 3))
        filters.append(quantize_dyadic(f, bits))
        c0 = quantize_dyadic(rng.normal(0, 0.05, size=co), bits)
        c1 = quantize_dyadic(rng.uniform(0.4, 0.9, size=co), bits)
        coeffs.append(np.stack([c0, c1, np.zeros(co)]))
    fc_w = quantize_dyadic(
        rng.normal(0, 1.0 / np.sqrt(shape.fc_inputs), size=(shape.classes, shape.fc_inputs)),
        bits,
    )
    out = CollapsedParams(shape, filters, coeffs, fc_w, np.zeros(shape.classes))
    out.validate()
    return out


def make_random_input(shape: NetworkShape, seed: int, dyadic_bits: int | None = None):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(shape.frames, shape.joints, 2))
    if dyadic_bits is not None:
        x = quantize_dyadic(x, dyadic_bits)
    return x
