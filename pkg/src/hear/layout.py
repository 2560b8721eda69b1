"""Slot-packing layouts for encrypted feature maps.

A ciphertext holds N_2 = N/2 slots. Each feature-map channel occupies one
power-of-two `block` of slots (the row-major flattened map, zero-padded on
the right), and `n2 // block` channels stack into a single ciphertext.
After each stride-2 pooling the surviving values keep their original grid
coordinates, so validity is a stride lattice over the original map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


def pot(x: int) -> int:
    """Smallest power of two >= x."""
    if x < 1:
        raise ValueError(f"pot() needs a positive count, got {x}")
    return 1 << (x - 1).bit_length()


def vtm(vec, shape: tuple[int, int]) -> np.ndarray:
    """Row-major vector -> matrix."""
    vec = np.asarray(vec)
    d1, d2 = shape
    if vec.size != d1 * d2:
        raise ValueError(f"cannot reshape {vec.size} values to {d1}x{d2}")
    return vec.reshape(d1, d2)


def mtv(mat) -> np.ndarray:
    """Row-major matrix -> vector (inverse of vtm)."""
    return np.asarray(mat).reshape(-1)


def load_factor(t: int, n_i: int, dim: int) -> int:
    """Merge load factor n_P for conv block t with n_i input ciphertexts.

    Block 1 never merges. 1D caps at 2 (t=2) / 4 (t=3); 2D at 4 / 16.
    """
    if t == 1:
        return 1
    if t not in (2, 3):
        raise ValueError(f"load_factor defined for blocks 1..3, got {t}")
    if dim == 1:
        cap = 2 if t == 2 else 4
    else:
        cap = 4 if t == 2 else 16
    return min(n_i, cap)


@dataclass(frozen=True)
class PackedLayout:
    """Geometry of one pipeline stage.

    map_h/map_w are the original (conv1-time) grid extents in slots; a 1D
    network is carried as a 1 x (T*J) grid.  cur_h/cur_w are the logical
    extents of the current feature map, whose entry (r, c) lives at slot
    (r*stride, c*stride) of its channel block.
    """

    n2: int
    block: int
    map_h: int
    map_w: int
    cur_h: int
    cur_w: int
    stride: int
    channels: int          # logical channels at this stage
    replicas: int = 1      # input-stage copies of the channel set per ct

    @property
    def channels_per_ct(self) -> int:
        return self.n2 // self.block

    @property
    def n_ct(self) -> int:
        per = self.channels_per_ct
        if self.replicas > 1:
            return 1
        return -(-self.channels // per)

    def __post_init__(self):
        if self.block * self.channels_per_ct != self.n2:
            raise ValueError("block must divide the slot count")
        if self.replicas > 1 and self.replicas * self.channels > self.channels_per_ct:
            raise ValueError("replicated channels exceed ciphertext capacity")

    def after_pool(self) -> "PackedLayout":
        """Layout after one window-2 (per active axis), stride-2 pooling."""
        new_h = self.cur_h // 2 if self.map_h > 1 else self.cur_h
        new_w = self.cur_w // 2
        if new_w < 1 or new_h < 1:
            raise ValueError("map too small to pool")
        return replace(self, cur_h=new_h, cur_w=new_w, stride=self.stride * 2)

    def with_channels(self, channels: int) -> "PackedLayout":
        return replace(self, channels=channels, replicas=1)

    # -- slot geometry tables (cached per layout) -------------------------

    def slot_coords(self):
        """Per-slot (block, row, col) arrays; row/col are -1 in the pad tail."""
        s = np.arange(self.n2)
        q = s % self.block
        row = q // self.map_w
        col = q % self.map_w
        pad = q >= self.map_h * self.map_w
        row = np.where(pad, -1, row)
        col = np.where(pad, -1, col)
        return s // self.block, row, col

    def valid_slot_mask(self, channels_in_ct: int | None = None) -> np.ndarray:
        """0/1 mask of the valid-lattice slots of every occupied channel block."""
        blk, row, col = self.slot_coords()
        per = self.channels_per_ct
        if channels_in_ct is None:
            channels_in_ct = per if self.replicas > 1 else min(self.channels, per)
        ok = (row >= 0)
        ok &= (row % self.stride == 0) & (col % self.stride == 0)
        ok &= (row // self.stride < self.cur_h) & (col // self.stride < self.cur_w)
        if self.replicas > 1:
            ok &= blk < self.replicas * self.channels
        else:
            ok &= blk < channels_in_ct
        return ok.astype(np.float64)


def valid_mask(layout: PackedLayout) -> np.ndarray:
    """Spec-facing alias: the 0/1 valid-slot mask of a layout."""
    return layout.valid_slot_mask()


def input_layout(map_h: int, map_w: int, n2: int) -> PackedLayout:
    """Fresh-input layout for a 2-channel map packed per the encryption rule."""
    n = map_h * map_w
    block = pot(n)
    if 2 * block > n2:
        raise ValueError(f"input tensor needs {2 * block} slots, only {n2} available")
    replicas = n2 // (2 * block)
    return PackedLayout(
        n2=n2, block=block, map_h=map_h, map_w=map_w,
        cur_h=map_h, cur_w=map_w, stride=1, channels=2, replicas=replicas,
    )


def pack_input(x: np.ndarray, n2: int) -> tuple[np.ndarray, PackedLayout]:
    """Pack a T x J x 2 tensor into one slot vector.

    Each channel is flattened row-major, zero-padded to a power of two,
    the two channels concatenated, and the pair replicated to fill every
    slot (full replication keeps rotations consistent at the seams).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 2:
        raise ValueError(f"expected a T x J x 2 tensor, got shape {x.shape}")
    t, j, _ = x.shape
    layout = input_layout(t, j, n2)
    block = layout.block
    m = np.zeros(2 * block)
    m[:t * j] = mtv(x[:, :, 0])
    m[block:block + t * j] = mtv(x[:, :, 1])
    return np.tile(m, layout.replicas), layout


def pack_channels(maps: np.ndarray, layout: PackedLayout) -> list[np.ndarray]:
    """Pack per-channel maps (C x h x w at the layout's current extents)
    into slot vectors on the layout's valid lattice. Test/oracle helper."""
    c = maps.shape[0]
    per = layout.channels_per_ct
    blk, row, col = layout.slot_coords()
    mask = layout.valid_slot_mask(channels_in_ct=per).astype(bool)
    r = np.where(mask, row // layout.stride, 0)
    q = np.where(mask, col // layout.stride, 0)
    outs = []
    for i in range(-(-c // per)):
        v = np.zeros(layout.n2)
        for b in range(per):
            ch = i * per + b
            if ch >= c:
                break
            sel = mask & (blk == b)
            v[sel] = maps[ch][r[sel], q[sel]]
        outs.append(v)
    return outs


def unpack_channels(vecs, layout: PackedLayout, c: int) -> np.ndarray:
    """Inverse of pack_channels: read valid slots back into C x h x w maps."""
    per = layout.channels_per_ct
    blk, row, col = layout.slot_coords()
    mask = layout.valid_slot_mask(channels_in_ct=per).astype(bool)
    out = np.zeros((c, layout.cur_h, layout.cur_w))
    for i, v in enumerate(vecs):
        for b in range(per):
            ch = i * per + b
            if ch >= c:
                break
            sel = mask & (blk == b)
            out[ch][row[sel] // layout.stride, col[sel] // layout.stride] = v[sel]
    return out
