"""Raw per-frame joint coordinates -> normalized T x J x 2 input tensor.

Frames carry J (x, y) joint positions with 0 marking undetected joints.
Selection drops near-duplicate frames (mean joint displacement below the
threshold) until the target count remains, normalization min-max scales each
frame's axes independently, and assembly lays frames out as rows with joints
as columns, one channel per coordinate axis.
"""

from __future__ import annotations

import json

import numpy as np


def load_frames(path: str) -> list[np.ndarray]:
    with open(path) as f:
        data = json.load(f)
    frames = [np.asarray(fr, dtype=np.float64) for fr in data]
    if not frames:
        raise ValueError("no frames")
    j = frames[0].shape
    if len(j) != 2 or j[1] != 2:
        raise ValueError("each frame must be a list of [x, y] pairs")
    for fr in frames:
        if fr.shape != j:
            raise ValueError("joint count varies across frames")
        if not np.all(np.isfinite(fr)):
            raise ValueError("non-finite coordinate")
    return frames


def frame_scores(frames: list[np.ndarray]) -> np.ndarray:
    """Mean Euclidean joint distance of each frame to its predecessor
    (frame 0 has no predecessor and never scores)."""
    return np.array([
        float(np.linalg.norm(frames[i] - frames[i - 1], axis=1).mean())
        for i in range(1, len(frames))
    ])


def select_frames(frames: list[np.ndarray], target: int,
                  threshold: float = 5.0) -> list[np.ndarray]:
    """Iteratively drop frames until exactly `target` remain.

    Each pass rescores against the current predecessors, drops the earliest
    frame scoring below the threshold, and falls back to the lowest-scoring
    frame (earliest on ties) when none is below."""
    if len(frames) < target:
        raise ValueError(f"need at least {target} frames, got {len(frames)}")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    frames = list(frames)
    while len(frames) > target:
        scores = frame_scores(frames)
        below = np.flatnonzero(scores < threshold)
        if below.size:
            drop = int(below[0]) + 1
        else:
            drop = int(np.argmin(scores)) + 1
        del frames[drop]
    return frames


def normalize(frames: list[np.ndarray]) -> list[np.ndarray]:
    """Per frame, per axis min-max scaling to [0, 1]; a constant axis
    collapses to zeros (documented degenerate fallback)."""
    out = []
    for fr in frames:
        g = np.empty_like(fr)
        for ax in (0, 1):
            lo, hi = fr[:, ax].min(), fr[:, ax].max()
            g[:, ax] = 0.0 if hi == lo else (fr[:, ax] - lo) / (hi - lo)
        out.append(g)
    return out


def assemble(frames: list[np.ndarray]) -> np.ndarray:
    """Frames as rows, joints as columns, channel 0 = x, channel 1 = y."""
    return np.stack(frames)


def ingest(frames: list[np.ndarray], target: int, threshold: float = 5.0) -> np.ndarray:
    return assemble(normalize(select_frames(frames, target, threshold)))


def save_tensor(x: np.ndarray, path: str):
    with open(path, "w") as f:
        json.dump(x.tolist(), f)


def load_tensor(path: str) -> np.ndarray:
    with open(path) as f:
        return np.asarray(json.load(f), dtype=np.float64)
