"""Brute-force reference implementations used as test oracles.

These deliberately avoid the library's geometry shortcuts: every voxel of
the volume is visited and every sweep offset is evaluated on its own.
"""

import numpy as np

from spine_rl.voxelgrid import Label


def voxel_centers(vol):
    idx = np.indices(vol.dims).reshape(3, -1).T
    return vol.origin + vol.spacing * idx


def brute_cylinder(tip, forward, diameter, length, vol, centers=None):
    """Flat indices of every voxel center inside the cylinder, by exhaustive test."""
    centers = voxel_centers(vol) if centers is None else centers
    rel = centers - np.asarray(tip, float)
    s = rel @ forward
    perp = np.linalg.norm(rel - s[:, None] * forward, axis=1)
    return np.flatnonzero((s >= -length) & (s <= 0.0) & (perp <= diameter / 2.0))


def brute_intersection(voxels, vol, group):
    flat = vol.labels.ravel()
    total = 0.0
    for v in voxels:
        if flat[v] == group:
            total += vol.spacing ** 3
    return total


def _label_at(vol, pts):
    idx = np.rint((pts - vol.origin) / vol.spacing).astype(int)
    inside = np.all((idx >= 0) & (idx < np.array(vol.dims)), axis=-1)
    out = np.zeros(pts.shape[:-1], dtype=np.uint8)
    out[inside] = vol.labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
    return out


def brute_safe_distance(tip, forward, diameter, vol, horizon=150.0, step=0.1, length=120.0):
    """First unsafe forward offset on a fine ``step`` grid.

    NoGo contact is tested per offset against all voxels within the drill
    radius of the axis line; breakthrough by sampling the axis behind each
    offset tip every half voxel.
    """
    tip = np.asarray(tip, float)
    forward = np.asarray(forward, float)
    centers = voxel_centers(vol)
    rel = centers - tip
    s = rel @ forward
    perp = np.linalg.norm(rel - s[:, None] * forward, axis=1)
    near = perp <= diameter / 2.0
    nogo_s = s[near & (vol.labels.ravel() == Label.NOGO)]
    h = vol.spacing / 2.0
    back = h * np.arange(int(np.floor(length / h + 1e-9)) + 1)
    for t in np.arange(0.0, horizon + 1e-9, step):
        if np.any((nogo_s >= t - length) & (nogo_s <= t)):
            return float(t)
        pts = tip + (t - back)[:, None] * forward
        lab = _label_at(vol, pts)
        bone = (lab == Label.CORTICAL) | (lab == Label.CANCELLOUS)
        if not bone[0] and bone[1:].any():
            return float(t)
    return float(horizon)


def dorsal_surface_oracle(vol):
    pts = []
    nx, ny, nz = vol.dims
    for j in range(ny):
        for k in range(nz):
            col = vol.labels[:, j, k]
            hits = np.flatnonzero(col == Label.CORTICAL)
            if hits.size:
                pts.append(vol.origin + vol.spacing * np.array([hits.min(), j, k]))
    return np.array(pts)


def random_unit(rng, cone=None, axis=(1.0, 0.0, 0.0)):
    """Uniform random unit vector, optionally within ``cone`` radians of ``axis``."""
    while True:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if cone is None or np.arccos(np.clip(v @ np.asarray(axis), -1, 1)) <= cone:
            return v
