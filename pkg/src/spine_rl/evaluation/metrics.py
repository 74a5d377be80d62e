"""Trajectory metrics: safe rate, gold-standard references, deviation."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ..phantom import GoldStandard
from ..voxelgrid import DrillCylinder, DrillPose, Label, LabelVolume, frame_from_forward, rasterize_cylinder


def length_per_volume(diameter: float) -> float:
    """Factor turning a drilled volume (mm^3) into an equivalent length (mm)."""
    return 4.0 / (math.pi * diameter**2)


def safe_rate(cost_streams: Iterable[Sequence[int]]) -> float:
    """Percentage of trajectories whose cost stream is all zero."""
    streams = [list(c) for c in cost_streams]
    if not streams:
        raise ValueError("safe_rate needs at least one trajectory")
    safe = sum(1 for c in streams if not any(c))
    return 100.0 * safe / len(streams)


def gs_reference_metrics(gs: GoldStandard, vol: LabelVolume, horizon: float = 400.0) -> tuple[float, float]:
    """Ideal penetration and damage lengths of the extended gold standard.

    The screw axis runs from the exit point backward along ``-direction``
    until the first Air sample, i.e. until it leaves the body.
    """
    h = vol.spacing / 2.0
    s = np.arange(0.0, horizon + h, h)
    labels = vol.label_at(gs.exit - s[:, None] * gs.direction)
    air = np.flatnonzero(labels == Label.AIR)
    if air.size == 0:
        raise ValueError("gold-standard axis does not leave the body within the horizon")
    length = float(s[air[0]])
    pose = DrillPose(gs.exit, frame_from_forward(gs.direction))
    voxels = rasterize_cylinder(DrillCylinder(pose, gs.diameter, length), vol)
    lab = vol.labels.ravel()[voxels]
    k = length_per_volume(gs.diameter) * vol.voxel_volume
    penetration = k * int(np.count_nonzero(lab == Label.CANCELLOUS))
    damage = k * int(np.count_nonzero(lab == Label.PRESERVE))
    return penetration, damage


def deviation_from_gs(final_axis, entry_tip, gs: GoldStandard) -> tuple[float, float] | None:
    """Angle (rad) between drill and GS axes and cancellous entry distance (mm).

    Returns ``None`` when the trajectory never entered cancellous bone
    (``entry_tip is None``).
    """
    if entry_tip is None:
        return None
    axis = np.asarray(final_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    cos = min(1.0, abs(float(axis @ gs.direction)))
    return math.acos(cos), float(np.linalg.norm(np.asarray(entry_tip, dtype=float) - gs.entry))
