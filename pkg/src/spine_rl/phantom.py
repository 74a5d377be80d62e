"""Procedural lumbar vertebra phantoms with analytic gold-standard trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .voxelgrid import LABEL_NAMES, GeometryError, Label, LabelVolume

SCREW_TO_PEDICLE = 0.7

# pedicle inclination decreases and pedicle width grows from L1 to L5
LEVEL_PRESETS = {
    1: dict(pedicle_inclination=0.26, pedicle_width=8.0, body_half_axes=(14.0, 20.0, 11.0)),
    2: dict(pedicle_inclination=0.23, pedicle_width=8.5, body_half_axes=(14.5, 21.0, 11.5)),
    3: dict(pedicle_inclination=0.20, pedicle_width=9.0, body_half_axes=(15.0, 22.0, 12.0)),
    4: dict(pedicle_inclination=0.17, pedicle_width=9.5, body_half_axes=(15.5, 23.0, 12.5)),
    5: dict(pedicle_inclination=0.14, pedicle_width=10.0, body_half_axes=(16.0, 24.0, 13.0)),
}


@dataclass(frozen=True)
class PhantomParams:
    """Shape parameters of one vertebra phantom (mm, rad).

    ``seed`` perturbs every shape parameter by a uniform factor in
    [0.95, 1.05]; ``seed=None`` keeps the nominal values.
    """

    body_half_axes: tuple = (15.0, 22.0, 12.0)
    cortical_thickness: float = 1.5
    pedicle_width: float = 9.0
    pedicle_height: float = 14.0
    pedicle_length: float = 24.0
    pedicle_inclination: float = 0.20
    canal_radius: float = 8.0
    canal_clearance: float = 1.0
    lamina_thickness: float = 5.0
    spinous_length: float = 22.0
    muscle_thickness: float = 25.0
    skin_thickness: float = 4.0
    air_margin: float = 70.0
    spacing: float = 1.0
    seed: int | None = 0

    def validate(self):
        lengths = [*self.body_half_axes, self.cortical_thickness, self.pedicle_width, self.pedicle_height,
                   self.pedicle_length, self.canal_radius, self.lamina_thickness, self.spinous_length,
                   self.muscle_thickness, self.skin_thickness, self.air_margin, self.spacing]
        if len(self.body_half_axes) != 3:
            raise GeometryError("body_half_axes needs three values")
        if min(lengths) <= 0:
            raise GeometryError("all phantom lengths must be positive")
        if self.canal_clearance < 0:
            raise GeometryError("canal_clearance must be non-negative")
        if self.pedicle_width <= 2 * self.cortical_thickness:
            raise GeometryError("pedicle width must exceed twice the cortical thickness")
        if not 0 <= self.pedicle_inclination < math.pi / 3:
            raise GeometryError("pedicle inclination out of range")
        if self.canal_radius + self.cortical_thickness >= self.body_half_axes[1]:
            raise GeometryError("canal does not fit inside the vertebral body width")

    def perturbed(self) -> "PhantomParams":
        if self.seed is None:
            return self
        rng = np.random.default_rng(self.seed)
        keys = ["cortical_thickness", "pedicle_width", "pedicle_height", "pedicle_length",
                "pedicle_inclination", "canal_radius", "lamina_thickness", "spinous_length",
                "muscle_thickness", "skin_thickness"]
        factors = rng.uniform(0.95, 1.05, size=len(keys) + 3)
        changes = {k: getattr(self, k) * float(f) for k, f in zip(keys, factors)}
        changes["body_half_axes"] = tuple(float(a * f) for a, f in zip(self.body_half_axes, factors[-3:]))
        return replace(self, seed=None, **changes)


@dataclass(frozen=True)
class GoldStandard:
    side: str
    entry: np.ndarray
    exit: np.ndarray
    direction: np.ndarray
    pedicle_width: float
    diameter: float

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        d = np.asarray(self.direction, dtype=float).reshape(3)
        object.__setattr__(self, "entry", np.asarray(self.entry, dtype=float).reshape(3))
        object.__setattr__(self, "exit", np.asarray(self.exit, dtype=float).reshape(3))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.exit - self.entry))

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "entry_mm": self.entry.tolist(),
            "exit_mm": self.exit.tolist(),
            "direction": self.direction.tolist(),
            "pw_mm": float(self.pedicle_width),
            "d_mm": float(self.diameter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GoldStandard":
        expected = {"side", "entry_mm", "exit_mm", "direction", "pw_mm", "d_mm"}
        if set(d) != expected:
            raise ValueError(f"gold standard fields {sorted(d)} do not match {sorted(expected)}")
        gs = cls(d["side"], d["entry_mm"], d["exit_mm"], d["direction"], float(d["pw_mm"]), float(d["d_mm"]))
        # keep the stored direction bit-exact
        object.__setattr__(gs, "direction", np.asarray(d["direction"], dtype=float))
        return gs


def _side_sign(side: str) -> float:
    return 1.0 if side == "right" else -1.0


def pedicle_axis(p: PhantomParams, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Closest point of the pedicle axis to the canal axis, and its direction."""
    sg = _side_sign(side)
    th = p.pedicle_inclination
    reach = p.canal_radius + p.pedicle_width / 2 + p.canal_clearance
    center = np.array([reach * math.sin(th), sg * reach * math.cos(th), 0.0])
    direction = np.array([math.cos(th), -sg * math.sin(th), 0.0])
    return center, direction


def _ellipsoid_sdf(q, half):
    """Approximate signed distance to an axis-aligned ellipsoid (first order)."""
    half = np.asarray(half, dtype=float)
    u = q / half
    rho = np.sqrt(np.sum(u * u, axis=-1))
    grad = np.sqrt(np.sum((q / half**2) ** 2, axis=-1))
    rho = np.maximum(rho, 1e-9)
    return (rho - 1.0) * rho / np.maximum(grad, 1e-12)


def _box_sdf(q, half):
    d = np.abs(q) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


class _Anatomy:
    """Analytic label field of a (perturbed) parameter set."""

    def __init__(self, p: PhantomParams):
        self.p = p
        ax, ay, az = p.body_half_axes
        self.body_center = np.array([p.canal_radius + ax - 1.0, 0.0, 0.0])
        self.arch_half_height = 0.85 * az
        self.posterior_bone = -(p.canal_radius + p.spinous_length)
        self.skin_inner = self.posterior_bone - p.muscle_thickness
        self.skin_outer = self.skin_inner - p.skin_thickness

    def bone_sdf(self, pts):
        p = self.p
        sdf = _ellipsoid_sdf(pts - self.body_center, p.body_half_axes)
        for side in ("left", "right"):
            c, u = pedicle_axis(p, side)
            rel = pts - c
            s = rel @ u
            lateral = np.array([-u[1], u[0], 0.0])
            q = np.stack([rel @ lateral, rel[..., 2]], axis=-1)
            ell = _ellipsoid_sdf(q, (p.pedicle_width / 2, p.pedicle_height / 2))
            ped = np.maximum(ell, np.abs(s) - p.pedicle_length / 2)
            sdf = np.minimum(sdf, ped)
        rho = np.hypot(pts[..., 0], pts[..., 1])
        arch = np.maximum.reduce([
            p.canal_radius - rho,
            rho - (p.canal_radius + p.lamina_thickness),
            pts[..., 0],
            np.abs(pts[..., 2]) - self.arch_half_height,
        ])
        sdf = np.minimum(sdf, arch)
        sp_half = (p.spinous_length / 2 + p.lamina_thickness / 2, 3.0, 0.7 * self.arch_half_height)
        sp_center = np.array([self.posterior_bone + sp_half[0], 0.0, 0.0])
        return np.minimum(sdf, _box_sdf(pts - sp_center, sp_half))

    def labels(self, pts) -> np.ndarray:
        p = self.p
        x = pts[..., 0]
        lab = np.full(pts.shape[:-1], Label.AIR, dtype=np.uint8)
        lab[x >= self.skin_outer] = Label.FREE
        lab[x >= self.skin_inner] = Label.PRESERVE
        bone = self.bone_sdf(pts)
        lab[bone <= 0] = Label.CORTICAL
        lab[bone <= -p.cortical_thickness] = Label.CANCELLOUS
        canal = np.hypot(x, pts[..., 1]) - p.canal_radius
        lab[(bone <= 0) & (canal > 0) & (canal <= p.cortical_thickness)] = Label.CORTICAL
        lab[canal <= 0] = Label.NOGO
        return lab


def _voxel_centers(origin, dims, spacing):
    axes = [origin[i] + spacing * np.arange(dims[i]) for i in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def nogo_enclosed(vol: LabelVolume) -> bool:
    """True when no NoGo voxel is 6-adjacent to Air or Free."""
    lab = vol.labels
    nogo = lab == Label.NOGO
    exposed = (lab == Label.AIR) | (lab == Label.FREE)
    for axis in range(3):
        for shift in (1, -1):
            moved = np.roll(exposed, shift, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = 0 if shift == 1 else -1
            moved[tuple(edge)] = False
            if np.any(nogo & moved):
                return False
    return True


def _annotate(vol: LabelVolume, center, direction, side, pw) -> GoldStandard:
    step = 0.1
    s = np.arange(-120.0, 120.0 + step, step)
    pts = center + s[:, None] * direction
    lab = vol.label_at(pts)
    canc = np.flatnonzero(lab == Label.CANCELLOUS)
    if canc.size == 0:
        raise GeometryError(f"{side} pedicle axis never reaches cancellous bone")
    i0 = canc[0]
    bone = (lab == Label.CORTICAL) | (lab == Label.CANCELLOUS)
    i1 = i0
    while i1 + 1 < len(s) and bone[i1 + 1]:
        i1 += 1
    last_canc = i0 + np.flatnonzero(lab[i0:i1 + 1] == Label.CANCELLOUS)[-1]
    return GoldStandard(side, pts[i0], pts[last_canc], direction, pw, SCREW_TO_PEDICLE * pw)


def generate_phantom(params: PhantomParams | None = None) -> tuple[LabelVolume, list[GoldStandard]]:
    """Build the label volume and the left/right gold-standard trajectories."""
    params = params or PhantomParams()
    params.validate()
    p = params.perturbed()
    p.validate()
    anat = _Anatomy(p)
    sp = p.spacing
    ax, ay, az = p.body_half_axes
    c_r, u_r = pedicle_axis(p, "right")
    # lateral reach of the pedicle axis at the skin, where drilling starts
    skin_y = abs(c_r[1] + (anat.skin_outer - c_r[0]) / u_r[0] * u_r[1])
    x_lo = anat.skin_outer - p.air_margin
    x_hi = anat.body_center[0] + ax + 12.0
    y_half = max(ay, skin_y) + 22.0
    z_half = max(az, p.pedicle_height / 2) + 18.0
    n = [int(math.ceil((x_hi - x_lo) / sp)) + 1,
         2 * int(math.ceil(y_half / sp)) + 1,
         2 * int(math.ceil(z_half / sp)) + 1]
    origin = np.array([x_lo, -(n[1] - 1) / 2 * sp, -(n[2] - 1) / 2 * sp])
    labels = anat.labels(_voxel_centers(origin, n, sp))
    vol = LabelVolume(labels, sp, origin)
    if not nogo_enclosed(vol):
        raise GeometryError("spinal canal touches air or skin; geometry self-intersects")
    gs = [_annotate(vol, *pedicle_axis(p, side), side, p.pedicle_width) for side in ("left", "right")]
    return vol, gs


def level_params(level: int, subject: int = 0, **overrides) -> PhantomParams:
    """Parameter preset for vertebra ``level`` (1-5) of seeded ``subject``."""
    if level not in LEVEL_PRESETS:
        raise ValueError(f"level must be in 1..5, got {level}")
    rng = np.random.default_rng([subject, 7919])
    muscle = float(rng.uniform(18.0, 34.0)) if subject else 25.0
    base = dict(LEVEL_PRESETS[level], muscle_thickness=muscle, seed=1000 * subject + level if subject else None)
    base.update(overrides)
    return PhantomParams(**base)


def scale_anatomy(vol: LabelVolume, gs, scale) -> tuple[LabelVolume, list[GoldStandard]]:
    """Nearest-neighbour rescale of the anatomy about the volume center."""
    s = np.broadcast_to(np.asarray(scale, dtype=float), (3,)).copy()
    if np.any(s < 0.5) or np.any(s > 2.0):
        raise ValueError(f"scale factors must lie in [0.5, 2.0], got {s}")
    c = vol.center
    if np.all(s == 1.0):
        return vol, list(gs)
    axes = [np.arange(n) for n in vol.dims]
    idx = np.meshgrid(*axes, indexing="ij")
    src = []
    for a in range(3):
        world = vol.origin[a] + vol.spacing * idx[a]
        back = c[a] + (world - c[a]) / s[a]
        # samples beyond the grid replicate the edge voxel
        src.append(np.clip(np.rint((back - vol.origin[a]) / vol.spacing).astype(np.int64), 0, vol.dims[a] - 1))
    labels = vol.labels[src[0], src[1], src[2]]
    out = LabelVolume(labels, vol.spacing, vol.origin)
    new_gs = []
    for g in gs:
        d = g.direction * s
        planar = np.hypot(g.direction[0], g.direction[1])
        if planar > 1e-12:
            # transverse width stretches by det / length-scaling within the axial plane
            dx, dy = g.direction[0] / planar, g.direction[1] / planar
            pw = g.pedicle_width * s[0] * s[1] / math.hypot(s[0] * dx, s[1] * dy)
        else:
            pw = g.pedicle_width * math.sqrt(s[0] * s[1])
        new_gs.append(GoldStandard(g.side, c + s * (g.entry - c), c + s * (g.exit - c), d,
                                   pw, SCREW_TO_PEDICLE * pw))
    return out, new_gs


HEADER_KEYS = {"dims", "spacing_mm", "origin_mm", "label_names", "gold_standard"}


class VolumeFormatError(ValueError):
    """Raised when a volume header or payload is malformed."""


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".raw")


def save_volume(vol: LabelVolume, gs, path) -> Path:
    """Write ``path`` (JSON header) and its sibling ``.raw`` label payload."""
    path = Path(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": vol.spacing,
        "origin_mm": vol.origin.tolist(),
        "label_names": LABEL_NAMES,
        "gold_standard": [g.to_dict() for g in gs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2))
    # x-fastest byte order
    _payload_path(path).write_bytes(vol.labels.tobytes(order="F"))
    return path


def load_volume(path) -> tuple[LabelVolume, list[GoldStandard]]:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header {path}: {exc}") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError("header must be a JSON object")
    missing = {"dims", "spacing_mm", "origin_mm", "label_names"} - set(header)
    unknown = set(header) - HEADER_KEYS
    if missing or unknown:
        raise VolumeFormatError(f"malformed header: missing {sorted(missing)}, unknown {sorted(unknown)}")
    if header["label_names"] != LABEL_NAMES:
        raise VolumeFormatError(f"unexpected label_names {header['label_names']}")
    dims = header["dims"]
    if len(dims) != 3 or any(not isinstance(n, int) or n < 1 for n in dims):
        raise VolumeFormatError(f"bad dims {dims}")
    payload = _payload_path(path).read_bytes()
    if len(payload) != dims[0] * dims[1] * dims[2]:
        raise VolumeFormatError(
            f"dimension/payload mismatch: dims {dims} need {dims[0] * dims[1] * dims[2]} bytes, got {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims, order="F")
    if labels.max(initial=0) >= len(LABEL_NAMES):
        raise VolumeFormatError(f"unknown label value {int(labels.max())}")
    vol = LabelVolume(labels, float(header["spacing_mm"]), header["origin_mm"])
    gs = [GoldStandard.from_dict(g) for g in header.get("gold_standard", [])]
    return vol, gs


def params_from_dict(d: dict) -> PhantomParams:
    known = {f.name for f in fields(PhantomParams)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown phantom parameters: {sorted(unknown)}")
    d = dict(d)
    if "body_half_axes" in d:
        d["body_half_axes"] = tuple(d["body_half_axes"])
    return PhantomParams(**d)


def params_to_dict(p: PhantomParams) -> dict:
    d = asdict(p)
    d["body_half_axes"] = list(p.body_half_axes)
    return d
