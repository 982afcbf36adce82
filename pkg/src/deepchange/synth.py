"""Deterministic generator of labeled bi-temporal urban scenes.

Stands in for full-scale airborne survey data so the whole pipeline can be
exercised on a desk machine. Buildings are box shells (roof + facades),
vegetation are ellipsoidal canopy blobs, mobile objects are small boxes on
the ground. Epoch-2 ground truth is assigned by construction from the change
directives, one of seven classes in this fixed order:

    0 unchanged, 1 new_building, 2 demolition, 3 new_vegetation,
    4 vegetation_growth, 5 missing_vegetation, 6 mobile_object
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloud

CLASS_NAMES = (
    "unchanged",
    "new_building",
    "demolition",
    "new_vegetation",
    "vegetation_growth",
    "missing_vegetation",
    "mobile_object",
)
UNCHANGED = 0
NEW_BUILDING = 1
DEMOLITION = 2
NEW_VEGETATION = 3
VEGETATION_GROWTH = 4
MISSING_VEGETATION = 5
MOBILE_OBJECT = 6
N_CLASSES = 7
CHANGE_CLASS_IDS = (1, 2, 3, 4, 5, 6)

# Default hex palette, index-aligned with CLASS_NAMES (used by eval/serve).
CLASS_COLORS = (
    "#9e9e9e",
    "#d32f2f",
    "#1565c0",
    "#2e7d32",
    "#9ccc65",
    "#8e24aa",
    "#f9a825",
)

_KINDS = ("building", "vegetation", "mobile_object")
_CHANGES = ("demolish", "add", "grow", "remove", "move")
_ALLOWED = {
    "demolish": ("building",),
    "add": _KINDS,
    "grow": ("vegetation",),
    "remove": ("vegetation",),
    "move": ("mobile_object",),
}


class SceneSpecError(ValueError):
    """Invalid scene specification (bad geometry or dangling directive)."""


@dataclass
class ObjectSpec:
    """One placed object. Footprint is an axis-aligned box (full widths)."""

    kind: str
    cx: float
    cy: float
    sx: float
    sy: float
    height: float

    def footprint(self):
        return (
            self.cx - self.sx / 2.0,
            self.cx + self.sx / 2.0,
            self.cy - self.sy / 2.0,
            self.cy + self.sy / 2.0,
        )


@dataclass
class ChangeDirective:
    object_id: int
    change: str
    grow_delta: float = 2.0
    move_dx: float = 0.0
    move_dy: float = 0.0


@dataclass
class SceneSpec:
    extent: tuple = (100.0, 100.0)
    ground_noise_sigma: float = 0.05
    objects: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    density: float = 5.0
    rng_seed: int = 0

    def validate(self):
        w, h = self.extent
        if w <= 0 or h <= 0:
            raise SceneSpecError("extent must be positive")
        if self.density <= 0:
            raise SceneSpecError("density must be > 0")
        if self.ground_noise_sigma < 0:
            raise SceneSpecError("ground_noise_sigma must be >= 0")
        for i, obj in enumerate(self.objects):
            if obj.kind not in _KINDS:
                raise SceneSpecError(f"object {i}: unknown kind {obj.kind!r}")
            if obj.height <= 0 or obj.sx <= 0 or obj.sy <= 0:
                raise SceneSpecError(f"object {i}: non-positive size")
            x0, x1, y0, y1 = obj.footprint()
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise SceneSpecError(f"object {i}: footprint outside extent")
        for d in self.changes:
            if d.change not in _CHANGES:
                raise SceneSpecError(f"unknown change {d.change!r}")
            if not 0 <= d.object_id < len(self.objects):
                raise SceneSpecError(f"directive references unknown object {d.object_id}")
            kind = self.objects[d.object_id].kind
            if kind not in _ALLOWED[d.change]:
                raise SceneSpecError(f"change {d.change!r} not applicable to {kind!r}")

    def to_json(self) -> str:
        doc = {
            "schema": 1,
            "extent": list(self.extent),
            "ground_noise_sigma": self.ground_noise_sigma,
            "density": self.density,
            "rng_seed": self.rng_seed,
            "objects": [
                {"kind": o.kind, "cx": o.cx, "cy": o.cy, "sx": o.sx, "sy": o.sy,
                 "height": o.height}
                for o in self.objects
            ],
            "changes": [
                {"object_id": d.object_id, "change": d.change,
                 "grow_delta": d.grow_delta, "move_dx": d.move_dx,
                 "move_dy": d.move_dy}
                for d in self.changes
            ],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        doc = json.loads(text)
        if doc.get("schema") != 1:
            raise SceneSpecError("unsupported scene spec schema")
        spec = SceneSpec(
            extent=tuple(doc["extent"]),
            ground_noise_sigma=float(doc["ground_noise_sigma"]),
            density=float(doc["density"]),
            rng_seed=int(doc["rng_seed"]),
            objects=[ObjectSpec(**o) for o in doc["objects"]],
            changes=[ChangeDirective(**d) for d in doc["changes"]],
        )
        spec.validate()
        return spec


@dataclass
class LabeledScenePair:
    pc1: PointCloud
    pc2: PointCloud  # carries gt labels

    @property
    def gt_labels(self):
        return self.pc2.labels


def _rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFFFFFFFFFF, epoch, stream])


def _sample_box(rng, obj: ObjectSpec, density: float):
    """Roof + four facades of a box shell, count = area * density per face."""
    x0, x1, y0, y1 = obj.footprint()
    h = obj.height
    pts = []
    n_roof = max(1, int(round(obj.sx * obj.sy * density)))
    xs = rng.uniform(x0, x1, n_roof)
    ys = rng.uniform(y0, y1, n_roof)
    pts.append(np.column_stack([xs, ys, np.full(n_roof, h)]))
    for (ax0, ay0, ax1, ay1, length) in (
        (x0, y0, x1, y0, obj.sx),
        (x0, y1, x1, y1, obj.sx),
        (x0, y0, x0, y1, obj.sy),
        (x1, y0, x1, y1, obj.sy),
    ):
        n_f = max(1, int(round(length * h * density)))
        t = rng.uniform(0.0, 1.0, n_f)
        zz = rng.uniform(0.0, h, n_f)
        xs = ax0 + t * (ax1 - ax0)
        ys = ay0 + t * (ay1 - ay0)
        pts.append(np.column_stack([xs, ys, zz]))
    return np.concatenate(pts, axis=0)


def _canopy_height(xy, cx, cy, rx, ry, zc, rz):
    """Upper-sheet ellipsoid elevation over a footprint point (0 outside)."""
    u = ((xy[:, 0] - cx) / rx) ** 2 + ((xy[:, 1] - cy) / ry) ** 2
    inside = u < 1.0
    z = np.zeros(len(xy))
    z[inside] = zc + rz * np.sqrt(1.0 - u[inside])
    return z, inside

def _canopy_params(obj: ObjectSpec, grow: float = 0.0):
    # Blob sits on the ground; growing raises the apex by `grow` while the
    # base stays put.
    rx, ry = obj.sx / 2.0, obj.sy / 2.0
    rz = obj.height / 2.0 + grow / 2.0
    zc = obj.height / 2.0 + grow / 2.0
    return rx, ry, zc, rz


def _sample_canopy(rng, obj: ObjectSpec, density: float, grow: float = 0.0):
    rx, ry, zc, rz = _canopy_params(obj, grow)
    area = np.pi * rx * ry
    n = max(1, int(round(area * density)))
    r = np.sqrt(rng.uniform(0.0, 1.0, n))
    th = rng.uniform(0.0, 2.0 * np.pi, n)
    xs = obj.cx + rx * r * np.cos(th)
    ys = obj.cy + ry * r * np.sin(th)
    xy = np.column_stack([xs, ys])
    z, _ = _canopy_height(xy, obj.cx, obj.cy, rx, ry, zc, rz)
    return np.column_stack([xs, ys, z])


def _in_footprint(xy, obj: ObjectSpec, dx: float = 0.0, dy: float = 0.0):
    x0, x1, y0, y1 = obj.footprint()
    return (
        (xy[:, 0] >= x0 + dx) & (xy[:, 0] <= x1 + dx)
        & (xy[:, 1] >= y0 + dy) & (xy[:, 1] <= y1 + dy)
    )


def generate(spec: SceneSpec) -> LabeledScenePair:
    """Build both epochs plus per-point ground truth on epoch 2.

    Bit-identical output for a fixed rng_seed: every sampling step draws from
    its own (seed, epoch, stream) generator, independent of evaluation order.
    """
    spec.validate()
    w, h = spec.extent
    by_obj = {i: [] for i in range(len(spec.objects))}
    for d in spec.changes:
        by_obj[d.object_id].append(d)
    for i, ds in by_obj.items():
        if len(ds) > 1:
            raise SceneSpecError(f"object {i} has multiple directives")

    def directive(i):
        return by_obj[i][0] if by_obj[i] else None

    clouds = {}
    labels2 = []
    for epoch in (1, 2):
        parts = []
        part_labels = []

        # Ground: uniform over the extent, minus footprints occluded by boxes
        # present in this epoch.
        g = _rng(spec.rng_seed, epoch, 0)
        n_ground = max(1, int(round(w * h * spec.density)))
        gx = g.uniform(0.0, w, n_ground)
        gy = g.uniform(0.0, h, n_ground)
        gxy = np.column_stack([gx, gy])
        keep = np.ones(n_ground, dtype=bool)
        for i, obj in enumerate(spec.objects):
            if obj.kind == "vegetation":
                continue  # canopy does not occlude ground returns
            d = directive(i)
            present = _present(d, epoch)
            if present:
                dx = dy = 0.0
                if d is not None and d.change == "move" and epoch == 2:
                    dx, dy = d.move_dx, d.move_dy
                keep &= ~_in_footprint(gxy, obj, dx, dy)
        gxy = gxy[keep]
        gz = np.zeros(len(gxy))
        ground = np.column_stack([gxy[:, 0], gxy[:, 1], gz])
        parts.append(ground)
        if epoch == 2:
            part_labels.append(_ground_labels(gxy, spec, directive))

        for i, obj in enumerate(spec.objects):
            d = directive(i)
            if not _present(d, epoch):
                continue
            r = _rng(spec.rng_seed, epoch, i + 1)
            if obj.kind == "vegetation":
                grow = d.grow_delta if (d is not None and d.change == "grow" and epoch == 2) else 0.0
                pts = _sample_canopy(r, obj, spec.density, grow)
                if epoch == 2:
                    lab = np.zeros(len(pts), dtype=np.int32)
                    if d is not None and d.change == "add":
                        lab[:] = NEW_VEGETATION
                    elif d is not None and d.change == "grow":
                        rx, ry, zc, rz = _canopy_params(obj)
                        z_old, _ = _canopy_height(pts[:, :2], obj.cx, obj.cy, rx, ry, zc, rz)
                        lab[pts[:, 2] > z_old + 1e-9] = VEGETATION_GROWTH
                    part_labels.append(lab)
            else:
                shifted = obj
                if d is not None and d.change == "move" and epoch == 2:
                    shifted = ObjectSpec(obj.kind, obj.cx + d.move_dx, obj.cy + d.move_dy,
                                         obj.sx, obj.sy, obj.height)
                pts = _sample_box(r, shifted, spec.density)
                if epoch == 2:
                    lab = np.zeros(len(pts), dtype=np.int32)
                    if d is not None and d.change == "add":
                        lab[:] = NEW_BUILDING if obj.kind == "building" else MOBILE_OBJECT
                    elif d is not None and d.change == "move":
                        lab[:] = MOBILE_OBJECT
                    part_labels.append(lab)
            parts.append(pts)

        xyz = np.concatenate(parts, axis=0)
        jit = _rng(spec.rng_seed, epoch, len(spec.objects) + 1)
        if spec.ground_noise_sigma > 0:
            xyz = xyz + jit.normal(0.0, spec.ground_noise_sigma, xyz.shape)
        if epoch == 2:
            labels2 = np.concatenate(part_labels, axis=0)
            xyz, labels2 = _ensure_directive_classes(xyz, labels2, spec, directive)
        clouds[epoch] = xyz

    pc1 = PointCloud(clouds[1], epoch_tag=1)
    pc2 = PointCloud(clouds[2], labels=labels2, epoch_tag=2)
    return LabeledScenePair(pc1, pc2)


def _present(d, epoch: int) -> bool:
    if d is None:
        return True
    if d.change == "add":
        return epoch == 2
    if d.change in ("demolish", "remove"):
        return epoch == 1
    return True  # grow / move exist in both epochs


def _ground_labels(gxy, spec: SceneSpec, directive):
    """Epoch-2 ground labels: change classes where something vanished."""
    lab = np.zeros(len(gxy), dtype=np.int32)
    for i, obj in enumerate(spec.objects):
        d = directive(i)
        if d is None:
            continue
        if d.change == "demolish":
            lab[_in_footprint(gxy, obj)] = DEMOLITION
        elif d.change == "remove":
            lab[_in_footprint(gxy, obj)] = MISSING_VEGETATION
        elif d.change == "move":
            lab[_in_footprint(gxy, obj)] = MOBILE_OBJECT
    return lab


def _ensure_directive_classes(xyz, labels, spec: SceneSpec, directive):
    """Guarantee each directive contributes at least one labeled point."""
    want = []
    for i, obj in enumerate(spec.objects):
        d = directive(i)
        if d is None:
            continue
        cls = {
            "demolish": DEMOLITION,
            "remove": MISSING_VEGETATION,
            "move": MOBILE_OBJECT,
            "grow": VEGETATION_GROWTH,
            "add": {"building": NEW_BUILDING, "vegetation": NEW_VEGETATION,
                    "mobile_object": MOBILE_OBJECT}[obj.kind],
        }[d.change]
        if not np.any(labels == cls):
            z = obj.height if d.change in ("add", "grow") else 0.0
            want.append(((obj.cx, obj.cy, z), cls))
    if not want:
        return xyz, labels
    extra = np.array([p for p, _ in want], dtype=np.float64)
    extra_lab = np.array([c for _, c in want], dtype=np.int32)
    return np.concatenate([xyz, extra]), np.concatenate([labels, extra_lab])


def demo_spec(seed: int = 0, extent: float = 100.0, density: float = 5.0,
              noise: float = 0.05) -> SceneSpec:
    """A compact scene exercising all seven classes.

    Object placements are drawn deterministically from the seed on a jittered
    grid so footprints never overlap; directives cover every change kind.
    """
    rng = np.random.default_rng([seed & 0x7FFFFFFFFFFFFFFF, 99])
    w = extent
    cells = 5
    step = w / cells
    slots = [(i, j) for i in range(cells) for j in range(cells)]
    rng.shuffle(slots)
    objects = []
    changes = []

    def slot_center(s):
        i, j = s
        jit = rng.uniform(-0.08, 0.08, 2) * step
        return ((i + 0.5) * step + jit[0], (j + 0.5) * step + jit[1])

    plan = [
        ("building", None), ("building", None), ("building", "demolish"),
        ("building", "demolish"), ("building", "add"), ("building", "add"),
        ("vegetation", None), ("vegetation", None), ("vegetation", "grow"),
        ("vegetation", "grow"), ("vegetation", "remove"), ("vegetation", "remove"),
        ("vegetation", "add"), ("mobile_object", None), ("mobile_object", "move"),
        ("mobile_object", "add"),
    ]
    for k, (kind, change) in enumerate(plan):
        cx, cy = slot_center(slots[k])
        if kind == "building":
            sx = rng.uniform(0.35, 0.55) * step
            sy = rng.uniform(0.35, 0.55) * step
            height = rng.uniform(6.0, 12.0)
        elif kind == "vegetation":
            sx = sy = rng.uniform(0.3, 0.45) * step
            height = rng.uniform(4.0, 8.0)
        else:
            sx, sy = 2.0, 4.0
            height = 1.8
        objects.append(ObjectSpec(kind, cx, cy, sx, sy, height))
        if change is not None:
            d = ChangeDirective(k, change)
            if change == "grow":
                d.grow_delta = rng.uniform(2.0, 3.0)
            if change == "move":
                d.move_dx, d.move_dy = 0.3 * step, 0.0
            changes.append(d)
    spec = SceneSpec(extent=(w, w), ground_noise_sigma=noise, objects=objects,
                     changes=changes, density=density, rng_seed=seed)
    spec.validate()
    return spec


def write_scene(pair: LabeledScenePair, out_dir) -> dict:
    """Write pc1.xyz, pc2.xyz (labels as 4th column) and scene_meta.json."""
    from .core import save_xyz

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_xyz(pair.pc1, out / "pc1.xyz")
    save_xyz(pair.pc2, out / "pc2.xyz")
    meta = {
        "schema": 1,
        "classes": list(CLASS_NAMES),
        "colors": list(CLASS_COLORS),
        "n_pc1": pair.pc1.n_points,
        "n_pc2": pair.pc2.n_points,
    }
    (out / "scene_meta.json").write_text(json.dumps(meta, indent=2))
    return meta
