"""Tabletop scene graphs: a table root with objects resting on one bounding-box face."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Pose,
    TriangleMesh,
    VoxelGrid,
    bounding_box,
    box_mesh,
    compose,
    rot_x,
    rot_y,
    rot_z,
    voxel_to_mesh,
)
from . import io

TWO_PI = 2.0 * math.pi
FACES = (1, 2, 3, 4, 5, 6)
# face index -> rotation pressing that model-frame face (-z, +z, -x, +x, -y, +y) onto the table
FACE_ROTATIONS = {
    1: Pose(),
    2: rot_x(math.pi),
    3: rot_y(-math.pi / 2),
    4: rot_y(math.pi / 2),
    5: rot_x(math.pi / 2),
    6: rot_x(-math.pi / 2),
}
_RANGE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """A renderable object. ``grid`` is None for analytic meshes such as the table."""

    id: int
    mesh: TriangleMesh = field(repr=False)
    grid: VoxelGrid | None = field(default=None, repr=False)
    name: str = ""
    lo: np.ndarray = field(init=False, repr=False)
    hi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.grid is not None:
            lo, hi = self.grid.bounds()
            bbox = bounding_box(self.grid)
        else:
            lo, hi = self.mesh.bounds()
            bbox = tuple(float(v) for v in hi - lo)
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "_bbox", bbox)
        feet = {}
        for face in FACES:
            w, h, t = np.abs(FACE_ROTATIONS[face].rotation) @ np.asarray(bbox)
            feet[face] = (float(w), float(h), float(t))
        object.__setattr__(self, "_footprints", feet)

    @classmethod
    def from_grid(cls, id: int, grid: VoxelGrid, name: str = "") -> "ObjectModel":
        return cls(id, voxel_to_mesh(grid), grid, name)

    @property
    def bbox(self) -> tuple[float, float, float]:
        return self._bbox

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def footprint(self, face: int) -> tuple[float, float, float]:
        """(width along x, depth along y, height) after pressing ``face`` down, at zero yaw."""
        return self._footprints[face]


def make_table(width: float = 0.5, depth: float = 0.5, thickness: float = 0.01) -> ObjectModel:
    """Thin box whose top face is the z=0 plane, centered on the world origin."""
    mesh = box_mesh((-width / 2, -depth / 2, -thickness), (width / 2, depth / 2, 0.0))
    return ObjectModel(-1, mesh, None, "table")


@dataclass(frozen=True)
class ContactParams:
    dx: float
    dy: float
    dtheta: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dtheta)


@dataclass(frozen=True)
class Child:
    obj: ObjectModel
    face: int
    contact: ContactParams


@dataclass(frozen=True)
class SceneGraph:
    table: ObjectModel
    children: tuple[Child, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        for c in self.children:
            if c.face not in FACES:
                raise ValueError(f"contact face must be in 1..6, got {c.face}")

    def add_child(self, obj: ObjectModel, face: int, contact: ContactParams) -> "SceneGraph":
        return SceneGraph(self.table, self.children + (Child(obj, face, contact),))

    def object_poses(self) -> list[Pose]:
        return [contact_to_pose(self.table, c.obj, c.face, c.contact) for c in self.children]

    def key(self) -> tuple:
        """Hashable description of the children, usable as a cache key."""
        return tuple((c.obj.id, c.face, c.contact.as_tuple()) for c in self.children)


def support_extents(table: ObjectModel, obj: ObjectModel, face: int) -> tuple[float, float]:
    """Lengths of the valid (dx, dy) ranges; non-positive when the object is wider than the table."""
    tw, th, _ = table.bbox
    w, h, _ = obj.footprint(face)
    return tw - w, th - h


def contact_in_range(table: ObjectModel, obj: ObjectModel, face: int, cp: ContactParams) -> bool:
    sx, sy = support_extents(table, obj, face)
    return (
        sx > 0 and sy > 0
        and -_RANGE_TOL <= cp.dx <= sx + _RANGE_TOL
        and -_RANGE_TOL <= cp.dy <= sy + _RANGE_TOL
        and 0.0 <= cp.dtheta < TWO_PI
    )


def contact_to_pose(table: ObjectModel, obj: ObjectModel, face: int, cp: ContactParams) -> Pose:
    """World pose of ``obj`` with ``face`` flush on the table top.

    The zero-yaw footprint's corner sits (dx, dy) from the table's min corner
    and the object is yawed by dtheta about the vertical axis through the
    footprint center.
    """
    if face not in FACES:
        raise ValueError(f"contact face must be in 1..6, got {face}")
    if not contact_in_range(table, obj, face, cp):
        raise ValueError(f"contact parameters {cp} out of range for face {face}")
    w, h, t = obj.footprint(face)
    top = table.hi[2]
    center = np.array([table.lo[0] + cp.dx + w / 2, table.lo[1] + cp.dy + h / 2, top + t / 2])
    rot = compose(rot_z(cp.dtheta), FACE_ROTATIONS[face])
    return Pose(rot.quat, center - rot.rotation @ obj.center)


def child_prior_logpdf(table: ObjectModel, obj: ObjectModel, face: int, cp: ContactParams,
                       library_size: int) -> float:
    if face not in FACES or not contact_in_range(table, obj, face, cp):
        return -math.inf
    sx, sy = support_extents(table, obj, face)
    return -math.log(library_size) - math.log(6) - math.log(sx) - math.log(sy) - math.log(TWO_PI)


def scene_prior_logpdf(scene: SceneGraph, library_size: int) -> float:
    return float(sum(child_prior_logpdf(scene.table, c.obj, c.face, c.contact, library_size)
                     for c in scene.children))


def sample_child(rng: np.random.Generator, library, table: ObjectModel) -> Child:
    """Draw (object, face, contact) from the uniform priors.

    Faces whose footprint does not fit on the table have empty support and
    are redrawn.
    """
    if len(library) == 0:
        raise ValueError("object library is empty")
    for _ in range(1000):
        obj = library[int(rng.integers(len(library)))]
        face = int(rng.integers(1, 7))
        sx, sy = support_extents(table, obj, face)
        if sx > 0 and sy > 0:
            break
    else:
        raise ValueError("no library object fits on the table")
    cp = ContactParams(float(rng.uniform(0, sx)), float(rng.uniform(0, sy)), float(rng.uniform(0, TWO_PI)))
    return Child(obj, face, cp)


def sample_scene_prior(rng: np.random.Generator, n: int, library, table: ObjectModel) -> SceneGraph:
    if n < 0:
        raise ValueError("n must be non-negative")
    if len(library) == 0:
        raise ValueError("object library is empty")
    return SceneGraph(table, tuple(sample_child(rng, library, table) for _ in range(n)))


# -- JSON ---------------------------------------------------------------------

def scene_to_json(scene: SceneGraph) -> dict:
    tw, th, tt = scene.table.bbox
    return {
        "table": {"width": tw, "depth": th, "thickness": tt},
        "objects": [
            {"object_id": c.obj.id, "face": c.face, "dx": c.contact.dx, "dy": c.contact.dy,
             "dtheta": c.contact.dtheta}
            for c in scene.children
        ],
    }


def scene_from_json(d: dict, library) -> SceneGraph:
    t = d["table"]
    table = make_table(t["width"], t["depth"], t.get("thickness", 0.01))
    by_id = {o.id: o for o in library}
    children = []
    for o in d["objects"]:
        if o["object_id"] not in by_id:
            raise KeyError(f"object id {o['object_id']} not in library")
        children.append(Child(by_id[o["object_id"]], int(o["face"]),
                              ContactParams(float(o["dx"]), float(o["dy"]), float(o["dtheta"]))))
    return SceneGraph(table, tuple(children))


def load_library(manifest_path) -> list[ObjectModel]:
    """Library manifest: {"objects": [{"id": int, "name": str, "path": "model.svox"}, ...]}.

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    d = json.loads(manifest_path.read_text())
    out = []
    for entry in d["objects"]:
        p = Path(entry["path"])
        if not p.is_absolute():
            p = manifest_path.parent / p
        out.append(ObjectModel.from_grid(int(entry["id"]), io.read_voxels(p), entry.get("name", "")))
    return out


def save_library(manifest_path, library, names=None) -> None:
    manifest_path = Path(manifest_path)
    entries = []
    for obj in library:
        fname = f"object_{obj.id:03d}.svox"
        io.write_voxels(manifest_path.parent / fname, obj.grid)
        entries.append({"id": obj.id, "name": obj.name, "path": fname})
    io.atomic_write_text(manifest_path, io.dumps({"objects": entries}))
