"""Isosurface extraction and colored PLY export.

`marching_cubes` runs the classic 256-case algorithm over the voxel-center
lattice of a fused volume. Cells touching any unobserved voxel are
skipped, so the mesh ends exactly where observations end instead of
hallucinating surface at the observation frontier. Vertices are placed by
linear interpolation along sign-changing cell edges and deduplicated
per-edge in one deterministic sequential pass, so identical volumes
produce byte-identical meshes.

Triangle winding is counterclockwise seen from outside (positive-sdf
side); signed mesh volume of a closed surface comes out positive.

Vertex labels take the majority vote of the NEAREST edge endpoint's label
histogram (not an 8-voxel blend), keeping thin structures crisp. Vote ties
break by class priority ACL > meniscus > cartilage > other, since rarer
thin structures otherwise lose to bulk classes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, MissingInputError
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .raster import LABEL_ACL, LABEL_CARTILAGE, LABEL_MENISCUS, LABEL_OTHER, NUM_LABELS
from .tsdf import TsdfVolume

PALETTE = {
    LABEL_OTHER: (0.0, 1.0, 1.0),  # cyan
    LABEL_CARTILAGE: (0.0, 1.0, 0.0),  # green
    LABEL_MENISCUS: (1.0, 0.0, 0.0),  # red
    LABEL_ACL: (0.0, 0.0, 1.0),  # blue
}


def palette(label: int) -> tuple[float, float, float]:
    """RGB in [0,1] for an anatomical class id; raises on unknown ids."""
    try:
        return PALETTE[int(label)]
    except (KeyError, ValueError) as e:
        raise DomainError(f"unknown label id: {label!r}") from e


@dataclass(frozen=True)
class Mesh:
    """Triangle surface with per-vertex anatomical color and label."""

    vertices: np.ndarray  # (V, 3) float32, mm
    triangles: np.ndarray  # (T, 3) int32
    vertex_colors: np.ndarray  # (V, 3) float32 in [0, 1]
    vertex_labels: np.ndarray  # (V,) uint8

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        c = np.asarray(self.vertex_colors, dtype=np.float32).reshape(-1, 3)
        l = np.asarray(self.vertex_labels, dtype=np.uint8).reshape(-1)
        if not np.isfinite(v).all():
            raise DomainError("mesh vertices must be finite")
        if len(c) != len(v) or len(l) != len(v):
            raise DomainError("per-vertex attribute counts must match vertex count")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise DomainError("triangle indices out of range")
        for name, arr in (("vertices", v), ("triangles", t), ("vertex_colors", c), ("vertex_labels", l)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        """Occurrences of each undirected edge across triangles."""
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.triangles:
            for e in ((a, b), (b, c), (c, a)):
                key = (int(min(e)), int(max(e)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edge_counts()) + self.n_triangles

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive for outward winding."""
        v = self.vertices.astype(np.float64)
        a = v[self.triangles[:, 0]]
        b = v[self.triangles[:, 1]]
        c = v[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def empty_mesh() -> Mesh:
    return Mesh(
        vertices=np.zeros((0, 3), dtype=np.float32),
        triangles=np.zeros((0, 3), dtype=np.int32),
        vertex_colors=np.zeros((0, 3), dtype=np.float32),
        vertex_labels=np.zeros(0, dtype=np.uint8),
    )


def _majority_label(counts: np.ndarray) -> int:
    if counts.sum() == 0:
        return LABEL_OTHER
    # reversed argmax implements the ACL > meniscus > cartilage > other
    # tie-break, since argmax takes the first maximum
    return NUM_LABELS - 1 - int(np.argmax(counts[::-1]))


def marching_cubes(vol: TsdfVolume, iso: float = 0.0) -> Mesh:
    """Extract the iso level set of the observed sdf as a triangle mesh.

    An all-positive (or unobserved) volume yields a valid empty mesh.
    """
    nx, ny, nz = vol.dims
    if min(nx, ny, nz) < 2:
        return empty_mesh()

    sdf = vol.sdf
    inside = sdf < iso
    obs = vol.weight > 0

    cx, cy, cz = nx - 1, ny - 1, nz - 1
    case = np.zeros((cx, cy, cz), dtype=np.uint16)
    all_obs = np.ones((cx, cy, cz), dtype=bool)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        sl = (slice(dx, cx + dx), slice(dy, cy + dy), slice(dz, cz + dz))
        case |= inside[sl].astype(np.uint16) << bit
        all_obs &= obs[sl]
    active = (case != 0) & (case != 255) & all_obs
    cells = np.argwhere(active)
    if len(cells) == 0:
        return empty_mesh()

    origin = vol.origin
    vs = vol.voxel_size
    labels_grid = vol.label_counts

    vert_index: dict[tuple[int, int], int] = {}
    positions: list[np.ndarray] = []
    labels: list[int] = []
    triangles: list[tuple[int, int, int]] = []

    def corner_key(g) -> int:
        return int((g[0] * ny + g[1]) * nz + g[2])

    for cell in cells:
        cell_case = int(case[cell[0], cell[1], cell[2]])
        tris = TRI_TABLE[cell_case]
        edge_vertex: dict[int, int] = {}
        for tri in tris:
            idxs = []
            for e in tri:
                vid = edge_vertex.get(e)
                if vid is None:
                    ca, cb = EDGE_CORNERS[e]
                    ga = cell + CORNER_OFFSETS[ca]
                    gb = cell + CORNER_OFFSETS[cb]
                    ka, kb = corner_key(ga), corner_key(gb)
                    key = (ka, kb) if ka < kb else (kb, ka)
                    vid = vert_index.get(key)
                    if vid is None:
                        va = float(sdf[ga[0], ga[1], ga[2]])
                        vb = float(sdf[gb[0], gb[1], gb[2]])
                        t = (iso - va) / (vb - va)
                        pa = origin + (ga + 0.5) * vs
                        pb = origin + (gb + 0.5) * vs
                        positions.append(pa + t * (pb - pa))
                        near = ga if t <= 0.5 else gb
                        labels.append(
                            _majority_label(labels_grid[near[0], near[1], near[2]])
                        )
                        vid = len(positions) - 1
                        vert_index[key] = vid
                    edge_vertex[e] = vid
                idxs.append(vid)
            if idxs[0] != idxs[1] and idxs[1] != idxs[2] and idxs[0] != idxs[2]:
                # table order winds inward for the sdf-positive-outside
                # convention; swap to make normals point outward
                triangles.append((idxs[0], idxs[2], idxs[1]))

    verts = np.asarray(positions, dtype=np.float32)
    labs = np.asarray(labels, dtype=np.uint8)
    colors = np.asarray([palette(int(l)) for l in labs], dtype=np.float32)
    return Mesh(
        vertices=verts,
        triangles=np.asarray(triangles, dtype=np.int32),
        vertex_colors=colors,
        vertex_labels=labs,
    )


# ---------------------------------------------------------------------------
# PLY I/O

_VERTEX_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("label", "u1")]
)
_FACE_DTYPE = np.dtype([("n", "u1"), ("i0", "<i4"), ("i1", "<i4"), ("i2", "<i4")])


def _ply_header(mesh: Mesh, binary: bool) -> str:
    fmt = "binary_little_endian" if binary else "ascii"
    return (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "property uchar label\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )


def export_ply(mesh: Mesh, path: str, binary: bool = True) -> None:
    """Write a PLY with per-vertex uchar RGB and class label.

    Binary output round-trips losslessly through `load_ply`; ASCII uses
    shortest-round-trip float formatting so it also reloads exactly at
    float32 precision. Output bytes are deterministic for a fixed mesh.
    """
    rgb = np.rint(mesh.vertex_colors * 255.0).astype(np.uint8)
    header = _ply_header(mesh, binary)
    if binary:
        vrec = np.empty(mesh.n_vertices, dtype=_VERTEX_DTYPE)
        vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
        vrec["red"], vrec["green"], vrec["blue"] = rgb.T
        vrec["label"] = mesh.vertex_labels
        frec = np.empty(mesh.n_triangles, dtype=_FACE_DTYPE)
        frec["n"] = 3
        frec["i0"], frec["i1"], frec["i2"] = mesh.triangles.T
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(vrec.tobytes())
            f.write(frec.tobytes())
    else:
        with open(path, "w") as f:
            f.write(header)
            for i in range(mesh.n_vertices):
                x, y, z = (repr(float(c)) for c in mesh.vertices[i])
                r, g, b = (int(c) for c in rgb[i])
                f.write(f"{x} {y} {z} {r} {g} {b} {int(mesh.vertex_labels[i])}\n")
            for t in mesh.triangles:
                f.write(f"3 {int(t[0])} {int(t[1])} {int(t[2])}\n")


def load_ply(path: str) -> Mesh:
    """Read meshes written by `export_ply` (either format)."""
    if not os.path.exists(path):
        raise MissingInputError(f"mesh file not found: {path}")
    with open(path, "rb") as f:
        header_lines = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated PLY header")
            header_lines.append(line.decode("ascii").strip())
            if header_lines[-1] == "end_header":
                break
        if header_lines[0] != "ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = n_face = 0
        for h in header_lines:
            if h.startswith("format"):
                fmt = h.split()[1]
            elif h.startswith("element vertex"):
                n_vertex = int(h.split()[2])
            elif h.startswith("element face"):
                n_face = int(h.split()[2])
        if fmt not in ("ascii", "binary_little_endian"):
            raise FormatError(f"{path}: unsupported format {fmt}")

        if fmt == "binary_little_endian":
            vrec = np.frombuffer(f.read(n_vertex * _VERTEX_DTYPE.itemsize), dtype=_VERTEX_DTYPE)
            frec = np.frombuffer(f.read(n_face * _FACE_DTYPE.itemsize), dtype=_FACE_DTYPE)
            if len(vrec) != n_vertex or len(frec) != n_face:
                raise FormatError(f"{path}: truncated payload")
            if n_face and not (frec["n"] == 3).all():
                raise FormatError(f"{path}: non-triangle face")
            verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1)
            rgb = np.stack([vrec["red"], vrec["green"], vrec["blue"]], axis=1)
            labels = vrec["label"]
            tris = np.stack([frec["i0"], frec["i1"], frec["i2"]], axis=1)
        else:
            text = f.read().decode("ascii").split("\n")
            rows = [r for r in text if r.strip()]
            if len(rows) < n_vertex + n_face:
                raise FormatError(f"{path}: truncated payload")
            verts = np.zeros((n_vertex, 3), dtype=np.float32)
            rgb = np.zeros((n_vertex, 3), dtype=np.uint8)
            labels = np.zeros(n_vertex, dtype=np.uint8)
            for i in range(n_vertex):
                parts = rows[i].split()
                verts[i] = [float(p) for p in parts[:3]]
                rgb[i] = [int(p) for p in parts[3:6]]
                labels[i] = int(parts[6])
            tris = np.zeros((n_face, 3), dtype=np.int32)
            for i in range(n_face):
                parts = rows[n_vertex + i].split()
                if parts[0] != "3":
                    raise FormatError(f"{path}: non-triangle face")
                tris[i] = [int(p) for p in parts[1:4]]

    return Mesh(
        vertices=verts.astype(np.float32),
        triangles=tris.astype(np.int32),
        vertex_colors=rgb.astype(np.float32) / 255.0,
        vertex_labels=labels.astype(np.uint8),
    )
