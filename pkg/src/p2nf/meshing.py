"""Radiance field -> colored triangle mesh.

Pipeline: sample the field's density on a regular grid of cell centers,
convert to alpha occupancy 1 - exp(-sigma * cell_edge) (a scale-free
threshold), extract the 0.5 iso-surface with marching cubes (shared vertices
via a global edge map, so closed surfaces come out watertight), then query
the field's color at each vertex looking along the inward direction
(-vertex normal) and clamp to [0, 1].

Exports: binary little-endian PLY with uchar vertex colors, or OBJ with
6-number vertex lines; both re-import within color quantization (1/255).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldConfig, TargetWeights, eval_field_batch
from .mc_tables import EDGE_TABLE, TRI_TABLE

DEFAULT_BOUNDS = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))

# cube corner offsets in the classic table order (bottom ring, then top ring)
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=np.int64)

# edge index -> (corner a, corner b)
_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0),
          (4, 5), (5, 6), (6, 7), (7, 4),
          (0, 4), (1, 5), (2, 6), (3, 7))


@dataclass
class DensityGrid:
    resolution: int
    bounds: tuple
    values: np.ndarray  # (R, R, R) alpha occupancy in [0, 1], cell centers

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.values.shape != (self.resolution,) * 3:
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"resolution {self.resolution}")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("occupancy values must lie in [0, 1]")

    def cell_centers_1d(self):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        h = (hi - lo) / self.resolution
        axes = [lo[k] + (np.arange(self.resolution) + 0.5) * h[k] for k in range(3)]
        return axes, h


@dataclass
class TriangleMeshWithColors:
    vertices: np.ndarray           # (V, 3)
    faces: np.ndarray              # (F, 3) int indices
    colors: np.ndarray = None      # (V, 3) in [0, 1], or None before colorize

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return n / norms

    def vertex_normals(self):
        """Area-weighted vertex normals (cross products carry the area weight)."""
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        fn = np.cross(b - a, c - a)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norms = np.linalg.norm(vn, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vn / norms

    def euler_characteristic(self):
        edges = np.vstack([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                           self.faces[:, [2, 0]]])
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        return len(self.vertices) - len(edges) + len(self.faces)


def density_grid(tw: TargetWeights, resolution, config: FieldConfig,
                 bounds=DEFAULT_BOUNDS) -> DensityGrid:
    """Alpha occupancy 1 - exp(-sigma * cell_edge) at cell centers.

    Density is view-independent, so the field is queried with a fixed
    canonical direction.
    """
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    h = (hi - lo) / resolution
    axes = [lo[k] + (np.arange(resolution) + 0.5) * h[k] for k in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    view = np.zeros_like(pts)
    view[:, 2] = 1.0
    sigma, _ = eval_field_batch(tw, pts, view, config)
    alpha = 1.0 - np.exp(-sigma.astype(np.float64) * float(h[0]))
    return DensityGrid(resolution, tuple(tuple(b) for b in bounds),
                       alpha.reshape((resolution,) * 3))


def _dilate(mask, steps):
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:, :, :] |= out[:-1, :, :]
        grown[:-1, :, :] |= out[1:, :, :]
        grown[:, 1:, :] |= out[:, :-1, :]
        grown[:, :-1, :] |= out[:, 1:, :]
        grown[:, :, 1:] |= out[:, :, :-1]
        grown[:, :, :-1] |= out[:, :, 1:]
        out = grown
    return out


def fill_enclosed_cavities(grid: DensityGrid, iso=0.5, passable=None,
                           margin=2) -> DensityGrid:
    """Binarize inside/outside by reachability from the grid boundary.

    Training rays never see past an opaque surface, so a field's interior
    density is unconstrained and ragged; raw iso-extraction emits spurious
    bubble walls inside the object.  Cells are traversable when their
    occupancy is below `passable` (default iso/10: trained empty space sits
    orders of magnitude lower, while leftover interior crusts do not); cells
    within `margin` cells of reachable space keep their true values so the
    genuine wall interpolates untouched, and everything deeper is made solid.

    Assumes radiance-field-like occupancy (empty space strictly empty); not
    meaningful for generic smooth scalar fields.
    """
    passable = iso / 10.0 if passable is None else passable
    empty = grid.values < passable
    reachable = np.zeros_like(empty)
    reachable[0, :, :] = empty[0, :, :]
    reachable[-1, :, :] |= empty[-1, :, :]
    reachable[:, 0, :] |= empty[:, 0, :]
    reachable[:, -1, :] |= empty[:, -1, :]
    reachable[:, :, 0] |= empty[:, :, 0]
    reachable[:, :, -1] |= empty[:, :, -1]
    while True:
        grow = _dilate(reachable, 1)
        grow &= empty
        if np.array_equal(grow, reachable):
            break
        reachable = grow
    keep_true = _dilate(reachable, margin)
    values = np.where(keep_true, grid.values, 1.0)
    return DensityGrid(grid.resolution, grid.bounds, values)


def marching_cubes(grid: DensityGrid, iso=0.5) -> TriangleMeshWithColors:
    """Iso-surface of the occupancy grid; vertices shared across cube edges.

    An empty surface yields an empty mesh (not an error).  Vertex positions
    are linearly interpolated along crossed edges; degenerate (zero-area)
    faces are dropped.
    """
    if not (0.0 < iso < 1.0):
        raise ValueError("iso level must lie in (0, 1)")
    vals = grid.values
    r = grid.resolution
    axes, _ = grid.cell_centers_1d()

    # case index per cube: bit i set when corner i is below the iso level
    case = np.zeros((r - 1,) * 3, dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        corner = vals[dx:r - 1 + dx, dy:r - 1 + dy, dz:r - 1 + dz]
        case |= (corner < iso).astype(np.int32) << bit
    cubes = np.argwhere((case != 0) & (case != 255))

    verts, vert_ids = [], {}
    faces = []
    for i, j, k in cubes:
        c = int(case[i, j, k])
        tris = TRI_TABLE[c]
        if not tris:
            continue
        local = {}
        for e in set(tris):
            ca, cb = _EDGES[e]
            pa = _CORNERS[ca] + (i, j, k)
            pb = _CORNERS[cb] + (i, j, k)
            key = (min(tuple(pa), tuple(pb)), max(tuple(pa), tuple(pb)))
            vid = vert_ids.get(key)
            if vid is None:
                va = float(vals[tuple(pa)])
                vb = float(vals[tuple(pb)])
                t = 0.5 if vb == va else (iso - va) / (vb - va)
                pos_a = np.array([axes[d][pa[d]] for d in range(3)])
                pos_b = np.array([axes[d][pb[d]] for d in range(3)])
                vid = len(verts)
                verts.append(pos_a + t * (pos_b - pos_a))
                vert_ids[key] = vid
            local[e] = vid
        for t0 in range(0, len(tris), 3):
            # with above-iso interiors this table order leaves face normals
            # pointing toward the outside (verified on the analytic sphere)
            faces.append((local[tris[t0]], local[tris[t0 + 1]], local[tris[t0 + 2]]))

    if not faces:
        return TriangleMeshWithColors(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = TriangleMeshWithColors(np.array(verts), np.array(faces, dtype=np.int64))
    keep = mesh.face_areas() > 1e-12
    mesh.faces = mesh.faces[keep]
    return mesh


def colorize_vertices(tw: TargetWeights, mesh: TriangleMeshWithColors,
                      config: FieldConfig) -> TriangleMeshWithColors:
    """Query the field color per vertex, looking at the surface from outside."""
    if mesh.is_empty:
        mesh.colors = np.zeros((len(mesh.vertices), 3))
        return mesh
    view = -mesh.vertex_normals()
    _, rgb = eval_field_batch(tw, mesh.vertices, view, config)
    mesh.colors = np.clip(rgb.astype(np.float64), 0.0, 1.0)
    return mesh


def extract_colored_mesh(tw: TargetWeights, config: FieldConfig, resolution=64,
                         iso=0.5, bounds=DEFAULT_BOUNDS,
                         fill_cavities=True) -> TriangleMeshWithColors:
    grid = density_grid(tw, resolution, config, bounds)
    if fill_cavities:
        grid = fill_enclosed_cavities(grid, iso)
    return colorize_vertices(tw, marching_cubes(grid, iso), config)


# ---------------------------------------------------------------------------
# Export / import.
# ---------------------------------------------------------------------------

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_PLY_FACE = np.dtype([("n", "u1"), ("a", "<i4"), ("b", "<i4"), ("c", "<i4")])


def export_mesh(mesh: TriangleMeshWithColors, path, fmt=None):
    """Write PLY (binary little-endian, uchar colors) or OBJ (xyzrgb lines)."""
    fmt = fmt or ("obj" if str(path).lower().endswith(".obj") else "ply")
    colors = mesh.colors
    if colors is None:
        colors = np.full((len(mesh.vertices), 3), 0.5)
    q = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    if fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            f"element face {len(mesh.faces)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        vrec = np.empty(len(mesh.vertices), dtype=_PLY_VERTEX)
        for i, name in enumerate(("x", "y", "z")):
            vrec[name] = mesh.vertices[:, i].astype("<f4")
        for i, name in enumerate(("red", "green", "blue")):
            vrec[name] = q[:, i]
        frec = np.empty(len(mesh.faces), dtype=_PLY_FACE)
        frec["n"] = 3
        for i, name in enumerate(("a", "b", "c")):
            frec[name] = mesh.faces[:, i].astype("<i4")
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(vrec.tobytes())
            f.write(frec.tobytes())
    elif fmt == "obj":
        with open(path, "w") as f:
            for v, c in zip(mesh.vertices, colors):
                f.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g} "
                        f"{c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            for a, b, c3 in mesh.faces + 1:
                f.write(f"f {a} {b} {c3}\n")
    else:
        raise ValueError(f"unknown mesh format '{fmt}' (expected ply or obj)")


def import_mesh(path) -> TriangleMeshWithColors:
    """Round-trip reader for the two formats written by export_mesh."""
    if str(path).lower().endswith(".obj"):
        vs, cs, fs = [], [], []
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    vs.append([float(x) for x in parts[1:4]])
                    cs.append([float(x) for x in parts[4:7]] if len(parts) >= 7
                              else [0.5, 0.5, 0.5])
                elif parts[0] == "f":
                    fs.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        return TriangleMeshWithColors(np.array(vs).reshape(-1, 3),
                                      np.array(fs, dtype=np.int64).reshape(-1, 3),
                                      np.array(cs).reshape(-1, 3))
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: unsupported PLY format")
    nv = int(next(l.split()[-1] for l in header if l.startswith("element vertex")))
    nf = int(next(l.split()[-1] for l in header if l.startswith("element face")))
    vrec = np.frombuffer(raw, dtype=_PLY_VERTEX, count=nv, offset=end)
    frec = np.frombuffer(raw, dtype=_PLY_FACE, count=nf,
                         offset=end + nv * _PLY_VERTEX.itemsize)
    verts = np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1).astype(np.float64)
    colors = np.stack([vrec["red"], vrec["green"], vrec["blue"]], axis=1) / 255.0
    faces = np.stack([frec["a"], frec["b"], frec["c"]], axis=1).astype(np.int64)
    return TriangleMeshWithColors(verts, faces, colors)
