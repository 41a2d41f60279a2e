"""Geodesic triangular grid on the unit sphere for the velocity-space finite volumes.

Icosahedral base, midpoint 4-subdivision with radial projection; cell midpoints
are spherical circumcenters, which lie on the perpendicular-bisector great
circle of every cell edge. As a consequence the arc connecting two adjacent
midpoints crosses their shared edge exactly at the edge midpoint, which is
what the flux discretization assumes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import FiberFieldError

_PHI = (1.0 + math.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array(
    [
        (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
        (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
        (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
    ],
    dtype=float,
)

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def _normalize_rows(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _arc(a, b):
    """Great-circle distance between unit vectors (rowwise)."""
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def _spherical_area(a, b, c):
    """Solid angle of the spherical triangle (a, b, c), unit-vector rows."""
    num = np.abs(np.sum(a * np.cross(b, c), axis=-1))
    den = 1.0 + np.sum(a * b, axis=-1) + np.sum(b * c, axis=-1) + np.sum(c * a, axis=-1)
    return 2.0 * np.arctan2(num, den)


@dataclass
class GridReport:
    """Diagnostics from validate_grid; all entries are max violations."""

    cell_count_ok: bool
    area_defect: float
    midpoint_norm: float
    edge_mid_norm: float
    normal_tangency: float
    normal_antisymmetry: float
    split_defect: float
    closure: float
    closure_bound: float

    def ok(self, tol=1e-9):
        return (
            self.cell_count_ok
            and self.area_defect < tol
            and self.midpoint_norm < tol
            and self.edge_mid_norm < tol
            and self.normal_tangency < tol
            and self.normal_antisymmetry < tol
            and self.split_defect < tol
            and self.closure < self.closure_bound
        )


@dataclass
class GeodesicGrid:
    """Triangulated sphere with the metric bookkeeping used by the FV solver.

    Immutable after construction. Arrays:
      vertices (nV,3), cells (nC,3) vertex indices,
      mid (nC,3) spherical circumcenters, area (nC,),
      edge_cells (nE,2), edge_verts (nE,2), edge_len (nE,), edge_mid (nE,3),
      edge_normal (nE,3) outward from edge_cells[:,0], tangent to the sphere,
      h1/h2 (nE,) arc midpoint-to-edge splits, h (nE,) = arc(mid_i, mid_j).
    """

    level: int
    vertices: np.ndarray
    cells: np.ndarray
    mid: np.ndarray
    area: np.ndarray
    edge_cells: np.ndarray
    edge_verts: np.ndarray
    edge_len: np.ndarray
    edge_mid: np.ndarray
    edge_normal: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    h: np.ndarray

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def n_edges(self):
        return self.edge_cells.shape[0]

    def cell_diameter(self):
        v = self.vertices
        c = self.cells
        return np.max(
            [_arc(v[c[:, 0]], v[c[:, 1]]), _arc(v[c[:, 1]], v[c[:, 2]]), _arc(v[c[:, 2]], v[c[:, 0]])],
            axis=0,
        )

    def dump_csv(self, cells_path, edges_path):
        with open(cells_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "mid1", "mid2", "mid3", "area"])
            for i in range(self.n_cells):
                w.writerow([i, *(f"{v:.17g}" for v in self.mid[i]), f"{self.area[i]:.17g}"])
        with open(edges_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_i", "cell_j", "length", "n1", "n2", "n3"])
            for e in range(self.n_edges):
                w.writerow(
                    [
                        self.edge_cells[e, 0],
                        self.edge_cells[e, 1],
                        f"{self.edge_len[e]:.17g}",
                        *(f"{v:.17g}" for v in self.edge_normal[e]),
                    ]
                )


def _subdivide(vertices, faces):
    """Split every triangle into 4; new edge-midpoint vertices projected radially."""
    verts = list(vertices)
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key in cache:
            return cache[key]
        m = verts[i] + verts[j]
        m = m / np.linalg.norm(m)
        verts.append(m)
        cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for (a, b, c) in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    return np.array(verts), out


def build_geodesic_grid(level: int) -> GeodesicGrid:
    """Construct the level-times subdivided icosahedral grid (20 * 4^level cells)."""
    if level < 0:
        raise FiberFieldError("subdivision level must be >= 0")
    if level > 7:
        raise FiberFieldError("subdivision level > 7 is out of the supported range")
    vertices = _normalize_rows(_ICO_VERTS.copy())
    faces = list(_ICO_FACES)
    for _ in range(level):
        vertices, faces = _subdivide(vertices, faces)
    cells = np.array(faces, dtype=np.int64)

    a, b, c = vertices[cells[:, 0]], vertices[cells[:, 1]], vertices[cells[:, 2]]
    area = _spherical_area(a, b, c)

    # spherical circumcenter: normal of the through-vertices plane, oriented into the cell
    mid = np.cross(b - a, c - a)
    mid = _normalize_rows(mid)
    flip = np.sum(mid * (a + b + c), axis=-1) < 0
    mid[flip] *= -1.0
    if np.any(np.abs(np.sum(mid * a, axis=-1) - np.sum(mid * b, axis=-1)) > 1e-12):
        raise FiberFieldError("degenerate triangle: circumcenter not equidistant from vertices")

    # edges: each unordered vertex pair shared by exactly two cells
    edge_map = {}
    for ci, (va, vb, vc) in enumerate(cells):
        for (p, q) in ((va, vb), (vb, vc), (vc, va)):
            key = (p, q) if p < q else (q, p)
            edge_map.setdefault(key, []).append(ci)
    if any(len(v) != 2 for v in edge_map.values()):
        raise FiberFieldError("mesh is not a closed 2-manifold: edge not shared by exactly 2 cells")

    keys = sorted(edge_map.keys())
    n_e = len(keys)
    edge_cells = np.empty((n_e, 2), dtype=np.int64)
    edge_verts = np.array(keys, dtype=np.int64)
    edge_len = np.empty(n_e)
    edge_mid = np.empty((n_e, 3))
    edge_normal = np.empty((n_e, 3))
    h1 = np.empty(n_e)
    h2 = np.empty(n_e)
    h = np.empty(n_e)
    for e, key in enumerate(keys):
        ci, cj = edge_map[key]
        p, q = vertices[key[0]], vertices[key[1]]
        tm = (p + q) / np.linalg.norm(p + q)
        nrm = np.cross(p, q)
        nrm = nrm / np.linalg.norm(nrm)
        # orient outward from cell ci: toward the neighbor midpoint
        if np.dot(nrm, mid[cj] - mid[ci]) < 0:
            nrm = -nrm
        edge_cells[e] = (ci, cj)
        edge_len[e] = math.atan2(np.linalg.norm(np.cross(p, q)), float(np.dot(p, q)))
        edge_mid[e] = tm
        edge_normal[e] = nrm
        h1[e] = math.atan2(np.linalg.norm(np.cross(mid[ci], tm)), float(np.dot(mid[ci], tm)))
        h2[e] = math.atan2(np.linalg.norm(np.cross(tm, mid[cj])), float(np.dot(tm, mid[cj])))
        h[e] = math.atan2(np.linalg.norm(np.cross(mid[ci], mid[cj])), float(np.dot(mid[ci], mid[cj])))
        if abs(h1[e] + h2[e] - h[e]) > 1e-9:
            raise FiberFieldError("midpoint connector does not cross the edge at its midpoint")

    return GeodesicGrid(
        level=level,
        vertices=vertices,
        cells=cells,
        mid=mid,
        area=area,
        edge_cells=edge_cells,
        edge_verts=edge_verts,
        edge_len=edge_len,
        edge_mid=edge_mid,
        edge_normal=edge_normal,
        h1=h1,
        h2=h2,
        h=h,
    )


def _cell_position_integral(grid, depth):
    """Quadrature of int_T x dA per cell via `depth` rounds of 4-subdivision."""
    a = grid.vertices[grid.cells[:, 0]]
    b = grid.vertices[grid.cells[:, 1]]
    c = grid.vertices[grid.cells[:, 2]]
    tri = np.stack([a, b, c], axis=1)  # (nC, 3, 3)
    owner = np.arange(grid.n_cells)
    for _ in range(depth):
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        ab = _normalize_rows(a + b)
        bc = _normalize_rows(b + c)
        ca = _normalize_rows(c + a)
        tri = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ],
            axis=0,
        )
        owner = np.concatenate([owner] * 4)
    areas = _spherical_area(tri[:, 0], tri[:, 1], tri[:, 2])
    centers = _normalize_rows(tri.sum(axis=1))
    out = np.zeros((grid.n_cells, 3))
    np.add.at(out, owner, areas[:, None] * centers)
    return out


def validate_grid(grid: GeodesicGrid) -> GridReport:
    """Recompute all grid invariants and report max violations (never raises)."""
    n_expected = 20 * 4**grid.level
    area_defect = abs(float(np.sum(grid.area)) - 4.0 * math.pi)
    midpoint_norm = float(np.max(np.abs(np.linalg.norm(grid.mid, axis=-1) - 1.0)))
    edge_mid_norm = float(np.max(np.abs(np.linalg.norm(grid.edge_mid, axis=-1) - 1.0)))
    normal_tangency = float(np.max(np.abs(np.sum(grid.edge_normal * grid.edge_mid, axis=-1))))

    # antisymmetry: recompute the outward normal from each side's geometry and
    # compare with the stored one (detects flipped normals)
    ci = grid.edge_cells[:, 0]
    cj = grid.edge_cells[:, 1]
    p = grid.vertices[grid.edge_verts[:, 0]]
    q = grid.vertices[grid.edge_verts[:, 1]]
    raw = _normalize_rows(np.cross(p, q))
    to_j = grid.mid[cj] - grid.mid[ci]
    n_from_i = raw * np.sign(np.sum(raw * to_j, axis=-1))[:, None]
    n_from_j = raw * np.sign(np.sum(raw * (-to_j), axis=-1))[:, None]
    antisym = float(
        max(
            np.max(np.linalg.norm(grid.edge_normal - n_from_i, axis=-1)),
            np.max(np.linalg.norm(grid.edge_normal + n_from_j, axis=-1)),
        )
    )

    split_defect = float(np.max(np.abs(grid.h1 + grid.h2 - grid.h)))

    # discrete Stokes: the edge-weighted outward normals of a spherical cell
    # close up to the exact curvature term -2 int_T x dA. The integral is
    # evaluated by independent subdivision quadrature, so a wrong length or a
    # flipped normal shows up as an O(edge) closure defect.
    closure_vec = np.zeros((grid.n_cells, 3))
    np.add.at(closure_vec, ci, grid.edge_len[:, None] * grid.edge_normal)
    np.add.at(closure_vec, cj, -grid.edge_len[:, None] * grid.edge_normal)
    closure_vec += 2.0 * _cell_position_integral(grid, depth=max(3, 6 - grid.level))
    diam = grid.cell_diameter()
    closure = float(np.max(np.linalg.norm(closure_vec, axis=-1) / diam))
    closure_bound = 1e-2

    return GridReport(
        cell_count_ok=grid.n_cells == n_expected,
        area_defect=area_defect,
        midpoint_norm=midpoint_norm,
        edge_mid_norm=edge_mid_norm,
        normal_tangency=normal_tangency,
        normal_antisymmetry=antisym,
        split_defect=split_defect,
        closure=closure,
        closure_bound=closure_bound,
    )
