"""Structured triangulation of the unit square and P1 finite-element matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateElement, InvalidMesh, OutOfDomain

_AREA_TOL = 1e-14


@dataclass(frozen=True)
class Mesh:
    """Regular right-triangle mesh covering ``(0,1)^2`` plus an extension band.

    Nodes are stored row-major: node ``j * n_cols + i`` sits at
    ``(x0 + i*hx, y0 + j*hy)``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    interior: np.ndarray
    n_cols: int
    n_rows: int
    hx: float
    hy: float
    origin: tuple[float, float]
    ext_cells: tuple[int, int]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, x0 + (self.n_cols - 1) * self.hx, y0, y0 + (self.n_rows - 1) * self.hy

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def build_regular_mesh(nx: int, ny: int, extension: float = 0.2) -> Mesh:
    """Build an ``nx`` by ``ny`` node grid on the unit square, extended by a band.

    ``extension`` is a fraction of the domain width; it is rounded to a whole
    number of grid cells so that the unit-square boundary lies on mesh edges.
    """
    if nx < 2 or ny < 2:
        raise InvalidMesh(f"need at least 2 nodes per side, got {nx}x{ny}")
    if extension < 0:
        raise InvalidMesh(f"extension must be nonnegative, got {extension}")
    hx = 1.0 / (nx - 1)
    hy = 1.0 / (ny - 1)
    ex = int(round(extension / hx))
    ey = int(round(extension / hy))
    n_cols = nx + 2 * ex
    n_rows = ny + 2 * ey
    x0, y0 = -ex * hx, -ey * hy

    ii, jj = np.meshgrid(np.arange(n_cols), np.arange(n_rows))
    ii = ii.ravel()
    jj = jj.ravel()
    nodes = np.column_stack([(ii - ex) * hx, (jj - ey) * hy])
    interior = (ii >= ex) & (ii <= ex + nx - 1) & (jj >= ey) & (jj <= ey + ny - 1)

    ci, cj = np.meshgrid(np.arange(n_cols - 1), np.arange(n_rows - 1))
    ci = ci.ravel()
    cj = cj.ravel()
    n00 = cj * n_cols + ci
    n10 = n00 + 1
    n01 = n00 + n_cols
    n11 = n01 + 1
    # lower-right then upper-left triangle of each cell, counter-clockwise
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.empty((2 * len(n00), 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    return Mesh(
        nodes=nodes,
        triangles=triangles,
        interior=interior,
        n_cols=n_cols,
        n_rows=n_rows,
        hx=hx,
        hy=hy,
        origin=(x0, y0),
        ext_cells=(ex, ey),
    )


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass ``C``, stiffness ``G`` and dual-cell weights inside the unit square."""

    C: sp.csc_matrix
    G: sp.csc_matrix
    node_weights: np.ndarray
    GCiG: sp.csc_matrix = field(repr=False)

    @property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()


def assemble_fem(mesh: Mesh) -> FemMatrices:
    areas = mesh.triangle_areas()
    if np.any(areas <= _AREA_TOL):
        bad = int(np.argmin(areas))
        raise DegenerateElement(f"triangle {bad} has area {areas[bad]:.3e}")
    tri = mesh.triangles
    n = mesh.n_nodes

    # consistent mass row sums are area/3 per vertex
    c = np.bincount(tri.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=n)

    p = mesh.nodes[tri]
    # edge opposite vertex k, rotated: grad(phi_k) = rot90(e_k) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    local = np.einsum("tkd,tld->tkl", e, e) / (4.0 * areas)[:, None, None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G.sum_duplicates()
    G = (0.5 * (G + G.T)).tocsc()

    centroids = p.mean(axis=1)
    inside = np.all((centroids > 0.0) & (centroids < 1.0), axis=1)
    w = np.bincount(
        tri[inside].ravel(), weights=np.repeat(areas[inside] / 3.0, 3), minlength=n
    )

    C = sp.diags(c).tocsc()
    GCiG = (G @ sp.diags(1.0 / c) @ G).tocsc()
    GCiG = (0.5 * (GCiG + GCiG.T)).tocsc()
    return FemMatrices(C=C, G=G, node_weights=w, GCiG=GCiG)


def locate(mesh: Mesh, locations) -> tuple[np.ndarray, np.ndarray]:
    """Return containing triangle node indices and barycentric weights, shape (n, 3)."""
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    if loc.shape[1] != 2:
        raise OutOfDomain(f"locations must be (n, 2), got {loc.shape}")
    bad = ~np.all((loc >= 0.0) & (loc <= 1.0), axis=1)
    if np.any(bad):
        raise OutOfDomain(f"{int(bad.sum())} location(s) outside the unit square, e.g. {loc[bad][0]}")
    x0, y0 = mesh.origin
    fx = (loc[:, 0] - x0) / mesh.hx
    fy = (loc[:, 1] - y0) / mesh.hy
    ci = np.clip(np.floor(fx).astype(np.int64), 0, mesh.n_cols - 2)
    cj = np.clip(np.floor(fy).astype(np.int64), 0, mesh.n_rows - 2)
    a = fx - ci
    b = fy - cj
    n00 = cj * mesh.n_cols + ci
    n10 = n00 + 1
    n01 = n00 + mesh.n_cols
    n11 = n01 + 1
    lower = b <= a
    idx = np.where(lower[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n11, n01]))
    wts = np.where(
        lower[:, None],
        np.column_stack([1.0 - a, a - b, b]),
        np.column_stack([1.0 - b, a, b - a]),
    )
    return idx, wts


def projector(mesh: Mesh, locations) -> sp.csr_matrix:
    """Sparse (n_locations, n_nodes) matrix of barycentric interpolation weights."""
    idx, wts = locate(mesh, locations)
    m = len(idx)
    A = sp.csr_matrix(
        (wts.ravel(), (np.repeat(np.arange(m), 3), idx.ravel())), shape=(m, mesh.n_nodes)
    )
    A.eliminate_zeros()
    return A
