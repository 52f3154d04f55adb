"""Piecewise-linear finite elements for Robin problems on the half-disk B_R^+.

The weak form is

    int A Du . Dv + V u v  -  int_Gamma eta u v  =  0

for v vanishing on the arc, with u = g prescribed on the arc.  No sign
condition on eta is assumed, and no shift is added: a singular system is
reported as an error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla
from scipy.spatial import Delaunay, cKDTree

from ..coefficients import CoefficientSet, as_points
from ..errors import DomainError, SingularSystemError
from .core import Solution

# degree-5 seven-point rule on the reference triangle (barycentric coords, weights sum to 1)
_A1, _B1, _W1 = 0.0597158717897698, 0.4701420641051151, 0.1323941527885062
_A2, _B2, _W2 = 0.7974269853530873, 0.1012865073234563, 0.1259391805448271
TRI7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
TRI7_W = np.array([0.225, _W1, _W1, _W1, _W2, _W2, _W2])
# degree-2 edge-midpoint rule
TRI3_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
TRI3_W = np.full(3, 1 / 3)
GAUSS2 = (np.array([0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3)]), np.array([0.5, 0.5]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of the half-disk of radius R.

    ``flat_edges`` are the boundary edges on x2 = 0; ``arc_nodes`` the nodes
    on |x| = R (Dirichlet nodes).
    """

    nodes: np.ndarray
    elements: np.ndarray
    R: float
    h: float
    flat_edges: np.ndarray
    arc_nodes: np.ndarray

    @property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def min_angle(self) -> float:
        p = self.nodes[self.elements]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cosang = np.einsum("ni,ni->n", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cosang, -1, 1)))
        return float(np.degrees(np.min(angles)))

    def max_edge(self) -> float:
        p = self.nodes[self.elements]
        return float(max(np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1).max() for i in range(3)))

    def save(self, path) -> None:
        """Plain-text export: node list, element list, flat edges, arc nodes."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write(f"# half-disk mesh R={self.R!r} h={self.h!r}\n")
            fh.write(f"nodes {len(self.nodes)}\n")
            for x, y in self.nodes.tolist():
                fh.write(f"{x!r} {y!r}\n")
            fh.write(f"elements {len(self.elements)}\n")
            for tri in self.elements:
                fh.write(" ".join(str(int(i)) for i in tri) + "\n")
            fh.write(f"flat_edges {len(self.flat_edges)}\n")
            for a, b in self.flat_edges:
                fh.write(f"{int(a)} {int(b)}\n")
            fh.write(f"arc_nodes {len(self.arc_nodes)}\n")
            fh.write(" ".join(str(int(i)) for i in self.arc_nodes) + "\n")

    @classmethod
    def load(cls, path) -> "Mesh":
        lines = Path(path).read_text().splitlines()
        header = dict(tok.split("=") for tok in lines[0].lstrip("# ").split()[2:])
        pos = 1

        def block(kind, parse):
            nonlocal pos
            name, count = lines[pos].split()
            if name != kind:
                raise ValueError(f"expected section {kind!r}, found {name!r}")
            count = int(count)
            pos += 1
            if kind == "arc_nodes":
                rows = [int(t) for t in lines[pos].split()] if count else []
                pos += 1
                return np.array(rows, dtype=np.int64)
            rows = [parse(lines[pos + i].split()) for i in range(count)]
            pos += count
            return np.array(rows)

        nodes = block("nodes", lambda t: [float(v) for v in t]).reshape(-1, 2)
        elements = block("elements", lambda t: [int(v) for v in t]).astype(np.int64).reshape(-1, 3)
        flat = block("flat_edges", lambda t: [int(v) for v in t]).astype(np.int64).reshape(-1, 2)
        arc = block("arc_nodes", None)
        return cls(nodes, elements, float(header["R"]), float(header["h"]), flat, arc)


def halfdisk_mesh(R: float = 1.0, h: float = 0.1) -> Mesh:
    """Ring mesh: circles of radius i*R/n with ~pi r/h equal arcs each, Delaunay-triangulated."""
    if not (R > 0 and 0 < h < R):
        raise ValueError("need 0 < h < R")
    n = max(1, math.ceil(R / h))
    pts = [np.zeros((1, 2))]
    for i in range(1, n + 1):
        r = R * i / n
        m = max(2, math.ceil(math.pi * r / h))
        th = np.linspace(0.0, math.pi, m + 1)
        ring = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        ring[0] = (r, 0.0)
        ring[-1] = (-r, 0.0)
        pts.append(ring)
    nodes = np.vstack(pts)
    tri = Delaunay(nodes).simplices.astype(np.int64)
    p = nodes[tri]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    keep = np.abs(area) > 1e-14 * h * h
    tri, area = tri[keep], area[keep]
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.lexsort(tri.T[::-1])]

    on_flat = nodes[:, 1] == 0.0
    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    flat_edges = boundary[on_flat[boundary[:, 0]] & on_flat[boundary[:, 1]]]
    arc = np.flatnonzero(np.abs(np.hypot(nodes[:, 0], nodes[:, 1]) - R) <= 1e-12 * R)
    return Mesh(nodes, tri, float(R), float(h), flat_edges, arc)


def _element_gradients(mesh: Mesh):
    p = mesh.nodes[mesh.elements]
    area = mesh.areas
    # gradients of the barycentric coordinates
    g = np.empty((len(p), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / (2 * area)
        g[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / (2 * area)
    return g, area


def _bary_points(mesh: Mesh, bary: np.ndarray) -> np.ndarray:
    p = mesh.nodes[mesh.elements]
    return np.einsum("qk,nkd->nqd", bary, p)


def assemble(cs: CoefficientSet, mesh: Mesh) -> sparse.csr_matrix:
    """Global matrix of a(u, v) in the nodal basis (duplicates summed in fixed order)."""
    g, area = _element_gradients(mesh)
    ne = len(area)
    xq = _bary_points(mesh, TRI3_BARY).reshape(-1, 2)
    A = np.asarray(cs.A(xq)).reshape(ne, len(TRI3_W), 2, 2)
    A_mean = np.einsum("q,nqij->nij", TRI3_W, A)
    K = area[:, None, None] * np.einsum("nai,nij,nbj->nab", g, A_mean, g)

    xq7 = _bary_points(mesh, TRI7_BARY).reshape(-1, 2)
    V = np.asarray(cs.V(xq7)).reshape(ne, len(TRI7_W))
    Mloc = area[:, None, None] * np.einsum("q,nq,qa,qb->nab", TRI7_W, V, TRI7_BARY, TRI7_BARY)
    loc = K + Mloc
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    vals = loc.ravel()

    if len(mesh.flat_edges):
        s, w = GAUSS2
        a, b = mesh.nodes[mesh.flat_edges[:, 0]], mesh.nodes[mesh.flat_edges[:, 1]]
        length = np.linalg.norm(b - a, axis=1)
        phi = np.stack([1 - s, s], axis=1)
        xe = (a[:, None, :] * (1 - s)[None, :, None] + b[:, None, :] * s[None, :, None]).reshape(-1, 2)
        xe[:, 1] = 0.0
        eta = np.asarray(cs.eta(xe)).reshape(len(a), 2)
        R = -length[:, None, None] * np.einsum("q,nq,qa,qb->nab", w, eta, phi, phi)
        rows = np.concatenate([rows, np.repeat(mesh.flat_edges, 2, axis=1).ravel()])
        cols = np.concatenate([cols, np.tile(mesh.flat_edges, (1, 2)).ravel()])
        vals = np.concatenate([vals, R.ravel()])
    n = len(mesh.nodes)
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


class _Locator:
    """Point location by nearest centroids plus barycentric tests."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        p = mesh.nodes[mesh.elements]
        self.tree = cKDTree(p.mean(axis=1))
        self.T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.Tinv = np.linalg.inv(self.T)
        self.origin = p[:, 0]

    def bary(self, elems, x):
        l12 = np.einsum("nij,nj->ni", self.Tinv[elems], x - self.origin[elems])
        return np.column_stack([1 - l12.sum(axis=1), l12])

    def locate(self, x: np.ndarray, tol: float = 1e-10, strict: bool = True):
        k = min(12, len(self.mesh.elements))
        dist, cand = self.tree.query(x, k=k)
        cand, dist = np.atleast_2d(cand), np.atleast_2d(dist)
        elem = np.full(len(x), -1)
        lam = np.zeros((len(x), 3))
        for j in range(k):
            todo = elem < 0
            if not np.any(todo):
                break
            e = cand[todo, j]
            b = self.bary(e, x[todo])
            ok = b.min(axis=1) >= -tol
            idx = np.flatnonzero(todo)[ok]
            elem[idx], lam[idx] = e[ok], b[ok]
        # brute force only for points near the mesh that the candidate list missed
        for i in np.flatnonzero((elem < 0) & (dist[:, 0] <= 2 * self.mesh.max_edge())):
            b = self.bary(np.arange(len(self.mesh.elements)), np.repeat(x[i:i + 1], len(self.mesh.elements), 0))
            best = int(np.argmax(b.min(axis=1)))
            if b[best].min() >= -tol:
                elem[i], lam[i] = best, b[best]
        if strict and np.any(elem < 0):
            bad = x[elem < 0][0]
            raise DomainError(f"point {bad.tolist()} lies outside the mesh")
        return elem, lam


def fem_solution(mesh: Mesh, cs: CoefficientSet, u_nodes: np.ndarray, name: str = "fem",
                 residual: float | None = None) -> Solution:
    g, _ = _element_gradients(mesh)
    elem_grad = np.einsum("nai,na->ni", g, u_nodes[mesh.elements])
    loc = _Locator(mesh)
    snap = 1e-12

    def value(x):
        x = as_points(x, 2)
        e, lam = loc.locate(x)
        vals = np.einsum("na,na->n", lam, u_nodes[mesh.elements[e]])
        top = lam.argmax(axis=1)
        at_node = lam.max(axis=1) >= 1 - snap
        vals[at_node] = u_nodes[mesh.elements[e[at_node], top[at_node]]]
        return vals

    def grad(x):
        e, _ = loc.locate(as_points(x, 2))
        return elem_grad[e]

    def inside(x):
        e, _ = loc.locate(as_points(x, 2), strict=False)
        return e >= 0

    return Solution(value=value, grad=grad, coefficients=cs, name=name, provenance="fem",
                    params={"h": mesh.h, "R": mesh.R}, h=mesh.h, mesh=mesh, residual=residual,
                    inside=inside)


def solve_robin_fem(cs: CoefficientSet, mesh: Mesh, g: Callable[[np.ndarray], np.ndarray],
                    name: str = "fem") -> Solution:
    """P1 Galerkin solution with Dirichlet data g on the arc and the Robin condition on Gamma."""
    K = assemble(cs, mesh)
    n = len(mesh.nodes)
    u = np.zeros(n)
    arc = mesh.arc_nodes
    u[arc] = np.asarray(g(mesh.nodes[arc]), dtype=float)
    free = np.setdiff1d(np.arange(n), arc)
    Kff = K[free][:, free].tocsc()
    rhs = -K[free][:, arc] @ u[arc]
    try:
        lu = spla.splu(Kff)
    except RuntimeError as exc:
        raise SingularSystemError(f"finite-element system is singular: {exc}") from None
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("finite-element solve produced non-finite values")
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-13 * diag.max():
        raise SingularSystemError("finite-element system is numerically singular")
    u[free] = sol
    res = np.linalg.norm(Kff @ sol - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny)
    return fem_solution(mesh, cs, u, name=name, residual=float(res) if np.linalg.norm(rhs) else 0.0)


def l2_error(sol: Solution, truth: Callable[[np.ndarray], np.ndarray]) -> float:
    """||u_h - u||_{L^2} over the mesh with the seven-point rule per element."""
    mesh = sol.mesh
    area = mesh.areas
    xq = _bary_points(mesh, TRI7_BARY)
    uh = np.einsum("qa,na->nq", TRI7_BARY, sol_nodal_values(sol)[mesh.elements])
    ut = np.asarray(truth(xq.reshape(-1, 2))).reshape(uh.shape)
    err2 = area * np.einsum("q,nq->n", TRI7_W, (uh - ut) ** 2)
    return math.sqrt(math.fsum(err2.tolist()))


def sol_nodal_values(sol: Solution) -> np.ndarray:
    return np.asarray(sol.value(sol.mesh.nodes))


def export_node_values(sol: Solution, path) -> None:
    """CSV with columns x1,x2,u at the mesh nodes."""
    vals = sol_nodal_values(sol)
    with Path(path).open("w") as fh:
        fh.write("x1,x2,u\n")
        for (x, y), v in zip(sol.mesh.nodes.tolist(), vals.tolist()):
            fh.write(f"{x!r},{y!r},{v!r}\n")


def convergence_study(cs: CoefficientSet, truth: Callable, hs=(0.1, 0.05, 0.025, 0.0125), R: float = 1.0):
    """L^2 errors and successive ratios err(h)/err(h/2) for Dirichlet data from ``truth``."""
    errs = []
    for h in hs:
        sol = solve_robin_fem(cs, halfdisk_mesh(R, h), truth)
        errs.append(l2_error(sol, truth))
    errs = np.array(errs)
    return errs, errs[:-1] / errs[1:]
