"""Robust (L1) rotation averaging over a pose graph.

Absolute rotations are world-to-camera. An edge ``(i, j)`` carries
``R_ij ~ R_j @ R_i.T``; its residual is the axis-angle vector
``w_ij = log(R_j.T @ R_ij @ R_i)``. Perturbing ``R_i <- R_i @ exp(a_i)`` gives
the linear model ``a_j - a_i = w_ij``, which is solved in the L1 sense by
iteratively reweighted least squares.
"""
from __future__ import annotations

import heapq
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DisconnectedGraph
from .geometry import so3_exp, so3_log
from .matching import PoseGraphEdge

IRLS_EPS = 1e-5
NEAR_PI = math.radians(170.0)


@dataclass
class PoseGraph:
    nodes: list[str]
    edges: list[PoseGraphEdge] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = list(dict.fromkeys(self.nodes))
        known = set(self.nodes)
        seen = set()
        for e in self.edges:
            if e.cam_i == e.cam_j:
                raise ValueError(f"self-loop on {e.cam_i}")
            if e.cam_i not in known or e.cam_j not in known:
                raise ValueError(f"edge {e.cam_i}-{e.cam_j} references an unknown camera")
            key = frozenset((e.cam_i, e.cam_j))
            if key in seen:
                raise ValueError(f"duplicate edge {e.cam_i}-{e.cam_j}")
            seen.add(key)

    def adjacency(self) -> dict[str, list[tuple[str, int]]]:
        adj = {n: [] for n in self.nodes}
        for k, e in enumerate(self.edges):
            adj[e.cam_i].append((e.cam_j, k))
            adj[e.cam_j].append((e.cam_i, k))
        return adj

    def components(self) -> list[list[str]]:
        adj = self.adjacency()
        seen, comps = set(), []
        for start in self.nodes:
            if start in seen:
                continue
            comp, stack = [], [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            order = {n: i for i, n in enumerate(self.nodes)}
            comps.append(sorted(comp, key=order.__getitem__))
        return comps

    def is_connected(self) -> bool:
        return len(self.nodes) <= 1 or len(self.components()) == 1

    def subgraph(self, nodes) -> "PoseGraph":
        keep = set(nodes)
        return PoseGraph([n for n in self.nodes if n in keep],
                         [e for e in self.edges if e.cam_i in keep and e.cam_j in keep])

    def largest_component(self) -> "PoseGraph":
        if not self.nodes:
            return self
        # ties go to the component appearing first in node order
        best = max(self.components(), key=len)
        return self.subgraph(best)

    def root(self) -> str:
        """Highest-degree camera; ties broken by node order."""
        deg = defaultdict(int)
        for e in self.edges:
            deg[e.cam_i] += 1
            deg[e.cam_j] += 1
        return max(self.nodes, key=lambda n: (deg[n], -self.nodes.index(n)))


@dataclass
class RotationSet:
    rotations: dict[str, np.ndarray]
    gauge: str

    def __post_init__(self):
        if self.gauge not in self.rotations:
            raise ValueError(f"gauge camera {self.gauge!r} has no rotation")
        for cam, R in self.rotations.items():
            R = np.asarray(R, dtype=np.float64)
            if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise ValueError(f"rotation of {cam!r} is not on SO(3)")
            self.rotations[cam] = R
        if not np.array_equal(self.rotations[self.gauge], np.eye(3)):
            raise ValueError("gauge rotation must be the identity")

    def __getitem__(self, cam: str) -> np.ndarray:
        return self.rotations[cam]

    def __len__(self):
        return len(self.rotations)

    def ids(self) -> list[str]:
        return list(self.rotations)

    def stack(self, ids=None) -> np.ndarray:
        return np.array([self.rotations[c] for c in (ids or self.ids())])


@dataclass
class SolveReport:
    edges: list[tuple[str, str]]
    residuals_deg: np.ndarray
    weights: np.ndarray
    iterations: int
    converged: bool
    history: list[list[float]]  # objective per outer step, one list per loss phase


def _orient(e: PoseGraphEdge, src: str) -> np.ndarray:
    """Relative rotation taking ``src``'s frame to the other endpoint's frame."""
    return e.relative_rotation if e.cam_i == src else e.relative_rotation.T


def _tree_rotations(graph: PoseGraph, root: str, keys: dict[int, tuple]) -> dict[str, np.ndarray]:
    """Compose rotations outward from ``root`` along the tree that greedily takes the smallest key."""
    order = {n: i for i, n in enumerate(graph.nodes)}
    adj = graph.adjacency()
    rot = {root: np.eye(3)}
    heap = []

    def push(u):
        for v, k in adj[u]:
            if v not in rot:
                heapq.heappush(heap, (keys[k], k, order[v], u, v))

    push(root)
    while heap:
        _, k, _, u, v = heapq.heappop(heap)
        if v in rot:
            continue
        R = _orient(graph.edges[k], u) @ rot[u]
        U, _, Vt = np.linalg.svd(R)
        rot[v] = U @ Vt
        push(v)
    return rot


def spanning_tree_init(graph: PoseGraph) -> RotationSet:
    """Compose rotations along a maximum-inlier spanning tree rooted at the highest-degree camera."""
    if not graph.nodes:
        raise DisconnectedGraph("empty pose graph")
    if not graph.is_connected():
        raise DisconnectedGraph(f"{len(graph.components())} components")
    root = graph.root()
    keys = {k: (-e.inlier_count,) for k, e in enumerate(graph.edges)}
    rot = _tree_rotations(graph, root, keys)
    return RotationSet({n: rot[n] for n in graph.nodes}, root)


def consensus_init(graph: PoseGraph, trials: int = 200, threshold_deg: float = 5.0, seed: int = 0) -> RotationSet:
    """Best of several spanning-tree initialisations, scored by edges agreeing within ``threshold_deg``.

    The first candidate is :func:`spanning_tree_init`; the others use random
    edge priorities. A tree that routes through an outlier edge misplaces a
    whole subtree, and the other edges expose it.
    """
    best = spanning_tree_init(graph)
    if len(graph.edges) < len(graph.nodes):
        return best
    ids = graph.nodes
    idx = {c: k for k, c in enumerate(ids)}
    I = np.array([idx[e.cam_i] for e in graph.edges])
    J = np.array([idx[e.cam_j] for e in graph.edges])
    Rij = np.array([e.relative_rotation for e in graph.edges])
    thr = math.radians(threshold_deg)

    def score(rot):
        R = np.array([rot[c] for c in ids])
        r = np.linalg.norm(_edge_residuals(R, I, J, Rij), axis=1)
        return (int((r < thr).sum()), -float(np.minimum(r, thr).sum()))

    best_score = score(best.rotations)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        pri = rng.random(len(graph.edges))
        rot = _tree_rotations(graph, best.gauge, {k: (p,) for k, p in enumerate(pri)})
        sc = score(rot)
        if sc > best_score:
            best_score, best = sc, RotationSet({n: rot[n] for n in ids}, best.gauge)
    return best


def _edge_residuals(R: np.ndarray, I: np.ndarray, J: np.ndarray, Rij: np.ndarray) -> np.ndarray:
    return so3_log(np.swapaxes(R[J], 1, 2) @ Rij @ R[I])


def _retract(R: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = R @ so3_exp(a)
    U, _, Vt = np.linalg.svd(out)
    return U @ Vt


def _cost(norms: np.ndarray, loss: str, scale: float) -> float:
    if loss == "l1":
        return float(norms.sum())
    if loss == "l2":
        return float((norms**2).sum())
    s2 = scale * scale
    return float((s2 * norms**2 / (s2 + norms**2)).sum())


def _weights(r: np.ndarray, loss: str, eps: float, scale: float) -> np.ndarray:
    if loss == "l1":
        return 1.0 / np.maximum(r, eps)
    if loss == "l2":
        return np.ones_like(r)
    s2 = scale * scale
    return (s2 / (s2 + r * r)) ** 2


def _solve_tangent(I, J, omega, weights, n, root):
    """Weighted least squares for ``a_j - a_i = omega`` with ``a_root = 0``."""
    m = len(I)
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([J, I]).ravel()
    vals = np.tile([1.0, -1.0], m)
    B = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    free = np.array([k for k in range(n) if k != root])
    B = B[:, free]
    lap = (B.T @ sp.diags(weights) @ B).tocsc()
    rhs = B.T @ (weights[:, None] * omega)
    a = np.zeros((n, 3))
    a[free] = splu(lap).solve(np.asarray(rhs))
    return a


def _descend(R, I, J, Rij, root, loss, max_outer, tol_rad, eps, scale, inner_iterations):
    """Outer Lie-algebraic iterations for one loss; returns rotations, residuals, weights, history."""
    n = len(R)
    omega = _edge_residuals(R, I, J, Rij)
    norms = np.linalg.norm(omega, axis=1)
    history = [_cost(norms, loss, scale)]
    weights = _weights(norms, loss, eps, scale)
    iterations, converged = 0, False
    for _ in range(max_outer):
        far = norms > NEAR_PI
        weights[far] = eps
        a = np.zeros((n, 3))
        for _ in range(inner_iterations if loss != "l2" else 1):
            a_new = _solve_tangent(I, J, omega, weights, n, root)
            r = np.linalg.norm(omega - (a_new[J] - a_new[I]), axis=1)
            weights = _weights(r, loss, eps, scale)
            weights[far] = eps
            change = np.abs(a_new - a).max()
            a = a_new
            if change < 0.1 * tol_rad:
                break
        if np.linalg.norm(a, axis=1).max() < tol_rad:
            converged = True
            break
        # halve the step until the true objective does not increase
        for _ in range(30):
            R_try = _retract(R, a)
            R_try[root] = np.eye(3)
            omega_try = _edge_residuals(R_try, I, J, Rij)
            norms_try = np.linalg.norm(omega_try, axis=1)
            cost = _cost(norms_try, loss, scale)
            if cost <= history[-1]:
                break
            a = 0.5 * a
        else:
            converged = True
            break
        R, omega, norms = R_try, omega_try, norms_try
        history.append(cost)
        iterations += 1
        if np.linalg.norm(a, axis=1).max() < tol_rad:
            converged = True
            break
    weights = _weights(norms, loss, eps, scale)
    weights[norms > NEAR_PI] = eps
    return R, norms, weights, history, iterations, converged


def l1ra_solve(
    graph: PoseGraph,
    init: RotationSet,
    max_outer: int = 100,
    tol_rad: float = 1e-6,
    eps: float = IRLS_EPS,
    robust: bool = True,
    refine: bool = True,
    refine_scale_deg: float = 5.0,
    inner_iterations: int = 50,
) -> tuple[RotationSet, SolveReport]:
    """Refine ``init`` so that all relative rotations agree in the L1 sense.

    When ``refine`` is set, the L1 solution seeds a second reweighted pass
    with a redescending (Geman-McClure) loss of scale ``refine_scale_deg``,
    which stops outlier edges from biasing well-constrained cameras. With
    ``robust=False`` every weight is fixed to one: the plain least-squares
    baseline. Hitting ``max_outer`` does not raise; ``converged`` is cleared.
    """
    if not graph.is_connected():
        raise DisconnectedGraph(f"{len(graph.components())} components")
    ids = list(graph.nodes)
    missing = [c for c in ids if c not in init.rotations]
    if missing:
        raise ValueError(f"init lacks rotations for {missing}")
    idx = {c: k for k, c in enumerate(ids)}
    root = idx[init.gauge]
    R = np.array([init.rotations[c] for c in ids])
    edge_ids = [(e.cam_i, e.cam_j) for e in graph.edges]
    if not graph.edges:
        return RotationSet(dict(zip(ids, R)), init.gauge), SolveReport([], np.zeros(0), np.zeros(0), 0, True, [[0.0]])
    I = np.array([idx[e.cam_i] for e in graph.edges])
    J = np.array([idx[e.cam_j] for e in graph.edges])
    Rij = np.array([e.relative_rotation for e in graph.edges])

    phases = [("l1", 0.0)] if robust else [("l2", 0.0)]
    if robust and refine:
        phases.append(("gm", math.radians(refine_scale_deg)))
    history, iterations, converged = [], 0, True
    for loss, scale in phases:
        R, norms, weights, hist, its, ok = _descend(
            R, I, J, Rij, root, loss, max_outer, tol_rad, eps, scale, inner_iterations
        )
        history.append(hist)
        iterations += its
        converged = converged and ok
    rs = RotationSet(dict(zip(ids, R)), init.gauge)
    return rs, SolveReport(edge_ids, np.degrees(norms), weights, iterations, converged, history)


def solve_rotations(graph: PoseGraph, robust: bool = True, seed: int = 0, **kwargs) -> tuple[RotationSet, SolveReport]:
    return l1ra_solve(graph, consensus_init(graph, seed=seed), robust=robust, **kwargs)


def write_rotations(rs: RotationSet, path) -> None:
    lines = [f"gauge {rs.gauge}"]
    for cam, R in rs.rotations.items():
        lines.append(cam + " " + " ".join(f"{v:.17g}" for v in R.ravel()))
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_rotations(path) -> RotationSet:
    rot, gauge = {}, None
    with open(os.fspath(path)) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "gauge":
                gauge = parts[1]
                continue
            rot[parts[0]] = np.array([float(v) for v in parts[1:10]]).reshape(3, 3)
    return RotationSet(rot, gauge)


def write_residuals(report: SolveReport, path) -> None:
    with open(os.fspath(path), "w") as fh:
        fh.write("cam_i,cam_j,residual_deg,weight\n")
        for (i, j), r, w in zip(report.edges, report.residuals_deg, report.weights):
            fh.write(f"{i},{j},{r:.9f},{w:.9g}\n")
