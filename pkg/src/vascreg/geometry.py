"""Curve and projection geometry: branches, cameras, curvature, tree decomposition.

All containers are immutable; their arrays are flagged read-only on construction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateCurve, DegenerateTriple, GeometryError, NonPositiveDepth

BIFURCATION = "bifurcation"
INTERIOR = "interior"
ENDPOINT = "endpoint"
OUTLIER = "outlier"
ROLES = (BIFURCATION, INTERIOR, ENDPOINT, OUTLIER)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# Rotations (axis-angle <-> matrix)
# --------------------------------------------------------------------------

def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(w) -> np.ndarray:
    """Rodrigues formula, with a Taylor expansion of the coefficients near zero."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = skew(w)
    if theta2 < 1e-12:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def matrix_to_rotvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        S = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(S[k, k])
        if axis @ vee < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * vee


def rotation_angle_between(Ra, Rb) -> float:
    """Geodesic distance on SO(3) in radians."""
    M = np.asarray(Ra).T @ np.asarray(Rb)
    # arccos is ill-conditioned near 0; use the rotation vector norm instead
    return float(np.linalg.norm(matrix_to_rotvec(M)))


def look_at(camera_center, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``camera_center`` looking at ``target``."""
    c = np.asarray(camera_center, float)
    z = np.asarray(target, float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ c


# --------------------------------------------------------------------------
# Containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera ``x ~ K [R | t] X``.

    Parameters
    ----------
    K : (3, 3) array
        Upper-triangular intrinsics, zero skew, positive diagonal.
    R : (3, 3) array
        World-to-camera rotation.
    t : (3,) array
        World-to-camera translation in mm.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = _frozen(self.K)
        R = _frozen(self.R)
        t = _frozen(self.t).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise GeometryError("K and R must be 3x3")
        if not np.allclose(np.tril(K, -1), 0.0) or K[0, 1] != 0.0:
            raise GeometryError("K must be upper-triangular with zero skew")
        if np.any(np.diag(K) <= 0):
            raise GeometryError("K must have a positive diagonal")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("R must be a proper rotation")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(t))):
            raise GeometryError("camera parameters must be finite")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def to_camera(self, X) -> np.ndarray:
        return np.asarray(X, float) @ self.R.T + self.t

    def project(self, X) -> np.ndarray:
        """Project an (n, 3) array of world points; raises on non-positive depth."""
        X = np.atleast_2d(np.asarray(X, float))
        h = self.to_camera(X) @ self.K.T
        if np.any(h[:, 2] <= 0):
            raise NonPositiveDepth("point at or behind the camera (z <= 0)")
        return h[:, :2] / h[:, 2:3]

    def pose_vector(self) -> np.ndarray:
        """K, R and t flattened row-major into 21 reals."""
        return np.concatenate([self.K.ravel(), self.R.ravel(), self.t])


@dataclass(frozen=True)
class CenterlineBranch:
    """Ordered 2D or 3D polyline with a role tag per point."""

    points: np.ndarray
    roles: tuple = None
    branch_id: int = 0
    node_ids: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise GeometryError(f"points must be (n, 2) or (n, 3), got {pts.shape}")
        n = len(pts)
        if n < 2:
            raise GeometryError("a branch needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("branch points must be finite")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise GeometryError("consecutive branch points must be distinct")
        roles = self.roles
        if roles is None:
            roles = (ENDPOINT,) + (INTERIOR,) * (n - 2) + (ENDPOINT,)
        roles = tuple(str(r) for r in roles)
        if len(roles) != n:
            raise GeometryError("one role per point required")
        bad = set(roles) - set(ROLES)
        if bad:
            raise GeometryError(f"unknown roles {sorted(bad)}")
        if ENDPOINT in roles[1:-1]:
            raise GeometryError("only the first and last points may be endpoints")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "branch_id", int(self.branch_id))
        if self.node_ids is not None:
            object.__setattr__(self, "node_ids", tuple(int(i) for i in self.node_ids))

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points) -> "CenterlineBranch":
        return CenterlineBranch(points, self.roles, self.branch_id, self.node_ids)


@dataclass(frozen=True)
class VesselTree:
    """Rooted tree of 3D nodes; ``parent[i]`` is -1 for the root only."""

    nodes: np.ndarray
    parent: np.ndarray
    radii: Optional[np.ndarray] = None

    def __post_init__(self):
        nodes = _frozen(self.nodes)
        parent = _frozen(self.parent, dtype=np.int64)
        n = len(nodes)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise GeometryError("tree nodes must be (n, 3)")
        if parent.shape != (n,):
            raise GeometryError("one parent index per node required")
        roots = np.flatnonzero(parent < 0)
        if len(roots) != 1:
            raise GeometryError(f"tree must have exactly one root, found {len(roots)}")
        if np.any(parent >= n):
            raise GeometryError("parent index out of range")
        # every node must reach the root without revisiting (acyclic + connected)
        depth = np.full(n, -1)
        depth[roots[0]] = 0
        for i in range(n):
            path = []
            j = i
            while depth[j] < 0:
                path.append(j)
                j = parent[j]
                if len(path) > n:
                    raise GeometryError("parent links contain a cycle")
            for k, node in enumerate(reversed(path)):
                depth[node] = depth[j] + k + 1
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "parent", parent)
        if self.radii is not None:
            object.__setattr__(self, "radii", _frozen(self.radii))

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(int(p), i) for i, p in enumerate(self.parent) if p >= 0]

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(len(self.nodes))]
        for i, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(i)
        return kids

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for p, c in self.edges:
            deg[p] += 1
            deg[c] += 1
        return deg

    def with_nodes(self, nodes) -> "VesselTree":
        return VesselTree(nodes, self.parent, self.radii)


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def project_point(cam: CameraModel, X) -> np.ndarray:
    """Perspective projection of a single 3D point, pi(K [R|t] X)."""
    return cam.project(np.asarray(X, float).reshape(1, 3))[0]


def arc_length(branch) -> float:
    pts = branch.points if isinstance(branch, CenterlineBranch) else np.asarray(branch, float)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def resample_polyline(branch: CenterlineBranch, count: int) -> CenterlineBranch:
    """Resample to ``count`` points equally spaced in arc length.

    Linear interpolation along cumulative chord length; the end points are
    copied exactly and keep their role tags.
    """
    if count < 2:
        raise GeometryError("need at least 2 output points")
    pts = branch.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise DegenerateCurve("branch has zero arc length")
    s = np.linspace(0.0, total, count)
    out = np.column_stack([np.interp(s, cum, pts[:, k]) for k in range(pts.shape[1])])
    out[0], out[-1] = pts[0], pts[-1]
    roles = (branch.roles[0],) + (INTERIOR,) * (count - 2) + (branch.roles[-1],)
    return CenterlineBranch(out, roles, branch.branch_id)


def triangle_area(a, b, c) -> np.ndarray:
    """Unsigned triangle area; 2D via the determinant formula, 3D via the cross product.

    Broadcasts over leading axes.
    """
    a, b, c = (np.asarray(v, float) for v in (a, b, c))
    if a.shape[-1] == 2:
        det = (a[..., 0] * (b[..., 1] - c[..., 1])
               + b[..., 0] * (c[..., 1] - a[..., 1])
               + c[..., 0] * (a[..., 1] - b[..., 1]))
        return 0.5 * np.abs(det)
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)


def menger_curvature(a, b, c) -> float:
    """2|Area(a,b,c)| / (|a-b| |b-c| |c-a|).

    This is half the inverse circumradius of the three points.
    """
    k = menger_curvature_many(np.asarray(a, float)[None], np.asarray(b, float)[None],
                              np.asarray(c, float)[None])
    return float(k[0])


def menger_curvature_many(a, b, c) -> np.ndarray:
    a, b, c = (np.asarray(v, float) for v in (a, b, c))
    dab = np.linalg.norm(a - b, axis=-1)
    dbc = np.linalg.norm(b - c, axis=-1)
    dca = np.linalg.norm(c - a, axis=-1)
    prod = dab * dbc * dca
    if np.any(prod == 0.0):
        raise DegenerateTriple("curvature undefined for coincident points")
    return 2.0 * triangle_area(a, b, c) / prod


def polyline_curvature(points) -> np.ndarray:
    """Curvature at every interior point i from the triple (i-1, i, i+1)."""
    pts = points.points if isinstance(points, CenterlineBranch) else np.asarray(points, float)
    if len(pts) < 3:
        return np.zeros(0)
    return menger_curvature_many(pts[:-2], pts[1:-1], pts[2:])


def decompose_branches(tree: VesselTree) -> tuple[list[CenterlineBranch], np.ndarray]:
    """Split a tree into maximal paths between nodes whose degree is not 2.

    Returns the branches, oriented away from the root, and the (k, 3) array of
    bifurcation points (nodes of degree >= 3) in breadth-first order.
    """
    n = len(tree.nodes)
    adj: list[list[int]] = [[] for _ in range(n)]
    for p, c in tree.edges:
        adj[p].append(c)
        adj[c].append(p)
    deg = np.array([len(a) for a in adj])

    order = []
    seen = np.zeros(n, bool)
    queue = deque([tree.root])
    seen[tree.root] = True
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    rank = np.empty(n, int)
    rank[order] = np.arange(n)

    is_break = deg != 2
    used: set[tuple[int, int]] = set()
    branches: list[CenterlineBranch] = []
    for start in order:
        if not is_break[start]:
            continue
        for nxt in sorted(adj[start], key=lambda v: rank[v]):
            if (start, nxt) in used:
                continue
            path = [start, nxt]
            used.add((start, nxt))
            used.add((nxt, start))
            while not is_break[path[-1]]:
                cur, prev = path[-1], path[-2]
                step = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
                used.add((cur, step))
                used.add((step, cur))
                path.append(step)
            roles = [INTERIOR] * len(path)
            for k in (0, -1):
                roles[k] = BIFURCATION if deg[path[k]] >= 3 else ENDPOINT
            branches.append(CenterlineBranch(tree.nodes[path], tuple(roles),
                                             len(branches), tuple(path)))
    bif = np.array([tree.nodes[i] for i in order if deg[i] >= 3]).reshape(-1, 3)
    return branches, bif


def project_branch(cam: CameraModel, branch: CenterlineBranch) -> CenterlineBranch:
    return CenterlineBranch(cam.project(branch.points), branch.roles, branch.branch_id,
                            branch.node_ids)


__all__ = [
    "BIFURCATION", "INTERIOR", "ENDPOINT", "OUTLIER", "ROLES",
    "CameraModel", "CenterlineBranch", "VesselTree",
    "project_point", "project_branch", "arc_length", "resample_polyline",
    "triangle_area", "menger_curvature", "menger_curvature_many", "polyline_curvature",
    "decompose_branches", "rotvec_to_matrix", "matrix_to_rotvec", "rotation_angle_between",
    "look_at", "skew",
]
