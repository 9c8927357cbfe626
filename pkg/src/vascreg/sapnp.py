"""Structure-aware weighted PnP.

Branches of the 2D and 3D centerline trees are paired by comparing length and
curvature signatures; point correspondences along matched branches receive
role-dependent weights (bifurcations count most, endpoints least, outliers not
at all) and the camera pose minimises the weighted reprojection error

    sum_i  w_i || pi(K [R | t] X_i) - x_i ||^2

with Levenberg-Marquardt over an axis-angle rotation increment and the
translation.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    DegenerateConfiguration,
    NonPositiveDepth,
    InsufficientPoints,
    NoFeasibleMatch,
    PoseError,
)
from .geometry import (
    BIFURCATION,
    ENDPOINT,
    INTERIOR,
    OUTLIER,
    CameraModel,
    CenterlineBranch,
    arc_length,
    polyline_curvature,
    resample_polyline,
    rotvec_to_matrix,
    skew,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightTable:
    bifurcation: float = 1.0
    interior: float = 0.5
    endpoint: float = 0.2
    outlier: float = 0.0

    def __post_init__(self):
        if self.outlier != 0.0:
            raise ValueError("outliers must carry zero weight")
        if min(self.bifurcation, self.interior, self.endpoint) <= 0:
            raise ValueError("non-outlier weights must be positive")

    def weight(self, role: str) -> float:
        return {BIFURCATION: self.bifurcation, INTERIOR: self.interior,
                ENDPOINT: self.endpoint, OUTLIER: self.outlier}[role]


@dataclass(frozen=True)
class SAPnPConfig:
    weights: WeightTable = WeightTable()
    match_threshold: float = 0.5
    histogram_bins: int = 16
    histogram_percentile: float = 95.0
    signature_points: int = 256
    correspondence_points: int = 32
    damping: float = 1e-3
    max_iterations: int = 200
    gradient_tol: float = 1e-10
    step_tol: float = 1e-14
    outlier_factor: float = 3.0
    # errors below this are numerical noise and never flagged as outliers
    outlier_min_error: float = 1e-6
    # branch pairs fitting better than this are never pruned as mismatches
    prune_min_error: float = 5.0
    # a fit worse than this (reprojection RMS) triggers sibling-swap verification
    verify_rms: float = 5.0
    max_hypotheses: int = 64


@dataclass(frozen=True)
class Correspondence:
    X: np.ndarray
    x: np.ndarray
    w: float
    role: str = INTERIOR

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, float).reshape(3))
        object.__setattr__(self, "x", np.asarray(self.x, float).reshape(2))
        w = float(self.w)
        if not np.isfinite(w) or w < 0:
            raise ValueError("weights must be finite and non-negative")
        if (w == 0.0) != (self.role == OUTLIER):
            raise ValueError("weight is zero exactly for outlier correspondences")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class BranchSignature:
    length: float
    curvature_histogram: np.ndarray
    point_count: int

    def __post_init__(self):
        h = np.asarray(self.curvature_histogram, float)
        if abs(h.sum() - 1.0) > 1e-9:
            raise ValueError("curvature histogram must sum to 1")
        object.__setattr__(self, "curvature_histogram", h)


@dataclass
class PoseResult:
    camera: CameraModel
    residual: float
    converged: bool
    iterations: int
    weights: np.ndarray
    history: list = field(default_factory=list)

    @property
    def outliers(self) -> np.ndarray:
        return self.weights == 0.0


# --------------------------------------------------------------------------
# Branch matching
# --------------------------------------------------------------------------

def _scaled_curvatures(branches, n_points):
    """Per-branch curvature samples made dimensionless by the mean branch length."""
    lengths = np.array([arc_length(b) for b in branches])
    scale = lengths.mean()
    out = []
    for b in branches:
        r = resample_polyline(b, n_points)
        out.append(polyline_curvature(r) * scale)
    return lengths, out


def branch_signatures(branches: Sequence[CenterlineBranch], upper: Optional[float] = None,
                      config: SAPnPConfig = SAPnPConfig()) -> list[BranchSignature]:
    """Scale-free signatures: length relative to the whole tree and a curvature histogram.

    ``upper`` fixes the right edge of the histogram; values above it land in the
    last bin. When omitted the configured percentile of this tree's curvatures
    is used.
    """
    lengths, curvs = _scaled_curvatures(branches, config.signature_points)
    if upper is None:
        upper = float(np.percentile(np.concatenate(curvs), config.histogram_percentile))
    return [_signature(L / lengths.sum(), k, upper, config.histogram_bins, len(b))
            for L, k, b in zip(lengths, curvs, branches)]


def _signature(length, curv, upper, bins, count):
    upper = max(upper, 1e-12)
    counts, _ = np.histogram(np.clip(curv, 0.0, upper), bins=bins, range=(0.0, upper))
    return BranchSignature(float(length), counts / counts.sum(), int(count))


def signature_pair(b2d: Sequence[CenterlineBranch], b3d: Sequence[CenterlineBranch],
                   config: SAPnPConfig = SAPnPConfig()):
    """Signatures for both trees sharing one histogram range (pooled percentile)."""
    _, c2 = _scaled_curvatures(b2d, config.signature_points)
    _, c3 = _scaled_curvatures(b3d, config.signature_points)
    upper = float(np.percentile(np.concatenate(c2 + c3), config.histogram_percentile))
    return branch_signatures(b2d, upper, config), branch_signatures(b3d, upper, config)


def signature_cost(a: BranchSignature, b: BranchSignature) -> float:
    rel = abs(a.length - b.length) / max(a.length, b.length, 1e-300)
    return float(rel + np.abs(a.curvature_histogram - b.curvature_histogram).sum())


def match_branches(b2d: Sequence[BranchSignature], b3d: Sequence[BranchSignature],
                   threshold: float = 0.5, allowed=None) -> dict[int, int]:
    """Optimal one-to-one assignment (Hungarian) with over-threshold pairs dropped.

    ``allowed`` is an optional boolean (n2d, n3d) mask of admissible pairs,
    e.g. from :func:`branch_generations`.
    """
    if not b2d or not b3d:
        raise ValueError("both signature lists must be nonempty")
    cost = np.array([[signature_cost(a, b) for b in b3d] for a in b2d])
    feasible = cost <= threshold
    if allowed is not None:
        feasible &= np.asarray(allowed, bool)
    if not feasible.any():
        raise NoFeasibleMatch("every branch pair exceeds the matching threshold")
    big = threshold * (len(b2d) + len(b3d)) + 1.0
    rows, cols = linear_sum_assignment(np.where(feasible, cost, big))
    mapping = {int(r): int(c) for r, c in zip(rows, cols) if feasible[r, c]}
    if not mapping:
        raise NoFeasibleMatch("no feasible branch pair survived the assignment")
    return mapping


def branch_parents(branches: Sequence[CenterlineBranch]) -> np.ndarray:
    """Index of the branch each branch grows from (-1 for root branches).

    Branches are linked where one starts at the point another ends.
    """
    parents = np.full(len(branches), -1)
    for j, b in enumerate(branches):
        if b.roles[0] != BIFURCATION:
            continue
        for i, a in enumerate(branches):
            if i != j and np.array_equal(a.points[-1], b.points[0]):
                parents[j] = i
                break
    return parents


def branch_generations(branches: Sequence[CenterlineBranch]) -> np.ndarray:
    """Number of bifurcations between each branch and its root branch."""
    parents = branch_parents(branches)
    gen = np.zeros(len(branches), int)
    for j in range(len(branches)):
        k = j
        while parents[k] >= 0 and gen[j] <= len(branches):
            gen[j] += 1
            k = parents[k]
    return gen


def match_trees(b2d: Sequence[CenterlineBranch], b3d: Sequence[CenterlineBranch],
                s2: Sequence[BranchSignature], s3: Sequence[BranchSignature],
                threshold: float = 0.5) -> dict[int, int]:
    """Generation-by-generation matching from the root outwards.

    A pair is admissible only when both branches sit at the same bifurcation
    depth and grow from branches that were matched to each other.
    """
    p2, p3 = branch_parents(b2d), branch_parents(b3d)
    g2, g3 = branch_generations(b2d), branch_generations(b3d)
    mapping: dict[int, int] = {}
    for g in range(int(max(g2.max(), g3.max())) + 1):
        allowed = np.zeros((len(b2d), len(b3d)), bool)
        for i in np.flatnonzero(g2 == g):
            for j in np.flatnonzero(g3 == g):
                allowed[i, j] = g == 0 or (p2[i] in mapping and mapping[p2[i]] == p3[j])
        if not allowed.any():
            continue
        try:
            mapping.update(match_branches(s2, s3, threshold, allowed))
        except NoFeasibleMatch:
            continue
    if not mapping:
        raise NoFeasibleMatch("no admissible branch pair within the threshold")
    return mapping


# --------------------------------------------------------------------------
# Weights and correspondences
# --------------------------------------------------------------------------

def assign_weights(branch: CenterlineBranch, table: WeightTable = WeightTable()) -> np.ndarray:
    return np.array([table.weight(r) for r in branch.roles])


def branch_correspondences(b3d: CenterlineBranch, b2d: CenterlineBranch, n_points: int,
                           table: WeightTable = WeightTable()) -> list[Correspondence]:
    """Point-wise pairs by equal arc-length resampling of a matched branch pair.

    Roles come from the 3D branch, where bifurcations are known exactly.
    """
    r3 = resample_polyline(b3d, n_points)
    r2 = resample_polyline(b2d, n_points)
    w = assign_weights(r3, table)
    return [Correspondence(X, x, wi, role) for X, x, wi, role in zip(r3.points, r2.points, w, r3.roles)]


# --------------------------------------------------------------------------
# Pose estimation
# --------------------------------------------------------------------------

def _hartley(points):
    c = points.mean(axis=0)
    d = np.linalg.norm(points - c, axis=1).mean()
    s = np.sqrt(points.shape[1]) / max(d, 1e-300)
    T = np.eye(points.shape[1] + 1)
    T[:-1, :-1] *= s
    T[:-1, -1] = -s * c
    return T


def _homog(p):
    return np.hstack([p, np.ones((len(p), 1))])


def _camera_from_M(M, K):
    """Nearest proper rotation and translation from M ~ lambda [R | t]."""
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    U, S, Vt = np.linalg.svd(M[:, :3])
    R = U @ Vt
    scale = S.mean()
    t = M[:, 3] / scale
    return CameraModel(K, R, t)


def _dlt(X, x, w, K):
    T3, T2 = _hartley(X), _hartley(x)
    Xn = _homog(X) @ T3.T
    xn = _homog(x) @ T2.T
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -xn[:, 0:1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -xn[:, 1:2] * Xn
    A *= np.repeat(np.sqrt(w), 2)[:, None]
    _, _, Vt = np.linalg.svd(A)
    Pn = Vt[-1].reshape(3, 4)
    P = np.linalg.solve(T2, Pn @ T3)
    return _camera_from_M(np.linalg.solve(K, P), K)


def _planar_init(X, x, w, K):
    c = X.mean(axis=0)
    _, _, Vt = np.linalg.svd(X - c)
    Q = Vt.T.copy()
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    u = (X - c) @ Q[:, :2]
    Tu, T2 = _hartley(u), _hartley(x)
    un = _homog(u) @ Tu.T
    xn = _homog(x) @ T2.T
    n = len(u)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = un
    A[0::2, 6:9] = -xn[:, 0:1] * un
    A[1::2, 3:6] = un
    A[1::2, 6:9] = -xn[:, 1:2] * un
    A *= np.repeat(np.sqrt(w), 2)[:, None]
    H = np.linalg.solve(T2, np.linalg.svd(A)[2][-1].reshape(3, 3) @ Tu)
    M = np.linalg.solve(K, H)
    lam = np.sqrt(np.linalg.norm(M[:, 0]) * np.linalg.norm(M[:, 1]))
    M = M / lam
    if M[2, 2] < 0:
        M = -M
    r1, r2 = M[:, 0], M[:, 1]
    Rp = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt2 = np.linalg.svd(Rp)
    Rp = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt2)]) @ Vt2
    R = Rp @ Q.T
    t = M[:, 2] - R @ c
    return CameraModel(K, R, t)


def _initial_poses(X, x, w, K):
    """Candidate starting poses: DLT on the highest-weight subset, plus a plane fit.

    The DLT alone is poorly conditioned for shallow, distant objects (weak
    perspective), so a homography-based start is always tried as well.
    """
    cands = []
    levels = np.unique(w[w > 0])[::-1]
    live = w > 0
    for lvl in levels:
        subset = w >= lvl
        if subset.sum() >= 6 and not _is_planar(X[subset]):
            cands.append(_dlt(X[subset], x[subset], w[subset], K))
            break
    cands.append(_planar_init(X[live], x[live], w[live], K))
    return [c for c in cands if np.all(c.to_camera(X[live])[:, 2] > 0)]


def _is_planar(X, tol=1e-9):
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    return s[2] <= tol * s[0]


def _residuals(cam_R, cam_t, K, X, x, sw):
    Xc = X @ cam_R.T + cam_t
    p = Xc @ K.T
    u = p[:, :2] / p[:, 2:3]
    return (u - x) * sw[:, None], Xc, p, u


def _jacobian(R, K, X, Xc, p, u, sw):
    n = len(X)
    # d u / d Xc  (n, 2, 3)
    Jp = (K[None, :2, :] - u[:, :, None] * K[None, 2:3, :]) / p[:, 2, None, None]
    RX = X @ R.T
    # left-multiplied rotation increment: d(exp(dw) R X)/d dw = -[R X]_x
    dR = -np.stack([skew(v) for v in RX])
    J = np.empty((n, 2, 6))
    J[:, :, :3] = Jp @ dR
    J[:, :, 3:] = Jp
    return (J * sw[:, None, None]).reshape(2 * n, 6)


def _levenberg_marquardt(cam: CameraModel, X, x, w, cfg: SAPnPConfig):
    K, R, t = cam.K, np.array(cam.R), np.array(cam.t)
    sw = np.sqrt(w)
    r, Xc, p, u = _residuals(R, t, K, X, x, sw)
    cost = float(np.sum(r * r))
    lam = cfg.damping
    history = [cost]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        J = _jacobian(R, K, X, Xc, p, u, sw)
        g = J.T @ r.ravel()
        if np.linalg.norm(g) < cfg.gradient_tol:
            converged = True
            break
        JTJ = J.T @ J
        diag = np.diag(np.diag(JTJ)) + 1e-300
        while True:
            delta = -np.linalg.solve(JTJ + lam * diag, g)
            R_new = rotvec_to_matrix(delta[:3]) @ R
            t_new = t + delta[3:]
            depth_ok = np.all((X @ R_new.T + t_new)[:, 2] > 0)
            if depth_ok:
                r_new, Xc_n, p_n, u_n = _residuals(R_new, t_new, K, X, x, sw)
                cost_new = float(np.sum(r_new * r_new))
            else:
                cost_new = np.inf
            if cost_new < cost:
                R, t, r, Xc, p, u, cost = R_new, t_new, r_new, Xc_n, p_n, u_n, cost_new
                lam = max(lam / 10.0, 1e-15)
                history.append(cost)
                break
            lam *= 10.0
            if lam > 1e16:
                break
        if lam > 1e16:
            # no descent direction left at working precision: stationary point
            converged = True
            break
        if np.linalg.norm(delta) < cfg.step_tol * (1.0 + np.linalg.norm(t)):
            converged = True
            break
    U, _, Vt = np.linalg.svd(R)  # re-orthonormalise accumulated products
    R = U @ Vt
    return CameraModel(K, R, t), cost, converged, it, history


def solve_pose(corr: Sequence[Correspondence], K, init: Optional[CameraModel] = None,
               config: SAPnPConfig = SAPnPConfig()) -> PoseResult:
    """Weighted-reprojection pose estimate.

    Without ``init`` the pose starts from a normalised DLT on the highest-weight
    points. After a first LM pass, points whose reprojection error exceeds
    ``outlier_factor`` times the median are re-tagged as outliers (weight 0)
    and the solve repeats once.
    """
    X = np.array([c.X for c in corr]).reshape(-1, 3)
    x = np.array([c.x for c in corr]).reshape(-1, 2)
    w = np.array([c.w for c in corr], float)
    return solve_pose_arrays(X, x, w, K, init, config)


def solve_pose_arrays(X, x, w, K, init=None, config: SAPnPConfig = SAPnPConfig()) -> PoseResult:
    X, x, w = np.asarray(X, float), np.asarray(x, float), np.asarray(w, float).copy()
    K = np.asarray(K, float)
    live = w > 0
    if live.sum() < 6:
        raise InsufficientPoints(f"need >= 6 weighted correspondences, got {int(live.sum())}")
    s = np.linalg.svd(X[live] - X[live].mean(axis=0), compute_uv=False)
    if s[1] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("weighted 3D points are collinear")

    starts = [init] if init is not None else _initial_poses(X, x, w, K)
    best = None
    for start in starts:
        start = CameraModel(K, start.R, start.t)
        if np.any(start.to_camera(X[live])[:, 2] <= 0):
            continue
        fit = _levenberg_marquardt(start, X[live], x[live], w[live], config)
        if best is None or fit[1] < best[1]:
            best = fit
    if best is None:
        raise PoseError("no starting pose places the weighted points in front of the camera")
    cam, cost, conv, its, hist = best

    err = np.linalg.norm(cam.project(X) - x, axis=1)
    med = np.median(err[live])
    flag = live & (err > config.outlier_factor * med) & (err > config.outlier_min_error)
    if flag.any() and (live & ~flag).sum() >= 6:
        w[flag] = 0.0
        live = w > 0
        cam, cost, conv, its2, hist2 = _levenberg_marquardt(cam, X[live], x[live], w[live], config)
        its += its2
        hist = hist + hist2
    if not conv:
        log.warning("pose LM stopped after %d iterations without converging", its)
    return PoseResult(cam, cost, conv, its, w, hist)


def reprojection_rms(cam: CameraModel, X, x, mask=None) -> float:
    """sqrt(mean ||pi(X_i) - x_i||^2) over the selected points."""
    e = cam.project(X) - np.asarray(x, float)
    if mask is not None:
        e = e[mask]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


# --------------------------------------------------------------------------
# Full structure-aware pipeline for one frame
# --------------------------------------------------------------------------

@dataclass
class FramePose:
    result: PoseResult
    mapping: dict


def estimate_frame_pose(branches3d: Sequence[CenterlineBranch],
                        branches2d: Sequence[CenterlineBranch], K,
                        config: SAPnPConfig = SAPnPConfig()) -> FramePose:
    """Match branches by anatomy, build weighted correspondences, solve the pose.

    Pairs must respect the tree topology (see :func:`match_trees`).

    Matched branch pairs whose reprojection error stands out (more than
    ``outlier_factor`` times the median branch error) are treated as mismatches:
    the worst one is dropped and the pose re-solved, while at least two pairs
    and six weighted points remain.

    Signatures cannot tell a tree from its mirror image when sibling branches
    look alike. If the fit is poor (RMS above ``verify_rms``), every
    topology-consistent reassignment of siblings is tried and the hypothesis
    with the lowest reprojection error over all of its pairs wins.
    """
    s2, s3 = signature_pair(branches2d, branches3d, config)
    mapping = match_trees(branches2d, branches3d, s2, s3, config.match_threshold)
    cache = {}

    def pairs_for(m):
        for k, v in m.items():
            if (k, v) not in cache:
                cache[(k, v)] = branch_correspondences(branches3d[v], branches2d[k],
                                                       config.correspondence_points, config.weights)
        return {k: cache[(k, v)] for k, v in m.items()}

    def score(fp, m):
        errs = _branch_errors(fp.result, pairs_for(m), sorted(m))
        return float(np.sqrt(np.mean(np.square(errs))))

    best = _fit_mapping(mapping, pairs_for(mapping), s2, s3, K, config)
    best_score = score(best, mapping)
    if best_score <= config.verify_rms:
        return best
    for alt in sibling_hypotheses(branches2d, branches3d, mapping, config.max_hypotheses):
        if alt == mapping:
            continue
        try:
            fp = _fit_mapping(alt, pairs_for(alt), s2, s3, K, config)
        except (PoseError, NonPositiveDepth):
            continue
        sc = score(fp, alt)
        if sc < best_score:
            best, best_score = fp, sc
    return best


def sibling_hypotheses(b2d, b3d, mapping: dict, limit: int = 64) -> list[dict]:
    """All topology-consistent mappings that keep the matched roots of ``mapping``.

    Children of matched branches are paired in every possible way, recursively.
    """
    p2, p3 = branch_parents(b2d), branch_parents(b3d)
    kids2 = {i: [c for c in range(len(b2d)) if p2[c] == i] for i in range(len(b2d))}
    kids3 = {j: [c for c in range(len(b3d)) if p3[c] == j] for j in range(len(b3d))}
    roots = {k: v for k, v in mapping.items() if p2[k] < 0}
    out = [dict(roots)]
    while True:
        grown = []
        for m in out:
            options = [{}]
            for i2, i3 in m.items():
                c2, c3 = kids2[i2], kids3[i3]
                if not c2 or not c3 or any(c in m for c in c2):
                    continue
                perms = [dict(zip(c2, q)) for q in itertools.permutations(c3, min(len(c2), len(c3)))]
                options = [{**o, **p} for o in options for p in perms]
            grown.extend({**m, **o} for o in options)
        if sum(map(len, grown)) == sum(map(len, out)):
            break
        out = grown[:limit]
    return out


def _fit_mapping(mapping, pairs, s2, s3, K, config) -> FramePose:
    def solve(keys):
        corr = [c for k in keys for c in pairs[k]]
        return solve_pose(corr, K, config=config)

    keys = sorted(pairs)
    result = None
    while True:
        try:
            result = solve(keys)
        except (PoseError, NonPositiveDepth):
            if len(keys) <= 2:
                raise
            result = None
        errs = _branch_errors(result, pairs, keys) if result is not None else None
        if errs is None:
            # unusable solve: drop the pair with the weakest signature agreement
            costs = [signature_cost(s2[k], s3[mapping[k]]) for k in keys]
            keys.pop(int(np.argmax(costs)))
            continue
        worst = int(np.argmax(errs))
        med = float(np.median(errs))
        if (len(keys) > 2 and errs[worst] > config.outlier_factor * med
                and errs[worst] > max(config.outlier_min_error, config.prune_min_error)):
            keys.pop(worst)
            continue
        break
    return FramePose(result, {k: mapping[k] for k in keys})


def _branch_errors(result: PoseResult, pairs, keys):
    cam = result.camera
    out = []
    for k in keys:
        X = np.array([c.X for c in pairs[k]])
        x = np.array([c.x for c in pairs[k]])
        try:
            out.append(reprojection_rms(cam, X, x))
        except NonPositiveDepth:
            out.append(np.inf)
    return np.array(out)
