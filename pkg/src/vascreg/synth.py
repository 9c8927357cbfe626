"""Synthetic angiography-style dataset.

Generates random 3D vessel trees, temporally coherent non-rigid deformations,
C-arm style camera poses, and paired 2D/3D branch samples. Each case owns an
RNG stream derived from ``(seed, case_id)`` so cases can be generated in any
order or in parallel with bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import NonPositiveDepth, PoseError
from .geometry import (
    CameraModel,
    INTERIOR,
    CenterlineBranch,
    VesselTree,
    decompose_branches,
    look_at,
    project_branch,
    resample_polyline,
    rotvec_to_matrix,
)
from .sapnp import SAPnPConfig, estimate_frame_pose

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeConfig:
    depth: int = 3
    trunk_length: float = 45.0
    length_decay: float = 0.75
    length_jitter: float = 0.15
    branch_angle: tuple = (25.0, 50.0)
    bend: float = 0.2
    node_spacing: float = 2.0
    # out-of-plane (anterior-posterior) share of bends and branching axes
    depth_ratio: float = 0.3
    # length ratio of the minor daughter to the major one at each split
    asymmetry: float = 0.65

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("tree depth must be >= 1")
        if self.trunk_length <= 0 or self.node_spacing <= 0:
            raise ValueError("segment length and node spacing must be positive")


@dataclass(frozen=True)
class DataConfig:
    tree: TreeConfig = TreeConfig()
    n_cases: int = 23
    frames_per_case: int = 16
    window: int = 4
    stride: int = 4
    points: int = 32
    magnitude: float = 5.0
    # short-wavelength deformation, as a share of ``magnitude``
    local_fraction: float = 0.3
    focal: float = 1100.0
    principal: float = 150.0
    source_distance: float = 800.0
    lao_range: float = 25.0
    cran_range: float = 15.0
    orbit_step: float = 0.5
    obs_noise: float = 0.1
    occlusion_start: float = 0.05
    occlusion_stay: float = 0.9
    occlusion_fraction: tuple = (0.25, 0.4)
    occlusion_noise: float = 4.0
    # spline sampling step (mm) for the smooth curves behind labels and projections
    curve_spacing: float = 0.25
    oracle_pose: bool = False
    n_test_cases: int = 4
    sapnp: SAPnPConfig = field(default_factory=SAPnPConfig)

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")
        if self.frames_per_case < self.window:
            raise ValueError("frames_per_case must cover at least one window")
        if self.points < 3:
            raise ValueError("at least 3 points per branch")
        if self.magnitude < 0:
            raise ValueError("deformation magnitude must be >= 0")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.principal],
                         [0.0, self.focal, self.principal],
                         [0.0, 0.0, 1.0]])

    def test_cases(self) -> list[int]:
        n = min(self.n_test_cases, self.n_cases - 1) if self.n_cases > 1 else 0
        return list(range(self.n_cases - n, self.n_cases))


def case_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


# --------------------------------------------------------------------------
# Trees
# --------------------------------------------------------------------------

def _perpendicular(d, rng, depth_ratio=1.0):
    v = rng.normal(size=3) * np.array([1.0, depth_ratio, 1.0])
    v -= (v @ d) * d
    return v / np.linalg.norm(v)


def _bezier(p0, p1, p2, p3, s):
    s = s[:, None]
    return ((1 - s) ** 3 * p0 + 3 * (1 - s) ** 2 * s * p1
            + 3 * (1 - s) * s ** 2 * p2 + s ** 3 * p3)


def generate_tree(cfg: TreeConfig, seed: int) -> VesselTree:
    """Recursive binary tree of cubic-Bezier segments.

    ``depth`` counts segment generations: depth 1 is a single trunk, depth d has
    2**d - 1 segments and 2**(d-1) - 1 bifurcations.
    """
    rng = case_rng(seed, 0)
    nodes = [np.zeros(3)]
    parent = [-1]
    trunk_dir = np.array([0.0, 0.0, -1.0]) + 0.2 * rng.normal(size=3)
    trunk_dir /= np.linalg.norm(trunk_dir)

    # (start node index, direction, generation, length factor)
    stack = [(0, trunk_dir, 1, 1.0)]
    while stack:
        start, d, gen, factor = stack.pop(0)
        L = cfg.trunk_length * cfg.length_decay ** (gen - 1) * factor
        L *= 1.0 + cfg.length_jitter * rng.uniform(-1.0, 1.0)
        p0 = nodes[start]
        p3 = p0 + L * d
        p1 = p0 + L / 3 * d + cfg.bend * L * _perpendicular(d, rng, cfg.depth_ratio)
        p2 = p0 + 2 * L / 3 * d + cfg.bend * L * _perpendicular(d, rng, cfg.depth_ratio)
        n_new = max(2, int(round(L / cfg.node_spacing)))
        s = np.linspace(0.0, 1.0, n_new + 1)[1:]
        prev = start
        for p in _bezier(p0, p1, p2, p3, s):
            nodes.append(p)
            parent.append(prev)
            prev = len(nodes) - 1
        if gen < cfg.depth:
            tangent = p3 - p2
            tangent /= np.linalg.norm(tangent)
            # branching plane roughly facing the frontal view
            axis = np.array([0.0, 1.0, 0.0]) + cfg.depth_ratio * rng.normal(size=3)
            axis -= (axis @ tangent) * tangent
            axis /= np.linalg.norm(axis)
            lo, hi = np.radians(cfg.branch_angle)
            major = rng.integers(0, 2)
            for k, sign in enumerate((1.0, -1.0)):
                ang = sign * rng.uniform(lo, hi)
                f = 1.0 if k == major else cfg.asymmetry
                stack.append((prev, rotvec_to_matrix(axis * ang) @ tangent, gen + 1, f))
    nodes = np.array(nodes)
    return VesselTree(nodes - nodes.mean(axis=0), np.array(parent))


def _sine_modes(rng, n_modes, magnitude, wavelengths, n_frames):
    amp = magnitude * rng.dirichlet(np.ones(n_modes))
    dirs = rng.normal(size=(n_modes, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    kdir = rng.normal(size=(n_modes, 3))
    kdir /= np.linalg.norm(kdir, axis=1, keepdims=True)
    wavevec = kdir * (2 * np.pi / rng.uniform(*wavelengths, size=(n_modes, 1)))
    phase = rng.uniform(0, 2 * np.pi, n_modes)
    rate = rng.uniform(-1.0, 1.0, n_modes) / n_frames
    return amp, dirs, wavevec, phase, rate


def deform_sequence(tree: VesselTree, n_frames: int, magnitude: float, seed: int,
                    local_fraction: float = 0.0,
                    local_wavelength: tuple = (12.0, 25.0)) -> list[VesselTree]:
    """Smooth time-varying displacement of the tree nodes.

    The field is a sum of four long-wavelength sinusoidal modes (60-150 mm)
    whose amplitudes sum to ``magnitude``, plus three short-wavelength modes
    whose amplitudes sum to ``local_fraction * magnitude``. Phases drift by at
    most 1/n_frames rad per frame, so motion between consecutive frames stays
    small. No node moves further than ``(1 + local_fraction) * magnitude``.
    """
    if n_frames < 1 or magnitude < 0 or local_fraction < 0:
        raise ValueError("need n_frames >= 1 and non-negative magnitudes")
    modes = [_sine_modes(case_rng(seed, 1), 4, magnitude, (60.0, 150.0), n_frames)]
    if local_fraction > 0:
        modes.append(_sine_modes(case_rng(seed, 4), 3, local_fraction * magnitude,
                                 local_wavelength, n_frames))
    X = tree.nodes
    frames = []
    for f in range(n_frames):
        disp = np.zeros_like(X)
        for amp, dirs, wavevec, phase, rate in modes:
            disp += np.sin(X @ wavevec.T + phase + rate * f) * amp @ dirs
        frames.append(tree.with_nodes(X + disp))
    return frames


# --------------------------------------------------------------------------
# Cases
# --------------------------------------------------------------------------

@dataclass
class CaseData:
    """Everything needed to (re)assemble a case's samples."""

    case_id: int
    seed: int
    tree: VesselTree
    deformed: list  # list[np.ndarray] node positions per frame
    cams: list  # true CameraModel per frame
    occlusion: dict  # (branch_id, frame) -> (start, length)

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "seed": self.seed,
            "nodes": self.tree.nodes.tolist(),
            "parent": self.tree.parent.tolist(),
            "frames": [
                {"frame_index": f, "K": c.K.ravel().tolist(), "R": c.R.ravel().tolist(),
                 "t": c.t.tolist(), "nodes": d.tolist()}
                for f, (c, d) in enumerate(zip(self.cams, self.deformed))
            ],
            "occlusion": [[b, f, s, n] for (b, f), (s, n) in sorted(self.occlusion.items())],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CaseData":
        tree = VesselTree(np.array(doc["nodes"]), np.array(doc["parent"]))
        cams, deformed = [], []
        for fr in doc["frames"]:
            cams.append(CameraModel(np.reshape(fr["K"], (3, 3)), np.reshape(fr["R"], (3, 3)), fr["t"]))
            deformed.append(np.array(fr["nodes"]))
        occ = {(b, f): (s, n) for b, f, s, n in doc["occlusion"]}
        return cls(doc["case_id"], doc["seed"], tree, deformed, cams, occ)


def camera_orbit(cfg: DataConfig, n_frames: int, rng: np.random.Generator) -> list[CameraModel]:
    """C-arm views around the tree centroid, drifting slowly in LAO angle."""
    lao0 = rng.uniform(-cfg.lao_range, cfg.lao_range)
    cran = np.radians(rng.uniform(-cfg.cran_range, cfg.cran_range))
    cams = []
    for f in range(n_frames):
        lao = np.radians(lao0 + cfg.orbit_step * f)
        view = np.array([np.sin(lao) * np.cos(cran), -np.cos(lao) * np.cos(cran), np.sin(cran)])
        R, t = look_at(cfg.source_distance * view, np.zeros(3), up=(0.0, 0.0, 1.0))
        cams.append(CameraModel(cfg.K, R, t))
    return cams


def _occlusion_events(n_branches, n_frames, cfg: DataConfig, rng) -> dict:
    events = {}
    lo, hi = cfg.occlusion_fraction
    for b in range(n_branches):
        current = None
        for f in range(n_frames):
            p = cfg.occlusion_stay if current is not None else cfg.occlusion_start
            if rng.uniform() < p:
                if current is None:
                    length = int(round(rng.uniform(lo, hi) * cfg.points))
                    length = min(max(length, 1), cfg.points)
                    start = int(rng.integers(0, cfg.points - length + 1))
                    current = (start, length)
                events[(b, f)] = current
            else:
                current = None
    return events


@dataclass(frozen=True)
class ObservationNoise:
    """Detector noise plus occlusion-style corruption, in millimetres.

    Mirrors the corruption baked into the dataset so that training can draw
    fresh observations around the same labels.
    """
    noise: float = 0.1
    occlusion_start: float = 0.05
    occlusion_stay: float = 0.9
    occlusion_fraction: tuple = (0.25, 0.4)
    occlusion_noise: float = 4.0

    @classmethod
    def from_data_config(cls, cfg: DataConfig) -> "ObservationNoise":
        return cls(cfg.obs_noise, cfg.occlusion_start, cfg.occlusion_stay,
                   tuple(cfg.occlusion_fraction), cfg.occlusion_noise)

    def occlusion_masks(self, n: int, F: int, P: int, rng: np.random.Generator) -> np.ndarray:
        """(n, F, P) masks; each window starts from the stationary occlusion rate."""
        lo, hi = self.occlusion_fraction
        p0 = self.occlusion_start / max(1.0 - self.occlusion_stay + self.occlusion_start, 1e-12)
        on = np.zeros((n, F), bool)
        on[:, 0] = rng.uniform(size=n) < p0
        for f in range(1, F):
            p = np.where(on[:, f - 1], self.occlusion_stay, self.occlusion_start)
            on[:, f] = rng.uniform(size=n) < p
        masks = np.zeros((n, F, P), bool)
        length = np.clip(np.round(rng.uniform(lo, hi, size=(n, F)) * P).astype(int), 1, P)
        start = (rng.uniform(size=(n, F)) * (P - length + 1)).astype(int)
        idx = np.arange(P)
        for f in range(F):
            # a run that continues keeps its segment
            if f:
                keep = on[:, f] & on[:, f - 1]
                length[keep, f] = length[keep, f - 1]
                start[keep, f] = start[keep, f - 1]
            seg = (idx >= start[:, f, None]) & (idx < (start + length)[:, f, None])
            masks[:, f] = seg & on[:, f, None]
        return masks

    def corrupt(self, label: np.ndarray, scale: np.ndarray, rng: np.random.Generator):
        """Noisy observations of normalized (n, F, P, 2) labels with per-sample ``scale``.

        Returns
        -------
        obs : ndarray (n, F, P, 2)
        occluded : ndarray of bool (n, F, P)
        """
        label = np.asarray(label, float)
        n, F, P, _ = label.shape
        occluded = self.occlusion_masks(n, F, P, rng)
        sigma = np.where(occluded, self.occlusion_noise, self.noise)
        sigma = sigma / np.asarray(scale, float).reshape(n, 1, 1)
        return label + sigma[..., None] * rng.normal(size=label.shape), occluded


def simulate_case(cfg: DataConfig, case_id: int, seed: int) -> CaseData:
    tree = generate_tree(cfg.tree, int(np.random.SeedSequence([seed, case_id]).generate_state(1)[0]))
    rng = case_rng(seed, case_id, 2)
    dseed = int(rng.integers(0, 2**31 - 1))
    deformed = [t.nodes for t in deform_sequence(tree, cfg.frames_per_case, cfg.magnitude, dseed,
                                                  cfg.local_fraction)]
    cams = camera_orbit(cfg, cfg.frames_per_case, rng)
    branches, _ = decompose_branches(tree)
    occ = _occlusion_events(len(branches), cfg.frames_per_case, cfg, rng)
    return CaseData(case_id, seed, tree, deformed, cams, occ)


# --------------------------------------------------------------------------
# Samples
# --------------------------------------------------------------------------

@dataclass
class FrameRecord:
    label2d: CenterlineBranch
    proj3d: CenterlineBranch
    cam: CameraModel
    frame_index: int
    obs2d: np.ndarray
    occluded: np.ndarray
    cam_true: Optional[CameraModel] = None

    def __post_init__(self):
        if len(self.label2d) != len(self.proj3d):
            raise ValueError("label2d and proj3d need identical point counts")
        self.obs2d = np.asarray(self.obs2d, float)
        self.occluded = np.asarray(self.occluded, bool)


@dataclass
class MultiFrameSample:
    case_id: int
    branch_id: int
    frames: list
    center: np.ndarray
    scale: float
    window: int = 0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sample needs at least one frame")
        idx = [fr.frame_index for fr in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        if len({len(fr.label2d) for fr in self.frames}) != 1:
            raise ValueError("every frame needs the same point count")
        self.center = np.asarray(self.center, float).reshape(2)
        self.scale = float(self.scale)

    @property
    def F(self) -> int:
        return len(self.frames)

    @property
    def P(self) -> int:
        return len(self.frames[0].label2d)

    def normalize(self, pts) -> np.ndarray:
        return (np.asarray(pts, float) - self.center) / self.scale

    def denormalize(self, pts) -> np.ndarray:
        return np.asarray(pts, float) * self.scale + self.center

    def stacked(self, key: str) -> np.ndarray:
        """(F, P, 2) array of ``label2d``, ``proj3d`` or ``obs2d`` in detector mm."""
        if key == "obs2d":
            return np.stack([fr.obs2d for fr in self.frames])
        return np.stack([getattr(fr, key).points for fr in self.frames])

    def single_frames(self) -> list["MultiFrameSample"]:
        return [MultiFrameSample(self.case_id, self.branch_id, [fr], self.center, self.scale,
                                 self.window) for fr in self.frames]

    def to_json(self) -> dict:
        norm = {"center": self.center.tolist(), "scale": self.scale}
        frames = []
        for fr in self.frames:
            d = {"frame_index": fr.frame_index,
                 "K": fr.cam.K.ravel().tolist(), "R": fr.cam.R.ravel().tolist(),
                 "t": fr.cam.t.tolist(),
                 "label2d": fr.label2d.points.tolist(), "proj3d": fr.proj3d.points.tolist(),
                 "norm": norm,
                 "obs2d": fr.obs2d.tolist(), "occluded": fr.occluded.astype(int).tolist()}
            if fr.cam_true is not None:
                d["R_true"] = fr.cam_true.R.ravel().tolist()
                d["t_true"] = fr.cam_true.t.tolist()
            frames.append(d)
        return {"format": FORMAT_VERSION, "case_id": self.case_id, "branch_id": self.branch_id,
                "window": self.window, "frames": frames}

    @classmethod
    def from_json(cls, doc: dict) -> "MultiFrameSample":
        frames = []
        for d in doc["frames"]:
            K = np.reshape(d["K"], (3, 3))
            cam = CameraModel(K, np.reshape(d["R"], (3, 3)), d["t"])
            cam_true = None
            if "R_true" in d:
                cam_true = CameraModel(K, np.reshape(d["R_true"], (3, 3)), d["t_true"])
            frames.append(FrameRecord(
                CenterlineBranch(np.array(d["label2d"]), branch_id=doc["branch_id"]),
                CenterlineBranch(np.array(d["proj3d"]), branch_id=doc["branch_id"]),
                cam, d["frame_index"], np.array(d["obs2d"]), np.array(d["occluded"], bool), cam_true))
        norm = doc["frames"][0]["norm"]
        return cls(doc["case_id"], doc["branch_id"], frames, norm["center"], norm["scale"],
                   doc.get("window", 0))


def frame_poses(case: CaseData, cfg: DataConfig) -> list[CameraModel]:
    """Per-frame structure-aware PnP estimate (or the true pose with ``oracle_pose``)."""
    if cfg.oracle_pose:
        return list(case.cams)
    b3, _ = decompose_branches(case.tree)
    poses = []
    for f, cam in enumerate(case.cams):
        b2 = [project_branch(cam, CenterlineBranch(case.deformed[f][list(b.node_ids)], b.roles,
                                                   b.branch_id))
              for b in b3]
        try:
            est = estimate_frame_pose(b3, b2, cfg.K, cfg.sapnp).result.camera
        except (PoseError, NonPositiveDepth) as exc:
            log.warning("case %d frame %d: pose estimation failed (%s); using true pose",
                        case.case_id, f, exc)
            est = cam
        poses.append(est)
    return poses


def smooth_branch(branch: CenterlineBranch, points, spacing: float) -> CenterlineBranch:
    """Densely sampled cubic spline through ``points`` (the nodes of ``branch``).

    The spline parameter is the chord length of the rest-pose nodes, so a
    deformed copy of the branch is sampled at corresponding locations.
    """
    u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(branch.points, axis=0), axis=1))])
    n = max(int(np.ceil(u[-1] / spacing)) + 1, len(u))
    s = np.linspace(0.0, u[-1], n)
    dense = CubicSpline(u, np.asarray(points, float), bc_type="natural")(s)
    roles = [INTERIOR] * n
    roles[0], roles[-1] = branch.roles[0], branch.roles[-1]
    return CenterlineBranch(dense, roles, branch.branch_id)


def assemble_samples(case: CaseData, cfg: DataConfig,
                     poses: Optional[list] = None) -> list[MultiFrameSample]:
    """Cut the case into per-branch windows of ``cfg.window`` consecutive frames."""
    if poses is None:
        poses = frame_poses(case, cfg)
    b3, _ = decompose_branches(case.tree)
    P = cfg.points
    per_frame = {}
    for b in b3:
        rng = case_rng(case.seed, case.case_id, 3, b.branch_id)
        rest = smooth_branch(b, b.points, cfg.curve_spacing)
        for f, cam in enumerate(case.cams):
            deformed = smooth_branch(b, case.deformed[f][list(b.node_ids)], cfg.curve_spacing)
            label = resample_polyline(project_branch(cam, deformed), P)
            proj = resample_polyline(project_branch(poses[f], rest), P)
            obs = label.points + cfg.obs_noise * rng.normal(size=(P, 2))
            occluded = np.zeros(P, bool)
            noise = rng.normal(size=(P, 2))
            if (b.branch_id, f) in case.occlusion:
                s, n = case.occlusion[(b.branch_id, f)]
                occluded[s:s + n] = True
                obs[occluded] = label.points[occluded] + cfg.occlusion_noise * noise[occluded]
            per_frame[(b.branch_id, f)] = FrameRecord(label, proj, poses[f], f, obs, occluded, cam)

    samples = []
    n_frames = len(case.cams)
    for b in b3:
        starts = range(0, n_frames - cfg.window + 1, cfg.stride)
        for w, s in enumerate(starts):
            frames = [per_frame[(b.branch_id, f)] for f in range(s, s + cfg.window)]
            proj = np.concatenate([fr.proj3d.points for fr in frames])
            center = proj.mean(axis=0)
            scale = float(np.abs(proj - center).max())
            samples.append(MultiFrameSample(case.case_id, b.branch_id, frames, center, scale, w))
    return samples


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_to_dict(cfg: DataConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def render_dataset(cfg: DataConfig, n_cases: Optional[int], seed: int, out_dir) -> dict:
    """Write case files, multi-frame and single-frame samples and a manifest.

    Layout::

        out_dir/manifest.json
        out_dir/cases/case_000.json
        out_dir/multi/case_000_b00_w00.json
        out_dir/single/case_000_b00_w00_f00.json
    """
    n_cases = cfg.n_cases if n_cases is None else n_cases
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    out = Path(out_dir)
    for sub in ("cases", "multi", "single"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n_multi = n_single = 0
    digest = hashlib.sha256()
    files = []
    for c in range(n_cases):
        case = simulate_case(cfg, c, seed)
        name = f"case_{c:03d}.json"
        _write(out / "cases" / name, case.to_json(), digest)
        files.append(f"cases/{name}")
        for s in assemble_samples(case, cfg):
            stem = f"case_{c:03d}_b{s.branch_id:02d}_w{s.window:02d}"
            _write(out / "multi" / f"{stem}.json", s.to_json(), digest)
            files.append(f"multi/{stem}.json")
            n_multi += 1
            for k, single in enumerate(s.single_frames()):
                _write(out / "single" / f"{stem}_f{k:02d}.json", single.to_json(), digest)
                files.append(f"single/{stem}_f{k:02d}.json")
                n_single += 1
    test = [c for c in cfg.test_cases() if c < n_cases]
    manifest = {
        "format": FORMAT_VERSION,
        "seed": seed,
        "n_cases": n_cases,
        "case_seeds": [[seed, c] for c in range(n_cases)],
        "counts": {"multi_frame": n_multi, "single_frame": n_single},
        "split": {"train": [c for c in range(n_cases) if c not in test], "test": test},
        "config": config_to_dict(cfg),
        "content_sha256": digest.hexdigest(),
        "files": files,
    }
    (out / "manifest.json").write_text(_dump(manifest) + "\n")
    return manifest


def _write(path: Path, doc, digest):
    text = _dump(doc) + "\n"
    digest.update(path.name.encode())
    digest.update(text.encode())
    path.write_text(text)


def load_samples(dataset_dir, variant: str = "multi", cases=None) -> list[MultiFrameSample]:
    root = Path(dataset_dir) / variant
    out = []
    for p in sorted(root.glob("*.json")):
        doc = json.loads(p.read_text())
        if cases is None or doc["case_id"] in cases:
            out.append(MultiFrameSample.from_json(doc))
    return out


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text())


def load_case(dataset_dir, case_id: int) -> CaseData:
    p = Path(dataset_dir) / "cases" / f"case_{case_id:03d}.json"
    return CaseData.from_json(json.loads(p.read_text()))
