"""Structure-aware PnP on synthetic vessel trees.

For a handful of random trees and C-arm views, project the tree, estimate the
camera from the 2D branches alone, and report the pose and reprojection error.

    python demos/pose_recovery.py [n_trees]
"""

import sys

import numpy as np

from vascreg.geometry import decompose_branches, project_branch, rotation_angle_between
from vascreg.sapnp import estimate_frame_pose, reprojection_rms
from vascreg.synth import DataConfig, TreeConfig, camera_orbit, generate_tree


def main(n_trees: int = 5) -> None:
    cfg = DataConfig()
    rng = np.random.default_rng(0)
    print(f"{'tree':>4} {'branches':>8} {'rot err (rad)':>14} {'trans err (mm)':>15} {'rms (px)':>9}")
    for seed in range(n_trees):
        tree = generate_tree(TreeConfig(), seed)
        b3d, _ = decompose_branches(tree)
        cam = camera_orbit(cfg, 1, rng)[0]
        b2d = [project_branch(cam, b) for b in b3d]
        fp = estimate_frame_pose(b3d, b2d, cfg.K, cfg.sapnp)
        est = fp.result.camera
        X = np.concatenate([b.points for b in b3d])
        x = np.concatenate([b.points for b in b2d])
        print(f"{seed:>4} {len(b3d):>8} {rotation_angle_between(est.R, cam.R):>14.2e} "
              f"{np.linalg.norm(est.t - cam.t):>15.3f} {reprojection_rms(est, X, x):>9.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
