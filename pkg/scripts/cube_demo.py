"""Render the cube, run the whole pipeline on it and score the result against ground truth."""
import argparse
import json
import os
import time

import numpy as np
import yaml

from closerange.cli import main as closerange
from closerange.geometry import align_rotations, geodesic_angle, umeyama
from closerange.sparse import read_ply, read_poses
from closerange.synthetic import scene_distance, write_cube_dataset


def score(out_dir, truth):
    poses = read_poses(os.path.join(out_dir, "cube", "poses.txt"))
    ids = sorted(poses)
    E = np.array([poses[i].rotation for i in ids])
    T = np.array([truth["cameras"][i]["rotation"] for i in ids])
    rot = np.degrees(geodesic_angle(E @ align_rotations(E, T), T))
    C = np.array([poses[i].center for i in ids])
    s, R, t = umeyama(C, np.array([truth["cameras"][i]["center"] for i in ids]))
    cloud = read_ply(os.path.join(out_dir, "cube", "cloud.ply"))
    d = scene_distance(s * cloud.points @ R.T + t)
    rms = float(np.sqrt(np.mean(d**2)))
    print(f"cameras posed: {len(ids)} of {len(truth['cameras'])}")
    print(f"rotation error after alignment: max {rot.max():.3f} deg, mean {rot.mean():.3f} deg")
    print(f"cloud: {len(cloud)} points, RMS distance to the true surface {rms:.4f} "
          f"({100 * rms / truth['diameter']:.2f}% of the scene diameter)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="cube_demo", help="scratch directory for the dataset and the run")
    ap.add_argument("--views", type=int, default=12)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = os.path.join(args.work, "data")
    truth_path = os.path.join(data, "cube_truth.json")
    if not os.path.exists(truth_path):
        write_cube_dataset(data, n_views=args.views, seed=args.seed)
    with open(truth_path) as fh:
        truth = json.load(fh)
    cfg = os.path.join(args.work, "run.yaml")
    with open(cfg, "w") as fh:
        yaml.safe_dump({"dataset": "data", "output": "out", "focal_px": truth["focal_px"], "seed": args.seed,
                        "threads": args.threads}, fh)
    t0 = time.perf_counter()
    code = closerange(["all", "--config", cfg])
    print(f"pipeline exit code {code} after {time.perf_counter() - t0:.1f} s")
    if code == 0:
        score(os.path.join(args.work, "out"), truth)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
