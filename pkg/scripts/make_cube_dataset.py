"""Render the textured-cube test object: a ring of views plus a ground-truth json."""
import argparse
import time

from closerange.synthetic import write_cube_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", help="dataset directory; the object folder is created inside it")
    ap.add_argument("--name", default="cube")
    ap.add_argument("--views", type=int, default=12)
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=480)
    ap.add_argument("--focal-px", type=float, default=700.0)
    ap.add_argument("--elevation", type=float, default=55.0, help="camera elevation in degrees")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.perf_counter()
    truth = write_cube_dataset(args.root, args.name, args.views, args.width, args.height,
                               args.focal_px, args.elevation, args.seed)
    print(f"wrote {len(truth['cameras'])} views to {args.root}/{args.name} in {time.perf_counter() - t0:.1f} s")
    print(f"ground truth: {args.root}/{args.name}_truth.json (scene diameter {truth['diameter']:.3f})")


if __name__ == "__main__":
    main()
