"""Robust (L1 + Geman-McClure) versus fixed-weight least-squares rotation averaging on random graphs.

Prints one line per graph and the number of graphs where the robust solve is both below
the error threshold and strictly better than least squares.
"""
import argparse

import numpy as np

from closerange.geometry import align_rotations, geodesic_angle
from closerange.rotation_averaging import consensus_init, l1ra_solve
from closerange.synthetic import rotation_graph


def mean_error_deg(rs, truth, ids):
    E = rs.stack(ids)
    return float(np.degrees(geodesic_angle(E @ align_rotations(E, truth), truth)).mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--graphs", type=int, default=50)
    ap.add_argument("--min-nodes", type=int, default=10)
    ap.add_argument("--max-nodes", type=int, default=30)
    ap.add_argument("--outliers", type=float, default=0.1, help="fraction of edges replaced by random rotations")
    ap.add_argument("--noise", type=float, default=1.0, help="RMS edge noise in degrees")
    ap.add_argument("--threshold", type=float, default=0.5, help="error bound in degrees")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("-q", "--quiet", action="store_true")
    args = ap.parse_args()

    for seed in args.seeds:
        rng = np.random.default_rng(seed)
        wins, robust, plain = 0, [], []
        for k in range(args.graphs):
            n = int(rng.integers(args.min_nodes, args.max_nodes + 1))
            case = rotation_graph(rng, n, outlier_fraction=args.outliers, noise_deg=args.noise)
            init = consensus_init(case.graph)
            e1 = mean_error_deg(l1ra_solve(case.graph, init)[0], case.rotations, case.graph.nodes)
            e2 = mean_error_deg(l1ra_solve(case.graph, init, robust=False)[0], case.rotations, case.graph.nodes)
            win = e1 < args.threshold and e1 < e2
            wins += win
            robust.append(e1)
            plain.append(e2)
            if not args.quiet:
                print(f"seed {seed} graph {k:2d}: n={n:2d} edges={len(case.graph.edges):3d} "
                      f"robust {e1:.3f} deg, least squares {e2:.3f} deg{'' if win else '  <- miss'}")
        print(f"seed {seed}: robust wins {wins}/{args.graphs}; median error robust {np.median(robust):.3f} deg, "
              f"least squares {np.median(plain):.3f} deg")


if __name__ == "__main__":
    main()
