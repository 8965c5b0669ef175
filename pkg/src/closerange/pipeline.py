"""End-to-end orchestration over per-object photo sets, with per-stage caching and reports.

Stages run in order: extract, match, rotations, reconstruct, evaluate. Each
stage output is keyed by a hash of everything it consumes; a stage is
recomputed only when its key changes, and the keys live in
``<out>/<object>/cache.json``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .errors import CloseRangeError, ConfigError, DimensionMismatch
from .imaging import CameraIntrinsics, GrayImage, load_image, load_rgb, save_image
from .liop import Features, LiopParams, describe
from .matching import Match, MatcherParams, PoseGraphEdge, match_descriptors, verify_epipolar
from .quality import SetEvaluation, evaluate_set, render_pointcloud, save_ssim_map, write_ssim_csv
from .rotation_averaging import (
    IRLS_EPS, PoseGraph, RotationSet, l1ra_solve, consensus_init, read_rotations, write_residuals,
    write_rotations,
)
from .scale_space import DetectorParams, detect
from .sparse import (
    build_tracks, export_ply, read_ply, read_poses, recover_positions,
    sample_colors, triangulate_tracks, write_poses, write_scene,
)

log = logging.getLogger("closerange")

STAGES = ("extract", "match", "rotations", "reconstruct", "evaluate")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


@dataclass(frozen=True)
class SolverParams:
    max_outer: int = 100
    tol_rad: float = 1e-6
    eps: float = IRLS_EPS
    refine: bool = True
    refine_scale_deg: float = 5.0
    init_trials: int = 200
    # edges still this far off after averaging are left out of position recovery
    max_edge_residual_deg: float = 5.0


@dataclass(frozen=True)
class ReconstructionParams:
    max_reproj_px: float = 4.0  # at full resolution
    min_parallax_deg: float = 1.0
    binary_ply: bool = False
    colors: bool = True


@dataclass(frozen=True)
class EvaluationParams:
    k1: float = 0.01
    k2: float = 0.03
    splat_px: int = 1
    background: float = 0.0
    save_images: bool = True


_SECTIONS = {
    "detector": DetectorParams,
    "descriptor": LiopParams,
    "matcher": MatcherParams,
    "solver": SolverParams,
    "reconstruction": ReconstructionParams,
    "evaluation": EvaluationParams,
}


@dataclass
class PipelineConfig:
    dataset: str
    output: str = "out"
    objects: list[str] | None = None
    focal_px: float | None = None
    focal_mm: float | None = None
    sensor_mm: float | None = None
    downscale: int = 1
    seed: int = 0
    threads: int = 1
    detector: DetectorParams = field(default_factory=DetectorParams)
    descriptor: LiopParams = field(default_factory=LiopParams)
    matcher: MatcherParams = field(default_factory=MatcherParams)
    solver: SolverParams = field(default_factory=SolverParams)
    reconstruction: ReconstructionParams = field(default_factory=ReconstructionParams)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        has_px = self.focal_px is not None
        has_mm = self.focal_mm is not None or self.sensor_mm is not None
        if has_px == has_mm:
            raise ConfigError("give exactly one intrinsics specification: focal_px, or focal_mm with sensor_mm")
        if has_mm and (self.focal_mm is None or self.sensor_mm is None):
            raise ConfigError("focal_mm and sensor_mm must be given together")
        for name in ("focal_px", "focal_mm", "sensor_mm"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if int(self.downscale) != self.downscale or self.downscale < 1:
            raise ConfigError("downscale must be a positive integer")
        if int(self.threads) != self.threads or self.threads < 1:
            raise ConfigError("threads must be a positive integer")
        d, m, s, r, e = self.detector, self.matcher, self.solver, self.reconstruction, self.evaluation
        checks = [
            (d.octaves >= 1 and d.sublevels >= 1, "detector octaves and sublevels must be >= 1"),
            (0 < d.contrast_percentile < 1, "detector contrast_percentile must lie in (0, 1)"),
            (d.base_sigma > 0 and d.threshold >= 0, "detector base_sigma > 0 and threshold >= 0"),
            (self.descriptor.neighbors >= 2 and self.descriptor.bins >= 1, "descriptor needs neighbors >= 2, bins >= 1"),
            (self.descriptor.patch_diameter >= 2 * self.descriptor.neighbor_radius + 3, "descriptor patch too small"),
            (0 < m.ratio < 1, "matcher ratio must lie in (0, 1)"),
            (m.threshold_px > 0 and m.iterations >= 1 and 0 < m.confidence < 1, "matcher RANSAC settings invalid"),
            (m.min_inliers >= 8, "matcher min_inliers must be >= 8"),
            (s.max_outer >= 1 and s.tol_rad > 0 and s.eps > 0, "solver settings must be positive"),
            (r.max_reproj_px > 0 and r.min_parallax_deg >= 0, "reconstruction thresholds invalid"),
            (e.k1 > 0 and e.k2 > 0 and e.splat_px >= 0, "evaluation constants must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | None = None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in data:
            raise ConfigError("config needs a dataset path")
        for name, typ in _SECTIONS.items():
            section = data.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"{name} must be a mapping")
            fields = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - fields
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
            data[name] = typ(**section)
        if base_dir is not None:
            for key in ("dataset", "output"):
                if key in data and not os.path.isabs(data[key]):
                    data[key] = os.path.normpath(os.path.join(base_dir, data[key]))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path) -> "PipelineConfig":
        try:
            with open(os.fspath(path)) as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(os.fspath(path))))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ObjectResult:
    name: str
    status: str = "pending"  # completed | failed | skipped
    error: str = ""
    counts: dict[str, int] = field(default_factory=dict)
    cache_hits: dict[str, bool] = field(default_factory=dict)
    ssim: SetEvaluation | None = None


@dataclass
class RunReport:
    stage_seconds: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    peak_memory_mb: float | None = None
    objects: list[ObjectResult] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.stage_seconds.values()))

    @property
    def all_completed(self) -> bool:
        return bool(self.objects) and all(o.status == "completed" for o in self.objects)

    def ssim_rows(self) -> list[tuple[str, int, float | None]]:
        return [o.ssim.row() for o in self.objects if o.status == "completed" and o.ssim is not None]

    def to_dict(self) -> dict:
        return {
            "stage_seconds": self.stage_seconds,
            "total_seconds": self.total_seconds,
            "peak_memory_mb": self.peak_memory_mb,
            "objects": [
                {"name": o.name, "status": o.status, "error": o.error, "counts": o.counts,
                 "cache_hits": o.cache_hits,
                 "ssim": None if o.ssim is None else {"photo_count": o.ssim.photo_count, "average": o.ssim.average}}
                for o in self.objects
            ],
        }


def peak_memory_mb() -> float | None:
    """Peak resident set size of this process, where the platform reports it."""
    try:
        import resource
    except ImportError:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return peak / (1024.0 * 1024.0) if sys.platform == "darwin" else peak / 1024.0


def _digest(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def discover_objects(root: str, only: list[str] | None = None) -> dict[str, list[str]]:
    """Map each subdirectory of ``root`` to its sorted image files."""
    if not os.path.isdir(root):
        raise ConfigError(f"dataset directory {root!r} does not exist")
    found = {}
    for name in sorted(os.listdir(root)):
        folder = os.path.join(root, name)
        if not os.path.isdir(folder):
            continue
        images = sorted(
            os.path.join(folder, f) for f in os.listdir(folder) if f.lower().endswith(IMAGE_EXTENSIONS)
        )
        found[name] = images
    if only is not None:
        missing = [o for o in only if o not in found]
        if missing:
            raise ConfigError(f"objects not found under {root}: {missing}")
        found = {o: found[o] for o in only}
    return found


# ---------------------------------------------------------------- match files

def write_match_file(path, cam_i: str, cam_j: str, edge: PoseGraphEdge | None, reason: str = "") -> None:
    lines = [f"pair {cam_i} {cam_j}"]
    if edge is None:
        lines.append(f"status failed {reason}")
    else:
        lines.append("status ok")
        lines.append("rotation " + " ".join(f"{v:.17g}" for v in edge.relative_rotation.ravel()))
        lines.append("direction " + " ".join(f"{v:.17g}" for v in edge.relative_direction))
        lines.append(f"inliers {edge.inlier_count}")
        lines += [f"{m.index_a} {m.index_b} {m.distance:.9g}" for m in edge.inlier_matches]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_match_file(path) -> tuple[str, str, PoseGraphEdge | None, str]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    _, cam_i, cam_j = lines[0].split()
    status = lines[1].split(maxsplit=2)
    if status[1] != "ok":
        return cam_i, cam_j, None, status[2] if len(status) > 2 else ""
    R = np.array([float(v) for v in lines[2].split()[1:]]).reshape(3, 3)
    d = np.array([float(v) for v in lines[3].split()[1:]])
    n = int(lines[4].split()[1])
    matches = []
    for row in lines[5 : 5 + n]:
        a, b, dist = row.split()
        matches.append(Match(int(a), int(b), float(dist)))
    return cam_i, cam_j, PoseGraphEdge(cam_i, cam_j, R, d, n, matches), ""


# ---------------------------------------------------------------- per-object run

class _ObjectRunner:
    def __init__(self, cfg: PipelineConfig, name: str, images: list[str], report: RunReport, result: ObjectResult):
        self.cfg = cfg
        self.name = name
        self.paths = images
        self.ids = [os.path.splitext(os.path.basename(p))[0] for p in images]
        self.report = report
        self.result = result
        self.dir = os.path.join(cfg.output, name)
        self.cache_path = os.path.join(self.dir, "cache.json")
        self.cache = {}
        if os.path.exists(self.cache_path):
            with open(self.cache_path) as fh:
                self.cache = json.load(fh)

    # cache helpers
    def _fresh(self, artifact: str, key: str, *files) -> bool:
        return self.cache.get(artifact) == key and all(os.path.exists(f) for f in files)

    def _remember(self, artifact: str, key: str) -> None:
        self.cache[artifact] = key
        tmp = self.cache_path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.cache, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.cache_path)

    def _timed(self, stage, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.report.stage_seconds[stage] += time.perf_counter() - t0

    def _map(self, fn, items):
        if self.cfg.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def intrinsics(self, shape) -> CameraIntrinsics:
        h, w = shape
        k = self.cfg.downscale
        if self.cfg.focal_px is not None:
            f_full = self.cfg.focal_px
        else:
            with Image.open(self.paths[0]) as im:
                full_w = im.size[0]
            f_full = self.cfg.focal_mm / self.cfg.sensor_mm * full_w
        return CameraIntrinsics.centered(f_full / k, w, h)

    def run(self, last_stage: str) -> None:
        os.makedirs(self.dir, exist_ok=True)
        upto = STAGES.index(last_stage)
        self.image_keys = {i: _file_digest(p) for i, p in zip(self.ids, self.paths)}
        self.images = {i: load_image(p, self.cfg.downscale if self.cfg.downscale > 1 else None)
                       for i, p in zip(self.ids, self.paths)}
        shapes = {img.shape for img in self.images.values()}
        if len(shapes) != 1:
            raise DimensionMismatch(f"photos of {self.name} differ in size: {sorted(shapes)}")
        self.K = self.intrinsics(shapes.pop())
        self.result.counts["photos"] = len(self.ids)
        self._timed("extract", self.extract)
        if upto >= 1:
            self._timed("match", self.match)
        if upto >= 2:
            self._timed("rotations", self.rotations)
        if upto >= 3:
            self._timed("reconstruct", self.reconstruct)
        if upto >= 4:
            self._timed("evaluate", self.evaluate)

    # stages
    def extract(self) -> None:
        cfg = self.cfg
        fdir = os.path.join(self.dir, "features")
        os.makedirs(fdir, exist_ok=True)
        params = _digest("extract", dataclasses.asdict(cfg.detector), dataclasses.asdict(cfg.descriptor), cfg.downscale)
        self.feature_keys = {i: _digest(params, self.image_keys[i]) for i in self.ids}

        def one(i):
            path = os.path.join(fdir, f"{i}.feat")
            if self._fresh(f"features/{i}", self.feature_keys[i], path):
                return Features.load(path, expect=cfg.descriptor), True
            img = self.images[i]
            feats = describe(img, detect(img, cfg.detector, i), cfg.descriptor)
            feats.image_id = i
            feats.save(path)
            # reload so fresh and cached runs see identical float32 descriptors
            return Features.load(path, expect=cfg.descriptor), False

        results = self._map(one, self.ids)
        self.features = {i: f for i, (f, _) in zip(self.ids, results)}
        for i, (_, hit) in zip(self.ids, results):
            if not hit:
                self._remember(f"features/{i}", self.feature_keys[i])
        self.result.cache_hits["extract"] = all(hit for _, hit in results)
        self.result.counts["keypoints"] = int(sum(len(f) for f in self.features.values()))

    def match(self) -> None:
        cfg = self.cfg
        mdir = os.path.join(self.dir, "matches")
        os.makedirs(mdir, exist_ok=True)
        pairs = list(itertools.combinations(self.ids, 2))
        scale = 1.0 / cfg.downscale
        K_key = (self.K.focal_px, self.K.principal_point, self.K.image_size)
        self.match_keys = {}
        for n, (a, b) in enumerate(pairs):
            self.match_keys[(a, b)] = _digest("match", dataclasses.asdict(cfg.matcher), cfg.seed, n, K_key,
                                              self.feature_keys[a], self.feature_keys[b])

        def one(job):
            n, (a, b) = job
            path = os.path.join(mdir, f"{a}__{b}.txt")
            if self._fresh(f"matches/{a}__{b}", self.match_keys[(a, b)], path):
                return read_match_file(path)[2:], True
            fa, fb = self.features[a], self.features[b]
            raw = match_descriptors(fa.descriptors, fb.descriptors, cfg.matcher.ratio)
            seed = int(np.random.SeedSequence([cfg.seed, n]).generate_state(1)[0])
            try:
                edge = verify_epipolar(
                    raw, fa.points(), fb.points(), self.K, cfg.matcher.threshold_px * scale,
                    cfg.matcher.iterations, cam_i=a, cam_j=b, min_inliers=cfg.matcher.min_inliers,
                    confidence=cfg.matcher.confidence, min_parallax_deg=cfg.matcher.min_parallax_deg, seed=seed,
                )
                reason = ""
            except CloseRangeError as exc:
                edge, reason = None, f"{type(exc).__name__}: {exc}"
            write_match_file(path, a, b, edge, reason)
            return (edge, reason), False

        results = self._map(one, list(enumerate(pairs)))
        for (a, b), (_, hit) in zip(pairs, results):
            if not hit:
                self._remember(f"matches/{a}__{b}", self.match_keys[(a, b)])
        self.edges = [edge for (edge, _), _ in results if edge is not None]
        self.result.cache_hits["match"] = all(hit for _, hit in results)
        self.result.counts["pairs"] = len(pairs)
        self.result.counts["edges"] = len(self.edges)
        self.result.counts["matches"] = int(sum(e.inlier_count for e in self.edges))

    def rotations(self) -> None:
        cfg = self.cfg
        rot_path = os.path.join(self.dir, "rotations.txt")
        res_path = os.path.join(self.dir, "rotation_residuals.csv")
        graph = PoseGraph(self.ids, self.edges).largest_component()
        self.graph = graph
        solver = dataclasses.asdict(cfg.solver)
        solver.pop("max_edge_residual_deg")  # consumed by reconstruct
        key = _digest("rotations", solver, cfg.seed,
                      sorted(self.match_keys.values()))
        self.rotation_key = key
        if self._fresh("rotations", key, rot_path, res_path):
            self.rotation_set = read_rotations(rot_path)
            self.residuals = _read_residuals(res_path)
            self.result.cache_hits["rotations"] = True
        else:
            if len(graph.nodes) < 2:
                raise CloseRangeError(f"{self.name}: no verified image pair")
            s = cfg.solver
            init = consensus_init(graph, trials=s.init_trials, seed=cfg.seed)
            rs, rep = l1ra_solve(graph, init, s.max_outer, s.tol_rad, s.eps, refine=s.refine,
                                 refine_scale_deg=s.refine_scale_deg)
            if not rep.converged:
                log.warning("%s: rotation averaging hit max_outer=%d", self.name, s.max_outer)
            write_rotations(rs, rot_path)
            write_residuals(rep, res_path)
            self.rotation_set = rs
            self.residuals = {e: r for e, r in zip(rep.edges, rep.residuals_deg)}
            self._remember("rotations", key)
            self.result.cache_hits["rotations"] = False
        self.result.counts["cameras"] = len(self.rotation_set)

    def reconstruct(self) -> None:
        cfg = self.cfg
        r = cfg.reconstruction
        paths = {n: os.path.join(self.dir, n) for n in ("poses.txt", "cloud.ply", "scene.json")}
        key = _digest("reconstruct", dataclasses.asdict(r), cfg.solver.max_edge_residual_deg, self.rotation_key)
        self.reconstruct_key = key
        if self._fresh("reconstruct", key, *paths.values()):
            self.poses = read_poses(paths["poses.txt"])
            self.cloud = read_ply(paths["cloud.ply"])
            self.result.cache_hits["reconstruct"] = True
        else:
            keep = [e for e in self.graph.edges
                    if self.residuals.get((e.cam_i, e.cam_j), 0.0) <= cfg.solver.max_edge_residual_deg]
            graph = PoseGraph(self.graph.nodes, keep).largest_component()
            if self.rotation_set.gauge not in graph.nodes:
                raise CloseRangeError(f"{self.name}: gauge camera lost its consistent edges")
            rs = RotationSet({c: self.rotation_set[c] for c in graph.nodes}, self.rotation_set.gauge)
            self.poses = recover_positions(graph, rs)
            matches = {(e.cam_i, e.cam_j): e.inlier_matches for e in graph.edges}
            tracks = build_tracks(matches)
            points = {i: self.features[i].points() for i in self.ids}
            scale = 1.0 / cfg.downscale
            cloud, stats = triangulate_tracks(tracks, self.poses, self.K, points, r.max_reproj_px * scale,
                                              r.min_parallax_deg, cfg.threads)
            if r.colors and len(cloud):
                rgb = {i: load_rgb(p, cfg.downscale if cfg.downscale > 1 else None)
                       for i, p in zip(self.ids, self.paths)}
                cloud.colors = sample_colors(cloud, rgb, points)
            write_poses(self.poses, paths["poses.txt"])
            export_ply(cloud, paths["cloud.ply"], binary=r.binary_ply)
            write_scene(paths["scene.json"], [os.path.basename(p) for p in self.paths], self.K,
                        "poses.txt", "cloud.ply")
            # evaluate the stored float32 cloud so cached and fresh runs render alike
            self.cloud = read_ply(paths["cloud.ply"])
            self.result.counts["tracks"] = len(tracks)
            self._remember("reconstruct", key)
            self.result.cache_hits["reconstruct"] = False
        self.result.counts["points"] = len(self.cloud)

    def evaluate(self) -> None:
        cfg = self.cfg
        e = cfg.evaluation
        path = os.path.join(self.dir, "ssim.csv")
        key = _digest("evaluate", dataclasses.asdict(e), self.reconstruct_key, sorted(self.image_keys.items()))
        posed = [i for i in self.ids if i in self.poses]
        if self._fresh("evaluate", key, path):
            self.result.ssim = _read_ssim_csv(path, self.name)
            self.result.cache_hits["evaluate"] = True
            return
        renders = [render_pointcloud(self.cloud, self.poses[i], self.K, e.splat_px, e.background, f"render_{i}")
                   for i in posed]
        originals = [GrayImage(self.images[i].data, i) for i in posed]
        evaluation = evaluate_set(renders, originals, set_id=self.name, k1=e.k1, k2=e.k2)
        write_ssim_csv(evaluation, path)
        if e.save_images:
            rdir = os.path.join(self.dir, "renders")
            os.makedirs(rdir, exist_ok=True)
            for img, res, i in zip(renders, evaluation.pairs, posed):
                save_image(img, os.path.join(rdir, f"{i}.png"))
                save_ssim_map(res, os.path.join(rdir, f"{i}_ssim.png"))
        self.result.ssim = evaluation
        self._remember("evaluate", key)
        self.result.cache_hits["evaluate"] = False


def _read_residuals(path) -> dict[tuple[str, str], float]:
    out = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            i, j, r, _ = line.strip().split(",")
            out[(i, j)] = float(r)
    return out


class _StoredPair:
    def __init__(self, render: str, original: str, value: float):
        self.image_pair = (render, original)
        self.mean_ssim = value


def _read_ssim_csv(path, set_id: str) -> SetEvaluation:
    pairs = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            r, o, v = line.strip().split(",")
            pairs.append(_StoredPair(r, o, float(v)))
    return SetEvaluation(set_id, pairs)


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None, debug: bool = False) -> RunReport:
    """Run every object up to the last requested stage; upstream stages are served from cache when fresh."""
    stages = list(stages or STAGES)
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; choose from {list(STAGES)}")
    last = max(stages, key=STAGES.index)
    objects = discover_objects(cfg.dataset, cfg.objects)
    if not objects:
        raise ConfigError(f"no object directories under {cfg.dataset}")
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "config.yaml"), "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    report = RunReport()
    for name, images in objects.items():
        result = ObjectResult(name)
        report.objects.append(result)
        if len(images) < 2:
            result.status = "skipped"
            result.error = f"{len(images)} photo(s); at least 2 are needed"
            log.warning("%s: %s", name, result.error)
            continue
        try:
            _ObjectRunner(cfg, name, images, report, result).run(last)
            result.status = "completed"
        except (CloseRangeError, np.linalg.LinAlgError, OSError, ValueError) as exc:
            if debug:
                raise
            result.status = "failed"
            result.error = f"{type(exc).__name__}: {exc}"
            log.error("%s failed: %s", name, result.error)
    report.peak_memory_mb = peak_memory_mb()
    write_reports(report, cfg.output)
    return report


# ---------------------------------------------------------------- reports

def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def report_csv(report: RunReport, method: str = "closerange") -> str:
    """Per-set SSIM rows with the all-set average, a blank line, then the resource row."""
    rows = report.ssim_rows()
    lines = ["set,photo_count,ssim_average"]
    for set_id, count, avg in rows:
        lines.append(f"{set_id},{count},{_fmt(avg)}")
    avgs = [avg for _, _, avg in rows if avg is not None]
    overall = float(np.mean(avgs)) if avgs else None
    lines.append(f"Average from All Sets,{sum(c for _, c, _ in rows)},{_fmt(overall)}")
    lines.append("")
    lines.append("method,ssim_value,time_spent_s,ram_usage_mb")
    ram = "" if report.peak_memory_mb is None else f"{report.peak_memory_mb:.1f}"
    lines.append(f"{method},{_fmt(overall)},{report.total_seconds:.3f},{ram}")
    return "\n".join(lines) + "\n"


def report_text(report: RunReport) -> str:
    out = ["closerange run summary", ""]
    for o in report.objects:
        line = f"{o.name}: {o.status}"
        if o.error:
            line += f" ({o.error})"
        out.append(line)
        if o.counts:
            out.append("  " + ", ".join(f"{k}={v}" for k, v in o.counts.items()))
        if o.ssim is not None and o.ssim.average is not None:
            out.append(f"  ssim average over {o.ssim.photo_count} photos: {o.ssim.average:.4f}")
    out.append("")
    out.append("stage times (s): " + ", ".join(f"{s}={t:.2f}" for s, t in report.stage_seconds.items()))
    mem = "n/a" if report.peak_memory_mb is None else f"{report.peak_memory_mb:.1f} MB"
    out.append(f"total {report.total_seconds:.2f} s, peak memory {mem}")
    return "\n".join(out) + "\n"


def write_reports(report: RunReport, out_dir) -> None:
    with open(os.path.join(out_dir, "report.csv"), "w") as fh:
        fh.write(report_csv(report))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report_text(report))
    with open(os.path.join(out_dir, "run_report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)


def load_report(out_dir) -> RunReport:
    """Rebuild a RunReport from a finished run's ``run_report.json`` and per-object ``ssim.csv`` files."""
    path = os.path.join(out_dir, "run_report.json")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        data = json.load(fh)
    report = RunReport(dict(data["stage_seconds"]), data.get("peak_memory_mb"))
    for o in data["objects"]:
        res = ObjectResult(o["name"], o["status"], o["error"], o["counts"], o.get("cache_hits", {}))
        csv_path = os.path.join(out_dir, o["name"], "ssim.csv")
        if res.status == "completed" and os.path.exists(csv_path):
            res.ssim = _read_ssim_csv(csv_path, o["name"])
        report.objects.append(res)
    return report
