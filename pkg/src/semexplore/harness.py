"""Experiment runner: the map-plan-move loop, metrics time series and run artifacts."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import CameraModel, PanoramaModel, camera_pose
from .history import HistoryGrid, NullHistory
from .metrics import GroundTruth, MetricsConfig, cheap_metrics, reconstruction_metrics
from .objmap import ClassTable, Detection, ObjectMapConfig, ObjectStore
from .occmap import OccupancyMap, SensorModel
from .planner import Planner, PlannerConfig, PlanningError, exploration_complete
from .simulator import MavSimState, NoiseParams, YawedPath, apply_noise, load_scene, render, step_along

log = logging.getLogger(__name__)

CSV_COLUMNS = ("sim_time", "explored_volume", "frontier_count", "objects_found_pct", "bg_acc",
               "obj_acc", "bg_comp", "obj_comp", "bg_within_dist_pct", "obj_within_dist_pct",
               "round", "utility_of_goal")
CSV_VERSION = 1

EXIT_OK = 0
EXIT_BUDGET = 2
EXIT_CONFIG = 3
EXIT_PLANNING = 4

SCENE_DIR = Path(__file__).parent / "scenes"


class ConfigError(ValueError):
    pass


def resolve_scene(name) -> Path:
    """A scene path, or the name of a bundled scene (e.g. ``apartment``)."""
    p = Path(name)
    if p.exists():
        return p
    bundled = SCENE_DIR / f"{name}.yaml"
    if bundled.exists():
        return bundled
    raise ConfigError(f"scene {name!r} not found")


@dataclass
class RunConfig:
    scene: str = "apartment"
    mode: str = "semantic"
    seed: int = 0
    budget_sim_seconds: float = 600.0
    max_rounds: int | None = None
    out: str | None = None
    frame_skip: int = 1
    dt: float = 0.1
    resolution: float = 0.04
    classes: dict = field(default_factory=lambda: {"chair": 0.02, "backpack": 0.02})
    camera: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    sensor: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict)
    history_enabled: bool = True
    history_cell: float = 0.5
    history_dilate: bool = False
    history_extend_edges: bool = True
    start_free_radius: float = 0.6
    metrics_interval: float = 1.0
    full_metrics_interval: float = 30.0
    figures: bool = True
    wall_budget_seconds: float | None = None

    def __post_init__(self):
        if self.mode not in ("semantic", "classic"):
            raise ConfigError(f"mode must be 'semantic' or 'classic', got {self.mode!r}")
        if not self.budget_sim_seconds > 0:
            raise ConfigError("budget must be positive")
        if self.frame_skip < 1 or not self.dt > 0:
            raise ConfigError("frame_skip must be >= 1 and dt > 0")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("max_rounds must be positive")

    def planner_config(self) -> PlannerConfig:
        kw = dict(self.planner)
        kw.setdefault("seed", self.seed)
        try:
            if self.mode == "classic":
                return PlannerConfig.classic(**kw)
            return PlannerConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def camera_model(self) -> CameraModel:
        try:
            return CameraModel(**self.camera)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    exit_code: int
    reason: str
    sim_time: float
    rounds: int
    rows: list[dict]
    final: dict
    trace: list[str]
    wall_time: float
    out_dir: Path | None = None
    goal_records: list[dict] = field(default_factory=list)
    occupancy: OccupancyMap | None = None
    objects: ObjectStore | None = None

    def first_time(self, column: str, value: float):
        for r in self.rows:
            if r[column] >= value:
                return r["sim_time"]
        return None

    def summary(self) -> dict:
        return {"exit_code": self.exit_code, "reason": self.reason,
                "sim_time": round(self.sim_time, 6), "rounds": self.rounds,
                "wall_time": round(self.wall_time, 3),
                "time_all_objects_found": self.first_time("objects_found_pct", 100.0),
                "final": self.final}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


class Runner:
    """Owns the world, the maps and the planner for a single run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        try:
            self.scene = load_scene(resolve_scene(cfg.scene))
        except ConfigError:
            raise
        except (OSError, KeyError, ValueError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot load scene {cfg.scene}: {e}") from e
        self.cam = cfg.camera_model()
        self.pcfg = cfg.planner_config()
        self.pano = PanoramaModel.for_camera(self.cam, self.pcfg.pano_width, self.pcfg.pano_height)
        try:
            self.noise = NoiseParams(**cfg.noise)
            sensor = SensorModel(**cfg.sensor)
            self.classes = ClassTable(dict(cfg.classes), self.pcfg.d_obj)
            ocfg = ObjectMapConfig(**cfg.objects)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        sc = self.scene
        self.occ = OccupancyMap(sc.bounds_min, sc.bounds_max, cfg.resolution, sensor)
        self.objects = ObjectStore(self.classes, ocfg)
        if cfg.history_enabled:
            self.history = HistoryGrid(sc.bounds_min, sc.bounds_max, self.pano, cfg.history_cell,
                                       cfg.history_dilate, cfg.history_extend_edges)
        else:
            self.history = NullHistory(self.pano)
        ss = np.random.SeedSequence(cfg.seed)
        noise_seq, plan_seq = ss.spawn(2)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.planner = Planner(self.pcfg, self.cam, self.pano)
        self.planner.rng = np.random.default_rng(plan_seq)
        self.gt = GroundTruth(sc)
        self.mcfg = MetricsConfig(d_bg=self.pcfg.d_bg, d_obj=self.pcfg.d_obj)
        start = sc.start_position
        if not self.occ.contains(start) or sc.inside_solid(start[None], tol=cfg.start_free_radius)[0]:
            raise PlanningError(f"start position {start} is outside V or inside geometry")
        self.state = MavSimState(start.copy(), float(sc.start_yaw))
        self.occ.set_free_sphere(start, cfg.start_free_radius)
        self.n_integrations = 0

    # -- one sensor update ------------------------------------------------------------

    def sense(self):
        T = camera_pose(self.state.position, self.state.yaw)
        frame = render(self.scene, T, self.cam)
        depth = apply_noise(frame.depth, self.noise, self.noise_rng)
        self.occ.integrate_frame(depth, frame.colour, T, self.cam)
        self.history.record_invalid(depth, T, self.cam)
        dets = []
        for iid, mask in frame.masks().items():
            inst = self.scene.instance(iid)
            if inst.is_object and inst.cls in self.classes:
                dets.append(Detection(mask, inst.cls))
        rep = self.objects.process_frame(depth, frame.colour, dets, T, self.cam, self.occ)
        touched = rep.created + [oid for _, oid, _ in rep.matched + rep.contained]
        if touched:
            self.objects.merge_duplicates(touched)
        self.n_integrations += 1

    # -- the loop -------------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        wall0 = time.perf_counter()
        rows, trace, goals = [], [], []
        full = {"bg_acc": 0.0, "obj_acc": 0.0, "bg_comp": 0.0, "obj_comp": 0.0}
        last_full = -math.inf
        sim_t = 0.0
        tick = 0
        rnd = 0
        utility = 0.0
        path = None
        next_row = 0.0
        reason, code = "budget", EXIT_BUDGET
        objects_for_planner = self.objects

        def row():
            nonlocal full, last_full
            if sim_t - last_full >= cfg.full_metrics_interval - 1e-9:
                full = reconstruction_metrics(self.gt, self.occ, self.objects, self.mcfg)
                last_full = sim_t
            m = cheap_metrics(self.gt, self.occ, self.objects, self.mcfg)
            m.update(full)
            m.update(sim_time=round(sim_t, 6), round=rnd, utility_of_goal=utility)
            rows.append(m)

        self.sense()
        while True:
            if path is None:
                if cfg.max_rounds is not None and rnd >= cfg.max_rounds:
                    reason, code = "round budget", EXIT_BUDGET
                    break
                try:
                    res = self.planner.plan_round(self.occ, objects_for_planner, self.history,
                                                  self.state.position, self.state.yaw)
                except PlanningError as e:
                    log.error("planning failed: %s", e)
                    reason, code = f"planning failure: {e}", EXIT_PLANNING
                    break
                rnd += 1
                log.info("round %d t=%.1f gain=%.4g frontiers=%d objects=%d wall=%.0fs", rnd,
                         sim_t, res.best_gain, self.occ.frontier_count, len(self.objects),
                         time.perf_counter() - wall0)
                trace.append(self.planner.trace_record(rnd, sim_t, res, self.state.position,
                                                       self.state.yaw))
                done = exploration_complete(self.occ.frontier_count, self.occ,
                                            objects_for_planner, res.best_gain, self.pcfg,
                                            self.n_integrations)
                if done or res.goal is None:
                    reason, code = "exploration complete", EXIT_OK
                    utility = 0.0
                    row()
                    break
                gc = res.goal_candidate
                utility = gc.utility
                goals.append({"round": rnd, "eval": gc.eval_position.tolist(), "yaw": gc.yaw,
                              "g": gc.g, "source": gc.source})
                path = YawedPath(res.path, res.yaws)
                self.state = MavSimState(self.state.position, self.state.yaw, 0.0)
                row()
            self.state, arrived = step_along(self.state, path, cfg.dt, self.pcfg.v_max,
                                             self.pcfg.w_max)
            tick += 1
            sim_t = tick * cfg.dt
            if arrived or tick % cfg.frame_skip == 0:
                self.sense()
            if arrived:
                path = None
            if sim_t >= next_row + cfg.metrics_interval - 1e-9:
                next_row = sim_t
                row()
            if sim_t >= cfg.budget_sim_seconds - 1e-9:
                reason, code = "sim-time budget", EXIT_BUDGET
                break
            if cfg.wall_budget_seconds and time.perf_counter() - wall0 > cfg.wall_budget_seconds:
                reason, code = "wall-time budget", EXIT_BUDGET
                break
        full = reconstruction_metrics(self.gt, self.occ, self.objects, self.mcfg)
        final = cheap_metrics(self.gt, self.occ, self.objects, self.mcfg)
        final.update(full)
        final.update(free_volume=self.gt.free_volume(self.occ), n_objects=len(self.objects))
        final["explored_fraction"] = final["explored_volume"] / final["free_volume"]
        return RunResult(code, reason, sim_t, rnd, rows, final, trace,
                         time.perf_counter() - wall0, goal_records=goals,
                         occupancy=self.occ, objects=self.objects)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_artifacts(result: RunResult, cfg: RunConfig, runner: Runner, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(f"# metrics csv v{CSV_VERSION}\n" + metrics_csv(result.rows))
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in result.trace))
    summary = result.summary()
    summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    runner.occ.export_ply(out / "background.ply")
    runner.objects.export_ply(out)
    runner.occ.save(out / "occupancy.map")
    runner.history.dump_pgm(out / "history")
    if cfg.figures:
        from .report import render_report
        render_report(result.rows, out)
    result.out_dir = out
    return out


def run(cfg: RunConfig) -> RunResult:
    runner = Runner(cfg)
    result = runner.run()
    if cfg.out:
        write_artifacts(result, cfg, runner, cfg.out)
    return result
