"""Online mapping loop, ablation presets, evaluation and the uncertainty-weight sweep."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from onlinesplat import io
from onlinesplat.core import KEYFRAME, CameraFrame, GaussianMap, Intrinsics, Pose
from onlinesplat.deformation import rigid_deform, simulate_gba
from onlinesplat.frontend_sim import (
    SceneSpec,
    Tracker,
    TrajectorySpec,
    assign_roles,
    generate_scene,
    generate_trajectory,
    observe,
    select_keyframes,
)
from onlinesplat.losses import LossWeights, depth_l1, psnr, ssim
from onlinesplat.mapping import (
    LearningRates,
    OptimizerState,
    detect_unexplored,
    filter_points,
    insert_gaussians,
    lift_depth,
    optimize_step,
    prune,
)
from onlinesplat.nvs import UncertaintyWeights, build_candidate_set, select_views
from onlinesplat.rasterizer import DEFAULT_SETTINGS, RenderSettings, render_pose

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class FrontendConfig:
    kind: str = "synthetic"  # synthetic | tum
    tum_dir: str = ""
    tum_max_dt: float = 0.02
    tum_depth_scale: float = 5000.0
    max_frames: int = 0  # 0 keeps every frame
    width: int = 128
    height: int = 128
    fov_deg: float = 60.0
    depth_noise: float = 0.0
    rgb_noise: float = 0.0
    flow_threshold_px: float = 8.0
    # fraction of the way each drifted pose moves toward truth at a GBA event
    gba_rho: float = 1.0


@dataclass
class SceneConfig:
    gaussian_count: int = 500
    extent: float = 4.0
    beta_min: float = 0.8
    beta_max: float = 2.0
    palette: str = "textured-clusters"
    scale_min: float = 0.08
    scale_max: float = 0.3
    clusters: int = 8


@dataclass
class TrajectoryConfig:
    kind: str = "orbit"
    frames: int = 300
    frame_rate: float = 30.0
    radius: float = 3.0
    height: float = 2.0
    revolutions: float = 1.5
    rotation_noise: float = 0.002
    translation_noise: float = 0.003


@dataclass
class FlagsConfig:
    gba: bool = True
    deformation: bool = True
    smoothness_loss: bool = True
    nvs: bool = True


@dataclass
class LossConfig:
    l1: float = 0.95
    ssim: float = 0.2
    depth: float = 0.2
    smooth: float = 0.1


@dataclass
class NVSConfig:
    shape_weight: float = 0.7
    gradient_weight: float = 0.3
    k: int = 10
    gap: int = 3
    candidate_cap: int = 100
    carryover: int = 20


@dataclass
class OptimConfig:
    iters_per_keyframe: int = 60
    iters_per_nvs: int = 300
    window: int = 30
    gba_every: int = 30
    prune_floor: float = 0.005
    tile: int = 16
    psnr_threshold_db: float = 20.0
    filter_k: int = 8
    filter_std: float = 2.0
    voxel_factor: float = 8.0
    lr_mean: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_beta: float = 2e-3


@dataclass
class RenderConfig:
    # 1/255, the usual splatting cutoff; the library default is far lower
    alpha_min: float = 1.0 / 255.0
    background: float = 0.0

    def settings(self) -> RenderSettings:
        return RenderSettings(background=(self.background,) * 3, alpha_min=self.alpha_min)


@dataclass
class EvalConfig:
    stride: int = 1
    holdout_every: int = 7
    save_renders: int = 4


METHOD_FLAGS = {
    "A": FlagsConfig(gba=False, deformation=False, smoothness_loss=False, nvs=False),
    "B": FlagsConfig(gba=True, deformation=True, smoothness_loss=False, nvs=False),
    # depth initialization from the tracker's disparity is already how every
    # variant seeds Gaussians here, so C adds nothing over B
    "C": FlagsConfig(gba=True, deformation=True, smoothness_loss=False, nvs=False),
    "D": FlagsConfig(gba=True, deformation=True, smoothness_loss=True, nvs=False),
    "E": FlagsConfig(gba=True, deformation=True, smoothness_loss=True, nvs=True),
}

_SECTIONS = {
    "frontend": FrontendConfig,
    "scene": SceneConfig,
    "trajectory": TrajectoryConfig,
    "flags": FlagsConfig,
    "loss": LossConfig,
    "nvs": NVSConfig,
    "optim": OptimConfig,
    "render": RenderConfig,
    "eval": EvalConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    flags: FlagsConfig = field(default_factory=FlagsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    nvs: NVSConfig = field(default_factory=NVSConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = ""
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        f = self.flags
        if f.deformation and not f.gba:
            raise ConfigError("deformation requires gba")
        if f.nvs and not f.deformation:
            raise ConfigError("nvs requires deformation")
        for section in _SECTIONS:
            for fld in dataclasses.fields(_SECTIONS[section]):
                v = getattr(getattr(self, section), fld.name)
                if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                    raise ConfigError(f"{section}.{fld.name} must be nonnegative")
        if self.nvs.shape_weight + self.nvs.gradient_weight <= 0:
            raise ConfigError("uncertainty weights must not both be zero")
        if self.nvs.k < 1:
            raise ConfigError("nvs.k must be at least 1")
        if self.optim.window < 1 or self.optim.gba_every < 1 or self.optim.tile < 1:
            raise ConfigError("optim.window, optim.gba_every and optim.tile must be at least 1")
        if self.eval.stride < 1:
            raise ConfigError("eval.stride must be at least 1")
        if self.frontend.kind not in ("synthetic", "tum"):
            raise ConfigError(f"unknown frontend kind {self.frontend.kind!r}")
        if self.frontend.kind == "tum" and not self.frontend.tum_dir:
            raise ConfigError("frontend.tum_dir is required for the tum frontend")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def method(cls, name: str, **overrides) -> "RunConfig":
        """Preset for one of the ablation variants A-E."""
        try:
            flags = copy.copy(METHOD_FLAGS[name.upper()])
        except KeyError as exc:
            raise ConfigError(f"unknown method {name!r}; expected one of A-E") from exc
        cfg = cls(flags=flags)
        return cfg.replace(**overrides) if overrides else cfg

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level or dotted ("optim.iters_per_nvs") fields replaced."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_dotted(d, key.replace("__", "."), value)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        method = d.pop("method", None)
        kwargs = {}
        for key, value in d.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                names = {f.name for f in dataclasses.fields(_SECTIONS[key])}
                unknown = set(value) - names
                if unknown:
                    raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
                kwargs[key] = _SECTIONS[key](**value)
            elif key in ("seed", "out", "workers"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if method is not None:
            if "flags" in d:
                raise ConfigError("give either method or flags, not both")
            try:
                kwargs["flags"] = copy.copy(METHOD_FLAGS[str(method).upper()])
            except KeyError as exc:
                raise ConfigError(f"unknown method {method!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        import yaml

        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)

    def to_yaml(self) -> str:
        import yaml

        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    # -- derived objects ------------------------------------------------------

    def scene_spec(self) -> SceneSpec:
        s = self.scene
        return SceneSpec(
            seed=self.seed,
            gaussian_count=s.gaussian_count,
            extent=s.extent,
            beta_range=(s.beta_min, s.beta_max),
            palette=s.palette,
            scale_range=(s.scale_min, s.scale_max),
            clusters=s.clusters,
        )

    def trajectory_spec(self) -> TrajectorySpec:
        t = self.trajectory
        return TrajectorySpec(
            kind=t.kind,
            frames=t.frames,
            frame_rate=t.frame_rate,
            radius=t.radius,
            height=t.height,
            revolutions=t.revolutions,
            rotation_noise=t.rotation_noise,
            translation_noise=t.translation_noise,
            seed=self.seed,
        )

    def intrinsics(self) -> Intrinsics:
        f = self.frontend
        return Intrinsics.from_fov(f.width, f.height, f.fov_deg)

    def loss_weights(self) -> LossWeights:
        lw = self.loss
        return LossWeights(lw.l1, lw.ssim, lw.depth, lw.smooth if self.flags.smoothness_loss else 0.0)

    def uncertainty_weights(self) -> UncertaintyWeights:
        return UncertaintyWeights(self.nvs.shape_weight, self.nvs.gradient_weight)

    def learning_rates(self) -> LearningRates:
        o = self.optim
        return LearningRates(o.lr_mean, o.lr_color, o.lr_opacity, o.lr_scale, o.lr_rotation, o.lr_beta)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"unknown config section {p!r}")
        cur = cur[p]
    if parts[-1] not in cur and parts[-1] != "method":
        raise ConfigError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def config_fields():
    """(dotted name, type, default) for every overridable RunConfig field."""
    out = []
    base = RunConfig()
    for section, cls in _SECTIONS.items():
        for fld in dataclasses.fields(cls):
            out.append((f"{section}.{fld.name}", type(getattr(getattr(base, section), fld.name)), fld))
    return out


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@dataclass
class FrameSequence:
    frames: list  # CameraFrame at true poses, roles assigned
    true_poses: list
    reference: Optional[GaussianMap] = None
    # every frame with its depth, before roles were assigned
    observed: list = field(default_factory=list)

    @property
    def keyframe_ids(self) -> list:
        return [f.id for f in self.frames if f.is_keyframe]


def synthetic_sequence(config: RunConfig) -> FrameSequence:
    """Observe the reference scene along the configured trajectory."""
    reference = generate_scene(config.scene_spec())
    poses = generate_trajectory(config.trajectory_spec())
    intr = config.intrinsics()
    rng = np.random.default_rng(config.seed + 2)
    dt = 1.0 / config.trajectory.frame_rate if config.trajectory.frame_rate > 0 else 1.0
    frames = [
        observe(reference, p, intr, config.frontend.depth_noise, config.frontend.rgb_noise, rng, i,
                settings=config.render.settings(), timestamp=i * dt)
        for i, p in enumerate(poses)
    ]
    roles = select_keyframes(frames, config.frontend.flow_threshold_px, probe_points=reference.means)
    return FrameSequence(assign_roles(frames, roles), poses, reference, frames)


def tum_sequence(config: RunConfig) -> FrameSequence:
    fc = config.frontend
    seq = io.load_tum(fc.tum_dir, fc.tum_max_dt, fc.tum_depth_scale, _tum_intrinsics(fc.tum_dir))
    frames = seq.frames()
    if fc.max_frames:
        frames = frames[: fc.max_frames]
    roles = select_keyframes(frames, fc.flow_threshold_px)
    return FrameSequence(assign_roles(frames, roles), [f.pose for f in frames], None, frames)


def _tum_intrinsics(directory) -> Optional[Intrinsics]:
    import json

    p = Path(directory) / "intrinsics.json"
    if p.exists():
        return Intrinsics(**json.loads(p.read_text()))
    return None


def build_sequence(config: RunConfig) -> FrameSequence:
    if config.frontend.kind == "tum":
        return tum_sequence(config)
    return synthetic_sequence(config)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ViewMetrics:
    frame_id: int
    psnr: float
    ssim: float
    depth_l1: Optional[float] = None


GROUPS = ("train", "selected", "heldout")


@dataclass
class EvalReport:
    views: dict = field(default_factory=dict)  # group -> list[ViewMetrics]
    means: dict = field(default_factory=dict)  # group -> {psnr, ssim, depth_l1, count}
    gaussian_count: int = 0
    map_size_bytes: int = 0
    keyframe_count: int = 0
    frame_count: int = 0
    selections: list = field(default_factory=list)
    events: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # wall-clock figures; excluded from the deterministic part
    timing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.recompute_means()

    def recompute_means(self) -> None:
        self.means = {g: _group_means(v) for g, v in self.views.items()}

    def mean(self, group: str, metric: str = "psnr") -> float:
        return self.means.get(group, _group_means([]))[metric]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "views": {g: [dataclasses.asdict(m) for m in v] for g, v in self.views.items()},
            "means": self.means,
            "gaussian_count": self.gaussian_count,
            "map_size_bytes": self.map_size_bytes,
            "keyframe_count": self.keyframe_count,
            "frame_count": self.frame_count,
            "selections": self.selections,
            "events": self.events,
            "config": self.config,
        }
        if include_timing:
            d["timing"] = self.timing
        return d

    def deterministic(self) -> dict:
        return self.to_dict(include_timing=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        views = {g: [ViewMetrics(**m) for m in v] for g, v in d.get("views", {}).items()}
        keys = ("gaussian_count", "map_size_bytes", "keyframe_count", "frame_count", "selections", "events", "config", "timing")
        return cls(views=views, **{k: d[k] for k in keys if k in d})


def _group_means(views: Sequence[ViewMetrics]) -> dict:
    if not views:
        return {"psnr": 0.0, "ssim": 0.0, "depth_l1": 0.0, "count": 0}
    depths = [v.depth_l1 for v in views if v.depth_l1 is not None]
    return {
        "psnr": float(np.mean([v.psnr for v in views])),
        "ssim": float(np.mean([v.ssim for v in views])),
        "depth_l1": float(np.mean(depths)) if depths else 0.0,
        "count": len(views),
    }


def view_metrics(gmap: GaussianMap, frame: CameraFrame, settings: RenderSettings = DEFAULT_SETTINGS) -> ViewMetrics:
    out = render_pose(gmap, frame.pose, frame.intrinsics, settings)
    d = None
    if frame.depth is not None:
        d = depth_l1(out.depth, frame.depth, frame.depth > 0)
    return ViewMetrics(int(frame.id), psnr(out.color, frame.image), ssim(out.color, frame.image), d)


def evaluate(
    gmap: GaussianMap,
    frames: Sequence[CameraFrame],
    stride: int = 1,
    group: str = "views",
    settings: RenderSettings = DEFAULT_SETTINGS,
) -> EvalReport:
    """Render every ``stride``-th frame and score it against the frame's image."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    views = [view_metrics(gmap, f, settings) for f in list(frames)[::stride]]
    return EvalReport(views={group: views}, gaussian_count=len(gmap), map_size_bytes=io.ply_size(gmap))


def render_views(gmap: GaussianMap, poses, intrinsics: Intrinsics, out_dir, prefix: str = "view",
                 settings: RenderSettings = DEFAULT_SETTINGS) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, pose in enumerate(poses):
        p = out_dir / f"{prefix}_{i:04d}.png"
        io.save_png(render_pose(gmap, pose, intrinsics, settings).color, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# the online loop
# ---------------------------------------------------------------------------


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str, frame: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.frame = frame

    def to_dict(self) -> dict:
        return {"error": str(self), "stage": self.stage, "frame": self.frame, "type": type(self.__cause__).__name__}


@dataclass
class RunResult:
    report: EvalReport
    gmap: GaussianMap
    estimated_poses: list
    sequence: FrameSequence


class OnlineMapper:
    """Backend state machine fed one tracked frame at a time."""

    def __init__(self, config: RunConfig, settings: Optional[RenderSettings] = None):
        self.cfg = config
        self.settings = settings or config.render.settings()
        self.gmap = GaussianMap()
        self.state: Optional[OptimizerState] = None
        self.weights = config.loss_weights()
        self.frames: dict[int, CameraFrame] = {}  # frame id -> frame at its estimated pose
        self.keyframes: list[int] = []
        self.nonkeyframes: list[int] = []
        self.heldout: list[int] = []
        self.selected: set[int] = set()
        self.carryover: list[int] = []
        self.selections: list[dict] = []
        self.events: list[dict] = []

    # estimated poses change at GBA events; frames are re-posed on demand
    def window(self) -> list[CameraFrame]:
        return [self.frames[i] for i in self.keyframes[-self.cfg.optim.window:]]

    def add_nonkeyframe(self, frame: CameraFrame) -> None:
        self.frames[frame.id] = frame
        # every n-th non-keyframe is withheld from training and selection
        n = self.cfg.eval.holdout_every
        if n and (len(self.nonkeyframes) + len(self.heldout) + 1) % n == 0:
            self.heldout.append(frame.id)
        else:
            self.nonkeyframes.append(frame.id)

    def add_keyframe(self, frame: CameraFrame) -> int:
        o = self.cfg.optim
        self.frames[frame.id] = frame
        self.keyframes.append(frame.id)
        self.gmap.keyframe_anchors[frame.id] = frame.pose
        rendered = render_pose(self.gmap, frame.pose, frame.intrinsics, self.settings)
        mask = detect_unexplored(rendered.color, frame.image, o.tile, o.psnr_threshold_db)
        pc = filter_points(lift_depth(frame), o.filter_k, o.filter_std)
        added = insert_gaussians(self.gmap, pc, frame.id, mask, tile=o.tile, voxel_factor=o.voxel_factor)
        if self.state is None and len(self.gmap):
            self.state = OptimizerState(self.cfg.learning_rates().scaled_for(self.gmap.extent()))
        self.train(self.window(), o.iters_per_keyframe)
        return added

    def train(self, frames: list, iterations: int) -> None:
        if self.state is None or not frames:
            return
        self.state.cursor = 0
        for _ in range(iterations):
            optimize_step(self.gmap, frames, self.weights, self.state, self.settings)

    def due_for_gba(self) -> bool:
        return len(self.keyframes) % self.cfg.optim.gba_every == 0

    def apply_gba(self, updates: dict) -> None:
        """Re-pose every frame in ``updates`` and, with deformation on, move the map along."""
        for fid, (_, new) in updates.items():
            if fid in self.frames:
                self.frames[fid] = self.frames[fid].with_pose(new)
        if self.cfg.flags.deformation:
            anchors = {kf: updates[kf] for kf in self.gmap.keyframe_anchors if kf in updates}
            rigid_deform(self.gmap, anchors)

    def nvs_round(self) -> None:
        c = self.cfg.nvs
        recent = self.keyframes[-self.cfg.optim.window:]
        span = (recent[0], recent[-1])
        ids = build_candidate_set(self.nonkeyframes, span, self.carryover, c.candidate_cap)
        if not ids:
            self.events.append({"keyframe": self.keyframes[-1], "nvs": "no candidates"})
            return
        report = select_views(
            self.gmap, [self.frames[i] for i in ids], c.k, c.gap, self.cfg.uncertainty_weights(), self.settings, c.carryover
        )
        self.carryover = report.carryover
        self.selected.update(report.selected)
        self.selections.append(report.to_dict())
        train = [self.frames[i] for i in report.selected] + self.window()
        self.train(train, self.cfg.optim.iters_per_nvs)
        self.gmap.reset_grad_accum()

    def prune(self) -> int:
        removed, _ = prune(self.gmap, self.cfg.optim.prune_floor, self.state)
        return removed


def run(config: RunConfig, sequence: Optional[FrameSequence] = None, settings: Optional[RenderSettings] = None) -> EvalReport:
    return run_full(config, sequence, settings).report


def run_full(config: RunConfig, sequence: Optional[FrameSequence] = None, settings: Optional[RenderSettings] = None) -> RunResult:
    """Consume the sequence in order and return the evaluated map."""
    config.validate()
    settings = settings or config.render.settings()
    seq = sequence if sequence is not None else build_sequence(config)
    out_dir = Path(config.out) if config.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    mapper = OnlineMapper(config, settings)
    tracker = Tracker(config.trajectory_spec(), len(seq.frames), seed=config.seed + 1)
    est: list[Pose] = []
    t0 = time.perf_counter()
    stage, fid = "tracking", None
    try:
        for frame in seq.frames:
            fid = frame.id
            k = len(est)
            stage = "tracking"
            if k == 0:
                est.append(seq.true_poses[0])
            else:
                est.append(tracker.track(k, est[-1], seq.true_poses[k - 1], seq.true_poses[k]))
            tracked = frame.with_pose(est[-1])
            if not frame.is_keyframe:
                mapper.add_nonkeyframe(tracked)
                continue
            stage = "mapping"
            added = mapper.add_keyframe(tracked)
            mapper.events.append({"keyframe": fid, "inserted": added, "gaussians": len(mapper.gmap)})
            if not mapper.due_for_gba():
                continue
            event = {"keyframe": fid, "gba": config.flags.gba}
            if config.flags.gba:
                stage = "gba"
                ids = list(range(k + 1))
                updates = simulate_gba(seq.true_poses[: k + 1], est, config.frontend.gba_rho, ids)
                est = [updates[i][1] for i in ids]
                mapper.apply_gba(updates)
            if config.flags.nvs:
                stage = "nvs"
                mapper.nvs_round()
            stage = "prune"
            event["pruned"] = mapper.prune()
            mapper.events.append(event)
    except Exception as exc:
        if out_dir:
            io.save_ply(mapper.gmap, out_dir / "map_partial.ply")
            io.save_report({"error": str(exc), "stage": stage, "frame": fid}, out_dir / "error.json")
        raise PipelineError(f"{stage} failed at frame {fid}: {exc}", stage, fid) from exc
    backend_s = time.perf_counter() - t0

    report = _final_report(config, seq, mapper, est, settings)
    report.timing = {
        "backend_seconds": backend_s,
        "fps": len(seq.frames) / backend_s if backend_s > 0 else 0.0,
    }
    if out_dir:
        _write_outputs(out_dir, config, seq, mapper, est, report, settings)
    return RunResult(report, mapper.gmap, est, seq)


def _final_report(config, seq, mapper: OnlineMapper, est, settings) -> EvalReport:
    stride = config.eval.stride
    train = [mapper.frames[i] for i in mapper.keyframes]
    selected = [mapper.frames[i] for i in sorted(mapper.selected)]
    # held-out views are scored at their true poses
    heldout = [seq.frames[i] for i in mapper.heldout]
    views = {
        "train": [view_metrics(mapper.gmap, f, settings) for f in train[::stride]],
        "selected": [view_metrics(mapper.gmap, f, settings) for f in selected[::stride]],
        "heldout": [view_metrics(mapper.gmap, f, settings) for f in heldout[::stride]],
    }
    return EvalReport(
        views=views,
        gaussian_count=len(mapper.gmap),
        map_size_bytes=io.ply_size(mapper.gmap),
        keyframe_count=len(mapper.keyframes),
        frame_count=len(seq.frames),
        selections=mapper.selections,
        events=mapper.events,
        config=config.to_dict(),
    )


def _write_outputs(out_dir: Path, config, seq, mapper, est, report: EvalReport, settings) -> None:
    io.save_ply(mapper.gmap, out_dir / "map.ply")
    io.save_report(report.to_dict(), out_dir / "report.json")
    (out_dir / "config.yaml").write_text(config.to_yaml())
    n = config.eval.save_renders
    if n and mapper.heldout:
        pick = mapper.heldout[:: max(1, len(mapper.heldout) // n)][:n]
        intr = seq.frames[pick[0]].intrinsics
        render_views(mapper.gmap, [seq.true_poses[i] for i in pick], intr, out_dir / "renders", "heldout", settings)
        for j, i in enumerate(pick):
            io.save_png(seq.frames[i].image, out_dir / "renders" / f"heldout_{j:04d}_target.png")


# ---------------------------------------------------------------------------
# uncertainty-weight sweep
# ---------------------------------------------------------------------------

WEIGHT_GRID = ((0.0, 1.0), (0.1, 0.9), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (0.9, 0.1), (1.0, 0.0))


def _sweep_cell(args):
    config, a1, a2, sequence = args
    try:
        cfg = config.replace(**{"nvs.shape_weight": a1, "nvs.gradient_weight": a2, "out": ""})
        rep = run(cfg, sequence)
        return {"alpha1": a1, "alpha2": a2, "report": rep.to_dict(), "error": None}
    except Exception as exc:  # one failing cell must not stop the rest
        return {"alpha1": a1, "alpha2": a2, "report": None, "error": f"{type(exc).__name__}: {exc}"}


SWEEP_COLUMNS = ("alpha1", "alpha2", "heldout_psnr", "heldout_ssim", "train_psnr", "selected_psnr", "gaussians", "error")


def sweep_table(cells: list) -> list[dict]:
    rows = []
    for c in cells:
        r = c["report"]
        m = r["means"] if r else {}
        rows.append({
            "alpha1": c["alpha1"],
            "alpha2": c["alpha2"],
            "heldout_psnr": m.get("heldout", {}).get("psnr"),
            "heldout_ssim": m.get("heldout", {}).get("ssim"),
            "train_psnr": m.get("train", {}).get("psnr"),
            "selected_psnr": m.get("selected", {}).get("psnr"),
            "gaussians": r["gaussian_count"] if r else None,
            "error": c["error"],
        })
    return rows


def sweep_uncertainty_weights(config: RunConfig, grid=WEIGHT_GRID, workers: Optional[int] = None) -> list[dict]:
    """One run per (alpha1, alpha2) cell on a shared sequence.

    Every cell yields a dict with ``report`` (or ``error``); a JSON and CSV
    table is written when the config names an output directory.
    """
    grid = [(float(a), float(b)) for a, b in grid]
    for a, b in grid:
        if a < 0 or b < 0 or a + b <= 0:
            raise ConfigError(f"invalid uncertainty weights ({a}, {b})")
    seq = build_sequence(config)
    jobs = [(config, a, b, seq) for a, b in grid]
    workers = workers or config.workers
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        io.save_report({"cells": cells}, out / "sweep.json")
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(sweep_table(cells))
    return cells
