"""Synthetic RGB-D clips with analytic 3D flow.

Each clip shows one "actor" shape following a motion program plus up to two
static distractors over a static textured background. Appearance is drawn
independently of the program, so the activity label is only visible through
motion.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import atf
from .codec import Codebook, build_codebook, codeword_histogram

log = logging.getLogger(__name__)

BACKGROUND_DEPTH = (0.9, 0.98)
OBJECT_DEPTH = (0.15, 0.85)


@dataclass(frozen=True)
class MotionProgram:
    """Parametric actor trajectory; ``ranges`` maps a parameter to a fixed value or (lo, hi)."""

    id: int
    name: str
    kind: str  # "linear" | "wave" | "circle"
    ranges: dict = field(default_factory=dict)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for key in sorted(self.ranges):
            bounds = self.ranges[key]
            out[key] = float(rng.uniform(*bounds)) if isinstance(bounds, (tuple, list)) else float(bounds)
        return out

    def displacement(self, t: np.ndarray, p: dict) -> np.ndarray:
        """(len(t), 3) offset from the start position; zero at t=0."""
        t = np.asarray(t, dtype=np.float64)
        zero = np.zeros_like(t)
        if self.kind == "linear":
            d = [p.get("vx", 0.0) * t, p.get("vy", 0.0) * t, p.get("vz", 0.0) * t]
        elif self.kind == "wave":
            ph = p.get("phase", 0.0)
            d = [p["amp"] * (np.sin(p["omega"] * t + ph) - np.sin(ph)), zero, zero]
        elif self.kind == "circle":
            ph = p.get("phase", 0.0)
            ang = p["omega"] * t + ph
            d = [p["radius"] * (np.cos(ang) - np.cos(ph)), p["radius"] * (np.sin(ang) - np.sin(ph)), zero]
        else:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        return np.stack(d, axis=1)

    def steps(self, n_frames: int, p: dict) -> np.ndarray:
        """(n_frames - 1, 3) per-interval displacement x(t+1) - x(t)."""
        if self.kind == "linear":
            # exact velocity; differencing v*t would leave rounding residue
            v = [p.get("vx", 0.0), p.get("vy", 0.0), p.get("vz", 0.0)]
            return np.tile(np.asarray(v, dtype=np.float64), (n_frames - 1, 1))
        return np.diff(self.displacement(np.arange(n_frames), p), axis=0)


def default_programs() -> list[MotionProgram]:
    tau = 2 * np.pi
    return [
        MotionProgram(0, "raise", "linear", {"vy": (-2.6, -1.4)}),
        MotionProgram(1, "lower", "linear", {"vy": (1.4, 2.6)}),
        MotionProgram(2, "wave", "wave", {"amp": (5.0, 8.0), "omega": (0.4, 0.55), "phase": (0.0, tau)}),
        MotionProgram(3, "push", "linear", {"vz": (-0.045, -0.025)}),
        MotionProgram(4, "pull", "linear", {"vz": (0.025, 0.045)}),
        MotionProgram(5, "circle", "circle", {"radius": (5.0, 8.0), "omega": (0.35, 0.5), "phase": (0.0, tau)}),
    ]


def static_program(id: int = 0) -> MotionProgram:
    return MotionProgram(id, "static", "linear", {})


def constant_velocity(vx: float, vy: float, vz: float, id: int = 0) -> MotionProgram:
    return MotionProgram(id, "constant", "linear", {"vx": vx, "vy": vy, "vz": vz})


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 12
    patch: int = 4
    horizon: int = 8
    size_range: tuple = (5.0, 8.0)
    max_distractors: int = 2

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"frame size {self.height}x{self.width} is not divisible by patch size M={self.patch}"
            )
        if self.n_frames < self.horizon + 2:
            raise ValueError(f"n_frames={self.n_frames} too short for a frame pair plus {self.horizon} steps")


@dataclass
class ClipRecord:
    frames: np.ndarray  # (T_total, H, W, 4): RGB then depth
    flows: np.ndarray  # (T_total - 1, H, W, 3)
    label: int
    seed: int


@dataclass
class _Shape:
    kind: str
    half: float
    color: np.ndarray
    start: np.ndarray  # (x, y, depth)
    offsets: np.ndarray  # (T_total, 3)
    steps: np.ndarray  # (T_total - 1, 3)

    def mask(self, xx, yy, t):
        cx, cy = self.start[0] + self.offsets[t, 0], self.start[1] + self.offsets[t, 1]
        if self.kind == "rect":
            return (np.abs(xx - cx) <= self.half) & (np.abs(yy - cy) <= self.half)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= self.half**2

    def texture(self, xx, yy, t):
        cx, cy = self.start[0] + self.offsets[t, 0], self.start[1] + self.offsets[t, 1]
        checker = (np.floor((xx - cx) / 3.0) + np.floor((yy - cy) / 3.0)) % 2
        return 0.75 + 0.25 * checker


def _place(lo_off: float, hi_off: float, half: float, size: int, rng, what: str) -> float:
    lo = half - lo_off
    hi = size - 1 - half - hi_off
    if lo > hi:
        raise ValueError(f"trajectory leaves the frame along {what}: needs {hi_off - lo_off + 2 * half:.1f} px, have {size - 1}")
    return float(rng.uniform(lo, hi))


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rgb = np.empty((H, W, 3))
    for c in range(3):
        fx, fy = rng.uniform(0.05, 0.3, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        rgb[..., c] = 0.5 + 0.2 * np.sin(fx * xx + ph[0]) * np.cos(fy * yy + ph[1])
    near, far = BACKGROUND_DEPTH
    depth = near + (far - near) * yy / max(H - 1, 1)
    return rgb, depth


def generate_clip(program: MotionProgram, config: SceneConfig, seed: int) -> ClipRecord:
    """Render one clip; a pure function of its arguments."""
    config.validate()
    rng = np.random.default_rng(seed)
    H, W, T = config.height, config.width, config.n_frames
    params = program.sample(rng)
    offsets = program.displacement(np.arange(T), params)

    half = float(rng.uniform(*config.size_range))
    x0 = _place(offsets[:, 0].min(), offsets[:, 0].max(), half, W, rng, "x")
    y0 = _place(offsets[:, 1].min(), offsets[:, 1].max(), half, H, rng, "y")
    dlo, dhi = OBJECT_DEPTH[0] - offsets[:, 2].min(), OBJECT_DEPTH[1] - offsets[:, 2].max()
    if dlo > dhi:
        raise ValueError(f"trajectory leaves the depth range {OBJECT_DEPTH}")
    z0 = float(rng.uniform(dlo, dhi))
    shapes = [_Shape(str(rng.choice(["rect", "disc"])), half, rng.uniform(0.2, 1.0, 3), np.array([x0, y0, z0]), offsets, program.steps(T, params))]

    for _ in range(int(rng.integers(0, config.max_distractors + 1))):
        h = float(rng.uniform(*config.size_range))
        pos = np.array([rng.uniform(h, W - 1 - h), rng.uniform(h, H - 1 - h), rng.uniform(*OBJECT_DEPTH)])
        shapes.append(_Shape(str(rng.choice(["rect", "disc"])), h, rng.uniform(0.2, 1.0, 3), pos, np.zeros((T, 3)), np.zeros((T - 1, 3))))

    bg_rgb, bg_depth = _background(rng, H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.empty((T, H, W, 4))
    owner = np.full((T, H, W), -1)
    for t in range(T):
        depth = bg_depth.copy()
        rgb = bg_rgb.copy()
        for s_idx, s in enumerate(shapes):
            z = s.start[2] + s.offsets[t, 2]
            m = s.mask(xx, yy, t) & (z < depth)  # nearest object wins
            depth[m] = z
            rgb[m] = s.color * s.texture(xx, yy, t)[m][:, None]
            owner[t][m] = s_idx
        frames[t, ..., :3] = rgb
        frames[t, ..., 3] = depth

    flows = np.zeros((T - 1, H, W, 3))
    for s_idx, s in enumerate(shapes):
        for t in range(T - 1):
            flows[t][owner[t] == s_idx] = s.steps[t]
    return ClipRecord(frames, flows, int(program.id), int(seed))


# datasets -------------------------------------------------------------------


@dataclass
class Dataset:
    clips: list[ClipRecord]
    splits: list[str]
    config: SceneConfig
    codebook: Codebook
    k_nn: int
    scale: np.ndarray  # per-axis flow normalization
    p_tilde: np.ndarray
    programs: list[str] = field(default_factory=list)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def normalized_flows(self, i: int) -> np.ndarray:
        return self.clips[i].flows * self.scale


def _split_counts(n: int, program_index: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    rest = n - n_train
    n_val = rest // 2 + (rest % 2 if program_index % 2 == 0 else 0)
    return n_train, n_val, rest - n_val


def flow_scale(clips: list[ClipRecord], bound: float) -> np.ndarray:
    """Per-axis scale sending the largest per-clip 99th-percentile |flow| to 0.9 * bound."""
    p99 = np.zeros(3)
    for c in clips:
        p99 = np.maximum(p99, np.percentile(np.abs(c.flows).reshape(-1, 3), 99, axis=0))
    return np.where(p99 > 0, 0.9 * bound / np.where(p99 > 0, p99, 1.0), 1.0)


def _distinct_seeds(rng: np.random.Generator, n: int) -> list[int]:
    seen: list[int] = []
    while len(seen) < n:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seen:
            seen.append(s)
    return seen


def build_dataset(
    programs: list[MotionProgram],
    clips_per_program: int,
    split_seed: int,
    config: SceneConfig = SceneConfig(),
    bins_per_axis: int = 5,
    bound: float = 1.0,
    k_nn: int = 4,
) -> Dataset:
    """Generate clips, split 70/15/15 per program, and estimate the codeword prior on train."""
    if clips_per_program < 3:
        raise ValueError(f"clips_per_program must be >= 3, got {clips_per_program}")
    config.validate()
    rng = np.random.default_rng(split_seed)
    seeds = _distinct_seeds(rng, len(programs) * clips_per_program)
    clips, splits = [], []
    for pi, prog in enumerate(programs):
        own = seeds[pi * clips_per_program : (pi + 1) * clips_per_program]
        n_train, n_val, _ = _split_counts(clips_per_program, pi)
        order = rng.permutation(clips_per_program)
        for rank, j in enumerate(order):
            clips.append(generate_clip(prog, config, own[j]))
            splits.append("train" if rank < n_train else "val" if rank < n_train + n_val else "test")
    cb = build_codebook(bins_per_axis, bound)
    train = [c for c, s in zip(clips, splits) if s == "train"]
    scale = flow_scale(train, bound)
    counts = codeword_histogram((c.flows * scale for c in train), cb, config.patch)
    return Dataset(clips, splits, config, cb, k_nn, scale, counts / counts.sum(), [p.name for p in programs])


def _clip_dir(root: Path, i: int) -> Path:
    return root / "clips" / f"clip_{i:04d}"


def save_clip(clip: ClipRecord, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        atf.save(d / f"frames_{t:04d}.atf", frame)
    for t, flow in enumerate(clip.flows):
        atf.save(d / f"flow_{t:04d}.atf", flow)


def save_dataset(ds: Dataset, out: str | os.PathLike) -> Path:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (clip, split) in enumerate(zip(ds.clips, ds.splits)):
        d = _clip_dir(root, i)
        save_clip(clip, d)
        entries.append(
            {
                "path": str(d.relative_to(root)),
                "label": clip.label,
                "seed": clip.seed,
                "split": split,
                "num_frames": int(clip.frames.shape[0]),
            }
        )
    atf.save(root / "p_tilde.atf", ds.p_tilde)
    cfg = asdict(ds.config)
    manifest = {
        "clips": entries,
        "p_tilde_path": "p_tilde.atf",
        "normalization_scale": [float(s) for s in ds.scale],
        "geometry": {"H": ds.config.height, "W": ds.config.width, "M": ds.config.patch, "T": ds.config.horizon},
        "scene": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "codec": {"bins_per_axis": ds.codebook.bins_per_axis, "bound": ds.codebook.bound, "k_nn": ds.k_nn},
        "programs": ds.programs,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


class ClipLoadError(ValueError):
    pass


def _load_checked(path: Path, shape_tail: tuple) -> np.ndarray:
    if not path.exists():
        raise ClipLoadError(f"missing file: {path}")
    arr = atf.load(path)
    if arr.shape[-len(shape_tail):] != shape_tail or arr.ndim != len(shape_tail):
        raise ClipLoadError(f"{path}: shape {arr.shape}, expected {shape_tail}")
    if not np.all(np.isfinite(arr)):
        raise ClipLoadError(f"{path}: contains non-finite values")
    return arr


def load_external_flow(directory: str | os.PathLike) -> Iterator[tuple[dict, ClipRecord]]:
    """Yield (manifest entry, clip) for every clip listed in ``directory/manifest.json``.

    Frames are H x W x 4 (RGB + depth) and flows H x W x 3, one ATF1 file per
    time step; any missing, misshapen or non-finite file raises with its path.
    """
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ClipLoadError(f"missing file: {mpath}")
    manifest = json.loads(mpath.read_text())
    geo = manifest.get("geometry", {})
    for entry in manifest["clips"]:
        d = root / entry["path"]
        n = int(entry["num_frames"])
        first = d / "frames_0000.atf"
        if not first.exists():
            raise ClipLoadError(f"missing file: {first} (frame index 0)")
        H, W = geo.get("H"), geo.get("W")
        if H is None:
            H, W = atf.load(first).shape[:2]
        frames, flows = [], []
        for t in range(n):
            p = d / f"frames_{t:04d}.atf"
            if not p.exists():
                raise ClipLoadError(f"missing file: {p} (frame index {t})")
            frames.append(_load_checked(p, (H, W, 4)))
        for t in range(n - 1):
            p = d / f"flow_{t:04d}.atf"
            if not p.exists():
                raise ClipLoadError(f"missing file: {p} (flow index {t})")
            flows.append(_load_checked(p, (H, W, 3)))
        yield entry, ClipRecord(np.stack(frames), np.stack(flows), int(entry["label"]), int(entry["seed"]))


def load_dataset(directory: str | os.PathLike) -> Dataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    scene = dict(manifest["scene"])
    scene["size_range"] = tuple(scene["size_range"])
    config = SceneConfig(**scene)
    clips, splits = [], []
    for entry, clip in load_external_flow(root):
        clips.append(clip)
        splits.append(entry.get("split", "train"))
    codec = manifest["codec"]
    return Dataset(
        clips,
        splits,
        config,
        build_codebook(codec["bins_per_axis"], codec["bound"]),
        int(codec["k_nn"]),
        np.asarray(manifest["normalization_scale"], dtype=np.float64),
        atf.load(root / manifest["p_tilde_path"]),
        list(manifest.get("programs", [])),
    )
