"""Deterministic synthetic stereo scenes with exact ground-truth disparity.

A scene stacks fronto-parallel textured planes as horizontal bands, farther
planes at the top, nearer (larger-disparity) planes at the bottom. Each
plane gets an integer disparity, so the right view is an exact column shift
of the plane's texture canvas and every ground-truth value is exact. The
top-to-bottom depth ordering gives a monocular cue that makes the task
learnable across scenes, while band boundaries and disparity values stay
randomized per scene.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError
from .rng import keyed_rng

__all__ = ["SceneSpec", "Scene", "generate", "generate_dataset", "load_dataset",
           "scene_dir", "DEFAULT_FOCAL_BASELINE"]

DEFAULT_FOCAL_BASELINE = 150.0  # pixels * meters; depth = fb / disparity_px

_FILES = ("left", "right", "disp", "mask")


@dataclass
class SceneSpec:
    """Parameters of the procedural scene family."""

    height: int = 64
    width: int = 128
    planes: int = 4
    d_min: float = 2.0
    d_max: float = 14.0
    seed: int = 0
    focal_baseline: float = DEFAULT_FOCAL_BASELINE

    def __post_init__(self):
        if self.height < 8 or self.width < 16:
            raise ConfigError(f"scene size {self.height}x{self.width} too small")
        if not 0 <= self.d_min <= self.d_max:
            raise ConfigError(f"need 0 <= d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if self.d_max >= self.width / 4:
            raise ConfigError(
                f"d_max {self.d_max} must stay below width/4 = {self.width / 4}")
        if self.planes < 1 or self.planes > self.height // 4:
            raise ConfigError(f"planes must lie in [1, height//4], got {self.planes}")
        if int(self.d_max) - int(np.ceil(self.d_min)) + 1 < self.planes:
            raise ConfigError(
                f"disparity range [{self.d_min}, {self.d_max}] holds fewer than "
                f"{self.planes} distinct integer disparities")


@dataclass
class Scene:
    """One generated sample: images in [0,1], disparity in pixels, validity mask."""

    left: np.ndarray    # (1,3,h,w)
    right: np.ndarray   # (1,3,h,w)
    disparity: np.ndarray  # (1,1,h,w), pixels, left-view ground truth
    valid: np.ndarray   # (1,1,h,w), 1 where the left pixel is visible in the right view


def _plane_texture(rng: np.random.Generator, h: int, w_ext: int) -> np.ndarray:
    """Blocky colored noise plus gradients, clipped inside (0,1)."""
    base = rng.uniform(0.25, 0.75, (3, 1, 1))
    ch, cw = (h + 7) // 8, (w_ext + 7) // 8
    coarse = rng.uniform(-1.0, 1.0, (3, ch, cw))
    coarse = np.kron(coarse, np.ones((1, 8, 8)))[:, :h, :w_ext]
    fine = rng.uniform(-1.0, 1.0, (3, h, w_ext))
    gx = rng.uniform(-0.15, 0.15) * np.linspace(-1.0, 1.0, w_ext)[None, None, :]
    gy = rng.uniform(-0.15, 0.15) * np.linspace(-1.0, 1.0, h)[None, :, None]
    tex = base + 0.22 * coarse + 0.06 * fine + gx + gy
    return np.clip(tex, 0.02, 0.98).astype(np.float32)


def _band_rows(rng: np.random.Generator, h: int, planes: int) -> list[tuple[int, int]]:
    cuts = [0]
    for k in range(1, planes):
        jitter = rng.uniform(-0.25, 0.25)
        cuts.append(int(round(h * (k + jitter) / planes)))
    cuts.append(h)
    return [(cuts[i], cuts[i + 1]) for i in range(planes)]


def generate(spec: SceneSpec, index: int) -> Scene:
    """Build scene `index` of the family; deterministic in (spec.seed, index)."""
    rng = keyed_rng(spec.seed, index)
    h, w, planes = spec.height, spec.width, spec.planes
    d_lo = int(np.ceil(spec.d_min))
    d_hi = int(spec.d_max)
    disps = np.sort(rng.choice(np.arange(d_lo, d_hi + 1), size=planes, replace=False))
    bands = _band_rows(rng, h, planes)
    w_ext = w + d_hi

    left = np.empty((3, h, w), dtype=np.float32)
    right = np.empty((3, h, w), dtype=np.float32)
    disp = np.empty((h, w), dtype=np.float32)
    for (y0, y1), d in zip(bands, disps):
        tex = _plane_texture(rng, y1 - y0, w_ext)
        left[:, y0:y1, :] = tex[:, :, :w]
        right[:, y0:y1, :] = tex[:, :, d:d + w]
        disp[y0:y1, :] = np.float32(d)
    xs = np.arange(w, dtype=np.float32)[None, :]
    valid = (xs - disp >= 0.0).astype(np.float32)
    return Scene(left=left[None], right=right[None],
                 disparity=disp[None, None], valid=valid[None, None])


def scene_dir(root, split: str, index: int) -> Path:
    return Path(root) / split / f"{index:04d}"


def _write_scene(root, split: str, index: int, scene: Scene) -> None:
    d = scene_dir(root, split, index)
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_tensor(d / "left.mptr", scene.left)
    fileio.write_tensor(d / "right.mptr", scene.right)
    fileio.write_tensor(d / "disp.mptr", scene.disparity)
    fileio.write_tensor(d / "mask.mptr", scene.valid)


def _worker_count() -> int:
    env = os.environ.get("MASKPRUNE_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError as e:
            raise ConfigError(f"MASKPRUNE_THREADS must be an integer, got {env!r}") from e
        if n < 1:
            raise ConfigError(f"MASKPRUNE_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def generate_dataset(spec: SceneSpec, count: int, root, split: str) -> None:
    """Generate `count` scenes under root/split/; parallel but output-identical.

    Scenes are keyed by their index alone, so the worker count (capped by
    MASKPRUNE_THREADS) cannot change a single byte of the output.
    """
    workers = min(_worker_count(), count) or 1

    def job(i: int) -> None:
        _write_scene(root, split, i, generate(spec, i))

    if workers == 1:
        for i in range(count):
            job(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, range(count)))


def load_dataset(root, split: str) -> list[Scene]:
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {base}")
    scenes = []
    for d in sorted(base.iterdir()):
        if not d.is_dir():
            continue
        arrays = {name: fileio.read_tensor(d / f"{name}.mptr") for name in _FILES}
        scenes.append(Scene(left=arrays["left"], right=arrays["right"],
                            disparity=arrays["disp"], valid=arrays["mask"]))
    if not scenes:
        raise FileNotFoundError(f"no scenes found under {base}")
    return scenes
