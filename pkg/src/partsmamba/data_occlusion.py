"""Skeleton ingestion, window sampling, synthetic clips, and occlusion masks."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .resources import read_table

NTU_JOINTS = 25
SCENES = ("left_arm", "right_arm", "two_hands", "two_legs", "trunk")
NATIVE_HEADER = "# partsmamba-dataset v1: label V T then V*T*3 coordinates (joint-major, frame, xyz)"


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedFormatError(ParseError):
    pass


@dataclass
class SkeletonClip:
    joints: np.ndarray  # [V, F, 3] metres
    label: int | None = None
    source: str = ""

    def __post_init__(self):
        if self.joints.ndim != 3 or self.joints.shape[2] != 3 or self.joints.shape[1] < 1:
            raise ValueError(f"clip joints must be [V, F>=1, 3], got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise ValueError(f"clip {self.source!r} has non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.joints.shape[1]


# ---------------------------------------------------------------------------
# NTU .skeleton text format

_ACTION = re.compile(r"A(\d{3})")


def label_from_name(name: str) -> int | None:
    """0-based action id from an NTU file name (``...A007...`` -> 6)."""
    m = _ACTION.search(Path(name).name)
    return int(m.group(1)) - 1 if m else None


def motion_energy(track: np.ndarray) -> float:
    """Sum over frames of the joint-summed displacement norms of a [V, F, 3] track."""
    if track.shape[1] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(track, axis=1), axis=2).sum())


def parse_ntu_skeleton(stream: IO[str] | str, source: str = "") -> SkeletonClip:
    """Read an NTU ``.skeleton`` stream and keep the body with the most motion.

    Bodies are matched across frames by their body id; frames where the chosen
    body is absent are left at zero.
    """
    text = stream if isinstance(stream, str) else stream.read()
    lines = text.splitlines()
    pos = 0

    def next_fields(what: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {what}", pos + 1)
        pos += 1
        fields = lines[pos - 1].split()
        if not fields:
            raise ParseError(f"blank line, expected {what}", pos)
        return fields

    def next_int(what: str) -> int:
        fields = next_fields(what)
        try:
            value = int(fields[0])
        except ValueError:
            raise ParseError(f"expected integer {what}, got {fields[0]!r}", pos) from None
        if len(fields) != 1 or value < 0:
            raise ParseError(f"malformed {what}", pos)
        return value

    n_frames = next_int("frame count")
    if n_frames < 1:
        raise ParseError("clip has no frames", pos)
    bodies: dict[str, np.ndarray] = {}
    order: list[str] = []
    for f in range(n_frames):
        n_bodies = next_int("body count")
        for _ in range(n_bodies):
            body_id = next_fields("body info")[0]
            n_joints = next_int("joint count")
            if n_joints != NTU_JOINTS:
                raise UnsupportedFormatError(f"expected {NTU_JOINTS} joints, got {n_joints}", pos)
            coords = np.empty((NTU_JOINTS, 3))
            for j in range(NTU_JOINTS):
                fields = next_fields("joint line")
                if len(fields) < 3:
                    raise ParseError("joint line needs at least x y z", pos)
                try:
                    coords[j] = [float(v) for v in fields[:3]]
                except ValueError:
                    raise ParseError("non-numeric joint coordinate", pos) from None
            if body_id not in bodies:
                bodies[body_id] = np.zeros((NTU_JOINTS, n_frames, 3))
                order.append(body_id)
            bodies[body_id][:, f] = coords
    if not bodies:
        raise ParseError("no bodies in clip", pos)
    best = max(order, key=lambda b: motion_energy(bodies[b]))  # first wins ties
    name = source or getattr(stream, "name", "")
    return SkeletonClip(bodies[best], label_from_name(name) if name else None, str(name))


def write_ntu_skeleton(stream: IO[str], frames: Sequence[Sequence[tuple[str, np.ndarray]]]) -> None:
    """Write NTU layout: per frame a list of (body_id, [25, 3] coords).

    Unused per-joint fields are written as zeros; coordinates use shortest
    round-trip formatting so parsing recovers them exactly.
    """
    stream.write(f"{len(frames)}\n")
    for bodies in frames:
        stream.write(f"{len(bodies)}\n")
        for body_id, coords in bodies:
            stream.write(f"{body_id} 0 0 0 0 0 0 0 0 2\n{len(coords)}\n")
            for x, y, z in np.asarray(coords, dtype=np.float64).tolist():
                stream.write(f"{x!r} {y!r} {z!r} 0 0 0 0 0 0 0 0 2\n")


# ---------------------------------------------------------------------------
# windows and native dataset files


def window_indices(n_frames: int, window: int) -> np.ndarray:
    """Uniform-stride subsampling when long enough, loop padding otherwise."""
    if n_frames < 1:
        raise ValueError("cannot sample a window from an empty clip")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if n_frames >= window:
        return (np.arange(window) * n_frames) // window
    return np.arange(window) % n_frames


def sample_window(clip: SkeletonClip, window: int) -> np.ndarray:
    """[V, T, 3] window of ``clip``."""
    return clip.joints[:, window_indices(clip.num_frames, window)]


ROOT_JOINT = 1  # spine middle in the NTU 25-joint layout


def center_skeleton(x: np.ndarray, root: int = ROOT_JOINT) -> np.ndarray:
    """Translate [..., V, T, 3] windows so the root joint of the first frame is the origin.

    Runs before any occlusion mask, so masked entries are still exact zeros
    when they reach the model.
    """
    return x - x[..., root:root + 1, 0:1, :]


def stack_clips(clips: Sequence[SkeletonClip], window: int, dtype=np.float32,
                center: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready batch: windows [N, V, T, 3] (root-centered unless ``center=False``) and labels."""
    if not clips:
        raise ValueError("dataset is empty")
    x = np.stack([sample_window(c, window) for c in clips])
    if center:
        x = center_skeleton(x, min(ROOT_JOINT, x.shape[1] - 1))
    x = x.astype(dtype)
    y = np.array([-1 if c.label is None else c.label for c in clips], dtype=np.int64)
    return x, y


def save_dataset(path: str | Path, clips: Iterable[SkeletonClip]) -> None:
    """One clip per line: ``label V T`` then coordinates (shortest round-trip float64 text)."""
    with open(path, "w") as f:
        f.write(NATIVE_HEADER + "\n")
        for clip in clips:
            j = np.asarray(clip.joints, dtype=np.float64)
            v, t, _ = j.shape
            coords = " ".join(map(repr, j.reshape(-1).tolist()))
            f.write(f"{clip.label} {v} {t} {coords}\n")


def load_dataset(path: str | Path) -> list[SkeletonClip]:
    clips = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split()
            try:
                label, v, t = (int(tok) for tok in fields[:3])
                values = np.array([float(tok) for tok in fields[3:]], dtype=np.float64)
            except ValueError:
                raise ParseError("malformed dataset record", lineno) from None
            if values.size != v * t * 3:
                raise ParseError(f"expected {v * t * 3} coordinates, got {values.size}", lineno)
            clips.append(SkeletonClip(values.reshape(v, t, 3), label, f"{path}:{lineno}"))
    return clips


# ---------------------------------------------------------------------------
# synthetic desk-scale data

# rough NTU camera-space rest pose (metres), body ~3 m in front of the sensor
_REST = np.array([
    [0.00, -0.30, 3.0], [0.00, 0.00, 3.0], [0.00, 0.45, 3.0], [0.00, 0.60, 3.0],
    [-0.18, 0.35, 3.0], [-0.25, 0.10, 3.0], [-0.28, -0.12, 3.0], [-0.29, -0.18, 3.0],
    [0.18, 0.35, 3.0], [0.25, 0.10, 3.0], [0.28, -0.12, 3.0], [0.29, -0.18, 3.0],
    [-0.10, -0.32, 3.0], [-0.12, -0.72, 3.0], [-0.13, -1.10, 3.0], [-0.13, -1.15, 2.9],
    [0.10, -0.32, 3.0], [0.12, -0.72, 3.0], [0.13, -1.10, 3.0], [0.13, -1.15, 2.9],
    [0.00, 0.35, 3.0], [-0.30, -0.24, 3.0], [-0.26, -0.20, 3.0], [0.30, -0.24, 3.0],
    [0.26, -0.20, 3.0],
])

# joints driven by each class's designated part (distal joints move most)
_PART_JOINTS = {
    "left_arm": (5, 6, 7, 21, 22),
    "right_arm": (9, 10, 11, 23, 24),
    "left_leg": (13, 14, 15),
    "right_leg": (17, 18, 19),
    "trunk": (2, 3, 20),
}
_CLASS_PARTS = ("left_arm", "right_arm", "left_leg", "right_leg", "trunk")
SYNTH_NOISE = 0.01
SYNTH_AMPLITUDE = 0.15
SYNTH_SWAY = 0.04


def synth_class_mean(label: int, window: int) -> np.ndarray:
    """Noise-free [V, T, 3] trajectory of class ``label`` at its reference phase."""
    return _synth_clip(label, window, phase=0.0, amp_scale=1.0)


def _synth_clip(label: int, window: int, phase: float, amp_scale: float) -> np.ndarray:
    t = np.arange(window) / window
    freq = 1 + label // len(_CLASS_PARTS)
    part = _CLASS_PARTS[label % len(_CLASS_PARTS)]
    wave = np.sin(2 * np.pi * (freq * t + phase))
    clip = np.repeat(_REST[:, None, :], window, axis=1).copy()
    axis = 1 if "arm" in part else 2  # arms swing vertically, legs and trunk in depth
    for rank, j in enumerate(_PART_JOINTS[part]):
        clip[j, :, axis] += amp_scale * SYNTH_AMPLITUDE * (1 + 0.5 * rank) * wave
    # whole-body sway carries a second, weaker copy of the class signal
    sway_axis = label % 2
    clip[:, :, sway_axis] += amp_scale * SYNTH_SWAY * np.sin(2 * np.pi * (freq * t + phase + 0.25 * (label % 4)))[None, :]
    return clip


def synth_dataset(classes: int, samples: int, seed: int, window: int = 64) -> list[SkeletonClip]:
    """``samples`` clips per class; class k oscillates one body part at a class-specific
    rate, with a weaker whole-body sway, jittered phase/amplitude and 1 cm noise."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    clips = []
    for label in range(classes):
        for i in range(samples):
            phase = rng.uniform(-0.05, 0.05)
            amp = rng.uniform(0.8, 1.2)
            joints = _synth_clip(label, window, phase, amp)
            joints = joints + rng.normal(0.0, SYNTH_NOISE, size=joints.shape)
            clips.append(SkeletonClip(joints, label, f"synth:{label}:{i}"))
    return clips


# ---------------------------------------------------------------------------
# occlusion masks


@dataclass(frozen=True)
class OcclusionMask:
    visible: np.ndarray  # bool [V, T]

    def __post_init__(self):
        if self.visible.ndim != 2 or self.visible.dtype != bool:
            raise ValueError("mask must be a boolean [V, T] grid")

    def __and__(self, other: "OcclusionMask") -> "OcclusionMask":
        return OcclusionMask(self.visible & other.visible)

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape

    @classmethod
    def full(cls, v: int, t: int) -> "OcclusionMask":
        return cls(np.ones((v, t), dtype=bool))


def load_occlusion_table(path: str | Path = "ntu25.occlusion") -> dict[str, tuple[int, ...]]:
    return {name: tuple(ids) for name, ids in read_table(path)}


def mask_parts(scene: str, table: dict[str, Sequence[int]], v: int, t: int) -> OcclusionMask:
    """Hide the scene's joints in every frame."""
    if scene not in table:
        raise KeyError(f"unknown occlusion scene {scene!r}; known: {', '.join(table)}")
    joints = list(table[scene])
    if any(j < 0 or j >= v for j in joints):
        raise ValueError(f"scene {scene!r} names joints outside 0..{v - 1}")
    visible = np.ones((v, t), dtype=bool)
    visible[joints] = False
    return OcclusionMask(visible)


def _count(portion: float, t: int, rounding) -> int:
    if not 0.0 <= portion <= 1.0:
        raise ValueError(f"portion must lie in [0, 1], got {portion}")
    return int(rounding(portion * t + 1e-9))


def mask_temporal(portion: float, mode: str, t: int, seed: int | None = None, v: int = NTU_JOINTS) -> OcclusionMask:
    """Hide floor(portion*T) consecutive frames, starting at random or centred."""
    m = _count(portion, t, math.floor)
    if mode == "middle":
        start = (t - m) // 2
    elif mode in ("random", "random_start"):
        start = int(np.random.default_rng(seed).integers(0, t - m + 1))
    else:
        raise ValueError(f"temporal mode must be random or middle, got {mode!r}")
    visible = np.ones((v, t), dtype=bool)
    visible[:, start:start + m] = False
    return OcclusionMask(visible)


def mask_random_frames(portion: float, t: int, seed: int | None = None, v: int = NTU_JOINTS) -> OcclusionMask:
    """Hide round(portion*T) distinct frames drawn without replacement (halves round up)."""
    k = _count(portion, t, lambda x: math.floor(x + 0.5))
    frames = np.random.default_rng(seed).choice(t, size=k, replace=False)
    visible = np.ones((v, t), dtype=bool)
    visible[:, frames] = False
    return OcclusionMask(visible)


def mask_periodic(period: int, t: int, v: int = NTU_JOINTS) -> OcclusionMask:
    """Hide frames period-1, 2*period-1, ..."""
    if period < 2:
        raise ValueError(f"period must be >= 2, got {period}")
    visible = np.ones((v, t), dtype=bool)
    visible[:, period - 1::period] = False
    return OcclusionMask(visible)


def apply_mask(x: np.ndarray, mask: OcclusionMask | np.ndarray) -> np.ndarray:
    """Zero all coordinates of hidden (joint, frame) cells of a [..., V, T, 3] array."""
    visible = mask.visible if isinstance(mask, OcclusionMask) else np.asarray(mask, dtype=bool)
    if x.shape[-3:-1] != visible.shape[-2:]:
        raise ValueError(f"mask {visible.shape} does not match clip {x.shape}")
    return np.where(visible[..., None], x, np.zeros((), dtype=x.dtype))


# ---------------------------------------------------------------------------
# occlusion spec strings

SPEC_GRAMMAR = ("none | parts:<scene> | temporal:<portion>:<random|middle> | "
                "randomframe:<portion> | periodic:<period>")


class SpecError(ValueError):
    def __init__(self, spec: str, why: str):
        super().__init__(f"bad occlusion spec {spec!r}: {why}; grammar: {SPEC_GRAMMAR}")


@dataclass(frozen=True)
class OcclusionSpec:
    kind: str
    text: str
    scene: str = ""
    portion: float = 0.0
    mode: str = ""
    period: int = 0

    @property
    def is_random(self) -> bool:
        return self.kind == "randomframe" or (self.kind == "temporal" and self.mode == "random")

    def mask(self, v: int, t: int, table: dict[str, Sequence[int]] | None = None,
             seed: int | None = None) -> OcclusionMask:
        if self.kind == "none":
            return OcclusionMask.full(v, t)
        if self.kind == "parts":
            return mask_parts(self.scene, table if table is not None else load_occlusion_table(), v, t)
        if self.kind == "temporal":
            return mask_temporal(self.portion, self.mode, t, seed, v)
        if self.kind == "randomframe":
            return mask_random_frames(self.portion, t, seed, v)
        return mask_periodic(self.period, t, v)


def parse_occlusion_spec(text: str, scenes: Iterable[str] = SCENES) -> OcclusionSpec:
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "none" and len(parts) == 1:
            return OcclusionSpec("none", text)
        if kind == "parts" and len(parts) == 2:
            if parts[1] not in tuple(scenes):
                raise SpecError(text, f"unknown scene {parts[1]!r}")
            return OcclusionSpec("parts", text, scene=parts[1])
        if kind == "temporal" and len(parts) == 3:
            portion = float(parts[1])
            if parts[2] not in ("random", "middle") or not 0 <= portion <= 1:
                raise SpecError(text, "portion must be in [0, 1] and mode random|middle")
            return OcclusionSpec("temporal", text, portion=portion, mode=parts[2])
        if kind == "randomframe" and len(parts) == 2:
            portion = float(parts[1])
            if not 0 <= portion <= 1:
                raise SpecError(text, "portion must be in [0, 1]")
            return OcclusionSpec("randomframe", text, portion=portion)
        if kind == "periodic" and len(parts) == 2:
            period = int(parts[1])
            if period < 2:
                raise SpecError(text, "period must be >= 2")
            return OcclusionSpec("periodic", text, period=period)
    except ValueError as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(text, "non-numeric argument") from None
    raise SpecError(text, "unrecognized form")
