"""Procedural talking-sprite portrait videos with exact ground truth.

Every scene is a flat-coloured sprite (circle face, rectangle hair, elliptical eyes with
dark pupils, elliptical mouth) in front of a scrolling sinusoidal plaid. The head only
translates and scales isotropically, so the backward flow of every rigid region is known
in closed form. Eyes and mouth change appearance (gaze, mouth opening) and are excluded
from the valid-flow mask.

Flow convention: ``flow[t]`` maps frame-t pixel coordinates to frame-(t-1) source
coordinates, i.e. ``warp(x[t-1], flow[t]) == x[t]`` on valid pixels.
"""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import colorsys
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from loguru import logger
from scipy import ndimage

from videostylizer.errors import ConfigurationError, DimensionError

SUPPORTED_SIZES = (32, 64, 128)
DEFAULT_FPS = 20.0
MAX_BACKGROUND_SPEED = 2.0
MAX_COMPONENTS = 3

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

LABEL_BACKGROUND = 0
LABEL_FACE = 1
LABEL_HAIR = 2
LABEL_EYE = 3
LABEL_MOUTH = 4
RIGID_LABELS = (LABEL_BACKGROUND, LABEL_FACE, LABEL_HAIR)

# sprite geometry, in units of the face diameter
FACE_RADIUS = 0.5
EYE_Y = -0.12
EYE_SEMI_X = 0.12
EYE_SEMI_Y = 0.09
PUPIL_RADIUS = 0.035
# a disc of this radius covers at least one pixel wherever its centre sits
MIN_PUPIL_PX = 0.75
MOUTH_Y = 0.22
MOUTH_SEMI_X = 0.16
MOUTH_SEMI_Y_CLOSED = 0.02
MOUTH_SEMI_Y_RANGE = 0.07
HAIR_HALF_WIDTH = 0.56
HAIR_TOP = -0.62
HAIR_ROOT = -0.2
HAIR_SWAY = 0.04
SCALE_AMPLITUDE = 0.05

FACE_SATURATION, FACE_VALUE = 0.55, 0.9
HAIR_SATURATION, HAIR_VALUE = 0.7, 0.4
EYE_WHITE = (0.95, 0.95, 0.95)
PUPIL_COLOR = (0.05, 0.05, 0.05)
MOUTH_COLOR = (0.55, 0.12, 0.16)
BACKGROUND_BASE = np.array([0.45, 0.5, 0.58])
BACKGROUND_AMPLITUDE = 0.15
# (period_x, period_y, phase_x, phase_y) per pattern id
BACKGROUND_PATTERNS = (
    (18.0, 22.0, 0.0, 1.3),
    (22.0, 26.0, 0.7, 2.1),
    (26.0, 18.0, 1.9, 0.4),
    (30.0, 22.0, 2.6, 1.0),
)


def _hsv(hue: float, saturation: float, value: float) -> Tuple[float, float, float]:
    return colorsys.hsv_to_rgb(hue % 1.0, saturation, value)


# Every colour the background can take lies on this segment.
BACKGROUND_PALETTE = (
    BACKGROUND_BASE[None, :]
    + np.linspace(-2 * BACKGROUND_AMPLITUDE, 2 * BACKGROUND_AMPLITUDE, 61)[:, None]
).astype(np.float32)

FOREGROUND_PALETTE = np.array(
    [_hsv(h / 72, FACE_SATURATION, FACE_VALUE) for h in range(72)]
    + [_hsv(h / 72, HAIR_SATURATION, HAIR_VALUE) for h in range(72)]
    + [EYE_WHITE, PUPIL_COLOR, MOUTH_COLOR],
    dtype=np.float32,
)

STYLE_PALETTE = np.array(
    [
        (0.0, 0.0, 0.0),
        (1.0, 1.0, 1.0),
        (0.93, 0.78, 0.62),
        (0.62, 0.36, 0.22),
        (0.2, 0.32, 0.62),
        (0.55, 0.72, 0.86),
        (0.86, 0.42, 0.48),
        (0.38, 0.58, 0.36),
    ],
    dtype=np.float32,
)
EDGE_STRENGTH = 0.6
SATURATION_GAIN = 1.2


@dataclass(frozen=True)
class Trajectory:
    """Smooth scalar trajectory: base + velocity * t + sum of at most three sinusoids.

    Attributes:
        base: Value at t=0 without the sinusoidal part.
        velocity: Linear drift per frame. Sampled scenes always use 0.
        components: Tuples of (amplitude, angular frequency per frame, phase).
    """

    base: float
    velocity: float = 0.0
    components: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if len(self.components) > MAX_COMPONENTS:
            raise ConfigurationError(
                f"A trajectory has at most {MAX_COMPONENTS} sinusoids, got {len(self.components)}."
            )

    def __call__(self, t: float) -> float:
        value = self.base + self.velocity * t
        for amplitude, omega, phase in self.components:
            value += amplitude * math.sin(omega * t + phase)
        return value

    @property
    def amplitude(self) -> float:
        return sum(abs(a) for a, _, _ in self.components)


def constant(value: float) -> Trajectory:
    return Trajectory(base=value)


@dataclass(frozen=True)
class IdentityParams:
    """Appearance of one sprite identity.

    Sizes are relative: face_size to the image width, eye_spacing (the gap between the
    inner corners of the eyes) to the face size and hair_length
    to the image height.
    """

    face_hue: float
    face_size: float
    eye_spacing: float
    hair_hue: float
    hair_length: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.face_hue,
                self.face_size,
                self.eye_spacing,
                self.hair_hue,
                self.hair_length,
            ],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class MotionParams:
    center_x: Trajectory
    center_y: Trajectory
    scale: Trajectory
    gaze_x: Trajectory
    gaze_y: Trajectory
    mouth_open: Trajectory
    hair_phase: Trajectory


@dataclass(frozen=True)
class BackgroundParams:
    pattern: int
    velocity: Tuple[float, float]


@dataclass(frozen=True)
class SceneParams:
    identity: IdentityParams
    motion: MotionParams
    background: BackgroundParams
    seed: int
    num_frames: int
    size: int
    fps: float = DEFAULT_FPS


@dataclass
class VideoSequence:
    """A list of H x W x 3 float32 frames in [0, 1]."""

    frames: List[np.ndarray]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if self.frames:
            shape = self.frames[0].shape
            if len(shape) != 3 or shape[2] != 3:
                raise DimensionError(f"Frames must be H x W x 3, got {shape}.")
            for frame in self.frames:
                if frame.shape != shape:
                    raise DimensionError(
                        f"All frames must share the shape {shape}, got {frame.shape}."
                    )
        self.frames = [
            np.clip(np.asarray(frame, dtype=np.float32), 0.0, 1.0)
            for frame in self.frames
        ]

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0] if self.frames else 0

    @property
    def width(self) -> int:
        return self.frames[0].shape[1] if self.frames else 0

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class FrameTruth:
    """Ground truth of one frame.

    Attributes:
        flow: H x W x 2 backward flow to the previous frame, in pixels (dx, dy).
        flow_valid: H x W mask of pixels where the flow is exact.
        mask_bg: H x W background probability (binary for rendered scenes).
        gaze_px: Rendered pupil centre minus eye box centre (dx, dy) per eye, in pixels.
        eye_boxes: Inclusive (x0, y0, x1, y1) box per eye.
        eye_centers: Eye centre (x, y) per eye, in pixels.
    """

    flow: np.ndarray
    flow_valid: np.ndarray
    mask_bg: np.ndarray
    gaze_px: np.ndarray
    eye_boxes: np.ndarray
    eye_centers: np.ndarray


@dataclass
class SceneTruth:
    """Per-frame ground truth of a rendered scene, stacked along the first axis."""

    flow_gt: np.ndarray
    flow_valid: np.ndarray
    mask_bg: np.ndarray
    gaze_px: np.ndarray
    eye_boxes: np.ndarray
    eye_centers: np.ndarray
    identity_vec: np.ndarray
    fps: float = DEFAULT_FPS
    labels: np.ndarray = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return int(self.flow_gt.shape[0])

    def frame(self, t: int) -> FrameTruth:
        return FrameTruth(
            flow=self.flow_gt[t],
            flow_valid=self.flow_valid[t],
            mask_bg=self.mask_bg[t],
            gaze_px=self.gaze_px[t],
            eye_boxes=self.eye_boxes[t],
            eye_centers=self.eye_centers[t],
        )


def _sample_trajectory(
    rng: np.random.Generator,
    base: float,
    max_amplitude: float,
    omega_range: Tuple[float, float] = (0.05, 0.3),
) -> Trajectory:
    """Draw up to three sinusoids whose amplitudes sum to at most max_amplitude."""
    n = int(rng.integers(1, MAX_COMPONENTS + 1))
    amplitudes = rng.uniform(0.2, 1.0, size=n) * max_amplitude / n
    omegas = rng.uniform(*omega_range, size=n)
    phases = rng.uniform(0.0, 2 * math.pi, size=n)
    return Trajectory(
        base=float(base),
        components=tuple(
            (float(a), float(w), float(p)) for a, w, p in zip(amplitudes, omegas, phases)
        ),
    )


def sample_scene(seed: int, duration_frames: int, size: int) -> SceneParams:
    """Draw a random scene. Deterministic in seed.

    Args:
        seed: Random seed.
        duration_frames: Number of frames, at least 1.
        size: Image side length, one of 32, 64, 128.

    Returns:
        SceneParams satisfying the geometric invariants.
    """
    if size not in SUPPORTED_SIZES:
        raise ConfigurationError(
            f"Scene size must be one of {SUPPORTED_SIZES}, got {size}."
        )
    if duration_frames < 1:
        raise ConfigurationError(
            f"A scene needs at least one frame, got {duration_frames}."
        )
    rng = np.random.default_rng(seed)
    identity = IdentityParams(
        face_hue=float(rng.uniform(0.0, 1.0)),
        face_size=float(rng.uniform(0.3, 0.5)),
        eye_spacing=float(rng.uniform(0.2, 0.4)),
        hair_hue=float(rng.uniform(0.0, 1.0)),
        hair_length=float(rng.uniform(0.1, 0.3)),
    )
    # the head centre keeps half a (maximally scaled) face away from the border
    margin = 0.5 * identity.face_size * size * (1.0 + SCALE_AMPLITUDE) + 1.0
    room = max(size / 2.0 - margin, 0.0)
    motion = MotionParams(
        center_x=_sample_trajectory(rng, size / 2.0, room),
        center_y=_sample_trajectory(rng, size / 2.0, room),
        scale=_sample_trajectory(rng, 1.0, SCALE_AMPLITUDE),
        gaze_x=_sample_trajectory(rng, 0.0, 0.9),
        gaze_y=_sample_trajectory(rng, 0.0, 0.9),
        mouth_open=_sample_trajectory(rng, 0.5, 0.5),
        hair_phase=_sample_trajectory(rng, float(rng.uniform(0, 2 * math.pi)), math.pi),
    )
    speed = float(rng.uniform(0.0, MAX_BACKGROUND_SPEED))
    angle = float(rng.uniform(0.0, 2 * math.pi))
    background = BackgroundParams(
        pattern=int(rng.integers(0, len(BACKGROUND_PATTERNS))),
        velocity=(speed * math.cos(angle), speed * math.sin(angle)),
    )
    return SceneParams(
        identity=identity,
        motion=motion,
        background=background,
        seed=int(seed),
        num_frames=int(duration_frames),
        size=int(size),
    )


@dataclass(frozen=True)
class _HeadState:
    cx: float
    cy: float
    scale: float
    gaze: Tuple[float, float]
    mouth: float
    sway: float


def _head_state(scene: SceneParams, t: int) -> _HeadState:
    motion = scene.motion
    face_px = scene.identity.face_size * scene.size
    return _HeadState(
        cx=motion.center_x(t),
        cy=motion.center_y(t),
        scale=motion.scale(t),
        gaze=(
            float(np.clip(motion.gaze_x(t), -1.0, 1.0)),
            float(np.clip(motion.gaze_y(t), -1.0, 1.0)),
        ),
        mouth=float(np.clip(motion.mouth_open(t), 0.0, 1.0)),
        sway=HAIR_SWAY * face_px * math.sin(motion.hair_phase(t)),
    )


def _background(scene: SceneParams, t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    period_x, period_y, phase_x, phase_y = BACKGROUND_PATTERNS[scene.background.pattern]
    vx, vy = scene.background.velocity
    pattern = BACKGROUND_AMPLITUDE * (
        np.sin(2 * math.pi * (xs + t * vx) / period_x + phase_x)
        + np.sin(2 * math.pi * (ys + t * vy) / period_y + phase_y)
    )
    return BACKGROUND_BASE[None, None, :] + pattern[..., None]


@dataclass(frozen=True)
class _Eye:
    """One eye in image pixels: ellipse, inclusive box and the rendered pupil disc."""

    center: Tuple[float, float]
    semi: Tuple[float, float]
    box: Tuple[int, int, int, int]
    pupil: Tuple[float, float]
    pupil_radius: float

    @property
    def gaze(self) -> Tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return self.pupil[0] - 0.5 * (x0 + x1), self.pupil[1] - 0.5 * (y0 + y1)


def _snap_pupil(target: float, low: int, high: int, radius: float) -> float:
    """Pupil centre on one axis: a whole pixel step from the box centre.

    The step is clamped so that the disc stays inside the box. The disc is then
    mirror-symmetric about its centre and its pixel centroid is the centre itself.
    """
    middle = 0.5 * (low + high)
    reach = max(math.ceil(0.5 * (high - low) + 1.0 - radius) - 1, 0)
    step = math.floor(target - middle + 0.5)
    return middle + float(min(max(step, -reach), reach))


def _eyes(scene: SceneParams, state: _HeadState) -> Tuple[_Eye, _Eye]:
    face_px = scene.identity.face_size * scene.size
    # eye_spacing is the gap between the inner corners of the eyes
    half_distance = (0.5 * scene.identity.eye_spacing + EYE_SEMI_X) * face_px
    semi_x = state.scale * EYE_SEMI_X * face_px
    semi_y = state.scale * EYE_SEMI_Y * face_px
    pupil_canonical = PUPIL_RADIUS * face_px
    radius = max(state.scale * pupil_canonical, MIN_PUPIL_PX)
    gaze = np.asarray(state.gaze, dtype=np.float64)
    gaze = gaze / max(1.0, float(np.hypot(*gaze)))
    shift_x = state.scale * gaze[0] * (EYE_SEMI_X * face_px - pupil_canonical)
    shift_y = state.scale * gaze[1] * (EYE_SEMI_Y * face_px - pupil_canonical)

    eyes = []
    for side in (-1.0, 1.0):
        cx = state.cx + state.scale * side * half_distance
        cy = state.cy + state.scale * EYE_Y * face_px
        # pixels whose centres fall inside the eye's extent
        x0 = max(int(math.ceil(cx - semi_x)), 0)
        x1 = min(int(math.floor(cx + semi_x)), scene.size - 1)
        y0 = max(int(math.ceil(cy - semi_y)), 0)
        y1 = min(int(math.floor(cy + semi_y)), scene.size - 1)
        pupil = (
            _snap_pupil(cx + shift_x, x0, x1, radius),
            _snap_pupil(cy + shift_y, y0, y1, radius),
        )
        eyes.append(_Eye((cx, cy), (semi_x, semi_y), (x0, y0, x1, y1), pupil, radius))
    return eyes[0], eyes[1]


def _rasterize(scene: SceneParams, t: int, state: _HeadState, xs, ys):
    """Render one frame and its region labels."""
    identity = scene.identity
    face_px = identity.face_size * scene.size
    u = (xs - state.cx) / state.scale
    v = (ys - state.cy) / state.scale
    u_hair = u - state.sway

    hair = (
        (np.abs(u_hair) <= HAIR_HALF_WIDTH * face_px)
        & (v >= HAIR_TOP * face_px)
        & (v <= HAIR_ROOT * face_px + identity.hair_length * scene.size)
    )
    face = u**2 + v**2 <= (FACE_RADIUS * face_px) ** 2
    eyes = np.zeros_like(face)
    pupils = np.zeros_like(face)
    for eye in _eyes(scene, state):
        (ex, ey), (semi_x, semi_y) = eye.center, eye.semi
        x0, y0, x1, y1 = eye.box
        eyes |= ((xs - ex) / semi_x) ** 2 + ((ys - ey) / semi_y) ** 2 <= 1.0
        pupils |= (
            ((xs - eye.pupil[0]) ** 2 + (ys - eye.pupil[1]) ** 2 <= eye.pupil_radius**2)
            & (xs >= x0)
            & (xs <= x1)
            & (ys >= y0)
            & (ys <= y1)
        )
    mouth_semi_y = (MOUTH_SEMI_Y_CLOSED + MOUTH_SEMI_Y_RANGE * state.mouth) * face_px
    mouth = (u / (MOUTH_SEMI_X * face_px)) ** 2 + (
        (v - MOUTH_Y * face_px) / mouth_semi_y
    ) ** 2 <= 1.0

    labels = np.full(xs.shape, LABEL_BACKGROUND, dtype=np.uint8)
    labels[hair] = LABEL_HAIR
    labels[face] = LABEL_FACE
    labels[face & (eyes | pupils)] = LABEL_EYE
    labels[face & mouth] = LABEL_MOUTH

    image = _background(scene, t, xs, ys)
    image[labels == LABEL_HAIR] = _hsv(identity.hair_hue, HAIR_SATURATION, HAIR_VALUE)
    image[labels == LABEL_FACE] = _hsv(identity.face_hue, FACE_SATURATION, FACE_VALUE)
    image[labels == LABEL_EYE] = EYE_WHITE
    image[(labels == LABEL_EYE) & pupils] = PUPIL_COLOR
    image[labels == LABEL_MOUTH] = MOUTH_COLOR
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def _eye_truth(scene: SceneParams, state: _HeadState):
    eyes = _eyes(scene, state)
    gaze = np.array([eye.gaze for eye in eyes], dtype=np.float32)
    boxes = np.array([eye.box for eye in eyes], dtype=np.int32)
    eye_centers = np.array([eye.center for eye in eyes], dtype=np.float32)
    return gaze, boxes, eye_centers


def _backward_flow(
    scene: SceneParams,
    prev: _HeadState,
    cur: _HeadState,
    labels: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
) -> np.ndarray:
    ratio = prev.scale / cur.scale
    head_x = (prev.cx - cur.cx) + (ratio - 1.0) * (xs - cur.cx)
    head_y = (prev.cy - cur.cy) + (ratio - 1.0) * (ys - cur.cy)
    flow = np.empty(labels.shape + (2,), dtype=np.float64)
    flow[..., 0] = head_x
    flow[..., 1] = head_y
    hair = labels == LABEL_HAIR
    flow[hair, 0] += prev.scale * (prev.sway - cur.sway)
    background = labels == LABEL_BACKGROUND
    flow[background, 0] = scene.background.velocity[0]
    flow[background, 1] = scene.background.velocity[1]
    return flow.astype(np.float32)


def _valid_flow(
    flow: np.ndarray, labels: np.ndarray, prev_labels: np.ndarray, xs, ys
) -> np.ndarray:
    """Pixels whose bilinear footprint in the previous frame carries their own label."""
    h, w = labels.shape
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    same = np.ones_like(inside)
    for yy in (y0, y1):
        for xx in (x0, x1):
            same &= prev_labels[yy, xx] == labels
    rigid = np.isin(labels, RIGID_LABELS)
    return inside & same & rigid


def render_video(scene: SceneParams):
    """Render a scene. Pure: the same scene always gives bit-identical output.

    Returns:
        Tuple of (VideoSequence, SceneTruth).
    """
    size, num_frames = scene.size, scene.num_frames
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    frames, labels_all = [], []
    flows = np.zeros((num_frames, size, size, 2), dtype=np.float32)
    valid = np.zeros((num_frames, size, size), dtype=bool)
    gaze = np.zeros((num_frames, 2, 2), dtype=np.float32)
    boxes = np.zeros((num_frames, 2, 4), dtype=np.int32)
    centers = np.zeros((num_frames, 2, 2), dtype=np.float32)

    prev_state = None
    for t in range(num_frames):
        state = _head_state(scene, t)
        frame, labels = _rasterize(scene, t, state, xs, ys)
        if prev_state is not None:
            flows[t] = _backward_flow(scene, prev_state, state, labels, xs, ys)
            valid[t] = _valid_flow(flows[t], labels, labels_all[-1], xs, ys)
        gaze[t], boxes[t], centers[t] = _eye_truth(scene, state)
        frames.append(frame)
        labels_all.append(labels)
        prev_state = state

    labels_arr = np.stack(labels_all)
    truth = SceneTruth(
        flow_gt=flows,
        flow_valid=valid,
        mask_bg=(labels_arr == LABEL_BACKGROUND).astype(np.float32),
        gaze_px=gaze,
        eye_boxes=boxes,
        eye_centers=centers,
        identity_vec=scene.identity.as_vector(),
        fps=scene.fps,
        labels=labels_arr,
    )
    logger.debug(f"Rendered scene seed={scene.seed} ({num_frames} frames, {size}px).")
    return VideoSequence(frames=frames, fps=scene.fps), truth


def luma(frame: np.ndarray) -> np.ndarray:
    return np.asarray(frame, dtype=np.float32) @ LUMA_WEIGHTS


def boost_saturation(frame: np.ndarray, gain: float = SATURATION_GAIN) -> np.ndarray:
    """Push colours away from their luma grey by the given gain."""
    gray = luma(frame)[..., None]
    return np.clip(gray + gain * (frame - gray), 0.0, 1.0).astype(np.float32)


def oracle_stylize(frame: np.ndarray) -> np.ndarray:
    """Deterministic target-domain style used as the verifiable stylization oracle.

    Palette quantization to STYLE_PALETTE, edge darkening by the Sobel gradient
    magnitude of the quantized luma, then a 20% saturation boost.
    """
    frame = np.asarray(frame, dtype=np.float32)
    distances = ((frame[..., None, :] - STYLE_PALETTE) ** 2).sum(axis=-1)
    quantized = STYLE_PALETTE[distances.argmin(axis=-1)]
    gray = luma(quantized)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    darkening = 1.0 - EDGE_STRENGTH * np.clip(np.hypot(gx, gy), 0.0, 1.0)
    return boost_saturation(quantized * darkening[..., None])
