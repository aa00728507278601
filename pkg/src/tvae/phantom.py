"""Procedural longitudinal bone phantoms.

Each subject is a stack of tibia-like cross sections: a bright cortical
annulus around a darker textured marrow on a near-zero background. Tumor
subjects develop an osteolytic wedge in the annulus that starts at a fixed
week and widens (in angle and along the slice axis) every week after.

Randomness comes from a counter-based Philox generator keyed by
``(rng_seed, subject_seed, stream, week, slice_index)``, so any slice can
be re-rendered in isolation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

__all__ = [
    "PhantomConfig",
    "SubjectState",
    "VolumeSequence",
    "subject_state",
    "render_slice",
    "generate_sequence",
    "generate_dataset",
]

# stream tags for the counter-based generator
_STREAM_SUBJECT = 0
_STREAM_TEXTURE = 1
_STREAM_NOISE = 2
_STREAM_SPLIT = 3

_BACKGROUND = 0.02
_EDGE_WIDTH = 1.0  # pixels of anti-aliasing on annulus boundaries
_LESION_RESIDUAL = 0.15  # fraction of cortical contrast left inside a lesion


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 100
    n_slices: int = 48
    n_weeks: int = 4
    lesion_probability: float = 0.6
    lesion_onset_week: int = 2
    cortical_radius_range: tuple[float, float] = (20.0, 28.0)
    noise_sigma: float = 0.04
    rng_seed: int = 0
    # lesion growth per week after onset
    lesion_half_angle: float = 0.35
    lesion_angle_step: float = 0.30
    lesion_half_slices: float = 4.0
    lesion_slice_step: float = 3.0
    texture_amplitude: float = 0.06

    def __post_init__(self) -> None:
        if isinstance(self.cortical_radius_range, list):
            object.__setattr__(self, "cortical_radius_range", tuple(self.cortical_radius_range))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 8 or self.n_slices < 1 or self.n_weeks < 2:
            raise ConfigError(
                f"bad phantom size: image_size={self.image_size}, "
                f"n_slices={self.n_slices}, n_weeks={self.n_weeks}"
            )
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ConfigError(f"lesion_probability must be in [0,1], got {self.lesion_probability}")
        if not 2 <= self.lesion_onset_week <= self.n_weeks:
            raise ConfigError(
                f"lesion_onset_week must be in [2, n_weeks={self.n_weeks}], "
                f"got {self.lesion_onset_week}"
            )
        inner, outer = self.cortical_radius_range
        # worst case after per-subject jitter and slice taper
        if not 0 < inner < outer or outer * 1.06 + 2.0 + 3.0 >= self.image_size / 2:
            raise ConfigError(f"cortical_radius_range {self.cortical_radius_range} does not fit the image")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SubjectState:
    """Per-subject geometry, fixed across weeks (pre-registered scans)."""

    subject_seed: int
    has_tumor: bool
    center: tuple[float, float]
    inner_radius: float
    outer_radius: float
    cortical_level: float
    marrow_level: float
    lesion_angle: float
    lesion_slice: float


@dataclass
class VolumeSequence:
    voxels: np.ndarray  # (n_weeks, n_slices, H, W) float32 in [0, 1]
    lesion_mask: np.ndarray  # same shape, bool
    subject_id: str
    has_tumor: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.voxels.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VolumeSequence):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.has_tumor == other.has_tumor
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.lesion_mask, other.lesion_mask)
        )


def _rng(config: PhantomConfig, subject_seed: int, stream: int, week: int = 0, slice_index: int = 0):
    seq = np.random.SeedSequence(
        entropy=config.rng_seed & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(subject_seed & 0xFFFFFFFFFFFFFFFF, stream, week, slice_index),
    )
    return np.random.Generator(np.random.Philox(seq))


def subject_state(config: PhantomConfig, subject_seed: int) -> SubjectState:
    rng = _rng(config, subject_seed, _STREAM_SUBJECT)
    # the first draw decides tumor status so counts are reproducible from p alone
    has_tumor = bool(rng.random() < config.lesion_probability)
    c = config.image_size / 2.0
    inner, outer = config.cortical_radius_range
    jitter = rng.uniform(-3.0, 3.0, size=2)
    dr = rng.uniform(-2.0, 2.0)
    thickness = (outer - inner) * rng.uniform(0.85, 1.0)
    return SubjectState(
        subject_seed=subject_seed,
        has_tumor=has_tumor,
        center=(c + float(jitter[0]), c + float(jitter[1])),
        inner_radius=outer + dr - thickness,
        outer_radius=outer + dr,
        cortical_level=float(rng.uniform(0.8, 0.9)),
        marrow_level=float(rng.uniform(0.2, 0.3)),
        lesion_angle=float(rng.uniform(-math.pi, math.pi)),
        lesion_slice=float(rng.uniform(0.25, 0.75) * max(config.n_slices - 1, 0)),
    )


def _smoothstep(edge: float, r: np.ndarray) -> np.ndarray:
    """0 well below ``edge``, 1 well above, linear over one pixel."""
    return np.clip((r - edge) / _EDGE_WIDTH + 0.5, 0.0, 1.0)


def lesion_extent(config: PhantomConfig, week: int) -> tuple[float, float] | None:
    """(half angle, half slice extent) of the lesion at 0-based ``week``, or None."""
    weeks_since = week + 1 - config.lesion_onset_week
    if weeks_since < 0:
        return None
    return (
        min(config.lesion_half_angle + config.lesion_angle_step * weeks_since, math.pi),
        config.lesion_half_slices + config.lesion_slice_step * weeks_since,
    )


def render_slice(
    config: PhantomConfig, week: int, slice_index: int, state: SubjectState
) -> tuple[np.ndarray, np.ndarray]:
    """Render one cross section and its lesion mask.

    Returns a float32 image in [0, 1] and a boolean mask of the voxels where
    cortical erosion was applied.
    """
    if not 0 <= week < config.n_weeks:
        raise IndexError(f"week {week} out of range [0, {config.n_weeks})")
    if not 0 <= slice_index < config.n_slices:
        raise IndexError(f"slice_index {slice_index} out of range [0, {config.n_slices})")

    n = config.image_size
    # metaphysis widens slightly along the stack
    frac = slice_index / max(config.n_slices - 1, 1)
    taper = 1.0 + 0.1 * (frac - 0.5)
    r_in = state.inner_radius * taper
    r_out = state.outer_radius * taper

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy = yy - state.center[0]
    dx = xx - state.center[1]
    r = np.hypot(dx, dy)

    inside_outer = 1.0 - _smoothstep(r_out, r)
    inside_inner = 1.0 - _smoothstep(r_in, r)
    cortex = inside_outer - inside_inner

    tex_rng = _rng(config, state.subject_seed, _STREAM_TEXTURE, 0, slice_index)
    texture = ndimage.gaussian_filter(tex_rng.standard_normal((n, n)), sigma=3.0, mode="wrap")
    texture /= texture.std() + 1e-12
    marrow = np.clip(state.marrow_level + config.texture_amplitude * texture, 0.0, 1.0)

    image = _BACKGROUND + cortex * (state.cortical_level - _BACKGROUND) + inside_inner * (marrow - _BACKGROUND)

    mask = np.zeros((n, n), dtype=bool)
    extent = lesion_extent(config, week) if state.has_tumor else None
    if extent is not None:
        half_angle, half_slices = extent
        if abs(slice_index - state.lesion_slice) <= half_slices:
            theta = np.arctan2(dy, dx)
            dtheta = np.angle(np.exp(1j * (theta - state.lesion_angle)))
            mask = (np.abs(dtheta) <= half_angle) & (r >= r_in) & (r <= r_out)
            image = np.where(mask, _BACKGROUND + _LESION_RESIDUAL * (image - _BACKGROUND), image)

    if config.noise_sigma > 0:
        noise_rng = _rng(config, state.subject_seed, _STREAM_NOISE, week, slice_index)
        image = image + config.noise_sigma * noise_rng.standard_normal((n, n))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_sequence(config: PhantomConfig, subject_seed: int) -> VolumeSequence:
    state = subject_state(config, subject_seed)
    shape = (config.n_weeks, config.n_slices, config.image_size, config.image_size)
    voxels = np.empty(shape, dtype=np.float32)
    mask = np.zeros(shape, dtype=bool)
    for w in range(config.n_weeks):
        for s in range(config.n_slices):
            voxels[w, s], mask[w, s] = render_slice(config, w, s, state)
    return VolumeSequence(voxels=voxels, lesion_mask=mask, subject_id=f"subj{subject_seed:04d}", has_tumor=state.has_tumor)


def split_counts(n_subjects: int, split_fraction: float) -> tuple[int, int]:
    if n_subjects < 2:
        raise ConfigError(f"need at least 2 subjects, got {n_subjects}")
    if not 0.0 < split_fraction < 1.0:
        raise ConfigError(f"split_fraction must be in (0,1), got {split_fraction}")
    n_train = int(math.floor(n_subjects * split_fraction + 1e-9))
    n_train = min(max(n_train, 1), n_subjects - 1)
    return n_train, n_subjects - n_train


def split_subject_seeds(config: PhantomConfig, n_subjects: int, split_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    n_train, _ = split_counts(n_subjects, split_fraction)
    order = _rng(config, 0, _STREAM_SPLIT).permutation(n_subjects)
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


def generate_dataset(
    config: PhantomConfig, n_subjects: int = 111, split_fraction: float = 0.8
) -> tuple[list[VolumeSequence], list[VolumeSequence]]:
    """Generate ``n_subjects`` sequences and split them by subject."""
    train_seeds, test_seeds = split_subject_seeds(config, n_subjects, split_fraction)
    train = [generate_sequence(config, s) for s in train_seeds]
    test = [generate_sequence(config, s) for s in test_seeds]
    return train, test
