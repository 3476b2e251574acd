"""Deterministic synthetic insertion-video generator.

Renders a textured fistula-interior background with a bright needle-tip disc
whose horizontal position tracks the section column (L/C/R) and whose size and
blur track the section row (F = close and sharp, B = far and blurred).
Infiltration shows as a dark deformation patch over the tip. The needle fades
in/out across label transitions, and isolated frames can "flicker" (glare or a
momentary occlusion fading the needle evidence toward the background), so a
frame-wise classifier sees genuinely ambiguous frames whose state only temporal
context resolves — the oscillation the recurrent model is meant to suppress.
"""

from dataclasses import dataclass

import cv2
import numpy as np

from .data import SECTIONS, NeedleState, VideoClip, validate_labels, write_clip, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    clips_per_section: int = 14
    infil_fraction: float = 10 / 14
    width: int = 640
    height: int = 480
    # frames-per-phase ranges, inclusive
    no_needle_frames: tuple = (30, 60)
    fist_frames: tuple = (20, 40)
    infil_frames: tuple = (20, 40)
    noise_amplitude: float = 9.0
    transition_ramp: int = 4  # frames over which appearance fades across a label change
    # chance per frame of a glare/occlusion flicker that fades the needle evidence
    # to a visibility drawn from [0, 0.4]
    flicker_prob: float = 0.0
    # non-infiltration clips moved corpus-wide into each of test/validation
    nonfil_holdout: int = 3

    def __post_init__(self):
        if not 0.0 <= self.infil_fraction <= 1.0:
            raise ValueError("infil_fraction must be in [0, 1]")
        for rng_ in (self.no_needle_frames, self.fist_frames, self.infil_frames):
            if rng_[0] < 1 or rng_[1] < rng_[0]:
                raise ValueError(f"bad phase range {rng_}")
        if not 0.0 <= self.flicker_prob <= 1.0:
            raise ValueError("flicker_prob must be in [0, 1]")

    @classmethod
    def desk(cls, seed=0):
        """Small corpus for desk-scale runs: per section, 4 train + 1 val + 1 test clips."""
        return cls(
            seed=seed,
            clips_per_section=6,
            infil_fraction=4 / 6,
            no_needle_frames=(6, 10),
            fist_frames=(6, 9),
            infil_frames=(6, 9),
            transition_ramp=2,
            flicker_prob=0.05,
            nonfil_holdout=0,
        )


# section geometry: column -> x fraction, row -> (disc radius, blur sigma, brightness)
_COL_X = {"L": 0.22, "C": 0.50, "R": 0.78}
_ROW_LOOK = {"F": (26, 1.2, 235.0), "M": (18, 2.6, 215.0), "B": (12, 4.2, 195.0)}


def _phase_labels(cfg, infiltration, rng):
    def draw(lo_hi):
        return int(rng.integers(lo_hi[0], lo_hi[1] + 1))

    n1 = draw(cfg.no_needle_frames)
    n2 = draw(cfg.no_needle_frames)
    if infiltration:
        f1 = draw(cfg.fist_frames)
        inf = draw(cfg.infil_frames)
        f2 = draw(cfg.fist_frames)
        labels = (
            [NeedleState.NO_NEEDLE] * n1
            + [NeedleState.FIST] * f1
            + [NeedleState.INFIL] * inf
            + [NeedleState.FIST] * f2
            + [NeedleState.NO_NEEDLE] * n2
        )
    else:
        f1 = draw(cfg.fist_frames)
        labels = (
            [NeedleState.NO_NEEDLE] * n1
            + [NeedleState.FIST] * f1
            + [NeedleState.NO_NEEDLE] * n2
        )
    return np.asarray(labels, dtype=np.int64)


def _ramp_profile(n_frames, start, end, ramp):
    """Alpha profile rising around `start` and falling around `end` (half-open segment)."""
    i = np.arange(n_frames, dtype=np.float64)
    half = ramp / 2.0
    up = np.clip((i - (start - half) + 0.5) / max(ramp, 1), 0.0, 1.0)
    down = np.clip(((end - half) - i - 0.5) / max(ramp, 1) + 1.0, 0.0, 1.0)
    return up * down


def _segment(labels, wanted):
    idx = np.flatnonzero(np.isin(labels, wanted))
    return (int(idx[0]), int(idx[-1]) + 1) if idx.size else None


def generate_insertion_video(cfg, section, infiltration, rng):
    """Render one labeled clip for a section; deterministic under the rng state."""
    if section not in SECTIONS:
        raise ValueError(f"unknown section {section!r}")
    labels = _phase_labels(cfg, infiltration, rng)
    n = len(labels)
    h, w = cfg.height, cfg.width

    # reddish interior: vertical gradient plus a low-frequency texture
    base = rng.uniform(95, 130)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    phase_x, phase_y = rng.uniform(0, 2 * np.pi, size=2)
    texture = 10.0 * np.sin(xx / rng.uniform(55, 90) + phase_x) * np.cos(
        yy / rng.uniform(40, 70) + phase_y
    )
    grad = 22.0 * (yy / h - 0.5)
    bg = np.empty((h, w, 3), dtype=np.float32)
    bg[:, :, 0] = base + 45 + grad + texture
    bg[:, :, 1] = base - 25 + grad + 0.6 * texture
    bg[:, :, 2] = base - 20 + grad + 0.6 * texture

    row, col = section[0], section[1]
    radius, sigma, bright = _ROW_LOOK[row]
    cx = _COL_X[col] * w + rng.uniform(-0.03, 0.03) * w
    cy = 0.52 * h + rng.uniform(-0.05, 0.05) * h
    radius = radius * rng.uniform(0.9, 1.1)

    needle_alpha = np.zeros(n)
    seg = _segment(labels, (NeedleState.FIST, NeedleState.INFIL))
    if seg:
        needle_alpha = _ramp_profile(n, seg[0], seg[1], cfg.transition_ramp)
    infil_alpha = np.zeros(n)
    seg_i = _segment(labels, (NeedleState.INFIL,))
    if seg_i:
        infil_alpha = _ramp_profile(n, seg_i[0], seg_i[1], cfg.transition_ramp)

    ksize = int(sigma * 4) | 1
    disc = np.zeros((h, w), dtype=np.float32)
    cv2.circle(disc, (int(round(cx)), int(round(cy))), int(round(radius)), 1.0, -1)
    disc = cv2.GaussianBlur(disc, (ksize, ksize), sigma)
    patch = np.zeros((h, w), dtype=np.float32)
    cv2.ellipse(
        patch,
        (int(round(cx)), int(round(cy + 0.35 * radius))),
        (int(round(radius * 1.7)), int(round(radius * 1.1))),
        float(rng.uniform(-20, 20)),
        0,
        360,
        1.0,
        -1,
    )
    patch = cv2.GaussianBlur(patch, (ksize, ksize), sigma)

    needle_rgb = np.array([bright, bright, bright * 0.92], dtype=np.float32)
    patch_rgb = np.array([45.0, 18.0, 20.0], dtype=np.float32)

    frames = []
    for i in range(n):
        img = bg.copy()
        jx, jy = rng.uniform(-2.0, 2.0, size=2)
        na = needle_alpha[i]
        if cfg.flicker_prob and rng.random() < cfg.flicker_prob:
            na *= rng.uniform(0.0, 0.4)
        if na > 0:
            shift = np.float32([[1, 0, jx], [0, 1, jy]])
            d = cv2.warpAffine(disc, shift, (w, h))
            a = (d * na)[:, :, None]
            img = img * (1 - a) + needle_rgb * a
            ia = infil_alpha[i]
            if ia > 0:
                p = cv2.warpAffine(patch, shift, (w, h))
                a2 = (p * ia * na)[:, :, None]
                img = img * (1 - a2) + patch_rgb * a2
        img += rng.normal(0.0, cfg.noise_amplitude, size=img.shape)
        frames.append(np.clip(img, 0, 255).astype(np.uint8))

    clip = VideoClip("", section, bool(seg_i), labels, frames=frames)
    validate_labels(labels, "<synthetic>")
    return clip


def plan_splits(cfg):
    """Deterministic (section, clip_index) -> split plan.

    Per section: one infiltration clip goes to test and one to validation, the
    rest train. Corpus-wide, `nonfil_holdout` non-infiltration clips move into
    each of test and validation (round-robin over sections), mirroring the
    source data's proportions.
    """
    n_infil = int(round(cfg.clips_per_section * cfg.infil_fraction))
    n_infil = min(max(n_infil, 2), cfg.clips_per_section)
    plan = {}  # (section, k) -> [split, infiltration]
    non_infil_train = []
    for section in SECTIONS:
        for k in range(cfg.clips_per_section):
            infil = k < n_infil
            split = "test" if k == 0 else "validation" if k == 1 else "train"
            if split == "train" and not infil:
                non_infil_train.append((section, k))
            plan[(section, k)] = [split, infil]
    # interleave sections so holdout clips spread across distinct sections
    non_infil_train.sort(key=lambda sk: (sk[1], sk[0]))
    moved = 0
    for target in ("test", "validation"):
        for _ in range(cfg.nonfil_holdout):
            if moved >= len(non_infil_train):
                break
            key = non_infil_train[moved]
            plan[key][0] = target
            moved += 1
    return {k: tuple(v) for k, v in plan.items()}


def generate_corpus(cfg, root):
    """Write a full corpus (clips + manifest) under root; byte-identical per config."""
    plan = plan_splits(cfg)
    master = np.random.SeedSequence(cfg.seed)
    children = master.spawn(len(SECTIONS) * cfg.clips_per_section)
    entries = []
    for si, section in enumerate(SECTIONS):
        for k in range(cfg.clips_per_section):
            split, infil = plan[(section, k)]
            rng = np.random.default_rng(children[si * cfg.clips_per_section + k])
            clip = generate_insertion_video(cfg, section, infil, rng)
            clip.clip_id = f"{section.lower()}{k:02d}"
            write_clip(clip, root, split)
            entries.append((clip.clip_id, split, section, clip.infiltration))
    write_manifest(entries, root)
    return entries
