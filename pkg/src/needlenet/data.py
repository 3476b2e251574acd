"""Dataset representation, preprocessing, augmentation, balancing, and windowing.

On-disk layout::

    root/manifest.csv                      clip_id,split,section,infiltration
    root/<split>/<clip_id>/frame_%06d.png  RGB frames
    root/<split>/<clip_id>/labels.csv      frame_index,state

CSV files are UTF-8 with a header row and LF line endings.
"""

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import cv2
import numpy as np

from .models import INPUT_SIZE, MEAN_RGB

SECTIONS = ("FL", "FC", "FR", "ML", "MC", "MR", "BL", "BC", "BR")
SPLITS = ("train", "validation", "test")


class NeedleState(IntEnum):
    NO_NEEDLE = 0
    FIST = 1
    INFIL = 2

    @property
    def label(self):
        return ("NoNeedle", "Fist", "Infil")[self]

    @classmethod
    def parse(cls, text):
        try:
            return {"noneedle": cls.NO_NEEDLE, "fist": cls.FIST, "infil": cls.INFIL}[
                text.strip().lower()
            ]
        except KeyError:
            raise ValueError(f"unknown needle state {text!r}") from None


# legal frame-to-frame transitions: self, NoNeedle<->Fist, Fist<->Infil
_ALLOWED = {
    (NeedleState.NO_NEEDLE, NeedleState.FIST),
    (NeedleState.FIST, NeedleState.NO_NEEDLE),
    (NeedleState.FIST, NeedleState.INFIL),
    (NeedleState.INFIL, NeedleState.FIST),
}


class DatasetError(Exception):
    pass


class MalformedManifestError(DatasetError):
    pass


class DuplicateClipError(DatasetError):
    pass


class LabelGrammarError(DatasetError):
    def __init__(self, clip_id, frame_index, prev, cur):
        self.clip_id = clip_id
        self.frame_index = frame_index
        self.prev = prev
        self.cur = cur
        super().__init__(
            f"clip {clip_id!r}: illegal transition {prev.label}->{cur.label} "
            f"at frame {frame_index}"
        )


def validate_labels(labels, clip_id="<clip>"):
    labels = [NeedleState(v) for v in labels]
    for i in range(1, len(labels)):
        a, b = labels[i - 1], labels[i]
        if a != b and (a, b) not in _ALLOWED:
            raise LabelGrammarError(clip_id, i, a, b)


@dataclass
class VideoClip:
    """One insertion experiment: ordered frames plus per-frame needle states."""

    clip_id: str
    section: str
    infiltration: bool
    labels: np.ndarray  # int array, one NeedleState per frame
    frames: list = None  # in-memory uint8 RGB frames, or None when on disk
    frame_paths: list = None

    def __len__(self):
        return len(self.labels)

    def load_frame(self, i):
        if self.frames is not None:
            return self.frames[i]
        bgr = cv2.imread(str(self.frame_paths[i]), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DatasetError(f"clip {self.clip_id!r}: unreadable frame {self.frame_paths[i]}")
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)

    def iter_frames(self):
        for i in range(len(self)):
            yield self.load_frame(i)


@dataclass
class DataSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def clips(self, split):
        return {"train": self.train, "validation": self.validation, "test": self.test}[split]


def resize_frame(raw):
    """Bilinear resize of an 8-bit RGB frame to the network input size (uint8)."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DatasetError(f"expected H x W x 3 input, got shape {raw.shape}")
    if raw.shape[:2] == (INPUT_SIZE, INPUT_SIZE):
        return raw
    return cv2.resize(raw, (INPUT_SIZE, INPUT_SIZE), interpolation=cv2.INTER_LINEAR)


def zero_center(frame112):
    """uint8 112x112x3 -> float32, per-channel ImageNet mean RGB subtracted."""
    return frame112.astype(np.float32) - np.asarray(MEAN_RGB, dtype=np.float32)


def preprocess_frame(raw):
    """Raw 8-bit RGB frame (any H x W x 3) -> zero-centered float32 112x112x3."""
    return zero_center(resize_frame(raw))


@dataclass(frozen=True)
class AugmentParams:
    dx_frac: float  # horizontal shift as a fraction of width, |dx| < 0.2
    dy_frac: float
    angle_deg: float  # in [-10, 10]
    brightness: float  # in [0.5, 1.5]


def sample_augment_params(rng):
    return AugmentParams(
        dx_frac=rng.uniform(-0.2, 0.2),
        dy_frac=rng.uniform(-0.2, 0.2),
        angle_deg=rng.uniform(-10.0, 10.0),
        brightness=rng.uniform(0.5, 1.5),
    )


def apply_augment(frame, params):
    """Shift/rotate with nearest-edge fill, then brightness scale with clamping (uint8 in/out)."""
    h, w = frame.shape[:2]
    out = frame
    if params.angle_deg != 0.0 or params.dx_frac != 0.0 or params.dy_frac != 0.0:
        mat = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), params.angle_deg, 1.0)
        mat[0, 2] += params.dx_frac * w
        mat[1, 2] += params.dy_frac * h
        out = cv2.warpAffine(
            out, mat, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
        )
    if params.brightness != 1.0:
        out = np.clip(out.astype(np.float32) * params.brightness, 0, 255).astype(np.uint8)
    return out


def augment(frame, rng):
    """Randomly shifted/rotated/brightness-scaled copy of a training frame."""
    return apply_augment(frame, sample_augment_params(rng))


def make_balanced_validation(labels, seed):
    """Indices of an equal-per-class sample (min class count each), without replacement.

    Deterministic under the seed; indices come back sorted, so an already
    balanced input yields the identity selection.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    counts = [int(np.sum(labels == c)) for c in range(3)]
    if any(c == 0 for c in counts):
        missing = NeedleState(counts.index(0)).label
        raise DatasetError(f"cannot balance: class {missing} has no frames")
    target = min(counts)
    picks = []
    for c in range(3):
        idx = np.flatnonzero(labels == c)
        picks.append(rng.choice(idx, size=target, replace=False))
    return np.sort(np.concatenate(picks))


@dataclass(frozen=True)
class Window:
    """T consecutive frame indices; pad frames repeat the final frame and carry mask=False."""

    indices: np.ndarray
    mask: np.ndarray  # True where the frame is real (included in loss)


def window_sequences(clip_length, t_steps):
    """Non-overlapping T-frame windows in temporal order over a clip."""
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    if clip_length < 1:
        raise ValueError("empty clip")
    windows = []
    start = 0
    while start < clip_length:
        idx = np.arange(start, start + t_steps)
        mask = idx < clip_length
        idx = np.minimum(idx, clip_length - 1)
        windows.append(Window(idx, mask))
        start += t_steps
    return windows


def _read_csv(path, expected_header):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MalformedManifestError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != list(expected_header):
        raise MalformedManifestError(
            f"{path}: expected header {','.join(expected_header)!r}"
        )
    return rows[1:]


def load_dataset(root):
    """Parse a dataset directory into a DataSplit, validating the label grammar."""
    root = Path(root)
    rows = _read_csv(root / "manifest.csv", ("clip_id", "split", "section", "infiltration"))
    split = DataSplit()
    seen = set()
    for row in rows:
        if len(row) != 4:
            raise MalformedManifestError(f"{root / 'manifest.csv'}: bad row {row!r}")
        clip_id, split_name, section, infil = (c.strip() for c in row)
        if clip_id in seen:
            raise DuplicateClipError(f"clip {clip_id!r} listed more than once")
        seen.add(clip_id)
        if split_name not in SPLITS:
            raise MalformedManifestError(f"clip {clip_id!r}: unknown split {split_name!r}")
        if section not in SECTIONS:
            raise MalformedManifestError(f"clip {clip_id!r}: unknown section {section!r}")
        if infil not in ("0", "1"):
            raise MalformedManifestError(f"clip {clip_id!r}: infiltration must be 0 or 1")
        clip_dir = root / split_name / clip_id
        label_rows = _read_csv(clip_dir / "labels.csv", ("frame_index", "state"))
        labels = np.empty(len(label_rows), dtype=np.int64)
        paths = []
        for i, lrow in enumerate(label_rows):
            idx, state = int(lrow[0]), NeedleState.parse(lrow[1])
            if idx != i:
                raise MalformedManifestError(
                    f"clip {clip_id!r}: labels.csv row {i} has frame_index {idx}"
                )
            labels[i] = state
            paths.append(clip_dir / f"frame_{i:06d}.png")
        validate_labels(labels, clip_id)
        has_infil = bool(np.any(labels == NeedleState.INFIL))
        if has_infil != (infil == "1"):
            raise MalformedManifestError(
                f"clip {clip_id!r}: infiltration flag {infil} disagrees with labels"
            )
        clip = VideoClip(clip_id, section, has_infil, labels, frame_paths=paths)
        split.clips(split_name).append(clip)
    return split


def write_clip(clip, root, split_name):
    """Write one in-memory clip in the on-disk layout."""
    clip_dir = Path(root) / split_name / clip.clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    with open(clip_dir / "labels.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("frame_index,state\n")
        for i, lab in enumerate(clip.labels):
            fh.write(f"{i},{NeedleState(lab).label}\n")
    for i, frame in enumerate(clip.frames):
        ok = cv2.imwrite(
            str(clip_dir / f"frame_{i:06d}.png"),
            cv2.cvtColor(frame, cv2.COLOR_RGB2BGR),
            [cv2.IMWRITE_PNG_COMPRESSION, 1],
        )
        if not ok:
            raise DatasetError(f"failed to write frame {i} of clip {clip.clip_id!r}")


def write_manifest(entries, root):
    """entries: iterable of (clip_id, split, section, infiltration_bool)."""
    with open(Path(root) / "manifest.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("clip_id,split,section,infiltration\n")
        for clip_id, split_name, section, infil in entries:
            fh.write(f"{clip_id},{split_name},{section},{1 if infil else 0}\n")
