"""Training loops for light CNNs and CRNNs with best-checkpoint retention.

CNN training shuffles and augments individual frames and selects on the
balanced validation sample. CRNN training feeds non-overlapping T-frame
windows in temporal order (no augmentation, no shuffling) on top of the frozen
conv base and selects on per-frame accuracy over the unbalanced validation
clips.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import make_balanced_validation, window_sequences, zero_center, resize_frame, augment
from .models import (
    Checkpoint,
    build_crnn,
    build_light_cnn,
    checkpoint_from_model,
)
from .optim import Adam, ClassWeights, compute_class_weights, weighted_cross_entropy_batch


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    window_batch: int = 4
    class_weights: ClassWeights = None  # None -> derived from training frame counts
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_acc"])
        for rec in history:
            writer.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_acc:.6f}"])


def read_history(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_acc"])) for r in rows
    ]


def cache_clip_frames(clip):
    """All frames of a clip resized to network input size, uint8 (n, 112, 112, 3)."""
    return np.stack([resize_frame(f) for f in clip.iter_frames()])


@dataclass
class FrameCache:
    """Resized uint8 frames and labels for a list of clips."""

    clips: list
    frames: list = field(default_factory=list)  # one (n_i, 112, 112, 3) array per clip

    @classmethod
    def build(cls, clips):
        return cls(clips, [cache_clip_frames(c) for c in clips])

    def flat(self):
        frames = np.concatenate(self.frames)
        labels = np.concatenate([c.labels for c in self.clips])
        return frames, labels


def resolve_class_weights(config, train_labels):
    if config.class_weights is not None:
        return config.class_weights
    counts = [max(int(np.sum(train_labels == c)), 1) for c in range(3)]
    return compute_class_weights(counts)


def _model_accuracy(model, frames_f32, labels, batch=128):
    correct = 0
    for i in range(0, len(labels), batch):
        probs = model.forward(frames_f32[i : i + batch], keep_cache=False)
        correct += int(np.sum(probs.argmax(axis=1) == labels[i : i + batch]))
    return correct / len(labels)


def train_cnn(spec, split, config, progress=None):
    """Train a light CNN; returns (best Checkpoint, history)."""
    rng = np.random.default_rng(config.seed)
    model = build_light_cnn(spec, seed=config.seed)
    train_cache = FrameCache.build(split.train)
    val_cache = FrameCache.build(split.validation)
    frames, labels = train_cache.flat()
    vframes, vlabels = val_cache.flat()
    pick = make_balanced_validation(vlabels, seed=config.seed)
    val_frames = zero_center(vframes[pick])
    val_labels = vlabels[pick]
    weights = resolve_class_weights(config, labels)
    opt = Adam(model.parameters(), lr=config.lr)

    history = []
    best = None
    n = len(labels)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = frames[idx]
            if config.augment:
                batch = np.stack([augment(f, rng) for f in batch])
            x = zero_center(batch)
            probs = model.forward(x, keep_cache=True)
            loss, grad = weighted_cross_entropy_batch(probs, labels[idx], weights)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
            losses.append(loss)
            model.clear_grads()
            model.backward(grad)
            opt.step()
        val_acc = _model_accuracy(model, val_frames, val_labels)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_acc)
        history.append(rec)
        if progress:
            progress(rec)
        if best is None or val_acc > best.val_acc:
            best = checkpoint_from_model(model, epoch=epoch, val_acc=val_acc, seed=config.seed)
    return best, history


def _clip_features(model, frames_u8, batch=64):
    feats = []
    for i in range(0, len(frames_u8), batch):
        feats.append(model.conv_features(zero_center(frames_u8[i : i + batch])))
    return np.concatenate(feats)


def predict_sequence(model, feats):
    """Per-frame argmax labels with LSTM state carried across the whole sequence."""
    h, c = model.initial_state(1)
    preds = np.empty(len(feats), dtype=np.int64)
    for i in range(len(feats)):
        probs, h, c = model.step(feats[i : i + 1], h, c)
        preds[i] = int(probs[0].argmax())
    return preds


def train_crnn(base_checkpoint, time_steps, split, config, progress=None):
    """Train the recurrent head on a frozen conv base; returns (best Checkpoint, history)."""
    rng = np.random.default_rng(config.seed)
    model = build_crnn(base_checkpoint, time_steps, seed=config.seed)

    train_cache = FrameCache.build(split.train)
    val_cache = FrameCache.build(split.validation)
    train_feats = [_clip_features(model, f) for f in train_cache.frames]
    val_feats = [_clip_features(model, f) for f in val_cache.frames]
    all_labels = np.concatenate([c.labels for c in split.train])
    weights = resolve_class_weights(config, all_labels)

    # materialize every training window once, grouped per clip so the LSTM
    # state can chain across a clip's consecutive windows (as it does when
    # streaming); sorted by window count so an active batch is always a prefix
    clip_windows = []
    for feats, clip in zip(train_feats, train_cache.clips):
        wins = [
            (feats[win.indices], clip.labels[win.indices], win.mask)
            for win in window_sequences(len(feats), time_steps)
        ]
        clip_windows.append(wins)
    clip_windows.sort(key=len, reverse=True)

    opt = Adam(model.trainable_parameters(), lr=config.lr)
    wvec = np.asarray(weights.w, dtype=np.float32)
    history = []
    best = None
    for epoch in range(1, config.epochs + 1):
        losses = []
        for start in range(0, len(clip_windows), config.window_batch):
            group = clip_windows[start : start + config.window_batch]
            state = None
            for j in range(len(group[0])):
                active = [wins for wins in group if len(wins) > j]
                feats = np.stack([wins[j][0] for wins in active], axis=1)  # (T, B, F)
                lab = np.stack([wins[j][1] for wins in active]).T  # (T, B)
                mask = np.stack([wins[j][2] for wins in active]).T
                init = None if state is None else (state[0][: len(active)], state[1][: len(active)])
                probs, bundle = model.forward_sequence(feats, training=True, rng=rng, state=init)
                state = bundle[-1]
                n_valid = int(mask.sum())
                w = wvec[lab] * mask
                p_true = np.clip(np.take_along_axis(probs, lab[:, :, None], axis=2)[:, :, 0], 1e-12, None)
                loss = float(np.sum(-w * np.log(p_true)) / n_valid)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
                losses.append(loss)
                grad = probs * w[:, :, None]
                np.put_along_axis(
                    grad,
                    lab[:, :, None],
                    np.take_along_axis(grad, lab[:, :, None], axis=2) - w[:, :, None],
                    axis=2,
                )
                grad /= n_valid
                model.clear_grads()
                model.backward_sequence(grad, bundle)
                opt.step()
        correct = 0
        total = 0
        for feats, clip in zip(val_feats, val_cache.clips):
            preds = predict_sequence(model, feats)
            correct += int(np.sum(preds == clip.labels))
            total += len(feats)
        val_acc = correct / total
        rec = EpochRecord(epoch, float(np.mean(losses)), val_acc)
        history.append(rec)
        if progress:
            progress(rec)
        if best is None or val_acc > best.val_acc:
            best = checkpoint_from_model(model, epoch=epoch, val_acc=val_acc, seed=config.seed)
    return best, history


def sweep_crnn_timesteps(base_checkpoint, t_list, split, config, progress=None):
    """Independent CRNN runs per T; returns (rows [(T, best val acc)], selected T).

    Ties select the smallest T.
    """
    rows = []
    for t in t_list:
        if t < 1:
            raise ValueError("time steps must be >= 1")
        best, _ = train_crnn(base_checkpoint, t, split, config, progress=progress)
        rows.append((t, best.val_acc))
    selected = min(rows, key=lambda row: (-row[1], row[0]))[0]
    return rows, selected
