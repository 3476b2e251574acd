"""Evaluation reports: delimited metrics plus matplotlib figures rendered to files.

Everything here is presentation; the numbers come from :mod:`needlenet.metrics`.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import CLASS_NAMES
from .data import zero_center
from .metrics import (
    confusion,
    group_summary,
    oscillation_excess,
    per_video_accuracy,
    ranksum_test,
    transition_lag,
)
from .trainer import FrameCache, _clip_features, predict_sequence

SECTION_GROUPS = {
    "L": "Left",
    "C": "Center",
    "R": "Right",
    "F": "Front",
    "M": "Middle",
    "B": "Back",
}


def predict_clips(model, clips, kind):
    """Per-frame argmax predictions for every clip; returns {clip_id: preds}."""
    cache = FrameCache.build(clips)
    out = {}
    for clip, frames in zip(cache.clips, cache.frames):
        if kind == "cnn":
            preds = []
            for i in range(0, len(frames), 64):
                probs = model.forward(zero_center(frames[i : i + 64]), keep_cache=False)
                preds.append(probs.argmax(axis=1))
            out[clip.clip_id] = np.concatenate(preds)
        else:
            out[clip.clip_id] = predict_sequence(model, _clip_features(model, frames))
    return out


def clip_groups(clip):
    """Table-IV style groups a clip belongs to: row group, column group, infiltration group."""
    return (
        SECTION_GROUPS[clip.section[1]],
        SECTION_GROUPS[clip.section[0]],
        "Infiltration" if clip.infiltration else "No infiltration",
    )


def group_accuracy_rows(clips, accuracies):
    """(group, n, acc_max, acc_min, acc_avg) rows over per-clip accuracies."""
    buckets = {}
    for clip in clips:
        for g in clip_groups(clip):
            buckets.setdefault(g, []).append(accuracies[clip.clip_id])
    order = ["Left", "Center", "Right", "Front", "Middle", "Back", "No infiltration", "Infiltration"]
    rows = []
    for g in order:
        if g in buckets:
            s = group_summary(buckets[g])
            rows.append((g, len(buckets[g]), s.acc_max, s.acc_min, s.acc_avg))
    return rows


def evaluate_clips(clips, predictions):
    """Bundle of metrics for one model over a clip list."""
    all_preds = np.concatenate([predictions[c.clip_id] for c in clips])
    all_labels = np.concatenate([c.labels for c in clips])
    per_clip = {c.clip_id: per_video_accuracy(predictions[c.clip_id], c.labels) for c in clips}
    lags = {c.clip_id: transition_lag(predictions[c.clip_id], c.labels) for c in clips}
    return {
        "confusion": confusion(all_preds, all_labels),
        "per_clip_accuracy": per_clip,
        "summary": group_summary(per_clip.values()),
        "group_rows": group_accuracy_rows(clips, per_clip),
        "lags": lags,
        "oscillation_excess": {
            c.clip_id: oscillation_excess(predictions[c.clip_id], c.labels) for c in clips
        },
    }


def infiltration_ranksum(clips, per_clip_accuracy):
    with_i = [per_clip_accuracy[c.clip_id] for c in clips if c.infiltration]
    without = [per_clip_accuracy[c.clip_id] for c in clips if not c.infiltration]
    if not with_i or not without:
        return None
    return ranksum_test(with_i, without)


def write_eval_csv(results, clips, outdir, prefix):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / f"{prefix}_per_clip.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "section", "infiltration", "accuracy", "oscillation_excess",
                    "mean_lag", "max_lag", "unmatched_transitions"])
        for clip in clips:
            lag = results["lags"][clip.clip_id]
            w.writerow([
                clip.clip_id, clip.section, int(clip.infiltration),
                f"{results['per_clip_accuracy'][clip.clip_id]:.6f}",
                results["oscillation_excess"][clip.clip_id],
                f"{lag.mean_lag:.3f}", lag.max_lag, lag.unmatched,
            ])
    with open(outdir / f"{prefix}_groups.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "trials", "acc_max", "acc_min", "acc_avg"])
        for g, n, amax, amin, aavg in results["group_rows"]:
            w.writerow([g, n, f"{amax:.3f}", f"{amin:.3f}", f"{aavg:.3f}"])
    cm = results["confusion"]
    with open(outdir / f"{prefix}_confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred"] + list(CLASS_NAMES))
        for r, name in enumerate(CLASS_NAMES):
            w.writerow([name] + [int(v) for v in cm.counts[r]])


def render_confusion(cm, path, title=""):
    norm = cm.normalized()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for r in range(3):
        for c in range(3):
            ax.text(c, r, f"{norm[r, c]:.2f}", ha="center", va="center",
                    color="white" if norm[r, c] > 0.5 else "black")
    ax.set_xticks(range(3), CLASS_NAMES)
    ax.set_yticks(range(3), CLASS_NAMES)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Ground truth")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history(history, path, title="Training history"):
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    epochs = [r.epoch for r in history]
    ax1.plot(epochs, [r.train_loss for r in history], "C0-", label="train loss")
    ax1.set_xlabel("Epoch")
    ax1.set_ylabel("Train loss", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [r.val_acc for r in history], "C1-", label="val accuracy")
    ax2.set_ylabel("Validation accuracy", color="C1")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_timeline(labels, named_predictions, path, title=""):
    """Step plot of ground truth vs model label sequences over one clip."""
    rows = [("GT", np.asarray(labels))] + [(n, np.asarray(p)) for n, p in named_predictions]
    fig, ax = plt.subplots(figsize=(8, 1.2 * len(rows) + 1))
    for i, (name, seq) in enumerate(rows):
        ax.step(np.arange(len(seq)), seq + i * 3.5, where="post", label=name)
        ax.text(-0.01 * len(seq), i * 3.5 + 1, name, ha="right", va="center")
    ax.set_yticks([0, 1, 2], CLASS_NAMES)
    ax.set_xlabel("Frame")
    ax.set_ylim(-0.5, 3.5 * len(rows))
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_sweep(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ts = [r[0] for r in rows]
    accs = [r[1] for r in rows]
    ax.plot(ts, accs, "o-")
    ax.set_xlabel("Time steps")
    ax.set_ylabel("Best validation accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
