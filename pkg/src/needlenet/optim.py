"""Class-weighted cross-entropy loss and the Adam optimizer."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss multipliers for (NoNeedle, Fist, Infil)."""

    w: tuple

    def __post_init__(self):
        if len(self.w) != 3 or any(v <= 0 for v in self.w):
            raise ValueError(f"need 3 positive weights, got {self.w}")

    @classmethod
    def uniform(cls):
        return cls((1.0, 1.0, 1.0))


def compute_class_weights(counts):
    """Weights inversely proportional to per-class frame counts; majority class gets 1.0."""
    counts = [int(c) for c in counts]
    if len(counts) != 3:
        raise ValueError(f"need 3 class counts, got {len(counts)}")
    if any(c <= 0 for c in counts):
        raise ValueError(f"class counts must be positive, got {counts}")
    top = max(counts)
    return ClassWeights(tuple(top / c for c in counts))


def weighted_cross_entropy(probs, true_class, weights):
    """Loss and gradient wrt the pre-softmax logits for one sample.

    probs must come from a softmax. Gradient wrt logits is w_true * (p - onehot).
    """
    probs = np.asarray(probs)
    w = weights.w[true_class]
    p_true = max(float(probs[true_class]), 1e-12)
    loss = -w * np.log(p_true)
    grad_logits = w * probs.copy()
    grad_logits[true_class] -= w
    return loss, grad_logits


def weighted_cross_entropy_batch(probs, true_classes, weights):
    """Vectorized mean weighted CE over a batch; returns (loss, grad_logits)."""
    probs = np.asarray(probs)
    n = probs.shape[0]
    wvec = np.asarray(weights.w, dtype=probs.dtype)[true_classes]
    p_true = np.clip(probs[np.arange(n), true_classes], 1e-12, None)
    loss = float(np.mean(-wvec * np.log(p_true)))
    grad = probs * wvec[:, None]
    grad[np.arange(n), true_classes] -= wvec
    return loss, grad / n


class Adam:
    """Adam with bias correction. Frozen params are skipped entirely."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1**self.t
        bc2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None
