"""Dense array substrate for all layer math.

Tensors are plain numpy ndarrays, row-major, float32 by default. A float64
mode exists for finite-difference gradient checking: build layers with
``dtype=np.float64`` and every operation below follows the input dtype.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


def as_tensor(data, shape=None, dtype=np.float32):
    x = np.asarray(data, dtype=dtype)
    if shape is not None:
        x = reshape(x, shape)
    return x


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape size {x.size} to {shape}")
    return x.reshape(shape)


def matmul(a, b):
    """Matrix product of two rank-2 tensors [m*k] x [k*n] -> [m*n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    return a @ b


def pad2d(x, p):
    """Zero-pad the two spatial axes of an [H, W, C] tensor by p pixels."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"pad2d needs rank-3 [H,W,C], got rank {x.ndim}")
    if p < 0:
        raise ValueError("padding must be non-negative")
    if p == 0:
        return x
    return np.pad(x, ((p, p), (p, p), (0, 0)))


def elementwise(x, f):
    """Apply a scalar map independently to every element."""
    x = np.asarray(x)
    out = f(x)
    if not (isinstance(out, np.ndarray) and out.shape == x.shape):
        # f is a pure scalar function; vectorize it
        out = np.vectorize(f, otypes=[x.dtype])(x)
    return out
