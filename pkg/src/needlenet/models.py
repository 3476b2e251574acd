"""Network construction, parameter counting, and checkpoint serialization.

Two families:

* Light CNN: a stack of conv(3x3, stride 1, pad 1, ReLU) + maxpool(2x2) blocks
  feeding a 3-way softmax directly (no hidden dense layers).
* CRNN: the trained light CNN's frozen conv stack, a 32-unit ReLU dense layer
  on the last pool output, a 32-unit LSTM, and a 3-way softmax emitted at every
  time step.

Checkpoints (``.nsnet``) are a text header plus little-endian float32 arrays in
declared order; save -> load -> forward is bit-exact.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import NUM_CLASSES
from .layers import Conv2d, Dense, LstmCell, MaxPool2d, ReLU, dropout, dropout_backward
from .optim import Adam  # noqa: F401  (re-exported for convenience)

INPUT_SIZE = 112
MEAN_RGB = (123.68, 116.779, 103.939)

CHECKPOINT_MAGIC = "NSNET"
CHECKPOINT_VERSION = 1
DATA_MARKER = b"##DATA##\n"

TABLE_ARCHS = (
    (2, 4),
    (4, 8),
    (8, 16),
    (16, 32),
    (32, 64),
    (64, 128),
    (128, 256),
    (8, 16, 32),
    (16, 32, 32),
)


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSpecMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class LightCnnSpec:
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.blocks) not in (2, 3):
            raise ValueError(f"light CNNs have 2 or 3 blocks, got {len(self.blocks)}")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"filter counts must be positive: {self.blocks}")

    @property
    def arch_string(self):
        return "-".join(str(b) for b in self.blocks)

    @property
    def feature_size(self):
        side = INPUT_SIZE // 2 ** len(self.blocks)
        return side * side * self.blocks[-1]

    @classmethod
    def parse(cls, arch):
        try:
            return cls(tuple(int(t) for t in arch.split("-")))
        except (ValueError, AttributeError) as exc:
            if isinstance(exc, ValueError) and "blocks" in str(exc):
                raise
            raise ValueError(f"bad architecture string {arch!r}") from exc


@dataclass(frozen=True)
class CrnnSpec:
    base: LightCnnSpec = field(default_factory=lambda: LightCnnSpec((16, 32, 32)))
    dense_units: int = 32
    lstm_units: int = 32
    time_steps: int = 30
    dropout_ratio: float = 0.5
    conv_frozen: bool = True

    def __post_init__(self):
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError("dropout ratio must be in [0, 1)")

    @property
    def arch_string(self):
        return self.base.arch_string


def count_parameters(spec):
    """Exact parameter total for a LightCnnSpec or CrnnSpec (frozen params included)."""
    if isinstance(spec, CrnnSpec):
        base = spec.base
        total = _conv_stack_params(base.blocks)
        total += base.feature_size * spec.dense_units + spec.dense_units
        nh, ni = spec.lstm_units, spec.dense_units
        total += 4 * (ni * nh + nh * nh + nh)
        total += nh * NUM_CLASSES + NUM_CLASSES
        return total
    total = _conv_stack_params(spec.blocks)
    total += spec.feature_size * NUM_CLASSES + NUM_CLASSES
    return total


def _conv_stack_params(blocks):
    total = 0
    c_in = 3
    for alpha in blocks:
        total += 9 * c_in * alpha + alpha
        c_in = alpha
    return total


class LightCnn:
    def __init__(self, spec, rng=None, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.convs = []
        self.relus = []
        self.pools = []
        c_in = 3
        for i, alpha in enumerate(spec.blocks):
            # the image itself never needs a gradient
            self.convs.append(Conv2d(c_in, alpha, rng, dtype, need_input_grad=i > 0))
            self.relus.append(ReLU())
            self.pools.append(MaxPool2d())
            c_in = alpha
        self.out = Dense(spec.feature_size, NUM_CLASSES, rng, dtype, init="zero", name="out")

    def forward_features(self, x, keep_cache=False):
        """Conv stack output flattened to (N, feature_size)."""
        h = np.asarray(x, dtype=self.dtype)
        squeeze = h.ndim == 3
        if squeeze:
            h = h[None]
        for conv, act, pool in zip(self.convs, self.relus, self.pools):
            h = pool.forward(act.forward(conv.forward(h, keep_cache), keep_cache), keep_cache)
        feats = h.reshape(h.shape[0], -1)
        return feats[0] if squeeze else feats

    def forward(self, x, keep_cache=False):
        """Class probabilities, shape (N, 3) (or (3,) for a single frame)."""
        feats = self.forward_features(x, keep_cache)
        logits = self.out.forward(feats, keep_cache)
        from .layers import softmax

        return softmax(logits)

    def backward(self, grad_logits):
        grad = self.out.backward(grad_logits)
        n = grad.shape[0] if grad.ndim == 2 else 1
        side = INPUT_SIZE // 2 ** len(self.spec.blocks)
        grad = grad.reshape(n, side, side, self.spec.blocks[-1])
        for conv, act, pool in zip(reversed(self.convs), reversed(self.relus), reversed(self.pools)):
            grad = conv.backward(act.backward(pool.backward(grad)))
        return grad

    def clear_grads(self):
        for p in self.parameters():
            p.grad = None

    def parameters(self):
        out = []
        for conv in self.convs:
            out.extend(conv.params())
        out.extend(self.out.params())
        return out

    def named_arrays(self):
        """Ordered (name, array) pairs defining the checkpoint layout."""
        pairs = []
        for i, conv in enumerate(self.convs):
            pairs.append((f"conv{i}_w", conv.w.value))
            pairs.append((f"conv{i}_b", conv.b.value))
        pairs.append(("out_w", self.out.w.value))
        pairs.append(("out_b", self.out.b.value))
        return pairs


class Crnn:
    """Frozen conv base + dense-32 (ReLU) + LSTM-32 + per-step 3-way softmax."""

    def __init__(self, spec, rng=None, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.convs = []
        c_in = 3
        for alpha in spec.base.blocks:
            self.convs.append(Conv2d(c_in, alpha, rng, dtype, frozen=spec.conv_frozen))
            c_in = alpha
        self._conv_relus = [ReLU() for _ in self.convs]
        self._conv_pools = [MaxPool2d() for _ in self.convs]
        self.feat_dense = Dense(spec.base.feature_size, spec.dense_units, rng, dtype, name="feat")
        self.lstm = LstmCell(spec.dense_units, spec.lstm_units, rng, dtype)
        self.out = Dense(spec.lstm_units, NUM_CLASSES, rng, dtype, init="zero", name="out")

    def conv_features(self, x):
        """Frozen conv stack output flattened to (N, feature_size); no caches kept."""
        h = np.asarray(x, dtype=self.dtype)
        squeeze = h.ndim == 3
        if squeeze:
            h = h[None]
        for conv, act, pool in zip(self.convs, self._conv_relus, self._conv_pools):
            h = pool.forward(act.forward(conv.forward(h, keep_cache=False), False), False)
        feats = h.reshape(h.shape[0], -1)
        return feats[0] if squeeze else feats

    def forward_sequence(self, feats, training=False, rng=None, state=None):
        """Run the recurrent head over conv features (T, N, feature_size).

        Returns (probs (T, N, 3), cache-bundle for backward_sequence). `state`
        optionally seeds the LSTM (h, c); the bundle's last element holds the
        final state so consecutive windows of one clip can chain, with
        backpropagation truncated at the window boundary.
        """
        from .layers import softmax

        t_steps, batch = feats.shape[0], feats.shape[1]
        h, c = self.lstm.initial_state(batch) if state is None else state
        dense_caches, lstm_caches, drop_masks, hs, probs = [], [], [], [], []
        for t in range(t_steps):
            x = feats[t] @ self.feat_dense.w.value + self.feat_dense.b.value
            mask_relu = x > 0
            x = np.maximum(x, 0)
            h, c, cache = self.lstm.step(x, h, c)
            hd, dmask = dropout(h, self.spec.dropout_ratio, training, rng)
            logits = hd @ self.out.w.value + self.out.b.value
            probs.append(softmax(logits))
            dense_caches.append((feats[t], mask_relu))
            lstm_caches.append(cache)
            drop_masks.append(dmask)
            hs.append(hd)
        bundle = (dense_caches, lstm_caches, drop_masks, hs, (h, c))
        return np.stack(probs), bundle

    def backward_sequence(self, grad_logits, bundle):
        """Accumulate gradients for the recurrent head; conv stack stays untouched."""
        dense_caches, lstm_caches, drop_masks, hs, _ = bundle
        t_steps = len(lstm_caches)
        gow = np.zeros_like(self.out.w.value)
        gob = np.zeros_like(self.out.b.value)
        grad_hs = []
        for t in range(t_steps):
            g = grad_logits[t]
            gow += hs[t].T @ g
            gob += g.sum(axis=0)
            gh = g @ self.out.w.value.T
            gh = dropout_backward(gh, drop_masks[t], self.spec.dropout_ratio)
            grad_hs.append(gh)
        self.out.w.grad = gow
        self.out.b.grad = gob
        grad_xs = self.lstm.backward_window(lstm_caches, grad_hs)
        gfw = np.zeros_like(self.feat_dense.w.value)
        gfb = np.zeros_like(self.feat_dense.b.value)
        for t in range(t_steps):
            feat, mask_relu = dense_caches[t]
            gx = grad_xs[t] * mask_relu
            gfw += feat.T @ gx
            gfb += gx.sum(axis=0)
        self.feat_dense.w.grad = gfw
        self.feat_dense.b.grad = gfb

    def step(self, feat, h, c):
        """One streaming step over conv features (N, feature_size); dropout off."""
        from .layers import softmax

        x = np.maximum(feat @ self.feat_dense.w.value + self.feat_dense.b.value, 0)
        h, c, _ = self.lstm.step(x, h, c)
        logits = h @ self.out.w.value + self.out.b.value
        return softmax(logits), h, c

    def initial_state(self, batch=1):
        return self.lstm.initial_state(batch)

    def clear_grads(self):
        for p in self.parameters():
            p.grad = None

    def parameters(self):
        out = []
        for conv in self.convs:
            out.extend(conv.params())
        out.extend(self.feat_dense.params())
        out.extend(self.lstm.params())
        out.extend(self.out.params())
        return out

    def trainable_parameters(self):
        return [p for p in self.parameters() if not p.frozen]

    def named_arrays(self):
        pairs = []
        for i, conv in enumerate(self.convs):
            pairs.append((f"conv{i}_w", conv.w.value))
            pairs.append((f"conv{i}_b", conv.b.value))
        pairs.extend(
            [
                ("feat_w", self.feat_dense.w.value),
                ("feat_b", self.feat_dense.b.value),
                ("lstm_wx", self.lstm.wx.value),
                ("lstm_wh", self.lstm.wh.value),
                ("lstm_b", self.lstm.b.value),
                ("out_w", self.out.w.value),
                ("out_b", self.out.b.value),
            ]
        )
        return pairs


def build_light_cnn(spec, seed=0, dtype=np.float32):
    """Fresh light CNN with deterministic initialization under the seed."""
    return LightCnn(spec, np.random.default_rng(seed), dtype)


def build_crnn(base_checkpoint, time_steps, seed=0, dtype=np.float32):
    """CRNN on a trained <16-32-32> base; conv parameters copied and frozen."""
    if base_checkpoint.kind != "cnn":
        raise CheckpointSpecMismatchError(
            f"CRNN base must be a light CNN checkpoint, got kind={base_checkpoint.kind!r}"
        )
    base_spec = LightCnnSpec.parse(base_checkpoint.arch)
    if base_spec.blocks != (16, 32, 32):
        raise CheckpointSpecMismatchError(
            f"CRNN base must be the <16-32-32> light CNN, got <{base_checkpoint.arch}>"
        )
    spec = CrnnSpec(base=base_spec, time_steps=time_steps)
    model = Crnn(spec, np.random.default_rng(seed), dtype)
    for i, conv in enumerate(model.convs):
        conv.w.value = base_checkpoint.arrays[f"conv{i}_w"].astype(dtype)
        conv.b.value = base_checkpoint.arrays[f"conv{i}_b"].astype(dtype)
    return model


@dataclass
class Checkpoint:
    kind: str  # "cnn" or "crnn"
    arch: str
    arrays: dict
    time_steps: int = 0
    epoch: int = 0
    val_acc: float = 0.0
    seed: int = 0
    mean_rgb: tuple = MEAN_RGB


def checkpoint_from_model(model, epoch=0, val_acc=0.0, seed=0):
    if isinstance(model, Crnn):
        kind, tsteps = "crnn", model.spec.time_steps
    else:
        kind, tsteps = "cnn", 0
    arrays = {name: arr.copy() for name, arr in model.named_arrays()}
    return Checkpoint(kind, model.spec.arch_string, arrays, tsteps, epoch, val_acc, seed)


def model_from_checkpoint(ckpt, dtype=np.float32):
    if ckpt.kind == "cnn":
        model = LightCnn(LightCnnSpec.parse(ckpt.arch), rng=None, dtype=dtype)
    elif ckpt.kind == "crnn":
        spec = CrnnSpec(base=LightCnnSpec.parse(ckpt.arch), time_steps=max(ckpt.time_steps, 1))
        model = Crnn(spec, rng=None, dtype=dtype)
    else:
        raise CheckpointSpecMismatchError(f"unknown checkpoint kind {ckpt.kind!r}")
    for name, arr in model.named_arrays():
        if name not in ckpt.arrays:
            raise CheckpointSpecMismatchError(f"checkpoint is missing array {name!r}")
        src = ckpt.arrays[name]
        if src.shape != arr.shape:
            raise CheckpointSpecMismatchError(
                f"array {name!r} has shape {src.shape}, expected {arr.shape}"
            )
        arr[...] = src.astype(dtype)
    return model


def save_checkpoint(model_or_ckpt, path, epoch=0, val_acc=0.0, seed=0):
    ckpt = model_or_ckpt
    if not isinstance(ckpt, Checkpoint):
        ckpt = checkpoint_from_model(ckpt, epoch, val_acc, seed)
    header = io.StringIO()
    header.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    header.write(f"kind {ckpt.kind}\n")
    header.write(f"arch {ckpt.arch}\n")
    header.write(f"timesteps {ckpt.time_steps}\n")
    header.write(f"epoch {ckpt.epoch}\n")
    header.write(f"val_acc {ckpt.val_acc!r}\n")
    header.write(f"seed {ckpt.seed}\n")
    header.write("mean_rgb " + " ".join(repr(float(v)) for v in ckpt.mean_rgb) + "\n")
    header.write(f"arrays {len(ckpt.arrays)}\n")
    for name, arr in ckpt.arrays.items():
        header.write(f"{name} " + " ".join(str(d) for d in arr.shape) + "\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        fh.write(DATA_MARKER)
        for arr in ckpt.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = blob.find(DATA_MARKER)
    if marker < 0:
        raise CorruptCheckpointError(f"{path}: missing data marker")
    try:
        lines = blob[:marker].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: undecodable header") from exc
    if not lines:
        raise CorruptCheckpointError(f"{path}: empty header")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic line {lines[0]!r}")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {magic[1]} unsupported (expected {CHECKPOINT_VERSION})"
        )
    fields = {}
    idx = 1
    try:
        while True:
            key, _, rest = lines[idx].partition(" ")
            fields[key] = rest
            idx += 1
            if key == "arrays":
                break
        n_arrays = int(fields["arrays"])
        decls = []
        for line in lines[idx : idx + n_arrays]:
            name, *dims = line.split()
            decls.append((name, tuple(int(d) for d in dims)))
        if len(decls) != n_arrays:
            raise IndexError
        kind = fields["kind"]
        arch = fields["arch"]
        tsteps = int(fields["timesteps"])
        epoch = int(fields["epoch"])
        val_acc = float(fields["val_acc"])
        seed = int(fields["seed"])
        mean_rgb = tuple(float(v) for v in fields["mean_rgb"].split())
    except (KeyError, ValueError, IndexError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed header") from exc
    data = blob[marker + len(DATA_MARKER) :]
    arrays = {}
    offset = 0
    for name, shape in decls:
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: truncated data for array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(kind, arch, arrays, tsteps, epoch, val_acc, seed, mean_rgb)
