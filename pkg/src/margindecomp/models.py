"""Small MLP classifiers, synthetic datasets, training, and checkpoints.

The synthetic tasks live on the [0, 1] box so that L-infinity balls and the
final box clipping of the attacks mean the same thing they do for images.
Class clusters are kept deliberately close together (relative to the attack
budget) so that a well-trained model has small but nonzero decision margins.

Training modes mirror the usual defense baselines: plain cross-entropy
("natural"), label smoothing ("natural+ls"), PGD adversarial training
("sat"), and the combination ("sat+ls").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from margindecomp.tensor import (
    DimensionError,
    GradTape,
    NonFiniteError,
    Tensor,
    add,
    backward,
    exp,
    log,
    matmul,
    mul,
    relu,
    reshape,
    sub,
    sum_reduce,
    tanh,
)
from margindecomp.losses import margin_values

__all__ = [
    "MlpModel",
    "Dataset",
    "TrainConfig",
    "InnerAttack",
    "TrainingError",
    "CheckpointFormatError",
    "init_mlp",
    "make_synthetic",
    "smooth_labels",
    "train",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_metadata",
    "save_dataset",
    "load_dataset",
]

ACTIVATIONS = ("relu", "tanh")
TRAIN_MODES = ("natural", "natural+ls", "sat", "sat+ls")


class TrainingError(RuntimeError):
    """Training diverged or was asked to do something impossible."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not form a valid model file."""


@dataclass
class MlpModel:
    """Fully-connected classifier; immutable once constructed.

    ``weights[i]`` has shape (layer_dims[i], layer_dims[i+1]) and
    ``biases[i]`` shape (1, layer_dims[i+1]).
    """

    layer_dims: list[int]
    activation: str
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        dims = self.layer_dims
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer_dims needs at least [D, C] with positive sizes, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("parameter count inconsistent with layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (1, dims[i + 1]):
                raise ValueError(
                    f"layer {i} parameter shapes {w.shape}/{b.shape} inconsistent with dims {dims}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def logits(self, x, tape: GradTape | None = None) -> Tensor:
        """Logits for a single input (D,) or a batch (N, D)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 1
        h = reshape(x, (1, x.size), tape=tape) if single else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"input width {h.shape} does not match model width {self.input_dim}")
        act = relu if self.activation == "relu" else tanh
        ones = Tensor(np.ones((h.shape[0], 1)))
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = add(matmul(h, w, tape=tape), matmul(ones, b, tape=tape), tape=tape)
            h = act(z, tape=tape) if i < last else z
        return reshape(h, (self.num_classes,), tape=tape) if single else h

    def parameter_arrays(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of parameter value copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w.data.copy())
            out.append(b.data.copy())
        return out

    @staticmethod
    def from_arrays(layer_dims, activation: str, params: list[np.ndarray]) -> "MlpModel":
        weights = [Tensor(params[2 * i]) for i in range(len(layer_dims) - 1)]
        biases = [Tensor(params[2 * i + 1]) for i in range(len(layer_dims) - 1)]
        return MlpModel(list(layer_dims), activation, weights, biases)


def init_mlp(layer_dims, activation: str = "relu", seed: int = 0) -> MlpModel:
    """He-style uniform fan-in initialization, biases at zero."""
    rng = np.random.default_rng([int(seed), 90]) if not isinstance(seed, np.random.Generator) else seed
    params: list[np.ndarray] = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros((1, fan_out)))
    return MlpModel.from_arrays(layer_dims, activation, params)


@dataclass(frozen=True)
class Dataset:
    """Inputs on the [0,1] box with integer labels in [0, num_classes)."""

    inputs: Tensor
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != labels.size or labels.size < 1:
            raise ValueError(f"inputs {self.inputs.shape} and labels {labels.shape} do not align")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        x = self.inputs.data
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValueError("inputs must lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _balanced_labels(num_classes: int, size: int) -> np.ndarray:
    counts = [size // num_classes + (1 if c < size % num_classes else 0) for c in range(num_classes)]
    return np.repeat(np.arange(num_classes), counts)


def make_synthetic(
    kind: str,
    num_classes: int,
    dim: int,
    size: int,
    seed: int,
    *,
    split: str = "train",
    sigma: float = 0.05,
    separation: float = 6.0,
    center_spread: float = 0.12,
) -> Dataset:
    """Deterministic synthetic classification task in the [0,1] box.

    ``gaussians``: isotropic class clusters with center distances at least
    ``separation * sigma``; ``spirals``: interleaved arms in the first two
    dimensions with Gaussian off-plane noise. Class counts differ by at most
    one. The center layout depends only on ``seed``, the sampling noise also
    on ``split``, so train/test pairs share the same geometry.
    """
    if num_classes < 2 or dim < 2 or size < num_classes:
        raise ValueError(f"need C >= 2, D >= 2, N >= C; got C={num_classes}, D={dim}, N={size}")
    if kind not in ("gaussians", "spirals"):
        raise ValueError(f"unknown synthetic kind {kind!r}; valid: gaussians, spirals")
    if sigma <= 0 or separation < 0:
        raise ValueError("sigma must be positive and separation non-negative")

    labels = _balanced_labels(num_classes, size)
    noise_rng = np.random.default_rng([int(seed), 1 if split == "train" else 2])

    if kind == "gaussians":
        center_rng = np.random.default_rng([int(seed), 17])
        for attempt in range(200):
            centers = 0.5 + center_spread * center_rng.standard_normal((num_classes, dim))
            gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
            np.fill_diagonal(gaps, np.inf)
            if gaps.min() >= separation * sigma:
                break
        else:
            raise ValueError(
                f"could not place {num_classes} centers {separation} sigma apart; loosen the geometry"
            )
        raw = centers[labels] + sigma * noise_rng.standard_normal((size, dim))
        # Fixed affine squeeze into the box (same map for every split), then a
        # clip for >4-sigma stragglers.
        span = 3.5 * center_spread + 4.0 * sigma
        points = 0.5 + (raw - 0.5) * (0.5 / max(span, 0.5))
    else:
        turns = 1.5
        t = noise_rng.uniform(0.0, 1.0, size=size)
        theta = 2.0 * np.pi * labels / num_classes + turns * np.pi * t
        radius = 0.06 + 0.40 * t
        points = np.full((size, dim), 0.5)
        points[:, 0] += radius * np.cos(theta)
        points[:, 1] += radius * np.sin(theta)
        points += sigma * noise_rng.standard_normal((size, dim))

    order = noise_rng.permutation(size)
    return Dataset(Tensor(np.clip(points[order], 0.0, 1.0)), labels[order], num_classes, split=split)


def smooth_labels(y: int, num_classes: int, smoothing: float) -> Tensor:
    """Target vector with 1-s on the true class and s/(C-1) elsewhere."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} outside [0, {num_classes})")
    target = np.full(num_classes, smoothing / (num_classes - 1))
    target[y] = 1.0 - smoothing
    return Tensor(target)


def _smooth_rows(y: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    rows = np.full((y.size, num_classes), smoothing / (num_classes - 1))
    rows[np.arange(y.size), y] = 1.0 - smoothing
    return rows


@dataclass(frozen=True)
class InnerAttack:
    """PGD settings for the adversarial-training inner loop."""

    epsilon: float = 0.05
    steps: int = 7
    alpha: float = 0.0125

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.steps < 1 or self.alpha <= 0:
            raise ValueError(f"invalid inner attack settings: {self}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: str = "natural"
    smoothing: float = 0.5
    inner: InnerAttack = field(default_factory=InnerAttack)

    def __post_init__(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0, weight_decay >= 0")

    @property
    def adversarial(self) -> bool:
        return self.mode.startswith("sat")

    @property
    def effective_smoothing(self) -> float:
        return self.smoothing if self.mode.endswith("+ls") else 0.0


def _soft_ce_sum(tape: GradTape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over the batch of cross-entropy against soft target rows."""
    n, c = logits.shape
    m = logits.data.max(axis=1, keepdims=True)
    shifted = sub(logits, matmul(Tensor(m), Tensor(np.ones((1, c))), tape=tape), tape=tape)
    lse = add(log(sum_reduce(exp(shifted, tape=tape), axis=1, tape=tape), tape=tape), Tensor(m[:, 0]), tape=tape)
    picked = sum_reduce(mul(logits, Tensor(targets), tape=tape), axis=1, tape=tape)
    return sum_reduce(sub(lse, picked, tape=tape), tape=tape)


def train(model: MlpModel, data: Dataset, cfg: TrainConfig, on_batch=None):
    """Mini-batch SGD with momentum; returns (trained model, per-epoch mean loss).

    With a ``sat`` mode every batch is replaced by PGD adversarial examples
    generated against the current parameters at ``cfg.inner`` settings.
    ``on_batch(epoch, batch_index, x, x_train)`` is called per batch when
    given (used by tests to audit the inner attack).
    """
    from margindecomp.attacks import AttackConfig, pgd  # deliberate late import: attacks sit above models

    if len(data) < 1:
        raise ValueError("dataset is empty")
    if data.dim != model.input_dim or data.num_classes != model.num_classes:
        raise ValueError("model and dataset disagree on dimensions")

    dims, act = list(model.layer_dims), model.activation
    params = model.parameter_arrays()
    velocity = [np.zeros_like(p) for p in params]
    smoothing = cfg.effective_smoothing
    inputs, labels = data.inputs.data, data.labels
    n = labels.size
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(n)
        running = 0.0
        try:
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                xb, yb = inputs[idx], labels[idx]
                snapshot = MlpModel.from_arrays(dims, act, params)
                if cfg.adversarial:
                    atk_seed = int(np.random.default_rng([cfg.seed, 202, epoch, bi]).integers(2**63))
                    inner_cfg = AttackConfig(
                        epsilon=cfg.inner.epsilon,
                        alpha=cfg.inner.alpha,
                        steps=cfg.inner.steps,
                        restarts=1,
                        seed=atk_seed,
                    )
                    x_train = pgd(snapshot, xb, yb, inner_cfg).x_adv
                else:
                    x_train = xb
                if on_batch is not None:
                    on_batch(epoch, bi, xb, x_train)

                tape = GradTape()
                for w, b in zip(snapshot.weights, snapshot.biases):
                    tape.watch(w)
                    tape.watch(b)
                logits = snapshot.logits(Tensor(x_train), tape=tape)
                total = _soft_ce_sum(tape, logits, _smooth_rows(yb, data.num_classes, smoothing))
                mean = mul(total, Tensor(1.0 / yb.size), tape=tape)
                grads = backward(tape, mean)

                flat_tensors = []
                for w, b in zip(snapshot.weights, snapshot.biases):
                    flat_tensors.extend((w, b))
                for j, t in enumerate(flat_tensors):
                    g = grads[t.uid].data + cfg.weight_decay * params[j]
                    velocity[j] = cfg.momentum * velocity[j] + g
                    params[j] = params[j] - cfg.lr * velocity[j]
                running += mean.item() * yb.size
        except NonFiniteError as err:
            raise TrainingError(f"training diverged at epoch {epoch}: {err}") from err
        epoch_loss = running / n
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch}: non-finite loss")
        history.append(epoch_loss)

    return MlpModel.from_arrays(dims, act, params), history


def accuracy(model, x, y) -> float:
    """Fraction of samples classified correctly (margin <= 0, ties favor y)."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    logits = model.logits(Tensor(x_arr)).data
    return float(np.mean(margin_values(logits, y) <= 0.0))


# --- checkpoint file format -------------------------------------------------
#
# magic "MFCK" | version u16 | activation u8 | layer count u16 |
# layer_dims u32[count] | parameters f64-LE (W0, b0, W1, b1, ...) |
# metadata length u32 | metadata UTF-8 "key=value" lines

_MAGIC = b"MFCK"
_VERSION = 1


def save_checkpoint(model: MlpModel, path, metadata: dict[str, str] | None = None) -> None:
    dims = model.layer_dims
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<HBH", _VERSION, ACTIVATIONS.index(model.activation), len(dims))
    blob += struct.pack(f"<{len(dims)}I", *dims)
    for arr in model.parameter_arrays():
        blob += arr.astype("<f8").tobytes(order="C")
    meta_lines = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items())
    meta_bytes = meta_lines.encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    Path(path).write_bytes(bytes(blob))


def _read_checkpoint(path):
    raw = Path(path).read_bytes()
    view = memoryview(raw)

    def take(count: int, what: str):
        nonlocal view
        if len(view) < count:
            raise CheckpointFormatError(f"truncated checkpoint: missing {what}")
        out, view = view[:count], view[count:]
        return out

    if bytes(take(4, "magic")) != _MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a model checkpoint")
    version, act_tag, n_dims = struct.unpack("<HBH", take(5, "header"))
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if act_tag >= len(ACTIVATIONS):
        raise CheckpointFormatError(f"unknown activation tag {act_tag}")
    if n_dims < 2:
        raise CheckpointFormatError(f"layer count {n_dims} too small")
    dims = list(struct.unpack(f"<{n_dims}I", take(4 * n_dims, "layer dims")))
    if any(d < 1 for d in dims):
        raise CheckpointFormatError(f"non-positive layer dims {dims}")

    n_params = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    param_bytes = take(8 * n_params, "parameters")
    flat = np.frombuffer(param_bytes, dtype="<f8").astype(np.float64)
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta_bytes = bytes(take(meta_len, "metadata"))
    if len(view) != 0:
        raise CheckpointFormatError(f"{len(view)} trailing bytes after metadata")

    params, offset = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        params.append(flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out))
        offset += fan_in * fan_out
        params.append(flat[offset : offset + fan_out].reshape(1, fan_out))
        offset += fan_out

    metadata = {}
    for line in meta_bytes.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    model = MlpModel.from_arrays(dims, ACTIVATIONS[act_tag], params)
    return model, metadata


def load_checkpoint(path) -> MlpModel:
    return _read_checkpoint(path)[0]


def checkpoint_metadata(path) -> dict[str, str]:
    return _read_checkpoint(path)[1]


# --- dataset file format ----------------------------------------------------
#
# header line "D,C,N", then N lines of D comma-separated floats plus the label


def save_dataset(data: Dataset, path) -> None:
    lines = [f"{data.dim},{data.num_classes},{len(data)}"]
    for row, label in zip(data.inputs.data, data.labels):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, split: str = "test") -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty dataset file")
    try:
        dim, num_classes, size = (int(v) for v in text[0].split(","))
    except ValueError:
        raise ValueError(f"{path}: malformed header {text[0]!r}, expected 'D,C,N'") from None
    if len(text) - 1 < size:
        raise ValueError(f"{path}: header promises {size} rows, found {len(text) - 1}")
    inputs = np.empty((size, dim))
    labels = np.empty(size, dtype=np.int64)
    for i, line in enumerate(text[1 : size + 1]):
        cells = line.split(",")
        if len(cells) != dim + 1:
            raise ValueError(f"{path}: row {i} has {len(cells)} fields, expected {dim + 1}")
        inputs[i] = [float(v) for v in cells[:dim]]
        labels[i] = int(cells[dim])
    return Dataset(Tensor(inputs), labels, num_classes, split=split)
