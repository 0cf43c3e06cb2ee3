"""Datasets, optimizers and the default / amplified training loop."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, SingularWeightError
from .netcore import LEAKY_RELU, Network, param_gradients
from .spectral import min_sigma, spectral_penalty

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
_MASK64 = (1 << 64) - 1


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) ints
    classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise FormatError("dataset needs N >= 1 images with one label each")
        if self.images.min() < 0 or self.images.max() > 1:
            raise FormatError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise FormatError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes)


# ---------------------------------------------------------------------------
# IDX files


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    body = blob[4 + 4 * ndim:]
    size = int(np.prod(dims))
    if len(body) != size:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header promises {size}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise FormatError("empty IDX files")
    classes = int(labels.max()) + 1 if classes is None else classes
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), classes)


def write_idx(images_path, labels_path, images_u8, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images_u8.ndim != 3:
        raise FormatError("IDX images are (N, H, W)")
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES, *images_u8.shape) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic ramps


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sample_stream(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(splitmix64((seed ^ k) & _MASK64)))


def synth_dataset(n: int, side: int = 16, seed: int = 0, noise: float = 0.05,
                  contrast: float = 1.0) -> Dataset:
    """Two classes of grayscale ramps: class 0 rises left to right, class 1 top to bottom.

    Sample ``k`` has label ``k % 2`` and draws its noise from its own stream.
    ``contrast`` shrinks the ramp towards mid-gray (1.0 gives the full 0..1 ramp).
    """
    if n < 2 or side < 8:
        raise ParameterError(f"need n >= 2 and side >= 8, got n={n}, side={side}")
    if noise < 0 or not 0 < contrast <= 1:
        raise ParameterError(f"need noise >= 0 and contrast in (0, 1], got {noise}, {contrast}")
    ramp = np.arange(side) / (side - 1)
    if contrast != 1:
        ramp = 0.5 + contrast * (ramp - 0.5)
    horizontal = np.broadcast_to(ramp[None, :], (side, side))
    images = np.empty((n, side, side, 1))
    labels = np.arange(n) % 2
    for k in range(n):
        base = horizontal if labels[k] == 0 else horizontal.T
        images[k, ..., 0] = np.clip(base + noise * sample_stream(seed, k).standard_normal((side, side)), 0, 1)
    return Dataset(images, labels, 2)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "default"
    lam: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("default", "amplified"):
            raise ParameterError(f"unknown training mode {self.mode!r}")
        if self.mode == "default" and self.lam != 0:
            raise ParameterError("default mode trains without the spectral term (lambda must be 0)")
        if self.mode == "amplified" and not self.lam > 0:
            raise ParameterError("amplified mode needs lambda > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if not self.lr >= 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def amplified(cls, lam: float = 1e-2, **kw) -> "TrainConfig":
        return cls(mode="amplified", lam=lam, **kw)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    min_sigma_min: float


def check_amplifiable(net: Network) -> None:
    """Hidden layers must be Leaky ReLU for the amplified objective to make sense."""
    for i, layer in enumerate(net.layers[:-1]):
        if layer.activation.kind != LEAKY_RELU:
            raise ParameterError(f"amplified mode needs Leaky ReLU hidden layers; layer {i + 1} is "
                                 f"{layer.activation.kind}")


def accuracy(net: Network, data: Dataset) -> float:
    return float((net(data.flat()).argmax(axis=1) == data.labels).mean())


def train(net: Network, data: Dataset, cfg: TrainConfig) -> tuple[Network, list[EpochStats]]:
    """Minimise mean cross-entropy plus the spectral penalty on a private copy of ``net``.

    ``loss`` in the history is the mean per-batch total objective of the epoch;
    ``accuracy`` is the training accuracy after the epoch.
    """
    if net.in_dim != int(np.prod(data.image_shape)) or net.out_dim != data.classes:
        raise ParameterError(f"network {net.in_dim}->{net.out_dim} does not fit images "
                             f"{data.image_shape} with {data.classes} classes")
    if cfg.mode == "amplified":
        check_amplifiable(net)
    net = net.copy()
    params = [p for layer in net.layers for p in (layer.W, layer.b)]
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    x, y = data.flat(), data.labels
    cache: dict = {}
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = param_gradients(net, x[idx], y[idx])
            flat_grads = [g for pair in grads for g in pair]
            if cfg.lam > 0:
                try:
                    pen, pgrads = spectral_penalty(net, cfg.lam, cache)
                except SingularWeightError as exc:
                    raise SingularWeightError(f"{exc} at epoch {epoch}", layer=exc.layer, epoch=epoch) from exc
                loss += pen
                for i, g in enumerate(pgrads):
                    flat_grads[2 * i] = flat_grads[2 * i] + g
            losses.append(loss)
            opt.step(params, flat_grads)
        history.append(EpochStats(epoch, float(np.mean(losses)), accuracy(net, data), min_sigma(net)))
    return net, history
