"""Gradient attacks: FGSM, BIM, PGD (l_inf / l2) and the two detector-aware attacks.

Every attack takes a batch ``x`` shaped ``(N, ...)`` with values in [0, 1];
samples are flattened for the network and reshaped on return. Sample ``k``
draws its randomness from ``np.random.default_rng(seed ^ ids[k])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, ParameterError
from .netcore import Network
from .objectives import ce_gradient, composite
from .sanitize import FlatJpeg

L2_GUARD = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    norm: str = "linf"
    eps: float = 8 / 255
    step: float = 2 / 255
    steps: int = 10
    rand_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "bim", "pgd"):
            raise ParameterError(f"unknown attack kind {self.kind!r}")
        if self.norm not in ("linf", "l2"):
            raise ParameterError(f"unknown norm {self.norm!r}")
        if not (np.isfinite(self.eps) and self.eps >= 0):
            raise ParameterError(f"eps must be finite and >= 0, got {self.eps}")
        if not (np.isfinite(self.step) and self.step > 0):
            raise ParameterError(f"step must be finite and > 0, got {self.step}")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")


DEFAULT_LINF = AttackConfig()
DEFAULT_L2 = AttackConfig(norm="l2", eps=1.0, step=0.2)


@dataclass(frozen=True)
class AdaptiveConfig:
    base: AttackConfig = field(default_factory=lambda: AttackConfig(steps=200, step=0.8 / 255))
    T: int = 1
    lam: float = 0.5
    quality_range: tuple[int, int] = (30, 80)
    mode: str = "eot"

    def __post_init__(self):
        lo, hi = self.quality_range
        if not (1 <= lo <= hi <= 100):
            raise ParameterError(f"invalid quality range {self.quality_range}")
        if self.T < 1:
            raise ParameterError("T must be >= 1")
        if self.mode not in ("eot", "classical"):
            raise ParameterError(f"unknown adaptive mode {self.mode!r}")
        if self.lam < 0 or (self.mode == "eot" and self.lam > 1):
            raise ParameterError(f"lambda out of range for {self.mode}: {self.lam}")


@dataclass
class GradCounter:
    """Counts gradient evaluations made along one (batched) trajectory."""

    count: int = 0


def _flat(x) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError(f"attacks take a batch (N, ...), got shape {x.shape}")
    return x.reshape(x.shape[0], -1), x.shape


def _rngs(seed: int, ids, n: int) -> list[np.random.Generator]:
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if len(ids) != n:
        raise DimensionError(f"{len(ids)} sample ids for {n} samples")
    return [np.random.default_rng(int(seed) ^ int(k)) for k in ids]


def _random_start(x0: np.ndarray, cfg: AttackConfig, rngs) -> np.ndarray:
    d = x0.shape[1]
    if cfg.norm == "linf":
        noise = np.stack([r.uniform(-cfg.eps, cfg.eps, d) for r in rngs])
    else:
        rows = []
        for r in rngs:
            v = r.standard_normal(d)
            radius = cfg.eps * r.random() ** (1.0 / d)
            rows.append(v * (radius / np.linalg.norm(v)))
        noise = np.stack(rows)
    return np.clip(x0 + noise, 0.0, 1.0)


def _step(xa: np.ndarray, g: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return xa + cfg.step * np.sign(g)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return xa + cfg.step * g / np.maximum(norm, L2_GUARD)


def project(xa: np.ndarray, x0: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Project onto the eps-ball around x0 intersected with [0, 1]."""
    if norm == "linf":
        xa = np.clip(np.clip(xa, x0 - eps, x0 + eps), 0.0, 1.0)
        # x0 +- eps is rounded, so |xa - x0| can exceed eps by an ulp; step back towards x0
        while True:
            bad = np.abs(xa - x0) > eps
            if not bad.any():
                return xa
            xa[bad] = np.nextafter(xa[bad], x0[bad])
    delta = xa - x0
    dn = np.linalg.norm(delta, axis=1)
    over = dn > eps
    delta[over] *= (eps / dn[over])[:, None]
    xa = np.clip(x0 + delta, 0.0, 1.0)
    # rescaling and re-adding x0 round, so the final norm can land an ulp outside the ball
    while True:
        bad = np.linalg.norm(xa - x0, axis=1) > eps
        if not bad.any():
            return xa
        # an ulp step towards x0 always shrinks the row, unlike rescaling the (possibly tiny) delta
        xa[bad] = np.nextafter(xa[bad], x0[bad])


def _ascend(net, x, cfg: AttackConfig, grad_fn, ids, counter, rand_init: bool):
    x0, shape = _flat(x)
    rngs = _rngs(cfg.seed, ids, x0.shape[0])
    xa = _random_start(x0, cfg, rngs) if rand_init else x0.copy()
    if cfg.eps == 0:
        return x0.reshape(shape).copy()
    for _ in range(cfg.steps):
        g = grad_fn(xa, rngs)
        xa = project(_step(xa, g, cfg), x0, cfg.norm, cfg.eps)
    return xa.reshape(shape)


def _counted_ce(net, y, counter):
    def grad(xa, _rngs):
        if counter is not None:
            counter.count += 1
        return ce_gradient(net, xa, y)

    return grad


def fgsm(net: Network, x, y, eps: float) -> np.ndarray:
    x0, shape = _flat(x)
    g = ce_gradient(net, x0, y)
    return project(x0 + eps * np.sign(g), x0, "linf", eps).reshape(shape)


def pgd(net: Network, x, y, cfg: AttackConfig = DEFAULT_LINF, ids=None,
        counter: GradCounter | None = None) -> np.ndarray:
    return _ascend(net, x, cfg, _counted_ce(net, y, counter), ids, counter, cfg.rand_init)


def bim(net: Network, x, y, cfg: AttackConfig = DEFAULT_LINF, ids=None,
        counter: GradCounter | None = None) -> np.ndarray:
    """Iterative signed/normalised steps clipped to the eps-box each iteration, no random start."""
    return _ascend(net, x, cfg, _counted_ce(net, y, counter), ids, counter, False)


def run_attack(net: Network, x, y, cfg: AttackConfig, ids=None, counter=None) -> np.ndarray:
    if cfg.kind == "fgsm":
        if counter is not None:
            counter.count += 1
        if cfg.norm != "linf":
            raise ParameterError("fgsm is defined for linf only")
        return fgsm(net, x, y, cfg.eps)
    if cfg.kind == "bim":
        return bim(net, x, y, cfg, ids, counter)
    return pgd(net, x, y, cfg, ids, counter)


def eot_adaptive(net: Network, x, y, acfg: AdaptiveConfig, ids=None,
                 counter: GradCounter | None = None) -> np.ndarray:
    """Expectation-over-JPEG attack.

    Per step the clean CE gradient ``f`` is combined with the mean gradient
    of CE through the straight-through codec at T random qualities as
    ``f + lam * f_robust``. With ``lam == 0`` no qualities are drawn, so the
    trajectory equals :func:`pgd` with the same seed.
    """
    cfg = acfg.base
    if cfg.norm != "linf":
        raise ParameterError("the EOT attack is defined for linf")
    x = np.asarray(x, dtype=np.float64)
    image_shape = x.shape[1:]
    if len(image_shape) != 3:
        raise DimensionError("the EOT attack needs image batches (N, H, W, C)")
    lo, hi = acfg.quality_range
    clean = _counted_ce(net, y, counter)

    def grad(xa, rngs):
        f = clean(xa, rngs)
        if acfg.lam == 0:
            return f
        robust = np.zeros_like(f)
        for _ in range(acfg.T):
            q = np.array([r.integers(lo, hi + 1) for r in rngs])
            xs, vjp = FlatJpeg(image_shape, q)(xa)
            robust += vjp(ce_gradient(net, xs, y))
            if counter is not None:
                counter.count += 1
        return f + acfg.lam * (robust / acfg.T)

    return _ascend(net, x, cfg, grad, ids, counter, True)


def classical_adaptive(net: Network, x, y, acfg: AdaptiveConfig, quality: int = 75,
                       first: int = 0, last: int | None = None, ids=None,
                       counter: GradCounter | None = None) -> np.ndarray:
    """Ascend ``CE - lam * d_last/d_first`` with the sanitized copy from the STE codec at a fixed quality."""
    x = np.asarray(x, dtype=np.float64)
    image_shape = x.shape[1:]
    if len(image_shape) != 3:
        raise DimensionError("the classical adaptive attack needs image batches (N, H, W, C)")
    san = FlatJpeg(image_shape, quality)

    def grad(xa, _rngs):
        if counter is not None:
            counter.count += 1
        return composite(net, xa, (y, san), lam=acfg.lam, first=first, last=last)[1]

    cfg = acfg.base
    return _ascend(net, x, cfg, grad, ids, counter, cfg.rand_init)


def predict(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return net(x.reshape(x.shape[0], -1)).argmax(axis=1)


def attack_success(net: Network, x, x_adv) -> np.ndarray:
    """Per-sample flag: the predicted label changed."""
    return predict(net, x) != predict(net, x_adv)


def with_eps(cfg: AttackConfig, eps: float, step_frac: float | None = None) -> AttackConfig:
    step = cfg.step if step_frac is None else eps * step_frac
    return replace(cfg, eps=eps, step=step if step > 0 else cfg.step)
