"""Flat ``key=value`` run configuration.

One pair per line, ``#`` starts a comment. Every key is known in advance and
its value is parsed and range-checked at load time, so a bad config fails
before any compute starts.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _number(text: str) -> float:
    # accepts "0.03", "8/255", "1e-2"
    try:
        if "/" in text:
            return float(Fraction(text.replace(" ", "")))
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


def _int(text: str) -> int:
    return int(text, 0)


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item: Callable) -> Callable:
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return [item(p) for p in parts]

    return parse


def _choice(*options: str) -> Callable:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _all(pred) -> Callable:
    return lambda vs: all(pred(v) for v in vs)


def _quality(v) -> bool:
    return 1 <= v <= 100


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


KEYS: dict[str, Key] = {
    "data.source": Key(_choice("synth", "idx"), "synth"),
    "data.paths": Key(_list(str), None, lambda v: len(v) in (2, 4), "images,labels[,test_images,test_labels]"),
    "data.n": Key(_int, 512, lambda v: v >= 2, ">= 2"),
    "data.test_n": Key(_int, 256, lambda v: v >= 2, ">= 2"),
    "data.side": Key(_int, 16, lambda v: v >= 8, ">= 8"),
    "data.noise": Key(_number, 0.05, _nonneg, ">= 0"),
    "data.contrast": Key(_number, 1.0, lambda v: 0 < v <= 1, "in (0, 1]"),
    "model.dims": Key(_list(_int), [128, 64], _all(_positive), "positive hidden widths"),
    "model.alpha": Key(_number, 0.01, _positive, "> 0"),
    "model.activation": Key(_choice("leaky_relu", "identity"), "leaky_relu"),
    "model.checkpoint": Key(str, None),
    "train.mode": Key(_choice("default", "amplified"), "default"),
    "train.lambda": Key(_number, None, _nonneg, ">= 0"),
    "train.lr": Key(_number, 1e-2, _nonneg, ">= 0"),
    "train.epochs": Key(_int, 20, _positive, "> 0"),
    "train.batch": Key(_int, 32, _positive, "> 0"),
    "train.optimizer": Key(_choice("adam", "sgd"), "adam"),
    "attack.kind": Key(_choice("fgsm", "bim", "pgd"), "pgd"),
    "attack.norm": Key(_choice("linf", "l2"), "linf"),
    "attack.eps": Key(_number, 8 / 255, _nonneg, ">= 0"),
    "attack.step": Key(_number, 2 / 255, _positive, "> 0"),
    "attack.steps": Key(_int, 10, _positive, "> 0"),
    "attack.rand_init": Key(_bool, True),
    "attack.l2_eps": Key(_number, 1.0, _nonneg, ">= 0"),
    "attack.l2_step": Key(_number, 0.2, _positive, "> 0"),
    "adaptive.mode": Key(_choice("eot", "classical"), "classical"),
    "adaptive.eps": Key(_list(_number), [8 / 255], _all(_nonneg), "eps values >= 0"),
    "adaptive.lambda": Key(_list(_number), [0.0, 0.25, 0.5, 0.75, 1.0], _all(_nonneg), "lambda values >= 0"),
    "adaptive.T": Key(_list(_int), [1], _all(_positive), "T values > 0"),
    "adaptive.steps": Key(_int, 200, _positive, "> 0"),
    "adaptive.q_lo": Key(_int, 30, _quality, "in [1, 100]"),
    "adaptive.q_hi": Key(_int, 80, _quality, "in [1, 100]"),
    "detect.q": Key(_int, 75, _quality, "in [1, 100]"),
    "detect.q_lo": Key(_int, 30, _quality, "in [1, 100]"),
    "detect.q_hi": Key(_int, 80, _quality, "in [1, 100]"),
    "detect.randomize": Key(_bool, False),
    "detect.target_fpr": Key(_number, 0.05, lambda v: 0 < v < 1, "in (0, 1)"),
    "detect.softmax_head": Key(_bool, False),
    "seed": Key(_int, 0, lambda v: 0 <= v < 2**64, "a u64"),
    "out.dir": Key(str, "out"),
}


class RunConfig:
    """Validated view of a config file; values are read as ``cfg["train.lr"]``."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
            self._values[k] = v
        self._cross_check()

    def __getitem__(self, key: str):
        return self._values[key]

    def items(self):
        return self._values.items()

    @property
    def lam(self) -> float:
        v = self["train.lambda"]
        if v is None:
            return 1e-2 if self["train.mode"] == "amplified" else 0.0
        return v

    @property
    def out_dir(self) -> Path:
        return Path(self["out.dir"])

    @property
    def checkpoint(self) -> Path:
        c = self["model.checkpoint"]
        return Path(c) if c else self.out_dir / "model.jadn"

    def _cross_check(self) -> None:
        v = self._values
        mode = v["train.mode"]
        if mode == "default" and v["train.lambda"] not in (None, 0.0):
            raise ConfigError("train.mode=default trains without the spectral term; drop train.lambda")
        if mode == "amplified":
            if v["train.lambda"] is not None and v["train.lambda"] <= 0:
                raise ConfigError("train.mode=amplified needs train.lambda > 0")
            if v["model.activation"] != "leaky_relu":
                raise ConfigError("train.mode=amplified needs leaky_relu activations (L_f > 0)")
        if v["adaptive.q_lo"] > v["adaptive.q_hi"]:
            raise ConfigError("adaptive.q_lo must not exceed adaptive.q_hi")
        if v["detect.q_lo"] > v["detect.q_hi"]:
            raise ConfigError("detect.q_lo must not exceed detect.q_hi")
        if v["adaptive.mode"] == "eot" and any(l > 1 for l in v["adaptive.lambda"]):
            raise ConfigError("adaptive.lambda must lie in [0, 1] for the eot mode")
        if v["data.source"] == "idx" and not v["data.paths"]:
            raise ConfigError("data.source=idx needs data.paths")
        if v["attack.kind"] == "fgsm" and v["attack.norm"] != "linf":
            raise ConfigError("fgsm is defined for attack.norm=linf only")


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        spec = KEYS.get(key)
        if spec is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            parsed = spec.parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from exc
        if spec.check is not None and not spec.check(parsed):
            raise ConfigError(f"line {lineno}: {key}={value} must be {spec.rule}")
        values[key] = parsed
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
