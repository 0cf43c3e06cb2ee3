"""Layer impacts, amplification ratios, the JPEG amplification detector and its evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackConfig, attack_success, predict, run_attack
from .errors import DimensionError, ParameterError
from .netcore import Network, record, softmax
from .sanitize import CorruptionSpec, corrupt, jpeg_roundtrip
from .spectral import certify_beta

ATTACK_STREAM = 0x41 << 32
DETECT_STREAM = 0x44 << 32

RESULT_COLUMNS = ("attack", "norm", "eps", "n_clean", "n_adv", "asr", "auroc", "amp_success_rate",
                  "mean_amp_clean", "mean_amp_adv", "fpr_at_tau", "tpr_at_tau")
SCORE_COLUMNS = ("sample_id", "label", "attack", "jad_score", "degenerate")


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise DimensionError(f"expected a batch (N, ...), got shape {x.shape}")
    return x.reshape(x.shape[0], -1)


def _outputs(net: Network, x: np.ndarray, softmax_head: bool) -> list[np.ndarray]:
    z = list(record(net, x).z)
    if softmax_head:
        z[-1] = softmax(z[-1])
    return z


def layer_impacts(net: Network, x, x_prime, softmax_head: bool = False) -> np.ndarray:
    """``d_i`` for every layer, shape ``(N, n)`` (1-D input gives shape ``(n,)``)."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_prime.shape}")
    single = x.ndim == 1
    xa, xb = (x[None], x_prime[None]) if single else (_batch(x), _batch(x_prime))
    za, zb = _outputs(net, xa, softmax_head), _outputs(net, xb, softmax_head)
    d = np.stack([np.linalg.norm(a - b, axis=1) for a, b in zip(za, zb)], axis=1)
    return d[0] if single else d


def ratio_from_impacts(d: np.ndarray, first: int = 1, last: int | None = None):
    """``d_last / d_first`` per row with the ``d_first == 0 -> 0`` convention; returns (ratio, degenerate)."""
    d = np.atleast_2d(d)
    last = d.shape[1] if last is None else last
    d1, dn = d[:, first - 1], d[:, last - 1]
    degenerate = d1 == 0
    ratio = np.divide(dn, d1, out=np.zeros_like(dn), where=~degenerate)
    return ratio, degenerate


@dataclass
class AmplificationReport:
    d: list[float]
    ratio: float
    beta_certified: float
    degenerate: bool


def net_amplification(net: Network, x, y, attack) -> list[AmplificationReport]:
    """Craft adversarials for a batch and measure ``d_n / d_1`` against the clean inputs.

    ``attack`` is an :class:`AttackConfig` or any callable ``(net, x, y) -> x_adv``.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(attack, AttackConfig):
        x_adv = run_attack(net, x, y, attack)
    else:
        x_adv = attack(net, x, y)
    d = layer_impacts(net, _batch(x), _batch(x_adv))
    ratio, deg = ratio_from_impacts(d)
    beta = certify_beta(net).beta
    return [AmplificationReport(list(map(float, row)), float(r), beta, bool(g))
            for row, r, g in zip(d, ratio, deg)]


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True)
class DetectorConfig:
    quality: int = 75
    quality_range: tuple[int, int] = (30, 80)
    randomize: bool = False
    first: int = 1  # 1-based layer index
    last: int | None = None  # 1-based; None means the last layer
    softmax_head: bool = False
    tau: float | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.quality_range
        if not (1 <= lo <= hi <= 100):
            raise ParameterError(f"invalid quality range {self.quality_range}")
        if not 1 <= self.quality <= 100:
            raise ParameterError(f"quality must be in [1, 100], got {self.quality}")
        if self.first < 1 or (self.last is not None and self.last <= self.first):
            raise ParameterError(f"need 1 <= first < last, got {self.first}, {self.last}")

    def layers_for(self, net: Network) -> tuple[int, int]:
        last = net.n if self.last is None else self.last
        if last > net.n or self.first >= last:
            raise ParameterError(f"layer indices ({self.first}, {last}) invalid for a {net.n}-layer network")
        if self.softmax_head and last != net.n:
            raise ParameterError("the softmax head applies to the last layer only")
        return self.first, last

    def qualities(self, ids) -> np.ndarray:
        """Per-sample qualities: fixed, or drawn from the sample's detect stream."""
        ids = np.asarray(ids)
        if not self.randomize:
            return np.full(len(ids), self.quality)
        lo, hi = self.quality_range
        return np.array([np.random.default_rng(self.seed ^ DETECT_STREAM ^ int(k)).integers(lo, hi + 1)
                         for k in ids])


def jad_scores(net: Network, x, dcfg: DetectorConfig = DetectorConfig(), ids=None):
    """Scores ``d_last / d_first`` between each image and its JPEG copy; returns (scores, degenerate).

    ``x`` is an image batch ``(N, H, W, C)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected an image batch (N, H, W, C), got shape {x.shape}")
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    first, last = dcfg.layers_for(net)
    x_san = jpeg_roundtrip(x, dcfg.qualities(ids))
    d = layer_impacts(net, _batch(x), _batch(x_san), dcfg.softmax_head)
    return ratio_from_impacts(d, first, last)


def jad_score(net: Network, x, dcfg: DetectorConfig = DetectorConfig(), sample_id: int = 0) -> float:
    """Score of a single image ``(H, W, C)``."""
    s, _ = jad_scores(net, np.asarray(x)[None], dcfg, [sample_id])
    return float(s[0])


def calibrate_threshold(clean_scores, target_fpr: float) -> float:
    """Smallest score with at least a ``1 - target_fpr`` share of scores at or below it."""
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))
    if s.size == 0:
        raise ParameterError("cannot calibrate on an empty score set")
    if not 0 < target_fpr < 1:
        raise ParameterError(f"target_fpr must be in (0, 1), got {target_fpr}")
    # the tolerance keeps (1 - 0.05) * 100 = 95.00000000000001 from rounding up to 96
    k = max(1, math.ceil((1 - target_fpr) * s.size - 1e-9))
    return float(s[k - 1])


def classify(scores, tau: float) -> np.ndarray:
    return np.asarray(scores) > tau


def auroc(neg_scores, pos_scores) -> float:
    """Mann-Whitney AUROC from rank sums with average ranks for ties."""
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ParameterError("AUROC needs both classes")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def auroc_bruteforce(neg_scores, pos_scores) -> float:
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ParameterError("AUROC needs both classes")
    p, n = pos[:, None], neg[None, :]
    return float(((p > n).sum() + 0.5 * (p == n).sum()) / (pos.size * neg.size))


def prediction_change_detector(net: Network, x, q) -> np.ndarray:
    """Flag images whose predicted label changes after a JPEG round trip."""
    x = np.asarray(x, dtype=np.float64)
    return predict(net, x) != predict(net, jpeg_roundtrip(x, q))


# ---------------------------------------------------------------------------
# evaluation harness


@dataclass
class EvalReport:
    attack: str
    norm: str
    eps: float
    n_clean: int
    n_adv: int
    asr: float
    auroc: float | None
    amp_success_rate: float | None
    mean_amp_clean: float | None
    mean_amp_adv: float | None
    fpr_at_tau: float | None
    tpr_at_tau: float | None
    baseline_auroc: float | None = None
    scores: list[tuple] = field(default_factory=list, repr=False)

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in RESULT_COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass(frozen=True)
class AttackSpec:
    """A named attack for the harness: ``run(net, x, y, ids) -> x_adv``."""

    name: str
    norm: str
    eps: float
    run: Callable


def static_attack(name: str, cfg: AttackConfig) -> AttackSpec:
    return AttackSpec(name, cfg.norm, cfg.eps,
                      lambda net, x, y, ids: run_attack(net, x, y, cfg, ids=ids))


def run_experiment(net: Network, x, y, attacks: Sequence[AttackSpec], dcfg: DetectorConfig,
                   out_dir=None, target_fpr: float = 0.05, ids=None) -> list[EvalReport]:
    """Attack every sample, keep the successful adversarials and score them against their clean originals.

    The threshold is calibrated once on the scores of all clean samples (unless
    ``dcfg.tau`` is set). With ``out_dir`` the rows go to ``results.csv``,
    per-sample scores to ``scores.csv`` and the prediction-change baseline to
    ``baseline.csv``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    clean_scores, clean_deg = jad_scores(net, x, dcfg, ids)
    tau = dcfg.tau if dcfg.tau is not None else calibrate_threshold(clean_scores, target_fpr)
    clean_flag = prediction_change_detector(net, x, dcfg.quality).astype(float)

    reports = []
    for spec in attacks:
        x_adv = np.asarray(spec.run(net, x, y, ids))
        ok = attack_success(net, x, x_adv)
        asr = float(ok.mean())
        if not ok.any():
            reports.append(EvalReport(spec.name, spec.norm, spec.eps, 0, 0, asr,
                                      None, None, None, None, None, None))
            continue
        keep = np.flatnonzero(ok)
        adv_scores, adv_deg = jad_scores(net, x_adv[keep], dcfg, ids[keep])
        neg = clean_scores[keep]
        amp, _ = ratio_from_impacts(layer_impacts(net, _batch(x[keep]), _batch(x_adv[keep])))
        adv_flag = prediction_change_detector(net, x_adv[keep], dcfg.quality).astype(float)
        rep = EvalReport(
            spec.name, spec.norm, spec.eps, len(keep), len(keep), asr,
            auroc(neg, adv_scores),
            float((amp > 1).mean()),
            float(neg.mean()), float(adv_scores.mean()),
            float(classify(neg, tau).mean()), float(classify(adv_scores, tau).mean()),
            auroc(clean_flag[keep], adv_flag),
        )
        for j, k in enumerate(keep):
            rep.scores.append((int(ids[k]), "clean", spec.name, float(neg[j]), bool(clean_deg[k])))
            rep.scores.append((int(ids[k]), "adv", spec.name, float(adv_scores[j]), bool(adv_deg[j])))
        reports.append(rep)

    if out_dir is not None:
        write_results(reports, out_dir)
    return reports


def write_results(reports: Sequence[EvalReport], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in reports:
            w.writerow(r.row())
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in reports:
            for sid, label, name, score, deg in r.scores:
                w.writerow([sid, label, name, repr(score), int(deg)])
    with open(out / "baseline.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attack", "auroc_jad", "auroc_prediction_change"])
        for r in reports:
            w.writerow([r.attack, _fmt(r.auroc), _fmt(r.baseline_auroc)])


# ---------------------------------------------------------------------------
# corruption control


@dataclass
class CorruptionRow:
    kind: str
    magnitude: float
    n: int
    amp_success_rate: float
    mean_ratio: float


def amplification_ratios(net: Network, x, x_prime) -> np.ndarray:
    ratio, _ = ratio_from_impacts(layer_impacts(net, _batch(x), _batch(x_prime)))
    return ratio


def corruption_study(net: Network, x, y, attack: AttackConfig, seed: int = 0,
                     ids=None, kinds: Sequence[str] | None = None) -> list[CorruptionRow]:
    """Amplification of PGD perturbations versus matched-magnitude corruptions.

    Uniform noise uses the attack's eps; Gaussian noise is matched per sample
    to the l2 norm of that sample's adversarial perturbation. PGD statistics
    cover successful attacks only.
    """
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    x_adv = run_attack(net, x, y, attack, ids=ids)
    ok = attack_success(net, x, x_adv)
    rows = []
    r = amplification_ratios(net, x[ok], x_adv[ok]) if ok.any() else np.zeros(0)
    rows.append(CorruptionRow("pgd", attack.eps, int(ok.sum()),
                              float((r > 1).mean()) if r.size else float("nan"),
                              float(r.mean()) if r.size else float("nan")))
    l2 = np.linalg.norm(_batch(x_adv) - _batch(x), axis=1)
    eps = attack.eps
    magnitudes = {
        "uniform_linf": lambda k: eps,
        "gaussian_l2": lambda k: float(l2[k]),
        "laplacian": lambda k: eps / math.sqrt(6.0),  # same std as U(-eps, eps)
        "salt_pepper": lambda k: 0.01,
        "gaussian_blur": lambda k: 0.5,
        "jpeg": lambda k: 75,
    }
    for kind in kinds or magnitudes:
        noisy = np.stack([corrupt(x[k], CorruptionSpec(kind, magnitudes[kind](k), seed ^ int(ids[k])))
                          for k in range(len(x))])
        r = amplification_ratios(net, x, noisy)
        # gaussian noise is matched per sample, so its row reports the mean l2 radius
        shown = float(l2.mean()) if kind == "gaussian_l2" else magnitudes[kind](0)
        rows.append(CorruptionRow(kind, float(shown), len(x), float((r > 1).mean()), float(r.mean())))
    return rows
