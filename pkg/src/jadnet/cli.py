"""Command line entry point: ``jadnet <command> -c run.cfg``.

Exit codes: 0 success, 2 config or I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attacks as atk
from .config import RunConfig, load_config
from .detect import (ATTACK_STREAM, AttackSpec, DetectorConfig, _fmt, auroc, corruption_study,
                     jad_scores, layer_impacts, ratio_from_impacts, run_experiment, static_attack)
from .errors import ConfigError, FormatError, JadError, NumericError, ParameterError
from .netcore import Activation, Network, init_mlp, load_checkpoint, save_checkpoint
from .spectral import certify_beta
from .training import Dataset, TrainConfig, load_idx, synth_dataset, train

TEST_STREAM = 0x54 << 32
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# ---------------------------------------------------------------------------
# shared plumbing


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets for the config."""
    if cfg["data.source"] == "synth":
        kw = dict(side=cfg["data.side"], noise=cfg["data.noise"], contrast=cfg["data.contrast"])
        return (synth_dataset(cfg["data.n"], seed=cfg["seed"], **kw),
                synth_dataset(cfg["data.test_n"], seed=cfg["seed"] ^ TEST_STREAM, **kw))
    paths = cfg["data.paths"]
    train_set = load_idx(paths[0], paths[1])
    test_set = load_idx(paths[2], paths[3], train_set.classes) if len(paths) == 4 else train_set
    return train_set, test_set


def build_network(cfg: RunConfig, data: Dataset) -> Network:
    dims = [int(np.prod(data.image_shape)), *cfg["model.dims"], data.classes]
    hidden = (Activation.leaky(cfg["model.alpha"]) if cfg["model.activation"] == "leaky_relu"
              else Activation())
    return init_mlp(dims, seed=cfg["seed"], hidden=hidden)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(mode=cfg["train.mode"], lam=cfg.lam, epochs=cfg["train.epochs"],
                       batch_size=cfg["train.batch"], lr=cfg["train.lr"],
                       optimizer=cfg["train.optimizer"], seed=cfg["seed"])


def attack_config(cfg: RunConfig) -> atk.AttackConfig:
    linf = cfg["attack.norm"] == "linf"
    return atk.AttackConfig(kind=cfg["attack.kind"], norm=cfg["attack.norm"],
                            eps=cfg["attack.eps"] if linf else cfg["attack.l2_eps"],
                            step=cfg["attack.step"] if linf else cfg["attack.l2_step"],
                            steps=cfg["attack.steps"], rand_init=cfg["attack.rand_init"],
                            seed=cfg["seed"] ^ ATTACK_STREAM)


def detector_config(cfg: RunConfig) -> DetectorConfig:
    return DetectorConfig(quality=cfg["detect.q"], quality_range=(cfg["detect.q_lo"], cfg["detect.q_hi"]),
                          randomize=cfg["detect.randomize"], softmax_head=cfg["detect.softmax_head"],
                          seed=cfg["seed"])


def load_model(cfg: RunConfig) -> Network:
    path = cfg.checkpoint
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found (run `jadnet train` first)")
    return load_checkpoint(path)


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    train_set, _ = load_data(cfg)
    net = build_network(cfg, train_set)
    net, history = train(net, train_set, train_config(cfg))
    out = _out(cfg)
    save_checkpoint(net, cfg.checkpoint)
    fh, w = _writer(out / "history.csv")
    with fh:
        w.writerow(["epoch", "loss", "accuracy", "min_sigma_min"])
        for h in history:
            w.writerow([h.epoch, repr(h.loss), repr(h.accuracy), repr(h.min_sigma_min)])
    print(f"trained {len(history)} epochs, accuracy {history[-1].accuracy:.4f}, "
          f"checkpoint {cfg.checkpoint}")
    return EXIT_OK


def cmd_certify(checkpoint: Path, out_dir: Path) -> int:
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint {checkpoint} not found")
    net = load_checkpoint(checkpoint)
    if net.n < 2:
        raise FormatError("the certificate compares the first and last layer; the network needs n >= 2")
    rep = certify_beta(net)
    out_dir.mkdir(parents=True, exist_ok=True)
    fh, w = _writer(out_dir / "spectral.csv")
    with fh:
        w.writerow(["layer", "sigma_min", "sigma_max", "L_f", "cum_beta"])
        for row in rep.rows():
            w.writerow([row[0], *map(repr, map(float, row[1:]))])
    for note in rep.notes:
        print(f"note: {note}")
    print(f"beta={rep.beta!r} verdict={rep.verdict}")
    return EXIT_OK


def cmd_attack(cfg: RunConfig) -> int:
    net = load_model(cfg)
    _, test = load_data(cfg)
    acfg = attack_config(cfg)
    x_adv = atk.run_attack(net, test.images, test.labels, acfg)
    ok = atk.attack_success(net, test.images, x_adv)
    out = _out(cfg)
    np.ascontiguousarray(x_adv, dtype="<f8").tofile(out / "adv.f64")
    delta = (x_adv - test.images).reshape(len(test), -1)
    steps = 1 if acfg.kind == "fgsm" else acfg.steps
    fh, w = _writer(out / "attacks.csv")
    with fh:
        w.writerow(["sample", "success", "linf", "l2", "steps_used"])
        for k in range(len(test)):
            w.writerow([k, int(ok[k]), repr(float(np.abs(delta[k]).max())),
                        repr(float(np.linalg.norm(delta[k]))), steps])
    print(f"{acfg.kind}/{acfg.norm} eps={acfg.eps:.6g}: success rate {ok.mean():.4f} "
          f"(images shape {x_adv.shape} in adv.f64)")
    return EXIT_OK


def cmd_amp(cfg: RunConfig) -> int:
    net = load_model(cfg)
    _, test = load_data(cfg)
    x, y = test.images, test.labels
    x_adv = atk.run_attack(net, x, y, attack_config(cfg))
    ok = atk.attack_success(net, x, x_adv)
    d = layer_impacts(net, x.reshape(len(x), -1), x_adv.reshape(len(x), -1))
    ratio, degenerate = ratio_from_impacts(d)
    fh, w = _writer(_out(cfg) / "amp.csv")
    with fh:
        w.writerow(["sample", "success", "d_1", "d_n", "ratio", "degenerate"])
        for k in range(len(x)):
            w.writerow([k, int(ok[k]), repr(float(d[k, 0])), repr(float(d[k, -1])),
                        repr(float(ratio[k])), int(degenerate[k])])
    beta = certify_beta(net).beta
    succ = ratio[ok]
    frac = f"{(succ > 1).mean():.4f}" if succ.size else "NA"
    print(f"certified beta {beta:.6g}; successful attacks {ok.sum()}/{len(x)}; "
          f"fraction with d_n/d_1 > 1: {frac}")
    return EXIT_OK


def eval_attacks(cfg: RunConfig) -> list[AttackSpec]:
    seed = cfg["seed"] ^ ATTACK_STREAM
    linf = dict(eps=cfg["attack.eps"], step=cfg["attack.step"], steps=cfg["attack.steps"], seed=seed)
    return [
        static_attack("fgsm", atk.AttackConfig(kind="fgsm", **linf)),
        static_attack("bim", atk.AttackConfig(kind="bim", rand_init=False, **linf)),
        static_attack("pgd", atk.AttackConfig(kind="pgd", **linf)),
        static_attack("pgd_l2", atk.AttackConfig(kind="pgd", norm="l2", eps=cfg["attack.l2_eps"],
                                                 step=cfg["attack.l2_step"], steps=cfg["attack.steps"],
                                                 seed=seed)),
    ]


def cmd_eval(cfg: RunConfig) -> int:
    net = load_model(cfg)
    _, test = load_data(cfg)
    reports = run_experiment(net, test.images, test.labels, eval_attacks(cfg), detector_config(cfg),
                             out_dir=_out(cfg), target_fpr=cfg["detect.target_fpr"])
    for r in reports:
        print(f"{r.attack:8s} asr={r.asr:.4f} auroc={_fmt(r.auroc)} baseline={_fmt(r.baseline_auroc)}")
    return EXIT_OK


ADAPTIVE_COLUMNS = ("mode", "eps", "lambda", "T", "n_adv", "asr", "auroc", "grad_evals")


def adaptive_cell(net: Network, x, y, dcfg: DetectorConfig, mode: str, eps: float, lam: float, T: int,
                  steps: int, q_range: tuple[int, int], seed: int):
    """One grid cell: craft, keep successes, score. Returns (n_adv, asr, auroc or None, grad_evals)."""
    base = atk.AttackConfig(eps=eps, step=eps / 10 if eps > 0 else 1.0, steps=steps, seed=seed)
    acfg = atk.AdaptiveConfig(base=base, T=T, lam=lam, quality_range=q_range, mode=mode)
    counter = atk.GradCounter()
    if mode == "eot":
        x_adv = atk.eot_adaptive(net, x, y, acfg, counter=counter)
    else:
        first, last = dcfg.layers_for(net)
        x_adv = atk.classical_adaptive(net, x, y, acfg, quality=dcfg.quality, first=first - 1,
                                       last=net.n if dcfg.softmax_head else last - 1, counter=counter)
    ok = atk.attack_success(net, x, x_adv)
    if not ok.any():
        return 0, 0.0, None, counter.count
    ids = np.flatnonzero(ok)
    clean, _ = jad_scores(net, x[ok], dcfg, ids)
    adv, _ = jad_scores(net, x_adv[ok], dcfg, ids)
    return int(ok.sum()), float(ok.mean()), auroc(clean, adv), counter.count


def cmd_adaptive(cfg: RunConfig) -> int:
    net = load_model(cfg)
    _, test = load_data(cfg)
    dcfg = detector_config(cfg)
    q_range = (cfg["adaptive.q_lo"], cfg["adaptive.q_hi"])
    mode = cfg["adaptive.mode"]
    fh, w = _writer(_out(cfg) / "adaptive_results.csv")
    with fh:
        w.writerow(ADAPTIVE_COLUMNS)
        for eps in cfg["adaptive.eps"]:
            for lam in cfg["adaptive.lambda"]:
                for T in cfg["adaptive.T"]:
                    n_adv, asr, au, evals = adaptive_cell(net, test.images, test.labels, dcfg, mode, eps, lam,
                                                          T, cfg["adaptive.steps"], q_range,
                                                          cfg["seed"] ^ ATTACK_STREAM)
                    w.writerow([mode, repr(eps), repr(lam), T, n_adv, repr(asr), _fmt(au), evals])
                    print(f"{mode} eps={eps:.5g} lambda={lam:g} T={T}: asr={asr:.4f} auroc={_fmt(au)} "
                          f"grad_evals={evals}")
    return EXIT_OK


def cmd_corrupt_study(cfg: RunConfig) -> int:
    net = load_model(cfg)
    _, test = load_data(cfg)
    rows = corruption_study(net, test.images, test.labels, attack_config(cfg), seed=cfg["seed"])
    fh, w = _writer(_out(cfg) / "corruption.csv")
    with fh:
        w.writerow(["kind", "magnitude", "n", "amp_success_rate", "mean_ratio"])
        for r in rows:
            w.writerow([r.kind, repr(r.magnitude), r.n, repr(r.amp_success_rate), repr(r.mean_ratio)])
            print(f"{r.kind:14s} n={r.n:4d} amp_success={r.amp_success_rate:.4f} mean_ratio={r.mean_ratio:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "amp": cmd_amp,
    "eval": cmd_eval,
    "adaptive": cmd_adaptive,
    "corrupt-study": cmd_corrupt_study,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jadnet", description="Noise-amplification toolkit and JPEG detector.")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", required=True, help="key=value run config")
    sp = sub.add_parser("certify")
    sp.add_argument("checkpoint", nargs="?", help="checkpoint file (default: from --config)")
    sp.add_argument("-c", "--config")
    sp.add_argument("-o", "--out", help="directory for spectral.csv (default: out.dir or .)")
    return p


def _run(args) -> int:
    if args.command == "certify":
        cfg = load_config(args.config) if args.config else None
        if args.checkpoint is None and cfg is None:
            raise ConfigError("certify needs a checkpoint path or --config")
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint
        out = Path(args.out) if args.out else (cfg.out_dir if cfg else Path("."))
        return cmd_certify(ckpt, out)
    return COMMANDS[args.command](load_config(args.config))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return _run(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParameterError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except JadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
