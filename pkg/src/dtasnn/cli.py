"""Command-line entry point: train, eval, gradcheck, ablate, synth-data.

Exit codes: 0 success, 1 gradcheck tolerance breach, 2 configuration or
format error, 3 numeric abort during training. Metrics are emitted as JSON
lines; the ablation command additionally prints an aligned text table.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# the kernels are tuned for one core; BLAS busy-waiting on the many small
# matmuls costs more than it buys (must be set before numpy initializes)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import FormatError, Sample, augment, direct_code, gen_synthetic, load_cifar10_binary, load_idx, save_synthetic
from .gradcheck import run_suite
from .network import CheckpointError, build, load_checkpoint, spec_mismatch
from .training import NumericsError, evaluate, train


def _static_samples(images, labels, time_steps, cap):
    if cap > 0:
        images, labels = images[:cap], labels[:cap]
    return [Sample(input=direct_code(images[i], time_steps), label=int(labels[i]))
            for i in range(len(images))]


def build_datasets(cfg: RunConfig):
    """(train samples, test samples, per-epoch transform or None) for cfg."""
    if cfg.dataset == "synthetic":
        train_set = gen_synthetic(cfg.synth_spec(0), cfg.train_samples)
        test_set = gen_synthetic(cfg.synth_spec(1), cfg.test_samples)
        return train_set, test_set, None

    if cfg.dataset == "cifar10":
        if not cfg.data_dir:
            raise ConfigError("data_dir is required for dataset = cifar10")
        tx, ty, vx, vy = load_cifar10_binary(cfg.data_dir)
    elif cfg.dataset == "idx":
        if not cfg.data_dir:
            raise ConfigError("data_dir is required for dataset = idx")
        tx, ty = load_idx(os.path.join(cfg.data_dir, "train-images-idx3-ubyte"),
                          os.path.join(cfg.data_dir, "train-labels-idx1-ubyte"))
        vx, vy = load_idx(os.path.join(cfg.data_dir, "t10k-images-idx3-ubyte"),
                          os.path.join(cfg.data_dir, "t10k-labels-idx1-ubyte"))
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r} "
                          "(expected synthetic, cifar10, or idx)")

    if tx.shape[1] != cfg.in_channels:
        raise ConfigError(f"in_channels = {cfg.in_channels} but {cfg.dataset} "
                          f"provides {tx.shape[1]} channels")
    if cfg.train_samples > 0:
        tx, ty = tx[:cfg.train_samples], ty[:cfg.train_samples]
    test_set = _static_samples(vx, vy, cfg.time_steps, cfg.test_samples)
    if not cfg.augment:
        return _static_samples(tx, ty, cfg.time_steps, 0), test_set, None

    def epoch_transform(_, rng):
        return [Sample(input=direct_code(
                    augment(tx[i], cfg.augment_pad, cfg.augment_flip, rng),
                    cfg.time_steps), label=int(ty[i]))
                for i in range(len(tx))]

    base = _static_samples(tx, ty, cfg.time_steps, 0)
    return base, test_set, epoch_transform


def cmd_train(cfg: RunConfig) -> int:
    train_set, test_set, transform = build_datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    net = build(cfg.network_spec(), cfg.seed)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.dtasnn")
    tcfg = cfg.train_config(checkpoint_path=ckpt)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        class _Tee:
            # the file gets every record; stdout echoes every log_every epochs
            def write(self, s):
                fh.write(s)
                if s.strip() and json.loads(s)["epoch"] % cfg.log_every == 0:
                    sys.stdout.write(s)

            def flush(self):
                fh.flush()
                sys.stdout.flush()

        train(net, train_set, test_set, tcfg, epoch_transform=transform,
              metrics_out=_Tee())
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str) -> int:
    net = load_checkpoint(checkpoint)
    expected = cfg.network_spec()
    differing = spec_mismatch(net.spec, expected)
    if differing is not None:
        raise ConfigError(f"checkpoint spec differs from configuration in "
                          f"field {differing!r}")
    _, test_set, _ = build_datasets(cfg)
    rec = evaluate(net, test_set, cfg.batch_size)
    print(rec.to_json())
    return 0


def cmd_gradcheck(cfg: RunConfig, break_op: str | None) -> int:
    results = run_suite(break_op=break_op, seed=cfg.seed)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<16} max_rel_err={r.max_error:.3e}  tol={r.tolerance:.0e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


ABLATION_ROWS = [("baseline", False, False), ("txa", True, False),
                 ("tna", False, True), ("dta", True, True)]


def run_ablation(cfg: RunConfig) -> list[dict]:
    """Train every branch combination on the synthetic task, several seeds each."""
    from dataclasses import replace

    rows = []
    for name, en_txa, en_tna in ABLATION_ROWS:
        accs = []
        for s in range(cfg.ablate_seeds):
            run_cfg = replace(cfg, dataset="synthetic", enable_txa=en_txa,
                              enable_tna=en_tna, seed=cfg.seed + 1000 * s)
            train_set, test_set, _ = build_datasets(run_cfg)
            net = build(run_cfg.network_spec(), run_cfg.seed)
            tcfg = run_cfg.train_config()
            train(net, train_set, test_set, tcfg)
            accs.append(evaluate(net, test_set, run_cfg.batch_size).accuracy)
        rows.append({"name": name, "enable_txa": en_txa, "enable_tna": en_tna,
                     "accuracies": accs, "mean": float(np.mean(accs)),
                     "std": float(np.std(accs))})
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<10} {'T-XA':<6} {'T-NA':<6} {'mean acc':<10} {'std':<8}"]
    for r in rows:
        lines.append(f"{r['name']:<10} {str(r['enable_txa']):<6} "
                     f"{str(r['enable_tna']):<6} {r['mean']:<10.4f} {r['std']:<8.4f}")
    return "\n".join(lines)


def ablation_warnings(rows: list[dict]) -> list[str]:
    by_name = {r["name"]: r["mean"] for r in rows}
    warnings = []
    if by_name["dta"] < by_name["baseline"]:
        warnings.append(f"dta mean {by_name['dta']:.4f} fell below baseline "
                        f"{by_name['baseline']:.4f}")
    for single in ("txa", "tna"):
        if by_name["dta"] < by_name[single] - 0.01:
            warnings.append(f"dta mean {by_name['dta']:.4f} more than 1 point below "
                            f"{single} {by_name[single]:.4f}")
    return warnings


def cmd_ablate(cfg: RunConfig) -> int:
    rows = run_ablation(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    print(format_ablation_table(rows))
    for msg in ablation_warnings(rows):
        print(f"warning: {msg}", file=sys.stderr)
    return 0


def cmd_synth_data(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    spec = cfg.synth_spec(0)
    samples = gen_synthetic(spec, cfg.train_samples)
    path = os.path.join(cfg.out_dir, "synthetic.dtasnn")
    save_synthetic(path, spec, samples)
    print(f"wrote {len(samples)} samples "
          f"({spec.time_steps}x{spec.channels}x{spec.height}x{spec.width}) to {path}")
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="path to a key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory")


def _collect_overrides(args, extras) -> dict:
    overrides = {}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--") or i + 1 >= len(extras):
            raise ConfigError(f"unrecognized argument {tok!r} (expected --key value)")
        overrides[tok[2:]] = extras[i + 1]
        i += 2
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.clip is not None:
        overrides["clip"] = str(args.clip)
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.deterministic:
        overrides["deterministic"] = "true"
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dtasnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "gradcheck", "ablate", "synth-data"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        if name == "gradcheck":
            p.add_argument("--break", dest="break_op", default=None,
                           help="fault-injection self-test: flip this op's gradient sign")
    args, extras = parser.parse_known_args(argv)

    try:
        cfg = load_config(args.config, _collect_overrides(args, extras))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.break_op)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "synth-data":
            return cmd_synth_data(cfg)
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, CheckpointError, ValueError) as exc:
        # domain validation (NetworkSpec, TrainConfig, ...) raises ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
