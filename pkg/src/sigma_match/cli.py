"""Command-line driver: ``sigma-match {run,gradcheck,oracle,eval} --config PATH``."""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels
from .config import format_config, load_config
from .engine import (
    TrainState,
    evaluate_metrics,
    finite_difference_check,
    gradcheck_config,
    load_checkpoint,
    make_eval_batches,
    run_training,
    save_checkpoint,
)
from .errors import ConfigError, NonFiniteLossError, SigmaError
from .matching import BRUTE_FORCE_MAX, hungarian_oracle, sinkhorn_normalize, stochastic_residual

LOSS_COLUMNS = ("step", "loss_total", "loss_node", "loss_mat", "loss_na", "te", "fs", "qc")


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.steps is not None:
        cfg.steps = args.steps
    if args.qc_mode is not None:
        cfg.qc_mode = args.qc_mode
    return cfg.validate()


def _clean(obj):
    """JSON-safe copy: NaN becomes null, dict keys become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def cmd_run(cfg, args):
    out = _prepare_out(cfg.out_dir)
    (out / "config.txt").write_text(format_config(cfg))
    state = TrainState.create(cfg)
    metrics_path = out / "metrics.jsonl"
    clock_path = out / "timing.jsonl"
    t0 = time.perf_counter()
    with open(metrics_path, "w") as mf, open(clock_path, "w") as cf:

        def on_record(rec, seconds):
            mf.write(rec.to_json() + "\n")
            cf.write(json.dumps({"step": rec.step, "seconds": seconds}) + "\n")

        try:
            records, initial = run_training(state, cfg.steps, on_record)
        except NonFiniteLossError as exc:
            diag = {"error": str(exc), "step": state.step, "losses": exc.diagnostics}
            (out / "failure.json").write_text(json.dumps(_clean(diag), indent=2))
            print(f"error: {exc}; diagnostics in {out / 'failure.json'}", file=sys.stderr)
            return 3
    save_checkpoint(state, out / "checkpoint.sgmt")
    with open(out / "loss_curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_COLUMNS)
        for r in records:
            w.writerow([getattr(r, c) if c == "step" else repr(getattr(r, c)) for c in LOSS_COLUMNS])
    final = records[-1] if records else None
    summary = {
        "weights": cfg.weights_label(),
        "lambda1": cfg.lambda1,
        "lambda2": cfg.lambda2,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "backend": _kernels.backend_name(),
        "initial": {k: v for k, v in initial.items()},
    }
    if final is not None:
        summary.update(
            final_matching_accuracy=final.eval_matching_accuracy,
            final_matching_accuracy_true=final.eval_matching_accuracy_true,
            final_disc_accuracy=final.eval_disc_accuracy,
            final_centroid_gap=final.eval_centroid_gap,
            centroid_gap_ratio=final.eval_centroid_gap / initial["centroid_gap"],
        )
    summary["wall_clock_seconds"] = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(_clean(summary), indent=2))
    print(json.dumps(_clean({k: v for k, v in summary.items() if k != "initial"})))
    return 0


def cmd_gradcheck(cfg, args):
    small = gradcheck_config(cfg)
    out = _prepare_out(cfg.out_dir)
    reports = []
    for i in range(cfg.gradcheck_instances):
        small.seed = cfg.seed + i
        state = TrainState.create(small)
        rep = finite_difference_check(
            state,
            state.next_batch(),
            h=cfg.gradcheck_step,
            entries=cfg.gradcheck_entries,
            corrupt_group=cfg.gradcheck_corrupt_group or None,
            rng=np.random.default_rng(small.seed),
        )
        reports.append(rep.to_dict() | {"seed": small.seed})
    passed = all(r["passed"] for r in reports)
    failed = sorted({g for r in reports for g in r["failed_groups"]})
    worst = {}
    for r in reports:
        for g, e in r["group_errors"].items():
            worst[g] = max(worst.get(g, 0.0), e)
    doc = {"passed": passed, "failed_groups": failed, "worst_group_errors": worst, "instances": reports}
    (out / "gradcheck.json").write_text(json.dumps(_clean(doc), indent=2))
    for g, e in sorted(worst.items()):
        print(f"{g:8s} max rel err {e:.3e} {'ok' if e < cfg.gradcheck_tolerance else 'FAIL'}")
    print("gradient reversal sign:", "ok" if all(r["grl_sign_ok"] for r in reports) else "FAIL")
    if not passed:
        print(f"gradcheck failed: {', '.join(failed) or 'gradient reversal sign'}", file=sys.stderr)
    return 0 if passed else 1


def oracle_instances(n_instances, size, temperature, seed):
    """Uniform [0, 1) score matrices scaled by 1/temperature."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0AC1]))
    return [rng.random((size, size)) / temperature for _ in range(n_instances)]


def compare_with_oracle(logits, iterations):
    """Row-argmax of the Sinkhorn output vs the maximum-weight assignment."""
    m = sinkhorn_normalize(logits, iterations).data
    perm, _ = hungarian_oracle(-logits)
    return bool(np.array_equal(m.argmax(axis=1), perm)), stochastic_residual(m)


def cmd_oracle(cfg, args):
    n = cfg.oracle_size
    if n > BRUTE_FORCE_MAX:
        raise ConfigError(f"oracle.size={n} exceeds the exact-oracle limit of {BRUTE_FORCE_MAX}")
    if n < 1:
        raise ConfigError("oracle.size must be >= 1")
    out = _prepare_out(cfg.out_dir)
    k = cfg.sinkhorn_iterations
    scaled = [compare_with_oracle(x, k) for x in oracle_instances(
        cfg.oracle_instances, n, cfg.oracle_temperature, cfg.seed)]
    unit = [compare_with_oracle(x, k)[1] for x in oracle_instances(
        cfg.oracle_instances, n, 1.0, cfg.seed)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1D]))
    identity = []
    for _ in range(cfg.oracle_instances):
        perm = rng.permutation(n)
        x = np.eye(n)[perm] / cfg.oracle_temperature + 0.1 * rng.random((n, n))
        identity.append(compare_with_oracle(x, k)[0])
    doc = {
        "size": n,
        "instances": cfg.oracle_instances,
        "temperature": cfg.oracle_temperature,
        "iterations": k,
        "agreement": float(np.mean([a for a, _ in scaled])),
        "identity_agreement": float(np.mean(identity)),
        "residual_scaled": _quantiles([r for _, r in scaled]),
        "residual_unit_temperature": _quantiles(unit),
    }
    (out / "oracle.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return 0


def _quantiles(xs):
    xs = np.asarray(xs)
    return {"max": float(xs.max()), "median": float(np.median(xs)), "min": float(xs.min())}


def cmd_eval(cfg, args):
    out = _prepare_out(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.sgmt"
    if ckpt.exists():
        state = load_checkpoint(ckpt)
        state.config.out_dir = cfg.out_dir
    else:
        if args.checkpoint:
            raise ConfigError(f"checkpoint {ckpt} not found")
        state = TrainState.create(cfg)
    ev = evaluate_metrics(state, make_eval_batches(state.config))
    doc = _clean(ev | {"step": state.step, "checkpoint": str(ckpt) if ckpt.exists() else None})
    (out / "eval.json").write_text(json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return 0


COMMANDS = {"run": cmd_run, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle, "eval": cmd_eval}


def build_parser():
    p = argparse.ArgumentParser(prog="sigma-match", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="flat dotted-key config file")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--steps", type=int, help="override train.steps")
        s.add_argument("--qc-mode", choices=("squared", "literal"))
        if name == "eval":
            s.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/checkpoint.sgmt)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except SigmaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
