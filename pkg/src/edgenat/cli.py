"""Command-line entry points: train, infer, eval, gradcheck, synth."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import data, gradcheck
from .config import ConfigurationError, EvalConfig, load_run_config
from .eval import multiscale_infer, ods_ois
from .loss import binarize
from .model import EdgeNAT
from .train import AdamWState, train

logger = logging.getLogger("edgenat")


def thread_count() -> int:
    """Worker cap from ``EDGENAT_THREADS``; 0 or unset means one per CPU."""
    raw = os.environ.get("EDGENAT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"EDGENAT_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigurationError("EDGENAT_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _thread_limit():
    if not os.environ.get("EDGENAT_THREADS"):
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(thread_count())


def _scaled_warmup(train_cfg, steps: int) -> int:
    if train_cfg.total_steps == 0:
        return 0
    return min(steps, round(steps * train_cfg.warmup_steps / train_cfg.total_steps))


def cmd_train(args) -> int:
    overrides = {}
    if args.variant:
        overrides["model.variant"] = args.variant
    if args.out:
        overrides["paths.out_dir"] = args.out
    run = load_run_config(args.config, overrides)
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigurationError("--steps must be >= 0")
        # keep the warmup fraction of the schedule when the length changes
        warm = _scaled_warmup(run.train, args.steps)
        run = replace(run, train=replace(run.train, total_steps=args.steps, warmup_steps=warm))
    if run.data_dir:
        samples = data.load_dataset(run.data_dir)
        if not samples:
            raise ValueError(f"no training samples in {run.data_dir}")
    else:
        samples = data.synth_dataset(run.synth_n, run.synth_size, run.synth_seed)
    out = Path(run.out_dir)
    ckpt = out / "checkpoint.enat"
    state = None
    if args.resume and ckpt.exists():
        model, extra, meta = EdgeNAT.load(ckpt)
        if model.cfg != run.model:
            raise ConfigurationError(f"{ckpt} was written for a different model config")
        state = AdamWState.from_tensors(extra, int(meta.get("step", 0)))
        logger.info("resuming from step %d", state.step)
    else:
        model = EdgeNAT.init(run.model, seed=run.train.seed)
    logger.info("model %s: %d parameters, %d samples", run.model.variant, model.num_parameters(), len(samples))
    t0 = time.perf_counter()
    result = train(model, samples, run.train, out, state=state)
    elapsed = time.perf_counter() - t0
    with open(out / "history.csv", "w") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in result.history:
            fh.write(f"{step},{lr:.8e},{loss:.6f}\n")
    print(f"checkpoint = {result.checkpoint}")
    print(f"steps = {result.state.step}")
    print(f"seconds = {elapsed:.1f}")
    if result.history:
        print(f"final_loss = {result.history[-1][2]:.6f}")
    if args.eval:
        preds = [s.crop(model.predict(s.image)[None]) for s in samples]
        gts = [binarize(s.crop(s.gt_prob), run.train.eta) for s in samples]
        report = ods_ois(preds, gts, run.eval, workers=thread_count())
        (out / "pr_table.csv").write_text(report.pr_table())
        sys.stdout.write(report.summary())
    return 0


def cmd_infer(args) -> int:
    model, _, _ = EdgeNAT.load(args.ckpt)
    image = data.read_image(args.image)
    if args.multiscale:
        edge = multiscale_infer(model, image)
    else:
        edge = model.predict(image)
    path = data.write_pgm(args.out, edge)
    print(f"wrote {path}")
    return 0


def _pgm_index(directory: Path) -> dict:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.pgm"))}


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if (gt_dir / "gt").is_dir():
        gt_dir = gt_dir / "gt"
    preds, gts = _pgm_index(pred_dir), _pgm_index(gt_dir)
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ValueError(f"no prediction for {missing}")
    if not gts:
        raise ValueError(f"no ground-truth maps in {gt_dir}")
    ids = sorted(gts)
    cfg = EvalConfig(max_dist=args.tolerance, matcher=args.matcher)
    report = ods_ois(
        [data.read_gray(preds[i]) for i in ids],
        [binarize(data.read_gray(gts[i]), args.eta) for i in ids],
        cfg,
        workers=thread_count(),
    )
    table = Path(args.out) if args.out else pred_dir / "pr_table.csv"
    table.write_text(report.pr_table())
    sys.stdout.write(report.summary())
    print(f"pr_table = {table}")
    return 0


def cmd_gradcheck(args) -> int:
    suites = gradcheck.SUITES if args.module == "all" else (args.module,)
    failed = 0
    t0 = time.perf_counter()
    for suite in suites:
        results = gradcheck.run_suite(suite, args.seeds)
        worst = max(results, key=lambda r: r.max_rel_error)
        bad = [r for r in results if not r.ok]
        failed += len(bad)
        status = "ok" if not bad else f"FAILED on seeds {[r.seed for r in bad]}"
        print(
            f"{suite}: {len(results)} seeds, {sum(r.checked for r in results)} coordinates, "
            f"max rel error {worst.max_rel_error:.2e} ({worst.worst}), {status}"
        )
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    samples = data.synth_dataset(args.n, args.size, args.seed)
    root = data.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgenat", description="Edge detection with a dilated neighborhood attention encoder.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="INI-style run config")
    t.add_argument("--variant", choices=["S0", "S1", "S2", "S3", "L"])
    t.add_argument("--steps", type=int, help="total optimizer updates")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.enat")
    t.add_argument("--eval", action="store_true", help="report ODS/OIS on the training set afterwards")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write an edge map for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--multiscale", action="store_true", help="average over scales 0.5, 1.0, 1.5")
    i.add_argument("--out", required=True, help="output PGM path")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="ODS/OIS of predicted PGMs against ground truth")
    e.add_argument("--pred", required=True, help="directory of <id>.pgm edge maps")
    e.add_argument("--gt", required=True, help="directory of <id>.pgm ground truth (or one with a gt/ subdirectory)")
    e.add_argument("--tolerance", type=float, default=EvalConfig.max_dist, help="fraction of the image diagonal")
    e.add_argument("--matcher", choices=["greedy", "exact"], default="greedy")
    e.add_argument("--eta", type=float, default=0.3, help="ground-truth binarization threshold")
    e.add_argument("--out", help="PR table path (default PRED/pr_table.csv)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--module", choices=["all", *gradcheck.SUITES], default="all")
    g.add_argument("--seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit():
            return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"edgenat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
