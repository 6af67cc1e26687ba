"""Command-line entry point.

Exit codes: 0 success, 1 training diverged, 2 bad config or input,
3 export refused (sparse weight ratio gate), 4 unreadable checkpoint.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import KEYS, ConfigError, RunConfig, load_config
from .corpus import CorpusData, Vocab, conditional_entropy, generate_corpus
from .nn import build_model
from .scalinglaw import (BUNDLED, DEFAULT_BETA, Unreachable, bundled_points, fit_token_law,
                         leave_one_out, read_points, tokens_to_match)
from .sparsity import one_shot_magnitude_prune
from .trainer import (ExportRefused, RunMetrics, TrainingDiverged, cast_train, evaluate,
                      naive_retrain, pretrain_dense, srste_train, ste_error_probe)

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_EXPORT, EXIT_FORMAT = 0, 1, 2, 3, 4
PROBE_TYPES = ("ste-error", "dense-forward")
SPARSIFIERS = {"cast": cast_train, "srste": srste_train, "naive": naive_retrain}


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    for key in KEYS:
        if key in skip:
            continue
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.override(flags)


def _run_dir(args, default: str) -> Path:
    return Path(args.out) if args.out else Path("runs") / default


def _write_run_files(run: Path, cfg: RunConfig, data) -> None:
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.cfg").write_text(cfg.to_text())
    vocab = getattr(data, "vocab", None)
    if vocab is not None:
        (run / "vocab.tsv").write_text(vocab.to_tsv())


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    plan = cfg.plan("dense")
    data = cfg.data()
    run = _run_dir(args, f"pretrain-seed{cfg.seed}")
    _write_run_files(run, cfg, data)
    ck, metrics = pretrain_dense(plan, data, dump_dir=run)
    path = save_checkpoint(ck, run / "checkpoints" / "dense.ckpt")
    metrics.summary["checkpoint_sha256"] = _digest(path)
    metrics.write(run)
    print(f"dense checkpoint: {path}")
    print(f"val perplexity {metrics.summary['final_val_ppl']:.4f}")
    return EXIT_OK


def _load_ck(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint: file not found: {path}")
    try:
        return load_checkpoint(p)
    except CheckpointFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_FORMAT) from exc


def _check_vocab(ck, data) -> None:
    vocab = getattr(data, "vocab", None)
    want = ck.meta.get("vocab")
    if vocab is not None and want is not None and vocab.symbols.hex() != want:
        raise CliError("corpus: vocabulary differs from the one the checkpoint was trained on")


def cmd_sparsify(args) -> int:
    cfg = _resolve(args)
    if cfg.method not in SPARSIFIERS:
        raise CliError(f"method: choose from {sorted(SPARSIFIERS)}")
    if not cfg.checkpoint:
        raise CliError("checkpoint: a dense checkpoint path is required")
    plan = cfg.plan(cfg.method)
    dense = _load_ck(cfg.checkpoint)
    # the run seed drives batching; the architecture comes from the checkpoint
    if dataclasses.replace(dense.spec, seed=plan.spec.seed) != plan.spec:
        raise CliError("checkpoint: model spec differs from the configured model")
    plan = dataclasses.replace(plan, spec=dense.spec)
    data = cfg.data()
    _check_vocab(dense, data)
    run = _run_dir(args, f"sparsify-{cfg.method}-seed{cfg.seed}")
    _write_run_files(run, cfg, data)
    try:
        out, metrics = SPARSIFIERS[cfg.method](plan, dense, data, dump_dir=run)
    except ExportRefused as exc:
        if exc.metrics is not None:
            exc.metrics.write(run)
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, run / "checkpoints" / "unexported.ckpt")
        raise CliError(str(exc), EXIT_EXPORT) from exc
    path = save_checkpoint(out, run / "checkpoints" / "sparse.ckpt")
    metrics.summary["checkpoint_sha256"] = _digest(path)
    metrics.write(run)
    print(f"sparse checkpoint: {path}")
    print(f"sparse val perplexity {metrics.rows[-1]['val_ppl']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_ck(args.checkpoint)
    cfg = _resolve(args)
    if args.forward == "sparse" and ck.masks is None:
        raise CliError("sparse evaluation needs a checkpoint with masks; this one is dense")
    cfg = cfg.override({"family": ck.spec.family, "vocab_size": ck.spec.vocab_size,
                        "context": ck.spec.context, "widths": ",".join(map(str, ck.spec.widths))})
    data = cfg.data()
    _check_vocab(ck, data)
    model = build_model(ck.spec)
    val = data.validation(cfg.eval_seqs)
    loss = evaluate(model, ck.params, val, args.forward, ck.masks, ck.scaling)
    ppl = math.exp(loss) if ck.spec.family != "mlp" else float("nan")
    print(f"perplexity {ppl:.4f}")
    row = f"{args.checkpoint},{args.forward},{loss!r},{ppl!r}\n"
    if args.csv:
        p = Path(args.csv)
        new = not p.exists()
        with p.open("a") as fh:
            if new:
                fh.write("checkpoint,forward,val_ce,perplexity\n")
            fh.write(row)
    else:
        print("checkpoint,forward,val_ce,perplexity")
        print(row, end="")
    return EXIT_OK


def cmd_fit_law(args) -> int:
    if args.bundled:
        points = bundled_points(args.bundled)
    elif args.points:
        if not Path(args.points).is_file():
            raise CliError(f"points: file not found: {args.points}")
        try:
            points = read_points(args.points)
        except ValueError as exc:
            raise CliError(f"points: {exc}") from exc
    else:
        raise CliError(f"give a points CSV or --bundled {{{','.join(BUNDLED)}}}")
    try:
        fit = fit_token_law(points, args.beta)
    except ValueError as exc:
        raise CliError(f"points: {exc}") from exc
    print(fit.report(), end="")
    if args.loo:
        print("held_out_tokens,actual_ppl,predicted_ppl,abs_error")
        for h in leave_one_out(points, args.beta, all_points=args.loo_all):
            print(f"{h.tokens:g},{h.actual_ppl:.4f},{h.predicted_ppl:.4f},{h.abs_error:.4f}")
    if args.target_ppl is not None:
        d = tokens_to_match(fit, args.target_ppl)
        if isinstance(d, Unreachable):
            print(d)
        else:
            print(f"tokens_to_match({args.target_ppl:g}) = {d:.1f}B")
            print("note: inverting the fit amplifies rounding in A and B; treat as +/-25%")
    return EXIT_OK


def _svg(path: Path, draw) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_probe(args) -> int:
    out = Path(args.out) if args.out else Path("runs") / f"probe-{args.type}"
    if args.type == "dense-forward":
        if not args.run:
            raise CliError("dense-forward probe needs --run pointing at a run directory")
        mpath = Path(args.run) / "metrics.csv"
        if not mpath.is_file():
            raise CliError(f"run: no metrics.csv in {args.run}")
        m = RunMetrics.read_csv(mpath)
        steps, ppl = m.column("step"), m.column("dense_ppl")
        out.mkdir(parents=True, exist_ok=True)
        lines = ["step,dense_ppl"] + [f"{int(s)},{float(p)!r}" for s, p in zip(steps, ppl)]
        (out / "dense_forward.csv").write_text("\n".join(lines) + "\n")
        if not args.no_svg:
            def draw(ax):
                ax.plot(steps, ppl, marker=".")
                ax.set_xlabel("step")
                ax.set_ylabel("dense-forward val perplexity")
            _svg(out / "dense_forward.svg", draw)
        print(f"wrote {out / 'dense_forward.csv'}")
        return EXIT_OK

    cfg = _resolve(args)
    if not cfg.checkpoint:
        raise CliError("ste-error probe needs --checkpoint")
    ck = _load_ck(cfg.checkpoint)
    cfg = cfg.override({"family": ck.spec.family, "vocab_size": ck.spec.vocab_size,
                        "context": ck.spec.context, "widths": ",".join(map(str, ck.spec.widths))})
    data = cfg.data()
    _check_vocab(ck, data)
    model = build_model(ck.spec)
    masks = ck.masks
    if masks is None:
        masks = one_shot_magnitude_prune({k: ck.params[k] for k in model.sparsifiable},
                                         cfg.plan("dense").nm)
    lam = cfg.srste_lambda if args.probe_lambda is None else args.probe_lambda
    res = ste_error_probe(model, ck.params, masks, data.validation(cfg.eval_seqs), lam)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ste_error.csv").write_text(res.to_csv())
    (out / "report.txt").write_text(
        f"lambda = {lam!r}\nslope = {res.slope!r}\nintercept = {res.intercept!r}\n"
        f"pearson = {res.pearson!r}\nmasked_entries = {res.delta.size}\n")
    if not args.no_svg:
        def draw(ax):
            ax.scatter(res.abs_theta, res.delta, s=2, alpha=0.4)
            xs = np.linspace(0, res.abs_theta.max(), 2)
            ax.plot(xs, res.intercept + res.slope * xs, color="k")
            ax.set_xlabel("|theta| (masked)")
            ax.set_ylabel("straight-through gradient error")
        _svg(out / "ste_error.svg", draw)
    print(f"slope {res.slope:.6g}  pearson {res.pearson:.4f}  entries {res.delta.size}")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    if args.bytes <= args.context:
        raise CliError(f"bytes: need more than the context length ({args.context})")
    data = generate_corpus(args.seed, args.bytes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    vocab = Vocab.from_data(data, args.vocab_size)
    Path(str(out) + ".vocab.tsv").write_text(vocab.to_tsv())
    h = conditional_entropy(vocab.encode(data), vocab.size)
    print(f"wrote {len(data)} bytes to {out} (sha256 {_digest(out)})")
    print(f"bigram conditional entropy {h:.4f} nats/symbol (uniform {math.log(vocab.size):.4f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="castlab", description="N:M sparse training toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a dense model")
    _add_config_flags(p, skip=("method", "checkpoint"))
    p.add_argument("--out", help="run directory")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("sparsify", help="turn a dense checkpoint into an N:M sparse one")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory")
    p.set_defaults(fn=cmd_sparsify)

    p = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--forward", choices=("dense", "sparse"), default="dense")
    p.add_argument("--csv", help="append the result row to this CSV file")
    _add_config_flags(p, skip=("method", "checkpoint"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fit-law", help="fit L(D) = A + B * D**-beta to (tokens, perplexity) points")
    p.add_argument("points", nargs="?", help="CSV with columns tokens_billions,perplexity")
    p.add_argument("--bundled", choices=BUNDLED, help="use a bundled data table")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--loo", action="store_true", help="hold out the largest-token point")
    p.add_argument("--loo-all", action="store_true", help="with --loo, hold out every point in turn")
    p.add_argument("--target-ppl", type=float, help="report tokens needed to reach this perplexity")
    p.set_defaults(fn=cmd_fit_law)

    p = sub.add_parser("probe", help="straight-through error or dense-forward probes")
    p.add_argument("--type", required=True, choices=PROBE_TYPES)
    p.add_argument("--run", help="run directory (dense-forward)")
    p.add_argument("--probe-lambda", type=float, help="decay strength in the error (default: srste_lambda)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-svg", action="store_true")
    _add_config_flags(p, skip=("method",))
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("gen-corpus", help="write a synthetic Markov corpus and its vocabulary")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bytes", type=int, default=3_000_000)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--context", type=int, default=64)
    p.set_defaults(fn=cmd_gen_corpus)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
