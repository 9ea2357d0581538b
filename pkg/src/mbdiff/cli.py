"""Command-line entry point: ``mbdiff <verb> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 integrity error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTEGRITY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--artifacts", help="artifacts directory (overrides env and config)")
    common.add_argument("--seed", type=int, help="RNG seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS and sequential bands")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mbdiff", description="Band-split diffusion decoder for discrete audio tokens.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    sp = sub.add_parser("prepare", parents=[common], help="build corpus, EQ profile and codebook")
    sp.add_argument("--corpus", help="directory of .wav files (default: synthesize)")

    sp = sub.add_parser("train", parents=[common], help="train band denoisers")
    sp.add_argument("--band", type=int, help="train only this band")
    sp.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    sp.add_argument("--jobs", type=int, default=1, help="parallel band workers")

    sp = sub.add_parser("encode", parents=[common], help="write a token file for a wav")
    sp.add_argument("wav")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("decode", parents=[common], help="decode tokens (or a re-encoded wav) to audio")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--tokens", help="token file")
    src.add_argument("--wav", help="wav to encode and decode")
    sp.add_argument("--out", required=True, help="output wav")
    sp.add_argument("--steps", type=int, help="sampling steps N")
    sp.add_argument("--zero-cond", action="store_true", help="decode with zeroed conditioning")

    sp = sub.add_parser("eval", parents=[common], help="Mel-SNR of reconstructions vs references")
    sp.add_argument("ref_dir")
    sp.add_argument("rec_dir")
    sp.add_argument("--out", help="per-file CSV path")

    sp = sub.add_parser("inspect-schedule", parents=[common], help="print the noise schedule table")
    sp.add_argument("--variant", choices=["power", "linear", "cosine"])
    sp.add_argument("--out", help="CSV path (default: stdout)")
    return p


def _config(args):
    from .config import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {}
    if args.seed is not None:
        over["training.seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["sampling.steps"] = args.steps
    if getattr(args, "variant", None):
        over["schedule.variant"] = args.variant
    return cfg.replace(**over) if over else cfg


def _run(args) -> int:
    from . import pipeline as P
    from .conditioner import encode, load_tokens, save_tokens

    cfg = _config(args)
    root = P.artifacts_root(cfg, args.artifacts)

    if args.verb == "prepare":
        prep = P.cmd_prepare(cfg, root, args.corpus, args.seed)
        print(f"prepared {len(prep.items)} items in {root}")
    elif args.verb == "train":
        jobs = 1 if args.deterministic else max(1, args.jobs)
        for r in P.cmd_train(cfg, root, args.band, args.resume, jobs):
            s = P.smoothed(r.losses)
            print(f"band {r.band}: {len(r.losses)} steps, smoothed loss {s[0]:.4f} -> {s[-1]:.4f}")
    elif args.verb == "encode":
        from .audio import load_wav

        prep = P.load_prepared(cfg, root)
        save_tokens(encode(load_wav(args.wav), prep.codebook), args.out)
    elif args.verb == "decode":
        if args.steps is not None and args.steps < 1:
            print("mbdiff: error: --steps must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        tokens = load_tokens(args.tokens) if args.tokens else None
        seed = 0 if args.seed is None else args.seed
        y = P.cmd_decode(cfg, root, args.out, tokens, args.wav, cfg.sampling.steps, seed, args.zero_cond)
        print(f"wrote {args.out} ({len(y)} samples)")
    elif args.verb == "eval":
        res = P.cmd_eval(args.ref_dir, args.rec_dir)
        if args.out:
            res.to_csv(args.out)
        print(res.table())
        for name in res.missing:
            print(f"warning: unpaired file skipped: {name}", file=sys.stderr)
    elif args.verb == "inspect-schedule":
        table, summary = P.cmd_inspect_schedule(cfg)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(table)
        else:
            sys.stdout.write(table)
        print(summary)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    from .audio import WavError
    from .conditioner import GeometryError
    from .config import ConfigError
    from .pipeline import DataError, IntegrityError

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return _run(args)
    except ConfigError as exc:
        print(f"mbdiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, GeometryError) as exc:
        print(f"mbdiff: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DataError, WavError, FileNotFoundError, FloatingPointError) as exc:
        print(f"mbdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
