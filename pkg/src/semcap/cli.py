"""Command line: gen-corpus, build-vocab, build-index, train, caption,
evaluate, grad-check.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. The run-directory root comes from SEMCAP_RUN_ROOT (default
./runs); everything else is configured through the config file and
--set key=value overrides.
"""

from __future__ import annotations

import argparse
import sys

from semcap import runner
from semcap.config import ConfigError, load_config
from semcap.corpus import DataError
from semcap.tensor import ContractError, NumericsError, ShapeError

GRAD_CHECK_TOLERANCE = 1e-4


def _add_common(sub):
    sub.add_argument("-c", "--config", default=None,
                     help="config file of 'key = value' lines")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config value")
    sub.add_argument("--data-dir", default="data",
                     help="directory for corpus/vocab/index files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semcap",
        description="desk-scale image captioning with retrieved semantic cues")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, text in (("gen-corpus", "generate corpus, lexicon, and split"),
                       ("build-vocab", "build word and semantic vocabularies"),
                       ("build-index", "embed training captions into the "
                                       "retrieval pool"),
                       ("train", "train a captioner")):
        _add_common(subs.add_parser(name, help=text))

    cap = subs.add_parser("caption", help="caption images with a checkpoint")
    _add_common(cap)
    cap.add_argument("--checkpoint", required=True)
    cap.add_argument("--out", required=True)
    cap.add_argument("--section", default="test",
                     choices=["train", "val", "test", "all"])
    cap.add_argument("--ids", nargs="*", default=None,
                     help="explicit image ids instead of a split section")

    ev = subs.add_parser("evaluate", help="score a caption file")
    _add_common(ev)
    ev.add_argument("--captions", required=True)
    ev.add_argument("--out", default=None,
                    help="report path prefix (.txt and .json are written)")
    ev.add_argument("--section", default="test",
                    choices=["train", "val", "test", "all"])

    gc = subs.add_parser("grad-check",
                         help="finite-difference check of every parameter "
                              "of a tiny model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=GRAD_CHECK_TOLERANCE)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            errors = runner.run_grad_check(seed=args.seed)
            worst = max(errors.values())
            for name in sorted(errors):
                print(f"{name}\t{errors[name]:.3e}")
            print(f"worst\t{worst:.3e}\ttolerance\t{args.tolerance:.1e}")
            if worst >= args.tolerance:
                print("gradient check FAILED", file=sys.stderr)
                return 4
            print("gradient check passed")
            return 0

        cfg = load_config(args.config, args.overrides)
        if args.command == "gen-corpus":
            records = runner.gen_corpus_cmd(cfg, args.data_dir)
            print(f"wrote {len(records)} records under {args.data_dir}")
        elif args.command == "build-vocab":
            wv, sv = runner.build_vocab_cmd(cfg, args.data_dir)
            print(f"word vocabulary: {wv.size} entries; semantic vocabulary: "
                  f"{sv.n_words} words + irrelevant")
        elif args.command == "build-index":
            pool = runner.build_index_cmd(cfg, args.data_dir)
            print(f"indexed {len(pool)} training sentences")
        elif args.command == "train":
            ckpt, log, last = runner.run_train(cfg, args.data_dir,
                                               quiet=False)
            print(f"checkpoint: {ckpt}\nloss log: {log}\n"
                  f"final loss {last.total:.4f}")
        elif args.command == "caption":
            captions = runner.run_caption(cfg, args.data_dir,
                                          args.checkpoint, args.out,
                                          section=args.section,
                                          image_ids=args.ids)
            print(f"captioned {len(captions)} images -> {args.out}")
        elif args.command == "evaluate":
            report = runner.run_evaluate(cfg, args.data_dir, args.captions,
                                         out_prefix=args.out,
                                         section=args.section)
            for key, value in report.items():
                print(f"{key} {value:.4f}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError, ShapeError, ContractError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
