"""Command-line entry point: ``rlm {train,eval,generate,gradcheck}``.

Settings resolve in order: built-in defaults, then ``--config FILE`` (JSON or
``key = value`` lines, keys named like the flags), then flags given on the
command line.  ``RLM_SEED`` supplies the seed when neither sets it.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical
failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .corpus import Corpus, batchify, encode, read_lines
from .errors import CheckpointError, ConfigError
from .generator import SamplerConfig, generate, moses_detokenize
from .gradcheck import run_suite
from .layers import CELL_KINDS
from .regularizers import Reduction
from .trainer import TrainConfig, evaluate_perplexity, model_from_manifest, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rlm")


def _bool(s: Any) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# flag name -> (TrainConfig field, type, help)
TRAIN_OPTIONS: dict[str, tuple[str, Callable, str]] = {
    "lr": ("lr0", float, "initial learning rate"),
    "lr-decay": ("lr_decay_divisor", float, "divide the LR by this when validation stalls"),
    "max-epochs": ("max_epochs", int, "maximum number of epochs"),
    "clip": ("clip_norm", float, "global gradient-norm threshold"),
    "weight-decay": ("weight_decay", float, "L2 weight decay on every parameter"),
    "batch-size": ("batch_size", int, "training batch size"),
    "eval-batch-size": ("eval_batch_size", int, "evaluation batch size"),
    "bptt": ("bptt", int, "truncated BPTT length"),
    "dp": ("dp", float, "dropout on word vectors and the final RNN output"),
    "dp-h": ("dp_h", float, "dropout between RNN layers"),
    "alpha": ("alpha", float, "AR coefficient"),
    "beta": ("beta", float, "TAR coefficient"),
    "reduction": ("reduction", str, "AR/TAR aggregation: " + ", ".join(r.value for r in Reduction)),
    "seed": ("seed", int, "random seed (falls back to $RLM_SEED)"),
    "cell": ("cell_kind", str, "recurrent cell: " + ", ".join(CELL_KINDS)),
    "hidden": ("hidden_size", int, "hidden (and embedding) size"),
    "layers": ("num_layers", int, "number of RNN layers"),
    "tied": ("tied", _bool, "tie embedding and softmax weights"),
    "min-lr": ("min_lr", float, "stop once the LR falls below this"),
    "dtype": ("dtype", str, "float64 or float32"),
}
SAMPLER_OPTIONS: dict[str, tuple[str, Callable, str]] = {
    "words": ("num_words", int, "number of words per sample"),
    "temperature": ("temperature", float, "softmax temperature"),
    "samples": ("samples", int, "number of paragraphs"),
    "seed": ("seed", int, "random seed (falls back to $RLM_SEED)"),
}
PATH_OPTIONS = ("train", "valid", "test", "data", "checkpoint", "metrics", "corpus", "output")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_options(p: argparse.ArgumentParser, table: dict) -> None:
    for flag, (_, typ, help_) in table.items():
        kwargs: dict[str, Any] = {"default": argparse.SUPPRESS, "help": help_}
        if typ is _bool:
            kwargs["type"] = _bool
            kwargs["metavar"] = "BOOL"
        else:
            kwargs["type"] = typ
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rlm", description="Word-level RNN language models with AR/TAR.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON or key=value file mirroring the flags")
    p.add_argument("--data", default=argparse.SUPPRESS,
                   help="directory holding train/valid/test (.txt or ptb.*.txt)")
    for name in ("train", "valid", "test"):
        p.add_argument(f"--{name}", default=argparse.SUPPRESS, help=f"{name} split path")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS, help="best-model checkpoint path")
    p.add_argument("--metrics", default=argparse.SUPPRESS, help="line-delimited JSON metrics log")
    _add_options(p, TRAIN_OPTIONS)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus file")
    p.add_argument("--config")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--corpus", default=argparse.SUPPRESS, help="split to evaluate")
    _add_options(p, {k: TRAIN_OPTIONS[k] for k in
                     ("eval-batch-size", "bptt", "cell", "hidden", "layers", "tied")})

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    p.add_argument("--config")
    p.add_argument("--checkpoint", default=argparse.SUPPRESS)
    p.add_argument("--output", default=argparse.SUPPRESS, help="write here instead of stdout")
    _add_options(p, SAMPLER_OPTIONS)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--cell", choices=[*CELL_KINDS, "all"], default="all")
    p.add_argument("--threshold", type=float, default=None,
                   help="override per-component tolerances")
    p.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# config resolution

def read_config_file(path: str) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path}: {err}") from None
        return dict(data)
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config file {path}, line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(args: argparse.Namespace, table: dict, extra: Sequence[str] = ()) -> dict[str, Any]:
    """Merge config file and flags into ``{flag-name: value}`` (defaults not included)."""
    allowed = {k.replace("-", "_"): k for k in table}
    allowed.update({k: k for k in extra})
    merged: dict[str, Any] = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        for key, value in read_config_file(cfg_path).items():
            norm = key.replace("-", "_")
            if norm not in allowed:
                raise UsageError(f"unknown key {key!r} in config file {cfg_path}")
            flag = allowed[norm]
            merged[flag] = table[flag][1](value) if flag in table else value
    for norm, flag in allowed.items():
        if hasattr(args, norm):
            merged[flag] = getattr(args, norm)
    if "seed" in table and "seed" not in merged and os.environ.get("RLM_SEED"):
        try:
            merged["seed"] = int(os.environ["RLM_SEED"])
        except ValueError:
            raise UsageError(f"RLM_SEED must be an integer, got {os.environ['RLM_SEED']!r}") from None
    return merged


def train_config_from(values: dict[str, Any]) -> TrainConfig:
    fields = {TRAIN_OPTIONS[k][0]: v for k, v in values.items() if k in TRAIN_OPTIONS}
    return TrainConfig(**fields)


def _split_paths(values: dict[str, Any]) -> tuple[str, str | None, str | None]:
    paths = {k: values.get(k) for k in ("train", "valid", "test")}
    data = values.get("data")
    if data:
        for split in paths:
            if paths[split]:
                continue
            for name in (f"{split}.txt", f"ptb.{split}.txt", f"wiki.{split}.tokens"):
                cand = os.path.join(data, name)
                if os.path.exists(cand):
                    paths[split] = cand
                    break
    if not paths["train"]:
        raise UsageError("train needs --train PATH or --data DIR")
    return paths["train"], paths["valid"], paths["test"]


# ---------------------------------------------------------------------------
# commands

def cmd_train(args: argparse.Namespace) -> int:
    values = resolve(args, TRAIN_OPTIONS, PATH_OPTIONS)
    config = train_config_from(values)
    train_path, valid_path, test_path = _split_paths(values)
    corpus = Corpus.from_files(train_path, valid_path, test_path)
    checkpoint = values.get("checkpoint", "model.ckpt")
    metrics = values.get("metrics", os.path.splitext(checkpoint)[0] + ".metrics.jsonl")
    log.info("vocabulary %d, train tokens %d, config %s", len(corpus.vocab), corpus.train.size,
             json.dumps(config.to_dict()))
    result = train(config, corpus, checkpoint, metrics)
    last = result.state.history[-1] if result.state.history else None
    if last is not None:
        print(f"epochs {last.epoch} last valid perplexity {last.valid_ppl:.12g}")
    print(f"best valid perplexity {result.best_valid_ppl:.12g}")
    if result.test_ppl is not None:
        print(f"test perplexity {result.test_ppl:.12g}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    table = {k: TRAIN_OPTIONS[k] for k in ("eval-batch-size", "bptt", "cell", "hidden", "layers", "tied")}
    values = resolve(args, table, ("checkpoint", "corpus"))
    if "checkpoint" not in values or "corpus" not in values:
        raise UsageError("eval needs --checkpoint and --corpus")
    manifest = load_checkpoint(values["checkpoint"])
    model, vocab, saved = model_from_manifest(manifest)
    overrides = {TRAIN_OPTIONS[k][0]: v for k, v in values.items() if k in table}
    requested = dataclasses.replace(saved, **overrides)
    if requested.model_config(len(vocab)) != model.config:
        model, vocab, saved = model_from_manifest(manifest, requested.model_config(len(vocab)))
    ids = encode(read_lines(values["corpus"]), vocab)
    data = batchify(ids, requested.eval_batch_size)
    ppl = evaluate_perplexity(model, data, requested.bptt)
    print(f"perplexity {ppl:.12g}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    values = resolve(args, SAMPLER_OPTIONS, ("checkpoint", "output"))
    if "checkpoint" not in values:
        raise UsageError("generate needs --checkpoint")
    model, vocab, _ = model_from_manifest(load_checkpoint(values["checkpoint"]))
    samples = values.pop("samples", 1)
    sampler = SamplerConfig(**{SAMPLER_OPTIONS[k][0]: v for k, v in values.items()
                               if k in SAMPLER_OPTIONS and k != "samples"})
    rng = np.random.default_rng(sampler.seed)
    paragraphs = [moses_detokenize(generate(model, vocab, sampler, rng)) for _ in range(samples)]
    text = "\n\n".join(paragraphs)
    if text:
        text += "\n"
    if values.get("output"):
        with open(values["output"], "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cells = CELL_KINDS if args.cell == "all" else (args.cell,)
    results = run_suite(cells, include_primitives=args.cell == "all", seed=args.seed,
                        tolerance=args.threshold)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<16} {r.error:.3e}  (tol {r.tolerance:.0e})  {status}")
        if not r.passed:
            failed.append(r.component)
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
            "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, ValueError) as err:
        # ValueError here means unusable corpus contents (empty, too short)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except ArithmeticError as err:
        # NumericalError, FloatingPointError, OverflowError
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
