"""Command-line entry point: ``vqla {datagen,train,eval,predict,gradcheck,bench}``.

Exit status: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .boxes import cxcywh_to_xyxy
from .config import ConfigError, config_from_dict, config_to_dict, parse_config
from .data import ClassMap, DataError, Vocabulary, build_vocab, collate, parse_record, write_annotations
from .model import forward_batch, init_params
from .train import (CheckpointError, NumericalError, TrainConfig, evaluate, grad_check, load_datasets,
                    load_params, save_checkpoint, train)

SUBCOMMANDS = ("datagen", "train", "eval", "predict", "gradcheck", "bench")
CHECKPOINT_NAME = "model.vqla"
META_NAME = "meta.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqla", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable")
    parser.add_argument("--seed", type=int, help="training seed (train.seed)")
    return parser


# -- artifacts ----------------------------------------------------------------------

def write_meta(path: Path, config: TrainConfig, vocab: Vocabulary, class_map: ClassMap) -> None:
    meta = {"model": config_to_dict(config.model), "vocab": vocab.to_json(), "classes": class_map.labels}
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_model(config: TrainConfig, out: Path):
    ckpt = Path(config.checkpoint) if config.checkpoint else out / CHECKPOINT_NAME
    meta_path = ckpt.parent / META_NAME
    if not ckpt.exists() or not meta_path.exists():
        raise DataError(f"no trained model at {ckpt} (with {META_NAME} beside it)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    mcfg = config_from_dict({"model": meta["model"]}).model
    params = load_params(ckpt, mcfg)
    return params, Vocabulary(meta["vocab"]), ClassMap(meta["classes"]).freeze()


# -- subcommands --------------------------------------------------------------------

def cmd_datagen(config: TrainConfig, out: Path) -> int:
    train_set, val_set, class_map = load_datasets(config)
    write_annotations(out / "train.jsonl", train_set)
    write_annotations(out / "val.jsonl", val_set)
    (out / "classes.json").write_text(json.dumps(class_map.labels) + "\n", encoding="utf-8")
    print(f"wrote {len(train_set)} train / {len(val_set)} val samples to {out}")
    return 0


def cmd_train(config: TrainConfig, out: Path) -> int:
    train_set, val_set, class_map = load_datasets(config)
    vocab = build_vocab(s.question for s in train_set)
    ckpt = Path(config.checkpoint) if config.checkpoint else out / CHECKPOINT_NAME
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    every = config.train.checkpoint_every

    def on_epoch(epoch, params):
        if every and (epoch + 1) % every == 0:
            save_checkpoint(params, ckpt.with_name(f"{ckpt.stem}.epoch{epoch + 1}{ckpt.suffix}"))

    result = train(config, train_set, class_map, vocab, log_path=out / "train.log", on_epoch=on_epoch)
    save_checkpoint(result.params, ckpt)
    write_meta(ckpt.parent / META_NAME, config, vocab, class_map)
    last = result.history[-1].total if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss {last:.6g}; checkpoint {ckpt}")
    return 0


def _eval_split(config: TrainConfig):
    train_set, val_set, _ = load_datasets(config)
    return val_set or train_set


def cmd_eval(config: TrainConfig, out: Path) -> int:
    params, vocab, class_map = load_model(config, out)
    samples = _remap(_eval_split(config), class_map)
    report = evaluate(params, samples, vocab, class_map)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _remap(samples, class_map: ClassMap):
    """Re-index answers against the checkpoint's class map."""
    for s in samples:
        s.answer_class = class_map.intern(s.answer)
    return samples


def cmd_predict(config: TrainConfig, out: Path) -> int:
    params, vocab, class_map = load_model(config, out)
    line = sys.stdin.readline()
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"stdin: malformed annotation line ({exc.msg})") from None
    if not isinstance(record, dict):
        raise DataError("stdin: annotation line is not an object")
    # answer and box are outputs here; placeholders satisfy the record schema
    record.setdefault("answer", class_map.labels[0])
    if "width" in record and "height" in record:
        record.setdefault("bbox", [0, 0, record["width"], record["height"]])
    sample = parse_record(record, Path(config.data.root or "."), ClassMap(class_map.labels))
    with T.no_grad():
        pred = forward_batch(collate([sample], vocab, params.config.text_len), params)
    w, h = sample.frame_size
    box = np.clip(cxcywh_to_xyxy(pred.boxes.data[0]), 0, 1) * np.array([w, h, w, h])
    k = int(pred.logits.data[0].argmax())
    print(json.dumps({"frame_id": sample.frame_id, "answer": class_map.labels[k],
                      "box": [round(float(v), 2) for v in box]}))
    return 0


def cmd_gradcheck(config: TrainConfig, out: Path) -> int:
    report = grad_check(seed=config.train.seed, weights=config.loss)
    for name, err in report.errors.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err < report.threshold else 'FAIL'}")
    print(f"max relative error {report.max_error:.3e} (threshold {report.threshold:g})")
    return 0 if report.passed else 3


def cmd_bench(config: TrainConfig, out: Path) -> int:
    try:
        params, vocab, class_map = load_model(config, out)
        samples = _eval_split(config)
    except DataError:
        train_set, val_set, class_map = load_datasets(config)
        vocab = build_vocab(s.question for s in train_set)
        config.model.vocab_size = max(config.model.vocab_size, len(vocab))
        params = init_params(config.model, seed=config.train.seed)
        samples = val_set or train_set
    batches = [collate([s], vocab, params.config.text_len) for s in samples]
    with T.no_grad():
        forward_batch(batches[0], params)  # warm-up
        start = time.perf_counter()
        for b in batches:
            forward_batch(b, params)
        elapsed = time.perf_counter() - start
    fps = len(batches) / elapsed
    print(f"fps={fps:.2f} samples={len(batches)} seconds={elapsed:.3f}")
    return 0


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        config = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](config, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
