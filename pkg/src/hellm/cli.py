"""Command-line front end binding the pipeline stages together.

Every subcommand accepts ``--config FILE`` pointing at a JSON object
whose keys are the flag names with dashes as underscores. Explicit
flags override file values, which override built-in defaults. Commands
that create an output directory echo the merged settings there as
``effective_config.json``. Exit status: 0 on success, 1 on data
errors, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import baselines, bert, denoiser, finetune, metrics, textnorm, tokenizer, trainer
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, HellmError
from .pretrain_data import MaskingPolicy, build_pretrain_dataset, read_instances, write_instances

TASKS = ("pos", "ner", "nli")
MODELS = ("bert", "bilstm-cnn-crf", "dam")


# ---------------------------------------------------------------------------
# Shared plumbing


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _read_json(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise DataError(f"{path} must hold a JSON object")
    return payload


def _write_json(path, payload) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def _effective_config(name: str, defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    cfg = dict(defaults)
    given = vars(args)
    if given.get("config"):
        for key, value in _read_json(given["config"]).items():
            if key not in defaults:
                raise ConfigError(
                    f"unknown key {key!r} in {given['config']} for {name}"
                )
            cfg[key] = value
    for key, value in given.items():
        if key in defaults and value is not None:
            cfg[key] = value
    return cfg


def _require(cfg: dict, name: str, *keys: str) -> None:
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"{name} needs --{key.replace('_', '-')}")


def _check_choice(cfg: dict, key: str, choices: tuple) -> None:
    if cfg[key] not in choices:
        raise ConfigError(
            f"--{key} must be one of {', '.join(choices)}, got {cfg[key]!r}"
        )


def _echo_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "effective_config.json", cfg)


def _norm_config(cfg: dict) -> textnorm.NormalizationConfig:
    return textnorm.NormalizationConfig(
        strip_diacritics=not cfg["keep_accents"],
        lowercase=not cfg["keep_case"],
    )


def _load_encoder(path) -> tuple[bert.EncoderWeights, bert.BertConfig]:
    params, saved = load_checkpoint(path)
    try:
        config = bert.BertConfig(**saved)
    except (TypeError, ConfigError) as exc:
        raise DataError(
            f"checkpoint {path} does not describe an encoder: {exc}"
        ) from exc
    return bert.EncoderWeights(params), config


def _copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
        for name, t in params.items()
    }


def _run_config(cfg: dict) -> finetune.FinetuneRunConfig:
    target = cfg["target_accuracy"]
    return finetune.FinetuneRunConfig(
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        seed=int(cfg["seed"]),
        eval_every=int(cfg["eval_every"]),
        target_accuracy=None if target is None else float(target),
    )


def _write_tagged(path, sentences, labelled) -> None:
    """CoNLL-style output: token<TAB>label lines, blank between sentences."""
    blocks = []
    for sent, labels in zip(sentences, labelled):
        blocks.append(
            "\n".join(f"{w}\t{lab}" for w, lab in zip(sent.words, labels))
        )
    Path(path).write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def _write_nli(path, pairs, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair, label in zip(pairs, labels):
            fh.write(json.dumps({
                "premise": pair.premise,
                "hypothesis": pair.hypothesis,
                "label": label,
            }, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_normalize(cfg: dict) -> None:
    _require(cfg, "normalize", "in", "out")
    docs = textnorm.segment_corpus(_read_bytes(cfg["in"]), _norm_config(cfg))
    Path(cfg["out"]).write_text(
        textnorm.serialize_corpus(docs), encoding="utf-8"
    )
    print(f"normalized {sum(len(d.sentences) for d in docs)} sentences "
          f"in {len(docs)} documents to {cfg['out']}")


def _cmd_train_tokenizer(cfg: dict) -> None:
    _require(cfg, "train-tokenizer", "corpus", "out")
    docs = textnorm.segment_corpus(_read_bytes(cfg["corpus"]))
    vocab = tokenizer.train_bpe(docs, int(cfg["vocab_size"]))
    vocab.save(cfg["out"])
    print(f"trained vocabulary of {len(vocab)} tokens "
          f"({len(vocab.merges)} merges) to {cfg['out']}")


def _cmd_tokenize(cfg: dict) -> None:
    _require(cfg, "tokenize", "vocab", "in")
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    text = textnorm.decode_utf8(_read_bytes(cfg["in"]))
    cache: dict = {}
    for line in text.splitlines():
        if not line.strip():
            print()
            continue
        print(" ".join(tokenizer.encode(line, vocab, _cache=cache).pieces))


def _cmd_frag_ratio(cfg: dict) -> None:
    _require(cfg, "frag-ratio", "vocab", "corpus")
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    docs = textnorm.segment_corpus(_read_bytes(cfg["corpus"]), vocab.normalizer)
    print(tokenizer.fragmentation_ratio(docs, vocab))


def _cmd_build_pretrain_data(cfg: dict) -> None:
    _require(cfg, "build-pretrain-data", "corpus", "vocab", "out")
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    docs = textnorm.segment_corpus(_read_bytes(cfg["corpus"]), vocab.normalizer)
    seed = int(cfg["seed"])
    instances = build_pretrain_dataset(
        docs,
        vocab,
        max_len=int(cfg["max_len"]),
        negative_prob=float(cfg["negative_prob"]),
        policy=MaskingPolicy(
            select_prob=float(cfg["select_prob"]), rng_seed=seed
        ),
        rng_seed=seed,
    )
    write_instances(instances, cfg["out"])
    print(f"wrote {len(instances)} instances to {cfg['out']}")


def _cmd_pretrain(cfg: dict) -> None:
    _require(cfg, "pretrain", "data", "vocab", "out")
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    instances = read_instances(cfg["data"])
    vocab_size = cfg["vocab_size"]
    model = bert.BertConfig(
        layers=int(cfg["layers"]),
        hidden=int(cfg["hidden"]),
        heads=int(cfg["heads"]),
        intermediate=(
            None if cfg["intermediate"] is None else int(cfg["intermediate"])
        ),
        max_positions=int(cfg["max_positions"]),
        vocab_size=len(vocab) if vocab_size is None else int(vocab_size),
        dropout=float(cfg["dropout"]),
    )
    run = trainer.PretrainRunConfig(
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        clip_norm=(
            None if cfg["clip_norm"] is None else float(cfg["clip_norm"])
        ),
    )
    out = Path(cfg["out"])
    _echo_config(out, cfg)
    _, curve = trainer.pretrain(instances, model, run, out_dir=out)
    last = f"final loss {curve[-1][1]:.4f}" if curve else "no steps run"
    print(f"pre-trained {run.steps} steps on {len(instances)} instances; "
          f"{last}; checkpoint in {out}")


def _tagging_predictions(label_map: dict[str, int], outputs) -> list[list[str]]:
    inverse = {i: label for label, i in label_map.items()}
    return [[inverse[int(i)] for i in ids] for ids in outputs]


def _finetune_bert(cfg: dict, run, out: Path) -> tuple[str, float | None]:
    _require(cfg, "finetune", "ckpt", "vocab")
    weights, model = _load_encoder(cfg["ckpt"])
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    task = cfg["task"]
    if task == "nli":
        train = finetune.read_nli(cfg["train"])
        dev = finetune.read_nli(cfg["dev"]) if cfg["dev"] else None
        result = finetune.finetune_nli(train, vocab, weights, model, run, dev=dev)
        test_metric = None
        if cfg["test"]:
            test = finetune.read_nli(cfg["test"])
            test_metric, predicted = finetune.evaluate_nli(
                test, vocab, result.weights, model, result.head
            )
            _write_nli(out / "test_predictions.jsonl", test, predicted)
    else:
        bio2 = task == "ner"
        train = finetune.read_tagged(cfg["train"], bio2=bio2)
        dev = finetune.read_tagged(cfg["dev"], bio2=bio2) if cfg["dev"] else None
        test = finetune.read_tagged(cfg["test"], bio2=bio2) if cfg["test"] else None
        pool = list(train) + list(dev or []) + list(test or [])
        label_map = finetune.build_label_map(pool)
        result = finetune.finetune_tagging(
            train, vocab, weights, model, label_map, run,
            dev=dev, use_crf=bio2,
        )
        test_metric = None
        if test:
            cache: dict = {}
            encoded = [
                finetune.align_labels(
                    s, vocab, model.max_positions, label_map, cache
                )
                for s in test
            ]
            test_metric, outputs = finetune.evaluate_tagging(
                encoded, result.weights, model, result.head
            )
            _write_tagged(
                out / "test_predictions.tsv",
                test,
                _tagging_predictions(label_map, outputs),
            )
    params = dict(result.weights.params)
    params.update(result.head)
    save_checkpoint(
        out / "checkpoint_final.hlm", params, dataclasses.asdict(model)
    )
    _report_finetune(out, result.accuracy_trace, result.steps_run, test_metric)
    return "bert", test_metric


def _finetune_baseline(cfg: dict, run, out: Path) -> tuple[str, float | None]:
    task = cfg["task"]
    if cfg["model"] == "dam" and task != "nli":
        raise ConfigError("the dam model only supports --task nli")
    if cfg["model"] == "bilstm-cnn-crf" and task == "nli":
        raise ConfigError("the bilstm-cnn-crf model supports --task pos or ner")
    _require(cfg, "finetune", "vectors")
    vectors = baselines.load_word_vectors(cfg["vectors"])
    seed = int(cfg["seed"])
    if cfg["model"] == "dam":
        train = finetune.read_nli(cfg["train"])
        dev = finetune.read_nli(cfg["dev"]) if cfg["dev"] else None
        config = baselines.DamConfig(
            word_dim=vectors.dim,
            hidden=int(cfg["hidden"] or 200),
            dropout=float(cfg["dropout"]),
        )
        model = baselines.make_dam(config, seed=seed)
        result = baselines.train_dam(train, vectors, model, run, dev=dev)
        test_metric = None
        if cfg["test"]:
            test = finetune.read_nli(cfg["test"])
            test_metric, predicted = baselines.evaluate_dam(
                test, vectors, model
            )
            _write_nli(out / "test_predictions.jsonl", test, predicted)
        params = model.params
        saved = dataclasses.asdict(config)
    else:
        bio2 = task == "ner"
        train = finetune.read_tagged(cfg["train"], bio2=bio2)
        dev = finetune.read_tagged(cfg["dev"], bio2=bio2) if cfg["dev"] else None
        test = finetune.read_tagged(cfg["test"], bio2=bio2) if cfg["test"] else None
        pool = list(train) + list(dev or []) + list(test or [])
        label_map = finetune.build_label_map(pool)
        config = baselines.TaggerConfig(
            word_dim=vectors.dim,
            hidden=int(cfg["hidden"] or 100),
            n_labels=len(label_map),
            dropout=float(cfg["dropout"]),
        )
        char_vocab = baselines.build_char_vocab(
            w for s in pool for w in s.words
        )
        model = baselines.make_tagger(config, char_vocab, seed=seed)
        result = baselines.train_tagger(
            train, vectors, model, label_map, run, dev=dev
        )
        test_metric = None
        if test:
            test_metric, outputs = baselines.evaluate_tagger(
                test, vectors, model, label_map
            )
            _write_tagged(
                out / "test_predictions.tsv",
                test,
                _tagging_predictions(label_map, outputs),
            )
        params = model.params
        saved = dataclasses.asdict(config)
    save_checkpoint(out / "checkpoint_final.hlm", params, saved)
    _report_finetune(out, result.accuracy_trace, result.steps_run, test_metric)
    return cfg["model"], test_metric


def _report_finetune(out: Path, trace, steps_run, test_metric) -> None:
    _write_json(out / "metrics.json", {
        "steps_run": steps_run,
        "accuracy_trace": [[step, acc] for step, acc in trace],
        "test_accuracy": test_metric,
    })


def _cmd_finetune(cfg: dict) -> None:
    _require(cfg, "finetune", "task", "train", "out")
    _check_choice(cfg, "task", TASKS)
    _check_choice(cfg, "model", MODELS)
    run = _run_config(cfg)
    out = Path(cfg["out"])
    _echo_config(out, cfg)
    if cfg["model"] == "bert":
        name, test_metric = _finetune_bert(cfg, run, out)
    else:
        name, test_metric = _finetune_baseline(cfg, run, out)
    tail = "" if test_metric is None else f"; test accuracy {test_metric:.4f}"
    print(f"fine-tuned {name} on {cfg['task']}{tail}; artifacts in {out}")


def _cmd_grid_search(cfg: dict) -> None:
    _require(cfg, "grid-search", "task", "grid", "ckpt", "vocab", "train", "out")
    _check_choice(cfg, "task", TASKS)
    payload = _read_json(cfg["grid"])
    axes = payload.get("axes", payload)
    if not isinstance(axes, dict):
        raise DataError(f"{cfg['grid']} must map axis names to value lists")
    known = {"steps", "batch_size", "lr", "eval_every", "seed", "dropout"}
    unknown = set(axes) - known
    if unknown:
        raise ConfigError(
            f"grid axes {sorted(unknown)} not searchable; "
            f"choose from {sorted(known)}"
        )
    space = trainer.GridSpec(axes={k: list(v) for k, v in axes.items()})
    weights, model = _load_encoder(cfg["ckpt"])
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    task = cfg["task"]
    if task == "nli":
        train = finetune.read_nli(cfg["train"])
        dev = finetune.read_nli(cfg["dev"]) if cfg["dev"] else train
    else:
        bio2 = task == "ner"
        train = finetune.read_tagged(cfg["train"], bio2=bio2)
        dev = finetune.read_tagged(cfg["dev"], bio2=bio2) if cfg["dev"] else train
        label_map = finetune.build_label_map(list(train) + list(dev))

    def train_and_eval(point: dict, patience: int) -> float:
        merged = dict(cfg)
        merged.update(point)
        run = _run_config(merged)
        fresh = bert.EncoderWeights(_copy_params(weights.params))
        config = dataclasses.replace(
            model, dropout=float(merged["dropout"])
        )
        if task == "nli":
            result = finetune.finetune_nli(
                train, vocab, fresh, config, run, dev=dev
            )
        else:
            result = finetune.finetune_tagging(
                train, vocab, fresh, config, label_map, run,
                dev=dev, use_crf=(task == "ner"),
            )
        return 1.0 - result.accuracy_trace[-1][1]

    best, table = trainer.grid_search(
        space, train_and_eval, patience=int(cfg["patience"])
    )
    out = Path(cfg["out"])
    _echo_config(out, cfg)
    _write_json(out / "grid_results.json", {"best_config": best, "table": table})
    best_loss = min(
        row["dev_loss"] for row in table if "dev_loss" in row
    )
    print(f"best config {json.dumps(best, sort_keys=True)} "
          f"with dev loss {best_loss:.4f}; table in {out}")


def _evaluate_one(task: str, gold_path, pred_path) -> tuple[float, dict]:
    if task == "nli":
        gold = [p.label for p in finetune.read_nli(gold_path)]
        pred = [p.label for p in finetune.read_nli(pred_path)]
        classes = sorted(set(gold) | set(pred))
        overall = metrics.accuracy(gold, pred)
        table = metrics.per_class_f1(gold, pred, classes)
        per_class = {
            cls: {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                  "tp": s.tp, "fp": s.fp, "fn": s.fn, "absent": s.absent}
            for cls, s in table.items()
        }
        return overall, per_class
    gold_sents = finetune.read_tagged(gold_path, bio2=(task == "ner"))
    pred_sents = finetune.read_tagged(pred_path)
    if task == "ner":
        result = metrics.entity_micro_f1(
            [s.labels for s in gold_sents], [s.labels for s in pred_sents]
        )
        per_class = {
            kind: {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                   "tp": s.tp, "fp": s.fp, "fn": s.fn}
            for kind, s in result.per_type.items()
        }
        per_class["_totals"] = {
            "tp": result.tp, "fp": result.fp, "fn": result.fn,
            "degenerate": result.degenerate,
        }
        return result.f1, per_class
    gold = [lab for s in gold_sents for lab in s.labels]
    pred = [lab for s in pred_sents for lab in s.labels]
    classes = sorted(set(gold) | set(pred))
    overall = metrics.accuracy(gold, pred)
    table = metrics.per_class_f1(gold, pred, classes)
    per_class = {
        cls: {"precision": s.precision, "recall": s.recall, "f1": s.f1,
              "tp": s.tp, "fp": s.fp, "fn": s.fn, "absent": s.absent}
        for cls, s in table.items()
    }
    return overall, per_class


def _cmd_evaluate(cfg: dict) -> None:
    _require(cfg, "evaluate", "task", "gold", "pred", "report")
    _check_choice(cfg, "task", TASKS)
    preds = cfg["pred"]
    if isinstance(preds, str):
        preds = [preds]
    metric_name = "entity_micro_f1" if cfg["task"] == "ner" else "accuracy"
    files = []
    values = []
    for pred_path in preds:
        overall, per_class = _evaluate_one(cfg["task"], cfg["gold"], pred_path)
        files.append({
            "pred": str(pred_path), "overall": overall, "per_class": per_class,
        })
        values.append(overall)
    summary = metrics.MetricSummary.from_values(metric_name, values)
    _write_json(cfg["report"], {
        "task": cfg["task"],
        "gold": str(cfg["gold"]),
        "metric": metric_name,
        "files": files,
        "summary": dataclasses.asdict(summary),
    })
    print(summary)


def _cmd_score_pairs(cfg: dict) -> None:
    _require(cfg, "score-pairs", "ckpt", "vocab", "in", "out")
    weights, model = _load_encoder(cfg["ckpt"])
    vocab = tokenizer.Vocabulary.load(cfg["vocab"])
    pairs = finetune.read_nli(cfg["in"])
    scored = denoiser.score_pairs(pairs, vocab, weights, model)
    kept = scored
    if cfg["keep_fraction"] is not None:
        kept, report = denoiser.select_top_fraction(
            scored, float(cfg["keep_fraction"])
        )
        print(f"retained {report.retained} of {report.total} pairs "
              f"at cutoff {report.cutoff_ppl:.4f}")
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        for item in kept:
            fh.write(json.dumps({
                "premise": item.pair.premise,
                "hypothesis": item.pair.hypothesis,
                "label": item.pair.label,
                "ppl": item.ppl,
                "token_count": item.token_count,
            }, ensure_ascii=False) + "\n")
    print(f"scored {len(scored)} pairs; wrote {len(kept)} to {cfg['out']}")


# ---------------------------------------------------------------------------
# Parser


@dataclass(frozen=True)
class _Command:
    name: str
    help: str
    defaults: dict
    flags: Callable[[argparse.ArgumentParser], None]
    handler: Callable[[dict], None]


def _normalize_flags(p):
    p.add_argument("--in", help="raw corpus file (required)")
    p.add_argument("--out", help="normalized corpus file (required)")
    p.add_argument("--keep-case", action="store_true", default=None,
                   help="skip lowercasing (default: off)")
    p.add_argument("--keep-accents", action="store_true", default=None,
                   help="skip diacritic stripping (default: off)")


def _train_tokenizer_flags(p):
    p.add_argument("--corpus", help="normalized corpus file (required)")
    p.add_argument("--vocab-size", type=int,
                   help="total vocabulary size (default: 2000)")
    p.add_argument("--out", help="vocabulary JSON file (required)")


def _tokenize_flags(p):
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--in", help="text file, one sentence per line (required)")


def _frag_ratio_flags(p):
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--corpus", help="corpus file to measure (required)")


def _build_pretrain_data_flags(p):
    p.add_argument("--corpus", help="normalized corpus file (required)")
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--max-len", type=int,
                   help="sequence budget incl. specials (default: 128)")
    p.add_argument("--negative-prob", type=float,
                   help="NotNext sampling probability (default: 0.5)")
    p.add_argument("--select-prob", type=float,
                   help="masked-position fraction (default: 0.15)")
    p.add_argument("--out", help="instances JSONL file (required)")


def _pretrain_flags(p):
    p.add_argument("--data", help="instances JSONL file (required)")
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--out", help="checkpoint directory (required)")
    p.add_argument("--layers", type=int, help="encoder layers (default: 2)")
    p.add_argument("--hidden", type=int, help="hidden width (default: 64)")
    p.add_argument("--heads", type=int, help="attention heads (default: 2)")
    p.add_argument("--intermediate", type=int,
                   help="feed-forward width (default: 4*hidden)")
    p.add_argument("--max-positions", type=int,
                   help="position table size (default: 128)")
    p.add_argument("--dropout", type=float, help="dropout rate (default: 0.1)")
    p.add_argument("--vocab-size", type=int,
                   help="embedding rows (default: size of --vocab)")
    p.add_argument("--steps", type=int, help="optimizer steps (default: 100)")
    p.add_argument("--batch-size", type=int, help="batch size (default: 8)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    p.add_argument("--checkpoint-every", type=int,
                   help="periodic checkpoint interval, 0 = off (default: 0)")
    p.add_argument("--clip-norm", type=float,
                   help="gradient clipping norm (default: off)")


def _finetune_flags(p):
    p.add_argument("--task", help="pos | ner | nli (required)")
    p.add_argument("--model",
                   help="bert | bilstm-cnn-crf | dam (default: bert)")
    p.add_argument("--ckpt", help="pre-trained checkpoint (bert model)")
    p.add_argument("--vocab", help="vocabulary JSON file (bert model)")
    p.add_argument("--vectors", help="word-vector text file (baselines)")
    p.add_argument("--train", help="training data file (required)")
    p.add_argument("--dev", help="development data file")
    p.add_argument("--test", help="held-out data file")
    p.add_argument("--out", help="artifact directory (required)")
    p.add_argument("--steps", type=int, help="optimizer steps (default: 50)")
    p.add_argument("--batch-size", type=int, help="batch size (default: 8)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    p.add_argument("--eval-every", type=int,
                   help="dev evaluation interval (default: 10)")
    p.add_argument("--target-accuracy", type=float,
                   help="stop once dev accuracy reaches this (default: off)")
    p.add_argument("--hidden", type=int,
                   help="baseline width (default: 100 tagger, 200 dam)")
    p.add_argument("--dropout", type=float,
                   help="baseline dropout (default: 0.1)")


def _grid_search_flags(p):
    p.add_argument("--task", help="pos | ner | nli (required)")
    p.add_argument("--grid", help="JSON file of axis values (required)")
    p.add_argument("--ckpt", help="pre-trained checkpoint (required)")
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--train", help="training data file (required)")
    p.add_argument("--dev", help="development data file (default: train)")
    p.add_argument("--out", help="artifact directory (required)")
    p.add_argument("--steps", type=int,
                   help="optimizer steps per point (default: 50)")
    p.add_argument("--batch-size", type=int, help="batch size (default: 8)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 1e-3)")
    p.add_argument("--eval-every", type=int,
                   help="dev evaluation interval (default: 10)")
    p.add_argument("--dropout", type=float, help="dropout rate (default: 0.1)")
    p.add_argument("--patience", type=int,
                   help="early-stopping patience (default: 3)")


def _evaluate_flags(p):
    p.add_argument("--task", help="pos | ner | nli (required)")
    p.add_argument("--gold", help="gold data file (required)")
    p.add_argument("--pred", action="append",
                   help="prediction file; repeat for multiple runs (required)")
    p.add_argument("--report", help="report JSON file (required)")


def _score_pairs_flags(p):
    p.add_argument("--ckpt", help="pre-trained checkpoint (required)")
    p.add_argument("--vocab", help="vocabulary JSON file (required)")
    p.add_argument("--in", help="pairs JSONL file (required)")
    p.add_argument("--out", help="scored JSONL file (required)")
    p.add_argument("--keep-fraction", type=float,
                   help="retain this lowest-perplexity fraction (default: all)")


_COMMANDS = (
    _Command(
        "normalize", "normalize a raw corpus",
        {"in": None, "out": None, "keep_case": False, "keep_accents": False,
         "seed": 0},
        _normalize_flags, _cmd_normalize,
    ),
    _Command(
        "train-tokenizer", "train a BPE vocabulary",
        {"corpus": None, "vocab_size": 2000, "out": None, "seed": 0},
        _train_tokenizer_flags, _cmd_train_tokenizer,
    ),
    _Command(
        "tokenize", "print sub-word pieces per input line",
        {"vocab": None, "in": None, "seed": 0},
        _tokenize_flags, _cmd_tokenize,
    ),
    _Command(
        "frag-ratio", "print the word fragmentation ratio",
        {"vocab": None, "corpus": None, "seed": 0},
        _frag_ratio_flags, _cmd_frag_ratio,
    ),
    _Command(
        "build-pretrain-data", "pack and mask MLM/NSP instances",
        {"corpus": None, "vocab": None, "max_len": 128, "negative_prob": 0.5,
         "select_prob": 0.15, "out": None, "seed": 0},
        _build_pretrain_data_flags, _cmd_build_pretrain_data,
    ),
    _Command(
        "pretrain", "pre-train an encoder on masked instances",
        {"data": None, "vocab": None, "out": None, "layers": 2, "hidden": 64,
         "heads": 2, "intermediate": None, "max_positions": 128,
         "dropout": 0.1, "vocab_size": None, "steps": 100, "batch_size": 8,
         "lr": 1e-3, "checkpoint_every": 0, "clip_norm": None, "seed": 0},
        _pretrain_flags, _cmd_pretrain,
    ),
    _Command(
        "finetune", "fine-tune a model on a labeled task",
        {"task": None, "model": "bert", "ckpt": None, "vocab": None,
         "vectors": None, "train": None, "dev": None, "test": None,
         "out": None, "steps": 50, "batch_size": 8, "lr": 1e-3,
         "eval_every": 10, "target_accuracy": None, "hidden": None,
         "dropout": 0.1, "seed": 0},
        _finetune_flags, _cmd_finetune,
    ),
    _Command(
        "grid-search", "search run hyperparameters on dev data",
        {"task": None, "grid": None, "ckpt": None, "vocab": None,
         "train": None, "dev": None, "out": None, "steps": 50,
         "batch_size": 8, "lr": 1e-3, "eval_every": 10, "dropout": 0.1,
         "patience": 3, "target_accuracy": None, "seed": 0},
        _grid_search_flags, _cmd_grid_search,
    ),
    _Command(
        "evaluate", "score predictions against gold data",
        {"task": None, "gold": None, "pred": None, "report": None, "seed": 0},
        _evaluate_flags, _cmd_evaluate,
    ),
    _Command(
        "score-pairs", "pseudo-perplexity scoring and filtering",
        {"ckpt": None, "vocab": None, "in": None, "out": None,
         "keep_fraction": None, "seed": 0},
        _score_pairs_flags, _cmd_score_pairs,
    ),
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hellm",
        description="Desk-scale Greek language-model pipeline.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="COMMAND")
    for command in _COMMANDS:
        p = sub.add_parser(
            command.name, help=command.help, description=command.help
        )
        p.add_argument("--config",
                       help="JSON settings file; explicit flags win "
                            "(default: none)")
        p.add_argument("--seed", type=int,
                       help="root random seed (default: 0)")
        command.flags(p)
        p.set_defaults(_command=command)
    return parser


def run(argv=None) -> int:
    """Parse argv, dispatch, and map errors to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = getattr(args, "_command", None)
    if command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        cfg = _effective_config(command.name, command.defaults, args)
        command.handler(cfg)
    except HellmError as err:
        print(f"hellm {command.name}: error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"hellm {command.name}: error: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
