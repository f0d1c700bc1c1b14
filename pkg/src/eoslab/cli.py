"""Command-line entry point: gen-data, train, generate, evaluate, ablate, report.

Every flag can also come from ``--config FILE`` (TOML or JSON). Keys may sit at
the top level or under a table named after the subcommand; explicit flags win.
Relative output paths are resolved under ``$EOSLAB_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import experiment as X
from .data import (CorpusConfig, DatasetSpec, build_dataset, gen_synthetic_corpus, iter_json_lines, read_jsonl,
                   write_json_lines, write_jsonl)
from .decode import GenerationConfig
from .errors import AlignmentError, DivergenceError, EoslabError, InsufficientDataError, ParseError
from .loss import LossConfig
from .metrics import evaluate
from .model import ModelConfig, Transformer, Vocab, load_checkpoint
from .train import TrainConfig, train

log = logging.getLogger("eoslab")

EXIT_OK, EXIT_DATA, EXIT_DIVERGED, EXIT_ALIGNMENT = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "EOSLAB_OUTPUT_ROOT"


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config_file(path) -> dict:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _truncate_arg(text):
    if text is None or text == X.TRUNCATE_TO_LIMIT:
        return text
    return int(text)


# -- flag groups -------------------------------------------------------------

def add_data_flags(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--variant", choices=["fixed", "dynamic"], default="fixed")
    g.add_argument("--limit", type=int, default=250, help="character limit for the fixed variant")
    g.add_argument("--k-start", type=int, default=50)
    g.add_argument("--k-stop", type=int, default=800)
    g.add_argument("--k-step", type=int, default=50)
    g.add_argument("--n-train", type=int, default=10_000)
    g.add_argument("--n-val", type=int, default=500)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corpus-size", type=int, default=None, help="default: twice the requested split total")
    g.add_argument("--noise-items", type=int, default=3)
    g.add_argument("--tail-prob", type=float, default=0.6)
    g.add_argument("--min-marked", type=int, default=1)
    g.add_argument("--max-marked", type=int, default=48)
    g.add_argument("--min-sentences", type=int, default=1)


def add_model_flags(p):
    g = p.add_argument_group("model")
    d = ModelConfig()
    g.add_argument("--d-model", type=int, default=d.d_model)
    g.add_argument("--n-heads", type=int, default=d.n_heads)
    g.add_argument("--n-layers", type=int, default=d.n_layers)
    g.add_argument("--ff-mult", type=int, default=d.ff_mult)
    g.add_argument("--max-seq-len", type=int, default=d.max_seq_len)
    g.add_argument("--dropout", type=float, default=d.dropout_rate)
    g.add_argument("--model-seed", type=int, default=d.seed)


def add_train_flags(p):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--lr", type=float, default=d.base_lr)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--schedule", choices=["linear", "cosine"], default=d.schedule)
    g.add_argument("--max-steps", type=int, default=d.max_steps)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--eval-every", type=int, default=d.eval_every)
    g.add_argument("--train-seed", type=int, default=d.seed)
    g.add_argument("--precision", choices=["single", "double"], default=d.precision)


def add_gen_flags(p):
    g = p.add_argument_group("generation")
    g.add_argument("--strategy", choices=["greedy", "beam"], default="greedy")
    g.add_argument("--num-beams", type=int, default=5)
    g.add_argument("--length-penalty", type=float, default=0.0)
    g.add_argument("--max-new-tokens", type=int, default=256)
    g.add_argument("--truncate-at", type=_truncate_arg, default=None,
                   help="truncate outputs at N characters, or 'limit' for each sample's char_limit")
    g.add_argument("--suppress-eos", action="store_true")


def dataset_spec(a) -> DatasetSpec:
    return DatasetSpec(a.variant, a.limit, a.k_start, a.k_stop, a.k_step, a.n_train, a.n_val, a.n_test, a.seed)


def corpus_config(a) -> CorpusConfig:
    return CorpusConfig(a.min_marked, a.max_marked, 1, a.noise_items, a.tail_prob, a.min_sentences)


def model_config(a) -> ModelConfig:
    return ModelConfig(a.d_model, a.n_heads, a.n_layers, a.ff_mult, a.max_seq_len, dropout_rate=a.dropout,
                       seed=a.model_seed)


def train_config(a) -> TrainConfig:
    return TrainConfig(a.lr, a.weight_decay, a.schedule, a.max_steps, a.batch_size, a.eval_every, a.train_seed,
                       a.precision)


def gen_config(a) -> GenerationConfig:
    beams = a.num_beams if a.strategy == "beam" else 1
    return GenerationConfig(a.strategy, beams, a.length_penalty, a.max_new_tokens, a.truncate_at, a.suppress_eos)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(a) -> int:
    spec = dataset_spec(a)
    size = a.corpus_size or 2 * (spec.n_train + spec.n_val + spec.n_test)
    corpus = gen_synthetic_corpus(spec.seed, size, config=corpus_config(a))
    ds = build_dataset(corpus, spec)
    out = output_path(a.out)
    for name, split in ds.splits().items():
        write_jsonl(out / f"{name}.jsonl", split)
    meta = {"spec": asdict(spec), "corpus": asdict(corpus_config(a)), "corpus_size": size, "dropped": ds.dropped}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .data import Dataset

    data = Path(a.data)
    ds = Dataset(read_jsonl(data / "train.jsonl"), read_jsonl(data / "val.jsonl"), [])
    vocab = Vocab()
    mcfg = model_config(a)
    X.check_fits(mcfg, vocab, ds.train + ds.val)
    model = Transformer(mcfg, dtype=a.precision)
    out = output_path(a.out)
    result = train(model, ds, train_config(a), LossConfig(a.eos_weight), vocab, out)
    print(f"best step {result.best.step} val_loss {result.best.val_loss:.6f} -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_generate(a) -> int:
    model, vocab, _ = load_checkpoint(a.model)
    samples = read_jsonl(a.input)
    rows = X.generate_predictions(model, vocab, samples, gen_config(a))
    write_json_lines(output_path(a.out), rows)
    print(f"wrote {len(rows)} predictions to {output_path(a.out)}")
    return EXIT_OK


def _read_predictions(path) -> dict:
    preds = {}
    for line_no, obj in iter_json_lines(path):
        if "id" not in obj or "prediction" not in obj:
            raise ParseError(line_no, "prediction rows need 'id' and 'prediction'")
        preds[str(obj["id"])] = obj["prediction"]
    return preds


def cmd_evaluate(a) -> int:
    preds = _read_predictions(a.predictions)
    refs = read_jsonl(a.references)
    ref_ids = {s.id for s in refs}
    if set(preds) != ref_ids:
        raise AlignmentError(ref_ids - set(preds), set(preds) - ref_ids)
    limits = [a.limit if a.limit is not None else s.char_limit for s in refs]
    report = evaluate([preds[s.id] for s in refs], [s.reference for s in refs], limits)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if a.out:
        output_path(a.out).parent.mkdir(parents=True, exist_ok=True)
        output_path(a.out).write_text(payload + "\n")
    row = X.report_row(None, None, {**report.to_dict(), "status": "ok"}, {}, "", None)
    row["decoding"] = Path(a.predictions).stem
    buf = io.StringIO()
    w = csv.DictWriter(buf, X.REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerow({k: X._fmt(row.get(k)) for k in X.REPORT_COLUMNS})
    if a.csv:
        output_path(a.csv).write_text(buf.getvalue())
    print(payload)
    return EXIT_OK


def plan_from_args(a) -> X.ExperimentPlan:
    cfg = getattr(a, "_config", {}) or {}
    plan_dict = cfg.get("plan") if isinstance(cfg.get("plan"), dict) else None
    plan = X.ExperimentPlan.from_dict(plan_dict) if plan_dict else X.ExperimentPlan()
    if a.eos_weights is not None:
        plan.eos_weights = _floats(a.eos_weights)
    if a.max_steps is not None:
        plan.train.max_steps = a.max_steps
    if a.eval_every is not None:
        plan.train.eval_every = a.eval_every
    if a.n_train is not None:
        plan.dataset.n_train = a.n_train
    if a.n_test is not None:
        plan.dataset.n_test = a.n_test
    plan.with_baseline = a.with_baseline
    plan.__post_init__()
    plan.train.__post_init__()
    plan.output_dir = str(output_path(a.out))
    return plan


def cmd_ablate(a) -> int:
    plan = plan_from_args(a)
    rows = X.run_ablation(plan, plan.output_dir)
    print(X.markdown_table(rows))
    return EXIT_OK


def cmd_report(a) -> int:
    rows = X.build_report(output_path(a.dir))
    print(X.markdown_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eoslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/val/test JSONL for the fixed or dynamic variant")
    p.add_argument("--config")
    add_data_flags(p)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model with a given EOS weight")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory with train.jsonl and val.jsonl")
    p.add_argument("--out", default="run")
    p.add_argument("--eos-weight", type=float, default=1.0)
    add_model_flags(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a JSONL file with a trained model")
    p.add_argument("--config")
    p.add_argument("--model", required=True, help="checkpoint, best.ckpt pointer, or run directory")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="predictions.jsonl")
    add_gen_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--config")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--limit", type=int, default=None, help="override every sample's char_limit")
    p.add_argument("--out", default=None, help="write the metrics JSON here")
    p.add_argument("--csv", default=None, help="write a report-compatible CSV row here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate one model per EOS weight")
    p.add_argument("--config", help="TOML/JSON; a [plan] table holds the full experiment plan")
    p.add_argument("--out", default="ablation")
    p.add_argument("--eos-weights", default=None, help="comma-separated, e.g. 1,10,100")
    p.add_argument("--with-baseline", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="rebuild report tables and histogram data from an ablation directory")
    p.add_argument("--config")
    p.add_argument("--dir", default="ablation")
    p.set_defaults(func=cmd_report)
    return parser


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = load_config_file(args.config)
        section = cfg.get(args.command, {})
        flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        flat.update(section if isinstance(section, dict) else {})
        defaults = {k.replace("-", "_"): v for k, v in flat.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        args._config = cfg
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InsufficientDataError, ParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT
    except EoslabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
