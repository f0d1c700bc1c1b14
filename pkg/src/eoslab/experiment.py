"""EOS-weight ablation: train per W, decode the test split, score, tabulate.

Output layout of an ablation directory::

    plan.json
    data/{train,val,test}.jsonl
    w-<W>/run/...                      training run directory
    w-<W>/predictions/<decoding>.jsonl
    w-<W>/metrics/<decoding>.json
    w-<W>/timing.json                  training wall-clock time (not reproducible)
    report.csv  report.json  histograms.csv
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import CorpusConfig, DatasetSpec, Sample, build_dataset, gen_synthetic_corpus, write_json_lines, write_jsonl
from .decode import GenerationConfig, generate_ids, truncate_baseline
from .errors import EoslabError
from .loss import LossConfig
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, Transformer, Vocab, config_hash, pack
from .train import TrainConfig, train

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = [
    "schema_version", "eos_weight", "decoding", "strategy", "num_beams", "length_penalty",
    "truncate_at", "rouge1", "rouge2", "rougeL", "rougeLsum", "pct_too_long", "avg_extra_chars",
    "pct_cutoff", "mean_chars", "n_samples", "best_step", "best_val_loss", "status",
    "config_hash", "seed",
]
HISTOGRAM_COLUMNS = ["eos_weight", "decoding", "bin_left", "bin_right", "count"]
TRUNCATE_TO_LIMIT = "limit"


@dataclass
class ExperimentPlan:
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(
        variant="fixed", fixed_char_limit=60, n_train=6000, n_val=300, n_test=300, seed=0))
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(max_marked=6, tail_prob=0.75))
    corpus_size: int = 10000
    corpus_seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(d_model=64, n_heads=4, n_layers=3, max_seq_len=256))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=2e-3, max_steps=3000, eval_every=300))
    eos_weights: list[float] = field(default_factory=lambda: [1.0, 10.0, 100.0])
    generations: list[GenerationConfig] = field(default_factory=lambda: default_generations())
    with_baseline: bool = True
    hist_bin: int = 10
    output_dir: str = "ablation"

    def __post_init__(self):
        if not self.eos_weights:
            raise ValueError("plan needs at least one EOS weight")
        if self.with_baseline and 1.0 not in [float(w) for w in self.eos_weights]:
            self.eos_weights = [1.0] + list(self.eos_weights)
        self.eos_weights = [float(w) for w in self.eos_weights]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        kw = {}
        for key, typ in (("dataset", DatasetSpec), ("corpus", CorpusConfig), ("model", ModelConfig),
                         ("train", TrainConfig)):
            if key in d:
                kw[key] = typ(**d.pop(key))
        if "generations" in d:
            kw["generations"] = [GenerationConfig(**g) for g in d.pop("generations")]
        kw.update(d)
        return cls(**kw)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)


def default_generations(max_new_tokens: int = 120) -> list[GenerationConfig]:
    return [
        GenerationConfig("greedy", 1, 0.0, max_new_tokens),
        GenerationConfig("greedy", 1, 0.0, max_new_tokens, truncate_at_chars=TRUNCATE_TO_LIMIT),
        GenerationConfig("beam", 5, -1.0, max_new_tokens),
        GenerationConfig("beam", 5, 0.0, max_new_tokens),
        GenerationConfig("beam", 5, 1.0, max_new_tokens),
    ]


def weight_tag(w: float) -> str:
    return f"w-{w:g}"


def check_fits(model_cfg: ModelConfig, vocab: Vocab, samples: list[Sample]):
    longest = max(len(pack(vocab, s.source, s.reference)[0]) for s in samples)
    if longest > model_cfg.max_seq_len:
        raise ValueError(f"max_seq_len={model_cfg.max_seq_len} is shorter than the longest packed sample ({longest})")


def generate_predictions(model: Transformer, vocab: Vocab, samples: list[Sample],
                         cfg: GenerationConfig) -> list[dict]:
    """Decode every sample; returns JSON-ready rows keyed by sample id."""
    rows = []
    for s in samples:
        prompt, _ = pack(vocab, s.source)
        room = model.config.max_seq_len - len(prompt)
        step_cfg = cfg
        if room < cfg.max_new_tokens:
            step_cfg = GenerationConfig(**{**asdict(cfg), "max_new_tokens": max(1, room)})
        out = generate_ids(model, prompt, step_cfg)
        text = vocab.decode(out.ids)
        limit = cfg.truncate_at_chars
        if limit == TRUNCATE_TO_LIMIT:
            limit = s.char_limit
        if limit is not None:
            text = truncate_baseline(text, int(limit))
        row = {"id": s.id, "prediction": text, "n_tokens": len(out.ids)}
        if s.char_limit is not None:
            row["char_limit"] = s.char_limit
        rows.append(row)
    return rows


def length_histogram(lengths, bin_width: int, upper: int):
    edges = np.arange(0, max(upper, max(lengths, default=0)) + bin_width + 1, bin_width)
    counts, edges = np.histogram(lengths, bins=edges)
    return edges, counts


def run_ablation(plan: ExperimentPlan, out_dir=None) -> list[dict]:
    out = Path(out_dir or plan.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    vocab = Vocab()
    corpus = gen_synthetic_corpus(plan.corpus_seed, plan.corpus_size, config=plan.corpus)
    dataset = build_dataset(corpus, plan.dataset)
    for name, split in dataset.splits().items():
        write_jsonl(out / "data" / f"{name}.jsonl", split)
    check_fits(plan.model, vocab, dataset.train + dataset.val + dataset.test)

    for w in plan.eos_weights:
        cell = out / weight_tag(w)
        status_path = cell / "status.json"
        cell.mkdir(parents=True, exist_ok=True)
        try:
            model = Transformer(plan.model, dtype=plan.train.precision)
            t0 = time.perf_counter()
            result = train(model, dataset, plan.train, LossConfig(w), vocab, cell / "run")
            # wall-clock time lives apart from the byte-reproducible outputs
            (cell / "timing.json").write_text(json.dumps({"train_seconds": time.perf_counter() - t0}) + "\n")
            status = {"status": "ok", "best_step": result.best.step,
                      "best_val_loss": result.best.val_loss, "config_hash": result.best.config_hash}
        except EoslabError as exc:
            log.error("training failed for W=%g: %s", w, exc)
            status_path.write_text(json.dumps({"status": f"error: {exc}"}, sort_keys=True) + "\n")
            continue
        status_path.write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")
        for gen in plan.generations:
            try:
                rows = generate_predictions(model, vocab, dataset.test, gen)
                write_json_lines(cell / "predictions" / f"{gen.label}.jsonl", rows)
                report = evaluate([r["prediction"] for r in rows], [s.reference for s in dataset.test],
                                  [s.char_limit for s in dataset.test])
                payload = {"status": "ok", **report.to_dict()}
            except EoslabError as exc:
                log.error("decoding %s failed for W=%g: %s", gen.label, w, exc)
                payload = {"status": f"error: {exc}"}
            (cell / "metrics").mkdir(exist_ok=True)
            (cell / "metrics" / f"{gen.label}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return build_report(out)


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 6))
    return "" if v is None else str(v)


def report_row(eos_weight, gen: GenerationConfig | None, metrics: dict | None, status: dict,
               plan_hash: str, seed: int, mean_chars=None) -> dict:
    m = metrics or {}
    gen = gen or GenerationConfig()
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "eos_weight": eos_weight,
        "decoding": gen.label,
        "strategy": gen.strategy,
        "num_beams": gen.num_beams,
        "length_penalty": gen.length_penalty,
        "truncate_at": gen.truncate_at_chars,
        **{k: m.get(k) for k in ("rouge1", "rouge2", "rougeL", "rougeLsum", "pct_too_long",
                                 "avg_extra_chars", "pct_cutoff", "n_samples")},
        "mean_chars": mean_chars,
        "best_step": status.get("best_step"),
        "best_val_loss": status.get("best_val_loss"),
        "status": m.get("status", status.get("status")),
        "config_hash": f"{plan_hash}/{status.get('config_hash', '')}",
        "seed": seed,
    }


def write_report_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in REPORT_COLUMNS})


def build_report(out_dir) -> list[dict]:
    """(Re)build report.csv, report.json and histograms.csv from an ablation directory."""
    out = Path(out_dir)
    plan = ExperimentPlan.from_dict(json.loads((out / "plan.json").read_text()))
    plan_hash = plan.hash()
    seed = plan.train.seed
    rows, hist_rows = [], []
    upper = max(g.max_new_tokens for g in plan.generations)
    for w in plan.eos_weights:
        cell = out / weight_tag(w)
        status_path = cell / "status.json"
        status = json.loads(status_path.read_text()) if status_path.exists() else {"status": "missing"}
        if status.get("status") != "ok":
            rows.append(report_row(w, None, None, status, plan_hash, seed))
            continue
        for gen in plan.generations:
            mpath = cell / "metrics" / f"{gen.label}.json"
            metrics = json.loads(mpath.read_text()) if mpath.exists() else {"status": "missing"}
            ppath = cell / "predictions" / f"{gen.label}.jsonl"
            mean_chars = None
            if ppath.exists():
                lengths = [len(json.loads(line)["prediction"]) for line in ppath.read_text(encoding="utf-8").splitlines() if line]
                mean_chars = float(np.mean(lengths)) if lengths else 0.0
                edges, counts = length_histogram(lengths, plan.hist_bin, upper)
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    hist_rows.append({"eos_weight": w, "decoding": gen.label, "bin_left": int(lo),
                                      "bin_right": int(hi), "count": int(c)})
            rows.append(report_row(w, gen, metrics, status, plan_hash, seed, mean_chars))
    write_report_csv(out / "report.csv", rows)
    with open(out / "histograms.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, HISTOGRAM_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerows({k: _fmt(v) for k, v in r.items()} for r in hist_rows)
    (out / "report.json").write_text(json.dumps(
        {"schema_version": REPORT_SCHEMA_VERSION, "plan_hash": plan_hash, "rows": rows},
        indent=2, sort_keys=True) + "\n")
    return rows


def markdown_table(rows: list[dict]) -> str:
    cols = ["eos_weight", "decoding", "rouge2", "rougeL", "pct_too_long", "avg_extra_chars", "pct_cutoff", "mean_chars", "status"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:.2f}" if isinstance(v, float) else ("" if v is None else str(v)))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def metrics_from_rows(rows) -> MetricsReport:
    return MetricsReport(**{k: rows[k] for k in MetricsReport.__dataclass_fields__})
