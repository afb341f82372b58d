"""Stage-by-stage pipeline runner.

Every stage reads its inputs from disk, writes its artifacts under the output
directory and records a stage manifest with content hashes of inputs and
outputs. A stage whose inputs (and settings) hash the same as last time, and
whose outputs are intact, is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import corpus as corpus_mod
from . import model as model_mod
from . import normalize as norm
from . import plotting, tokenizer as tok, trace, verdict
from .config import PipelineConfig
from .synth import generate_synthetic_corpus

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "normalize", "corpus", "tokenizer", "model", "classify", "svm", "evaluate")


class StageError(RuntimeError):
    """A stage failed; carries the stage name, its input hash and the cause."""

    def __init__(self, stage: str, input_hash: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (input {input_hash[:12]}): {cause}")
        self.stage = stage
        self.input_hash = input_hash
        self.cause = cause


class LeakageError(model_mod.ContractViolation):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.ran: list[str] = []
        self.skipped: list[str] = []

    # -- paths ----------------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    @property
    def mode(self) -> norm.NormalizationMode:
        return norm.NormalizationMode(self.config.style, self.config.address_threshold)

    def manifest_path(self) -> Path:
        if self.config.synthetic is not None:
            return self.path("synth", "manifest.json")
        return Path(self.config.manifest)

    def load_manifest(self) -> trace.CorpusManifest:
        return trace.CorpusManifest.load(self.manifest_path())

    def _rel(self, p: Path) -> str:
        try:
            return Path(p).relative_to(self.out).as_posix()
        except ValueError:
            return str(p)

    # -- stage bookkeeping ----------------------------------------------------

    def _stage_table(self) -> dict[str, tuple[Callable, Callable, Callable]]:
        return {
            "synth": (self._synth_inputs, self._synth_params, self._run_synth),
            "ingest": (self._trace_inputs, lambda: {}, self._run_ingest),
            "normalize": (self._normalize_inputs, self._normalize_params, self._run_normalize),
            "corpus": (lambda: [self.path("normalize", "train.txt"), self.path("normalize", "train.txt.jsonl"),
                                self.path("ingest", "instruction_freqs.json"), self.path("ingest", "samples.json")],
                       lambda: {"stats_max_len": self.config.stats_max_len}, self._run_corpus),
            "tokenizer": (lambda: [self.path("corpus", "train_corpus.jsonl")],
                          lambda: {**asdict(self.config.tokenizer), "stats_max_len": self.config.stats_max_len},
                          self._run_tokenizer),
            "model": (lambda: [self.path("tokenizer", "tokenizer.json"), self.path("corpus", "train_corpus.jsonl"),
                               self.path("normalize", "validation.txt"),
                               self.path("normalize", "validation.txt.jsonl")],
                      lambda: {"model": asdict(self.config.model), "training": asdict(self.config.training),
                               "seed": self.config.stage_seed("model")},
                      self._run_model),
            "classify": (lambda: [self.path("model", "checkpoint.bin"), self.path("tokenizer", "tokenizer.json"),
                                  self.path("corpus", "train_corpus.jsonl"), self.path("ingest", "samples.json")]
                         + [self.path("normalize", f"{s}.txt{ext}") for s in ("validation", "test")
                            for ext in ("", ".jsonl")],
                         lambda: {}, self._run_classify),
            "svm": (lambda: [self.path("classify", "sample_features.jsonl")],
                    lambda: {**asdict(self.config.svm), "seed": self.config.stage_seed("svm")}, self._run_svm),
            "evaluate": (lambda: [self.path("svm", "hyperplane.json"), self.path("classify", "sample_features.jsonl"),
                                  self.path("classify", "test_functions.jsonl")] + self._trace_inputs(),
                         lambda: {"style": self.config.style, "address_threshold": self.config.address_threshold,
                                  "min_len": self.config.min_len},
                         self._run_evaluate),
        }

    def input_hash(self, stage: str) -> tuple[str, dict[str, str]]:
        inputs_fn, params_fn, _ = self._stage_table()[stage]
        files = {self._rel(p): file_sha256(p) for p in inputs_fn()}
        doc = json.dumps({"stage": stage, "inputs": files, "params": params_fn()}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest(), files

    def _stage_manifest(self, stage: str) -> Path:
        return self.path("manifests", f"{stage}.json")

    def _up_to_date(self, stage: str, in_hash: str) -> bool:
        mpath = self._stage_manifest(stage)
        if not mpath.exists():
            return False
        rec = json.loads(mpath.read_text(encoding="utf-8"))
        if rec.get("input_hash") != in_hash:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            p = self.out / rel
            if not p.exists() or file_sha256(p) != digest:
                return False
        return True

    def run_stage(self, stage: str) -> None:
        _, _, run = self._stage_table()[stage]
        in_hash = ""
        try:
            in_hash, files = self.input_hash(stage)
            if self._up_to_date(stage, in_hash):
                logger.info("stage %s: inputs unchanged, skipping", stage)
                self.skipped.append(stage)
                return
            logger.info("stage %s: running", stage)
            self.path(stage).mkdir(parents=True, exist_ok=True)
            outputs = run()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, in_hash, exc) from exc
        self.path("manifests").mkdir(parents=True, exist_ok=True)
        _dump_json(self._stage_manifest(stage), {
            "stage": stage, "input_hash": in_hash, "inputs": files,
            "outputs": {self._rel(p): file_sha256(p) for p in sorted(outputs)}})
        self.ran.append(stage)

    def stages_until(self, last: str) -> list[str]:
        if last not in STAGES:
            raise ValueError(f"unknown stage {last!r}")
        chain = STAGES[:STAGES.index(last) + 1]
        if self.config.synthetic is None:
            chain = tuple(s for s in chain if s != "synth")
        return list(chain)

    def run(self, until: str = "evaluate") -> "Pipeline":
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.save(self.path("config.json"))
        for stage in self.stages_until(until):
            self.run_stage(stage)
        return self

    # -- synth ----------------------------------------------------------------

    def _synth_spec(self):
        return replace(self.config.synthetic, seed=self.config.stage_seed("synth"))

    def _synth_inputs(self) -> list[Path]:
        return []

    def _synth_params(self) -> dict:
        return self._synth_spec().to_dict()

    def _run_synth(self) -> list[Path]:
        out = self.path("synth")
        generate_synthetic_corpus(self._synth_spec(), out)
        return [out / "manifest.json", out / "generator_log.json"]

    # -- ingest ---------------------------------------------------------------

    def _trace_inputs(self) -> list[Path]:
        m = self.load_manifest()
        return [self.manifest_path()] + sorted(Path(e.path) for e in m.entries)

    def _run_ingest(self) -> list[Path]:
        manifest = self.load_manifest()
        samples = []
        counts: Counter = Counter()
        for e in sorted(manifest.entries, key=lambda e: e.sample_id):
            s = trace.load_sample(e.path, e.label, e.family, e.sample_id)
            counts.update(ins.text() for ins in s.instructions)
            samples.append({"sample_id": e.sample_id, "label": e.label, "family": e.family,
                            "split": e.split, "path": e.path, "n_instructions": len(s.instructions),
                            "n_parse_errors": len(s.errors)})
            for err in s.errors:
                logger.warning("%s:%d: %s", e.path, err.line_no, err.reason)
        freqs = dict(sorted(counts.items()))
        out = self.path("ingest")
        _dump_json(out / "samples.json", samples)
        _dump_json(out / "instruction_freqs.json", freqs)
        summary = {"n_samples": len(samples),
                   "n_instructions": sum(s["n_instructions"] for s in samples),
                   "n_unique_instructions": len(freqs),
                   "n_unique_freq_over_10": corpus_mod.count_frequent(freqs, 10),
                   "n_parse_errors": sum(s["n_parse_errors"] for s in samples),
                   "by_split": {sp: sum(1 for s in samples if s["split"] == sp) for sp in trace.SPLITS}}
        _dump_json(out / "summary.json", summary)
        return [out / "samples.json", out / "instruction_freqs.json", out / "summary.json"]

    # -- normalize ------------------------------------------------------------

    def _normalize_inputs(self) -> list[Path]:
        return [self.path("ingest", "samples.json")] + self._trace_inputs()[1:]

    def _normalize_params(self) -> dict:
        return {"style": self.config.style, "address_threshold": self.config.address_threshold,
                "min_len": self.config.min_len}

    def samples(self) -> list[dict]:
        return json.loads(self.path("ingest", "samples.json").read_text(encoding="utf-8"))

    def _run_normalize(self) -> list[Path]:
        by_split: dict[str, list[norm.NormalizedFunction]] = {s: [] for s in trace.SPLITS}
        counts = {}
        for rec in self.samples():
            s = trace.load_sample(rec["path"], rec["label"], rec["family"], rec["sample_id"])
            segs = norm.segment_functions(s, self.mode)
            kept = norm.filter_short(segs, self.config.min_len)
            by_split[rec["split"]].extend(kept)
            counts[rec["sample_id"]] = {"segmented": len(segs), "kept": len(kept)}
        out = self.path("normalize")
        outputs = []
        for split, funcs in by_split.items():
            sidecar = norm.write_functions(out / f"{split}.txt", funcs)
            outputs += [out / f"{split}.txt", sidecar]
        _dump_json(out / "counts.json", counts)
        return outputs + [out / "counts.json"]

    def functions(self, split: str) -> list[norm.NormalizedFunction]:
        return norm.read_functions(self.path("normalize", f"{split}.txt"))

    # -- corpus ---------------------------------------------------------------

    def _run_corpus(self) -> list[Path]:
        n_train = sum(1 for s in self.samples() if s["split"] == "train")
        lc = corpus_mod.build_labeled_corpus(self.functions("train"), max_len=self.config.stats_max_len,
                                             n_binaries=n_train)
        out = self.path("corpus")
        corpus_mod.write_stats(out / "stats.json", lc.stats)
        _write_jsonl(out / "train_corpus.jsonl", ({"text": t, "label": y} for t, y in lc.examples()))
        _dump_json(out / "filtering.json", {"shared_removed": lc.n_shared_removed,
                                             "benign": len(lc.benign), "malicious": len(lc.malicious)})
        freqs = json.loads(self.path("ingest", "instruction_freqs.json").read_text(encoding="utf-8"))
        series = corpus_mod.zipf_rank_frequency(freqs)
        outputs = [out / "stats.json", out / "train_corpus.jsonl", out / "filtering.json", out / "zipf.csv"]
        try:
            fit = corpus_mod.fit_power_law(series)
        except corpus_mod.InsufficientDataError as exc:
            logger.warning("zipf fit skipped: %s", exc)
            fit = None
        corpus_mod.write_zipf(out / "zipf.csv", series, fit, out / "zipf_fit.json")
        if fit is not None:
            outputs.append(out / "zipf_fit.json")
        if len(series):
            plotting.zipf_figure(out / "zipf.png", series, fit)
        return outputs

    def train_examples(self) -> list[tuple[str, int]]:
        return [(r["text"], r["label"]) for r in _read_jsonl(self.path("corpus", "train_corpus.jsonl"))]

    # -- tokenizer ------------------------------------------------------------

    def _run_tokenizer(self) -> list[Path]:
        texts = [t for t, _ in self.train_examples()]
        ts = self.config.tokenizer
        model = tok.train_tokenizer(texts, ts.vocab_size, ts.punctuation_split)
        out = self.path("tokenizer")
        model.save(out / "tokenizer.json")
        budget = self.config.stats_max_len
        lengths = [len(model.tokenize(t)) + 2 for t in texts]
        over = sum(1 for n in lengths if n > budget)
        _dump_json(out / "token_stats.json", {
            "vocab_size": len(model.vocab), "fragmentation_rate": round(tok.fragmentation_rate(model, texts), 6),
            f"pct_over_{budget}_tokens": round(100.0 * over / len(lengths), 4) if lengths else 0.0,
            "max_tokens": max(lengths, default=0)})
        return [out / "tokenizer.json", out / "token_stats.json"]

    def tokenizer(self) -> tok.TokenizerModel:
        return tok.TokenizerModel.load(self.path("tokenizer", "tokenizer.json"))

    # -- model ----------------------------------------------------------------

    def validation_functions(self, training_union: set[str]) -> list[tuple[str, int]]:
        """Deduplicated validation functions unseen in training, minus cross-label texts."""
        labels: dict[str, set[int]] = {}
        for f in self.functions("validation"):
            if f.text not in training_union:
                labels.setdefault(f.text, set()).add(1 if f.label == "malicious" else 0)
        return sorted((t, next(iter(ys))) for t, ys in labels.items() if len(ys) == 1)

    def _run_model(self) -> list[Path]:
        examples = self.train_examples()
        union = {t for t, _ in examples}
        val = self.validation_functions(union)
        tk = self.tokenizer()
        ms = self.config.model
        cfg = model_mod.ModelConfig(vocab_size=len(tk.vocab), n_layers=ms.n_layers, hidden=ms.hidden,
                                    n_heads=ms.n_heads, ffn=ms.ffn, max_len=ms.max_len,
                                    attention=ms.attention, pooling=ms.pooling, dropout=ms.dropout,
                                    seed=self.config.stage_seed("model"))
        m = model_mod.init_model(cfg)
        x = tk.encode_batch([t for t, _ in examples], cfg.max_len)
        y = np.array([lab for _, lab in examples], dtype=np.int64)
        vx = tk.encode_batch([t for t, _ in val], cfg.max_len) if val else None
        vy = np.array([lab for _, lab in val], dtype=np.int64) if val else None
        ts = self.config.training
        report = model_mod.train(m, x, y, vx, vy, epochs=ts.epochs, batch_size=ts.batch_size, lr=ts.lr)
        out = self.path("model")
        model_mod.save_checkpoint(m, out / "checkpoint.bin")
        _dump_json(out / "training_report.json", {**report.to_dict(), "n_train": len(examples),
                                                   "n_validation": len(val)})
        return [out / "checkpoint.bin", out / "training_report.json"]

    # -- classify -------------------------------------------------------------

    def _run_classify(self) -> list[Path]:
        union = {t for t, _ in self.train_examples()}
        m = model_mod.load_checkpoint(self.path("model", "checkpoint.bin"))
        tk = self.tokenizer()
        samples = [s for s in self.samples() if s["split"] in ("validation", "test")]
        per_sample: dict[str, list[str]] = {s["sample_id"]: [] for s in samples}
        for split in ("validation", "test"):
            for f in self.functions(split):
                per_sample[f.sample_id].append(f.text)
        kept = {sid: corpus_mod.remove_leakage(texts, union) for sid, texts in per_sample.items()}

        distinct = sorted({t for texts in kept.values() for t in texts})
        verdicts: dict[str, model_mod.FunctionVerdict] = {}
        if distinct:
            logits, probs = model_mod.predict(m, tk.encode_batch(distinct, m.config.max_len))
            for t, l, p in zip(distinct, logits, probs):
                verdicts[t] = model_mod.verdict_from_probs(l, p)

        out = self.path("classify")
        features, rows = [], {"validation": [], "test": []}
        for s in samples:
            sid = s["sample_id"]
            texts = kept[sid]
            f = verdict.aggregate_sample([verdicts[t] for t in texts], sid)
            features.append({"sample_id": sid, "split": s["split"], "family": s["family"], "truth": s["label"],
                             "n_functions": f.n_functions, "malicious_count": f.malicious_count,
                             "n_removed": len(per_sample[sid]) - len(texts)})
            for i, t in enumerate(texts):
                v = verdicts[t]
                rows[s["split"]].append({"sample_id": sid, "position": i, "text": t, "label": v.label,
                                         "probability": round(v.probability, 9)})
        _write_jsonl(out / "sample_features.jsonl", features)
        for split, r in rows.items():
            _write_jsonl(out / f"{split}_functions.jsonl", r)
        return [out / "sample_features.jsonl", out / "validation_functions.jsonl", out / "test_functions.jsonl"]

    def sample_features(self, split: str) -> list[tuple[dict, verdict.SampleFeatures]]:
        out = []
        for r in _read_jsonl(self.path("classify", "sample_features.jsonl")):
            if r["split"] == split:
                n, k = r["n_functions"], r["malicious_count"]
                out.append((r, verdict.SampleFeatures(r["sample_id"], n, k, 100.0 * k / n if n else 0.0,
                                                      verdict.size_class(n))))
        return out

    # -- svm ------------------------------------------------------------------

    def _run_svm(self) -> list[Path]:
        rows = [(r, f) for r, f in self.sample_features("validation") if not f.degenerate]
        if not rows:
            raise ValueError("no validation sample kept any function; cannot fit the SVM")
        ss = self.config.svm
        h = verdict.fit_svm([f for _, f in rows], [r["truth"] for r, _ in rows], C=ss.C, epochs=ss.epochs,
                            seed=self.config.stage_seed("svm"))
        out = self.path("svm")
        _dump_json(out / "hyperplane.json", h.to_dict())
        return [out / "hyperplane.json"]

    def hyperplane(self) -> verdict.Hyperplane:
        return verdict.Hyperplane.from_dict(json.loads(self.path("svm", "hyperplane.json").read_text()))

    # -- evaluate -------------------------------------------------------------

    def leakage_audit(self) -> dict:
        """Re-derive the training function set straight from the train traces
        and check that no classified test function is in it."""
        train_texts = set()
        for e in self.load_manifest().by_split("train"):
            s = trace.load_sample(e.path, e.label, e.family, e.sample_id)
            for f in norm.segment_functions(s, self.mode):
                if f.n_instructions >= self.config.min_len:
                    train_texts.add(f.text)
        test_texts = {r["text"] for r in _read_jsonl(self.path("classify", "test_functions.jsonl"))}
        leaked = sorted(test_texts & train_texts)
        return {"n_train_functions": len(train_texts), "n_test_functions": len(test_texts),
                "n_leaked": len(leaked), "leaked": leaked[:20], "passed": not leaked}

    def _records(self, split: str, h: verdict.Hyperplane) -> list[dict]:
        recs = []
        for r, f in self.sample_features(split):
            v, margin = verdict.classify_sample(h, f)
            recs.append(verdict.verdict_record(f, r["family"], v, margin, r["truth"]))
        return recs

    def _run_evaluate(self) -> list[Path]:
        out = self.path("evaluate")
        audit = self.leakage_audit()
        _dump_json(out / "leakage_audit.json", audit)
        if not audit["passed"]:
            raise LeakageError(f"{audit['n_leaked']} test functions also occur in training")
        h = self.hyperplane()
        report = {}
        for split in ("validation", "test"):
            recs = self._records(split, h)
            scored = [r for r in recs if r["verdict"] != verdict.INDETERMINATE]
            m = verdict.compute_metrics([r["verdict"] for r in scored], [r["truth"] for r in scored])
            report[split] = {**m.to_dict(), "n_samples": len(recs),
                             "indeterminate": [r["sample_id"] for r in recs if r["verdict"] == verdict.INDETERMINATE]}
            if split == "test":
                verdict.write_verdicts(out / "verdicts.jsonl", recs)
                verdict.write_plot_data(out / "plot_data.csv", out / "boundary.json", recs, h)
            plotting.bubble_figure(out / f"bubble_{split}.png", recs, h, title=f"{split} samples")
        _dump_json(out / "metrics.json", report)
        return [out / "leakage_audit.json", out / "verdicts.jsonl", out / "plot_data.csv",
                out / "boundary.json", out / "metrics.json"]

    def metrics(self) -> dict:
        return json.loads(self.path("evaluate", "metrics.json").read_text(encoding="utf-8"))


def run_pipeline(config: PipelineConfig, until: str = "evaluate") -> Pipeline:
    return Pipeline(config).run(until)
