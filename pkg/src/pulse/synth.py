"""Synthetic DBI-style corpora with known ground truth.

Instruction templates are ranked and weighted by a power law. Each template
is either shared by both classes or owned by one class; a class draws
instructions i.i.d. from the templates it can use, so function boundaries
fall wherever a ret/call template is drawn. Every function long enough to
survive the length filter contains at least one class-owned instruction,
which means the only functions common to both classes are the shared
"library" functions, and those are logged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .normalize import CONCATENATED, DEFAULT_MIN_LEN, SPACED, NormalizationMode, normalize_instruction, split_points
from .trace import CorpusManifest, ManifestEntry, parse_trace_line

logger = logging.getLogger(__name__)

SHARED = "shared"
REGS = ("eax", "ebx", "ecx", "edx", "esi", "edi")
ALU = ("mov", "add", "sub", "xor", "and", "or", "cmp", "test", "adc", "sbb")
UNARY = ("inc", "dec", "neg", "not", "push", "pop")
SHIFTS = ("shl", "shr", "sar", "rol", "ror")
JCC = ("jz", "jnz", "jb", "jae", "jbe", "ja", "jl", "jge", "jle", "jg", "js", "jns")
PTR = ("byte", "word", "dword")


@dataclass
class SyntheticSpec:
    n_benign: int = 100
    n_malicious: int = 100
    n_test_benign: int = 20
    n_test_malicious: int = 20
    validation_fraction: float = 0.2
    families_per_class: int = 6
    test_families_per_class: int = 2
    functions_per_sample: tuple[int, int] = (8, 60)
    n_templates: int = 160
    overlap: float = 0.3
    zipf_exponent: float = -1.0
    terminator_every: int = 8
    family_pool_size: int = 80
    family_reuse: float = 0.3
    library_pool: int = 40
    library_rate: float = 0.05
    min_len: int = DEFAULT_MIN_LEN
    max_function_len: int = 60
    seed: int = 0

    def __post_init__(self):
        self.functions_per_sample = tuple(self.functions_per_sample)
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must be in [0, 1)")
        lo, hi = self.functions_per_sample
        if not 1 <= lo <= hi:
            raise ValueError("functions_per_sample must be an increasing pair of positive counts")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["functions_per_sample"] = list(self.functions_per_sample)
        return d


@dataclass
class Template:
    rank: int
    text: str
    weight: float
    owner: str  # "benign", "malicious" or "shared"
    terminator: bool = False


@dataclass
class GeneratorLog:
    templates: list[Template] = field(default_factory=list)
    library: list[str] = field(default_factory=list)
    library_usage: dict[int, dict[str, list[str]]] = field(default_factory=dict)
    instruction_counts: dict[str, int] = field(default_factory=dict)

    def shared_in_both(self, splits=("train",)) -> list[str]:
        """Library functions used by both classes within ``splits``."""
        out = []
        for i, usage in sorted(self.library_usage.items()):
            labels = {lab for split in splits for lab in usage.get(split, [])}
            if labels == {"benign", "malicious"}:
                out.append(self.library[i])
        return out

    def to_dict(self) -> dict:
        return {
            "templates": [asdict(t) for t in self.templates],
            "library": self.library,
            "library_usage": {str(k): v for k, v in sorted(self.library_usage.items())},
            "shared_in_both_train": self.shared_in_both(("train",)),
        }


class _TemplateFactory:
    """Produces distinct instruction texts whose normalized forms are distinct too."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seen_raw: set[str] = set()
        self.seen_norm: set[tuple[str, str]] = set()

    def _operand_mem(self) -> str:
        r = self.rng
        reg = REGS[r.integers(len(REGS))] if r.random() < 0.7 else "ebp"
        disp = int(r.integers(1, 0x80)) * 4
        sign = "-" if reg == "ebp" or r.random() < 0.5 else "+"
        return f"{PTR[r.integers(len(PTR))]} ptr [{reg}{sign}{hex(disp)}]"

    def _imm(self) -> str:
        r = self.rng
        if r.random() < 0.15:
            return hex(int(r.integers(0x10000, 0xFFFFFFFF)))
        return hex(int(r.integers(0, 0x200)))

    def body(self) -> str:
        r = self.rng
        kind = r.random()
        reg = lambda: REGS[r.integers(len(REGS))]
        if kind < 0.45:
            op = ALU[r.integers(len(ALU))]
            form = r.integers(4)
            if form == 0:
                return f"{op} {reg()}, {reg()}"
            if form == 1:
                return f"{op} {reg()}, {self._imm()}"
            if form == 2:
                return f"{op} {reg()}, {self._operand_mem()}"
            return f"{op} {self._operand_mem()}, {reg()}"
        if kind < 0.65:
            op = UNARY[r.integers(len(UNARY))]
            return f"{op} {reg()}" if r.random() < 0.7 else f"{op} {self._operand_mem()}"
        if kind < 0.8:
            return f"{SHIFTS[r.integers(len(SHIFTS))]} {reg()}, {hex(int(r.integers(1, 32)))}"
        if kind < 0.9:
            return f"lea {reg()}, [{reg()}+{hex(int(r.integers(1, 0x100)))}]"
        return f"movzx {reg()}, {PTR[r.integers(2)]} ptr [{reg()}+{reg()}*{(1, 2, 4)[r.integers(3)]}]"

    def terminator(self, i: int) -> str:
        r = self.rng
        if i % 3 == 0:
            return "ret" if i == 0 else f"ret {hex(4 * int(r.integers(1, 16)))}"
        if i % 3 == 1:
            return f"call {hex(int(r.integers(0x70000000, 0x78000000)))}"
        return f"call dword ptr [{REGS[r.integers(len(REGS))]}+{hex(4 * int(r.integers(1, 64)))}]"

    def jump(self) -> str:
        return f"{JCC[self.rng.integers(len(JCC))]} {hex(int(self.rng.integers(0x70000000, 0x78000000)))}"

    def accept(self, text: str, allow_norm_collision: bool = False) -> bool:
        if text in self.seen_raw:
            return False
        ins = parse_trace_line(text)
        norm = (" ".join(normalize_instruction(ins, NormalizationMode(SPACED))),
                " ".join(normalize_instruction(ins, NormalizationMode(CONCATENATED))))
        if norm in self.seen_norm and not allow_norm_collision:
            return False
        self.seen_raw.add(text)
        self.seen_norm.add(norm)
        return True


def build_templates(spec: SyntheticSpec, rng: np.random.Generator) -> list[Template]:
    n = spec.n_templates
    ranks = np.arange(1, n + 1)
    weights = ranks.astype(np.float64) ** spec.zipf_exponent
    weights /= weights.sum()
    factory = _TemplateFactory(rng)
    templates: list[Template] = []
    class_mass = {"benign": 0.0, "malicious": 0.0}
    n_term = n_shared_body = n_body = 0
    for r, w in zip(ranks, weights):
        r = int(r)
        if r % spec.terminator_every == 3 % spec.terminator_every:
            while True:
                text = factory.terminator(n_term)
                # masked call targets normalize alike; terminators are shared anyway
                if factory.accept(text, allow_norm_collision=True):
                    break
            n_term += 1
            templates.append(Template(r, text, float(w), SHARED, terminator=True))
            continue
        if r == 2:
            factory.accept("push ebp")
            templates.append(Template(r, "push ebp", float(w), SHARED))
            continue
        n_body += 1
        share = math.floor(n_body * spec.overlap) > n_shared_body
        if share:
            n_shared_body += 1
        if share and r % 5 == 0:
            while not factory.accept(text := factory.jump(), allow_norm_collision=True):
                pass
            templates.append(Template(r, text, float(w), SHARED))
            continue
        while not factory.accept(text := factory.body()):
            pass
        if share:
            owner = SHARED
        else:
            owner = min(class_mass, key=lambda k: (class_mass[k], k))
            class_mass[owner] += w
        templates.append(Template(r, text, float(w), owner))
    return templates


class _Bag:
    """Stratified draws: a shuffled bag holding each index in proportion to
    its probability, refilled when empty. Frequencies track ``p`` far more
    tightly than independent draws do."""

    def __init__(self, p: np.ndarray, rng: np.random.Generator, size: int | None = None,
                 min_copies: int = 20, max_size: int = 250_000):
        if size is None:
            size = min(int(math.ceil(min_copies / p[p > 0].min())), max_size)
        raw = p * size
        counts = np.floor(raw).astype(np.int64)
        short = size - counts.sum()
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
        self.items = np.repeat(np.arange(len(p)), counts)
        self.rng = rng
        self.pos = len(self.items)

    def next(self) -> int:
        if self.pos >= len(self.items):
            self.rng.shuffle(self.items)
            self.pos = 0
        self.pos += 1
        return int(self.items[self.pos - 1])


class _Cycler:
    """Round-robin over a list in reshuffled order, so reuse is even."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []

    def next(self) -> int:
        if not self.order:
            self.order = self.rng.permutation(self.n).tolist()
        return self.order.pop()


class _ClassSampler:
    def __init__(self, label: str, templates: list[Template], weights: dict[str, float],
                 rng: np.random.Generator, spec: SyntheticSpec):
        self.label = label
        self.rng = rng
        self.spec = spec
        self.items = [t for t in templates if t.owner in (label, SHARED)]
        p = np.array([weights[t.text] for t in self.items])
        self.p = p / p.sum()
        self.exclusive = np.array([t.owner == label for t in self.items])
        self.term = np.array([t.terminator for t in self.items])
        self.parsed = [parse_trace_line(t.text) for t in self.items]
        self.term_idx = np.flatnonzero(self.term)
        self.bag = _Bag(self.p, rng)

    def _draw(self) -> list[int]:
        out: list[int] = []
        while True:
            i = self.bag.next()
            out.append(i)
            if self.term[i]:
                return out
            if len(out) >= self.spec.max_function_len - 1:
                out.append(int(self.term_idx[self.rng.integers(len(self.term_idx))]))
                return out

    def fresh(self) -> list[int]:
        """Draw a function; any span that survives the length filter must hold
        at least one class-owned instruction."""
        while True:
            idx = self._draw()
            if self._distinct(idx):
                return idx

    def _distinct(self, idx: list[int]) -> bool:
        instrs = [self.parsed[i] for i in idx]
        for style in (SPACED, CONCATENATED):
            for a, b in split_points(instrs, style):
                if b - a >= self.spec.min_len and not self.exclusive[idx[a:b]].any():
                    return False
        return True

    def texts(self, idx: list[int]) -> list[str]:
        return [self.items[i].text for i in idx]


def _library(spec: SyntheticSpec, templates: list[Template], rng) -> list[list[str]]:
    size = round(spec.overlap * spec.library_pool)
    body = [t for t in templates if t.owner == SHARED and not t.terminator and t.text != "push ebp"]
    terms = [t for t in templates if t.terminator]
    if size == 0 or not body:
        return []
    p = np.array([t.weight for t in body])
    body_bag = _Bag(p / p.sum(), rng)
    q = np.array([t.weight for t in terms])
    term_bag = _Bag(q / q.sum(), rng)
    out, seen = [], set()
    while len(out) < size:
        n = int(rng.integers(spec.min_len - 1, spec.min_len + 7))
        instrs = [body[body_bag.next()].text for _ in range(n)]
        instrs.append(terms[term_bag.next()].text)
        key = _norm_key(instrs)
        if key in seen:
            continue
        seen.add(key)
        out.append(instrs)
    return out


def class_weights(spec: SyntheticSpec, templates: list[Template],
                  library: list[list[str]]) -> dict[str, dict[str, float]]:
    """Per-class draw weights that make the emitted corpus follow the power law.

    Library functions add instructions to shared templates only, so each
    class draws shared templates at their target weight minus the expected
    library share; owned templates are scaled so each class sums to one.
    """
    w = {t.text: t.weight for t in templates}
    shared = [t for t in templates if t.owner == SHARED]
    S = sum(t.weight for t in shared)
    owned = {lab: sum(t.weight for t in templates if t.owner == lab) for lab in ("benign", "malicious")}
    lib_counts: dict[str, int] = {}
    for f in library:
        for text in f:
            lib_counts[text] = lib_counts.get(text, 0) + 1
    lib_total = sum(lib_counts.values())
    term_mass = sum(t.weight for t in templates if t.terminator)
    lib_term = sum(c for text, c in lib_counts.items() if any(t.text == text and t.terminator for t in templates))
    ell = 0.0
    if library:
        mu_lib = lib_total / len(library)
        for _ in range(50):
            p_term = (term_mass - ell * lib_term / lib_total) / (1.0 - ell)
            mu_fn = 1.0 / max(p_term, 1e-9)
            ell = spec.library_rate * mu_lib / (spec.library_rate * mu_lib + (1 - spec.library_rate) * mu_fn)
    out = {}
    for lab in ("benign", "malicious"):
        weights = {}
        for t in templates:
            if t.owner == SHARED:
                lam = ell * lib_counts.get(t.text, 0) / lib_total if lib_total else 0.0
                weights[t.text] = max(t.weight - lam, 1e-3 * t.weight)
            elif t.owner == lab:
                weights[t.text] = t.weight * (1.0 - S) / owned[lab]
        out[lab] = weights
    return out


def _norm_key(instrs: list[str]) -> str:
    mode = NormalizationMode(CONCATENATED)
    return " ".join(w for t in instrs for w in normalize_instruction(parse_trace_line(t), mode))


def _sample_sizes(n: int, lo: int, hi: int, rng) -> list[int]:
    """Log-uniform function counts taken at evenly spaced quantiles, shuffled,
    so both classes get the same total volume."""
    q = (np.arange(n) + 0.5) / max(n, 1)
    k = np.round(np.exp(math.log(lo) + q * (math.log(hi) - math.log(lo)))).astype(int)
    return rng.permutation(k).tolist()


def _family_names(label: str, n: int, offset: int) -> list[str]:
    stem = "Ransom" if label == "malicious" else "App"
    return [f"{stem}{chr(ord('A') + (offset + i) % 26)}{(offset + i) // 26 or ''}" for i in range(n)]


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> tuple[CorpusManifest, GeneratorLog]:
    """Write trace files, ``manifest.json`` and ``generator_log.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(spec.seed)
    templates = build_templates(spec, np.random.default_rng(root.integers(2 ** 63)))
    log = GeneratorLog(templates=templates)
    library = _library(spec, templates, np.random.default_rng(root.integers(2 ** 63)))
    log.library = [_norm_key(f) for f in library]
    weights = class_weights(spec, templates, library)

    entries: list[ManifestEntry] = []
    counts: dict[str, int] = {}
    for label, n_pool, n_test in (("benign", spec.n_benign, spec.n_test_benign),
                                  ("malicious", spec.n_malicious, spec.n_test_malicious)):
        rng = np.random.default_rng(root.integers(2 ** 63))
        sampler = _ClassSampler(label, templates, weights[label], rng, spec)
        train_fams = _family_names(label, spec.families_per_class, 0)
        test_fams = _family_names(label, spec.test_families_per_class, spec.families_per_class)
        pools = {fam: [sampler.texts(sampler.fresh()) for _ in range(spec.family_pool_size)]
                 for fam in train_fams + test_fams}
        n_val = round(n_pool * spec.validation_fraction)
        # spread exactly n_val validation samples evenly over the pool
        val_slots = set(np.linspace(0, n_pool - 1, n_val).round().astype(int).tolist()) if n_val else set()
        plan = [(train_fams[i % len(train_fams)], "validation" if i in val_slots else "train")
                for i in range(n_pool)]
        plan += [(test_fams[i % len(test_fams)], "test") for i in range(n_test)]

        lo, hi = spec.functions_per_sample
        cyclers = {fam: _Cycler(len(pool), rng) for fam, pool in pools.items()}
        lib_cycler = _Cycler(len(library), rng) if library else None
        sizes = _sample_sizes(n_pool, lo, hi, rng) + _sample_sizes(n_test, lo, hi, rng)
        for i, ((fam, split), k) in enumerate(zip(plan, sizes)):
            lines: list[str] = []
            for _ in range(k):
                u = rng.random()
                if library and u < spec.library_rate:
                    j = lib_cycler.next()
                    lines.extend(library[j])
                    usage = log.library_usage.setdefault(j, {})
                    if label not in usage.setdefault(split, []):
                        usage[split].append(label)
                        usage[split].sort()
                elif u < spec.library_rate + spec.family_reuse:
                    lines.extend(pools[fam][cyclers[fam].next()])
                else:
                    lines.extend(sampler.texts(sampler.fresh()))
            for line in lines:
                counts[line] = counts.get(line, 0) + 1
            body = "\n".join(lines) + "\n"
            digest = hashlib.sha256(f"{label}/{fam}/{i}\n{body}".encode()).hexdigest()[:16]
            kind = "Ransomware" if label == "malicious" else "Benign"
            name = f"{kind}-{fam}-{digest}"
            path = trace_dir / f"{name}.txt"
            path.write_text(body, encoding="utf-8")
            entries.append(ManifestEntry(str(path), name, label, fam, split))

    log.instruction_counts = dict(sorted(counts.items()))
    manifest = CorpusManifest(entries)
    manifest.validate()
    manifest.dump(out_dir / "manifest.json", relative_to=out_dir)
    (out_dir / "generator_log.json").write_text(
        json.dumps({"spec": spec.to_dict(), **log.to_dict()}, indent=1, sort_keys=True) + "\n")
    logger.info("synthetic corpus: %d samples, %d library functions", len(entries), len(library))
    return manifest, log
