"""Instruction normalization and segmentation of instruction streams into functions.

Two styles are supported. ``spaced`` keeps the instruction text as separate
words (``call memoryaddress``); ``concatenated`` glues mnemonic and operands
into one word per instruction (``callmemoryaddress``). In both styles large
immediates and control-transfer targets are masked with ``memoryaddress``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .trace import Instruction, RawSample

MASK = "memoryaddress"
SPACED = "spaced"
CONCATENATED = "concatenated"
STYLES = (SPACED, CONCATENATED)
DEFAULT_THRESHOLD = 0x10000
DEFAULT_MIN_LEN = 6

_IMMEDIATE = re.compile(r"^(?:0x[0-9a-f]+|[0-9]+)$", re.IGNORECASE)
_CONCAT_DROP = re.compile(r"[\s,]+")
RETURNS = frozenset({"ret", "retn", "retf"})


@dataclass(frozen=True)
class NormalizationMode:
    style: str = CONCATENATED
    address_threshold: int = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.address_threshold < 0:
            raise ValueError("address_threshold must be non-negative")


@dataclass(frozen=True)
class NormalizedFunction:
    words: tuple[str, ...]
    sample_id: str
    label: str
    index_in_sample: int
    n_instructions: int
    start: int = 0

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def sidecar(self) -> dict:
        return {"sample_id": self.sample_id, "label": self.label,
                "index_in_sample": self.index_in_sample,
                "n_instructions": self.n_instructions}


def immediate_value(operand: str) -> int | None:
    if not _IMMEDIATE.match(operand):
        return None
    return int(operand, 16) if operand[:2].lower() == "0x" else int(operand)


def is_control_transfer(mnemonic: str) -> bool:
    return mnemonic == "call" or mnemonic.startswith("j") or mnemonic.startswith("loop")


def is_jump(mnemonic: str) -> bool:
    return mnemonic.startswith("j") or mnemonic.startswith("loop")


def mask_operands(instr: Instruction, threshold: int = DEFAULT_THRESHOLD) -> tuple[str, ...]:
    ops = instr.operands
    if len(ops) == 1 and is_control_transfer(instr.mnemonic) and immediate_value(ops[0]) is not None:
        return (MASK,)
    out = []
    for op in ops:
        value = immediate_value(op)
        out.append(MASK if value is not None and value >= threshold else op)
    return tuple(out)


def normalize_instruction(instr: Instruction, mode: NormalizationMode = NormalizationMode()) -> list[str]:
    """Normalize one instruction into its list of words.

    >>> from pulse.trace import parse_trace_line
    >>> normalize_instruction(parse_trace_line("call 0x775ade2d"))
    ['callmemoryaddress']
    """
    ops = mask_operands(instr, mode.address_threshold)
    if mode.style == SPACED:
        text = instr.mnemonic if not ops else f"{instr.mnemonic} {', '.join(ops)}"
        return text.split()
    # Masked jump targets stay a separate token inside the word, as in the
    # observed traces ("testeaxeax jnz memoryaddress ret").
    if ops == (MASK,) and is_jump(instr.mnemonic):
        return [f"{instr.mnemonic} {MASK}"]
    return [_CONCAT_DROP.sub("", instr.mnemonic + "".join(ops))]


def is_boundary_end(instr: Instruction) -> bool:
    return instr.mnemonic in RETURNS or instr.mnemonic == "call"


def is_prologue_start(instr: Instruction) -> bool:
    return instr.mnemonic == "push" and instr.operands == ("ebp",)


def split_points(instructions: Sequence[Instruction], style: str) -> list[tuple[int, int]]:
    """Return half-open ``(start, end)`` spans covering the stream exactly."""
    spans = []
    start = 0
    for i, ins in enumerate(instructions):
        if style == SPACED and is_prologue_start(ins) and i > start:
            spans.append((start, i))
            start = i
        if is_boundary_end(ins):
            spans.append((start, i + 1))
            start = i + 1
    if start < len(instructions):
        spans.append((start, len(instructions)))
    return spans


def segment_functions(sample: RawSample, mode: NormalizationMode = NormalizationMode()) -> list[NormalizedFunction]:
    functions = []
    instrs = sample.instructions
    for idx, (a, b) in enumerate(split_points(instrs, mode.style)):
        words = []
        for ins in instrs[a:b]:
            words.extend(normalize_instruction(ins, mode))
        functions.append(NormalizedFunction(
            words=tuple(words), sample_id=sample.sample_id, label=sample.label,
            index_in_sample=idx, n_instructions=b - a, start=a))
    return functions


def filter_short(functions: Iterable[NormalizedFunction], min_len: int = DEFAULT_MIN_LEN) -> list[NormalizedFunction]:
    return [f for f in functions if f.n_instructions >= min_len]


def write_functions(path, functions: Iterable[NormalizedFunction]) -> Path:
    """Write one function per line plus a ``.jsonl`` sidecar; returns the sidecar path."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as text_fh, \
            open(sidecar, "w", encoding="utf-8", newline="\n") as meta_fh:
        for f in functions:
            text_fh.write(f.text + "\n")
            meta_fh.write(json.dumps(f.sidecar(), sort_keys=True) + "\n")
    return sidecar


def read_functions(path) -> list[NormalizedFunction]:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".jsonl")
    texts = path.read_text(encoding="utf-8").splitlines()
    metas = [json.loads(line) for line in sidecar.read_text(encoding="utf-8").splitlines() if line]
    if len(texts) != len(metas):
        raise ValueError(f"{path}: {len(texts)} functions but {len(metas)} sidecar records")
    # concatenated words may carry an interior space ("jnz memoryaddress"),
    # so the word split is not recoverable; the text is what matters downstream
    return [NormalizedFunction(words=tuple(t.split()), sample_id=m["sample_id"], label=m["label"],
                               index_in_sample=m["index_in_sample"],
                               n_instructions=m["n_instructions"])
            for t, m in zip(texts, metas)]
