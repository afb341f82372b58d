"""Parsing of DBI instruction traces into per-sample instruction streams."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

LABELS = ("benign", "malicious")
SPLITS = ("train", "validation", "test")
COMMENT_PREFIX = "#"

_WS = re.compile(r"\s+")
_HEAD = re.compile(r"(\S+)\s*(.*)")
_MNEMONIC = re.compile(r"^[a-z][a-z0-9_.]*$")


class TraceError(Exception):
    """Base class for trace loading failures."""


class EmptySampleError(TraceError):
    def __init__(self, path):
        super().__init__(f"no parseable instructions in {path}")
        self.path = str(path)


class ManifestError(TraceError):
    pass


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[str, ...] = ()
    raw: str = ""

    def __post_init__(self):
        if not self.mnemonic or _WS.search(self.mnemonic):
            raise ValueError(f"bad mnemonic {self.mnemonic!r}")

    def text(self) -> str:
        """Canonical single-spaced form, e.g. ``mov byte ptr [ebp-0x19], al``."""
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} {', '.join(self.operands)}"

    def __eq__(self, other):
        # raw is provenance only
        if not isinstance(other, Instruction):
            return NotImplemented
        return self.mnemonic == other.mnemonic and self.operands == other.operands

    def __hash__(self):
        return hash((self.mnemonic, self.operands))


@dataclass(frozen=True)
class ParseError:
    line_no: int
    line: str
    reason: str


@dataclass(frozen=True)
class RawSample:
    sample_id: str
    label: str
    family: str
    instructions: tuple[Instruction, ...]
    errors: tuple[ParseError, ...] = ()
    path: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sample_id: str
    label: str
    family: str
    split: str = "train"


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self) -> None:
        seen_paths = set()
        seen_ids = set()
        for e in self.entries:
            if e.path in seen_paths:
                raise ManifestError(f"path listed twice: {e.path}")
            if e.sample_id in seen_ids:
                raise ManifestError(f"duplicate sample_id: {e.sample_id}")
            if e.label not in LABELS:
                raise ManifestError(f"{e.path}: label must be benign or malicious, got {e.label!r}")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.path}: unknown split {e.split!r}")
            seen_paths.add(e.path)
            seen_ids.add(e.sample_id)

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        try:
            records = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(records, list):
            raise ManifestError("manifest must be a JSON array")
        base = path.parent
        entries = []
        for rec in records:
            try:
                p = Path(rec["path"])
                if not p.is_absolute():
                    p = base / p
                meta = sample_meta_from_filename(p)
                entries.append(ManifestEntry(
                    path=str(p),
                    sample_id=rec.get("sample_id") or meta[0],
                    label=rec.get("label") or meta[1],
                    family=rec.get("family") or meta[2],
                    split=rec.get("split", "train"),
                ))
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"bad manifest record {rec!r}") from exc
        manifest = cls(entries)
        manifest.validate()
        return manifest

    def dump(self, path, relative_to=None) -> None:
        records = []
        for e in self.entries:
            p = e.path
            if relative_to is not None:
                p = os.path.relpath(p, relative_to)
            records.append({"path": p, "sample_id": e.sample_id, "label": e.label,
                            "family": e.family, "split": e.split})
        Path(path).write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")


def split_operands(rest: str) -> list[str]:
    """Split an operand string on commas that are not inside brackets."""
    if "[" not in rest:
        return [_WS.sub(" ", o).strip() for o in rest.split(",")]
    ops, depth, cur = [], 0, []
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth = max(depth - 1, 0)
        if ch == "," and depth == 0:
            ops.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    ops.append("".join(cur))
    return [_WS.sub(" ", o).strip() for o in ops]


def parse_trace_line(line: str) -> Instruction | None:
    """Parse one trace line.

    Returns ``None`` for blank lines and ``#`` comments. Raises ``ValueError``
    for lines that cannot be an instruction.
    """
    stripped = line.strip()
    if not stripped or stripped.startswith(COMMENT_PREFIX):
        return None
    if not stripped.isprintable() or "\ufffd" in stripped:
        raise ValueError("non-printable characters")
    head, rest = _HEAD.match(stripped).groups()
    mnemonic = head.lower()
    if not _MNEMONIC.match(mnemonic):
        raise ValueError(f"not a mnemonic: {head!r}")
    rest = rest.strip()
    if not rest:
        return Instruction(mnemonic, (), stripped)
    operands = split_operands(rest)
    if any(not o for o in operands):
        raise ValueError("empty operand")
    return Instruction(mnemonic, tuple(operands), stripped)


def sample_meta_from_filename(path) -> tuple[str, str, str]:
    """``Ransomware-WannaCry-<hash>.txt`` -> (stem, "malicious", "WannaCry")."""
    stem = Path(path).stem
    parts = stem.split("-")
    kind = parts[0].lower()
    label = "benign" if kind == "benign" else "malicious"
    family = parts[1] if len(parts) >= 3 else parts[0]
    return stem, label, family


def parse_lines(lines: Iterable[str]) -> tuple[list[Instruction], list[ParseError]]:
    instructions, errors = [], []
    for no, line in enumerate(lines, start=1):
        try:
            ins = parse_trace_line(line)
        except ValueError as exc:
            errors.append(ParseError(no, line.rstrip("\r\n"), str(exc)))
            logger.debug("line %d skipped: %s", no, exc)
            continue
        if ins is not None:
            instructions.append(ins)
    return instructions, errors


def load_sample(path, label: str | None = None, family: str | None = None,
                sample_id: str | None = None) -> RawSample:
    path = Path(path)
    stem_id, stem_label, stem_family = sample_meta_from_filename(path)
    with open(path, "r", encoding="utf-8", errors="replace", newline=None) as fh:
        instructions, errors = parse_lines(fh)
    if errors:
        logger.warning("%s: %d malformed line(s) skipped", path.name, len(errors))
    if not instructions:
        raise EmptySampleError(path)
    return RawSample(
        sample_id=sample_id or stem_id,
        label=label or stem_label,
        family=family or stem_family,
        instructions=tuple(instructions),
        errors=tuple(errors),
        path=str(path),
    )


def load_corpus(manifest: CorpusManifest, splits: Sequence[str] | None = None) -> list[RawSample]:
    manifest.validate()
    samples = []
    counts = {s: 0 for s in SPLITS}
    for e in manifest.entries:
        if splits is not None and e.split not in splits:
            continue
        samples.append(load_sample(e.path, e.label, e.family, e.sample_id))
        counts[e.split] += 1
    logger.info("loaded %d samples (%s)", len(samples),
                ", ".join(f"{k}={v}" for k, v in counts.items()))
    return samples
