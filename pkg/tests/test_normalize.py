import random

import pytest
from hypothesis import given, strategies as st

from pulse.normalize import (CONCATENATED, MASK, SPACED, NormalizationMode, NormalizedFunction, filter_short,
                             mask_operands, normalize_instruction, read_functions, segment_functions,
                             split_points, write_functions)
from pulse.trace import Instruction, RawSample, parse_lines, parse_trace_line

from conftest import TABLE4_TRACE

CONCAT = NormalizationMode(CONCATENATED)
SPACE = NormalizationMode(SPACED)

INSTRUCTION_ROWS = [
    ("mov esp, esi", "mov esp, esi", "movespesi"),
    ("pop esi", "pop esi", "popesi"),
    ("mov byte ptr [ebp-0x19], al", "mov byte ptr [ebp-0x19], al", "movbyteptr[ebp-0x19]al"),
    ("call 0x775ade2d", "call memoryaddress", "callmemoryaddress"),
    ("mov eax, dword ptr fs:[0x30]", "mov eax, dword ptr fs:[0x30]", "moveaxdwordptrfs:[0x30]"),
]

TABLE4_FUNCTIONS = [
    "movespesi popebx popedi popesi popebp ret0x10",
    "movbyteptr[ebp-0x19]al movdwordptr[ebp-0x4]memoryaddress movdwordptr[ebp-0x24]0x0 callmemoryaddress",
    "moveaxdwordptrfs:[0x30] moveaxdwordptr[eax+0x50] testeaxeax jnz memoryaddress ret",
]


def sample_of(text, label="benign", sid="s"):
    instrs, errors = parse_lines(text.splitlines())
    assert not errors
    return RawSample(sid, label, "fam", tuple(instrs))


@pytest.mark.parametrize("raw,spaced,concat", INSTRUCTION_ROWS)
def test_instruction_rows(raw, spaced, concat):
    ins = parse_trace_line(raw)
    assert " ".join(normalize_instruction(ins, SPACE)) == spaced
    assert normalize_instruction(ins, CONCAT) == [concat]


@pytest.mark.parametrize("raw,expected", [
    ("mov dword ptr [ebp-0x4], 0xfffffffe", "movdwordptr[ebp-0x4]memoryaddress"),
    ("mov dword ptr [ebp-0x24], 0x0", "movdwordptr[ebp-0x24]0x0"),
    ("ret 0x10", "ret0x10"),
])
def test_value_immediates_kept_addresses_masked(raw, expected):
    assert normalize_instruction(parse_trace_line(raw), CONCAT) == [expected]


def test_spaced_pop():
    assert normalize_instruction(parse_trace_line("pop esi"), SPACE) == ["pop", "esi"]


def test_small_jump_target_still_masked():
    assert mask_operands(parse_trace_line("jmp 0x10")) == (MASK,)
    assert mask_operands(parse_trace_line("loop 0x20")) == (MASK,)


def test_threshold_configurable():
    ins = parse_trace_line("mov eax, 0x1000")
    assert normalize_instruction(ins, NormalizationMode(CONCATENATED, 0x1000)) == ["moveaxmemoryaddress"]
    assert normalize_instruction(ins, CONCAT) == ["moveax0x1000"]


def test_table4_segments():
    funcs = segment_functions(sample_of(TABLE4_TRACE), CONCAT)
    assert [f.text for f in funcs] == TABLE4_FUNCTIONS
    assert [f.words[-1] for f in funcs] == ["ret0x10", "callmemoryaddress", "ret"]
    assert [f.n_instructions for f in funcs] == [6, 4, 5]


def test_single_ret():
    funcs = segment_functions(sample_of("ret"), CONCAT)
    assert len(funcs) == 1 and funcs[0].words == ("ret",)


def test_spaced_prologue_split():
    funcs = segment_functions(sample_of("push ebp\nmov ebp, esp\nret\npush ebp\nret"), SPACE)
    assert [f.n_instructions for f in funcs] == [3, 2]
    assert funcs[1].text == "push ebp ret"


def test_prologue_split_only_in_spaced_mode():
    s = sample_of("mov eax, ebx\npush ebp\nret")
    assert len(segment_functions(s, SPACE)) == 2
    assert len(segment_functions(s, CONCAT)) == 1


def test_filter_short_table4():
    funcs = segment_functions(sample_of(TABLE4_TRACE), CONCAT)
    kept = filter_short(funcs)
    # the 6-instruction function survives; the 4- and 5-instruction ones do not
    assert [f.text for f in kept] == [TABLE4_FUNCTIONS[0]]


def _fn(n):
    return NormalizedFunction(tuple(["nop"] * n), "s", "benign", 0, n)


def test_filter_boundary():
    assert filter_short([_fn(5)]) == []
    assert len(filter_short([_fn(6)])) == 1


def test_hundred_random_lengths():
    lengths = list(range(1, 101))
    random.Random(7).shuffle(lengths)
    assert len(filter_short([_fn(n) for n in lengths])) == 95


def test_function_file_roundtrip(tmp_path):
    funcs = segment_functions(sample_of(TABLE4_TRACE, "malicious", "x"), CONCAT)
    sidecar = write_functions(tmp_path / "f.txt", funcs)
    assert sidecar.name == "f.txt.jsonl"
    back = read_functions(tmp_path / "f.txt")
    assert [f.text for f in back] == [f.text for f in funcs]
    assert [f.sidecar() for f in back] == [f.sidecar() for f in funcs]


def test_mode_validation():
    with pytest.raises(ValueError):
        NormalizationMode("mixed")


REGS = ["eax", "ebx", "ecx", "esi", "ebp", "esp"]
instr = st.one_of(
    st.builds(lambda r: Instruction("pop", (r,)), st.sampled_from(REGS)),
    st.builds(lambda a, b: Instruction("mov", (a, b)), st.sampled_from(REGS), st.sampled_from(REGS)),
    st.builds(lambda r, v: Instruction("add", (r, hex(v))), st.sampled_from(REGS), st.integers(0, 2**32 - 1)),
    st.builds(lambda d, v: Instruction("mov", (f"dword ptr [ebp-{hex(d)}]", hex(v))),
              st.integers(0, 0xff), st.integers(0, 2**32 - 1)),
    st.builds(lambda v: Instruction("call", (hex(v),)), st.integers(0, 2**32 - 1)),
    st.builds(lambda m, v: Instruction(m, (hex(v),)), st.sampled_from(["jnz", "jz", "jmp", "loop"]),
              st.integers(0, 2**32 - 1)),
    st.sampled_from([Instruction("ret"), Instruction("push", ("ebp",)), Instruction("retn", ("0x8",))]),
)
streams = st.lists(instr, min_size=1, max_size=60)
modes = st.sampled_from([CONCAT, SPACE])


@given(streams, modes)
def test_partition(stream, mode):
    spans = split_points(stream, mode.style)
    assert spans[0][0] == 0 and spans[-1][1] == len(stream)
    assert all(a < b for a, b in spans)
    assert all(spans[i][1] == spans[i + 1][0] for i in range(len(spans) - 1))
    funcs = segment_functions(RawSample("s", "benign", "f", tuple(stream)), mode)
    rebuilt = [ins for f in funcs for ins in stream[f.start:f.start + f.n_instructions]]
    assert rebuilt == list(stream)


@given(streams)
def test_concatenated_one_word_per_instruction(stream):
    for f in segment_functions(RawSample("s", "benign", "f", tuple(stream)), CONCAT):
        assert len(f.words) == f.n_instructions
        assert all(w and w == w.strip() for w in f.words)


@given(instr, st.integers(1, 2**20))
def test_substitution_soundness(ins, threshold):
    masked = mask_operands(ins, threshold)
    for before, after in zip(ins.operands, masked):
        if after == MASK:
            continue
        assert after == before
        if before.startswith("0x"):
            assert int(before, 16) < threshold
    n_mask = sum(1 for op in masked if op == MASK)
    n_imm = sum(1 for op in ins.operands if op.startswith("0x"))
    assert n_mask <= n_imm


@given(instr)
def test_idempotence(ins):
    # re-normalizing the spaced output is a no-op, and so is concatenating it
    spaced = " ".join(normalize_instruction(ins, SPACE))
    again = parse_trace_line(spaced)
    assert " ".join(normalize_instruction(again, SPACE)) == spaced
    assert normalize_instruction(again, CONCAT) == normalize_instruction(ins, CONCAT)
