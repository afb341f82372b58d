from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pulse.tokenizer import (CLS, PAD, SEP, SPECIALS, UNK, TokenizerError, TokenizerModel, fragmentation_rate,
                             pre_split, train_tokenizer)

TABLE4_FUNCTIONS = [
    "movespesi popebx popedi popesi popebp ret0x10",
    "movbyteptr[ebp-0x19]al movdwordptr[ebp-0x4]memoryaddress movdwordptr[ebp-0x24]0x0 callmemoryaddress",
    "moveaxdwordptrfs:[0x30] moveaxdwordptr[eax+0x50] testeaxeax jnz memoryaddress ret",
]


def naive_train(corpus, vocab_size, punctuation_split=False):
    """Reference trainer: recount every pair from scratch after each merge."""
    counts = Counter(w for t in corpus for w in pre_split(t, punctuation_split))
    words = {w: list(w) for w in counts}
    vocab = list(SPECIALS) + sorted({c for w in counts for c in w})
    merges = []
    while len(vocab) < vocab_size:
        pairs = Counter()
        for w, syms in words.items():
            for p in zip(syms, syms[1:]):
                pairs[p] += counts[w]
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        if best[0] + best[1] not in vocab:
            vocab.append(best[0] + best[1])
        for w, syms in words.items():
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
    return vocab, merges


def test_whole_word_tokens():
    corpus = ["popesi popebx"] * 10_000
    tk = train_tokenizer(corpus, vocab_size=300)
    assert tk.tokenize("popesi popebx") == ["popesi", "popebx"]
    vocab, merges = naive_train(corpus, 300)
    assert tk.vocab == vocab and tk.merges == merges


def test_single_character_corpus():
    tk = train_tokenizer(["a"], vocab_size=100)
    assert tk.vocab == list(SPECIALS) + ["a"]


def test_table4_function_tokens():
    corpus = TABLE4_FUNCTIONS * 50 + ["testeaxeax jz memoryaddress ret", "xoreaxeax ret"] * 20
    tk = train_tokenizer(corpus, vocab_size=2000)
    assert len(tk.tokenize("testeaxeax jnz memoryaddress ret")) <= 6


def test_punctuation_split():
    corpus = ["moveaxdwordptrfs:[0x30] ret"] * 50
    tk = train_tokenizer(corpus, vocab_size=500, punctuation_split=True)
    assert tk.tokenize("moveaxdwordptrfs:[0x30]") == ["moveaxdwordptrfs", ":", "[", "0x30", "]"]


def test_errors():
    with pytest.raises(TokenizerError):
        train_tokenizer([], vocab_size=100)
    with pytest.raises(TokenizerError, match="minimum is 8"):
        train_tokenizer(["abc"], vocab_size=7)


def test_encode_layout():
    tk = train_tokenizer(TABLE4_FUNCTIONS * 5, vocab_size=400)
    text = TABLE4_FUNCTIONS[0]
    n_tok = len(tk.tokenize(text))
    seq = tk.encode(text, 64)
    assert len(seq.ids) == 64 and seq.n_real == n_tok + 2
    sp = tk.specials
    assert seq.ids[0] == sp["cls"] and seq.ids[seq.n_real - 1] == sp["sep"]
    assert all(i == sp["pad"] for i in seq.ids[seq.n_real:])
    assert seq.attention_mask.sum() == seq.n_real


def test_truncation():
    tk = TokenizerModel.character_only(["abcdef"])
    seq = tk.encode("abcdef abcdef", 8)
    assert len(seq.ids) == 8 and seq.n_real == 8
    assert tk.decode(seq.ids) == [CLS, "a", "b", "c", "d", "e", "f", SEP]


def test_unknown_characters():
    tk = TokenizerModel.character_only(["ab"])
    assert tk.tokenize("azb") == ["a", UNK, "b"]


def test_fragmentation():
    corpus = ["popesi popebx"] * 20
    tk = train_tokenizer(corpus, vocab_size=300)
    assert fragmentation_rate(tk, corpus) == 1.0
    assert fragmentation_rate(TokenizerModel.character_only(corpus), ["popesi"]) == 6.0


def test_fragmentation_beats_characters():
    rng = np.random.default_rng(0)
    words = ["movespesi", "popebx", "callmemoryaddress", "testeaxeax", "ret0x10", "xoreaxeax"]
    corpus = [" ".join(rng.choice(words, size=6)) for _ in range(200)]
    custom = fragmentation_rate(train_tokenizer(corpus, 500), corpus)
    chars = fragmentation_rate(TokenizerModel.character_only(corpus), corpus)
    assert 1.0 <= custom < chars


def test_save_load_bytes(tmp_path):
    tk = train_tokenizer(TABLE4_FUNCTIONS * 3, vocab_size=300, punctuation_split=True)
    tk.save(tmp_path / "t.json")
    back = TokenizerModel.load(tmp_path / "t.json")
    assert back.vocab == tk.vocab and back.merges == tk.merges
    assert back.to_json() == tk.to_json()
    assert back.specials == {"pad": 0, "unk": 1, "cls": 2, "sep": 3}
    assert PAD == tk.vocab[0]


words = st.text(alphabet="abcde[]:+-,0x", min_size=1, max_size=8)
corpora = st.lists(st.lists(words, min_size=1, max_size=5).map(" ".join), min_size=1, max_size=30)


@settings(max_examples=60)
@given(corpora, st.integers(20, 80), st.booleans())
def test_matches_reference_trainer(corpus, vocab_size, punct):
    chars = {c for t in corpus for w in pre_split(t, punct) for c in w}
    vocab_size = max(vocab_size, len(chars) + 5)
    tk = train_tokenizer(corpus, vocab_size, punct)
    vocab, merges = naive_train(corpus, vocab_size, punct)
    assert tk.vocab == vocab
    assert tk.merges == merges
    assert len(tk.vocab) <= vocab_size
    assert train_tokenizer(list(corpus), vocab_size, punct).to_json() == tk.to_json()
    # training words never fall back to the unknown token
    for t in corpus:
        assert UNK not in tk.tokenize(t)


@given(corpora, st.text(max_size=60), st.integers(2, 40))
def test_encode_total(corpus, text, max_len):
    tk = train_tokenizer(corpus, 200)
    seq = tk.encode(text, max_len)
    assert len(seq.ids) == max_len
    assert seq.attention_mask.sum() == seq.n_real
    assert seq.ids[0] == tk.specials["cls"] and seq.ids[seq.n_real - 1] == tk.specials["sep"]
