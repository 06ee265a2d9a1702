from collections import Counter

import pytest
import torch
from hypothesis import given, settings, strategies as st

from forge15 import tokenizer as tok
from forge15.data import (
    PAD_DOC, ChatSample, CPTSample, DataError, Message, MixtureSpec, load_chat, load_cpt, mixture_counts,
    pack_sequences, render_chat, render_cpt, sample_mixture, validate_multigen, write_jsonl,
)
from forge15.minilm import ModelConfig, TokenBatch, forward, init_params, loss


def test_tokenizer_constants():
    assert (tok.BOS, tok.EOS, tok.SYS, tok.USER, tok.ASST, tok.THINK_OPEN, tok.THINK_CLOSE, tok.PAD) == \
        (256, 257, 258, 259, 260, 261, 262, 263)
    assert tok.VOCAB_SIZE == 264
    assert tok.decode(tok.encode("héllo")) == "héllo"
    assert tok.decode([tok.THINK_OPEN, *tok.encode("x"), tok.THINK_CLOSE, *tok.encode("y"), tok.EOS, 65]) == \
        "<think>x</think>y"


def test_render_cpt_joins_with_newlines():
    b = render_cpt(CPTSample(["Q", "step", "A"], "reasoning"))
    assert b.tokens == list(b"Q\nstep\nA")
    assert b.loss_mask == [1] * len(b)
    assert render_cpt(CPTSample(["only"], "pretrain")).tokens == list(b"only")
    with pytest.raises(DataError):
        render_cpt(CPTSample([], "cot"))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=10), min_size=1, max_size=4))
def test_render_cpt_has_no_specials(segs):
    b = render_cpt(CPTSample(segs, "cot"))
    assert max(b.tokens) < 256


def test_render_chat_mask_example():
    s = ChatSample([Message("user", "hi"), Message("assistant", "ok", "t")])
    b = render_chat(s)
    expected = [tok.BOS, tok.USER, *b"hi", tok.ASST, tok.THINK_OPEN, *b"t", tok.THINK_CLOSE, *b"ok", tok.EOS]
    assert b.tokens == expected
    cut = expected.index(tok.THINK_OPEN)
    assert b.loss_mask == [0] * cut + [1] * (len(expected) - cut)


def test_render_chat_errors():
    with pytest.raises(DataError, match="no assistant turn"):
        render_chat(ChatSample([Message("system", "be nice")]))
    with pytest.raises(DataError, match="malformed role sequence"):
        render_chat(ChatSample([Message("assistant", "x"), Message("user", "y")]))


def test_two_assistant_turns():
    s = ChatSample([Message("system", "s"), Message("user", "a"), Message("assistant", "b"),
                    Message("user", "c"), Message("assistant", "d")])
    b = render_chat(s)
    masked = [t for t, m in zip(b.tokens, b.loss_mask) if m]
    assert masked == [tok.THINK_OPEN, tok.THINK_CLOSE, *b"b", tok.EOS, tok.THINK_OPEN, tok.THINK_CLOSE, *b"d", tok.EOS]


role_turns = st.lists(st.tuples(st.text(max_size=6), st.text(max_size=6), st.one_of(st.none(), st.text(max_size=6))),
                      min_size=1, max_size=3)


@settings(max_examples=60, deadline=None)
@given(role_turns, st.one_of(st.none(), st.text(max_size=5)))
def test_mask_is_one_exactly_on_assistant_tokens(turns, system):
    msgs = [Message("system", system)] if system is not None else []
    oracle_mask = [0]  # BOS
    if system is not None:
        oracle_mask += [0] * (1 + len(tok.encode(system)))
    for u, a, th in turns:
        msgs += [Message("user", u), Message("assistant", a, th)]
        oracle_mask += [0] * (1 + len(tok.encode(u))) + [0]
        oracle_mask += [1] * (2 + len(tok.encode(th or "")) + len(tok.encode(a)) + 1)
    assert render_chat(ChatSample(msgs)).loss_mask == oracle_mask


def test_pack_first_fit_example():
    docs = [TokenBatch([1] * 3), TokenBatch([2] * 4), TokenBatch([3] * 5)]
    rows = pack_sequences(docs, 8)
    assert len(rows) == 2
    assert rows[0].doc_ids == [0, 0, 0, 1, 1, 1, 1, PAD_DOC]
    assert rows[1].doc_ids == [0, 0, 0, 0, 0, PAD_DOC, PAD_DOC, PAD_DOC]
    assert rows[1].tokens[5:] == [tok.PAD] * 3
    assert rows[1].loss_mask[5:] == [0] * 3


def test_pack_full_row_and_oversize():
    rows = pack_sequences([TokenBatch([7] * 8)], 8)
    assert rows[0].doc_ids == [0] * 8
    with pytest.raises(DataError, match="sample 1"):
        pack_sequences([TokenBatch([1]), TokenBatch([1] * 9)], 8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=1, max_size=15), st.integers(10, 16))
def test_packing_conserves_tokens(lengths, seq_len):
    docs = [TokenBatch([i % 250] * n) for i, n in enumerate(lengths)]
    rows = pack_sequences(docs, seq_len)
    assert all(len(r) == seq_len for r in rows)
    flat_in = Counter(t for d in docs for t in d.tokens)
    flat_out = Counter(t for r in rows for t, d in zip(r.tokens, r.doc_ids) if d != PAD_DOC)
    assert flat_in == flat_out
    for r in rows:
        real = [d for d in r.doc_ids if d != PAD_DOC]
        assert real == sorted(real)


def test_packed_forward_matches_documents():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)
    p = init_params(cfg, 0)
    samples = [ChatSample([Message("user", "12+3"), Message("assistant", "15", "2+3=5")]),
               ChatSample([Message("user", "hey"), Message("assistant", "yo")])]
    docs = [render_chat(s) for s in samples]
    [row] = pack_sequences(docs, 64)
    with torch.no_grad():
        packed = forward(cfg, p, row)
        start = 0
        for d in docs:
            alone = forward(cfg, p, d.tokens)
            assert float((packed[start:start + len(d)] - alone).abs().max()) <= 1e-5
            start += len(d)


def test_masked_tokens_do_not_change_sft_loss():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)
    p = init_params(cfg, 1)

    def chat(tail):
        return render_chat(ChatSample([Message("user", "abc"), Message("assistant", "xyz", "q"),
                                       Message("user", tail)]))

    a, b = chat("first follow-up"), chat("other follow-up")
    assert a.tokens != b.tokens and a.loss_mask == b.loss_mask
    with torch.no_grad():
        assert float(loss(cfg, p, a)) == float(loss(cfg, p, b))
        # a masked-out neighbour document in the same packed row is equally invisible
        rows_a = pack_sequences([a, TokenBatch([9, 9, 9], loss_mask=[0, 0, 0])], 64)
        rows_b = pack_sequences([a, TokenBatch([1, 2, 3], loss_mask=[0, 0, 0])], 64)
        assert float(loss(cfg, p, rows_a)) == float(loss(cfg, p, rows_b))


def test_mixture_counts_examples():
    assert mixture_counts([0.6, 0.25, 0.15], 1000) == [600, 250, 150]
    assert mixture_counts([0.6, 0.25, 0.15], 7) == [4, 2, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=6), st.integers(0, 500))
def test_mixture_counts_property(raw, total):
    ws = [r / sum(raw) for r in raw]
    counts = mixture_counts(ws, total)
    assert sum(counts) == total
    assert all(abs(c - w * total) < 1 for c, w in zip(counts, ws))


def test_sample_mixture_deterministic():
    spec = MixtureSpec([("r", 0.6), ("c", 0.25), ("p", 0.15)], 20, seed=3)
    data = {"r": ["r1", "r2"], "c": ["c1"], "p": ["p1", "p2", "p3"]}
    a = sample_mixture(spec, data)
    assert a == sample_mixture(spec, data)
    assert Counter(x[0] for x in a) == {"r": 12, "c": 5, "p": 3}
    with pytest.raises(DataError):
        sample_mixture(spec, {**data, "c": []})
    with pytest.raises(DataError):
        MixtureSpec([("a", 0.5), ("b", 0.4)], 10)


def test_validate_multigen():
    def s(p, r):
        return ChatSample([Message("user", p), Message("assistant", r)], "math")
    ok = validate_multigen([s("q", "a"), s("q", "b"), s("q", "c")], 3)
    assert ok.violations == [] and ok.counts == {"q": 3}
    dup = validate_multigen([s("q", "a"), s("q", "a"), s("q", "b")], 3)
    assert dup.counts == {"q": 2} and dup.violations == ["q"]
    empty = validate_multigen([], 3)
    assert empty.counts == {} and empty.violations == []


def test_jsonl_round_trip(tmp_path):
    chats = [ChatSample([Message("user", "u"), Message("assistant", "a", "t")], "math")]
    write_jsonl(tmp_path / "c.jsonl", [c.to_json() for c in chats])
    assert load_chat(tmp_path / "c.jsonl") == chats
    cpts = [CPTSample(["a", "b"], "cot")]
    write_jsonl(tmp_path / "p.jsonl", [c.to_json() for c in cpts])
    assert load_cpt(tmp_path / "p.jsonl") == cpts
