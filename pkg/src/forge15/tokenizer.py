"""Byte-level tokenizer with eight reserved special ids."""

from __future__ import annotations

BOS = 256
EOS = 257
SYS = 258
USER = 259
ASST = 260
THINK_OPEN = 261
THINK_CLOSE = 262
PAD = 263

VOCAB_SIZE = 264

SPECIAL_NAMES = {
    BOS: "<bos>",
    EOS: "<eos>",
    SYS: "<system>",
    USER: "<user>",
    ASST: "<assistant>",
    THINK_OPEN: "<think>",
    THINK_CLOSE: "</think>",
    PAD: "<pad>",
}

# specials that carry text when decoding model output
_DECODED_TEXT = {THINK_OPEN: "<think>", THINK_CLOSE: "</think>"}


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids, *, stop_at_eos: bool = True) -> str:
    """Decode model output to text.

    Think markers become their tag strings so rule-based rewards can read them;
    every other special id is dropped. Decoding stops at the first EOS.
    """
    buf = bytearray()
    out: list[str] = []
    for i in ids:
        i = int(i)
        if i == EOS and stop_at_eos:
            break
        if i < 256:
            buf.append(i)
            continue
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        out.append(_DECODED_TEXT.get(i, ""))
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)


def prompt_tokens(user_text: str, system: str | None = None) -> list[int]:
    """Chat prefix up to and including the assistant role token."""
    ids = [BOS]
    if system is not None:
        ids += [SYS, *encode(system)]
    ids += [USER, *encode(user_text), ASST]
    return ids
