"""Byte-level tokenizer with a handful of reserved special ids."""

from __future__ import annotations

PAD = 256
BOS = 257
EOS = 258
MEDIA = 259
VOCAB_SIZE = 260

SPECIALS = {PAD: "<PAD>", BOS: "<BOS>", EOS: "<EOS>", MEDIA: "<MEDIA>"}


class ByteTokenizer:
    pad_id, bos_id, eos_id, media_id = PAD, BOS, EOS, MEDIA
    vocab_size = VOCAB_SIZE

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        if bos:
            ids.insert(0, BOS)
        if eos:
            ids.append(EOS)
        return ids

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i == EOS and stop_at_eos:
                break
            if i < 256:
                out.append(i)
        return out.decode("utf-8", errors="replace")

    def __len__(self) -> int:
        return VOCAB_SIZE
