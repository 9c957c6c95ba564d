"""Toy language branch: closed vocabulary, tokenizer, and causal decoder.

The vocabulary is a small closed set covering the synthetic caption grammar
plus five reserved specials. The decoder is a strictly causal pre-norm
transformer over a multimodal sequence: BOS, then the visual token block
(standing in for the <IMAGE> placeholder), then text embeddings. Hidden
states at <SEG> positions are the noun grounding embeddings.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import BACKGROUND_NAME, COLOR_TABLE, NUMBER_WORDS, SHAPES
from .layers import TransformerBlock, causal_mask

PAD, BOS, EOS, IMAGE_TOKEN, SEG_TOKEN = "<PAD>", "<BOS>", "<EOS>", "<IMAGE>", "<SEG>"
SPECIAL_TOKENS = (PAD, BOS, EOS, IMAGE_TOKEN, SEG_TOKEN)
PAD_ID, BOS_ID, EOS_ID, IMAGE_ID, SEG_ID = range(5)

_PUNCT = (",", ".", ":")
_TOKEN_RE = re.compile(r"<IMAGE>|<SEG>|[A-Za-z]+|[^\sA-Za-z]")


class OOVError(ValueError):
    """A word outside the closed vocabulary."""

    def __init__(self, word: str):
        self.word = word
        super().__init__(f"out-of-vocabulary word: {word!r}")


class ContextLengthError(ValueError):
    pass


def _default_words() -> list[str]:
    glue = (
        "There are semantic nouns including no "
        "Please help me extract of this sentence describe the image "
        "a an and on"
    ).split()
    words = list(_PUNCT) + glue + list(NUMBER_WORDS)
    words += list(COLOR_TABLE) + [BACKGROUND_NAME, "background"]
    for shape in SHAPES:
        words += [shape, shape + "s"]
    return words


class Vocabulary:
    """Bijective token <-> id map with fixed reserved special ids."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"tokens must start with the specials {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + _default_words())

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        if token not in self._ids:
            raise OOVError(token)
        return self._ids[token]

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def tokenize(self, text: str) -> list[int]:
        """Whitespace/punctuation split; specials pass through unchanged."""
        return [self.id_of(tok) for tok in _TOKEN_RE.findall(text)]

    def detokenize(self, ids: list[int]) -> str:
        out = ""
        for i in ids:
            tok = self.token_of(int(i))
            if tok in _PUNCT:
                out += tok
            else:
                out += (" " if out else "") + tok
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens, indent=2))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text()))


@dataclass
class MultimodalSequence:
    """Embedded sequence: BOS, visual block, then text token embeddings."""

    embeddings: torch.Tensor   # (L, d_l)
    token_ids: torch.Tensor    # (L,) long; visual positions carry IMAGE_ID
    n_visual: int
    answer_start: int          # position of the first answer token; == L if none

    def __len__(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class LanguageOutputs:
    hidden: torch.Tensor     # (L, d_l) final-layer states (post-norm)
    logits: torch.Tensor     # (L, |vocab|)
    token_ids: torch.Tensor  # (L,)
    targets: torch.Tensor    # (L,) next-token ids; last entry is PAD
    loss_mask: torch.Tensor  # (L,) bool; True where the position predicts an answer token


class LanguageModel(nn.Module):
    """Strictly causal transformer with tied input/output embeddings."""

    def __init__(self, vocab: Vocabulary, width: int = 64, depth: int = 2, heads: int = 4,
                 context_limit: int = 512, ffn_ratio: int = 2):
        super().__init__()
        self.vocab = vocab
        self.width = width
        self.context_limit = context_limit
        self.token_embed = nn.Embedding(len(vocab), width)
        self.pos_embed = nn.Parameter(torch.zeros(context_limit, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, ffn_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(width)

    def build_sequence(self, visual: torch.Tensor | None, text_ids: list[int],
                       answer_ids: list[int] | None = None) -> MultimodalSequence:
        """Assemble BOS + visual block + text (+ answer + EOS) embeddings.

        A single <IMAGE> placeholder in text_ids is replaced by the visual
        block; without a placeholder the block comes right after BOS. Pass
        visual=None for text-only sequences.
        """
        text_ids = [int(i) for i in text_ids]
        if visual is None:
            if IMAGE_ID in text_ids:
                raise ValueError("text contains <IMAGE> but no visual tokens were given")
            pre, post = text_ids, []
            n_visual = 0
        else:
            if visual.dim() != 2 or visual.shape[1] != self.width:
                raise ValueError(f"visual tokens must be (n, {self.width})")
            n_visual = visual.shape[0]
            if text_ids.count(IMAGE_ID) > 1:
                raise ValueError("at most one <IMAGE> placeholder is supported")
            if IMAGE_ID in text_ids:
                at = text_ids.index(IMAGE_ID)
                pre, post = text_ids[:at], text_ids[at + 1:]
            else:
                pre, post = [], text_ids

        tail = list(answer_ids) + [EOS_ID] if answer_ids is not None else []
        ids = [BOS_ID] + pre + [IMAGE_ID] * n_visual + post + tail
        total = len(ids)
        if total > self.context_limit:
            raise ContextLengthError(f"sequence length {total} exceeds context limit {self.context_limit}")

        ids_t = torch.tensor(ids, dtype=torch.long)
        emb = self.token_embed(ids_t)
        if n_visual:
            start = 1 + len(pre)
            emb = torch.cat([emb[:start], visual, emb[start + n_visual:]], dim=0)
        answer_start = total - len(tail) if tail else total
        return MultimodalSequence(emb, ids_t, n_visual, answer_start)

    def forward(self, seq: MultimodalSequence) -> LanguageOutputs:
        length = len(seq)
        x = seq.embeddings + self.pos_embed[:length]
        mask = causal_mask(length, dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        hidden = self.norm(x)
        logits = hidden @ self.token_embed.weight.T

        targets = torch.full((length,), PAD_ID, dtype=torch.long)
        targets[:-1] = seq.token_ids[1:]
        loss_mask = torch.zeros(length, dtype=torch.bool)
        if seq.answer_start < length:
            loss_mask[seq.answer_start - 1 : length - 1] = True
        return LanguageOutputs(hidden, logits, seq.token_ids, targets, loss_mask)


def lang_loss(outputs: LanguageOutputs) -> torch.Tensor:
    """Mean next-token cross-entropy over answer-region positions."""
    if not bool(outputs.loss_mask.any()):
        raise ValueError("no unmasked positions: sequence has no answer region")
    logits = outputs.logits[outputs.loss_mask]
    targets = outputs.targets[outputs.loss_mask]
    return F.cross_entropy(logits, targets)


def extract_seg_embeddings(outputs: LanguageOutputs, token_ids: torch.Tensor | None = None) -> torch.Tensor:
    """(m, d_l) hidden rows at <SEG> positions, in order of appearance."""
    ids = outputs.token_ids if token_ids is None else token_ids
    where = ids == SEG_ID
    return outputs.hidden[where]


@torch.no_grad()
def generate(model: LanguageModel, seq: MultimodalSequence, max_len: int = 64) -> list[int]:
    """Greedy decoding from the prompt; stops at EOS or max_len tokens."""
    emb = seq.embeddings
    ids = seq.token_ids.tolist()
    out: list[int] = []
    for _ in range(max_len):
        if len(ids) >= model.context_limit:
            break
        cur = MultimodalSequence(emb, torch.tensor(ids, dtype=torch.long), seq.n_visual, len(ids))
        logits = model.forward(cur).logits
        next_id = int(logits[-1].argmax())
        if next_id == EOS_ID:
            break
        out.append(next_id)
        ids.append(next_id)
        emb = torch.cat([emb, model.token_embed.weight[next_id][None, :]], dim=0)
    return out
