"""Autoregressive caption generation: greedy and beam search.

Both decoders are deterministic: argmax ties break toward the lowest
token id, and beam candidates sort by (score, token id, beam index).
Width-1 beam search therefore reproduces greedy decoding exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EOS, SEP_TOKEN, SOS
from .errors import ConfigError
from .model import ModelParams, decode_forward, encode_for_inference
from .numerics import no_grad


@dataclass
class Hypothesis:
    tokens: list  # ids, starting with <sos>
    logprob: float
    finished: bool

    def score(self, alpha: float) -> float:
        length = max(len(self.tokens) - 1, 1)  # generated tokens, <sos> excluded
        return self.logprob / length**alpha


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    return row - m - np.log(np.exp(row - m).sum())


def _next_logits(params, tokens, memory) -> np.ndarray:
    logits = decode_forward(np.asarray(tokens), memory, params)
    return logits.data[-1]


def greedy_decode(params: ModelParams, features, max_len: int | None = None) -> list:
    """Append the argmax token until <eos> or the length cap.

    Returns generated ids with <sos>/<eos> stripped.
    """
    max_len = params.config.max_decode_len if max_len is None else max_len
    with no_grad():
        memory = encode_for_inference(features, params)
        tokens = [SOS]
        for _ in range(max_len):
            nxt = int(np.argmax(_next_logits(params, tokens, memory)))  # first max = lowest id
            if nxt == EOS:
                break
            tokens.append(nxt)
    return tokens[1:]


def beam_decode(params: ModelParams, features, width: int, length_norm_alpha: float = 0.7) -> list:
    """Standard beam search over log-probabilities.

    Finished hypotheses score as logprob / length^alpha. Returns the best
    finished hypothesis' ids, <sos>/<eos> stripped.
    """
    if width < 1:
        raise ConfigError("beam width must be >= 1")
    max_len = params.config.max_decode_len
    with no_grad():
        memory = encode_for_inference(features, params)
        beams = [Hypothesis(tokens=[SOS], logprob=0.0, finished=False)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for b_idx, hyp in enumerate(beams):
                logp = _log_softmax(_next_logits(params, hyp.tokens, memory))
                for tok in range(len(logp)):
                    candidates.append((hyp.logprob + float(logp[tok]), tok, b_idx))
            # highest score first; ties toward the lowest token id, then beam order
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            next_beams = []
            for score, tok, b_idx in candidates[:width]:  # finished hypotheses consume their slot
                parent = beams[b_idx]
                if tok == EOS:
                    finished.append(Hypothesis(tokens=list(parent.tokens), logprob=score, finished=True))
                else:
                    next_beams.append(Hypothesis(tokens=parent.tokens + [tok], logprob=score, finished=False))
            beams = next_beams
            if not beams:
                break
        for hyp in beams:
            # length-capped survivors compete under the same objective:
            # full-sequence log-probability including the <eos> step
            eos_lp = float(_log_softmax(_next_logits(params, hyp.tokens, memory))[EOS])
            finished.append(Hypothesis(tokens=hyp.tokens, logprob=hyp.logprob + eos_lp, finished=True))
        best = max(finished, key=lambda h: h.score(length_norm_alpha))
    return best.tokens[1:]


def sequence_logprob(params: ModelParams, features, token_ids) -> float:
    """Model log-probability of generating ``token_ids`` then <eos>."""
    with no_grad():
        memory = encode_for_inference(features, params)
        tokens = [SOS]
        total = 0.0
        for tok in list(token_ids) + [EOS]:
            logp = _log_softmax(_next_logits(params, tokens, memory))
            total += float(logp[tok])
            tokens.append(tok)
    return total


# ---------------------------------------------------------------------------
# decode output file
# ---------------------------------------------------------------------------


def caption_text(words) -> str:
    """Render decoded words; paragraphs join their sentences with ' . '."""
    sentences = [[]]
    for w in words:
        if w == SEP_TOKEN:
            sentences.append([])
        else:
            sentences[-1].append(w)
    return " . ".join(" ".join(s) for s in sentences if s)


def write_decodes(path, decoded: dict) -> None:
    """One line per video: video_id<TAB>caption text, sorted by id."""
    lines = [f"{vid}\t{caption_text(words)}" for vid, words in sorted(decoded.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_decodes(path) -> dict:
    """Inverse of write_decodes: video_id -> sentence lists (token lists)."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        vid, _, text = line.partition("\t")
        sentences = [s.split() for s in text.split(" . ") if s.split()]
        out[vid] = sentences if sentences else [[]]
    return out
