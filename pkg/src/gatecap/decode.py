"""Greedy caption generation and corpus-level BLEU."""

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from gatecap import tensor as T
from gatecap.model import END, START, _step, project_image

log = logging.getLogger(__name__)


def greedy_decode(params, config, feature, max_len=None):
    """Feed the most probable word back in until END.

    Returns ``(token_ids, truncated)``; ids exclude START/END.  Ties go to the
    lowest id (``np.argmax`` returns the first maximum).
    """
    max_len = config.max_decode_len if max_len is None else max_len
    feature = T.as_vector(feature)
    if feature.shape[0] != config.feature_dim:
        raise T.ShapeError(f"feature length {feature.shape[0]} != feature_dim {config.feature_dim}")
    proj = project_image(params, feature)
    h = np.zeros(config.hidden_dim, dtype=T.DTYPE)
    tok = START
    out = []
    for t in range(1, max_len + 1):
        _, hs, _, y = _step(params, config, params["E"][tok], h, proj, t)
        tok = int(np.argmax(y))
        if tok == END:
            return out, False
        out.append(tok)
        h = hs[-1]
    return out, True


# -- BLEU --------------------------------------------------------------------


def ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidates, references, n):
    """Corpus totals ``(clipped_matches, total_ngrams)`` for order ``n``.

    Each candidate n-gram count is clipped at its maximum count in any one
    of that candidate's references.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    matches = total = 0
    for cand, refs in zip(candidates, references):
        counts = ngrams(cand, n)
        max_ref = Counter()
        for ref in refs:
            for g, c in ngrams(ref, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        matches += sum(min(c, max_ref[g]) for g, c in counts.items())
        total += sum(counts.values())
    return matches, total


def closest_ref_length(cand_len, refs):
    return min((len(r) for r in refs), key=lambda L: (abs(L - cand_len), L))


def brevity_penalty(c, r):
    if c == 0:
        log.warning("empty candidate corpus: brevity penalty set to 0")
        return 0.0
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


@dataclass
class BleuReport:
    bleu: tuple  # B-1..B-max_n on the 0..100 scale
    precisions: tuple
    bp: float
    c: int
    r: int

    def line(self):
        parts = [f"B-{i} {b:.2f}" for i, b in enumerate(self.bleu, start=1)]
        return " ".join(parts) + f" BP {self.bp:.4f} c {self.c} r {self.r}"


def corpus_bleu(candidates, references, max_n=4):
    """Unsmoothed corpus BLEU with closest-reference-length brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if not candidates:
        raise ValueError("empty corpus")
    for refs in references:
        if not refs:
            raise ValueError("every candidate needs at least one reference")
    c = sum(len(cand) for cand in candidates)
    r = sum(closest_ref_length(len(cand), refs) for cand, refs in zip(candidates, references))
    bp = brevity_penalty(c, r)
    precisions, scores = [], []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        m, tot = modified_precision(candidates, references, n)
        p = m / tot if tot else 0.0
        precisions.append(p)
        if p == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(p)
        scores.append(100.0 * bp * math.exp(log_sum / n))
    return BleuReport(tuple(scores), tuple(precisions), bp, c, r)


def evaluate_model(params, config, items, vocab, max_n=4):
    """Greedy-decode every image in ``items`` and score against its references.

    Returns ``(report, captions)`` where captions is a list of
    ``(image_id, tokens, truncated)``.
    """
    if not items:
        raise ValueError("no images to evaluate")
    candidates, refs, captions = [], [], []
    for img in items:
        ids, truncated = greedy_decode(params, config, img.feature)
        toks = vocab.decode(ids)
        captions.append((img.image_id, toks, truncated))
        candidates.append(toks)
        refs.append(img.references or [vocab.decode(c) for c in img.captions])
    return corpus_bleu(candidates, refs, max_n), captions
