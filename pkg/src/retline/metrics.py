"""Edit-distance transcription metrics: character and word error rates."""

from __future__ import annotations


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs.

    Works on any indexable sequences (strings for CER, word lists for WER).
    """
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(
                prev[j] + 1,                        # delete from a
                cur[j - 1] + 1,                     # insert into a
                prev[j - 1] + (ca != cb),           # substitute
            ))
        prev = cur
    return prev[-1]


def cer(hyp: str, ref: str) -> float:
    """Character error rate: edit distance over reference length."""
    if len(ref) == 0:
        raise ValueError("reference must be nonempty for a finite rate")
    return edit_distance(hyp, ref) / len(ref)


def wer(hyp: str, ref: str) -> float:
    """Word error rate over whitespace-split tokens."""
    ref_words = ref.split()
    if not ref_words:
        raise ValueError("reference must contain at least one word")
    return edit_distance(hyp.split(), ref_words) / len(ref_words)
