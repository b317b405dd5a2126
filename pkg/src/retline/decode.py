"""Greedy and beam-search decoding over two memory disciplines.

The recurrent backend carries a fixed-size retention state per (layer, head)
for every live hypothesis, so its per-step cost and live element count never
change as the transcript grows. The kv backend carries the growing per-layer
text key/value history instead, gathering (reindexing) it whenever beam
pruning reorders hypotheses and reallocating on every append; its per-step
cost and footprint grow with decoded length. Both compute exactly the same
next-token distributions for a retention model, which is what the
cross-backend equivalence checks exploit. The attention twin only supports
the kv backend (softmax over text history has no recurrent form).

Stats rows record, per step: scalar multiply/add counts from the tensor
instrumentation and the live state elements held by all lanes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EOS_ID, PAD_ID, SOS_ID
from .fusion import ImageKVCache
from .model import Model
from .tensor import OpCounter, Tensor, count_ops

BACKENDS = ("recurrent", "kv")

STATS_COLUMNS = ("step", "backend", "beam", "mults", "adds", "live_elements")


@dataclass(frozen=True)
class Hypothesis:
    """One partial transcript: generated character ids (no specials), the
    cumulative log-probability, and whether EOS has been emitted."""

    tokens: tuple
    score: float
    finished: bool = False


@dataclass
class RecurrentDecodeState:
    """Per-lane, per-(layer, head) retention states over a shared image cache.
    Lane size is layers * heads * d_head^2 elements, independent of length."""

    lanes: list  # lanes[lane][layer][head] -> RetentionState
    cache: ImageKVCache

    def live_elements(self) -> int:
        return sum(
            state.elements
            for lane in self.lanes for layer in lane for state in layer
        )

    def reindex(self, parents) -> "RecurrentDecodeState":
        # states are updated functionally, so sharing across children is safe
        lanes = [[list(layer) for layer in self.lanes[p]] for p in parents]
        return RecurrentDecodeState(lanes=lanes, cache=self.cache)


@dataclass
class KVDecodeState:
    """Per-lane, per-layer text key/value history over a shared image cache.
    After t steps each lane holds 2 * t * d_model elements per layer. Under
    data-dependent decay the cache also carries each position's cumulative
    log-gate row (one scalar per head, not counted against the key/value
    element formula)."""

    keys: list    # keys[lane][layer] -> (t, d) array or None before any step
    values: list
    cache: ImageKVCache
    gate_logs: list | None = None  # gate_logs[lane][layer] -> (t, H) or None

    def live_elements(self) -> int:
        total = 0
        for lane_keys, lane_values in zip(self.keys, self.values):
            for k, v in zip(lane_keys, lane_values):
                if k is not None:
                    total += k.size + v.size
        return total


def kv_reindex(state: KVDecodeState, parent_indices) -> KVDecodeState:
    """Gather every layer's cache rows by parent index into freshly allocated
    arrays (beam pruning cannot reuse the old storage in place)."""
    lanes = len(state.keys)
    for p in parent_indices:
        if not 0 <= p < lanes:
            raise ValueError(f"parent index {p} out of range for {lanes} lanes")
    keys = [[None if k is None else k.copy() for k in state.keys[p]]
            for p in parent_indices]
    values = [[None if v is None else v.copy() for v in state.values[p]]
              for p in parent_indices]
    gate_logs = None
    if state.gate_logs is not None:
        gate_logs = [[None if g is None else g.copy()
                      for g in state.gate_logs[p]] for p in parent_indices]
    return KVDecodeState(keys=keys, values=values, cache=state.cache,
                         gate_logs=gate_logs)


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple         # character ids, specials stripped
    score: float
    finished: bool
    stats: tuple          # one dict per step, STATS_COLUMNS keys


def _lane_logits_recurrent(model, state, lane, token_id, position):
    x = model.embed_text_step(token_id, position)
    lanes = state.lanes[lane]
    for li, layer in enumerate(model.layers):
        x, lanes[li] = layer.step_recurrent(x, lanes[li], state.cache.layer(li))
    return model.head_logits(x)


def _lane_logits_kv(model, state, lane, token_id, position):
    x = model.embed_text_step(token_id, position)
    for li, layer in enumerate(model.layers):
        gate_logs = (None if state.gate_logs is None
                     else state.gate_logs[lane][li])
        x, k_new, v_new, logs_new = layer.step_kv(
            x, state.keys[lane][li], state.values[lane][li],
            state.cache.layer(li), gate_logs,
        )
        old_k, old_v = state.keys[lane][li], state.values[lane][li]
        state.keys[lane][li] = (
            k_new if old_k is None else np.vstack([old_k, k_new])
        )
        state.values[lane][li] = (
            v_new if old_v is None else np.vstack([old_v, v_new])
        )
        if logs_new is not None:
            state.gate_logs[lane][li] = (
                logs_new[None, :] if gate_logs is None
                else np.vstack([gate_logs, logs_new])
            )
    return model.head_logits(x)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def beam_search(model: Model, image: Tensor, beam: int,
                max_len: int | None = None,
                backend: str = "recurrent") -> DecodeResult:
    """Length-unnormalized beam search.

    Candidates are ranked by cumulative log-probability with deterministic
    tie-breaking (higher score, then parent order, then smaller token id).
    Finished hypotheses are held aside and their freed slots refill from the
    candidate pool; search stops at max_len or once no live hypothesis can
    still beat the best finished one.
    """
    if beam < 1:
        raise ValueError("beam size must be at least 1")
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "recurrent" and model.config.mixer != "retention":
        raise ValueError("the attention mixer has no recurrent decode form")
    if max_len is None:
        max_len = model.config.max_text_len
    cache = model.build_image_cache(image)

    if backend == "recurrent":
        state = RecurrentDecodeState(lanes=[model.fresh_states()], cache=cache)
    else:
        layers = model.config.layers
        gated = (model.config.mixer == "retention"
                 and model.config.gamma_strategy == "gated")
        state = KVDecodeState(keys=[[None] * layers], values=[[None] * layers],
                              cache=cache,
                              gate_logs=[[None] * layers] if gated else None)
    live = [Hypothesis(tokens=(), score=0.0)]
    finished: list[Hypothesis] = []
    stats = []

    # every token id except the specials PAD and SOS may be emitted
    candidate_ids = [i for i in range(model.config.vocab_size)
                     if i not in (PAD_ID, SOS_ID)]

    for step in range(1, max_len + 1):
        counter = OpCounter()
        scored = []
        with count_ops(counter):
            for lane, hyp in enumerate(live):
                token = hyp.tokens[-1] if hyp.tokens else SOS_ID
                if backend == "recurrent":
                    logits = _lane_logits_recurrent(model, state, lane, token,
                                                    step - 1)
                else:
                    logits = _lane_logits_kv(model, state, lane, token, step - 1)
                logp = _log_softmax(logits)
                for tok in candidate_ids:
                    scored.append((hyp.score + logp[tok], lane, tok))
        # higher score first; ties toward earlier parent, then smaller id
        scored.sort(key=lambda c: (-c[0], c[1], c[2]))

        new_live, parents = [], []
        for score, lane, tok in scored:
            if tok == EOS_ID:
                finished.append(Hypothesis(tokens=live[lane].tokens, score=score,
                                           finished=True))
            elif len(new_live) < beam:
                new_live.append(Hypothesis(tokens=live[lane].tokens + (tok,),
                                           score=score))
                parents.append(lane)
        if backend == "recurrent":
            state = state.reindex(parents)
        else:
            state = kv_reindex(state, parents)
        live = new_live
        stats.append({
            "step": step,
            "backend": backend,
            "beam": beam,
            "mults": counter.mults,
            "adds": counter.adds,
            "live_elements": state.live_elements(),
        })
        if not live:
            break
        best_finished = max((h.score for h in finished), default=-np.inf)
        if best_finished >= live[0].score:
            break

    if finished:
        # ties: higher score, then shorter, then lexicographically smallest
        best = min(finished,
                   key=lambda h: (-h.score, len(h.tokens), h.tokens))
    else:
        best = live[0]
    return DecodeResult(tokens=best.tokens, score=best.score,
                        finished=best.finished, stats=tuple(stats))


def greedy_decode(model: Model, image: Tensor,
                  max_len: int | None = None,
                  backend: str = "recurrent") -> DecodeResult:
    """Argmax decoding; identical to beam_search with a single slot, including
    the smallest-token-id tie break."""
    return beam_search(model, image, beam=1, max_len=max_len, backend=backend)


def decode_transcript(model: Model, vocab, image: Tensor, beam: int = 1,
                      max_len: int | None = None,
                      backend: str = "recurrent") -> tuple:
    """Decode and map ids back to text; returns (transcript, result)."""
    result = beam_search(model, image, beam=beam, max_len=max_len,
                         backend=backend)
    text = "".join(vocab.id_to_char(t) for t in result.tokens)
    return text, result


def write_stats_csv(path, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(STATS_COLUMNS) + "\n")
        for result in results:
            for row in result.stats:
                fh.write(",".join(str(row[c]) for c in STATS_COLUMNS) + "\n")
