"""Fusion layer mixing softmax attention and retention over one sequence.

The sequence concatenates image tokens (first) and text tokens (second).
Scores against image keys go through a row-wise softmax, so any query can
align freely with the image; scores against text keys are weighted by a
causal decay mask whose zero rows also firewall image queries away from text
entirely. Because the image block is position-independent row by row, the
whole layer collapses to a constant-cost recurrence at decode time: a
fixed-size retention state per head plus one softmax over the precomputed
image keys/values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .retention import (
    GammaSchedule,
    RetentionState,
    build_decay,
    build_decay_bidirectional,
    gamma_schedule,
)
from .tensor import (
    Tensor,
    concat_cols,
    concat_rows,
    cumsum0,
    exp,
    log,
    matmul,
    mul,
    mul_const,
    normalize_rows,
    pow_const,
    scale,
    sigmoid,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)

# none: plain softmax between image tokens; fixed: reweighted by a
# bidirectional decay whose per-head gamma is the depth-independent original
# schedule; layerwise: reweighted by the same gamma the head uses for text
IMAGE_PRIORS = ("none", "fixed", "layerwise")


@dataclass(frozen=True)
class FusionSequence:
    """Concatenated image+text token sequence with its partition point."""

    x: Tensor
    n_image: int
    n_text: int

    def __post_init__(self):
        if self.n_image < 1:
            raise ValueError("fusion needs at least one image token")
        if self.n_text < 0:
            raise ValueError("text token count cannot be negative")
        if self.x.shape[0] != self.n_image + self.n_text:
            raise ValueError(
                f"sequence rows {self.x.shape[0]} != {self.n_image} + {self.n_text}"
            )


@dataclass(frozen=True)
class ARMFProjections:
    """Query/key/value/output projection weights for one fusion layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass(frozen=True)
class ARMFMask:
    """Dependency mask over text keys: zero rows for image queries, causal
    decay for text queries, ones on the text-query diagonal."""

    entries: np.ndarray  # (N, N_T)


@dataclass(frozen=True)
class ARMFHeadConfig:
    """Static head layout for one fusion layer: width, head count, and how the
    image-to-image block is (optionally) reweighted by a bidirectional decay
    prior over token-index distance."""

    d_model: int
    heads: int
    image_prior: str = "none"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if self.image_prior not in IMAGE_PRIORS:
            raise ValueError(f"unknown image prior {self.image_prior!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def build_armf_mask(n_image: int, n_text: int, gamma: float) -> ARMFMask:
    if n_image < 1:
        raise ValueError("mask needs at least one image token")
    if n_text == 0:
        return ARMFMask(entries=np.zeros((n_image, 0)))
    causal = build_decay(n_text, gamma).entries
    return ARMFMask(entries=np.vstack([np.zeros((n_image, n_text)), causal]))


def _image_block(dots_img: Tensor, n_image: int, prior_gamma: float | None) -> Tensor:
    """Row-wise softmax over image keys, optionally reweighted for image-query
    rows by the bidirectional decay prior and renormalized."""
    soft = softmax_rows(dots_img)
    if prior_gamma is None:
        return soft
    prior = build_decay_bidirectional(n_image, prior_gamma).entries
    img_rows = normalize_rows(mul_const(slice_rows(soft, 0, n_image), prior))
    n = dots_img.shape[0]
    if n == n_image:
        return img_rows
    return concat_rows([img_rows, slice_rows(soft, n_image, n)])


def _gated_text_decay(gates: Tensor) -> Tensor:
    """Differentiable product-form decay from per-position gates: entry (i, j)
    = prod of gates j+1..i below the diagonal, built as exp of cumulative
    log-gate differences."""
    n = gates.shape[0]
    logs = log(gates)  # (n, 1)
    cum = cumsum0(logs)
    ones = Tensor(np.ones((1, n)))
    diff = matmul(cum, ones)  # row i holds cum[i]
    diff = diff - transpose(diff)  # cum[i] - cum[j]
    tril = np.tril(np.ones((n, n)))
    return mul(exp(mul_const(diff, tril)), Tensor(tril))


def _armf_single_head(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_image: int,
    n_text: int,
    gamma,
    prior_gamma: float | None,
) -> Tensor:
    """Core fusion for one head. `gamma` is a float for fixed decay or a
    (n_text, 1) gate tensor for data-dependent decay. Scores are scaled by
    1/sqrt(d_head) before both the softmax and the decay mask."""
    d_head = q.shape[1]
    dots = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d_head))
    dots_img = slice_cols(dots, 0, n_image)
    img = _image_block(dots_img, n_image, prior_gamma)
    if n_text == 0:
        return matmul(img, slice_rows(v, 0, n_image))
    dots_text = slice_cols(dots, n_image, n_image + n_text)
    if isinstance(gamma, Tensor):
        decay = _gated_text_decay(gamma)
        text_queries = slice_rows(dots_text, n_image, n_image + n_text)
        text = concat_rows(
            [Tensor(np.zeros((n_image, n_text))), mul(text_queries, decay)]
        )
    else:
        mask = build_armf_mask(n_image, n_text, gamma)
        text = mul_const(dots_text, mask.entries)
    ret = concat_cols([img, text])
    return matmul(ret, v)


def armf_parallel(
    seq: FusionSequence,
    proj: ARMFProjections,
    gamma: float,
    prior_gamma: float | None = None,
) -> Tensor:
    """Single-head parallel fusion over the full width (no output projection):
    softmax(image scores) next to decay-masked text scores, times V."""
    q = matmul(seq.x, proj.wq)
    k = matmul(seq.x, proj.wk)
    v = matmul(seq.x, proj.wv)
    return _armf_single_head(
        q, k, v, seq.n_image, seq.n_text, gamma, prior_gamma
    )


def marmf_forward(
    seq: FusionSequence,
    layer_index: int,
    schedule,
    proj: ARMFProjections,
    cfg: ARMFHeadConfig,
    gate_weights: Tensor | None = None,
) -> Tensor:
    """Multi-head fusion: each head runs with its own scheduled gamma, heads
    are concatenated, and the result goes through the output projection.
    No group normalization and no gate follow the heads.

    With the gated schedule, per-position gates come from the text-token
    inputs through `gate_weights` instead of the fixed table.
    """
    if not 0 <= layer_index < schedule.layers:
        raise ValueError(f"layer index {layer_index} out of range")
    if schedule.heads != cfg.heads:
        raise ValueError("schedule and head config disagree on head count")
    q = matmul(seq.x, proj.wq)
    k = matmul(seq.x, proj.wk)
    v = matmul(seq.x, proj.wv)
    gated = schedule.strategy == "gated"
    if gated:
        if gate_weights is None:
            raise ValueError("gated schedule requires gate weights")
        if cfg.image_prior != "none":
            raise ValueError("the image prior needs a fixed-gamma schedule")
        if seq.n_text > 0:
            text_x = slice_rows(seq.x, seq.n_image, seq.n_image + seq.n_text)
            gates_all = pow_const(
                sigmoid(matmul(text_x, gate_weights)), 1.0 / schedule.tau
            )
    else:
        gammas = schedule.layer_values(layer_index)
    prior_gammas = image_prior_gammas(cfg, schedule, layer_index)
    dh = cfg.d_head
    heads = []
    for h in range(cfg.heads):
        qh = slice_cols(q, h * dh, (h + 1) * dh)
        kh = slice_cols(k, h * dh, (h + 1) * dh)
        vh = slice_cols(v, h * dh, (h + 1) * dh)
        if gated:
            gamma = slice_cols(gates_all, h, h + 1) if seq.n_text > 0 else 1.0
        else:
            gamma = float(gammas[h])
        prior = None if prior_gammas is None else float(prior_gammas[h])
        heads.append(
            _armf_single_head(qh, kh, vh, seq.n_image, seq.n_text, gamma, prior)
        )
    merged = heads[0] if len(heads) == 1 else concat_cols(heads)
    return matmul(merged, proj.wo)


def image_prior_gammas(cfg: ARMFHeadConfig, schedule, layer_index: int):
    """Per-head gammas for the bidirectional image prior, or None."""
    if cfg.image_prior == "none":
        return None
    if cfg.image_prior == "fixed":
        return gamma_schedule(GammaSchedule("original", 1, cfg.heads))[0]
    return schedule.layer_values(layer_index)


# ---------------------------------------------------------------------------
# recurrent form


@dataclass(frozen=True)
class ImageKVCache:
    """Per-layer image keys/values, computed once per input image and shared
    read-only across every decode lane."""

    keys: tuple
    values: tuple

    @property
    def layers(self) -> int:
        return len(self.keys)

    def layer(self, index: int) -> tuple:
        return self.keys[index], self.values[index]


def armf_cache_image(x_img: Tensor, layers) -> ImageKVCache:
    """Project the image tokens through every layer's K/V weights.

    Each element of `layers` exposes `.projections` and, except for the last,
    `.advance_image(x) -> x_next` carrying the image rows through the rest of
    the layer (fusion output, residuals, feed-forward) to feed the next one.
    """
    keys, values = [], []
    x = x_img
    for i, layer in enumerate(layers):
        keys.append(matmul(x, layer.projections.wk).data.copy())
        values.append(matmul(x, layer.projections.wv).data.copy())
        if i + 1 < len(layers):
            x = layer.advance_image(x)
    return ImageKVCache(keys=tuple(keys), values=tuple(values))


def armf_recurrent_step(
    state: RetentionState,
    k_img: np.ndarray,
    v_img: np.ndarray,
    x_n: Tensor,
    proj: ARMFProjections,
    gamma: float,
) -> tuple[Tensor, RetentionState]:
    """Single-head recurrent fusion step over the full width.

    The retention state absorbs the new key/value pair; the image term is one
    softmax over the cached image keys. The per-step cost depends on the image
    length only, never on how many text steps came before.
    """
    q = matmul(x_n, proj.wq)
    k = matmul(x_n, proj.wk)
    v = matmul(x_n, proj.wv)
    out, state = _fused_step(state, k_img, v_img, q, k, v, gamma)
    return out, state


def _fused_step(state, k_img, v_img, q, k, v, gamma):
    d_head = q.shape[1]
    inv = 1.0 / np.sqrt(d_head)
    kv = matmul(transpose(k), v)
    s_new = gamma * state.s + kv.data
    o_text = matmul(scale(q, inv), Tensor._wrap(s_new, False))
    img_dots = scale(matmul(q, Tensor._wrap(k_img.T.copy(), False)), inv)
    o_img = matmul(softmax_rows(img_dots), Tensor._wrap(v_img, False))
    return o_text + o_img, RetentionState(s=s_new, step=state.step + 1)


def marmf_recurrent_step(
    states: list,
    cache_layer: tuple,
    x_n: Tensor,
    proj: ARMFProjections,
    cfg: ARMFHeadConfig,
    gammas,
) -> tuple[Tensor, list]:
    """Multi-head recurrent fusion step; `gammas` holds one decay per head
    (data-dependent gates already evaluated for this position, if any)."""
    k_img, v_img = cache_layer
    q = matmul(x_n, proj.wq)
    k = matmul(x_n, proj.wk)
    v = matmul(x_n, proj.wv)
    dh = cfg.d_head
    outs, new_states = [], []
    for h in range(cfg.heads):
        sl = slice(h * dh, (h + 1) * dh)
        o, s = _fused_step(
            states[h],
            k_img[:, sl],
            v_img[:, sl],
            slice_cols(q, sl.start, sl.stop),
            slice_cols(k, sl.start, sl.stop),
            slice_cols(v, sl.start, sl.stop),
            float(gammas[h]),
        )
        outs.append(o)
        new_states.append(s)
    merged = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(merged, proj.wo), new_states
