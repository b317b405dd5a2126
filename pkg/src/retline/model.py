"""Line-recognition decoder: embedders, mixer blocks, vocabulary head, loss.

One Model class covers both variants. With mixer="retention" every block runs
the fusion layer (softmax against image keys, decay-weighted retention
between text tokens), which is what admits constant-memory recurrent
decoding. With mixer="attention" the block is a conventional multi-head
softmax attention over the concatenated sequence (image queries restricted
to image keys, text queries to image plus causal text keys) and decoding
must carry a growing key/value cache. Both variants share identical
parameter names and shapes, so they are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EOS_ID, PAD_ID, SOS_ID
from .fusion import (
    ARMFHeadConfig,
    ARMFProjections,
    FusionSequence,
    IMAGE_PRIORS,
    ImageKVCache,
    armf_cache_image,
    marmf_forward,
    marmf_recurrent_step,
)
from .retention import GAMMA_STRATEGIES, GammaSchedule, RetentionState
from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    dropout,
    embedding_rows,
    gelu,
    layer_norm,
    log_softmax_rows,
    masked_softmax_rows,
    matmul,
    mul_const,
    permute,
    reshape,
    scale,
    scale_rows,
    slice_cols,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
    unfold,
)

MIXERS = ("retention", "attention")

_CNN_STRIDES = ((2, 1), (2, 2), (2, 2))  # stage 1 keeps full width resolution
_CNN_KERNEL = 5
_CNN_PAD = 2
_HEIGHT_DIVISOR = 8  # product of the height strides


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_text_len: int
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    mixer: str = "retention"
    gamma_strategy: str = "layerwise"
    gamma_subtractor: float = 0.86
    tau: float = 16.0
    image_prior: str = "none"
    dropout_mix: float = 0.3
    dropout_embed: float = 0.1
    height: int = 32
    cnn_channels: tuple = (8, 16, 16)
    max_image_tokens: int = 512

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocabulary needs at least one character plus specials")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if self.mixer not in MIXERS:
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if self.gamma_strategy not in GAMMA_STRATEGIES:
            raise ValueError(f"unknown gamma strategy {self.gamma_strategy!r}")
        if self.image_prior not in IMAGE_PRIORS:
            raise ValueError(f"unknown image prior {self.image_prior!r}")
        if self.height % _HEIGHT_DIVISOR != 0:
            raise ValueError(
                f"line height must be divisible by {_HEIGHT_DIVISOR}"
            )
        if len(self.cnn_channels) != 3:
            raise ValueError("the image embedder has exactly three stages")
        if self.max_text_len < 3:
            raise ValueError("max_text_len must fit SOS, one token, and EOS")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class TrainContext:
    """Carries the dropout stream; absent context means eval (deterministic)."""

    rng: np.random.Generator


def _f32(arr: np.ndarray) -> np.ndarray:
    # parameters live as float64 values that are exactly float32-representable,
    # so the float32 checkpoint blob round-trips bitwise
    return arr.astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class ImageFeature:
    """Visual feature map folded into a token sequence: one token per feature
    column, projected to model width, with learned positions added."""

    feature_shape: tuple  # (channels, rows, columns) before folding
    tokens: Tensor        # (columns, d_model)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class TextBatch:
    ids: np.ndarray
    tokens: Tensor  # (len, d_model) embeddings plus sinusoidal positions


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    """PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same)."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / (10000.0 ** (i / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


class DecoderLayer:
    """One block: token mixer, then position-wise feed-forward, each wrapped
    as sublayer -> residual add -> layer norm."""

    def __init__(self, model: "Model", index: int):
        self.model = model
        self.index = index
        cfg = model.config
        p = model.params
        pre = f"layer{index}."
        self.projections = ARMFProjections(
            wq=p[pre + "wq"], wk=p[pre + "wk"], wv=p[pre + "wv"], wo=p[pre + "wo"]
        )
        self.head_cfg = ARMFHeadConfig(
            d_model=cfg.d_model, heads=cfg.heads, image_prior=cfg.image_prior
        )
        self.gate_weights = p.get(pre + "w_gamma")
        self.ln = {k: p[pre + k] for k in
                   ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")}
        self.pff = {k: p[pre + k] for k in ("pff_w1", "pff_b1", "pff_w2", "pff_b2")}

    # --- parallel (training) path

    def forward(self, seq: FusionSequence, train: TrainContext | None) -> Tensor:
        mixed = self._mix(seq)
        if train is not None:
            mixed = dropout(mixed, self.model.config.dropout_mix, train.rng)
        return self._post(seq.x, mixed, train)

    def _mix(self, seq: FusionSequence) -> Tensor:
        if self.model.config.mixer == "retention":
            return marmf_forward(
                seq, self.index, self.model.schedule, self.projections,
                self.head_cfg, gate_weights=self.gate_weights,
            )
        return self._attention_mix(seq)

    def _attention_mix(self, seq: FusionSequence) -> Tensor:
        cfg = self.model.config
        x, n_image = seq.x, seq.n_image
        n = x.shape[0]
        allow = np.zeros((n, n), dtype=bool)
        allow[:, :n_image] = True
        for r in range(seq.n_text):
            allow[n_image + r, n_image:n_image + r + 1] = True
        q = matmul(x, self.projections.wq)
        k = matmul(x, self.projections.wk)
        v = matmul(x, self.projections.wv)
        dh = cfg.d_head
        inv = 1.0 / np.sqrt(dh)
        heads = []
        for h in range(cfg.heads):
            qh = slice_cols(q, h * dh, (h + 1) * dh)
            kh = slice_cols(k, h * dh, (h + 1) * dh)
            vh = slice_cols(v, h * dh, (h + 1) * dh)
            attn = masked_softmax_rows(scale(matmul(qh, transpose(kh)), inv), allow)
            heads.append(matmul(attn, vh))
        merged = heads[0] if len(heads) == 1 else concat_cols(heads)
        return matmul(merged, self.projections.wo)

    def _post(self, x: Tensor, mixed: Tensor, train: TrainContext | None) -> Tensor:
        cfg = self.model.config
        y = layer_norm(add(x, mixed), self.ln["ln1_gain"], self.ln["ln1_bias"])
        hidden = gelu(add(matmul(y, self.pff["pff_w1"]), self.pff["pff_b1"]))
        if train is not None:
            hidden = dropout(hidden, cfg.dropout_mix, train.rng)
        ff = add(matmul(hidden, self.pff["pff_w2"]), self.pff["pff_b2"])
        return layer_norm(add(y, ff), self.ln["ln2_gain"], self.ln["ln2_bias"])

    # --- image-only path for cache building (text rows cannot influence it)

    def advance_image(self, x_img: Tensor) -> Tensor:
        seq = FusionSequence(x_img, n_image=x_img.shape[0], n_text=0)
        return self.forward(seq, train=None)

    # --- recurrent decode path (retention mixer only)

    def layer_gammas(self, x_row: Tensor) -> np.ndarray:
        """Per-head decay factors for one decode step."""
        cfg = self.model.config
        if cfg.gamma_strategy == "gated":
            z = x_row.data @ self.gate_weights.data
            return ((1.0 / (1.0 + np.exp(-z))) ** (1.0 / cfg.tau))[0]
        return self.model.schedule.layer_values(self.index)

    def step_recurrent(self, x_row: Tensor, states: list, cache_entry: tuple):
        mixed, new_states = marmf_recurrent_step(
            states, cache_entry, x_row, self.projections, self.head_cfg,
            self.layer_gammas(x_row),
        )
        return self._post(x_row, mixed, None), new_states

    # --- cached decode path (either mixer; cache grows with decoded length)

    def step_kv(self, x_row: Tensor, text_keys, text_values, cache_entry: tuple,
                gate_logs=None):
        """One decode step against the cached text history. Returns the block
        output plus this step's key/value rows (and, under the gated
        strategy, the position's cumulative log-gate row) for the caller to
        append to its cache."""
        cfg = self.model.config
        k_img, v_img = cache_entry
        q = matmul(x_row, self.projections.wq)
        k_new = matmul(x_row, self.projections.wk)
        v_new = matmul(x_row, self.projections.wv)
        t_prev = 0 if text_keys is None else text_keys.shape[0]
        keys = k_new.data if text_keys is None else np.vstack([text_keys, k_new.data])
        values = (
            v_new.data if text_values is None else np.vstack([text_values, v_new.data])
        )
        dh = cfg.d_head
        inv = 1.0 / np.sqrt(dh)
        heads = []
        logs_new = None
        if cfg.mixer == "retention":
            gammas = self.layer_gammas(x_row)
            if cfg.gamma_strategy == "gated":
                # product-form decay: weight(m) = exp(L_t - L_m) over the
                # cached cumulative log-gate sums L
                step_logs = np.log(gammas)
                logs_new = (step_logs if gate_logs is None
                            else gate_logs[-1] + step_logs)
                all_logs = (logs_new[None, :] if gate_logs is None
                            else np.vstack([gate_logs, logs_new]))
                decay_rows = np.exp(all_logs[-1][None, :] - all_logs).T  # (H, t+1)
            else:
                offsets = np.arange(t_prev, -1, -1, dtype=np.float64)
                decay_rows = gammas[:, None] ** offsets[None, :]
            for h in range(cfg.heads):
                sl = slice(h * dh, (h + 1) * dh)
                qh = slice_cols(q, sl.start, sl.stop)
                text_dots = scale(
                    matmul(qh, Tensor._wrap(keys[:, sl].T.copy(), False)), inv
                )
                decayed = mul_const(text_dots, decay_rows[h][None, :])
                o_text = matmul(decayed, Tensor._wrap(values[:, sl].copy(), False))
                img_dots = scale(
                    matmul(qh, Tensor._wrap(k_img[:, sl].T.copy(), False)), inv
                )
                o_img = matmul(
                    softmax_rows(img_dots), Tensor._wrap(v_img[:, sl].copy(), False)
                )
                heads.append(add(o_text, o_img))
        else:
            for h in range(cfg.heads):
                sl = slice(h * dh, (h + 1) * dh)
                qh = slice_cols(q, sl.start, sl.stop)
                all_keys = np.vstack([k_img[:, sl], keys[:, sl]])
                all_values = np.vstack([v_img[:, sl], values[:, sl]])
                dots = scale(matmul(qh, Tensor._wrap(all_keys.T.copy(), False)), inv)
                attn = softmax_rows(dots)
                heads.append(matmul(attn, Tensor._wrap(all_values, False)))
        merged = heads[0] if len(heads) == 1 else concat_cols(heads)
        mixed = matmul(merged, self.projections.wo)
        return self._post(x_row, mixed, None), k_new.data, v_new.data, logs_new


class Model:
    """Decoder over a fused image+text token sequence."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(np.random.SeedSequence(
            entropy=[seed, 2])))
        if config.mixer == "retention" and config.gamma_strategy != "gated":
            # fail fast if the schedule is infeasible for this depth/width
            GammaSchedule(config.gamma_strategy, config.layers, config.heads,
                          config.gamma_subtractor, config.tau).values()
        self.layers = [DecoderLayer(self, i) for i in range(config.layers)]

    @property
    def schedule(self) -> GammaSchedule:
        cfg = self.config
        return GammaSchedule(cfg.gamma_strategy, cfg.layers, cfg.heads,
                             cfg.gamma_subtractor, cfg.tau)

    # --- parameters

    def _param(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(_f32(arr), requires_grad=True)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        c_in = 1
        for stage, c_out in enumerate(cfg.cnn_channels):
            fan_in = c_in * _CNN_KERNEL * _CNN_KERNEL
            self._param(f"cnn{stage}_w",
                        rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, c_out)))
            self._param(f"cnn{stage}_b", np.zeros(c_out))
            c_in = c_out
        feat = cfg.cnn_channels[-1] * (cfg.height // _HEIGHT_DIVISOR)
        self._param("img_proj_w",
                    rng.normal(0.0, 1.0 / np.sqrt(feat), (feat, cfg.d_model)))
        self._param("img_proj_b", np.zeros(cfg.d_model))
        self._param("img_pos",
                    rng.uniform(-0.02, 0.02, (cfg.max_image_tokens, cfg.d_model)))
        self._param("char_embed",
                    rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_model)))
        d, dff = cfg.d_model, cfg.d_ff
        for i in range(cfg.layers):
            pre = f"layer{i}."
            for w in ("wq", "wk", "wv", "wo"):
                self._param(pre + w, rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
            if cfg.mixer == "retention" and cfg.gamma_strategy == "gated":
                self._param(pre + "w_gamma",
                            rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.heads)))
            self._param(pre + "ln1_gain", np.ones(d))
            self._param(pre + "ln1_bias", np.zeros(d))
            self._param(pre + "ln2_gain", np.ones(d))
            self._param(pre + "ln2_bias", np.zeros(d))
            self._param(pre + "pff_w1", rng.normal(0.0, np.sqrt(2.0 / d), (d, dff)))
            self._param(pre + "pff_b1", np.zeros(dff))
            self._param(pre + "pff_w2", rng.normal(0.0, 1.0 / np.sqrt(dff), (dff, d)))
            self._param(pre + "pff_b2", np.zeros(d))
        self._param("head_w", rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.vocab_size)))
        self._param("head_b", np.zeros(cfg.vocab_size))

    def parameter_shapes(self) -> dict:
        return {name: t.shape for name, t in self.params.items()}

    def snap_params_to_f32(self) -> None:
        for t in self.params.values():
            t.data = _f32(t.data)

    # --- embedders

    def image_token_count(self, width: int) -> int:
        w = width
        for _, sw in _CNN_STRIDES:
            w = (w - 1) // sw + 1
        return w

    def embed_image(self, image: Tensor, train: TrainContext | None = None) -> ImageFeature:
        cfg = self.config
        if image.data.ndim != 3 or image.shape[0] != 1:
            raise ValueError("expected a (1, h, w) grayscale image")
        if image.shape[1] != cfg.height:
            raise ValueError(
                f"image height {image.shape[1]} != configured {cfg.height}"
            )
        x = image
        for stage in range(3):
            cols, oh, ow = unfold(x, kernel=_CNN_KERNEL,
                                  stride=_CNN_STRIDES[stage], pad=_CNN_PAD)
            y = add(matmul(cols, self.params[f"cnn{stage}_w"]),
                    self.params[f"cnn{stage}_b"])
            y = gelu(y)
            c_out = self.config.cnn_channels[stage]
            x = permute(reshape(y, (oh, ow, c_out)), (2, 0, 1))
        c, hv, wv = x.shape
        if wv > cfg.max_image_tokens:
            raise ValueError(
                f"image yields {wv} tokens, above max_image_tokens={cfg.max_image_tokens}"
            )
        folded = reshape(permute(x, (2, 0, 1)), (wv, c * hv))
        tokens = add(matmul(folded, self.params["img_proj_w"]),
                     self.params["img_proj_b"])
        tokens = add(tokens, slice_rows(self.params["img_pos"], 0, wv))
        if train is not None:
            tokens = dropout(tokens, cfg.dropout_embed, train.rng)
        return ImageFeature(feature_shape=(c, hv, wv), tokens=tokens)

    def embed_text(self, ids, train: TrainContext | None = None) -> TextBatch:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("expected a flat id sequence")
        if ids.size and ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        emb = embedding_rows(self.params["char_embed"], ids)
        pe = sinusoidal_positions(ids.size, self.config.d_model)
        tokens = add(emb, Tensor._wrap(pe, False))
        if train is not None:
            tokens = dropout(tokens, self.config.dropout_embed, train.rng)
        return TextBatch(ids=ids, tokens=tokens)

    def embed_text_step(self, token_id: int, position: int) -> Tensor:
        emb = embedding_rows(self.params["char_embed"], [int(token_id)])
        pe = sinusoidal_positions(position + 1, self.config.d_model)[-1:]
        return add(emb, Tensor._wrap(pe, False))

    # --- forward passes

    def forward(self, image: Tensor, input_ids,
                train: TrainContext | None = None,
                capture_inputs: list | None = None) -> Tensor:
        """Teacher-forced logits over the text positions, shape (N_T, vocab)."""
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("training forward needs at least one text token")
        img = self.embed_image(image, train)
        txt = self.embed_text(ids, train)
        x = concat_rows([img.tokens, txt.tokens])
        n_image, n_text = img.count, ids.size
        for layer in self.layers:
            seq = FusionSequence(x, n_image, n_text)
            if capture_inputs is not None:
                capture_inputs.append(seq)
            x = layer.forward(seq, train)
        text_x = slice_rows(x, n_image, n_image + n_text)
        return add(matmul(text_x, self.params["head_w"]), self.params["head_b"])

    def build_image_cache(self, image: Tensor) -> ImageKVCache:
        """Per-layer image keys/values, computed once before decoding."""
        return armf_cache_image(self.embed_image(image).tokens, self.layers)

    def fresh_states(self) -> list:
        """Per-(layer, head) retention states for one decode lane."""
        return [
            [RetentionState.fresh(self.config.d_head)
             for _ in range(self.config.heads)]
            for _ in range(self.config.layers)
        ]

    def head_logits(self, x_row: Tensor) -> np.ndarray:
        out = add(matmul(x_row, self.params["head_w"]), self.params["head_b"])
        return out.data[0]


def training_loss(logits: Tensor, targets, epsilon: float = 0.4) -> Tensor:
    """Label-smoothed cross-entropy over non-PAD positions, averaged.

    Targets are the inputs shifted by one (position t predicts token t+1);
    image positions never reach this loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError("targets must align with logits rows")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target id out of vocabulary range")
    mask = targets != PAD_ID
    valid = int(mask.sum())
    if valid == 0:
        raise ValueError("loss undefined: every target position is PAD")
    smooth = np.full((n, v), epsilon / v)
    smooth[np.arange(n), targets] += 1.0 - epsilon
    logp = log_softmax_rows(logits)
    per_pos = mul_const(logp, -smooth / valid)
    return sum_all(scale_rows(per_pos, mask.astype(np.float64)))


def teacher_pair(tokens: np.ndarray) -> tuple:
    """Split a padded [SOS, chars..., EOS, PAD...] row into teacher-forced
    inputs and next-token targets, trimmed at EOS."""
    tokens = np.asarray(tokens, dtype=np.int64)
    eos_positions = np.flatnonzero(tokens == EOS_ID)
    if tokens.size < 2 or tokens[0] != SOS_ID or eos_positions.size == 0:
        raise ValueError("token row must start with SOS and contain EOS")
    end = int(eos_positions[0])
    return tokens[:end], tokens[1:end + 1]
