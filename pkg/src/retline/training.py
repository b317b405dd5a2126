"""Training loop: decoupled weight decay, cosine annealing with warm restarts,
per-epoch held-out error rates, and a metrics CSV.

Gradients accumulate across the samples of a batch on one tape each; the
optimizer then takes a single step. Parameters are snapped back through
float32 after every update (training runs in the 32-bit regime; verification
math stays in doubles). A non-finite loss aborts immediately with context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Vocab, augment, tokenize
from .decode import greedy_decode
from .metrics import edit_distance
from .model import Model, TrainContext, teacher_pair, training_loss, _f32
from .tensor import Tape, backward, scale

METRICS_COLUMNS = ("epoch", "step", "lr", "loss", "val_cer", "val_wer")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    restart_epochs: int = 5


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    batch_size: int = 16
    label_smoothing: float = 0.4
    seed: int = 0
    augment_train: bool = False  # re-augment each sample every epoch
    stop_below_cer: float | None = None  # early-stop once held-out CER drops under


class AdamW:
    """Adam with decoupled weight decay; the decay is scaled by the learning
    rate, so lr = 0 leaves parameters bitwise untouched."""

    def __init__(self, params: dict, settings: OptimizerSettings):
        self.params = params
        self.s = settings
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape) for k, t in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        if lr == 0.0:
            return
        self.t += 1
        s = self.s
        bias1 = 1.0 - s.beta1 ** self.t
        bias2 = 1.0 - s.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = s.beta1 * self.m[name] + (1 - s.beta1) * g
            v = self.v[name] = s.beta2 * self.v[name] + (1 - s.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + s.eps)
            p.data = _f32(p.data - lr * (update + s.weight_decay * p.data))


def cosine_lr(epoch: int, opt: OptimizerSettings) -> float:
    """Cosine from lr_max down toward lr_min, restarting every restart_epochs."""
    if opt.restart_epochs < 1:
        raise ValueError("restart period must be at least one epoch")
    pos = (epoch % opt.restart_epochs) / opt.restart_epochs
    return float(
        opt.lr_min + 0.5 * (opt.lr_max - opt.lr_min) * (1 + np.cos(np.pi * pos))
    )


def corpus_rates(model: Model, samples, vocab: Vocab, backend: str | None = None):
    """Corpus-level CER/WER: total edit distance over total reference length."""
    if backend is None:
        backend = "recurrent" if model.config.mixer == "retention" else "kv"
    char_edits = char_total = 0
    word_edits = word_total = 0
    for sample in samples:
        result = greedy_decode(model, sample.image, backend=backend)
        hyp = "".join(vocab.id_to_char(t) for t in result.tokens)
        ref = sample.transcript
        char_edits += edit_distance(hyp, ref)
        char_total += len(ref)
        word_edits += edit_distance(hyp.split(), ref.split())
        word_total += len(ref.split())
    cer = char_edits / max(char_total, 1)
    wer = word_edits / max(word_total, 1)
    return cer, wer


def train(model: Model, train_samples, val_samples, vocab: Vocab,
          opt_settings: OptimizerSettings = OptimizerSettings(),
          settings: TrainSettings = TrainSettings(),
          metrics_path=None, log=None) -> list:
    """Run the full loop; returns the metrics rows (and writes them as CSV
    when metrics_path is given)."""
    if not train_samples:
        raise ValueError("training needs a nonempty dataset")
    optimizer = AdamW(model.params, opt_settings)
    order_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=[settings.seed, 10]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=[settings.seed, 11]))
    tokens = {
        s.sample_id: tokenize(s.transcript, vocab, model.config.max_text_len)
        for s in train_samples
    }
    rows, global_step = [], 0
    for epoch in range(settings.epochs):
        lr = cosine_lr(epoch, opt_settings)
        order = order_rng.permutation(len(train_samples))
        epoch_losses = []
        for start in range(0, len(order), settings.batch_size):
            batch = [(int(i), train_samples[i])
                     for i in order[start:start + settings.batch_size]]
            optimizer.zero_grad()
            batch_loss = 0.0
            for idx, sample in batch:
                if settings.augment_train:
                    sample = augment(
                        sample, seed=(settings.seed * 131 + epoch) * 100003 + idx
                    )
                inputs, targets = teacher_pair(tokens[sample.sample_id])
                with Tape():
                    logits = model.forward(sample.image, inputs,
                                           train=TrainContext(rng=dropout_rng))
                    loss = training_loss(logits, targets,
                                         epsilon=settings.label_smoothing)
                    backward(scale(loss, 1.0 / len(batch)))
                batch_loss += loss.item() / len(batch)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss {batch_loss} at epoch {epoch}, "
                    f"step {global_step}, lr {lr:.2e}"
                )
            optimizer.step(lr)
            epoch_losses.append(batch_loss)
            global_step += 1
        val_cer, val_wer = corpus_rates(model, val_samples, vocab)
        row = {
            "epoch": epoch,
            "step": global_step,
            "lr": lr,
            "loss": float(np.mean(epoch_losses)),
            "val_cer": val_cer,
            "val_wer": val_wer,
        }
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: lr {lr:.2e} loss {row['loss']:.4f} "
                f"val_cer {val_cer:.4f} val_wer {val_wer:.4f}")
        if (settings.stop_below_cer is not None
                and val_cer <= settings.stop_below_cer):
            break
    if metrics_path is not None:
        write_metrics_csv(metrics_path, rows)
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(row[c])) if isinstance(row[c], float)
                              else str(row[c]) for c in METRICS_COLUMNS) + "\n")
