import numpy as np
import pytest

from retline.checkpoint import load_checkpoint, save_checkpoint
from retline.data import EOS_ID, PAD_ID, SOS_ID, Vocab, render_line, tokenize
from retline.model import (
    Model,
    ModelConfig,
    TrainContext,
    sinusoidal_positions,
    teacher_pair,
    training_loss,
)
from retline.tensor import Tape, Tensor, backward, sum_all


def tiny_config(**overrides):
    base = dict(
        vocab_size=7, max_text_len=10, layers=2, heads=2, d_model=16,
        d_ff=32, cnn_channels=(4, 8, 8), height=32, dropout_mix=0.0,
        dropout_embed=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_image(width=40, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((1, 32, width)))


class TestConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            tiny_config(d_model=15)

    def test_minimum_vocab(self):
        with pytest.raises(ValueError):
            tiny_config(vocab_size=3)

    def test_unknown_mixer(self):
        with pytest.raises(ValueError):
            tiny_config(mixer="mamba")

    def test_height_divisibility(self):
        with pytest.raises(ValueError):
            tiny_config(height=30)


class TestImageEmbedding:
    def test_feature_shape_contract(self):
        model = Model(tiny_config(cnn_channels=(8, 16, 16)))
        feat = model.embed_image(toy_image(width=40))
        assert feat.feature_shape == (16, 4, 10)
        assert feat.tokens.shape == (10, 16)

    def test_token_count_doubles_with_width(self):
        model = Model(tiny_config())
        n1 = model.embed_image(toy_image(width=40)).count
        n2 = model.embed_image(toy_image(width=80)).count
        assert n2 == 2 * n1
        assert model.image_token_count(40) == n1

    def test_zero_image_is_pure_bias_plus_positions(self):
        model = Model(tiny_config())
        feat = model.embed_image(Tensor(np.zeros((1, 32, 16))))
        n = feat.count
        # conv stack on zeros gives constant feature columns, so every token
        # differs from the next only through the learned positional table
        tok = feat.tokens.data
        pos = model.params["img_pos"].data[:n]
        spread = tok - pos
        assert np.max(np.abs(spread - spread[0])) < 1e-12

    def test_wrong_height_rejected(self):
        model = Model(tiny_config())
        with pytest.raises(ValueError):
            model.embed_image(Tensor(np.zeros((1, 40, 16))))


class TestTextEmbedding:
    def test_position_zero_contributions(self):
        pe = sinusoidal_positions(1, 8)[0]
        np.testing.assert_array_equal(pe[0::2], 0.0)
        np.testing.assert_array_equal(pe[1::2], 1.0)

    def test_bounded(self):
        pe = sinusoidal_positions(1000, 24)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_same_id_different_positions_differ(self):
        model = Model(tiny_config())
        batch = model.embed_text([3, 3, 3])
        rows = batch.tokens.data
        assert np.any(rows[0] != rows[1])
        assert np.any(rows[1] != rows[2])

    def test_out_of_range_id_rejected(self):
        model = Model(tiny_config())
        with pytest.raises(ValueError):
            model.embed_text([7])


class TestForward:
    def test_logits_shape(self):
        model = Model(tiny_config())
        logits = model.forward(toy_image(), [SOS_ID, 3, 4])
        assert logits.shape == (3, 7)

    def test_eval_deterministic_bitwise(self):
        model = Model(tiny_config())
        a = model.forward(toy_image(), [SOS_ID, 3, 4]).data
        b = model.forward(toy_image(), [SOS_ID, 3, 4]).data
        np.testing.assert_array_equal(a, b)

    def test_future_target_invariance_exact(self):
        model = Model(tiny_config())
        img = toy_image()
        a = model.forward(img, [SOS_ID, 3, 4, 5, 6]).data
        b = model.forward(img, [SOS_ID, 3, 4, 6, 3]).data
        np.testing.assert_array_equal(a[:3], b[:3])

    def test_empty_text_rejected(self):
        model = Model(tiny_config())
        with pytest.raises(ValueError):
            model.forward(toy_image(), [])

    def test_dropout_changes_training_path_only(self):
        model = Model(tiny_config(dropout_mix=0.3, dropout_embed=0.1))
        img = toy_image()
        ids = [SOS_ID, 3, 4]
        eval_a = model.forward(img, ids).data
        eval_b = model.forward(img, ids).data
        np.testing.assert_array_equal(eval_a, eval_b)
        rng = np.random.default_rng(0)
        train_out = model.forward(img, ids, train=TrainContext(rng=rng)).data
        assert np.any(train_out != eval_a)


class TestBaseline:
    def test_attention_rows_sum_to_one(self):
        model = Model(tiny_config(mixer="attention"))
        img = toy_image()
        feat = model.embed_image(img)
        txt = model.embed_text([SOS_ID, 3])
        from retline.fusion import FusionSequence
        from retline.tensor import concat_rows

        x = concat_rows([feat.tokens, txt.tokens])
        seq = FusionSequence(x, feat.count, 2)
        layer = model.layers[0]
        # reconstruct the joint attention of head 0 and check normalization
        q = (x.data @ layer.projections.wq.data)[:, :8]
        k = (x.data @ layer.projections.wk.data)[:, :8]
        dots = q @ k.T / np.sqrt(8)
        n = x.shape[0]
        allow = np.zeros((n, n), dtype=bool)
        allow[:, :feat.count] = True
        for r in range(2):
            allow[feat.count + r, feat.count:feat.count + r + 1] = True
        masked = np.where(allow, dots, -np.inf)
        z = np.exp(masked - masked.max(axis=1, keepdims=True))
        z = np.where(allow, z, 0.0)
        np.testing.assert_allclose((z / z.sum(axis=1, keepdims=True)).sum(axis=1),
                                   1.0, atol=1e-12)

    def test_image_rows_invariant_to_text(self):
        model = Model(tiny_config(mixer="attention"))
        img = toy_image()
        a = model.forward(img, [SOS_ID, 3, 4]).data
        b = model.forward(img, [SOS_ID, 5, 6]).data
        # position 0 sees only SOS + image in both cases
        np.testing.assert_array_equal(a[0], b[0])

    def test_parameter_shapes_match_retention_twin(self):
        retention = Model(tiny_config(mixer="retention"))
        attention = Model(tiny_config(mixer="attention"))
        assert retention.parameter_shapes() == attention.parameter_shapes()

    def test_recurrent_decode_rejected_for_attention(self):
        from retline.decode import beam_search

        model = Model(tiny_config(mixer="attention"))
        with pytest.raises(ValueError):
            beam_search(model, toy_image(), beam=1, backend="recurrent")


class TestLoss:
    def test_uniform_logits_any_epsilon(self):
        v = 7
        logits = Tensor(np.zeros((4, v)))
        for eps in (0.0, 0.1, 0.4):
            loss = training_loss(logits, [3, 4, 5, 6], epsilon=eps)
            assert loss.item() == pytest.approx(np.log(v), abs=1e-12)

    def test_perfect_logits_zero_loss_without_smoothing(self):
        targets = [3, 4, 5]
        logits = np.full((3, 7), -200.0)
        for i, t in enumerate(targets):
            logits[i, t] = 200.0
        loss = training_loss(Tensor(logits), targets, epsilon=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_pad_positions_excluded(self):
        logits = Tensor(np.random.default_rng(0).standard_normal((4, 7)))
        full = training_loss(logits, [3, 4, PAD_ID, PAD_ID], epsilon=0.1)
        trimmed = training_loss(
            Tensor(logits.data[:2].copy()), [3, 4], epsilon=0.1
        )
        assert full.item() == pytest.approx(trimmed.item(), abs=1e-12)

    def test_all_pad_rejected(self):
        logits = Tensor(np.zeros((2, 7)))
        with pytest.raises(ValueError):
            training_loss(logits, [PAD_ID, PAD_ID])

    def test_teacher_pair_trims_at_eos(self):
        v = Vocab("ab")
        tokens = tokenize("ab", v, 8)
        inputs, targets = teacher_pair(tokens)
        np.testing.assert_array_equal(inputs, [SOS_ID, 3, 4])
        np.testing.assert_array_equal(targets, [3, 4, EOS_ID])


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = Model(tiny_config(), seed=3)
        p1 = str(tmp_path / "a")
        save_checkpoint(model, p1)
        loaded = load_checkpoint(p1)
        p2 = str(tmp_path / "b")
        save_checkpoint(loaded, p2)
        assert open(p1 + ".bin", "rb").read() == open(p2 + ".bin", "rb").read()
        assert open(p1 + ".json").read() == open(p2 + ".json").read()

    def test_load_reproduces_logits_bitwise(self, tmp_path):
        model = Model(tiny_config(), seed=4)
        img = toy_image()
        before = model.forward(img, [SOS_ID, 3, 4]).data
        save_checkpoint(model, str(tmp_path / "m"))
        loaded = load_checkpoint(str(tmp_path / "m"))
        after = loaded.forward(img, [SOS_ID, 3, 4]).data
        np.testing.assert_array_equal(before, after)

    def test_corrupt_shape_rejected(self, tmp_path):
        import json

        model = Model(tiny_config(), seed=5)
        save_checkpoint(model, str(tmp_path / "m"))
        manifest = json.load(open(tmp_path / "m.json"))
        manifest["tensors"]["head_w"]["shape"] = [2, 2]
        json.dump(manifest, open(tmp_path / "m.json", "w"))
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(str(tmp_path / "m"))

    def test_truncated_blob_rejected(self, tmp_path):
        model = Model(tiny_config(), seed=6)
        save_checkpoint(model, str(tmp_path / "m"))
        raw = open(tmp_path / "m.bin", "rb").read()
        open(tmp_path / "m.bin", "wb").write(raw[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(str(tmp_path / "m"))


class TestEndToEndGradients:
    def test_loss_gradient_flows_to_every_parameter(self):
        model = Model(tiny_config())
        sample = render_line("ab", height=32)
        vocab = Vocab("abcd")
        ids = tokenize("ab", vocab, 10)
        inputs, targets = teacher_pair(ids)
        with Tape():
            logits = model.forward(sample.image, inputs)
            loss = training_loss(logits, targets, epsilon=0.1)
            backward(loss)
        missing = [name for name, t in model.params.items() if t.grad is None]
        assert missing == []
        zero_grads = [
            name for name, t in model.params.items()
            if np.all(t.grad == 0) and "img_pos" not in name
        ]
        # the positional table rows beyond the image length stay untouched,
        # everything else must receive signal
        assert zero_grads == []
