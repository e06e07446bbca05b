"""
Gradus QR v1.0 - Sequence Model Tests
Adapters, encoder/decoder contracts, decoding and checkpoints
"""

import itertools
import math

import numpy as np
import pytest

import src.core.tensorcore as tc
from src.core.exceptions import ConfigError, IntegrityError, OOVToken, SequenceTooLong, ShapeError
from src.core.seqmodel import (
    AdaptedModel,
    Adapter,
    AdapterSet,
    BaseWeights,
    ModelConfig,
    Vocabulary,
    adapter_forward,
    assemble_source,
    assemble_target,
    base_param_count,
    beam_search,
    count_adapter_params,
    greedy_search,
    load_adapters,
    load_base,
    pad_batch,
    param_ratio,
    save_adapters,
    save_base,
)
from src.core.tensorcore import Tensor
from src.utils.config import SpecialTokens

A, B = 5, 6
END = SpecialTokens.END

# next-token distribution keyed by the generated prefix (start token excluded)
TABLE = {
    (): {A: 0.55, B: 0.45},
    (A,): {A: 0.40, END: 0.35, B: 0.25},
    (A, A): {A: 0.40, END: 0.35, B: 0.25},
    (B,): {END: 0.90, A: 0.05, B: 0.05},
}


def table_step(prefixes):
    out = np.full((len(prefixes), 7), 1e-9)
    for row, prefix in enumerate(prefixes):
        for token, p in TABLE.get(tuple(prefix[1:]), {END: 1.0}).items():
            out[row, token] = p
    out /= out.sum(axis=1, keepdims=True)
    return np.log(out)


def enumerate_best(max_len=3):
    """Exhaustive search over every finished or max-length sequence of {a, b}"""
    best, best_score = None, -math.inf
    for length in range(0, max_len + 1):
        for body in itertools.product((A, B), repeat=length):
            logp = 0.0
            for t in range(length):
                logp += table_step([[SpecialTokens.START] + list(body[:t])])[0][body[t]]
            candidates = []
            if length < max_len:
                end_logp = logp + table_step([[SpecialTokens.START] + list(body)])[0][END]
                candidates.append(end_logp / (length + 1))
            elif length == max_len:
                candidates.append(logp / length)
            for score in candidates:
                if score > best_score:
                    best, best_score = list(body), score
    return best, best_score


@pytest.fixture
def base(tiny_config):
    return BaseWeights.initialize(tiny_config, seed=3)


def random_adapters(config, seed=5):
    adapters = AdapterSet.initialize(config, label="random", seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in adapters.params.items():
        p.values = rng.normal(0.0, 0.2, size=p.shape)
    return adapters


class TestAdapter:
    def test_zero_up_projection_is_identity(self):
        adapter = Adapter.initialize(4, 2, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)))
        np.testing.assert_array_equal(adapter_forward(adapter, x).values, x.values)

    def test_zero_input_zero_biases(self):
        rng = np.random.default_rng(0)
        adapter = Adapter(Tensor(rng.normal(size=(4, 2))), Tensor(np.zeros(2)),
                          Tensor(rng.normal(size=(2, 4))), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(adapter(Tensor(np.zeros((1, 4)))).values, np.zeros((1, 4)))

    def test_hand_computed_two_by_one(self):
        adapter = Adapter(Tensor([[1.0], [2.0]]), Tensor([0.0]), Tensor([[0.5, -1.0]]), Tensor([0.1, 0.2]))
        out = adapter(Tensor([[1.0, 0.5]])).values[0]
        h = math.tanh(1.0 * 1.0 + 0.5 * 2.0)
        np.testing.assert_allclose(out, [0.5 * h + 0.1 + 1.0, -h + 0.2 + 0.5], atol=1e-12)

    def test_wrong_width(self):
        adapter = Adapter.initialize(4, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            adapter(Tensor(np.zeros((1, 3))))

    def test_set_size(self, tiny_config):
        assert len(AdapterSet.initialize(tiny_config)) == 2 * tiny_config.n_enc_layers + 3 * tiny_config.n_dec_layers


class TestParameterCounts:
    @pytest.mark.parametrize("bottleneck,count,ratio", [
        (384, 17_729_280, 0.1272),
        (256, 11_827_200, 0.0848),
        (64, 2_974_080, 0.0213),
    ])
    def test_full_size_reference(self, bottleneck, count, ratio):
        cfg = ModelConfig(vocab_size=50265, d_model=768, n_heads=12, n_enc_layers=6, n_dec_layers=6,
                          ffn_dim=3072, adapter_bottleneck=bottleneck, max_seq_len=1024)
        assert count_adapter_params(cfg) == count
        assert round(param_ratio(cfg, 139_420_416), 4) == ratio

    def test_counts_match_initialized_weights(self, tiny_config, base):
        assert base.parameter_count() == base_param_count(tiny_config)
        assert AdapterSet.initialize(tiny_config).parameter_count() == count_adapter_params(tiny_config)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=20, d_model=10, n_heads=3)


class TestModel:
    def test_zero_init_adapters_match_base(self, tiny_config, base):
        src = np.array([[7, 8, 9, 3, 10]])
        tgt = np.array([[1, 11, 12]])
        plain = AdaptedModel(base).logits(src, None, tgt).values
        adapted = AdaptedModel(base, AdapterSet.initialize(tiny_config, seed=9)).logits(src, None, tgt).values
        assert np.max(np.abs(plain - adapted)) < 1e-12

    def test_padding_does_not_leak(self, base):
        model = AdaptedModel(base)
        mask = np.array([[True, True, True, False, False]])
        first = model.encode(np.array([[7, 8, 9, 0, 0]]), mask).values
        second = model.encode(np.array([[7, 8, 9, 12, 13]]), mask).values
        np.testing.assert_allclose(first[:, :3], second[:, :3], atol=1e-12)

    def test_single_token_shape(self, tiny_config, base):
        assert AdaptedModel(base).encode(np.array([[7]])).shape == (1, 1, tiny_config.d_model)

    def test_decoder_is_causal(self, tiny_config, base):
        model = AdaptedModel(base, random_adapters(tiny_config))
        src = np.array([[7, 8, 9]])
        first = model.logits(src, None, np.array([[1, 11, 12]])).values
        second = model.logits(src, None, np.array([[1, 11, 13]])).values
        np.testing.assert_allclose(first[:, :2], second[:, :2], atol=1e-12)
        assert not np.allclose(first[:, 2], second[:, 2])

    def test_batch_permutation(self, tiny_config, base):
        model = AdaptedModel(base, random_adapters(tiny_config))
        src = np.array([[7, 8, 9], [10, 11, 12]])
        tgt = np.array([[1, 14], [1, 15]])
        logits = model.logits(src, None, tgt).values
        swapped = model.logits(src[::-1], None, tgt[::-1]).values
        np.testing.assert_allclose(logits[::-1], swapped, atol=1e-12)

    def test_decode_step_needs_start(self, base):
        model = AdaptedModel(base)
        memory = model.encode(np.array([[7, 8]]))
        with pytest.raises(ShapeError):
            model.decode_step(memory, None, [[11, 12]])

    def test_input_checks(self, tiny_config, base):
        model = AdaptedModel(base)
        with pytest.raises(OOVToken):
            model.encode(np.array([[tiny_config.vocab_size]]))
        with pytest.raises(SequenceTooLong):
            model.encode(np.full((1, tiny_config.max_seq_len + 1), 7))

    def test_adapter_gradients_with_finite_differences(self, tiny_config, base):
        adapters = random_adapters(tiny_config)
        adapters.set_trainable(True)
        model = AdaptedModel(base, adapters)
        src_ids, src_mask = pad_batch([[7, 8, 9, 3, 10], [11, 12]])
        tgt_in, _ = pad_batch([[1, 13, 14], [1, 15]])
        targets = np.array([[13, 14, 2], [15, 2, 0]])
        rows, cols = np.nonzero(targets)

        def loss():
            logp = tc.log_softmax(model.logits(src_ids, src_mask, tgt_in), axis=-1)
            return tc.mul(tc.sum_(logp[rows, cols, targets[rows, cols]]), -0.5)

        params = {name: p for name, p in adapters.params.items() if name.startswith("dec.0.post_ffn")}
        assert tc.grad_check(loss, params).worst < 1e-4


class TestDecoding:
    def test_beam_beats_greedy(self):
        greedy = greedy_search(table_step, max_len=3)
        assert greedy.tokens == [A, A, A]
        assert not greedy.finished

        best = beam_search(table_step, beam_width=2, max_len=3)[0]
        assert best.tokens == [B]
        assert best.finished
        assert best.score > greedy.score

    def test_beam_finds_exhaustive_optimum(self):
        tokens, score = enumerate_best()
        best = beam_search(table_step, beam_width=2, max_len=3)[0]
        assert best.tokens == tokens
        assert best.score == pytest.approx(score)

    def test_width_one_equals_greedy(self):
        assert beam_search(table_step, beam_width=1, max_len=3)[0].tokens == greedy_search(table_step, 3).tokens

    def test_max_len_one(self):
        assert greedy_search(table_step, max_len=1).tokens == [A]

    def test_invalid_width(self):
        with pytest.raises(ConfigError):
            beam_search(table_step, beam_width=0, max_len=3)

    def test_generate_width_one_is_greedy(self, tiny_config, base):
        model = AdaptedModel(base, random_adapters(tiny_config))
        src = [7, 8, 9]
        assert model.generate(src, beam_width=1, max_len=5).tokens == greedy_search(model.step_function(src), 5).tokens


class TestVocabulary:
    def test_build_ranks_by_count_then_token(self):
        vocab = Vocabulary.build([["b", "a", "b"], ["c", "a", "b"]])
        assert vocab.tokens[len(SpecialTokens.NAMES):] == ["b", "a", "c"]

    def test_unknown_and_decode(self):
        vocab = Vocabulary.build([["x", "y"]])
        ids = vocab.encode(["x", "zzz"])
        assert ids[1] == SpecialTokens.UNK
        assert vocab.decode([SpecialTokens.START] + vocab.encode(["y", "x"]) + [END] + vocab.encode(["y"])) == ["y", "x"]

    def test_source_and_target_assembly(self):
        vocab = Vocabulary.build([["why", "?", "he", "left"]])
        src = assemble_source(["why", "?"], [["he", "left"]], vocab, max_len=10)
        assert src == vocab.encode(["why", "?"]) + [SpecialTokens.SEP] + vocab.encode(["he", "left"])
        assert len(assemble_source(["why", "?"], [["he", "left"]], vocab, max_len=3)) == 3
        tgt_in, tgt_out = assemble_target(["why", "?"], vocab, max_len=10)
        assert tgt_in[0] == SpecialTokens.START and tgt_out[-1] == END


class TestCheckpoints:
    def test_base_round_trip(self, tmp_path, tiny_vocab, base):
        fingerprint = save_base(base, tiny_vocab, tmp_path / "base.ckpt")
        loaded, vocab = load_base(tmp_path / "base.ckpt")
        assert loaded.fingerprint() == fingerprint == base.fingerprint()
        assert vocab.tokens == tiny_vocab.tokens
        assert not any(p.requires_grad for p in loaded.params.values())

    def test_adapters_refuse_other_base(self, tmp_path, tiny_config, base):
        adapters = random_adapters(tiny_config)
        save_adapters(adapters, base, tmp_path / "a.ckpt")
        assert load_adapters(tmp_path / "a.ckpt", base).fingerprint() == adapters.fingerprint()
        with pytest.raises(IntegrityError):
            load_adapters(tmp_path / "a.ckpt", BaseWeights.initialize(tiny_config, seed=4))

    def test_corrupted_payload(self, tmp_path, tiny_vocab, base):
        path = tmp_path / "base.ckpt"
        save_base(base, tiny_vocab, path)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(IntegrityError):
            load_base(path)
