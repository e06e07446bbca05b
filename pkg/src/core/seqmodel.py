"""
Gradus QR v1.0 - Sequence Model
Miniature pre-norm transformer encoder-decoder with bottleneck adapters and beam search
"""

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core import tensorcore as tc
from src.core.checkpoint import fingerprint_arrays, read_container, write_container
from src.core.exceptions import ConfigError, IntegrityError, OOVToken, SequenceTooLong, ShapeError
from src.core.tensorcore import Tensor
from src.utils.config import Config, SpecialTokens

logger = logging.getLogger(__name__)

ENCODER_SLOTS = ("post_self_attn", "post_ffn")
DECODER_SLOTS = ("post_self_attn", "post_cross_attn", "post_ffn")
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 64
    adapter_bottleneck: int = 16
    max_seq_len: int = 64
    dropout: float = 0.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.vocab_size < len(SpecialTokens.NAMES):
            raise ConfigError(f"vocab_size must cover the {len(SpecialTokens.NAMES)} special tokens",
                              vocab_size=self.vocab_size)
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if self.adapter_bottleneck < 1:
            raise ConfigError("adapter_bottleneck must be >= 1", adapter_bottleneck=self.adapter_bottleneck)
        if self.n_enc_layers < 1 or self.n_dec_layers < 1 or self.ffn_dim < 1 or self.max_seq_len < 2:
            raise ConfigError("layer counts, ffn_dim and max_seq_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}", dropout=self.dropout)
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype '{self.dtype}'", dtype=self.dtype)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


# Vocabulary and input assembly
class Vocabulary:
    """Frequency-ranked word vocabulary with fixed special ids"""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: List[str] = list(tokens)
        if tuple(self.tokens[:len(SpecialTokens.NAMES)]) != SpecialTokens.NAMES:
            raise ConfigError("vocabulary must start with the special tokens")
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], max_size: Optional[int] = None) -> "Vocabulary":
        counts = Counter()
        for seq in sequences:
            counts.update(tok for tok in seq if tok not in SpecialTokens.NAMES)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        words = [tok for tok, _ in ranked]
        if max_size is not None:
            words = words[:max(0, max_size - len(SpecialTokens.NAMES))]
        return cls(list(SpecialTokens.NAMES) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(tok, SpecialTokens.UNK) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        """Map ids back to words, stopping at end-of-sequence and dropping specials"""
        words = []
        for i in ids:
            if i == SpecialTokens.END:
                break
            if i in (SpecialTokens.PAD, SpecialTokens.START):
                continue
            words.append(self.tokens[i])
        return words

    def to_dict(self) -> Dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        return cls(data["tokens"])

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def vocabulary_from_records(records, max_size: Optional[int] = None) -> Vocabulary:
    def _sequences():
        for rec in records:
            yield rec.question
            yield rec.rewrite
            for turn in rec.history:
                yield turn
    return Vocabulary.build(_sequences(), max_size)


def assemble_source(question: Sequence[str], history: Sequence[Sequence[str]], vocab: Vocabulary,
                    max_len: int) -> List[int]:
    """``question ||| turn-1 ||| turn-2 ...`` as ids, cut to ``max_len``"""
    ids = vocab.encode(question)
    for turn in history:
        ids.append(SpecialTokens.SEP)
        ids.extend(vocab.encode(turn))
    return ids[:max_len]


def assemble_target(rewrite: Sequence[str], vocab: Vocabulary, max_len: int) -> Tuple[List[int], List[int]]:
    """Decoder input (start + rewrite) and output (rewrite + end), both ``<= max_len``"""
    body = vocab.encode(rewrite)[:max_len - 1]
    return [SpecialTokens.START] + body, body + [SpecialTokens.END]


def pad_batch(sequences: Sequence[Sequence[int]], pad: int = SpecialTokens.PAD) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; mask is True at real positions"""
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), pad, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask


# Parameters
class ParameterStore:
    """Named tensors with fingerprinting and trainability switches"""

    def __init__(self, params: Dict[str, Tensor]):
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.arrays())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise IntegrityError(f"parameter names differ: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise IntegrityError(f"shape mismatch for '{name}': {arrays[name].shape} vs {p.shape}")
            p.values = arrays[name].astype(p.dtype)


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), dtype=dtype)


def _layer_norm_params(prefix: str, d: int, dtype) -> Dict[str, Tensor]:
    return {f"{prefix}.g": Tensor(np.ones(d), dtype=dtype), f"{prefix}.b": Tensor(np.zeros(d), dtype=dtype)}


def _attention_params(prefix: str, d: int, rng, dtype) -> Dict[str, Tensor]:
    params = {}
    for proj in ("q", "k", "v", "o"):
        params[f"{prefix}.w{proj}"] = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        params[f"{prefix}.b{proj}"] = Tensor(np.zeros(d), dtype=dtype)
    return params


def _ffn_params(prefix: str, d: int, f: int, rng, dtype) -> Dict[str, Tensor]:
    return {
        f"{prefix}.w1": _normal(rng, (d, f), 1.0 / math.sqrt(d), dtype),
        f"{prefix}.b1": Tensor(np.zeros(f), dtype=dtype),
        f"{prefix}.w2": _normal(rng, (f, d), 1.0 / math.sqrt(f), dtype),
        f"{prefix}.b2": Tensor(np.zeros(d), dtype=dtype),
    }


class BaseWeights(ParameterStore):
    """Shared encoder-decoder parameters (embeddings, layers, output projection)"""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        super().__init__(params)
        self.config = config

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "BaseWeights":
        rng = np.random.default_rng(seed)
        d, dtype = config.d_model, config.np_dtype
        params: Dict[str, Tensor] = {
            "tok_emb": _normal(rng, (config.vocab_size, d), 1.0 / math.sqrt(d), dtype),
            "pos_emb": _normal(rng, (config.max_seq_len, d), 1.0 / math.sqrt(d), dtype),
        }
        for i in range(config.n_enc_layers):
            params.update(_layer_norm_params(f"enc.{i}.ln1", d, dtype))
            params.update(_attention_params(f"enc.{i}.self_attn", d, rng, dtype))
            params.update(_layer_norm_params(f"enc.{i}.ln2", d, dtype))
            params.update(_ffn_params(f"enc.{i}.ffn", d, config.ffn_dim, rng, dtype))
        for i in range(config.n_dec_layers):
            params.update(_layer_norm_params(f"dec.{i}.ln1", d, dtype))
            params.update(_attention_params(f"dec.{i}.self_attn", d, rng, dtype))
            params.update(_layer_norm_params(f"dec.{i}.ln2", d, dtype))
            params.update(_attention_params(f"dec.{i}.cross_attn", d, rng, dtype))
            params.update(_layer_norm_params(f"dec.{i}.ln3", d, dtype))
            params.update(_ffn_params(f"dec.{i}.ffn", d, config.ffn_dim, rng, dtype))
        params.update(_layer_norm_params("enc.ln_f", d, dtype))
        params.update(_layer_norm_params("dec.ln_f", d, dtype))
        params["out.w"] = _normal(rng, (d, config.vocab_size), 1.0 / math.sqrt(d), dtype)
        params["out.b"] = Tensor(np.zeros(config.vocab_size), dtype=dtype)
        for name, p in params.items():
            p.name = name
        return cls(config, params)

    def copy(self) -> "BaseWeights":
        params = {name: Tensor(p.values.copy(), dtype=p.dtype, name=name) for name, p in self.params.items()}
        return BaseWeights(self.config, params)


class Adapter:
    """Residual bottleneck: x' = up(tanh(down(x))) + x"""

    def __init__(self, w_down: Tensor, b_down: Tensor, w_up: Tensor, b_up: Tensor):
        self.w_down, self.b_down, self.w_up, self.b_up = w_down, b_down, w_up, b_up

    @classmethod
    def initialize(cls, d_model: int, bottleneck: int, rng: np.random.Generator, dtype=np.float64) -> "Adapter":
        return cls(
            _normal(rng, (d_model, bottleneck), Config.ADAPTER_INIT_STD, dtype),
            Tensor(np.zeros(bottleneck), dtype=dtype),
            Tensor(np.zeros((bottleneck, d_model)), dtype=dtype),
            Tensor(np.zeros(d_model), dtype=dtype),
        )

    @property
    def d_model(self) -> int:
        return self.w_down.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"w_down": self.w_down, "b_down": self.b_down, "w_up": self.w_up, "b_up": self.b_up}

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)


def adapter_forward(adapter: Adapter, x: Tensor) -> Tensor:
    if x.shape[-1] != adapter.d_model:
        raise ShapeError(f"adapter expects last dim {adapter.d_model}, got {x.shape}",
                         left=list(x.shape), right=[adapter.d_model])
    hidden = tc.tanh(tc.linear(x, adapter.w_down, adapter.b_down))
    return tc.add(tc.linear(hidden, adapter.w_up, adapter.b_up), x)


class AdapterSet(ParameterStore):
    """One adapter per (stack, layer, slot) for a single class"""

    def __init__(self, config: ModelConfig, adapters: Dict[Tuple[str, int, str], Adapter], label: str = "shared"):
        expected = 2 * config.n_enc_layers + 3 * config.n_dec_layers
        if len(adapters) != expected:
            raise ConfigError(f"adapter set needs {expected} adapters, got {len(adapters)}")
        self.config = config
        self.adapters = adapters
        self.label = label
        params = {}
        for (stack, layer, slot), adapter in sorted(adapters.items()):
            for pname, p in adapter.parameters().items():
                p.name = f"{stack}.{layer}.{slot}.{pname}"
                params[p.name] = p
        super().__init__(params)

    @staticmethod
    def slot_keys(config: ModelConfig) -> List[Tuple[str, int, str]]:
        keys = [("enc", i, slot) for i in range(config.n_enc_layers) for slot in ENCODER_SLOTS]
        keys += [("dec", i, slot) for i in range(config.n_dec_layers) for slot in DECODER_SLOTS]
        return keys

    @classmethod
    def initialize(cls, config: ModelConfig, label: str = "shared", seed: int = 0) -> "AdapterSet":
        rng = np.random.default_rng(seed)
        adapters = {
            key: Adapter.initialize(config.d_model, config.adapter_bottleneck, rng, config.np_dtype)
            for key in cls.slot_keys(config)
        }
        return cls(config, adapters, label)

    def get(self, stack: str, layer: int, slot: str) -> Adapter:
        return self.adapters[(stack, layer, slot)]

    def copy(self, label: Optional[str] = None) -> "AdapterSet":
        adapters = {
            key: Adapter(*(Tensor(p.values.copy(), dtype=p.dtype) for p in a.parameters().values()))
            for key, a in self.adapters.items()
        }
        return AdapterSet(self.config, adapters, label or self.label)

    def __len__(self) -> int:
        return len(self.adapters)


def base_param_count(config: ModelConfig) -> int:
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    attention = 4 * (d * d + d)
    norm = 2 * d
    ffn = d * f + f + f * d + d
    enc_layer = 2 * norm + attention + ffn
    dec_layer = 3 * norm + 2 * attention + ffn
    return (v * d + config.max_seq_len * d + config.n_enc_layers * enc_layer
            + config.n_dec_layers * dec_layer + 2 * norm + d * v + v)


def count_adapter_params(config: ModelConfig) -> int:
    d, b = config.d_model, config.adapter_bottleneck
    return (2 * config.n_enc_layers + 3 * config.n_dec_layers) * (d * b + b + b * d + d)


def param_ratio(config: ModelConfig, base_count: int) -> float:
    return count_adapter_params(config) / base_count


# Forward pass
def _attention(params: BaseWeights, prefix: str, query: Tensor, memory: Tensor, mask: np.ndarray,
               n_heads: int) -> Tensor:
    B, Lq, d = query.shape
    Lk = memory.shape[1]
    dh = d // n_heads

    def heads(x: Tensor, length: int) -> Tensor:
        return x.reshape(B, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(tc.linear(query, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), Lq)
    k = heads(tc.linear(memory, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), Lk)
    v = heads(tc.linear(memory, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), Lk)

    scores = tc.mul(tc.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    scores = tc.masked_fill(scores, ~mask, MASK_VALUE)
    context = tc.matmul(tc.softmax(scores, axis=-1), v)
    context = context.transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return tc.linear(context, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params: BaseWeights, prefix: str, x: Tensor) -> Tensor:
    hidden = tc.gelu(tc.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return tc.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _norm(params: BaseWeights, prefix: str, x: Tensor) -> Tensor:
    return tc.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], Config.LAYER_NORM_EPS)


class AdaptedModel:
    """Base weights plus an optional adapter set; adapters=None is the bare base model"""

    def __init__(self, base: BaseWeights, adapters: Optional[AdapterSet] = None):
        if adapters is not None and adapters.config != base.config:
            raise ConfigError("adapter set was built for a different model config")
        self.base = base
        self.adapters = adapters
        self.config = base.config

    @property
    def label(self) -> str:
        return self.adapters.label if self.adapters is not None else "base"

    def trainable_parameters(self) -> Dict[str, Tensor]:
        params = {f"base.{n}": p for n, p in self.base.params.items() if p.requires_grad}
        if self.adapters is not None:
            params.update({f"adapter.{n}": p for n, p in self.adapters.params.items() if p.requires_grad})
        return params

    def _adapt(self, stack: str, layer: int, slot: str, x: Tensor) -> Tensor:
        if self.adapters is None:
            return x
        return adapter_forward(self.adapters.get(stack, layer, slot), x)

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be [batch, len], got {ids.shape}", left=list(ids.shape))
        if ids.shape[1] > self.config.max_seq_len:
            raise SequenceTooLong(f"length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}",
                                  length=int(ids.shape[1]))
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise OOVToken(f"token id outside [0, {self.config.vocab_size})", vocab_size=self.config.vocab_size)

    def _embed(self, ids: np.ndarray, rng) -> Tensor:
        L = ids.shape[1]
        x = tc.add(tc.embedding_lookup(self.base["tok_emb"], ids), self.base["pos_emb"][:L])
        return tc.dropout(x, self.config.dropout, rng)

    def encode(self, src_ids, src_mask=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Encoder states [batch, len, d_model]; ``src_mask`` is True at real tokens"""
        src_ids = np.asarray(src_ids, dtype=np.int64)
        self._check_ids(src_ids)
        if src_mask is None:
            src_mask = np.ones(src_ids.shape, dtype=bool)
        key_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        cfg = self.config

        x = self._embed(src_ids, rng)
        for i in range(cfg.n_enc_layers):
            normed = _norm(self.base, f"enc.{i}.ln1", x)
            h = _attention(self.base, f"enc.{i}.self_attn", normed, normed, key_mask, cfg.n_heads)
            x = self._adapt("enc", i, "post_self_attn", tc.add(x, tc.dropout(h, cfg.dropout, rng)))
            h = _ffn(self.base, f"enc.{i}.ffn", _norm(self.base, f"enc.{i}.ln2", x))
            x = self._adapt("enc", i, "post_ffn", tc.add(x, tc.dropout(h, cfg.dropout, rng)))
        return _norm(self.base, "enc.ln_f", x)

    def decode(self, memory: Tensor, src_mask, tgt_ids, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits [batch, T, |V|] for every prefix position of ``tgt_ids`` (causal)"""
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        self._check_ids(tgt_ids)
        cfg = self.config
        B, T = tgt_ids.shape
        if src_mask is None:
            src_mask = np.ones(memory.shape[:2], dtype=bool)
        cross_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
        causal = np.tril(np.ones((T, T), dtype=bool))[None, None, :, :]

        x = self._embed(tgt_ids, rng)
        for i in range(cfg.n_dec_layers):
            normed = _norm(self.base, f"dec.{i}.ln1", x)
            h = _attention(self.base, f"dec.{i}.self_attn", normed, normed, causal, cfg.n_heads)
            x = self._adapt("dec", i, "post_self_attn", tc.add(x, tc.dropout(h, cfg.dropout, rng)))
            h = _attention(self.base, f"dec.{i}.cross_attn", _norm(self.base, f"dec.{i}.ln2", x),
                           memory, cross_mask, cfg.n_heads)
            x = self._adapt("dec", i, "post_cross_attn", tc.add(x, tc.dropout(h, cfg.dropout, rng)))
            h = _ffn(self.base, f"dec.{i}.ffn", _norm(self.base, f"dec.{i}.ln3", x))
            x = self._adapt("dec", i, "post_ffn", tc.add(x, tc.dropout(h, cfg.dropout, rng)))
        x = _norm(self.base, "dec.ln_f", x)
        return tc.linear(x, self.base["out.w"], self.base["out.b"])

    def logits(self, src_ids, src_mask, tgt_ids, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.decode(self.encode(src_ids, src_mask, rng), src_mask, tgt_ids, rng)

    def decode_step(self, memory: Tensor, src_mask, prefixes) -> np.ndarray:
        """Next-token logits [batch, |V|] for equal-length prefixes starting with the start id"""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2 or prefixes.shape[1] == 0 or np.any(prefixes[:, 0] != SpecialTokens.START):
            raise ShapeError("prefixes must be non-empty and begin with the start id", left=list(prefixes.shape))
        with tc.no_grad():
            return self.decode(memory, src_mask, prefixes).values[:, -1, :]

    def pooled_encoding(self, src_ids, src_mask) -> np.ndarray:
        """Masked mean of last-layer encoder states, [batch, d_model]"""
        with tc.no_grad():
            states = self.encode(src_ids, src_mask).values
        mask = np.asarray(src_mask, dtype=states.dtype)[:, :, None]
        return (states * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1.0)

    def step_function(self, src: Sequence[int]) -> Callable[[List[List[int]]], np.ndarray]:
        """Log-probability scorer over prefixes for a single source sequence"""
        src_ids = np.asarray([src], dtype=np.int64)
        src_mask = np.ones(src_ids.shape, dtype=bool)
        with tc.no_grad():
            memory = self.encode(src_ids, src_mask).values

        def step(prefixes: List[List[int]]) -> np.ndarray:
            n = len(prefixes)
            tiled = Tensor(np.repeat(memory, n, axis=0), dtype=memory.dtype)
            logits = self.decode_step(tiled, np.repeat(src_mask, n, axis=0), prefixes)
            return log_softmax_np(logits)

        return step

    def generate(self, src: Sequence[int], beam_width: int = Config.BEAM_WIDTH, max_len: Optional[int] = None,
                 length_penalty: float = Config.LENGTH_PENALTY) -> "Hypothesis":
        max_len = max_len or self.config.max_seq_len - 1
        step = self.step_function(src)
        if beam_width == 1:
            return greedy_search(step, max_len)
        return beam_search(step, beam_width, max_len, length_penalty=length_penalty)[0]


# Decoding
def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class Hypothesis:
    tokens: List[int]
    log_prob: float
    finished: bool
    score: float = 0.0

    @property
    def length(self) -> int:
        # the end token counts toward length
        return len(self.tokens) + (1 if self.finished else 0)


def _normalized(log_prob: float, length: int, length_penalty: float) -> float:
    return log_prob / (max(length, 1) ** length_penalty)


def greedy_search(step_fn: Callable[[List[List[int]]], np.ndarray], max_len: int,
                  start: int = SpecialTokens.START, end: int = SpecialTokens.END,
                  length_penalty: float = Config.LENGTH_PENALTY) -> Hypothesis:
    """Pick the arg-max token until end-of-sequence or ``max_len`` tokens"""
    prefix = [start]
    log_prob = 0.0
    for _ in range(max_len):
        logp = step_fn([prefix])[0]
        token = int(np.argmax(logp))
        log_prob += float(logp[token])
        if token == end:
            hyp = Hypothesis(prefix[1:], log_prob, True)
            hyp.score = _normalized(log_prob, hyp.length, length_penalty)
            return hyp
        prefix.append(token)
    hyp = Hypothesis(prefix[1:], log_prob, False)
    hyp.score = _normalized(log_prob, hyp.length, length_penalty)
    return hyp


def beam_search(step_fn: Callable[[List[List[int]]], np.ndarray], beam_width: int, max_len: int,
                start: int = SpecialTokens.START, end: int = SpecialTokens.END,
                length_penalty: float = Config.LENGTH_PENALTY) -> List[Hypothesis]:
    """
    Beam search over summed log-probabilities

    Each step keeps the ``beam_width`` best extensions of all live beams;
    extensions ending in ``end`` move to the finished list. The search stops
    once ``beam_width`` hypotheses finished, no beam is live, or ``max_len``
    tokens were produced. Final ranking uses log_prob / length**length_penalty.

    Returns:
        Hypotheses sorted best first
    """
    if beam_width < 1:
        raise ConfigError(f"beam_width must be >= 1, got {beam_width}", beam_width=beam_width)

    live: List[Tuple[List[int], float]] = [([start], 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        logp = step_fn([prefix for prefix, _ in live])
        totals = np.array([score for _, score in live])[:, None] + logp
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:beam_width]

        vocab_size = logp.shape[1]
        next_live = []
        for idx in order:
            beam, token = divmod(int(idx), vocab_size)
            prefix, _ = live[beam]
            if token == end:
                finished.append(Hypothesis(prefix[1:], float(flat[idx]), True))
            else:
                next_live.append((prefix + [token], float(flat[idx])))
        live = next_live
        if len(finished) >= beam_width or not live:
            break

    candidates = finished + [Hypothesis(prefix[1:], score, False) for prefix, score in live]
    for hyp in candidates:
        hyp.score = _normalized(hyp.log_prob, hyp.length, length_penalty)
    # stable: earlier-found hypotheses win exact ties
    return sorted(candidates, key=lambda h: -h.score)


# Persistence
def save_base(base: BaseWeights, vocab: Vocabulary, path) -> str:
    meta = {"config": base.config.to_dict(), "vocab": vocab.to_dict()}
    fingerprint = write_container(path, "base", base.arrays(), meta)
    logger.info(f"💾 Saved base weights to {path} ({fingerprint[:12]})")
    return fingerprint


def load_base(path) -> Tuple[BaseWeights, Vocabulary]:
    header, arrays = read_container(path, expected_kind="base")
    config = ModelConfig.from_dict(header["meta"]["config"])
    base = BaseWeights.initialize(config, seed=0)
    base.load_arrays(arrays)
    base.set_trainable(False)
    return base, Vocabulary.from_dict(header["meta"]["vocab"])


def save_adapters(adapters: AdapterSet, base: BaseWeights, path) -> str:
    meta = {"config": adapters.config.to_dict(), "label": adapters.label, "base_fingerprint": base.fingerprint()}
    return write_container(path, "adapters", adapters.arrays(), meta)


def load_adapters(path, base: BaseWeights) -> AdapterSet:
    """Load an adapter set, refusing a base whose fingerprint differs from the one it was trained on"""
    header, arrays = read_container(path, expected_kind="adapters")
    meta = header["meta"]
    if meta["base_fingerprint"] != base.fingerprint():
        raise IntegrityError(f"adapters in {path} were trained on a different base",
                             expected=meta["base_fingerprint"], actual=base.fingerprint())
    adapters = AdapterSet.initialize(ModelConfig.from_dict(meta["config"]), label=meta["label"])
    adapters.load_arrays(arrays)
    return adapters
