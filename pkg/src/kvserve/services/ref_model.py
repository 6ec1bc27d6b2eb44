"""Deterministic HSTU-style reference model with full and cached-incremental paths.

Block: ``u, q, k, v = split(silu(x W + b))``, causal softmax attention per
head over the concatenated cache, ``o = silu(attn) * u``, layer norm (eps
1e-6) and a one-hidden-layer SiLU MLP of width ``d``. There is no positional
encoding, so a position's KV depends only on the tokens at or before it.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..schemas.kv_config import KVConfig, ModelConfig

NORM_EPS = 1e-6
DTYPE = np.float64


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class LayerParams:
    w_uvqk: np.ndarray
    b_uvqk: np.ndarray
    norm_scale: np.ndarray
    norm_bias: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class ModelParams:
    embedding: np.ndarray
    layers: tuple[LayerParams, ...]
    head: np.ndarray
    num_heads: int
    head_dim: int

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def vocab_size(self) -> int:
        return int(self.embedding.shape[0])

    @property
    def hidden_width(self) -> int:
        return self.num_heads * self.head_dim


@dataclass(frozen=True)
class LayerKV:
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.keys.shape != self.values.shape or self.keys.ndim != 3:
            raise ModelInputError(
                f"keys y values deben tener la misma forma [n, H, D]: "
                f"{self.keys.shape} vs {self.values.shape}"
            )

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    @classmethod
    def empty(cls, num_heads: int, head_dim: int) -> LayerKV:
        shape = (0, num_heads, head_dim)
        return cls(np.zeros(shape, dtype=DTYPE), np.zeros(shape, dtype=DTYPE))

    @classmethod
    def from_span(cls, span: np.ndarray) -> LayerKV:
        # span layout: [n, kind, H, D]
        return cls(np.array(span[:, 0], dtype=DTYPE), np.array(span[:, 1], dtype=DTYPE))

    def to_span(self) -> np.ndarray:
        return np.stack([self.keys, self.values], axis=1)

    def slice(self, start: int, stop: int | None = None) -> LayerKV:
        return LayerKV(self.keys[start:stop], self.values[start:stop])

    def concat(self, other: LayerKV) -> LayerKV:
        return LayerKV(
            np.concatenate([self.keys, other.keys]),
            np.concatenate([self.values, other.values]),
        )


@dataclass(frozen=True)
class ForwardOutput:
    logits: np.ndarray
    new_kv: tuple[LayerKV, ...]
    hidden: np.ndarray


def init_params(
    config: KVConfig, model_config: ModelConfig, *, zero: bool = False
) -> ModelParams:
    d = config.hidden_width
    vocab = model_config.vocab_size
    rng = np.random.default_rng(model_config.model_seed)

    def weight(rows: int, cols: int) -> np.ndarray:
        if zero:
            return np.zeros((rows, cols), dtype=DTYPE)
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols)).astype(DTYPE)

    def vector(size: int, fill: float = 0.0) -> np.ndarray:
        if zero:
            return np.zeros(size, dtype=DTYPE)
        return fill + rng.normal(0.0, 0.02, size=size).astype(DTYPE)

    embedding = (
        np.zeros((vocab, d), dtype=DTYPE)
        if zero
        else rng.normal(0.0, 1.0, size=(vocab, d)).astype(DTYPE)
    )
    layers = tuple(
        LayerParams(
            w_uvqk=weight(d, 4 * d),
            b_uvqk=vector(4 * d),
            norm_scale=vector(d, fill=1.0),
            norm_bias=vector(d),
            w_hidden=weight(d, d),
            b_hidden=vector(d),
            w_out=weight(d, d),
            b_out=vector(d),
        )
        for _ in range(config.num_layers)
    )
    return ModelParams(
        embedding=embedding,
        layers=layers,
        head=weight(d, vocab),
        num_heads=config.num_heads,
        head_dim=config.head_dim,
    )


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + NORM_EPS) * scale + bias


def _check_tokens(tokens: Sequence[int], vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids[(ids < 0) | (ids >= vocab_size)][0])
        raise ModelInputError(
            f"token {bad} de {what} fuera del vocabulario (tamaño {vocab_size})"
        )
    return ids


def _check_cache(cached_kv: Sequence[LayerKV], params: ModelParams) -> int:
    if len(cached_kv) != params.num_layers:
        raise ModelInputError(
            f"la caché tiene {len(cached_kv)} capas y el modelo {params.num_layers}"
        )
    lengths = {len(layer_kv) for layer_kv in cached_kv}
    if len(lengths) > 1:
        raise ModelInputError(f"longitudes de caché inconsistentes entre capas: {sorted(lengths)}")
    return lengths.pop() if lengths else 0


def _encode(
    cached_kv: Sequence[LayerKV], token_ids: np.ndarray, params: ModelParams
) -> tuple[np.ndarray, tuple[LayerKV, ...]]:
    n = int(token_ids.shape[0])
    heads, head_dim, d = params.num_heads, params.head_dim, params.hidden_width
    x = params.embedding[token_ids]
    new_kv: list[LayerKV] = []
    for layer, cached in zip(params.layers, cached_kv):
        prefix = len(cached)
        projected = _silu(x @ layer.w_uvqk + layer.b_uvqk)
        u, q, k, v = np.split(projected, 4, axis=-1)
        q = q.reshape(n, heads, head_dim)
        k = k.reshape(n, heads, head_dim)
        v = v.reshape(n, heads, head_dim)
        keys = np.concatenate([cached.keys, k])
        values = np.concatenate([cached.values, v])

        scores = np.einsum("nhd,mhd->hnm", q, keys) / np.sqrt(head_dim)
        blocked = np.arange(prefix + n)[None, :] > (prefix + np.arange(n))[:, None]
        scores = np.where(blocked[None, :, :], -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights = weights / weights.sum(axis=-1, keepdims=True)
        attended = np.einsum("hnm,mhd->nhd", weights, values).reshape(n, d)

        gated = _silu(attended) * u
        normed = _layer_norm(gated, layer.norm_scale, layer.norm_bias)
        x = _silu(normed @ layer.w_hidden + layer.b_hidden) @ layer.w_out + layer.b_out
        new_kv.append(LayerKV(k, v))
    return x, tuple(new_kv)


def forward_incremental(
    cached_kv: Sequence[LayerKV],
    delta: Sequence[int],
    candidates: Sequence[int],
    params: ModelParams,
) -> ForwardOutput:
    _check_cache(cached_kv, params)
    if len(candidates) < 1:
        raise ModelInputError("se necesita al menos un candidato")
    delta_ids = _check_tokens(delta, params.vocab_size, "la historia")
    candidate_ids = _check_tokens(candidates, params.vocab_size, "los candidatos")
    hidden, new_kv = _encode(cached_kv, np.concatenate([delta_ids, candidate_ids]), params)
    terminal = hidden[-1]
    return ForwardOutput(logits=terminal @ params.head, new_kv=new_kv, hidden=terminal)


def forward_full(
    history: Sequence[int], candidates: Sequence[int], params: ModelParams
) -> ForwardOutput:
    empty = [LayerKV.empty(params.num_heads, params.head_dim)] * params.num_layers
    return forward_incremental(empty, history, candidates, params)


def prefill_kv(history: Sequence[int], params: ModelParams) -> tuple[LayerKV, ...]:
    """KV a visit leaves behind: history positions only, candidates never included."""
    empty = tuple(
        LayerKV.empty(params.num_heads, params.head_dim) for _ in range(params.num_layers)
    )
    if not len(history):
        return empty
    history_ids = _check_tokens(history, params.vocab_size, "la historia")
    _, new_kv = _encode(empty, history_ids, params)
    return new_kv


def extend_kv(
    cached_kv: Sequence[LayerKV], output: ForwardOutput, history_len: int
) -> tuple[LayerKV, ...]:
    # Keep only the first ``history_len`` new positions: candidate KV is dropped.
    return tuple(
        cached.concat(fresh.slice(0, history_len))
        for cached, fresh in zip(cached_kv, output.new_kv)
    )


def rank_candidates(logits: np.ndarray, candidates: Sequence[int]) -> list[int]:
    order = sorted(range(len(candidates)), key=lambda i: -float(logits[candidates[i]]))
    return [candidates[i] for i in order]


def attention_cost(total_len: int, prefix_len: int) -> int:
    if not 0 <= prefix_len <= total_len:
        raise ValueError(
            f"se requiere 0 <= P_pre <= T; recibido P_pre={prefix_len}, T={total_len}"
        )
    return (total_len - prefix_len) * total_len
