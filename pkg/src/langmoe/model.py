"""Decoder-only causal transformer whose FFN sublayer is dense or MoE.

Pre-norm residual blocks with RMS normalization, grouped-query
attention, learned absolute position embeddings, byte-level vocabulary.
Forward is deterministic given (params, input); logits at position t
never depend on tokens after t.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, TokenIndexError
from .moe import ExpertFFN, MoEBlockOutput, Router, SharedGate, moe_ffn_forward

DENSE = "dense"
MOE = "moe"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    context_length: int
    ffn_kind: str = DENSE
    n_routed_experts: int = 3
    top_k: int = 2
    alpha: float = 0.01
    has_shared_expert: bool = True

    def __post_init__(self):
        if self.ffn_kind not in (DENSE, MOE):
            raise ContractError(f"ffn_kind must be 'dense' or 'moe', got {self.ffn_kind!r}")
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ContractError(
                f"n_q_heads ({self.n_q_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_model % self.n_q_heads != 0:
            raise ContractError(
                f"d_model ({self.d_model}) must be divisible by n_q_heads ({self.n_q_heads})"
            )
        if self.ffn_kind == MOE and not 1 <= self.top_k <= self.n_routed_experts:
            raise ContractError(
                f"top_k ({self.top_k}) must be in [1, {self.n_routed_experts}]"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_q_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in param_manifest(self))

    @classmethod
    def desk_default(cls, ffn_kind: str = MOE, **overrides) -> "ModelConfig":
        """4 layers, d_model 64, 4/2 heads, d_ff 128, byte vocab, context 256."""
        base = cls(
            n_layers=4,
            d_model=64,
            n_q_heads=4,
            n_kv_heads=2,
            d_ff=128,
            vocab_size=256,
            context_length=256,
            ffn_kind=ffn_kind,
        )
        return replace(base, **overrides) if overrides else base

    @classmethod
    def desk_small(cls, ffn_kind: str = DENSE, **overrides) -> "ModelConfig":
        """2 layers, d_model 32, 4/2 heads, d_ff 64, context 64; for fast experiments."""
        base = cls(
            n_layers=2,
            d_model=32,
            n_q_heads=4,
            n_kv_heads=2,
            d_ff=64,
            vocab_size=256,
            context_length=64,
            ffn_kind=ffn_kind,
        )
        return replace(base, **overrides) if overrides else base


def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list for every parameter the config implies."""
    c = config
    manifest: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (c.vocab_size, c.d_model)),
        ("pos_emb", (c.context_length, c.d_model)),
    ]
    for layer in range(c.n_layers):
        prefix = f"layers.{layer}"
        manifest += [
            (f"{prefix}.attn_norm.weight", (c.d_model,)),
            (f"{prefix}.attn.wq", (c.d_model, c.d_model)),
            (f"{prefix}.attn.wk", (c.d_model, c.kv_dim)),
            (f"{prefix}.attn.wv", (c.d_model, c.kv_dim)),
            (f"{prefix}.attn.wo", (c.d_model, c.d_model)),
            (f"{prefix}.ffn_norm.weight", (c.d_model,)),
        ]
        if c.ffn_kind == DENSE:
            manifest += [
                (f"{prefix}.ffn.gate_proj", (c.d_model, c.d_ff)),
                (f"{prefix}.ffn.up_proj", (c.d_model, c.d_ff)),
                (f"{prefix}.ffn.down_proj", (c.d_ff, c.d_model)),
            ]
        else:
            for i in range(c.n_routed_experts):
                manifest += [
                    (f"{prefix}.moe.experts.{i}.gate_proj", (c.d_model, c.d_ff)),
                    (f"{prefix}.moe.experts.{i}.up_proj", (c.d_model, c.d_ff)),
                    (f"{prefix}.moe.experts.{i}.down_proj", (c.d_ff, c.d_model)),
                ]
            if c.has_shared_expert:
                manifest += [
                    (f"{prefix}.moe.shared.gate_proj", (c.d_model, c.d_ff)),
                    (f"{prefix}.moe.shared.up_proj", (c.d_model, c.d_ff)),
                    (f"{prefix}.moe.shared.down_proj", (c.d_ff, c.d_model)),
                    (f"{prefix}.moe.shared_gate.w", (c.d_model,)),
                    (f"{prefix}.moe.shared_gate.b", (1,)),
                ]
            manifest += [(f"{prefix}.moe.router.w_g", (c.n_routed_experts, c.d_model))]
    manifest += [
        ("final_norm.weight", (c.d_model,)),
        ("lm_head", (c.d_model, c.vocab_size)),
    ]
    return manifest


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter arrays: N(0, 0.02) matrices, unit norms, zero gate."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_manifest(config):
        if name.endswith("norm.weight"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith("shared_gate.w") or name.endswith("shared_gate.b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        params[name] = arr
    return params


class TransformerLM:
    """A miniature causal LM over a named-parameter dictionary."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_manifest(config)
        expected_names = [name for name, _ in expected]
        if list(params.keys()) != expected_names:
            missing = set(expected_names) - set(params)
            extra = set(params) - set(expected_names)
            raise ContractError(
                f"parameter set does not match config (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = params
        self._mask_cache: dict[tuple[int, str], np.ndarray] = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "TransformerLM":
        arrays = init_params(config, seed, dtype)
        params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        return cls(config, params)

    @classmethod
    def from_arrays(
        cls, config: ModelConfig, arrays: dict[str, np.ndarray], dtype=None, trainable: bool = True
    ) -> "TransformerLM":
        params = {}
        for name, arr in arrays.items():
            data = arr.astype(dtype) if dtype is not None else arr.copy()
            params[name] = Tensor(data, requires_grad=trainable)
        return cls(config, params)

    # -- structured views over the flat parameter dict --

    def _expert(self, prefix: str) -> ExpertFFN:
        return ExpertFFN(
            gate_proj=self.params[f"{prefix}.gate_proj"],
            up_proj=self.params[f"{prefix}.up_proj"],
            down_proj=self.params[f"{prefix}.down_proj"],
        )

    def layer_experts(self, layer: int) -> list[ExpertFFN]:
        return [
            self._expert(f"layers.{layer}.moe.experts.{i}")
            for i in range(self.config.n_routed_experts)
        ]

    def layer_shared_expert(self, layer: int) -> ExpertFFN | None:
        if not self.config.has_shared_expert:
            return None
        return self._expert(f"layers.{layer}.moe.shared")

    def layer_router(self, layer: int) -> Router:
        return Router(w_g=self.params[f"layers.{layer}.moe.router.w_g"], top_k=self.config.top_k)

    def layer_shared_gate(self, layer: int) -> SharedGate | None:
        if not self.config.has_shared_expert:
            return None
        return SharedGate(
            w=self.params[f"layers.{layer}.moe.shared_gate.w"],
            b=self.params[f"layers.{layer}.moe.shared_gate.b"],
        )

    # -- forward --

    def _causal_mask(self, t: int, dtype) -> np.ndarray:
        key = (t, np.dtype(dtype).str)
        mask = self._mask_cache.get(key)
        if mask is None:
            mask = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
            self._mask_cache[key] = mask
        return mask

    def _attention(self, x: Tensor, batch: int, t: int, layer: int) -> Tensor:
        c = self.config
        hd = c.head_dim
        groups = c.n_q_heads // c.n_kv_heads
        p = self.params
        q = ad.matmul(x, p[f"layers.{layer}.attn.wq"])
        k = ad.matmul(x, p[f"layers.{layer}.attn.wk"])
        v = ad.matmul(x, p[f"layers.{layer}.attn.wv"])
        # [B*T, d] -> [B, heads, T, hd]; each kv head serves `groups` query heads.
        q = ad.transpose(ad.reshape(q, (batch, t, c.n_q_heads, hd)), 1, 2)
        q = ad.reshape(q, (batch, c.n_kv_heads, groups, t, hd))
        k = ad.transpose(ad.reshape(k, (batch, t, c.n_kv_heads, hd)), 1, 2)
        k = ad.reshape(k, (batch, c.n_kv_heads, 1, t, hd))
        v = ad.transpose(ad.reshape(v, (batch, t, c.n_kv_heads, hd)), 1, 2)
        v = ad.reshape(v, (batch, c.n_kv_heads, 1, t, hd))

        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(hd))
        scores = scores + Tensor(self._causal_mask(t, x.dtype))
        att = ad.softmax(scores, axis=-1)
        out = ad.matmul(att, v)  # [B, kv, groups, T, hd]
        out = ad.reshape(out, (batch, c.n_q_heads, t, hd))
        out = ad.transpose(out, 1, 2)
        out = ad.reshape(out, (batch * t, c.d_model))
        return ad.matmul(out, p[f"layers.{layer}.attn.wo"])

    def _dense_ffn(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        gate = ad.matmul(x, p[f"layers.{layer}.ffn.gate_proj"])
        up = ad.matmul(x, p[f"layers.{layer}.ffn.up_proj"])
        return ad.matmul(ad.silu(gate) * up, p[f"layers.{layer}.ffn.down_proj"])

    def forward_with_trace(
        self, token_ids: np.ndarray
    ) -> tuple[Tensor, list[MoEBlockOutput]]:
        """Logits [B, T, V] plus per-layer MoE block outputs (empty if dense)."""
        c = self.config
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise ContractError(f"token_ids must be [batch, time], got shape {ids.shape}")
        batch, t = ids.shape
        if t > c.context_length:
            raise ContractError(
                f"sequence length {t} exceeds context_length {c.context_length}"
            )
        if ids.min() < 0 or ids.max() >= c.vocab_size:
            raise TokenIndexError(
                f"token id out of range [0, {c.vocab_size}): min={ids.min()}, max={ids.max()}"
            )
        p = self.params
        flat = ids.reshape(-1)
        positions = np.tile(np.arange(t), batch)
        x = ad.embedding_lookup(p["tok_emb"], flat) + ad.embedding_lookup(
            p["pos_emb"], positions
        )
        trace: list[MoEBlockOutput] = []
        for layer in range(c.n_layers):
            h = ad.rms_norm(x, p[f"layers.{layer}.attn_norm.weight"])
            x = x + self._attention(h, batch, t, layer)
            h = ad.rms_norm(x, p[f"layers.{layer}.ffn_norm.weight"])
            if c.ffn_kind == DENSE:
                x = x + self._dense_ffn(h, layer)
            else:
                block = moe_ffn_forward(
                    h,
                    self.layer_experts(layer),
                    self.layer_shared_expert(layer),
                    self.layer_router(layer),
                    self.layer_shared_gate(layer),
                )
                trace.append(block)
                x = x + block.h_prime
        x = ad.rms_norm(x, p["final_norm.weight"])
        logits = ad.matmul(x, p["lm_head"])
        return ad.reshape(logits, (batch, t, c.vocab_size)), trace

    def forward(self, token_ids: np.ndarray) -> Tensor:
        logits, _ = self.forward_with_trace(token_ids)
        return logits

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()
