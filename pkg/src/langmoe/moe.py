"""Sparse MoE feed-forward block with a gated, always-active shared expert.

Per token the router softmax picks the top-K routed experts; their
outputs are combined with the raw (unrenormalized) softmax values as
gates. The shared expert, when present, is applied at every position
and scaled by a learned per-token sigmoid gate. Experts outside the
top-K set are never evaluated; each expert keeps evaluation counters so
that contract is assertable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import LANGUAGES
from .errors import ContractError, DimensionError, LanguageTagError


@dataclass
class ExpertFFN:
    """Two-layer FFN: down(silu(gate(h)) * up(h))."""

    gate_proj: Tensor  # [d_model, d_ff]
    up_proj: Tensor    # [d_model, d_ff]
    down_proj: Tensor  # [d_ff, d_model]
    eval_calls: int = 0
    tokens_processed: int = 0

    def __call__(self, h: Tensor) -> Tensor:
        self.eval_calls += 1
        self.tokens_processed += h.shape[0]
        return ad.matmul(
            ad.silu(ad.matmul(h, self.gate_proj)) * ad.matmul(h, self.up_proj),
            self.down_proj,
        )

    def reset_counters(self) -> None:
        self.eval_calls = 0
        self.tokens_processed = 0


@dataclass
class Router:
    w_g: Tensor  # [n_experts, d_model]
    top_k: int

    def __post_init__(self):
        n = self.w_g.shape[0]
        if not 1 <= self.top_k <= n:
            raise ContractError(f"top_k must be in [1, {n}], got {self.top_k}")

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[0]


@dataclass
class SharedGate:
    """Per-token scalar gate sigma(w . h + b)."""

    w: Tensor  # [d_model]
    b: Tensor  # [1]

    def __call__(self, h: Tensor) -> Tensor:
        d = self.w.shape[0]
        logits = ad.matmul(h, ad.reshape(self.w, (d, 1))) + ad.reshape(self.b, (1, 1))
        return ad.sigmoid(logits)  # [n_tokens, 1]


@dataclass
class MoEBlockOutput:
    h_prime: Tensor
    o_routed: Tensor
    o_shared: Tensor | None
    lam: Tensor | None              # per-token scalar gate, [n_tokens, 1]
    selected_indices: np.ndarray    # [n_tokens, K]
    gates: Tensor                   # [n_tokens, K], raw softmax values
    full_probs: Tensor              # [n_tokens, N]


def route(h: Tensor, router: Router) -> tuple[np.ndarray, Tensor, Tensor]:
    """Top-K routing: (selected indices, gates, full probabilities).

    Ties break toward the lowest expert index; gates are the softmax
    values at the selected indices, not renormalized over the top-K set.
    """
    logits = ad.matmul(h, ad.transpose(router.w_g))  # [n, N]
    full_probs = ad.softmax(logits, axis=-1)
    # Stable argsort of negated probs keeps the lowest index first on ties.
    order = np.argsort(-full_probs.data, axis=-1, kind="stable")
    selected = order[:, : router.top_k]
    gates = ad.gather_last(full_probs, selected)
    return selected, gates, full_probs


def moe_ffn_forward(
    h: Tensor,
    routed_experts: list[ExpertFFN],
    shared: ExpertFFN | None,
    router: Router,
    shared_gate: SharedGate | None,
) -> MoEBlockOutput:
    """Forward pass of the MoE-FFN block over a flat batch of token states."""
    if router.n_experts != len(routed_experts):
        raise DimensionError(
            f"router expects {router.n_experts} experts, got {len(routed_experts)}"
        )
    if (shared is None) != (shared_gate is None):
        raise ContractError("shared expert and shared gate must be provided together")
    n_tokens = h.shape[0]
    if n_tokens == 0:
        raise ContractError("moe_ffn_forward: empty token batch")
    selected, gates, full_probs = route(h, router)

    parts: list[Tensor] = []
    for i, expert in enumerate(routed_experts):
        rows, k_pos = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        out_i = expert(ad.index_rows(h, rows))
        gate_col = ad.gather_pairs(gates, rows, k_pos)  # [m, 1]
        parts.append(ad.scatter_rows(out_i * gate_col, rows, n_tokens))
    o_routed = parts[0]
    for part in parts[1:]:
        o_routed = o_routed + part

    if shared is None:
        return MoEBlockOutput(
            h_prime=o_routed,
            o_routed=o_routed,
            o_shared=None,
            lam=None,
            selected_indices=selected,
            gates=gates,
            full_probs=full_probs,
        )

    lam = shared_gate(h)
    o_shared = shared(h)
    h_prime = o_routed + lam * o_shared
    return MoEBlockOutput(
        h_prime=h_prime,
        o_routed=o_routed,
        o_shared=o_shared,
        lam=lam,
        selected_indices=selected,
        gates=gates,
        full_probs=full_probs,
    )


# -- load balancing ----------------------------------------------------------


def dispatch_fractions(selected: np.ndarray, n_experts: int) -> np.ndarray:
    """f_i = (tokens whose top-K set contains i) / (tokens * K). Sums to 1."""
    n_tokens, k = selected.shape
    if n_tokens == 0:
        raise ContractError("dispatch_fractions: empty token batch")
    counts = np.bincount(selected.reshape(-1), minlength=n_experts)
    return counts / (n_tokens * k)


def load_balance_loss(f: np.ndarray, p, alpha: float, n_experts: int):
    """alpha * N * sum_i f_i * p_i.

    ``f`` is a constant (carries no gradient); ``p`` may be a Tensor, in
    which case the result is a Tensor differentiable through ``p``.
    """
    f = np.asarray(f)
    if f.shape != (n_experts,):
        raise ContractError(f"f must have shape ({n_experts},), got {f.shape}")
    if isinstance(p, Tensor):
        if p.shape != (n_experts,):
            raise ContractError(f"p must have shape ({n_experts},), got {p.shape}")
        f_const = Tensor(f.astype(p.data.dtype))
        return ad.sum_(p * f_const) * (alpha * n_experts)
    p = np.asarray(p)
    if p.shape != (n_experts,):
        raise ContractError(f"p must have shape ({n_experts},), got {p.shape}")
    return float(alpha * n_experts * np.dot(f, p))


# -- routing statistics --------------------------------------------------


@dataclass
class RoutingStats:
    """Dispatch fractions, mean router probabilities, per-language top-1 counts.

    Raw counts are stored so shards merge exactly and commutatively.
    """

    n_experts: int
    top_k: int
    n_tokens: int = 0
    dispatch_counts: np.ndarray = None
    prob_sum: np.ndarray = None
    per_language_counts: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dispatch_counts is None:
            self.dispatch_counts = np.zeros(self.n_experts, dtype=np.int64)
        if self.prob_sum is None:
            self.prob_sum = np.zeros(self.n_experts, dtype=np.float64)

    @property
    def f(self) -> np.ndarray:
        if self.n_tokens == 0:
            raise ContractError("RoutingStats over an empty batch has no f")
        return self.dispatch_counts / (self.n_tokens * self.top_k)

    @property
    def p(self) -> np.ndarray:
        if self.n_tokens == 0:
            raise ContractError("RoutingStats over an empty batch has no p")
        return self.prob_sum / self.n_tokens

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        if (self.n_experts, self.top_k) != (other.n_experts, other.top_k):
            raise ContractError("cannot merge routing stats with different shapes")
        merged = RoutingStats(
            n_experts=self.n_experts,
            top_k=self.top_k,
            n_tokens=self.n_tokens + other.n_tokens,
            dispatch_counts=self.dispatch_counts + other.dispatch_counts,
            prob_sum=self.prob_sum + other.prob_sum,
        )
        for counts in (self.per_language_counts, other.per_language_counts):
            for lang, c in counts.items():
                if lang in merged.per_language_counts:
                    merged.per_language_counts[lang] = merged.per_language_counts[lang] + c
                else:
                    merged.per_language_counts[lang] = c.copy()
        return merged


def compute_routing_stats(
    full_probs,
    selected_indices: np.ndarray,
    language_tags,
    known_languages=LANGUAGES,
) -> RoutingStats:
    """Aggregate one batch's routing decisions into RoutingStats.

    ``language_tags`` aligns one-to-one with tokens; top-1 assignment
    histograms are kept per language.
    """
    probs = full_probs.data if isinstance(full_probs, Tensor) else np.asarray(full_probs)
    selected = np.asarray(selected_indices)
    n_tokens, top_k = selected.shape
    n_experts = probs.shape[-1]
    if len(language_tags) != n_tokens:
        raise ContractError(
            f"language_tags length {len(language_tags)} does not match {n_tokens} tokens"
        )
    # Renormalize rows at float64: recovers the exact-softmax property
    # (rows sum to 1) that float32 storage rounds away.
    probs = probs.astype(np.float64)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    stats = RoutingStats(n_experts=n_experts, top_k=top_k, n_tokens=n_tokens)
    stats.dispatch_counts = np.bincount(selected.reshape(-1), minlength=n_experts).astype(np.int64)
    stats.prob_sum = probs.sum(axis=0)
    top1 = selected[:, 0]
    for lang in set(language_tags):
        if lang not in known_languages:
            raise LanguageTagError(f"unknown language tag {lang!r}; known: {tuple(known_languages)}")
    tags = np.asarray(language_tags)
    for lang in sorted(set(language_tags)):
        mask = tags == lang
        stats.per_language_counts[lang] = np.bincount(
            top1[mask], minlength=n_experts
        ).astype(np.int64)
    return stats
