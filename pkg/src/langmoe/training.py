"""Three-stage training: dense warm-ups, dense-to-MoE assembly, joint fine-tune.

Assembly copies trained dense FFN weights into expert slots (routed
experts from per-language checkpoints, shared expert per ablation
variant) while attention, norms and embeddings come from the base
checkpoint. Joint training minimizes cross-entropy plus the
load-balancing term, with dispatch fractions and router probabilities
pooled over every MoE layer in the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .corpus import Document, tokenize
from .errors import AssemblyError, ContractError, KindMismatchError, NumericError
from .model import DENSE, MOE, ModelConfig, TransformerLM, param_manifest
from .moe import dispatch_fractions, load_balance_loss

ROUTER_INIT_STD = 0.02
PAD_TARGET = -1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    n_steps: int | None = None     # takes precedence over n_epochs when set
    n_epochs: int = 1
    warmup_steps: int = 500        # dense warm-up budget used by the recipe
    seed: int = 0
    alpha: float = 0.01            # load-balancing coefficient for joint training
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "n_steps": self.n_steps,
            "n_epochs": self.n_epochs,
            "warmup_steps": self.warmup_steps,
            "seed": self.seed,
            "alpha": self.alpha,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


_VARIANT_SETTINGS = {
    "A": ("mixed_ckpt", True, "language_ckpts"),
    "B": ("base_ckpt", True, "language_ckpts"),
    "C": ("base_ckpt", False, "language_ckpts"),
    "D": ("none", False, "language_ckpts"),
    "E": ("mixed_ckpt", True, "mixed_ckpt"),
}


@dataclass(frozen=True)
class AblationConfig:
    variant: str
    shared_init: str            # mixed_ckpt | base_ckpt | none
    shared_trainable: bool
    routed_init: str            # language_ckpts | mixed_ckpt

    def __post_init__(self):
        if self.variant not in _VARIANT_SETTINGS:
            raise ContractError(f"variant must be one of A-E, got {self.variant!r}")
        if self.shared_init not in ("mixed_ckpt", "base_ckpt", "none"):
            raise ContractError(f"bad shared_init {self.shared_init!r}")
        if self.routed_init not in ("language_ckpts", "mixed_ckpt"):
            raise ContractError(f"bad routed_init {self.routed_init!r}")
        if self.variant == "D" and self.shared_init != "none":
            raise ContractError("variant D requires shared_init='none'")
        if self.variant == "C" and self.shared_trainable:
            raise ContractError("variant C requires shared_trainable=False")
        if self.variant == "E" and self.routed_init != "mixed_ckpt":
            raise ContractError("variant E requires routed_init='mixed_ckpt'")

    @classmethod
    def for_variant(cls, variant: str) -> "AblationConfig":
        if variant not in _VARIANT_SETTINGS:
            raise ContractError(f"variant must be one of A-E, got {variant!r}")
        shared_init, shared_trainable, routed_init = _VARIANT_SETTINGS[variant]
        return cls(
            variant=variant,
            shared_init=shared_init,
            shared_trainable=shared_trainable,
            routed_init=routed_init,
        )


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay adaptive-moment update; skips frozen params."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig, frozen: tuple[str, ...] = ()):
        self.params = params
        self.cfg = cfg
        self.frozen = frozenset(frozen)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            if p.grad is None:
                raise ContractError(f"missing gradient on trainable parameter {name!r}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * p.data
            p.data -= (cfg.learning_rate * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# -- batching -----------------------------------------------------------------


def make_blocks(docs: list[Document], block_len: int) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Cut repository-level token streams into (input, target, language) blocks.

    Windows are non-overlapping with stride ``block_len``; a final
    partial window is padded (input id 0, target PAD_TARGET).
    """
    blocks = []
    for doc in docs:
        ids = doc.token_ids if doc.token_ids is not None else tokenize(doc.text)
        for start in range(0, len(ids) - 1, block_len):
            window = ids[start : start + block_len + 1]
            if len(window) < 2:
                continue
            inputs = np.zeros(block_len, dtype=np.int64)
            targets = np.full(block_len, PAD_TARGET, dtype=np.int64)
            inputs[: len(window) - 1] = window[:-1]
            targets[: len(window) - 1] = window[1:]
            blocks.append((inputs, targets, doc.language))
    return blocks


def iter_batches(blocks, cfg: TrainConfig, n_steps: int):
    """Yield ``n_steps`` shuffled batches, reshuffling at each epoch boundary."""
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    emitted = 0
    while emitted < n_steps:
        if not order:
            order = list(rng.permutation(len(blocks)))
        take = order[: cfg.batch_size]
        order = order[cfg.batch_size :]
        inputs = np.stack([blocks[i][0] for i in take])
        targets = np.stack([blocks[i][1] for i in take])
        languages = [blocks[i][2] for i in take]
        yield inputs, targets, languages
        emitted += 1


def _resolve_steps(cfg: TrainConfig, n_blocks: int) -> int:
    if cfg.n_steps is not None:
        return cfg.n_steps
    steps_per_epoch = max(1, -(-n_blocks // cfg.batch_size))
    return cfg.n_epochs * steps_per_epoch


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict] = field(default_factory=list)


def trace_to_jsonl(trace: list[dict]) -> str:
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in trace) + ("\n" if trace else "")


# -- stage 1: dense warm-up ----------------------------------------------------


def train_dense(base: Checkpoint, docs: list[Document], cfg: TrainConfig) -> TrainResult:
    """Fine-tune a dense checkpoint on a corpus; deterministic per seed."""
    if base.kind != DENSE:
        raise KindMismatchError(f"train_dense requires a dense checkpoint, got {base.kind!r}")
    if not docs:
        raise ContractError("train_dense: empty corpus")
    languages = sorted({d.language for d in docs})
    label = languages[0] if len(languages) == 1 else "mixed"

    model = TransformerLM.from_arrays(base.config, base.params, dtype=np.float32)
    blocks = make_blocks(docs, base.config.context_length)
    if not blocks:
        raise ContractError("train_dense: corpus has no trainable sequences")
    n_steps = _resolve_steps(cfg, len(blocks))
    optimizer = AdamW(model.params, cfg)

    trace: list[dict] = []
    for step, (inputs, targets, _langs) in enumerate(iter_batches(blocks, cfg, n_steps)):
        logits = model.forward(inputs)
        flat = ad.reshape(logits, (-1, base.config.vocab_size))
        loss = ad.cross_entropy(flat, targets.reshape(-1), ignore_index=PAD_TARGET)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite training loss at step {step}")
        optimizer.zero_grad()
        ad.backward(loss)
        _fill_missing_grads(model.params, optimizer.frozen)
        optimizer.step()
        trace.append({"step": step, "l_ce": float(loss.data), "lr": cfg.learning_rate})

    ckpt = Checkpoint(
        config=base.config,
        params=model.arrays(),
        kind=DENSE,
        provenance=f"warmup:{label}",
    )
    return TrainResult(checkpoint=ckpt, trace=trace)


def _fill_missing_grads(params: dict[str, Tensor], frozen: frozenset) -> None:
    # An expert that received no tokens this batch gets an explicit zero
    # gradient so the optimizer's populated-grads contract holds.
    for name, p in params.items():
        if name in frozen:
            continue
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# -- stage 2: dense-to-MoE assembly ---------------------------------------


def _ffn_names(layer: int) -> tuple[str, str, str]:
    return (
        f"layers.{layer}.ffn.gate_proj",
        f"layers.{layer}.ffn.up_proj",
        f"layers.{layer}.ffn.down_proj",
    )


def _copy_ffn(
    donor: Checkpoint, layer: int, target_prefix: str, out: dict[str, np.ndarray],
    expected: dict[str, tuple[int, ...]],
) -> None:
    for proj, donor_name in zip(("gate_proj", "up_proj", "down_proj"), _ffn_names(layer)):
        target_name = f"{target_prefix}.{proj}"
        arr = donor.params[donor_name]
        if arr.shape != expected[target_name]:
            raise AssemblyError(
                f"layer {layer} parameter {target_name}: donor shape {arr.shape} "
                f"does not fit slot {expected[target_name]}"
            )
        out[target_name] = arr.copy()


def _provenance_language(ckpt: Checkpoint, index: int) -> str:
    prov = ckpt.provenance
    if prov.startswith("warmup:"):
        return prov.split(":", 1)[1]
    return f"ckpt{index}"


def assemble_moe(
    base: Checkpoint,
    language_ckpts: list[Checkpoint],
    mixed_ckpt: Checkpoint | None,
    ablation: AblationConfig,
    model_cfg: ModelConfig,
    seed: int = 0,
) -> Checkpoint:
    """Build an MoE checkpoint from trained dense checkpoints.

    Routed expert i inherits language checkpoint i's FFN (variant E: all
    from the mixed checkpoint); the shared expert follows the ablation
    variant; everything else comes from the base checkpoint. The router
    is seeded-random, the shared gate starts at lambda = 0.5.
    """
    if base.kind != DENSE:
        raise KindMismatchError("assemble_moe: base must be a dense checkpoint")
    if model_cfg.ffn_kind != MOE:
        raise ContractError("assemble_moe: model_cfg.ffn_kind must be 'moe'")
    want_shared = ablation.variant != "D"
    if model_cfg.has_shared_expert != want_shared:
        model_cfg = replace(model_cfg, has_shared_expert=want_shared)
    if ablation.routed_init == "language_ckpts":
        if len(language_ckpts) != model_cfg.n_routed_experts:
            raise ContractError(
                f"need {model_cfg.n_routed_experts} language checkpoints, got {len(language_ckpts)}"
            )
    if ablation.shared_init == "mixed_ckpt" or ablation.routed_init == "mixed_ckpt":
        if mixed_ckpt is None:
            raise ContractError(
                f"variant {ablation.variant} requires a mixed-language checkpoint"
            )

    donors = [base] + list(language_ckpts) + ([mixed_ckpt] if mixed_ckpt else [])
    backbone_fields = ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_ff",
                       "vocab_size", "context_length")
    for donor in donors:
        for f_name in backbone_fields:
            if getattr(donor.config, f_name) != getattr(model_cfg, f_name):
                raise AssemblyError(
                    f"donor checkpoint ({donor.provenance!r}) {f_name}="
                    f"{getattr(donor.config, f_name)} does not match target "
                    f"{f_name}={getattr(model_cfg, f_name)}"
                )

    expected = dict(param_manifest(model_cfg))
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_manifest(model_cfg):
        if ".moe." not in name:
            params[name] = base.params[name].copy()
    for layer in range(model_cfg.n_layers):
        prefix = f"layers.{layer}.moe"
        for i in range(model_cfg.n_routed_experts):
            donor = mixed_ckpt if ablation.routed_init == "mixed_ckpt" else language_ckpts[i]
            _copy_ffn(donor, layer, f"{prefix}.experts.{i}", params, expected)
        if want_shared:
            shared_donor = mixed_ckpt if ablation.shared_init == "mixed_ckpt" else base
            _copy_ffn(shared_donor, layer, f"{prefix}.shared", params, expected)
            params[f"{prefix}.shared_gate.w"] = np.zeros(model_cfg.d_model, dtype=np.float32)
            params[f"{prefix}.shared_gate.b"] = np.zeros(1, dtype=np.float32)
        params[f"{prefix}.router.w_g"] = rng.normal(
            0.0, ROUTER_INIT_STD, size=(model_cfg.n_routed_experts, model_cfg.d_model)
        ).astype(np.float32)

    ordered = {name: params[name] for name, _ in param_manifest(model_cfg)}
    frozen: tuple[str, ...] = ()
    if not ablation.shared_trainable and want_shared:
        frozen = tuple(name for name in ordered if ".moe.shared." in name)

    if ablation.routed_init == "mixed_ckpt":
        routed_desc = "mixed,mixed,mixed"
    else:
        routed_desc = ",".join(
            _provenance_language(ck, i) for i, ck in enumerate(language_ckpts)
        )
    provenance = f"assembled:config{ablation.variant};routed={routed_desc}"
    return Checkpoint(
        config=model_cfg, params=ordered, kind=MOE, provenance=provenance, frozen=frozen
    )


# -- stage 3: joint MoE fine-tuning -----------------------------------------


def train_joint(moe_ckpt: Checkpoint, docs: list[Document], cfg: TrainConfig) -> TrainResult:
    """Minimize CE + aux loss; returns the tuned checkpoint and a step trace.

    Per step the trace records the cross-entropy, the load-balancing
    term, and the pooled dispatch fractions f and mean router
    probabilities p over every MoE layer of the batch.
    """
    if moe_ckpt.kind != MOE:
        raise KindMismatchError(f"train_joint requires an MoE checkpoint, got {moe_ckpt.kind!r}")
    if not docs:
        raise ContractError("train_joint: empty corpus")
    config = moe_ckpt.config
    model = TransformerLM.from_arrays(config, moe_ckpt.params, dtype=np.float32)
    for name in moe_ckpt.frozen:
        model.params[name].requires_grad = False
    blocks = make_blocks(docs, config.context_length)
    if not blocks:
        raise ContractError("train_joint: corpus has no trainable sequences")
    n_steps = _resolve_steps(cfg, len(blocks))
    optimizer = AdamW(model.params, cfg, frozen=moe_ckpt.frozen)

    n_experts = config.n_routed_experts
    trace: list[dict] = []
    for step, (inputs, targets, _langs) in enumerate(iter_batches(blocks, cfg, n_steps)):
        logits, layer_trace = model.forward_with_trace(inputs)
        flat = ad.reshape(logits, (-1, config.vocab_size))
        ce = ad.cross_entropy(flat, targets.reshape(-1), ignore_index=PAD_TARGET)

        selected_all = np.concatenate([blk.selected_indices for blk in layer_trace], axis=0)
        f = dispatch_fractions(selected_all, n_experts)
        prob_sum = ad.sum_(layer_trace[0].full_probs, axis=0)
        for blk in layer_trace[1:]:
            prob_sum = prob_sum + ad.sum_(blk.full_probs, axis=0)
        p = prob_sum * (1.0 / selected_all.shape[0])
        aux = load_balance_loss(f, p, cfg.alpha, n_experts)
        loss = ce + aux

        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite joint loss at step {step}; routing stats of the "
                f"offending batch: f={f.tolist()}, p={p.data.tolist()}"
            )
        optimizer.zero_grad()
        ad.backward(loss)
        _fill_missing_grads(model.params, optimizer.frozen)
        optimizer.step()
        trace.append(
            {
                "step": step,
                "l_ce": float(ce.data),
                "l_aux": float(aux.data),
                "f": [float(x) for x in f],
                "p": [float(x) for x in p.data],
                "lr": cfg.learning_rate,
            }
        )

    ckpt = Checkpoint(
        config=config,
        params=model.arrays(),
        kind=MOE,
        provenance=f"{moe_ckpt.provenance};joint:{n_steps}steps",
        frozen=moe_ckpt.frozen,
    )
    return TrainResult(checkpoint=ckpt, trace=trace)
