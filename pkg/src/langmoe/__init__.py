"""Desk-scale mixture-of-experts language model lab.

Subpackages cover the full loop: a numpy-backed reverse-mode autodiff
core, the sparse MoE feed-forward block with an always-active gated
shared expert, a small decoder-only transformer backbone with bit-exact
checkpointing, a corpus curation pipeline with a synthetic tri-language
generator, the dense-warmup / assemble / joint-finetune training
procedure with its five ablation variants, and evaluation plus a CLI.
"""

from . import autodiff, checkpoint, corpus, errors, evaluate, model, moe, training

__all__ = [
    "autodiff",
    "checkpoint",
    "corpus",
    "errors",
    "evaluate",
    "model",
    "moe",
    "training",
]
