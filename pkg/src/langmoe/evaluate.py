"""Held-out evaluation: per-language perplexity and routing diagnostics.

Cross-entropy is the mean negative log-likelihood over predicted
positions, grouped by document language; perplexity is exp(CE).
For MoE checkpoints, routing statistics are pooled over every MoE
layer, and top-1 routing entropy is reported both unconditionally and
conditioned on language.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .corpus import Document, corpus_hash
from .errors import ContractError
from .model import MOE, TransformerLM
from .moe import RoutingStats, compute_routing_stats
from .training import PAD_TARGET, make_blocks

TOKENIZER_ID = "byte-256"


def entropy(dist: np.ndarray) -> float:
    """Shannon entropy in nats of a probability vector (0 log 0 = 0)."""
    dist = np.asarray(dist, dtype=np.float64)
    nz = dist[dist > 0]
    return float(-(nz * np.log(nz)).sum())


def routing_entropies(stats: RoutingStats) -> tuple[float, float]:
    """(unconditional, conditional-on-language) top-1 routing entropy."""
    pooled = np.zeros(stats.n_experts, dtype=np.float64)
    for counts in stats.per_language_counts.values():
        pooled += counts
    total = pooled.sum()
    if total == 0:
        raise ContractError("routing_entropies: no routed tokens")
    unconditional = entropy(pooled / total)
    conditional = 0.0
    for counts in stats.per_language_counts.values():
        lang_total = counts.sum()
        if lang_total == 0:
            continue
        conditional += (lang_total / total) * entropy(counts / lang_total)
    return unconditional, float(conditional)


@dataclass
class EvalReport:
    checkpoint_provenance: str
    model_kind: str
    seed: int
    corpus_hash: str
    tokenizer: str
    per_language: dict[str, dict]          # language -> {ce, perplexity, n_tokens}
    average_ce: float
    average_perplexity: float
    routing: dict | None = None            # f, p, per-language counts, entropies

    def to_json(self) -> str:
        payload = {
            "checkpoint_provenance": self.checkpoint_provenance,
            "model_kind": self.model_kind,
            "seed": self.seed,
            "corpus_hash": self.corpus_hash,
            "tokenizer": self.tokenizer,
            "per_language": self.per_language,
            "average_ce": self.average_ce,
            "average_perplexity": self.average_perplexity,
            "routing": self.routing,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, payload: str) -> "EvalReport":
        d = json.loads(payload)
        return cls(
            checkpoint_provenance=d["checkpoint_provenance"],
            model_kind=d["model_kind"],
            seed=d["seed"],
            corpus_hash=d["corpus_hash"],
            tokenizer=d["tokenizer"],
            per_language=d["per_language"],
            average_ce=d["average_ce"],
            average_perplexity=d["average_perplexity"],
            routing=d["routing"],
        )


def evaluate(
    ckpt: Checkpoint, docs: list[Document], seed: int = 0, batch_size: int = 16
) -> EvalReport:
    """Deterministic held-out evaluation of a checkpoint on a corpus."""
    if not docs:
        raise ContractError("evaluate: empty corpus")
    config = ckpt.config
    model = TransformerLM.from_arrays(config, ckpt.params, trainable=False)
    is_moe = config.ffn_kind == MOE

    nll_sum: dict[str, float] = {}
    tok_count: dict[str, int] = {}
    stats: RoutingStats | None = None
    lam_sum = 0.0
    lam_count = 0

    blocks = make_blocks(docs, config.context_length)
    for start in range(0, len(blocks), batch_size):
        chunk = blocks[start : start + batch_size]
        inputs = np.stack([b[0] for b in chunk])
        targets = np.stack([b[1] for b in chunk])
        languages = [b[2] for b in chunk]
        logits, layer_trace = model.forward_with_trace(inputs)
        flat_logits = ad.reshape(logits, (-1, config.vocab_size))
        flat_targets = targets.reshape(-1)
        valid = flat_targets != PAD_TARGET

        x = flat_logits.data.astype(np.float64)
        m = x.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(x - m).sum(axis=-1)) + m[:, 0]
        rows = np.arange(x.shape[0])
        safe = np.where(valid, flat_targets, 0)
        nll = log_z - x[rows, safe]

        lang_per_pos = np.repeat(np.asarray(languages), inputs.shape[1])
        for lang in sorted(set(languages)):
            mask = (lang_per_pos == lang) & valid
            nll_sum[lang] = nll_sum.get(lang, 0.0) + float(nll[mask].sum())
            tok_count[lang] = tok_count.get(lang, 0) + int(mask.sum())

        if is_moe:
            for blk in layer_trace:
                batch_stats = compute_routing_stats(
                    blk.full_probs.data[valid],
                    blk.selected_indices[valid],
                    list(lang_per_pos[valid]),
                )
                stats = batch_stats if stats is None else stats.merge(batch_stats)
                if blk.lam is not None:
                    lam_sum += float(blk.lam.data[valid].sum())
                    lam_count += int(valid.sum())

    per_language = {}
    for lang in sorted(nll_sum):
        ce = nll_sum[lang] / tok_count[lang]
        per_language[lang] = {
            "ce": ce,
            "perplexity": math.exp(ce),
            "n_tokens": tok_count[lang],
        }
    average_ce = sum(v["ce"] for v in per_language.values()) / len(per_language)
    average_ppl = sum(v["perplexity"] for v in per_language.values()) / len(per_language)

    routing = None
    if is_moe and stats is not None:
        unconditional, conditional = routing_entropies(stats)
        routing = {
            "f": [float(x) for x in stats.f],
            "p": [float(x) for x in stats.p],
            "per_language_top1_counts": {
                lang: [int(c) for c in counts]
                for lang, counts in sorted(stats.per_language_counts.items())
            },
            "majority_expert": {
                lang: int(np.argmax(counts))
                for lang, counts in sorted(stats.per_language_counts.items())
            },
            "entropy_unconditional": unconditional,
            "entropy_conditional": conditional,
            "shared_gate_mean": (lam_sum / lam_count) if lam_count else None,
        }

    return EvalReport(
        checkpoint_provenance=ckpt.provenance,
        model_kind=ckpt.kind,
        seed=seed,
        corpus_hash=corpus_hash(docs),
        tokenizer=TOKENIZER_ID,
        per_language=per_language,
        average_ce=average_ce,
        average_perplexity=average_ppl,
        routing=routing,
    )


@dataclass
class ComparisonTable:
    baseline: str
    languages: list[str]
    rows: list[dict] = field(default_factory=list)  # label, per-language ppl, avg, delta

    def to_json(self) -> str:
        return json.dumps(
            {"baseline": self.baseline, "languages": self.languages, "rows": self.rows},
            sort_keys=True,
            indent=2,
        )

    def to_text(self) -> str:
        headers = ["model"] + [f"ppl[{lang}]" for lang in self.languages] + ["avg", "d(avg)"]
        lines = ["\t".join(headers)]
        for row in self.rows:
            cells = [row["label"]]
            cells += [f"{row['perplexity'][lang]:.4f}" for lang in self.languages]
            cells.append(f"{row['average']:.4f}")
            cells.append(f"{row['delta_vs_baseline']:+.4f}")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def compare(reports: list[tuple[str, EvalReport]], baseline: str | None = None) -> ComparisonTable:
    """Tabulate per-language perplexities with deltas against a baseline row."""
    if not reports:
        raise ContractError("compare: no reports")
    labels = [label for label, _ in reports]
    if baseline is None:
        baseline = labels[0]
    if baseline not in labels:
        raise ContractError(f"baseline {baseline!r} is not one of {labels}")
    first = reports[0][1]
    for label, report in reports:
        if report.corpus_hash != first.corpus_hash:
            raise ContractError(
                f"report {label!r} was computed on a different corpus "
                f"({report.corpus_hash[:12]} != {first.corpus_hash[:12]})"
            )
        if report.tokenizer != first.tokenizer:
            raise ContractError(f"report {label!r} used a different tokenizer")
    languages = sorted(first.per_language)
    base_report = dict(reports)[baseline]
    base_avg = base_report.average_perplexity
    table = ComparisonTable(baseline=baseline, languages=languages)
    for label, report in reports:
        table.rows.append(
            {
                "label": label,
                "perplexity": {
                    lang: report.per_language[lang]["perplexity"] for lang in languages
                },
                "average": report.average_perplexity,
                "delta_vs_baseline": report.average_perplexity - base_avg,
            }
        )
    return table
