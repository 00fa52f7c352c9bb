"""Command-line surface over the corpus, training and evaluation libraries.

Every subcommand is a thin shell over a library call. Exit codes:
0 success, 1 contract error (bad arguments or malformed inputs),
2 I/O error. All output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import corpus as corpus_lib
from . import evaluate as eval_lib
from . import training as train_lib
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, write_text_atomic
from .errors import ContractError, NumericError
from .model import DENSE, MOE, ModelConfig, init_params
from .training import AblationConfig, TrainConfig


class CliParser(argparse.ArgumentParser):
    """argparse parser that exits 1 (not 2) on usage errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument(
        "--config", dest="config_file", default=None, metavar="FILE",
        help="JSON settings file with 'model' and 'train' sections",
    )
    parser.add_argument("--out", required=out_required, help="output path")


def _load_settings(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        settings = json.load(fh)
    if not isinstance(settings, dict):
        raise ContractError("config file must hold a JSON object")
    return settings


def _model_config(settings: dict, ffn_kind: str) -> ModelConfig:
    base = ModelConfig.desk_default(ffn_kind=ffn_kind)
    overrides = dict(settings.get("model", {}))
    overrides["ffn_kind"] = ffn_kind
    return replace(base, **overrides)


def _train_config(settings: dict, args) -> TrainConfig:
    overrides = dict(settings.get("train", {}))
    cfg = TrainConfig(**overrides)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, n_steps=args.steps)
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, alpha=args.alpha)
    cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_docs(path: str) -> list[corpus_lib.Document]:
    with open(path, "r", encoding="utf-8") as fh:
        return corpus_lib.docs_from_jsonl(fh.read())


def _write_manifest(out_path: str, manifest: dict) -> None:
    write_text_atomic(out_path + ".manifest.json", json.dumps(manifest, sort_keys=True, indent=2))


# -- corpus subcommands --------------------------------------------------------


def _cmd_corpus_synth(args) -> int:
    docs = corpus_lib.generate_tri_language_corpus(args.seed, args.n_docs, args.doc_len)
    write_text_atomic(args.out, corpus_lib.docs_to_jsonl(docs))
    return 0


def _cmd_corpus_filter(args) -> int:
    files = _read_raw_tree(args.in_path)
    kept, dropped = corpus_lib.filter_files(
        [f for f in files if isinstance(f, corpus_lib.SourceFile)],
        max_avg=args.max_avg,
        max_line=args.max_line,
    )
    dropped = [d for d in files if isinstance(d, dict)] + dropped
    write_text_atomic(args.out, corpus_lib.files_to_jsonl(kept))
    _write_manifest(
        args.out,
        {
            "stage": "filter",
            "files_in": len(files),
            "files_kept": len(kept),
            "dropped_files": dropped,
        },
    )
    return 0


def _read_raw_tree(root: str):
    """Read a raw corpus tree: <root>/<language>/<repo_id>/<files...>.

    Undecodable files become drop-ledger entries with reason 'encoding'.
    """
    if not os.path.isdir(root):
        raise ContractError(f"raw corpus root {root!r} is not a directory")
    entries: list = []
    for language in sorted(os.listdir(root)):
        lang_dir = os.path.join(root, language)
        if not os.path.isdir(lang_dir):
            continue
        corpus_lib.check_language(language)
        for repo_id in sorted(os.listdir(lang_dir)):
            repo_dir = os.path.join(lang_dir, repo_id)
            if not os.path.isdir(repo_dir):
                continue
            for dirpath, dirnames, filenames in os.walk(repo_dir):
                dirnames.sort()
                for filename in sorted(filenames):
                    full = os.path.join(dirpath, filename)
                    rel = os.path.relpath(full, repo_dir)
                    try:
                        with open(full, "r", encoding="utf-8") as fh:
                            text = fh.read()
                    except UnicodeDecodeError:
                        entries.append(
                            {"repo_id": repo_id, "path": rel, "reason": "encoding"}
                        )
                        continue
                    entries.append(
                        corpus_lib.SourceFile(
                            repo_id=repo_id, path=rel, text=text, language=language
                        )
                    )
    return entries


def _cmd_corpus_dedup(args) -> int:
    with open(args.in_path, "r", encoding="utf-8") as fh:
        files = corpus_lib.files_from_jsonl(fh.read())
    repos = corpus_lib.group_by_repo(files)
    kept_repos, removed = corpus_lib.dedup_repositories(repos, threshold=args.threshold)
    docs = [
        corpus_lib.concat_repository(repo_files, separator=args.separator)
        for _repo_id, repo_files in sorted(kept_repos.items())
    ]
    write_text_atomic(args.out, corpus_lib.docs_to_jsonl(docs))
    _write_manifest(
        args.out,
        {
            "stage": "dedup",
            "repos_in": len(repos),
            "repos_kept": len(kept_repos),
            "dedup_removed": removed,
        },
    )
    return 0


def _cmd_corpus_decontaminate(args) -> int:
    docs = _read_docs(args.in_path)
    test_docs = _read_docs(args.test)
    kept, removed = corpus_lib.decontaminate(docs, test_docs, n=args.ngram)
    write_text_atomic(args.out, corpus_lib.docs_to_jsonl(kept))
    _write_manifest(
        args.out,
        {
            "stage": "decontaminate",
            "ngram": args.ngram,
            "docs_in": len(docs),
            "docs_kept": len(kept),
            "decontamination_removed": removed,
        },
    )
    return 0


def _cmd_corpus_stats(args) -> int:
    docs = _read_docs(args.in_path)
    per_language: dict[str, dict] = {}
    for doc in docs:
        entry = per_language.setdefault(doc.language, {"docs": 0, "tokens": 0})
        entry["docs"] += 1
        entry["tokens"] += len(corpus_lib.tokenize(doc.text))
    stats = {
        "docs": len(docs),
        "tokens": sum(v["tokens"] for v in per_language.values()),
        "per_language": per_language,
        "corpus_hash": corpus_lib.corpus_hash(docs),
    }
    payload = json.dumps(stats, sort_keys=True, indent=2)
    if args.out:
        write_text_atomic(args.out, payload + "\n")
    else:
        print(payload)
    return 0


# -- train subcommands --------------------------------------------------------


def _cmd_train_dense(args) -> int:
    settings = _load_settings(args.config_file)
    cfg = _train_config(settings, args)
    docs = _read_docs(args.corpus)
    if args.languages:
        wanted = set(args.languages.split(","))
        for lang in wanted:
            corpus_lib.check_language(lang)
        docs = [d for d in docs if d.language in wanted]
    if args.base:
        base = load_checkpoint(args.base, expect_kind=DENSE)
    else:
        model_cfg = _model_config(settings, DENSE)
        base = Checkpoint(
            config=model_cfg,
            params=init_params(model_cfg, args.seed),
            kind=DENSE,
            provenance=f"init:seed{args.seed}",
        )
    result = train_lib.train_dense(base, docs, cfg)
    save_checkpoint(result.checkpoint, args.out)
    if args.trace:
        write_text_atomic(args.trace, train_lib.trace_to_jsonl(result.trace))
    return 0


def _cmd_moe_assemble(args) -> int:
    settings = _load_settings(args.config_file)
    ablation = AblationConfig.for_variant(args.variant)
    base = load_checkpoint(args.base, expect_kind=DENSE)
    experts = [load_checkpoint(path, expect_kind=DENSE) for path in args.experts or []]
    mixed = load_checkpoint(args.mixed, expect_kind=DENSE) if args.mixed else None
    moe_overrides = settings.get("model", {})
    model_cfg = replace(
        base.config,
        ffn_kind=MOE,
        n_routed_experts=moe_overrides.get("n_routed_experts", 3),
        top_k=moe_overrides.get("top_k", 2),
        alpha=moe_overrides.get("alpha", 0.01),
        has_shared_expert=(args.variant != "D"),
    )
    ckpt = train_lib.assemble_moe(base, experts, mixed, ablation, model_cfg, seed=args.seed)
    save_checkpoint(ckpt, args.out)
    return 0


def _cmd_moe_train(args) -> int:
    settings = _load_settings(args.config_file)
    cfg = _train_config(settings, args)
    ckpt = load_checkpoint(args.ckpt, expect_kind=MOE)
    docs = _read_docs(args.corpus)
    result = train_lib.train_joint(ckpt, docs, cfg)
    save_checkpoint(result.checkpoint, args.out)
    if args.trace:
        write_text_atomic(args.trace, train_lib.trace_to_jsonl(result.trace))
    return 0


# -- eval subcommands --------------------------------------------------------


def _cmd_eval_ppl(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    docs = _read_docs(args.corpus)
    report = eval_lib.evaluate(ckpt, docs, seed=args.seed)
    write_text_atomic(args.out, report.to_json() + "\n")
    return 0


def _cmd_eval_routing(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    docs = _read_docs(args.corpus)
    report = eval_lib.evaluate(ckpt, docs, seed=args.seed)
    payload = {
        "checkpoint_provenance": report.checkpoint_provenance,
        "model_kind": report.model_kind,
        "corpus_hash": report.corpus_hash,
        "routing": report.routing,
    }
    write_text_atomic(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_eval_compare(args) -> int:
    labels = args.labels
    if labels is None:
        labels = [os.path.splitext(os.path.basename(p))[0] for p in args.reports]
    if len(labels) != len(args.reports):
        raise ContractError(f"{len(labels)} labels for {len(args.reports)} reports")
    pairs = []
    for label, path in zip(labels, args.reports):
        with open(path, "r", encoding="utf-8") as fh:
            pairs.append((label, eval_lib.EvalReport.from_json(fh.read())))
    table = eval_lib.compare(pairs, baseline=args.baseline)
    write_text_atomic(args.out, table.to_json() + "\n")
    print(table.to_text(), end="")
    return 0


# -- parser wiring --------------------------------------------------------


def build_parser() -> CliParser:
    parser = CliParser(prog="langmoe")
    top = parser.add_subparsers(dest="command", required=True)

    corpus_cmd = top.add_parser("corpus", help="corpus pipeline stages")
    corpus_sub = corpus_cmd.add_subparsers(dest="subcommand", required=True)

    p = corpus_sub.add_parser("synth", help="generate the synthetic tri-language corpus")
    _add_common(p)
    p.add_argument("--n-docs", type=int, default=100, help="documents per language")
    p.add_argument("--doc-len", type=int, default=120, help="approx tokens per document")
    p.set_defaults(func=_cmd_corpus_synth)

    p = corpus_sub.add_parser("filter", help="apply line-length file filters to a raw tree")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True, help="raw corpus root")
    p.add_argument("--max-avg", type=float, default=corpus_lib.DEFAULT_MAX_AVG_LINE)
    p.add_argument("--max-line", type=int, default=corpus_lib.DEFAULT_MAX_LINE)
    p.set_defaults(func=_cmd_corpus_filter)

    p = corpus_sub.add_parser("dedup", help="dedup repos and emit repo-level documents")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True, help="files.jsonl from filter")
    p.add_argument("--threshold", type=float, default=corpus_lib.DEFAULT_JACCARD_THRESHOLD)
    p.add_argument("--separator", default=corpus_lib.DEFAULT_SEPARATOR)
    p.set_defaults(func=_cmd_corpus_dedup)

    p = corpus_sub.add_parser("decontaminate", help="drop docs sharing n-grams with test docs")
    _add_common(p)
    p.add_argument("--in", dest="in_path", required=True, help="docs.jsonl")
    p.add_argument("--test", required=True, help="test docs.jsonl")
    p.add_argument("--ngram", type=int, default=corpus_lib.DEFAULT_NGRAM)
    p.set_defaults(func=_cmd_corpus_decontaminate)

    p = corpus_sub.add_parser("stats", help="per-language document and token counts")
    _add_common(p, out_required=False)
    p.add_argument("--in", dest="in_path", required=True, help="docs.jsonl")
    p.set_defaults(func=_cmd_corpus_stats)

    train_cmd = top.add_parser("train", help="dense training")
    train_sub = train_cmd.add_subparsers(dest="subcommand", required=True)
    p = train_sub.add_parser("dense", help="train a dense checkpoint (omit --base to init fresh)")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="docs.jsonl")
    p.add_argument("--base", default=None, help="starting dense checkpoint")
    p.add_argument("--languages", default=None, help="comma-separated language filter")
    p.add_argument("--steps", type=int, default=None, help="override step budget")
    p.add_argument("--trace", default=None, help="write the loss trace (jsonl)")
    p.set_defaults(func=_cmd_train_dense)

    moe_cmd = top.add_parser("moe", help="MoE assembly and joint training")
    moe_sub = moe_cmd.add_subparsers(dest="subcommand", required=True)

    p = moe_sub.add_parser("assemble", help="assemble an MoE checkpoint from dense ones")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", dest="variant", required=True, choices=list("ABCDE"),
                   help="ablation variant")
    p.add_argument("--config-file", dest="config_file", default=None,
                   help="JSON settings file (model overrides)")
    p.add_argument("--out", required=True)
    p.add_argument("--base", required=True, help="base dense checkpoint")
    p.add_argument("--experts", nargs="*", default=None,
                   help="per-language dense checkpoints, expert order")
    p.add_argument("--mixed", default=None, help="mixed-language dense checkpoint")
    p.set_defaults(func=_cmd_moe_assemble)

    p = moe_sub.add_parser("train", help="joint MoE fine-tuning")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="assembled MoE checkpoint")
    p.add_argument("--corpus", required=True, help="docs.jsonl")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="load-balancing coefficient")
    p.add_argument("--trace", default=None, help="write the loss/stats trace (jsonl)")
    p.set_defaults(func=_cmd_moe_train)

    eval_cmd = top.add_parser("eval", help="evaluation and comparisons")
    eval_sub = eval_cmd.add_subparsers(dest="subcommand", required=True)

    p = eval_sub.add_parser("ppl", help="per-language perplexity report")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=_cmd_eval_ppl)

    p = eval_sub.add_parser("routing", help="routing diagnostics report")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=_cmd_eval_routing)

    p = eval_sub.add_parser("compare", help="tabulate reports against a baseline")
    _add_common(p)
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--baseline", default=None)
    p.set_defaults(func=_cmd_eval_compare)

    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
