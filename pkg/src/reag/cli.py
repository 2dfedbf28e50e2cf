"""Command-line surface: indexing, retrieval, filtering, answering, scoring,
evaluation, ablation sweeps, the toy GRPO demo, and prompt inspection.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Sequence

from .backends import BackendError, load_backend_spec, make_backends
from .core import (
    GroundTruth,
    PipelineConfig,
    QuestionTask,
    RetrievalModality,
    ValidationError,
    validate_config,
)
from .filtering import filter_passages
from .harness import (
    DataError,
    build_kb_index,
    evaluate,
    ingest_kb,
    ingest_qa,
    run_batch,
    sweep,
    sweep_to_csv,
)
from .index import EmbeddingVector, VectorIndex, build_index
from .prompts import TEMPLATE_NAMES, render_template
from .retrieval import RetrievalError, coarse_retrieve, fine_retrieve, merge_rank
from .rewards import score_output
from .rl import CopyTokenEnv, ToyPolicy, train_toy

USAGE_ERROR, DATA_ERROR, BACKEND_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_backend_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", metavar="CONFIG.toml", default=None,
                        help="backend config file (env REAG_* overrides apply)")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-k", "--top-k", type=int, default=None)
    parser.add_argument("--threshold", type=float, default=None,
                        help="critic yes-probability threshold")
    parser.add_argument("--gamma", type=float, default=None, help="task reward weight")
    parser.add_argument("--delta", type=float, default=None, help="format reward weight")
    parser.add_argument("--modality", choices=[m.value for m in RetrievalModality], default=None)
    parser.add_argument("--workers", type=int, default=1)


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    overrides = {}
    if getattr(args, "top_k", None) is not None:
        overrides["top_k"] = args.top_k
    if getattr(args, "threshold", None) is not None:
        overrides["critic_threshold"] = args.threshold
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = args.gamma
    if getattr(args, "delta", None) is not None:
        overrides["delta"] = args.delta
    if getattr(args, "modality", None) is not None:
        overrides["retrieval_modality"] = RetrievalModality(args.modality)
    if overrides:
        cfg = replace(cfg, **overrides)
    return validate_config(cfg)


def _backends(args: argparse.Namespace):
    return make_backends(load_backend_spec(getattr(args, "backend", None)))


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def cmd_index_build(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    cfg = _pipeline_config(args)
    index = build_kb_index(kb, _backends(args), cfg.retrieval_modality)
    index.save(args.out)
    print(f"indexed {len(index)} of {len(kb)} documents -> {args.out}", file=sys.stderr)
    return 0


def cmd_index_search(args: argparse.Namespace) -> int:
    index = VectorIndex.load(args.index)
    backends = _backends(args)
    if args.text is not None:
        vector = backends.embedder.embed(args.text, kind="text")
    elif args.image is not None:
        vector = backends.embedder.embed(args.image, kind="image")
    elif args.vector is not None:
        vector = EmbeddingVector(values=tuple(json.loads(args.vector)))
    else:
        print("index search: one of --text, --image, or --vector is required", file=sys.stderr)
        return USAGE_ERROR
    for hit in index.search(vector, args.top_k or 20):
        print(json.dumps(hit.to_dict(), sort_keys=True))
    return 0


def _retrieve_noisy(record, kb, index, backends, cfg):
    coarse = coarse_retrieve(record.query, index, cfg.top_k, backends.embedder)
    fine = fine_retrieve(record.query, index, cfg.top_k, backends.embedder, backends.region)
    return merge_rank(coarse, fine, kb, cfg.top_k)


def _index_for(kb, backends, cfg, oracle: bool):
    # Oracle mode never performs retrieval, so skip the embedding pass.
    if oracle:
        return build_index([])
    return build_kb_index(kb, backends, cfg.retrieval_modality)


def cmd_retrieve(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    records = ingest_qa(args.qa)
    cfg = _pipeline_config(args)
    backends = _backends(args)
    index = build_kb_index(kb, backends, cfg.retrieval_modality)
    for record in records:
        noisy = _retrieve_noisy(record, kb, index, backends, cfg)
        print(json.dumps({
            "question": record.query.question,
            "doc_ids": noisy.doc_ids(),
            "hits": [h.to_dict() for h in noisy.source_hits],
            "passage_ids": [p.passage_id for p in noisy.passages],
        }, sort_keys=True))
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    records = ingest_qa(args.qa)
    cfg = _pipeline_config(args)
    backends = _backends(args)
    index = build_kb_index(kb, backends, cfg.retrieval_modality)
    for record in records:
        noisy = _retrieve_noisy(record, kb, index, backends, cfg)
        relevant, verdicts = filter_passages(
            record.query, noisy, backends.critic, cfg.critic_threshold, args.workers
        )
        print(json.dumps({
            "question": record.query.question,
            "kept_passage_ids": [p.passage_id for p in relevant],
            "verdicts": [v.to_dict() for v in verdicts],
        }, sort_keys=True))
    return 0


def cmd_answer(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    records = ingest_qa(args.qa)
    cfg = _pipeline_config(args)
    backends = _backends(args)
    index = _index_for(kb, backends, cfg, args.oracle)
    results = run_batch(records, kb, index, backends, cfg,
                        max_workers=args.workers, oracle=args.oracle)
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in results]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    gamma = args.gamma if args.gamma is not None else 1.0
    delta = args.delta if args.delta is not None else 0.2
    if args.infile == "-":
        content = sys.stdin.read()
    else:
        with open(args.infile) as fh:
            content = fh.read()
    lines = [line for line in content.splitlines() if line.strip()]
    for lineno, line in enumerate(lines, start=1):
        try:
            raw = json.loads(line)
            breakdown = score_output(
                str(raw["output"]),
                GroundTruth.from_dict(raw["ground_truth"]),
                QuestionTask.from_dict(raw["task"]),
                gamma,
                delta,
            )
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
        print(json.dumps(breakdown.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    records = ingest_qa(args.qa)
    cfg = _pipeline_config(args)
    backends = _backends(args)
    index = _index_for(kb, backends, cfg, args.oracle)
    results = run_batch(records, kb, index, backends, cfg,
                        max_workers=args.workers, oracle=args.oracle)
    report = evaluate(records, results, cfg)
    _emit(report.to_json() + "\n", args.out)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    kb = ingest_kb(args.kb)
    records = ingest_qa(args.qa)
    cfg = _pipeline_config(args)
    backends = _backends(args)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(records, kb, backends, cfg, args.axis, values, max_workers=args.workers)
    _emit(sweep_to_csv(args.axis, rows), args.out)
    return 0


def cmd_grpo_demo(args: argparse.Namespace) -> int:
    env = CopyTokenEnv()
    cfg = validate_config(PipelineConfig(
        group_size=args.group_size,
        clip_epsilon=args.eps,
        gamma=args.gamma if args.gamma is not None else 1.0,
        delta=args.delta if args.delta is not None else 0.2,
    ))
    policy = ToyPolicy(env.vocab, max_len=env.episode_length)
    result = train_toy(policy, env, cfg, iterations=args.iterations,
                       learning_rate=args.learning_rate, seed=args.seed)
    lines = ["iteration,mean_task_reward,mean_format_reward,objective"]
    lines += [
        f"{r.iteration},{r.mean_task_reward},{r.mean_format_reward},{r.objective}"
        for r in result.rows
    ]
    _emit("\n".join(lines) + "\n", args.out)
    print(
        f"best mean task reward {result.best_mean_task_reward:.3f} "
        f"at iteration {result.best_iteration}",
        file=sys.stderr,
    )
    return 0


def cmd_prompts_render(args: argparse.Namespace) -> int:
    kwargs = {}
    if args.question is not None:
        kwargs["question"] = args.question
    if args.passage is not None:
        kwargs["passage"] = args.passage
    sys.stdout.write(render_template(args.template, **kwargs) + "\n")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="reag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_index = sub.add_parser("index", help="build or query a vector index")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)
    p_build = index_sub.add_parser("build")
    p_build.add_argument("--kb", required=True)
    p_build.add_argument("--out", required=True)
    _add_backend_arg(p_build)
    _add_config_args(p_build)
    p_build.set_defaults(func=cmd_index_build)
    p_search = index_sub.add_parser("search")
    p_search.add_argument("--index", required=True)
    p_search.add_argument("--text")
    p_search.add_argument("--image")
    p_search.add_argument("--vector", help="JSON list of floats")
    _add_backend_arg(p_search)
    _add_config_args(p_search)
    p_search.set_defaults(func=cmd_index_search)

    for name, func, oracle in (
        ("retrieve", cmd_retrieve, False),
        ("filter", cmd_filter, False),
        ("answer", cmd_answer, True),
        ("eval", cmd_eval, True),
    ):
        p = sub.add_parser(name)
        p.add_argument("--kb", required=True)
        p.add_argument("--qa", required=True)
        if oracle:
            p.add_argument("--oracle", action="store_true",
                           help="skip retrieval; use each record's oracle document")
            p.add_argument("--out", default=None)
        _add_backend_arg(p)
        _add_config_args(p)
        p.set_defaults(func=func)

    p_score = sub.add_parser("score", help="score JSONL records {output, ground_truth, task}")
    p_score.add_argument("--in", dest="infile", default="-")
    p_score.add_argument("--gamma", type=float, default=None)
    p_score.add_argument("--delta", type=float, default=None)
    p_score.set_defaults(func=cmd_score)

    p_sweep = sub.add_parser("sweep")
    p_sweep.add_argument("--kb", required=True)
    p_sweep.add_argument("--qa", required=True)
    p_sweep.add_argument("--axis", choices=("k", "threshold"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out", default=None)
    _add_backend_arg(p_sweep)
    _add_config_args(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_demo = sub.add_parser("grpo-demo", help="train the toy policy on the copy task")
    p_demo.add_argument("--group-size", type=int, default=8)
    p_demo.add_argument("--iterations", type=int, default=300)
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--eps", type=float, default=0.2)
    p_demo.add_argument("--gamma", type=float, default=None)
    p_demo.add_argument("--delta", type=float, default=None)
    p_demo.add_argument("--learning-rate", type=float, default=20.0)
    p_demo.add_argument("--out", default=None)
    p_demo.set_defaults(func=cmd_grpo_demo)

    p_prompts = sub.add_parser("prompts", help="inspect the canonical prompt templates")
    prompts_sub = p_prompts.add_subparsers(dest="prompts_command", required=True)
    p_render = prompts_sub.add_parser("render")
    p_render.add_argument("--template", choices=TEMPLATE_NAMES, required=True)
    p_render.add_argument("--question")
    p_render.add_argument("--passage")
    p_render.set_defaults(func=cmd_prompts_render)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValidationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (BackendError, RetrievalError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return BACKEND_ERROR


if __name__ == "__main__":
    sys.exit(main())
