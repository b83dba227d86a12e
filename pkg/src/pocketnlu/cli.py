"""Command-line front end.

Subcommands cover the full lifecycle: lint the ontology, generate a
synthetic corpus, train a parser, parse single utterances with their
per-token instruction trace, run an interactive session, replay-evaluate
a corpus, and shrink a checkpoint for deployment.

Resource defaults come from the bundled toy domain; set POCKETNLU_DATA
to a directory to point every default at your own files instead.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from pocketnlu.context import DialogContext, featurize_inputs
from pocketnlu.corpus import (
    ConversationRecord,
    Turn,
    coverage,
    generate_synthetic,
    read_jsonl,
    turn_count,
    write_jsonl,
)
from pocketnlu.evaluation import fault_injection_run, replay, router_parse_fn
from pocketnlu.federation import OverrideError, Router, load_overrides
from pocketnlu.ontology import (
    NEXT,
    Ontology,
    OntologyError,
    lint,
    load_ontology,
    load_triggers,
)
from pocketnlu.parser import (
    ContextualParser,
    TrainConfig,
    load_model,
    quantize,
    save_model,
    train,
)
from pocketnlu.parser.network import ModelConfig
from pocketnlu.spans import Span, tokenize
from pocketnlu.trees import INFORM, SystemAction, render_tree


def _data_path(name: str) -> str:
    base = os.environ.get("POCKETNLU_DATA")
    if base:
        return os.path.join(base, name)
    from importlib.resources import files

    return str(files("pocketnlu") / "data" / name)


def _load_ontology(args: argparse.Namespace) -> Ontology:
    o = load_ontology(getattr(args, "ontology", None) or _data_path("toy.ont"))
    load_triggers(o, getattr(args, "triggers", None) or _data_path("triggers.tsv"))
    return o


def _load_parser(o: Ontology, model_path: str) -> ContextualParser:
    """Wrap a checkpoint in the estimator so routing code can call it."""
    parser = ContextualParser(ontology=o)
    parser.net_ = load_model(model_path)
    parser.loss_history_ = []
    return parser


def _add_ontology_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ontology", help="ontology file (default: the bundled toy domain)")
    p.add_argument("--triggers", help="enum trigger lexicon (default: bundled)")


def _add_seed_arg(p: argparse.ArgumentParser) -> None:
    # --seed is also accepted before the subcommand; the per-subcommand
    # occurrence wins because SUPPRESS leaves the global value untouched.
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)


# ======================================================================
# Subcommands


def _cmd_lint_ontology(args: argparse.Namespace) -> int:
    o = _load_ontology(args)
    problems = lint(o)
    for line in problems:
        print(line)
    print(f"{len(problems)} violations" if len(problems) != 1 else "1 violation")
    return 1 if problems else 0


def _cmd_gen_corpus(args: argparse.Namespace) -> int:
    o = _load_ontology(args)
    records = generate_synthetic(o, n=args.n, seed=args.seed)
    write_jsonl(records, args.out)
    counts = coverage(records)
    print(f"wrote {len(records)} conversations / {turn_count(records)} turns to {args.out}")
    for family in sorted(counts):
        print(f"  {family:12s} {counts[family]}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    o = _load_ontology(args)
    records = read_jsonl(args.corpus)
    config = TrainConfig(
        model=ModelConfig(),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    net, history = train(o, records, config, log=print)
    written = save_model(args.model, net)
    print(f"saved {args.model} ({written} bytes, final loss {history[-1]:.4f})")
    if args.eval_corpus:
        parser = ContextualParser(ontology=o)
        parser.net_ = net
        parser.loss_history_ = history
        em = parser.score(read_jsonl(args.eval_corpus))
        print(f"eval exact match: {em:.4f}")
    return 0


def _format_span(tokens: list[str], span: Span) -> str:
    text = " ".join(tokens[span.start : span.end + 1])
    entity = f" -> {span.entity_id}" if span.entity_id else ""
    return f"[{span.start}..{span.end}] {text!r} {span.label}{entity} ({span.score:.2f})"


def _print_trace(tokens: list[str], symbols: list[str]) -> None:
    """Per-token instruction table: each row lists the instructions the
    decoder emitted while that token was the cursor."""
    groups: list[list[str]] = [[] for _ in range(len(tokens) + 1)]
    cursor = 0
    for sym in symbols:
        groups[min(cursor, len(tokens))].append(sym)
        if sym == NEXT:
            cursor += 1
    width = max((len(t) for t in tokens), default=0)
    for i, token in enumerate(tokens):
        print(f"  {token:<{width}}  {' '.join(groups[i])}")
    if groups[len(tokens)]:
        print(f"  {'':<{width}}  {' '.join(groups[len(tokens)])}")


def _cmd_parse(args: argparse.Namespace) -> int:
    o = _load_ontology(args)
    parser = _load_parser(o, args.model)
    overrides = load_overrides(args.overrides, o) if args.overrides else []
    router = Router(o, parser=parser, overrides=overrides)
    result = router.route(args.text)
    print(render_tree(result.tree))
    line = f"route: {result.route}"
    if result.qr_rule:
        line += f"  (rewritten by {result.qr_rule}: {result.rewritten!r})"
    if result.override_rule:
        line += f"  (rule {result.override_rule})"
    print(line)
    if result.parse is not None and result.parse.fallback:
        print(f"fallback: {result.parse.fallback}")
    if result.parse is not None and not result.parse.fallback:
        _print_trace(result.parse.tokens, result.parse.symbols)
    return 0


def _cmd_repl(args: argparse.Namespace) -> int:
    o = _load_ontology(args)
    parser = _load_parser(o, args.model)
    overrides = load_overrides(args.overrides, o) if args.overrides else []
    router = Router(o, parser=parser, overrides=overrides)
    ctx = DialogContext()
    # The transcript accumulates conversation records in the corpus format,
    # so a session replays through `eval` unchanged; /reset starts a new one.
    conversations: list[ConversationRecord] = []
    turns: list[Turn] = []

    def snapshot() -> None:
        if args.transcript:
            live = conversations + (
                [ConversationRecord(id=f"repl-{len(conversations):03d}", turns=turns)]
                if turns
                else []
            )
            write_jsonl(live, args.transcript)

    print("interactive session; /reset clears context, ctrl-d exits")
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            print()
            break
        if not line:
            continue
        if line == "/reset":
            if turns:
                conversations.append(
                    ConversationRecord(id=f"repl-{len(conversations):03d}", turns=turns)
                )
                turns = []
            ctx = DialogContext()
            print("context cleared")
            continue
        tokens = tokenize(line)
        spans, context_tokens = featurize_inputs(o, tokens, ctx)
        result = router.route(line, ctx)
        print(f"route:   {result.route}" + (f"  (rule {result.override_rule})" if result.override_rule else ""))
        if result.rewritten != result.utterance:
            print(f"rewrite: {result.rewritten!r}" + (f"  ({result.qr_rule})" if result.qr_rule else ""))
        for span in spans:
            print(f"span:    {_format_span(tokens, span)}")
        print(f"context: {' '.join(context_tokens)}")
        print(render_tree(result.tree))
        if result.parse is not None and result.parse.fallback:
            print(f"fallback: {result.parse.fallback}")
        action = SystemAction(kind=INFORM, payload=result.tree)
        turns.append(
            Turn(
                utterance=line,
                gold_tree=result.tree,
                response_action=action,
                gold_spans=spans,
                instructions=(
                    result.parse.symbols
                    if result.parse is not None and not result.parse.fallback
                    else None
                ),
                route=result.route,
            )
        )
        snapshot()
        ctx.previous_utterances.append(line)
        ctx.previous_action = action
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    import json

    o = _load_ontology(args)
    records = read_jsonl(args.corpus)
    if args.inject is not None:
        report = fault_injection_run(
            o, records, seed=args.seed, harmful_rate=args.inject, limit=args.limit
        )
        print(f"turns:                {report.turns}")
        print(f"designed harmful:     {report.designed_harmful_rate:.3f}")
        print(f"measured user-facing: {report.measured_user_facing:.3f}")
        print(f"exact mismatches:     {report.exact_mismatches}")
        print("note: synthetic faults validate the harness mechanism, not any")
        print("production error rate.")
        if args.report:
            with open(args.report, "w", encoding="utf-8") as fh:
                json.dump(
                    {
                        "turns": report.turns,
                        "designed_harmful_rate": report.designed_harmful_rate,
                        "measured_user_facing": report.measured_user_facing,
                        "exact_mismatches": report.exact_mismatches,
                    },
                    fh,
                    sort_keys=True,
                    indent=2,
                )
        return 0
    parse_fn = None
    if args.model:
        overrides = load_overrides(args.overrides, o) if args.overrides else []
        router = Router(o, parser=_load_parser(o, args.model), overrides=overrides)
        parse_fn = router_parse_fn(router)
    report = replay(records, parse_fn, limit=args.limit)
    print(f"turns:          {report.turns}")
    print(f"exact match:    {report.exact_match_rate:.4f}")
    print(f"user-facing:    {report.user_facing_fraction:.4f}")
    print(f"fallbacks:      {report.fallbacks}")
    if report.triage:
        print("top divergences (gold verb / predicted verb / first differing slot):")
        for key, count in report.top_triage():
            print(f"  {count:5d}  {' / '.join(key)}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "turns": report.turns,
                    "exact_match_rate": report.exact_match_rate,
                    "user_facing_fraction": report.user_facing_fraction,
                    "fallbacks": report.fallbacks,
                    "triage": [
                        {"gold": k[0], "predicted": k[1], "slot": k[2], "count": v}
                        for k, v in report.top_triage(k=len(report.triage))
                    ],
                },
                fh,
                sort_keys=True,
                indent=2,
            )
    return 0


def _cmd_quantize(args: argparse.Namespace) -> int:
    before, after = quantize(args.src, args.dst)
    print(f"{args.src}: {before} bytes")
    print(f"{args.dst}: {after} bytes ({after / before:.2f}x)")
    return 0


# ======================================================================
# Wiring


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pocketnlu", description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="default seed for any subcommand")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lint-ontology", help="check the ontology for design problems")
    p.add_argument("ontology", nargs="?", help="ontology file (default: bundled toy domain)")
    p.add_argument("--triggers", help="enum trigger lexicon (default: bundled)")
    p.set_defaults(fn=_cmd_lint_ontology)

    p = sub.add_parser("gen-corpus", help="generate a synthetic training corpus")
    _add_ontology_args(p)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--n", type=int, default=1000, help="number of conversations")
    _add_seed_arg(p)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train a parser on a corpus")
    _add_ontology_args(p)
    p.add_argument("--corpus", required=True, help="training corpus (JSONL)")
    p.add_argument("--model", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--eval-corpus", help="held-out corpus to score after training")
    _add_seed_arg(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("parse", help="parse one utterance and print its trace")
    _add_ontology_args(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--overrides", help="TSV of pattern-match override rules")
    p.add_argument("text", help="the utterance")
    p.set_defaults(fn=_cmd_parse)

    p = sub.add_parser("repl", help="interactive multi-turn session")
    _add_ontology_args(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--overrides", help="TSV of pattern-match override rules")
    p.add_argument("--transcript", help="record the session to this corpus-format JSONL")
    p.set_defaults(fn=_cmd_repl)

    p = sub.add_parser("eval", help="replay a corpus and report mismatches")
    _add_ontology_args(p)
    p.add_argument("--corpus", required=True, help="corpus to replay (JSONL)")
    p.add_argument("--model", help="checkpoint; omitted means gold self-replay")
    p.add_argument("--overrides", help="TSV of pattern-match override rules")
    p.add_argument("--limit", type=int, default=None, help="stop after this many turns")
    p.add_argument(
        "--inject",
        type=float,
        default=None,
        metavar="RATE",
        help="instead of a model, corrupt gold trees at this harmful rate",
    )
    p.add_argument("--report", help="also write a JSON summary here")
    _add_seed_arg(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("quantize", help="re-store a checkpoint at half precision")
    p.add_argument("src", help="source checkpoint")
    p.add_argument("dst", help="quantized output path")
    p.set_defaults(fn=_cmd_quantize)

    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OntologyError, OverrideError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: no such file", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
