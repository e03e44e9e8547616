"""Command-line entry point: ``tleaf <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace

from threadpoolctl import threadpool_limits

from . import automata, bench, cooking, datasets, nn
from .embedder import EmbedderConfig, EmbedderModel, TrainConfig, train_embedder
from .ltl import PRESETS, Alphabet, LtlSyntaxError, Trace, check, format_formula, parse

log = logging.getLogger("tleaf")

EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        negatives=args.negatives,
        stage1_steps=args.stage1_steps,
        stage2_steps=args.stage2_steps,
        seed=args.seed,
        **extra,
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--negatives", type=int, default=d.negatives)
    p.add_argument("--stage1-steps", type=int, default=d.stage1_steps)
    p.add_argument("--stage2-steps", type=int, default=d.stage2_steps)


# ---------------------------------------------------------------------------
# subcommands


def cmd_compile(args) -> None:
    al = Alphabet(args.props.split(",")) if args.props else Alphabet()
    f = parse(args.formula, al)
    props = tuple(range(len(al)))
    symbols = automata.one_hot_symbols(props) if args.one_hot else None
    g = automata.compile_graph(f, al, props=props, symbols=symbols)
    if args.dot:
        _write(args.dot, automata.to_dot(g))
    out = args.json or args.out
    if out:
        with open(out, "wb") as fh:
            fh.write(automata.export(g, "json"))
    print(f"{g.n_states} states, {len(g.edges)} edges, {len(g.accepting)} accepting")


def _load_traces(path: str, al: Alphabet) -> list[Trace]:
    with open(path) as fh:
        data = json.load(fh)
    traces = data["traces"] if isinstance(data, dict) else data
    return [Trace.from_names(w, al) for w in traces]


def cmd_check(args) -> None:
    if args.corpus:
        corpus = datasets.load(args.corpus)
        total = corpus.n_traces()
        bad = datasets.verify_with_dfa(corpus)
        res = {"traces": total, "disagreements": bad, "agreement": (total - bad) / total if total else 1.0}
        _write(args.out, _dumps(res))
        print(f"label agreement {100 * res['agreement']:.2f}% over {total} traces")
        return
    if not args.formula or not args.traces:
        raise UsageError("check needs FORMULA and --traces, or --corpus")
    al = Alphabet()
    f = parse(args.formula, al)
    traces = _load_traces(args.traces, al)
    props = tuple(range(len(al)))
    a = automata.minimize(automata.compile_formula(f, props=props))
    verdicts = []
    for w in traces:
        v = check(w, f)
        if automata.run(a, w) != v:
            raise AssertionError("automaton and semantic checker disagree")
        verdicts.append(v)
    _write(args.out, _dumps({"formula": args.formula, "verdicts": verdicts}))
    print(f"{sum(verdicts)} of {len(verdicts)} traces satisfy the formula")


def cmd_gen_dataset(args) -> None:
    c = datasets.gen_corpus(PRESETS[args.regime], args.n_formulas, args.traces, tuple(args.len_range), seed=args.seed)
    _write(args.out, datasets.dumps(c))
    counts = {s: len(c.split(s)) for s in datasets.SPLITS}
    print(f"{len(c.entries)} formulas, {c.n_traces()} traces, splits {counts}")


def cmd_train_embedder(args) -> None:
    corpus = datasets.load(args.corpus)
    ecfg = EmbedderConfig(n_props=corpus.complexity.n_v, walk_len=args.walk_len, readout=args.readout, seed=args.seed)
    tcfg = _train_config(args, representation=args.repr, eval_every=args.eval_every)
    held = None
    if args.heldout:
        extra = datasets.with_extra_traces(corpus, args.heldout, seed=args.seed + 1)
        held = [h for h, e in zip(extra, corpus.entries) if e.split == "train"]
    if not args.out:
        raise UsageError("train-embedder needs --out PREFIX")
    res = train_embedder(corpus.examples("train"), ecfg, tcfg, heldout=held)
    res.model.save(args.out)
    with open(args.out + ".log.jsonl", "w") as fh:
        fh.write(res.log_jsonl())
    last = res.log[-1] if res.log else {}
    print(f"saved {args.out}.ckpt; final {json.dumps(last, sort_keys=True)}")


def cmd_bench(args) -> None:
    reps = bench.REPRESENTATIONS if args.repr == "both" else (args.repr,)
    cfg = bench.BenchConfig(
        n_formulas=args.n_formulas,
        walk_len=args.walk_len,
        readout=args.readout,
        train=_train_config(args),
        joint=args.joint,
    )
    cfg = replace(cfg, clf=replace(cfg.clf, epochs=args.clf_epochs))
    seeds = list(range(args.seed, args.seed + args.seeds))
    t0 = time.perf_counter()
    report = bench.table1_experiment(args.regime, seeds, cfg, reps, progress=lambda r: log.info("%s", json.dumps(r, sort_keys=True)))
    _write(args.out, bench.report_json(report))
    print(bench.report_markdown(report), end="")
    print(f"wall-clock {time.perf_counter() - t0:.1f}s")


def cmd_export_embeddings(args) -> None:
    corpus = datasets.load(args.corpus)
    model = EmbedderModel.load(args.model)
    text = bench.export_embeddings(model, corpus, args.split, args.repr, args.limit)
    _write(args.out, text)
    print(f"{text.count(chr(10)) - 1} rows")


def cmd_cooking(args) -> None:
    domain = cooking.load_domain(args.domain)
    if args.cooking_cmd == "rollout":
        traj = cooking.rollout(domain, args.seed)
        _write(args.out, traj.to_jsonl(domain))
        print(f"{len(traj.steps)} steps, total reward {traj.total_reward:g}")
    elif args.cooking_cmd == "kb":
        kb = cooking.knowledge_base(domain)
        al = domain.alphabet()
        rows = [{"kind": c.kind, "ingredient": domain.ingredients[c.ingredient - 1], "formula": format_formula(c.formula, al)} for c in kb.constraints]
        _write(args.out, _dumps({"constraints": rows}))
        kinds = {k: sum(c.kind == k for c in kb.constraints) for k in ("affordance", "dependency")}
        print(f"{len(kb)} constraints {kinds}")
    elif args.cooking_cmd == "score":
        seeds = range(args.eval_seed, args.eval_seed + args.n_eval)
        tcfg = _train_config(args, eval_every=10**9)
        res = cooking.logic_loss_experiment(domain, args.n_train, seeds, args.seed, tcfg)
        _write(args.out, _dumps(res))
        print(f"{res['n_pairs']} matched pairs, satisfying trajectory scored lower in {100 * res['win_rate']:.1f}%")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tleaf", description="LTL_f compilation, formula/trace embedding and benchmarks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bit-reproducible runs)")
    p.add_argument("--out", default=None, help="primary output path (stdout if omitted)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="formula -> minimal DFA (JSON and/or DOT)")
    c.add_argument("formula")
    c.add_argument("--props", help="comma-separated proposition order")
    c.add_argument("--dot")
    c.add_argument("--json")
    c.add_argument("--one-hot", action="store_true", help="restrict symbols to at most one true proposition")
    c.set_defaults(func=cmd_compile)

    c = sub.add_parser("check", help="model-check traces or re-verify a corpus")
    c.add_argument("formula", nargs="?")
    c.add_argument("--traces", help="JSON list of traces, each a list of steps (lists of names)")
    c.add_argument("--corpus")
    c.set_defaults(func=cmd_check)

    c = sub.add_parser("gen-dataset", help="random formulas with labeled traces")
    c.add_argument("--regime", choices=sorted(PRESETS), default="low")
    c.add_argument("--n-formulas", type=int, default=300)
    c.add_argument("--traces", type=int, default=10, help="traces per label per formula")
    c.add_argument("--len-range", type=int, nargs=2, default=(2, 8))
    c.set_defaults(func=cmd_gen_dataset)

    c = sub.add_parser("train-embedder", help="triplet-train the embedder on a corpus")
    c.add_argument("--corpus", required=True)
    c.add_argument("--repr", choices=bench.REPRESENTATIONS, default="dfa")
    c.add_argument("--walk-len", type=int, default=EmbedderConfig.walk_len)
    c.add_argument("--readout", choices=("walk", "mean"), default="walk")
    c.add_argument("--eval-every", type=int, default=200)
    c.add_argument("--heldout", type=int, default=0, metavar="K", help="also log margin accuracy on K fresh traces per label")
    _add_train_flags(c)
    c.set_defaults(func=cmd_train_embedder)

    c = sub.add_parser("bench", help="model-checking accuracy, DFA vs syntax tree")
    c.add_argument("--regime", action="append", choices=sorted(PRESETS), required=True)
    c.add_argument("--repr", choices=(*bench.REPRESENTATIONS, "both"), default="both")
    c.add_argument("--seeds", type=int, default=3, help="number of seeds, counted up from --seed")
    c.add_argument("--n-formulas", type=int, default=bench.BenchConfig.n_formulas)
    c.add_argument("--walk-len", type=int, default=bench.BenchConfig.walk_len)
    c.add_argument("--readout", choices=("walk", "mean"), default=bench.BenchConfig.readout)
    c.add_argument("--clf-epochs", type=int, default=bench.ClfConfig.epochs)
    c.add_argument("--joint", action="store_true", help="train q_m end to end with the classifier")
    _add_train_flags(c)
    c.set_defaults(func=cmd_bench)

    c = sub.add_parser("export-embeddings", help="CSV of formula/trace embeddings with a 2-D PCA")
    c.add_argument("--corpus", required=True)
    c.add_argument("--model", required=True, help="checkpoint prefix written by train-embedder")
    c.add_argument("--split", choices=datasets.SPLITS)
    c.add_argument("--repr", choices=bench.REPRESENTATIONS, default="dfa")
    c.add_argument("--limit", type=int)
    c.set_defaults(func=cmd_export_embeddings)

    c = sub.add_parser("cooking", help="cooking environment tools")
    c.add_argument("--domain", help="domain JSON (default: the shipped one)")
    csub = c.add_subparsers(dest="cooking_cmd", required=True, parser_class=_Parser)
    csub.add_parser("rollout", help="scripted-expert episode as JSON lines")
    csub.add_parser("kb", help="knowledge-base constraints as JSON")
    s = csub.add_parser("score", help="train on sampled fragments, score expert vs order-inverted rollouts")
    s.add_argument("--n-train", type=int, default=300)
    s.add_argument("--eval-seed", type=int, default=1000)
    s.add_argument("--n-eval", type=int, default=100)
    _add_train_flags(s)
    c.set_defaults(func=cmd_cooking)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        nn.keep_heap_warm()
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"tleaf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, LtlSyntaxError, datasets.CorpusError, cooking.DomainError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"tleaf: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (AssertionError, FloatingPointError) as exc:
        print(f"tleaf: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
