"""Command-line entry point: ``ttsp {run,single,simulate,sweep,report}``.

Exit codes: 0 success, 1 configuration or usage error, 2 evaluation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import yaml

from ..backend import OpenAIChatBackend, ScriptedBackend
from ..core import RunConfig, parse_float
from ..errors import AllRoundsFailed, BackendError, ConfigError, MissingImage, NoVotes, ParseError, TTSPError
from ..orchestrator import Variant, ablation_mode, arun_ttsp
from .. import simlab
from .dataset import TaskInstance, load_dataset
from .evaluate import evaluate
from .report import load_report, render_summary

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_EVAL = 2


def _entropy_window(value: str) -> int | float:
    v = str(value).strip()
    try:
        return int(v)
    except ValueError:
        return float(v)


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in {"1", "true", "yes", "on"}:
        return True
    if s in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclasses.dataclass(frozen=True)
class ConfigFlag:
    flag: str
    field: str
    convert: object
    help: str


# every RunConfig field, reachable by exactly one flag
CONFIG_FLAGS = (
    ConfigFlag("rounds", "rounds", int, "refinement rounds N"),
    ConfigFlag("traces", "traces_per_round", int, "traces per round K"),
    ConfigFlag("alpha", "fresh_ratio", float, "fresh fraction of each round's budget"),
    ConfigFlag("rho", "filter_ratio", float, "fraction of each round's traces discarded by the entropy filter"),
    ConfigFlag("gamma", "vote_temperature", parse_float, "vote temperature; 'inf' gives a plain majority"),
    ConfigFlag("logprob-depth", "logprob_depth", int, "top-k log-probs requested per token"),
    ConfigFlag("entropy-window", "entropy_window", _entropy_window,
               "highest-entropy tokens averaged: int count or fraction of the trace"),
    ConfigFlag("max-turns", "max_turns", int, "turn cap per trace"),
    ConfigFlag("temperature", "decode_temperature", float, "sampling temperature for rollouts"),
    ConfigFlag("top-p", "top_p", float, "nucleus sampling mass"),
    ConfigFlag("top-k", "top_k", int, "top-k sampling cutoff (0 disables)"),
    ConfigFlag("max-tokens", "max_tokens", int, "generation budget per trace"),
    ConfigFlag("structured-knowledge", "structured_knowledge", _bool, "carry knowledge memory between rounds"),
    ConfigFlag("extraction-max-tokens", "extraction_max_tokens", int, "generation budget of the extraction call"),
    ConfigFlag("digest-budget", "digest_budget", int, "character budget for trace digests sent to extraction"),
    ConfigFlag("turn-char-budget", "turn_char_budget", int, "character budget per digested turn"),
    ConfigFlag("trace-timeout", "trace_timeout", float, "seconds before a rollout is abandoned"),
)
_BY_KEY = {}
for _f in CONFIG_FLAGS:
    for _k in {_f.flag, _f.flag.replace("-", "_"), _f.field}:
        _BY_KEY[_k] = _f


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="YAML or JSON file of field: value pairs")
    for f in CONFIG_FLAGS:
        dest = "cfg_" + f.field
        if f.convert is _bool:
            g.add_argument(f"--{f.flag}", dest=dest, action=argparse.BooleanOptionalAction, default=None, help=f.help)
        else:
            g.add_argument(f"--{f.flag}", dest=dest, default=None, metavar=f.flag.split("-")[-1].upper(), help=f.help)
    g.add_argument("--variant", default="none", choices=["none", "no-rf", "no-sk", "no-wa"],
                   help="remove one component (ablation)")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--script", type=Path, help="scripted backend JSONL file (no network)")
    g.add_argument("--endpoint", help="OpenAI-compatible base URL (default $TTSP_ENDPOINT)")
    g.add_argument("--model", help="model name (default $TTSP_MODEL)")
    g.add_argument("--request-concurrency", type=int, default=16, help="max in-flight model requests")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trials", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, default=0.3, help="chance a fresh trace inspects the evidence")
    p.add_argument("--p-guided", type=float, default=0.8, help="chance a guided trace does once memory confirms it")
    p.add_argument("--regime", choices=sorted(simlab.REGIMES), default="overlapping", help="entropy regime preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttsp", description="Multi-round perception search with entropy filtering and voting.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="evaluate a dataset")
    run.add_argument("--dataset", type=Path, required=True)
    run.add_argument("--out", type=Path, default=Path("runs"), help="root for run directories")
    run.add_argument("--concurrency", type=int, default=4, help="instances in flight")
    run.add_argument("--limit", type=int, help="only the first N instances")
    _add_config_flags(run)
    _add_backend_flags(run)

    single = sub.add_parser("single", help="run one instance and print its trace tree")
    single.add_argument("--dataset", type=Path)
    single.add_argument("--id", help="instance id inside --dataset (default: first)")
    single.add_argument("--image", type=Path)
    single.add_argument("--question")
    single.add_argument("--option", action="append", default=[], metavar="L=TEXT")
    single.add_argument("--json", action="store_true", help="print the RunResult as JSON instead")
    _add_config_flags(single)
    _add_backend_flags(single)

    sim = sub.add_parser("simulate", help="synthetic Monte-Carlo scenarios")
    sim.add_argument("--scenario", choices=["coverage", "compare", "ablation"], required=True)
    sim.add_argument("--k", type=int, default=8, help="fresh traces (coverage scenario)")
    sim.add_argument("--sc-samples", type=int, help="self-consistency samples (default rounds*traces)")
    _sim_flags(sim)
    _add_config_flags(sim)

    sw = sub.add_parser("sweep", help="synthetic parameter sweep to CSV")
    sw.add_argument("--parameter", choices=simlab.SWEEP_PARAMETERS, required=True)
    sw.add_argument("--grid", required=True, help="comma-separated values, e.g. 0,0.2,0.4")
    sw.add_argument("--out", type=Path, help="CSV path (default stdout)")
    _sim_flags(sw)
    _add_config_flags(sw)

    rep = sub.add_parser("report", help="re-render a run directory's report")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--json", action="store_true")
    return parser


def _read_config_file(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold key-value pairs")
    return data


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < flags."""
    values: dict = {}
    if getattr(args, "config", None) is not None:
        for key, raw in _read_config_file(args.config).items():
            opt = _BY_KEY.get(str(key))
            if opt is None:
                raise ConfigError(f"unknown config key {key!r}")
            values[opt.field] = (opt, raw)
    for opt in CONFIG_FLAGS:
        raw = getattr(args, "cfg_" + opt.field, None)
        if raw is not None:
            values[opt.field] = (opt, raw)
    kw = {}
    for name, (opt, raw) in values.items():
        try:
            kw[name] = opt.convert(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {opt.flag}: {raw!r}") from exc
    return RunConfig(**kw)


def config_to_argv(config: RunConfig) -> list[str]:
    """Flags that reproduce ``config`` exactly; inverse of :func:`config_from_args`."""
    argv = []
    for opt in CONFIG_FLAGS:
        v = getattr(config, opt.field)
        if opt.convert is _bool:
            argv.append(f"--{opt.flag}" if v else f"--no-{opt.flag}")
        elif isinstance(v, float) and math.isinf(v):
            argv += [f"--{opt.flag}", "inf"]
        else:
            argv += [f"--{opt.flag}", repr(v) if isinstance(v, float) else str(v)]
    return argv


def make_backend(args: argparse.Namespace):
    if args.script is not None:
        return ScriptedBackend.from_jsonl(args.script)
    return OpenAIChatBackend(args.endpoint, model=args.model, concurrency=args.request_concurrency)


def _single_instance(args) -> TaskInstance:
    if args.dataset is not None:
        items = load_dataset(args.dataset)
        if not items:
            raise ConfigError("dataset is empty")
        if args.id is None:
            return items[0]
        for it in items:
            if it.id == args.id:
                return it
        raise ConfigError(f"no instance {args.id!r} in {args.dataset}")
    if args.image is None or args.question is None:
        raise ConfigError("single needs --dataset or both --image and --question")
    options = []
    for opt in args.option:
        letter, sep, text = opt.partition("=")
        if not sep:
            raise ConfigError(f"--option expects L=TEXT, got {opt!r}")
        options.append((letter.strip().upper(), text.strip()))
    from .dataset import _check_image

    _check_image(args.image)
    return TaskInstance("single", args.image, args.question, tuple(options) or None)


def render_trace_tree(result, trace_log: Sequence[dict]) -> str:
    lines = [f"answer: {result.answer}"]
    tally = ", ".join(f"{a}={w:.4g}" for a, w in sorted(result.tally.entries.items(), key=lambda kv: -kv[1]))
    lines.append(f"tally: {tally}")
    traces = [r for r in trace_log if r["type"] == "trace"]
    transitions = [r for r in trace_log if r["type"] == "memory_transition"]
    memories = {m.round: m for m in result.memory_history}
    for s in result.per_round_stats:
        lines.append(f"round {s.round}: fresh {s.fresh_count}, guided {s.guided_count}, "
                     f"kept {s.traces_kept}/{s.completed}, tokens {s.generated_tokens}")
        for t in (r for r in traces if r["round"] == s.round):
            mark = "kept" if t["retained"] else ("fail" if t["degraded"] else "drop")
            score = "n/a" if t["score"] is None else f"{t['score']:.4f}"
            lines.append(f"  [{mark}] {t['mode']:<6} #{t['sample']:<2} score {score}  answer {t['answer']}")
            for call in t["tool_calls"]:
                lines.append(f"      zoom '{call['label']}' {call['bbox']} on image {call['image_index']}")
            if t["failure"]:
                lines.append(f"      failure: {t['failure']}")
        for tr in (r for r in transitions if r["round"] == s.round):
            lines.append(f"  memory {tr['kind']}: {tr['statement']}")
        mem = memories.get(s.round)
        if mem is not None and s.round >= 1:
            for f in mem.confirmed:
                lines.append(f"  confirmed: {f.statement} {f.region or ''}".rstrip())
            for c in mem.conflicts:
                lines.append(f"  conflict: {' vs. '.join(c.claims)}")
    return "\n".join(lines) + "\n"


def _cmd_run(args) -> int:
    config = config_from_args(args)
    dataset = load_dataset(args.dataset)
    if args.limit is not None:
        dataset = dataset[: args.limit]
    backend = make_backend(args)
    report = evaluate(dataset, config, backend, variant=args.variant, concurrency=args.concurrency, out_dir=args.out)
    sys.stdout.write(render_summary(report))
    print(f"run directory: {report.run_dir}")
    if report.failed:
        print(f"{report.failed} instance(s) failed", file=sys.stderr)
        return EXIT_EVAL
    return EXIT_OK


def _cmd_single(args) -> int:
    import asyncio

    config = ablation_mode(config_from_args(args), Variant.parse(args.variant))
    inst = _single_instance(args)
    backend = make_backend(args)
    trace_log: list[dict] = []
    try:
        result = asyncio.run(arun_ttsp(inst.to_task(), config, backend, log_sink=trace_log.append))
    except (AllRoundsFailed, NoVotes, BackendError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    if args.json:
        print(result.to_json())
    else:
        sys.stdout.write(render_trace_tree(result, trace_log))
    return EXIT_OK


def _policy(args) -> simlab.AgentPolicy:
    return simlab.AgentPolicy(p=args.p, p_guided=args.p_guided, **simlab.REGIMES[args.regime])


def _cmd_simulate(args) -> int:
    config = config_from_args(args)
    scene = simlab.SyntheticScene()
    if args.scenario == "coverage":
        est, err = simlab.simulate_coverage(args.k, args.p, args.trials, args.seed, scene)
        exact = simlab.coverage_probability([args.p] * args.k)
        print(f"coverage K={args.k} p={args.p}: {est:.4f} ± {err:.4f} (closed form {exact:.6f})")
        return EXIT_OK
    policy = _policy(args)
    if args.scenario == "compare":
        n_sc = args.sc_samples or config.rounds * config.traces_per_round
        a = simlab.simulate_ttsp(scene, policy, ablation_mode(config, args.variant), args.trials, args.seed)
        b = simlab.simulate_ttsp(scene, policy, simlab.self_consistency_config(n_sc), args.trials, args.seed)
        c = simlab.paired_compare(a, b)
        print(f"ttsp {c.accuracy_a:.4f}  sc({n_sc}) {c.accuracy_b:.4f}  "
              f"difference {c.difference:+.4f} ± {c.stderr:.4f} (paired, {c.trials} trials)")
        return EXIT_OK
    table = simlab.ablation_table(config, scene, policy, args.trials, args.seed)
    full = table[Variant.NONE.value]
    print("variant  accuracy  drop     paired_se")
    for name, res in table.items():
        c = simlab.paired_compare(full, res)
        print(f"{name:<7}  {res.accuracy:.4f}    {c.difference:+.4f}  {c.stderr:.4f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = ablation_mode(config_from_args(args), args.variant)
    try:
        grid = [parse_float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid: {exc}") from exc
    rows = simlab.sweep(args.parameter, grid, config, simlab.SyntheticScene(), _policy(args), args.trials, args.seed)
    if args.out is not None:
        simlab.write_sweep_csv(rows, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        import csv

        w = csv.writer(sys.stdout)
        w.writerow(simlab.SWEEP_HEADER)
        for r in rows:
            w.writerow([r.parameter, "inf" if math.isinf(r.value) else r.value,
                        f"{r.accuracy:.6f}", f"{r.stderr:.6f}", r.trials, r.seed])
    return EXIT_OK


def _cmd_report(args) -> int:
    report = load_report(args.run_dir)
    if args.json:
        print(json.dumps(report.summary(), indent=2, sort_keys=True))
    else:
        sys.stdout.write(render_summary(report))
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "single": _cmd_single, "simulate": _cmd_simulate, "sweep": _cmd_sweep,
             "report": _cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParseError, MissingImage, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TTSPError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


cli = main


if __name__ == "__main__":
    sys.exit(main())
