"""
SCFD command-line entry point
  gen       write a synthetic Jsonl corpus
  train     learn a profile from a normal corpus
  classify  test executions against a profile
  eval      full detection / false-positive / PST / cost report
  compare   SCFD vs PST detection table only
  inspect   print a stored profile

Exit codes: 0 ok, 1 I/O or data error, 2 usage error, 3 malicious execution found.
"""

import argparse
import datetime
import json
import logging
import sys

from dotenv import dotenv_values
from pydantic import ValidationError

try:
    import clustering
    import config
    import detector
    import errors
    import eval_harness
    import synthgen
    import trace_model
except ImportError:
    # Fallback if running from root
    from scripts import clustering
    from scripts import config
    from scripts import detector
    from scripts import errors
    from scripts import eval_harness
    from scripts import synthgen
    from scripts import trace_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MALICIOUS = 3

_TRUE = {"1", "true", "yes", "on"}


def _non_negative_int(value):
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _int_list(value):
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'") from None


def _float_list(value):
    try:
        return [float(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{value}'") from None


def _rule_list(value):
    rules = [v.strip() for v in value.split(',') if v.strip()]
    for r in rules:
        if r not in detector.ABLATABLE_RULES:
            raise argparse.ArgumentTypeError(f"unknown rule '{r}' (choose from i, ii)")
    return rules


def _attack_pair(value):
    name, sep, path = value.partition('=')
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got '{value}'")
    return name, path


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value overlay file (explicit flags win)')
    common.add_argument('--threads', type=_positive_int, default=config.THREADS)
    common.add_argument('--log-level', default=config.LOG_LEVEL)
    common.add_argument('--deterministic', action='store_true',
                        help='zero timestamps and latencies for byte-identical output')

    trace_fmt = argparse.ArgumentParser(add_help=False)
    trace_fmt.add_argument('--format', dest='fmt', default=trace_model.TraceFormat.JSONL.value,
                           choices=[f.value for f in trace_model.TraceFormat])

    parser = argparse.ArgumentParser(prog='scfd', description='System-call frequency intrusion detection')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', parents=[common], help='Generate a synthetic corpus')
    gen.add_argument('--seed', type=_non_negative_int, default=config.SEED)
    gen.add_argument('--n', type=_non_negative_int, default=config.TRAIN_TRACES)
    gen.add_argument('--attack', default=synthgen.AttackKind.NONE.value,
                     choices=[a.value for a in synthgen.AttackKind])
    gen.add_argument('--flow', type=int, choices=[synthgen.FLOW_FTP, synthgen.FLOW_NO_FTP])
    gen.add_argument('--out', required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser('train', parents=[common, trace_fmt], help='Train a profile')
    train.add_argument('--in', dest='input', required=True)
    train.add_argument('--out-profile', required=True)
    train.add_argument('--max-k', type=_positive_int, default=config.MAX_K)
    train.add_argument('--bound-td', type=float, default=config.BOUND_TD)
    train.add_argument('--bound-td-per-point', type=float,
                       help='bound on total distance per training row (overrides --bound-td)')
    train.add_argument('--p0', type=float, default=config.P0)
    train.add_argument('--ridge', type=float, default=config.RIDGE)
    train.add_argument('--max-iters', type=_positive_int, default=config.MAX_ITERS)
    train.add_argument('--candidate-stride', type=_positive_int, default=config.CANDIDATE_STRIDE)
    train.add_argument('--app-id', default=config.APP_ID)
    train.set_defaults(func=cmd_train)

    classify = sub.add_parser('classify', parents=[common, trace_fmt], help='Classify executions')
    classify.add_argument('--profile', required=True)
    classify.add_argument('--in', dest='input', required=True)
    classify.add_argument('--explain', action='store_true')
    classify.add_argument('--disable-rules', type=_rule_list, default=[])
    classify.set_defaults(func=cmd_classify)

    for name, func, help_text in (('eval', cmd_eval, 'Run the full evaluation'),
                                  ('compare', cmd_compare, 'SCFD vs PST detection table')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--profile', required=True)
        p.add_argument('--train', help='normal corpus used to train the PST (default: regenerated)')
        p.add_argument('--attack', dest='attacks', type=_attack_pair, action='append', default=[],
                       metavar='NAME=PATH')
        p.add_argument('--pst-depths', type=_int_list, default=list(config.PST_DEPTHS))
        p.add_argument('--pst-threshold', type=float, default=config.PST_THRESHOLD)
        p.add_argument('--disable-rules', type=_rule_list, default=[])
        p.add_argument('--seed', type=_non_negative_int, default=config.SEED)
        p.add_argument('--trials', type=_non_negative_int, default=config.ATTACK_TRIALS)
        p.add_argument('--report', help='output prefix for <prefix>.json and <prefix>.txt')
        if name == 'eval':
            p.add_argument('--normal', help='fresh normal corpus (default: regenerated)')
            p.add_argument('--p0-list', type=_float_list, default=list(config.DEFAULT_P0_LIST))
            p.add_argument('--cost-trials', type=_non_negative_int, default=100)
        p.set_defaults(func=func)

    inspect = sub.add_parser('inspect', parents=[common], help='Print a stored profile')
    inspect.add_argument('--profile', required=True)
    inspect.add_argument('--export', action='store_true', help='lossy JSON export')
    inspect.set_defaults(func=cmd_inspect)
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _option_key(name):
    return name.strip().lstrip('-').replace('-', '_')


def _action_keys(action):
    return {_option_key(opt) for opt in action.option_strings} | {action.dest}


def apply_overlay(parser, path):
    """Merge a key=value file under the explicit flags of every subcommand."""
    if not path:
        return
    with open(path, encoding='utf-8') as f:
        values = dotenv_values(stream=f)
    subparsers = _subparsers(parser)
    for raw_key, value in values.items():
        key = _option_key(raw_key)
        matched = False
        for sp in subparsers.values():
            for action in sp._actions:
                if key in ('config', 'help') or key not in _action_keys(action):
                    continue
                matched = True
                if isinstance(action, argparse._StoreTrueAction):
                    default = str(value).lower() in _TRUE
                elif isinstance(action, argparse._AppendAction):
                    items = [v.strip() for v in str(value).split(',') if v.strip()]
                    default = [action.type(v) for v in items] if action.type else items
                else:
                    # argparse converts string defaults with the action's type
                    default = value
                sp.set_defaults(**{action.dest: default})
                # a value from the file satisfies a required flag
                action.required = False
        if not matched:
            parser.error(f"unknown key '{raw_key}' in config file {path}")


def _resolved(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != 'func'}


def _now(args):
    return None if args.deterministic else datetime.datetime.now(datetime.timezone.utc)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    spec = synthgen.WorkloadSpec(seed=args.seed)
    traces = synthgen.gen_corpus(spec, args.n, synthgen.AttackKind(args.attack), args.flow)
    trace_model.write_traces(traces, args.out)
    print("=" * 60)
    print(f"✅ COMPLETE: wrote {len(traces)} regions ({args.attack}) to {args.out}")
    print("=" * 60)
    return EXIT_OK


def cmd_train(args):
    traces = [t for t in trace_model.read_traces(args.input, args.fmt) if t.in_region]
    ts = trace_model.load_training_set(traces)
    bound = args.bound_td
    if args.bound_td_per_point is not None:
        bound = args.bound_td_per_point * len(ts)
    cfg = clustering.GkmConfig(max_k=args.max_k, bound_td=bound, ridge=args.ridge,
                               max_iters=args.max_iters, candidate_stride=args.candidate_stride)
    print(f"🚀 Training on {len(ts)} executions over {len(ts.alphabet)} syscall types...")
    profile = detector.train_profile(ts, cfg, args.p0, app_id=args.app_id,
                                     threads=args.threads, trained_at=_now(args))
    detector.save_profile(profile, args.out_profile)
    print("=" * 60)
    print(detector.format_cluster_summary(profile))
    print(f"θ={profile.cutoff.theta:.5f}")
    print("=" * 60)
    print(f"✅ COMPLETE: profile saved to {args.out_profile}")
    return EXIT_OK


def cmd_classify(args):
    profile = detector.load_profile(args.profile)
    traces = trace_model.read_traces(args.input, args.fmt)
    any_malicious = False
    for trace in traces:
        v = detector.classify(profile, trace, args.disable_rules)
        any_malicious = any_malicious or v.malicious
        if args.explain:
            print(detector.explain(v, profile))
            print(f"  source={trace.source_id}")
        else:
            print(detector.verdict_line(v))
    return EXIT_MALICIOUS if any_malicious else EXIT_OK


def _load_corpora(args):
    if args.attacks:
        return {name: trace_model.read_traces(path) for name, path in args.attacks}
    return eval_harness.standard_attack_corpora(args.seed, args.trials)


def _load_train(args):
    if args.train:
        return [t for t in trace_model.read_traces(args.train) if t.in_region]
    return synthgen.gen_corpus(synthgen.WorkloadSpec(seed=args.seed), config.TRAIN_TRACES)


def _emit_report(args, report):
    if args.deterministic:
        eval_harness.zero_latencies(report)
    else:
        report.generated_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
    table = eval_harness.render_table(report)
    print("=" * 60)
    print(table, end="")
    print("=" * 60)
    if args.report:
        with open(f"{args.report}.json", "w", encoding="utf-8") as f:
            f.write(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        with open(f"{args.report}.txt", "w", encoding="utf-8") as f:
            f.write(table)
        print(f"✅ COMPLETE: report written to {args.report}.json / {args.report}.txt")
    return EXIT_OK


def cmd_eval(args):
    profile = detector.load_profile(args.profile)
    corpora = _load_corpora(args)
    if args.normal:
        normal = [t for t in trace_model.read_traces(args.normal) if t.in_region]
    else:
        normal = synthgen.gen_corpus(synthgen.WorkloadSpec(seed=args.seed + 1), config.TRAIN_TRACES)
    log = []
    report = eval_harness.EvalReport(config=json.loads(json.dumps(_resolved(args), default=str)))
    print(f"🔍 Detection over {len(corpora)} attack corpora...")
    report.detection = eval_harness.run_detection_eval(profile, corpora, args.disable_rules, args.threads, log)
    print(f"🔍 False positives over {len(normal)} normal executions...")
    report.false_positive = eval_harness.run_false_positive_eval(profile, normal, args.p0_list, args.threads, log)
    if args.pst_depths:
        print(f"🌲 PST comparison at depths {args.pst_depths}...")
        report.pst_comparison = eval_harness.run_pst_comparison(
            _load_train(args), corpora, args.pst_depths, args.pst_threshold, args.threads, log)
    report.cost = eval_harness.run_cost_eval(profile, args.cost_trials)
    report.verdict_log = log
    return _emit_report(args, report)


def cmd_compare(args):
    profile = detector.load_profile(args.profile)
    corpora = _load_corpora(args)
    log = []
    report = eval_harness.EvalReport(config=json.loads(json.dumps(_resolved(args), default=str)))
    report.detection = eval_harness.run_detection_eval(profile, corpora, args.disable_rules, args.threads, log)
    if args.pst_depths:
        report.pst_comparison = eval_harness.run_pst_comparison(
            _load_train(args), corpora, args.pst_depths, args.pst_threshold, args.threads, log)
    report.verdict_log = log
    return _emit_report(args, report)


def cmd_inspect(args):
    profile = detector.load_profile(args.profile)
    if args.export:
        print(detector.export_profile_text(profile))
    else:
        print(detector.format_cluster_summary(profile))
        print(f"app_id={profile.meta.app_id} tool_version={profile.meta.tool_version} "
              f"trained_at={profile.meta.trained_at.isoformat() if profile.meta.trained_at else '-'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    try:
        apply_overlay(parser, known.config)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except OSError as e:
        print(f"❌ ERROR: cannot read config file: {e}", file=sys.stderr)
        return EXIT_ERROR

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    print(json.dumps(_resolved(args), default=str, sort_keys=True), file=sys.stderr)

    try:
        return args.func(args)
    except ValidationError as e:
        print(f"❌ ERROR: invalid option: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (errors.ScfdError, OSError) as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
