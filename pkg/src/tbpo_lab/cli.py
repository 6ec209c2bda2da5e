"""Command-line entry point: ``tbpo-lab <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure or
failed verification.
"""

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import replace

from threadpoolctl import threadpool_limits

from .errors import ConfigError, DomainError, NumericError, TbpoError
from .evaluation import evaluate
from .oracle import compute_values, exact_pair_batch
from .policy import TabularPolicy, policy_from_dict, reference_policy, save_policy
from .pref_data import PreferenceDataset, generate_dataset
from .token_mdp import MdpSpec, TableReward, TargetStringReward
from .trainer import TrainConfig, TrainState, make_head, make_policy, train
from .verify import run_verify

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "TBPO_LAB_SEED"


class UsageError(Exception):
    pass


def _seed(value):
    """Config seed unless ``TBPO_LAB_SEED`` overrides it."""
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return int(value)
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")


def _read_json(path, what):
    if not path or not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{what} is not valid JSON: {exc}")


def _load_env(path):
    return MdpSpec.from_dict(_read_json(path, "env file"))


def _parent(path):
    """Create the directory that will hold ``path``; returns ``path``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _write_json(path, obj):
    with open(_parent(path), "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_policy(spec, path):
    d = _read_json(path, "checkpoint")
    if "policy" in d:  # training checkpoint
        d = d["policy"]
    return policy_from_dict(spec, d)


# ---- commands ---------------------------------------------------------------

def cmd_make_env(args):
    seed = _seed(args.seed)
    if args.reward == "table":
        reward = TableReward(seed, args.reward_scale)
    else:
        if not args.target:
            raise UsageError("--reward target needs --target")
        reward = TargetStringReward(tuple(int(t) for t in args.target.split(",")), args.hit, args.miss)
    prompts = ((),  1.0)
    if args.prompts:
        prompts = tuple((tuple(int(t) for t in p.split(",") if t != ""), 1.0)
                        for p in args.prompts.split(";"))
    spec = MdpSpec(args.vocab, args.horizon, prompts, reward, seed, args.eos, args.ref_scale)
    with open(_parent(args.out), "w") as f:
        f.write(spec.to_json())
    print(f"{spec.space.n_states} states")
    return EXIT_OK


def cmd_make_policy(args):
    spec = _load_env(args.env)
    ref = reference_policy(spec)
    if args.kind == "ref":
        pol = ref
    else:
        pol = TabularPolicy.from_log_probs(spec, compute_values(spec, ref, args.beta).log_pi_star)
    save_policy(pol, _parent(args.out))
    return EXIT_OK


def cmd_make_data(args):
    spec = _load_env(args.env)
    ref = reference_policy(spec)
    behavior = _load_policy(spec, args.behavior) if args.behavior else None
    vt = compute_values(spec, ref, args.beta)
    ds = generate_dataset(spec, ref, vt, args.score, args.n, behavior=behavior, seed=_seed(args.seed))
    ds.save(_parent(args.out))
    print(f"{len(ds)} pairs -> {args.out}")
    return EXIT_OK


def _experiment(args):
    """Merge ``train.json`` with command-line overrides."""
    cfg = _read_json(args.config, "train config") if args.config else {}
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()

    def path(key, flag):
        v = flag if flag is not None else cfg.get(key)
        return None if v is None else (v if os.path.isabs(v) else os.path.join(base, v))

    train_d = dict(cfg.get("train", {k: v for k, v in cfg.items()
                                     if k not in ("env", "data", "out_dir", "exact", "resume")}))
    train_d["seed"] = _seed(train_d.get("seed", 0))
    return {
        "env": path("env", args.env),
        "data": path("data", args.data),
        "out_dir": path("out_dir", args.out) or os.getcwd(),
        "exact": bool(args.exact or cfg.get("exact", False)),
        "resume": path("resume", args.resume),
        "train": TrainConfig.from_dict(train_d),
    }


def cmd_train(args):
    exp = _experiment(args)
    spec = _load_env(exp["env"])
    cfg = exp["train"]
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    ref = reference_policy(spec)
    vt = compute_values(spec, ref, cfg.beta)
    if exp["exact"]:
        data = exact_pair_batch(spec, vt, cfg.variant)
    else:
        if not exp["data"] or not os.path.exists(exp["data"]):
            raise UsageError(f"data file not found: {exp['data']}")
        data = PreferenceDataset.load(exp["data"])
        if data.spec_hash != spec.digest:
            raise UsageError("dataset spec_hash does not match the environment")
    if exp["resume"]:
        state = TrainState.from_checkpoint(cfg, spec, _read_json(exp["resume"], "checkpoint"))
    else:
        state = TrainState(cfg, spec, make_policy(cfg, spec, ref), make_head(cfg, spec))
    os.makedirs(exp["out_dir"], exist_ok=True)
    if not exp["resume"] and cfg.checkpoint_every:
        # the initialisation, so lr 0 runs can be compared against it
        state.save(os.path.join(exp["out_dir"], "ckpt_epoch0.json"))
    _, _, report = train(cfg, data, spec, ref, vt, state=state, out_dir=exp["out_dir"])
    report.write_csv(os.path.join(exp["out_dir"], "train_log.csv"))
    state.save(os.path.join(exp["out_dir"], "ckpt_final.json"))
    if report.aborted:
        print(f"numeric abort at step {report.abort_step}: {report.abort_message}", file=sys.stderr)
        return EXIT_NUMERIC
    if report.rows:
        r = report.rows[-1]
        tv = "" if r["tv_to_oracle"] is None else f" tv={r['tv_to_oracle']:.6f}"
        print(f"epoch {r['epoch']} loss={r['loss']:.6f}{tv}")
    return EXIT_OK


def cmd_eval(args):
    spec = _load_env(args.env)
    pol = _load_policy(spec, args.ckpt)
    vt = compute_values(spec, reference_policy(spec), args.beta)
    if args.n_prompts < 10:
        raise UsageError("--n-prompts must be >= 10 for the length-controlled fit")
    rows = [] if args.csv else None
    rep = evaluate(pol, spec, vt, args.n_prompts, args.samples, _seed(args.seed), rows)
    with open(_parent(args.out), "w") as f:
        f.write(rep.to_json())
    if args.csv:
        with open(_parent(args.csv), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["index", "y", "len_a", "len_b"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    print(json.dumps({k: rep.to_dict()[k] for k in ("tv_mean", "win_rate", "lc_win_rate")}))
    return EXIT_OK


def cmd_verify(args):
    spec = _load_env(args.env) if args.env else None

    def log(c):
        if args.verbose:
            print(("PASS" if c["passed"] else "FAIL"), c["name"], f"{c['residual']:.3g}",
                  f"<= {c['tolerance']:g}")

    try:
        report = run_verify(spec, args.tol_override, args.quick, log=log)
    except ConfigError as exc:
        raise UsageError(str(exc))
    _write_json(args.out, report)
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    print(f"{report['n_checks'] - len(failed)}/{report['n_checks']} checks passed")
    for name in failed:
        print(f"FAIL {name}")
    return EXIT_OK if not failed else EXIT_NUMERIC


REPORT_FIELDS = ["name", "tv_mean", "tv_max", "win_rate", "lc_win_rate", "predictive_entropy",
                 "distinct1", "self_bleu", "n_prompts", "n_samples_per_prompt"]


def cmd_report(args):
    from . import plotting
    rows = []
    for path in args.evals:
        d = _read_json(path, "eval report")
        name = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        rows.append({"name": name, **{k: d[k] for k in REPORT_FIELDS[1:]}})
    os.makedirs(args.out_dir, exist_ok=True)
    out_csv = os.path.join(args.out_dir, "comparison.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    written = [out_csv]
    if rows:
        written.append(plotting.plot_eval_comparison(rows, os.path.join(args.out_dir, "comparison.png")))
    if args.train_logs:
        logs = {}
        for p in args.train_logs:
            logs[os.path.basename(os.path.dirname(os.path.abspath(p))) or p] = plotting.read_train_log(p)
        written.append(plotting.plot_training(logs, os.path.join(args.out_dir, "training.png")))
    for p in written:
        print(p)
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="tbpo-lab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("make-env", help="write an MDP definition")
    e.add_argument("--vocab", type=int, required=True)
    e.add_argument("--horizon", type=int, required=True)
    e.add_argument("--reward", choices=["table", "target"], default="table")
    e.add_argument("--reward-scale", type=float, default=1.0)
    e.add_argument("--target", help="comma-separated target tokens (target mode)")
    e.add_argument("--hit", type=float, default=1.0)
    e.add_argument("--miss", type=float, default=0.0)
    e.add_argument("--prompts", help="semicolon-separated prompts, tokens comma-separated")
    e.add_argument("--eos", action="store_true")
    e.add_argument("--ref-scale", type=float, default=0.5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="env.json")
    e.set_defaults(func=cmd_make_env)

    m = sub.add_parser("make-policy", help="write the reference or soft-optimal policy checkpoint")
    m.add_argument("--env", required=True)
    m.add_argument("--kind", choices=["ref", "oracle"], default="ref")
    m.add_argument("--beta", type=float, default=0.1)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_policy)

    d = sub.add_parser("make-data", help="sample a labelled preference dataset")
    d.add_argument("--env", required=True)
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--score", choices=["q", "a"], default="q")
    d.add_argument("--beta", type=float, default=0.1)
    d.add_argument("--behavior", help="policy checkpoint used for rollouts (default: reference)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="prefs.jsonl")
    d.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="optimise a policy on a dataset")
    t.add_argument("--config", help="train.json")
    t.add_argument("--env")
    t.add_argument("--data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--exact", action="store_true", help="full-batch exact pair expectation")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("--env", required=True)
    v.add_argument("--ckpt", required=True)
    v.add_argument("--beta", type=float, default=0.1)
    v.add_argument("--n-prompts", type=int, default=1000)
    v.add_argument("--samples", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="eval_report.json")
    v.add_argument("--csv", help="per-prompt match-up rows")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("verify", help="run the numerical check suite")
    c.add_argument("--env")
    c.add_argument("--tol-override", type=float, help="replace every tolerance")
    c.add_argument("--quick", action="store_true", help="skip the training runs")
    c.add_argument("--out", default="verify_report.json")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="compare eval reports; render figures")
    r.add_argument("evals", nargs="*")
    r.add_argument("--train-logs", nargs="*", default=[])
    r.add_argument("--out-dir", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        limit = threadpool_limits(args.threads) if args.threads else nullcontext()
        with limit:
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, TbpoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
