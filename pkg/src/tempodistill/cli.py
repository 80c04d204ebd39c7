"""Command-line pipeline: one subcommand per stage, all artifacts under ``--out``.

Layout of the output directory::

    corpus/   train.dvdc test.dvdc reward.dvdc manifest.json
    teacher/  teacher.dvdp metrics.json
    delta/    delta.json
    distill/<case>/  synthetic.dvds synthetic.json policy.json distill.json
    eval/<case>/     eval.json
    ablate/   report.csv report.json features.json
    costs/    costs.json
    report/   report.csv report.json features.json

Every stage directory also receives ``config.json``, the effective config.
Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
prerequisite, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis
from . import corpus as corp
from . import distill as dst
from . import encoder as enc
from .config import ConfigError, RunConfig, load_config
from .numkit import ContractError, DivergenceError, RngStream
from .policy import DistillationEnvironment, load_policy, save_policy

log = logging.getLogger("tempodistill")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class MissingPrerequisite(Exception):
    """A stage input produced by an earlier command is absent or unreadable."""


# ---------------------------------------------------------------------------
# helpers


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out) / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json())
    return d


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


def _load_corpus(cfg: RunConfig):
    d = Path(cfg.out) / "corpus"
    for name in ("manifest.json", "train.dvdc", "test.dvdc", "reward.dvdc"):
        _require(d / name, "corpus (run gen-corpus first)")
    try:
        _, train, test, reward = corp.load_corpus(d)
    except corp.CorpusFormatError as exc:
        raise MissingPrerequisite(f"unreadable corpus: {exc}") from exc
    return train, test, reward


def _load_teacher(cfg: RunConfig) -> enc.EncoderParams:
    path = _require(Path(cfg.out) / "teacher" / "teacher.dvdp", "teacher checkpoint (run train-teacher first)")
    try:
        return enc.load_params(path)
    except corp.CorpusFormatError as exc:
        raise MissingPrerequisite(f"unreadable teacher: {exc}") from exc


def _delta_groups(cfg: RunConfig):
    path = Path(cfg.out) / "delta" / "delta.json"
    if not path.exists():
        return []
    report = analysis.DeltaReport.from_dict(json.loads(path.read_text()))
    return report.groups(cfg.analysis.n_groups)


def _case(args) -> str:
    case = args.case or "full"
    if case not in analysis.CASES:
        raise ConfigError(f"--case must be one of {analysis.CASES}, got {case!r}")
    return case


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg: RunConfig, args) -> None:
    sets = corp.generate(cfg.corpus)
    d = _stage_dir(cfg, "corpus")
    corp.save_corpus(d, cfg.corpus, sets)
    for s in sets:
        _say(f"{s.split}: {len(s)} videos, shape {s.shape}, classes {s.num_classes}")


def cmd_train_teacher(cfg: RunConfig, args) -> None:
    train, test, _ = _load_corpus(cfg)
    result = enc.train_teacher(train, cfg.teacher)
    d = _stage_dir(cfg, "teacher")
    enc.save_params(result.params, d / "teacher.dvdp")
    metrics = {
        "train": enc.evaluate(result.params, train),
        "test": enc.evaluate(result.params, test),
        "final_loss": result.loss_trace[-1],
    }
    _write_json(d / "metrics.json", metrics)
    _say(f"teacher: train acc {metrics['train']['overall']:.3f}, test acc {metrics['test']['overall']:.3f}")


def cmd_delta_split(cfg: RunConfig, args) -> None:
    train, test, _ = _load_corpus(cfg)
    report = analysis.delta_split(train, test, cfg.teacher, cfg.analysis.delta_k, RngStream(cfg.seed, "delta"))
    d = _stage_dir(cfg, "delta")
    payload = report.to_dict()
    payload["groups"] = report.groups(cfg.analysis.n_groups)
    _write_json(d / "delta.json", payload)
    _say("delta: " + ", ".join(f"{c}:{report.delta[c]:+.3f}" for c in report.ranking))
    _say(f"top-{cfg.analysis.delta_k}: {report.top_k}")


def cmd_distill(cfg: RunConfig, args) -> None:
    case = _case(args)
    train, _, reward = _load_corpus(cfg)
    teacher = _load_teacher(cfg)
    actions = cfg.analysis.action_space().check_length(train.videos.shape[1])
    env = DistillationEnvironment(train, reward, teacher, cfg.distill, RngStream(cfg.seed, "rl/env"),
                                  noise=cfg.analysis.probe_noise)
    M = train.num_classes
    policy, learning = analysis.plan_case(case, env, cfg.rl, actions, train.videos.shape[1], range(M))
    result = analysis.synthesize_policy(train, policy, cfg.distill, RngStream(cfg.seed, "ablation"))
    d = _stage_dir(cfg, f"distill/{case}")
    search = 0 if learning is None else learning.dd_iterations
    dst.save_synthetic(result.synthetic, d / "synthetic.dvds", {"case": case, "seed": cfg.seed})
    save_policy(policy, d / "policy.json",
                log=None if learning is None else learning.log_dicts(),
                q=None if learning is None else learning.q)
    _write_json(d / "distill.json", {
        "case": case,
        "policy": {str(k): v for k, v in policy.items()},
        "loss_trace": result.loss_trace,
        "dd_iterations": search + M * cfg.distill.N,
        "search_dd_iterations": search,
        "executed_probe_iterations": env.executed_iterations,
    })
    _say(f"distill[{case}]: policy {[policy[m] for m in range(M)]}, "
         f"stored frames {result.synthetic.stored_frames()}, final loss {result.loss_trace[-1]:.6g}")


def cmd_eval(cfg: RunConfig, args) -> None:
    case = _case(args)
    _, test, _ = _load_corpus(cfg)
    d_in = Path(cfg.out) / "distill" / case
    syn_path = _require(d_in / "synthetic.dvds", f"synthetic set for case {case} (run distill --case {case})")
    try:
        syn = dst.load_synthetic(syn_path)
    except corp.CorpusFormatError as exc:
        raise MissingPrerequisite(f"unreadable synthetic set: {exc}") from exc
    policy_path = Path(args.policy) if args.policy else d_in / "policy.json"
    _require(policy_path, "policy file")
    try:
        policy = load_policy(policy_path)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"{policy_path}: not a policy file ({exc})") from exc
    info = json.loads((d_in / "distill.json").read_text()) if (d_in / "distill.json").exists() else {}
    videos, labels = syn.to_training_set()
    report = analysis.student_report(case, videos, labels, test, cfg.student, policy, _delta_groups(cfg),
                                     cfg.seed, info.get("dd_iterations", 0), policy)
    d = _stage_dir(cfg, f"eval/{case}")
    _write_json(d / "eval.json", report.to_dict())
    _say(f"eval[{case}]: mean acc {report.mean:.3f}, groups {report.group_accuracy}")


def cmd_ablate(cfg: RunConfig, args) -> None:
    train, test, reward = _load_corpus(cfg)
    teacher = _load_teacher(cfg)
    groups = _delta_groups(cfg)
    res = analysis.ablation_cases(train, reward, test, teacher, cfg.distill, cfg.rl, cfg.student,
                                  cfg.analysis.action_space(), groups, cfg.seed, cfg.analysis.probe_noise)
    base = analysis.baseline_reports(train, test, cfg.student, cfg.analysis.baseline_ipc, groups, cfg.seed)
    reports = res.report_list() + [base["random"], base["keyframe"]]
    d = _stage_dir(cfg, "ablate")
    analysis.emit_report(reports, d, cfg.to_dict(),
                         analysis.feature_dump(teacher, train, res.synthetic["full"]),
                         {"policies": {k: {str(m): a for m, a in v.items()} for k, v in res.policies.items()}})
    for r in reports:
        _say(f"ablate[{r.method}]: mean acc {r.mean:.3f}, dd iterations {r.dd_iterations}")


def cmd_costs(cfg: RunConfig, args) -> None:
    M = len(cfg.corpus.classes)
    context = None
    if cfg.analysis.cost_accuracy:
        train, test, reward = _load_corpus(cfg)
        context = {"real": train, "reward_set": reward, "test": test, "teacher": _load_teacher(cfg),
                   "student": cfg.student, "seed": cfg.seed}
    table = analysis.search_cost_comparison(cfg.distill, cfg.rl, cfg.analysis.action_space(), M, context)
    d = _stage_dir(cfg, "costs")
    _write_json(d / "costs.json", table.to_dict())
    _say(f"costs: grid {table.grid}, naive RL {table.naive_rl}, early RL {table.early_rl} "
         f"(grid/early {float(table.grid_over_early):.3g}, naive/early {float(table.naive_over_early):.3g})")


def cmd_report(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    reports = []
    for case in analysis.CASES:
        path = out / "eval" / case / "eval.json"
        if path.exists():
            r = analysis.RunReport.from_dict(json.loads(path.read_text()))
            r.method = f"eval-{r.method}"
            reports.append(r)
    ablate = out / "ablate" / "report.json"
    if ablate.exists():
        reports.extend(analysis.load_report(ablate)["reports"])
    if not reports:
        raise MissingPrerequisite(f"no evaluation results under {out} (run eval or ablate first)")
    extra = {}
    for name, path in (("delta", out / "delta" / "delta.json"), ("costs", out / "costs" / "costs.json")):
        if path.exists():
            extra[name] = json.loads(path.read_text())
    features = None
    full = out / "distill" / "full" / "synthetic.dvds"
    if full.exists() and (out / "teacher" / "teacher.dvdp").exists():
        train, _, _ = _load_corpus(cfg)
        features = analysis.feature_dump(_load_teacher(cfg), train, dst.load_synthetic(full))
    d = _stage_dir(cfg, "report")
    written = analysis.emit_report(reports, d, cfg.to_dict(), features, extra)
    _say(f"report: {len(reports)} runs -> {written['json']}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "delta-split": cmd_delta_split,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "costs": cmd_costs,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--out", help="output directory shared by all stages")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--case", choices=analysis.CASES, help="ablation arm for distill/eval")
    common.add_argument("--policy", help="policy JSON used for evaluation-time partitioning")
    common.add_argument("--ipc", type=int, help="synthetic instances per class")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tempodistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args, environ=None) -> RunConfig:
    cfg = load_config(args.config, environ)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    if args.ipc is not None:
        cfg.distill.ipc = args.ipc
        cfg.analysis.baseline_ipc = args.ipc
    return cfg.resolved().validate()


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
