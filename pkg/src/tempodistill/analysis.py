"""Experiment harness: Δ split, baselines, ablations, search cost and reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import LabeledVideoSet, staticize
from .distill import DistillConfig, SyntheticSet, distill, early_iters
from .numkit import ContractError, RngStream
from .policy import (ActionSpace, DistillationEnvironment, PolicyLearningResult, RlConfig,
                     resolve_policy, temporal_policy_learning)

REPORT_SCHEMA = "tempodistill.report/1"
CSV_SCHEMA = 1


def version_string() -> str:
    from . import __version__

    return f"v{__version__}"


# ---------------------------------------------------------------------------
# Δ metric


@dataclass
class DeltaReport:
    delta: dict
    acc_full: dict
    acc_static: dict
    ranking: list
    top_k: list

    def groups(self, n_groups: int) -> list[list[int]]:
        return quantile_groups(self.delta, n_groups)

    def to_dict(self) -> dict:
        return {
            "delta": {str(k): v for k, v in self.delta.items()},
            "acc_full": {str(k): v for k, v in self.acc_full.items()},
            "acc_static": {str(k): v for k, v in self.acc_static.items()},
            "ranking": list(self.ranking),
            "top_k": list(self.top_k),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeltaReport":
        ints = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        return cls(ints(d["delta"]), ints(d["acc_full"]), ints(d["acc_static"]),
                   [int(c) for c in d["ranking"]], [int(c) for c in d["top_k"]])


def delta_from_accuracies(acc_full: dict, acc_static: dict, k: int) -> DeltaReport:
    """Δ per class and a descending ranking; classes absent from the test set are skipped."""
    classes = [c for c in sorted(acc_full) if acc_full[c] is not None and acc_static.get(c) is not None]
    if not 1 <= k <= len(classes):
        raise ContractError(f"k={k} must lie in [1, {len(classes)}]")
    delta = {c: float(acc_full[c] - acc_static[c]) for c in classes}
    # Stable sort on -Δ keeps ties in class-id order.
    ranking = sorted(classes, key=lambda c: -delta[c])
    return DeltaReport(delta, dict(acc_full), dict(acc_static), ranking, ranking[:k])


def train_student(videos, labels, num_classes: int, config: enc.TrainConfig) -> enc.EncoderParams:
    return enc.train_classifier(videos, labels, num_classes, config, purpose="student").params


def delta_between(set_a: LabeledVideoSet, set_b: LabeledVideoSet, test: LabeledVideoSet,
                  config: enc.TrainConfig, k: int) -> DeltaReport:
    """Δ = accuracy after training on ``set_a`` minus accuracy after training on ``set_b``.

    Both models share initialization and batch order, so swapping the sets
    flips the sign of every Δ exactly.
    """
    M = test.num_classes
    acc = []
    for s in (set_a, set_b):
        params = train_student(s.videos, s.labels, M, config)
        acc.append(enc.evaluate(params, test)["per_class"])
    return delta_from_accuracies(acc[0], acc[1], k)


def delta_split(train: LabeledVideoSet, test: LabeledVideoSet, config: enc.TrainConfig, k: int,
                rng: RngStream) -> DeltaReport:
    """Full-video model against a model trained on the single-frame static version."""
    return delta_between(train, staticize(train, rng), test, config, k)


def quantile_groups(delta: dict, n_groups: int) -> list[list[int]]:
    """Bucket classes into ``n_groups`` rank quantiles of Δ, lowest Δ first."""
    if n_groups < 1:
        raise ContractError("n_groups must be >= 1")
    order = sorted(delta, key=lambda c: (delta[c], c))
    n_groups = min(n_groups, len(order))
    return [[int(c) for c in chunk] for chunk in np.array_split(np.array(order, dtype=int), n_groups)]


# ---------------------------------------------------------------------------
# run reports


@dataclass
class RunReport:
    method: str
    seed: int
    per_class: dict
    counts: dict
    mean: float
    groups: list = field(default_factory=list)
    group_accuracy: list = field(default_factory=list)
    dd_iterations: int = 0
    policy: dict | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": int(self.seed),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "counts": {str(k): int(v) for k, v in self.counts.items()},
            "mean": self.mean,
            "groups": [list(map(int, g)) for g in self.groups],
            "group_accuracy": list(self.group_accuracy),
            "dd_iterations": int(self.dd_iterations),
            "policy": None if self.policy is None else {str(k): int(v) for k, v in self.policy.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        policy = d.get("policy")
        return cls(d["method"], int(d["seed"]), {int(k): v for k, v in d["per_class"].items()},
                   {int(k): int(v) for k, v in d["counts"].items()}, d["mean"],
                   [list(g) for g in d["groups"]], list(d["group_accuracy"]), int(d["dd_iterations"]),
                   None if policy is None else {int(k): int(v) for k, v in policy.items()})


def weighted_accuracy(per_class: dict, counts: dict, classes=None) -> float | None:
    classes = list(per_class) if classes is None else classes
    pairs = [(per_class[c], counts.get(c, 0)) for c in classes if per_class.get(c) is not None]
    total = sum(n for _, n in pairs)
    if total == 0:
        return None
    return float(sum(a * n for a, n in pairs) / total)


def make_run_report(method: str, evaluation: dict, test_labels, groups=(), seed: int = 0,
                    dd_iterations: int = 0, policy=None) -> RunReport:
    labels = np.asarray(test_labels)
    per_class = dict(evaluation["per_class"])
    counts = {c: int(np.sum(labels == c)) for c in per_class}
    groups = [list(map(int, g)) for g in groups]
    return RunReport(method, int(seed), per_class, counts, weighted_accuracy(per_class, counts),
                     groups, [weighted_accuracy(per_class, counts, g) for g in groups],
                     int(dd_iterations), None if policy is None else dict(policy))


def student_report(method: str, videos, labels, test: LabeledVideoSet, config: enc.TrainConfig,
                   eval_map=None, groups=(), seed: int = 0, dd_iterations: int = 0,
                   policy=None) -> RunReport:
    """Train a student on ``(videos, labels)`` and evaluate it on ``test``."""
    params = train_student(videos, labels, test.num_classes, config)
    evaluation = enc.evaluate(params, test, eval_map)
    return make_run_report(method, evaluation, test.labels, groups, seed, dd_iterations, policy)


# ---------------------------------------------------------------------------
# baselines (selections of real videos)


def _select_ids(real: LabeledVideoSet, ipc: int, rng: RngStream) -> dict:
    out = {}
    for m in range(real.num_classes):
        pool = np.flatnonzero(real.labels == m)
        if ipc > len(pool):
            raise ContractError(f"ipc={ipc} exceeds the {len(pool)} videos of class {m}")
        g = rng.fork(purpose=f"{rng.purpose}/select", class_id=m).generator()
        out[m] = np.sort(g.choice(pool, ipc, replace=False))
    return out


def _selection(real: LabeledVideoSet, ids: dict, tag: str) -> LabeledVideoSet:
    idx = np.concatenate([ids[m] for m in sorted(ids)])
    sel = real.subset(idx)
    sel.meta = {**real.meta, "baseline": tag,
                "selected": {str(m): [int(i) for i in v] for m, v in ids.items()}}
    return sel


def baseline_random(real: LabeledVideoSet, ipc: int, rng: RngStream) -> LabeledVideoSet:
    """``ipc`` distinct real videos per class at full temporal resolution."""
    return _selection(real, _select_ids(real, ipc, rng), "random")


def baseline_keyframe(real: LabeledVideoSet, ipc: int, rng: RngStream) -> LabeledVideoSet:
    """The random selection with each video reduced to one repeated frame."""
    sel = _selection(real, _select_ids(real, ipc, rng), "keyframe")
    out = staticize(sel, rng.fork(purpose=f"{rng.purpose}/keyframe"))
    out.meta = sel.meta
    return out


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationResult:
    reports: dict
    policies: dict
    synthetic: dict
    learning: dict
    env: DistillationEnvironment | None = None

    def report_list(self) -> list[RunReport]:
        return [self.reports[k] for k in ("A", "B", "full")]


def synthesize_policy(real, policy: dict, dd: DistillConfig, rng: RngStream):
    """Full-budget distillation at a fixed resolution map."""
    return distill(real, policy, dd, rng.fork(purpose="synthesize"))


CASES = ("A", "B", "full")


def plan_case(case: str, env: DistillationEnvironment, rl: RlConfig, actions: ActionSpace, L: int,
              classes) -> tuple[dict, PolicyLearningResult | None]:
    """Resolution map for one arm plus its learning record (``None`` for Case A)."""
    classes = [int(m) for m in classes]
    if case == "A":
        return {m: L for m in classes}, None
    if case not in CASES:
        raise ContractError(f"unknown case {case!r}; expected one of {CASES}")
    learning = temporal_policy_learning(env, classes, rl, actions, universal=(case == "B"))
    return resolve_policy(learning.q, classes), learning


def ablation_cases(real: LabeledVideoSet, reward_set: LabeledVideoSet, test: LabeledVideoSet,
                   teacher: enc.EncoderParams, dd: DistillConfig, rl: RlConfig,
                   student: enc.TrainConfig, actions: ActionSpace | None = None, groups=(),
                   seed: int = 0, probe_noise: str = "common", cases=CASES) -> AblationResult:
    """Case A (a = L, no search), Case B (one universal resolution) and per-class search.

    Every arm spends the same final budget ``N`` per class; the search cost of
    B and the full method is reported on top in ``dd_iterations``.
    """
    L = real.videos.shape[1]
    actions = (actions or ActionSpace()).check_length(L)
    M = real.num_classes
    env = DistillationEnvironment(real, reward_set, teacher, dd, RngStream(seed, "rl/env"), noise=probe_noise)
    policies, learning, search_cost = {}, {}, {}
    for case in cases:
        policies[case], learned = plan_case(case, env, rl, actions, L, range(M))
        if learned is not None:
            learning[case] = learned
        search_cost[case] = 0 if learned is None else learned.dd_iterations

    synth_rng = RngStream(seed, "ablation")
    cache, synthetic, reports = {}, {}, {}
    for case, policy in policies.items():
        key = tuple(sorted(policy.items()))
        if key not in cache:
            cache[key] = synthesize_policy(real, policy, dd, synth_rng).synthetic
        syn = synthetic[case] = cache[key]
        videos, labels = syn.to_training_set()
        reports[case] = student_report(case, videos, labels, test, student, policy, groups, seed,
                                       search_cost[case] + M * dd.N, policy)
    return AblationResult(reports, policies, synthetic, learning, env)


def baseline_reports(real: LabeledVideoSet, test: LabeledVideoSet, student: enc.TrainConfig,
                     ipc: int = 1, groups=(), seed: int = 0) -> dict:
    rng = RngStream(seed, "baseline")
    out = {}
    for name, fn in (("random", baseline_random), ("keyframe", baseline_keyframe)):
        sel = fn(real, ipc, rng)
        out[name] = student_report(name, sel.videos, sel.labels, test, student, None, groups, seed, 0)
    return out


# ---------------------------------------------------------------------------
# search cost


@dataclass
class CostTable:
    grid: int
    naive_rl: int
    early_rl: int
    n_early: int
    accuracy: dict = field(default_factory=dict)

    @property
    def grid_over_early(self) -> Fraction:
        return Fraction(self.grid, self.early_rl)

    @property
    def naive_over_early(self) -> Fraction:
        return Fraction(self.naive_rl, self.early_rl)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid, "naive_rl": self.naive_rl, "early_rl": self.early_rl,
            "n_early": self.n_early,
            "grid_over_early": float(self.grid_over_early),
            "naive_over_early": float(self.naive_over_early),
            "grid_over_early_exact": str(self.grid_over_early),
            "naive_over_early_exact": str(self.naive_over_early),
            "accuracy": dict(self.accuracy),
        }


def cost_model(dd: DistillConfig, rl: RlConfig, actions: ActionSpace, num_classes: int) -> CostTable:
    """DD iterations (summed over classes) for grid search, naive RL and early-stage RL."""
    N, T, M = dd.N, rl.T, num_classes
    n_early = early_iters(dd)
    return CostTable(grid=len(actions) * M * N, naive_rl=T * M * N,
                     early_rl=T * M * n_early + M * N, n_early=n_early)


def search_cost_comparison(dd: DistillConfig, rl: RlConfig, actions: ActionSpace, num_classes: int,
                           context: dict | None = None) -> CostTable:
    """Closed-form costs; with ``context`` also the student accuracy each search reaches.

    ``context`` holds ``real``, ``reward_set``, ``test``, ``teacher``,
    ``student`` and ``seed``. Grid search scores every resolution after the
    full budget and keeps the best per class; naive RL is Q-learning whose
    probes run the full budget.
    """
    table = cost_model(dd, rl, actions, num_classes)
    if context is None:
        return table
    real, reward_set, test = context["real"], context["reward_set"], context["test"]
    teacher, student, seed = context["teacher"], context["student"], int(context.get("seed", 0))
    classes = list(range(num_classes))
    rng = RngStream(seed, "costs")

    full_env = DistillationEnvironment(real, reward_set, teacher, dd, rng.fork(purpose="costs/full"),
                                       iterations=dd.N)
    grid_table = full_env.reward_table(actions)
    policies = {
        "grid": {m: max(actions.resolutions, key=lambda a: (grid_table[m][a], -a)) for m in classes},
        "naive_rl": resolve_policy(temporal_policy_learning(full_env, classes, rl, actions).q, classes),
    }
    early_env = DistillationEnvironment(real, reward_set, teacher, dd, RngStream(seed, "rl/env"))
    policies["early_rl"] = resolve_policy(temporal_policy_learning(early_env, classes, rl, actions).q, classes)
    cache = {}
    for name, policy in policies.items():
        key = tuple(sorted(policy.items()))
        if key not in cache:
            syn = synthesize_policy(real, policy, dd, rng).synthetic
            videos, labels = syn.to_training_set()
            cache[key] = student_report(name, videos, labels, test, student, policy, (), seed).mean
        table.accuracy[name] = cache[key]
    return table


# ---------------------------------------------------------------------------
# output


def feature_dump(teacher: enc.EncoderParams, real: LabeledVideoSet, syn: SyntheticSet) -> list[dict]:
    """Per-class mean teacher features of the real and the synthetic set."""
    out = []
    for m in range(real.num_classes):
        out.append({"class": m, "side": "real",
                    "vec": enc.features(teacher, real.of_class(m)).mean(axis=0).tolist()})
    for m in syn.classes:
        out.append({"class": m, "side": "syn",
                    "vec": enc.features(teacher, syn.expanded(m)).mean(axis=0).tolist()})
    return out


def emit_report(reports: list[RunReport], path, config: dict | None = None,
                features: list | None = None, extra: dict | None = None) -> dict:
    """Write ``report.csv``, ``report.json`` and (if given) ``features.json`` under ``path``."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {path}: {exc}") from exc
    if not reports:
        raise ContractError("no reports to emit")
    classes = sorted({c for r in reports for c in r.per_class})
    written = {}

    csv_path = path / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + [f"{r.method}@{r.seed}" for r in reports])
        for c in classes:
            w.writerow([c] + ["" if r.per_class.get(c) is None else f"{r.per_class[c]:.6f}" for r in reports])
    written["csv"] = csv_path

    payload = {
        "schema": REPORT_SCHEMA,
        "csv_schema": CSV_SCHEMA,
        "version": version_string(),
        "seeds": sorted({int(r.seed) for r in reports}),
        "config": config,
        "reports": [r.to_dict() for r in reports],
        "extra": extra or {},
    }
    json_path = path / "report.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written["json"] = json_path

    if features is not None:
        feat_path = path / "features.json"
        feat_path.write_text(json.dumps(features, indent=1) + "\n")
        written["features"] = feat_path
    return written


def load_report(path) -> dict:
    """Reload ``report.json``; ``reports`` come back as :class:`RunReport` objects."""
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != REPORT_SCHEMA:
        raise ContractError(f"{path}: unsupported report schema {payload.get('schema')!r}")
    payload["reports"] = [RunReport.from_dict(r) for r in payload["reports"]]
    return payload


__all__ = [
    "AblationResult", "CASES", "CostTable", "DeltaReport", "PolicyLearningResult", "RunReport", "ablation_cases",
    "baseline_keyframe", "baseline_random", "baseline_reports", "cost_model", "delta_between",
    "delta_from_accuracies", "delta_split", "emit_report", "feature_dump", "load_report",
    "make_run_report", "plan_case", "quantile_groups", "search_cost_comparison", "student_report", "synthesize_policy",
    "train_student", "version_string", "weighted_accuracy",
]
