"""Tabular Q-learning over temporal resolutions, with a teacher-feature reward.

Each class owns an independent Q-table whose states and actions are both the
configured resolutions. An *environment* is any callable mapping
``(actions: {class: a}, trial: int) -> {class: reward}``; the default one runs
a short distillation probe and scores it with the teacher.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .distill import DistillConfig, DistillResult, SyntheticSet, distill, early_iters
from .numkit import ContractError, RngStream

UNIVERSAL = -1  # key of the single shared table used for the universal-resolution search


@dataclass(frozen=True)
class ActionSpace:
    resolutions: tuple = (1, 2, 4, 8)

    def __post_init__(self):
        res = tuple(int(a) for a in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if len(res) < 2:
            raise ContractError("action space needs at least two resolutions")
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ContractError(f"resolutions must be strictly increasing, got {res}")
        if res[0] < 1:
            raise ContractError("resolutions must be >= 1")

    def check_length(self, L: int) -> "ActionSpace":
        if self.resolutions[-1] > L:
            raise ContractError(f"resolution {self.resolutions[-1]} exceeds video length {L}")
        return self

    def __len__(self):
        return len(self.resolutions)

    def index(self, a: int) -> int:
        try:
            return self.resolutions.index(int(a))
        except ValueError:
            raise ContractError(f"resolution {a} not in action space {self.resolutions}") from None


@dataclass
class RlConfig:
    T: int = 20
    alpha: float = 0.1
    gamma: float = 0.5
    p: float = 0.8
    seed: int = 0

    def validate(self) -> "RlConfig":
        if not 0 < self.alpha <= 1:
            raise ContractError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ContractError("gamma must lie in [0, 1)")
        if not 0 <= self.p <= 1:
            raise ContractError("p must lie in [0, 1]")
        if self.T < 1:
            raise ContractError("T must be >= 1")
        return self


class QTable:
    """Independent ``|A| x |A|`` tables per key; the state is the last action.

    Tables start at zero and every state starts at the smallest resolution.
    """

    def __init__(self, actions: ActionSpace, keys):
        self.actions = actions
        n = len(actions)
        self.tables = {int(k): np.zeros((n, n)) for k in keys}
        self.states = {int(k): 0 for k in keys}

    @property
    def keys(self):
        return list(self.tables)

    def row(self, key: int) -> np.ndarray:
        return self.tables[key][self.states[key]]

    def state(self, key: int) -> int:
        return self.actions.resolutions[self.states[key]]

    def greedy(self, key: int) -> int:
        # np.argmax returns the first maximum, i.e. the lowest-index action.
        return self.actions.resolutions[int(np.argmax(self.row(key)))]

    def policy(self) -> dict:
        return {k: self.greedy(k) for k in self.tables}

    def copy(self) -> "QTable":
        out = QTable(self.actions, [])
        out.tables = {k: v.copy() for k, v in self.tables.items()}
        out.states = dict(self.states)
        return out

    def to_dict(self) -> dict:
        return {
            "resolutions": list(self.actions.resolutions),
            "tables": {str(k): v.tolist() for k, v in self.tables.items()},
            "states": {str(k): self.actions.resolutions[s] for k, s in self.states.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QTable":
        q = cls(ActionSpace(tuple(d["resolutions"])), [])
        q.tables = {int(k): np.asarray(v, dtype=float) for k, v in d["tables"].items()}
        q.states = {int(k): q.actions.index(a) for k, a in d["states"].items()}
        return q


def reward(teacher: enc.EncoderParams, syn_videos, real_videos) -> float:
    """``1 / (1 + ||mean teacher feature(syn) - mean teacher feature(real)||)``."""
    syn_videos = np.asarray(syn_videos)
    real_videos = np.asarray(real_videos)
    if len(syn_videos) == 0 or len(real_videos) == 0:
        raise ContractError("reward needs non-empty synthetic and real sides")
    if not teacher.is_finite():
        raise ContractError("teacher parameters are not finite")
    return reward_from_features(enc.features(teacher, syn_videos), enc.features(teacher, real_videos))


def reward_from_features(syn_feat, real_feat) -> float:
    dist = np.linalg.norm(np.mean(syn_feat, axis=0) - np.mean(real_feat, axis=0))
    return float(1.0 / (1.0 + dist))


def take_action(q: QTable, key: int, rng: RngStream, p: float) -> int:
    """Exploit with probability ``p``, otherwise pick a resolution uniformly."""
    g = rng.generator()
    if g.random() < p:
        return q.greedy(key)
    return q.actions.resolutions[int(g.integers(len(q.actions)))]


def q_update(q: QTable, key: int, action: int, r: float, alpha: float, gamma: float) -> QTable:
    """One temporal-difference update in place; the next state is ``action``."""
    s = q.states[key]
    i = q.actions.index(action)
    table = q.tables[key]
    target = r + gamma * table[i].max()
    table[s, i] += alpha * (target - table[s, i])
    q.states[key] = i
    return q


class DistillationEnvironment:
    """Scores a resolution per class by a short distillation probe.

    A probe starts from noise, runs the early-stage budget, expands the
    synthetic videos and compares teacher features against the reward split of
    the same class.

    ``noise="common"`` keys every probe to the same random streams, so the
    initial noise, encoders and real batches do not depend on the trial. The
    reward of ``(class, a)`` is then a fixed number and is computed once and
    memoised. ``noise="per_trial"`` draws fresh streams for every trial.
    ``dd_iterations`` always counts the algorithmic cost (``N_early`` per class
    per trial); ``executed_iterations`` counts what actually ran.
    """

    NOISE_MODES = ("common", "per_trial")

    def __init__(self, real, reward_set, teacher, dd: DistillConfig, rng: RngStream,
                 iterations: int | None = None, noise: str = "common"):
        if noise not in self.NOISE_MODES:
            raise ContractError(f"noise must be one of {self.NOISE_MODES}, got {noise!r}")
        self.real = real
        self.teacher = teacher
        self.dd = dd.validate()
        self.rng = rng
        self.noise = noise
        self.iterations = iterations or early_iters(dd)
        self.classes = [m for m in range(real.num_classes) if len(reward_set.of_class(m))]
        self.real_features = {m: enc.features(teacher, reward_set.of_class(m)) for m in self.classes}
        self.dd_iterations = 0
        self.executed_iterations = 0
        self._cache = {}

    def probe(self, actions: dict, trial: int) -> DistillResult:
        if self.noise == "per_trial":
            rng = RngStream(self.rng.seed, f"{self.rng.purpose}/trial{trial}")
        else:
            rng = RngStream(self.rng.seed, f"{self.rng.purpose}/probe")
        result = distill(self.real, actions, self.dd, rng, iters=self.iterations)
        self.executed_iterations += self.iterations * len(actions)
        return result

    def _score(self, syn: SyntheticSet, classes) -> dict:
        return {m: reward_from_features(enc.features(self.teacher, syn.expanded(m)), self.real_features[m])
                for m in classes}

    def reward_table(self, actions: "ActionSpace") -> dict:
        """``{class: {a: reward}}`` for every resolution (common-noise mode only)."""
        if self.noise != "common":
            raise ContractError("a fixed reward table exists only with common noise")
        for a in actions.resolutions:
            self._fill(a)
        return {m: {a: self._cache[(m, a)] for a in actions.resolutions} for m in self.classes}

    def _fill(self, a: int) -> None:
        if (self.classes[0], a) not in self._cache:
            syn = self.probe({m: a for m in self.classes}, trial=-1).synthetic
            for m, r in self._score(syn, self.classes).items():
                self._cache[(m, a)] = r

    def __call__(self, actions: dict, trial: int) -> dict:
        self.dd_iterations += self.iterations * len(actions)
        if self.noise == "per_trial":
            return self._score(self.probe(actions, trial).synthetic, actions)
        out = {}
        for m, a in actions.items():
            self._fill(int(a))
            out[m] = self._cache[(m, int(a))]
        return out


@dataclass
class TrialRecord:
    trial: int
    key: int
    action: int
    reward: float
    q_row: list

    def to_dict(self):
        return asdict(self)


@dataclass
class PolicyLearningResult:
    q: QTable
    log: list = field(default_factory=list)
    dd_iterations: int = 0

    def log_dicts(self) -> list:
        return [r.to_dict() for r in self.log]


def temporal_policy_learning(env, classes, rl: RlConfig, actions: ActionSpace | None = None,
                             universal: bool = False) -> PolicyLearningResult:
    """Run ``rl.T`` trials; each trial takes one action per class and learns from its reward.

    With ``universal=True`` a single table picks one resolution for every
    class and is rewarded with the mean of the per-class rewards.
    """
    rl.validate()
    actions = actions or ActionSpace()
    classes = [int(c) for c in classes]
    keys = [UNIVERSAL] if universal else classes
    q = QTable(actions, keys)
    result = PolicyLearningResult(q)
    spent_before = getattr(env, "dd_iterations", 0)
    for t in range(rl.T):
        chosen = {k: take_action(q, k, RngStream(rl.seed, "rl/action", k, t), rl.p) for k in keys}
        per_class = {m: chosen[UNIVERSAL] for m in classes} if universal else chosen
        rewards = env(per_class, t)
        if universal:
            rewards = {UNIVERSAL: float(np.mean([rewards[m] for m in classes]))}
        for k in keys:
            q_update(q, k, chosen[k], rewards[k], rl.alpha, rl.gamma)
            result.log.append(TrialRecord(t, k, chosen[k], float(rewards[k]), q.row(k).tolist()))
    result.dd_iterations = getattr(env, "dd_iterations", 0) - spent_before
    return result


def resolve_policy(q: QTable, classes) -> dict:
    """Greedy resolution per class (a universal table applies to every class)."""
    if UNIVERSAL in q.tables:
        a = q.greedy(UNIVERSAL)
        return {int(m): a for m in classes}
    return {int(m): q.greedy(int(m)) for m in classes}


def synthesize(real, q: QTable, dd: DistillConfig, rng: RngStream):
    """Distill for the full budget at the greedy resolutions; returns ``(result, policy)``."""
    policy = resolve_policy(q, range(real.num_classes))
    result = distill(real, policy, dd, rng.fork(purpose="synthesize"))
    return result, policy


def save_policy(policy: dict, path, log=None, q: QTable | None = None) -> None:
    payload = {"policy": {str(k): int(v) for k, v in sorted(policy.items())}}
    if q is not None:
        payload["q_table"] = q.to_dict()
    if log is not None:
        payload["trials"] = log
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_policy(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    return {int(k): int(v) for k, v in payload["policy"].items()}
