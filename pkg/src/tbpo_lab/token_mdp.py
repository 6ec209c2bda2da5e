"""Enumerable synthetic token-generation MDPs.

A state is a prompt together with the response prefix generated so far; an
action is the next token.  With ``gamma = 1`` and a fixed horizon ``H`` every
prompt roots a prefix tree of ``sum_{t<H} V^t`` states.
"""

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError, DomainError

MAX_VOCAB = 16
MAX_HORIZON = 8
MAX_STATES = 2_000_000


class StateId(NamedTuple):
    prompt_index: int
    prefix: tuple


class Trajectory(NamedTuple):
    prompt_index: int
    tokens: tuple


@dataclass(frozen=True)
class TableReward:
    """Rewards ``scale * N(0, 1)`` drawn once per ``(state, action)``."""

    seed: int = 0
    scale: float = 1.0

    def to_dict(self):
        return {"mode": "table", "seed": self.seed, "scale": self.scale}


@dataclass(frozen=True)
class TargetStringReward:
    """``hit`` when the token equals ``target[len(prefix)]``, else ``miss``."""

    target: tuple
    hit: float = 1.0
    miss: float = 0.0

    def to_dict(self):
        return {"mode": "target", "target": list(self.target), "hit": self.hit, "miss": self.miss}


@dataclass(frozen=True)
class MdpSpec:
    vocab_size: int
    horizon: int
    prompts: tuple = ((), 1.0)
    reward: object = field(default_factory=TableReward)
    seed: int = 0
    eos: bool = False
    ref_scale: float = 0.5

    def __post_init__(self):
        prompts = self.prompts
        # accept a bare single prompt ((tokens), weight)
        if len(prompts) == 2 and not isinstance(prompts[1], (tuple, list)):
            prompts = (prompts,)
        prompts = tuple((tuple(int(t) for t in toks), float(w)) for toks, w in prompts)
        object.__setattr__(self, "prompts", prompts)
        if isinstance(self.reward, TargetStringReward):
            object.__setattr__(self, "reward", TargetStringReward(
                tuple(int(t) for t in self.reward.target), float(self.reward.hit), float(self.reward.miss)))
        self.validate()

    def validate(self):
        V, H = self.vocab_size, self.horizon
        if not (2 <= V <= MAX_VOCAB):
            raise ConfigError(f"vocab_size must lie in [2, {MAX_VOCAB}] for enumeration, got {V}")
        if not (1 <= H <= MAX_HORIZON):
            raise ConfigError(f"horizon must lie in [1, {MAX_HORIZON}] for enumeration, got {H}")
        if not self.prompts:
            raise ConfigError("at least one prompt is required")
        per_prompt = sum(V ** t for t in range(H))
        if per_prompt * len(self.prompts) > MAX_STATES:
            raise ConfigError("state space exceeds the enumerability bound")
        for toks, w in self.prompts:
            if not (np.isfinite(w) and w > 0):
                raise ConfigError(f"prompt weights must be positive and finite, got {w}")
            if any(t < 0 or t >= V for t in toks):
                raise ConfigError(f"prompt tokens must lie in [0, {V})")
        r = self.reward
        if isinstance(r, TargetStringReward):
            if len(r.target) < H:
                raise ConfigError("target string must cover the horizon")
            if any(t < 0 or t >= V for t in r.target):
                raise ConfigError(f"target tokens must lie in [0, {V})")
            if not (np.isfinite(r.hit) and np.isfinite(r.miss)):
                raise ConfigError("rewards must be finite")
        elif isinstance(r, TableReward):
            if not np.isfinite(r.scale):
                raise ConfigError("reward scale must be finite")
        else:
            raise ConfigError(f"unknown reward mode {r!r}")
        if not self.ref_scale >= 0:
            raise ConfigError("ref_scale must be non-negative")

    @property
    def eos_token(self):
        return self.vocab_size - 1 if self.eos else None

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "horizon": self.horizon,
            "prompts": [{"tokens": list(t), "weight": w} for t, w in self.prompts],
            "reward": self.reward.to_dict(),
            "seed": self.seed,
            "eos": self.eos,
            "ref_scale": self.ref_scale,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            r = d["reward"]
            if r["mode"] == "table":
                reward = TableReward(int(r.get("seed", 0)), float(r.get("scale", 1.0)))
            elif r["mode"] == "target":
                reward = TargetStringReward(tuple(r["target"]), float(r.get("hit", 1.0)),
                                            float(r.get("miss", 0.0)))
            else:
                raise ConfigError(f"unknown reward mode {r['mode']!r}")
            prompts = tuple((tuple(p["tokens"]), float(p.get("weight", 1.0))) for p in d["prompts"])
            return cls(int(d["vocab_size"]), int(d["horizon"]), prompts, reward,
                       int(d.get("seed", 0)), bool(d.get("eos", False)),
                       float(d.get("ref_scale", 0.5)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed env document: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @cached_property
    def digest(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def space(self):
        return state_space(self)


class StateSpace:
    """Indexed view of every non-terminal state of an :class:`MdpSpec`.

    ``child[i, a]`` is the index reached by emitting ``a`` in state ``i`` or
    ``-1`` when the episode ends there.
    """

    def __init__(self, spec):
        self.spec = spec
        V, H = spec.vocab_size, spec.horizon
        eos = spec.eos_token
        states = []
        for p in range(len(spec.prompts)):
            layer = [()]
            for t in range(H):
                states.extend(StateId(p, pre) for pre in layer)
                if t == H - 1:
                    break
                layer = [pre + (a,) for pre in layer for a in range(V) if a != eos]
        self.states = states
        self.index = {s: i for i, s in enumerate(states)}
        n = len(states)
        self.n_states = n
        self.vocab_size = V
        self.depth = np.array([len(s.prefix) for s in states], dtype=np.int64)
        self.prompt_of = np.array([s.prompt_index for s in states], dtype=np.int64)
        child = np.full((n, V), -1, dtype=np.int64)
        for i, s in enumerate(states):
            if len(s.prefix) < H - 1:
                for a in range(V):
                    if a != eos:
                        child[i, a] = self.index[StateId(s.prompt_index, s.prefix + (a,))]
        self.child = child
        self.roots = np.array([self.index[StateId(p, ())] for p in range(len(spec.prompts))])
        self.rewards = _reward_table(spec, self)

    def __len__(self):
        return self.n_states

    def lookup(self, s):
        try:
            return self.index[StateId(int(s[0]), tuple(s[1]))]
        except KeyError:
            raise DomainError(f"unknown state {s!r}") from None

    def path(self, prompt_index, tokens):
        """State indices visited while emitting ``tokens`` from the prompt root."""
        i = int(self.roots[prompt_index])
        out = []
        for a in tokens:
            if i < 0:
                raise DomainError("trajectory runs past a terminal state")
            out.append(i)
            i = int(self.child[i, a])
        return out

    def context(self, i):
        """Prompt tokens followed by the prefix for state ``i``."""
        s = self.states[i]
        return self.spec.prompts[s.prompt_index][0] + s.prefix


@lru_cache(maxsize=64)
def state_space(spec):
    return StateSpace(spec)


def _reward_table(spec, space):
    V = spec.vocab_size
    R = np.empty((space.n_states, V))
    r = spec.reward
    if isinstance(r, TargetStringReward):
        target = np.asarray(r.target)
        hit = np.arange(V)[None, :] == target[space.depth][:, None]
        R[:] = np.where(hit, r.hit, r.miss)
        return R
    for p in range(len(spec.prompts)):
        rows = np.flatnonzero(space.prompt_of == p)
        g = rng_mod.stream(r.seed, "reward", p)
        R[rows] = r.scale * g.standard_normal((rows.size, V))
    return R


def enumerate_states(spec):
    """Prompt-major, breadth-first, lexicographic list of every state."""
    return list(state_space(spec).states)


def reward(spec, s, a):
    if not (0 <= a < spec.vocab_size):
        raise DomainError(f"action {a} outside [0, {spec.vocab_size})")
    sp = state_space(spec)
    return float(sp.rewards[sp.lookup(s), a])


def sample_prompt(spec, rng):
    w = np.array([w for _, w in spec.prompts])
    return int(np.searchsorted(np.cumsum(w / w.sum()), rng.random(), side="right").clip(0, len(w) - 1))


def _draw(p, u):
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), p.size - 1))


def rollout(spec, policy, prompt_index, rng):
    """Sample one trajectory; consumes exactly ``H`` uniforms from ``rng``."""
    sp = state_space(spec)
    if policy.space.spec.digest != spec.digest:
        raise DomainError("policy is bound to a different MDP")
    probs = policy.probs()
    u = rng.random(spec.horizon)
    i = int(sp.roots[prompt_index])
    tokens = []
    for t in range(spec.horizon):
        a = _draw(probs[i], u[t])
        tokens.append(a)
        i = int(sp.child[i, a])
        if i < 0:
            break
    return Trajectory(prompt_index, tuple(tokens))


def total_reward(spec, traj):
    sp = state_space(spec)
    idx = sp.path(traj.prompt_index, traj.tokens)
    return float(sp.rewards[idx, list(traj.tokens)].sum())


def enumerate_trajectories(spec, prompt_index):
    """All complete trajectories from one prompt as ``(states, actions)`` arrays.

    Only defined for fixed-horizon MDPs; shape ``(V**H, H)``.
    """
    if spec.eos:
        raise ConfigError("trajectory enumeration requires the fixed-horizon mode")
    sp = state_space(spec)
    V, H = spec.vocab_size, spec.horizon
    acts = np.array(np.unravel_index(np.arange(V ** H), (V,) * H)).T
    states = np.empty_like(acts)
    cur = np.full(acts.shape[0], sp.roots[prompt_index])
    for t in range(H):
        states[:, t] = cur
        if t < H - 1:
            cur = sp.child[cur, acts[:, t]]
    return states, acts
