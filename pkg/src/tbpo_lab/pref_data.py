"""Token-level Bradley-Terry probabilities and labelled preference datasets."""

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, log_expit

from . import rng as rng_mod
from .errors import ConfigError, DomainError
from .oracle import PairBatch
from .token_mdp import Trajectory, rollout, sample_prompt, state_space


class ScoreKind(str, Enum):
    Q = "q"
    A = "a"


def token_bt_prob(score_w, score_l):
    """``sigma(score_w - score_l)``."""
    if not (np.isfinite(score_w) and np.isfinite(score_l)):
        raise DomainError("scores must be finite")
    return float(expit(score_w - score_l))


def _score_diffs(vt, kind, y_w, y_l, t):
    if y_w.prompt_index != y_l.prompt_index:
        raise DomainError("both trajectories must answer the same prompt")
    T = min(len(y_w.tokens), len(y_l.tokens))
    if not (1 <= t <= T):
        raise DomainError(f"t must lie in [1, {T}], got {t}")
    sp = state_space(vt.spec)
    S = vt.scores(ScoreKind(kind).value)
    iw = sp.path(y_w.prompt_index, y_w.tokens[:t])
    il = sp.path(y_l.prompt_index, y_l.tokens[:t])
    return S[iw, list(y_w.tokens[:t])] - S[il, list(y_l.tokens[:t])]


def prefix_pref_prob(vt, kind, pair, t):
    """``prod_{i<=t} sigma(S(s_i^w, a_i^w) - S(s_i^l, a_i^l))``."""
    d = _score_diffs(vt, kind, pair[0], pair[1], t)
    return float(np.exp(np.sum(log_expit(d))))


def _label_logit(vt, kind, y_a, y_b):
    T = min(len(y_a.tokens), len(y_b.tokens))
    return float(np.sum(_score_diffs(vt, kind, y_a, y_b, T)))


def label_prob(vt, kind, y_a, y_b):
    """Probability that ``y_a`` is recorded as the winner over ``y_b``.

    The two prefix-product events ``y_a > y_b`` and ``y_b > y_a`` at
    ``T = min`` length are renormalised against each other, which reduces to
    ``sigma(sum_t d_t)``.
    """
    return float(expit(_label_logit(vt, kind, y_a, y_b)))


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple
    chosen: tuple
    rejected: tuple
    label_prob: float
    gen_meta: dict = field(default_factory=dict, compare=False)

    def to_json(self):
        return json.dumps({"prompt": list(self.prompt), "chosen": list(self.chosen),
                           "rejected": list(self.rejected), "label_prob": self.label_prob},
                          separators=(",", ":"))


def label_pair(vt, kind, y_a, y_b, rng):
    """Draw the winner of ``(y_a, y_b)`` and return the labelled pair.

    ``label_prob`` is the model probability of the recorded outcome, so
    swapping the inputs and complementing the draw gives identical content.
    """
    if y_a.prompt_index != y_b.prompt_index:
        raise DomainError("both trajectories must answer the same prompt")
    z = _label_logit(vt, kind, y_a, y_b)
    a_wins = rng.random() < expit(z)
    w, l = (y_a, y_b) if a_wins else (y_b, y_a)
    prompt = vt.spec.prompts[y_a.prompt_index][0]
    # sigma(-z) rather than 1 - sigma(z) keeps swapped inputs bit-identical
    return PreferencePair(prompt, w.tokens, l.tokens, float(expit(z if a_wins else -z)),
                          {"score_kind": ScoreKind(kind).value, "prompt_index": y_a.prompt_index})


@dataclass
class PreferenceDataset:
    spec_hash: str
    score_kind: str
    pairs: list

    def __len__(self):
        return len(self.pairs)

    def to_jsonl(self):
        head = json.dumps({"spec_hash": self.spec_hash, "score_kind": self.score_kind,
                           "n": len(self.pairs)}, separators=(",", ":"))
        return "\n".join([head] + [p.to_json() for p in self.pairs]) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ConfigError("empty preference file")
        head = json.loads(lines[0])
        pairs = []
        for ln in lines[1:]:
            d = json.loads(ln)
            pairs.append(PreferencePair(tuple(d["prompt"]), tuple(d["chosen"]),
                                        tuple(d["rejected"]), float(d["label_prob"])))
        if head.get("n", len(pairs)) != len(pairs):
            raise ConfigError("header pair count does not match the file")
        return cls(head["spec_hash"], head["score_kind"], pairs)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_jsonl(f.read())

    def digest(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def generate_dataset(spec, pi_ref, vt, kind, n_pairs, behavior=None, seed=0):
    """``n_pairs`` labelled pairs; pair ``i`` uses its own stream ``(seed, i)``."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    behavior = pi_ref if behavior is None else behavior
    kind = ScoreKind(kind).value
    pairs = []
    for i in range(n_pairs):
        g = rng_mod.stream(seed, "pair", i)
        p = sample_prompt(spec, g)
        y_a = rollout(spec, behavior, p, g)
        y_b = rollout(spec, behavior, p, g)
        pairs.append(label_pair(vt, kind, y_a, y_b, g))
    return PreferenceDataset(spec.digest, kind, pairs)


def prompt_index_of(spec, prompt):
    for i, (toks, _) in enumerate(spec.prompts):
        if toks == tuple(prompt):
            return i
    raise DomainError(f"prompt {prompt!r} is not part of the environment")


def dataset_batch(spec, dataset):
    """Index arrays for every pair, padded to the longest ``T`` with zero weight.

    Each pair gets weight ``1 / T`` per compared position, so summing a
    subset of rows and dividing by its size gives the mini-batch mean.
    """
    if dataset.spec_hash != spec.digest:
        raise ConfigError("dataset was generated for a different environment")
    sp = state_space(spec)
    rows = []
    for pair in dataset.pairs:
        p = prompt_index_of(spec, pair.prompt)
        T = min(len(pair.chosen), len(pair.rejected))
        if T < 1:
            raise DomainError("empty response in preference pair")
        rows.append((sp.path(p, pair.chosen[:T]), pair.chosen[:T],
                     sp.path(p, pair.rejected[:T]), pair.rejected[:T], T))
    Tm = max(r[4] for r in rows)
    M = len(rows)
    arr = {k: np.zeros((M, Tm), dtype=np.int64) for k in ("sw", "aw", "sl", "al")}
    weight = np.zeros((M, Tm))
    for i, (sw, aw, sl, al, T) in enumerate(rows):
        arr["sw"][i, :T], arr["aw"][i, :T] = sw, aw
        arr["sl"][i, :T], arr["al"][i, :T] = sl, al
        weight[i, :T] = 1.0 / T
    return PairBatch(arr["sw"], arr["aw"], arr["sl"], arr["al"], weight)


def trajectory(prompt_index, tokens):
    return Trajectory(prompt_index, tuple(tokens))
