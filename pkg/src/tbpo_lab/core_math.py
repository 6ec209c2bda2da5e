"""Bregman generators and the per-token ratio-matching loss.

Every generator ships with analytic ``h``, ``h'`` and ``h''``.  The per-token
loss ``h'(R) R - h(R) - h'(1/R)`` is evaluated through a closed form per
generator in terms of ``x = ln R`` so that large ratios do not lose precision
to cancellation.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DomainError

LOG_RATIO_CLAMP = 30.0


class GeneratorKind(str, Enum):
    LOGISTIC = "logistic"
    KLIEP = "kliep"
    LSIF = "lsif"
    SBA = "sba"


@dataclass(frozen=True)
class GeneratorSpec:
    """A strictly convex generator ``h`` on ``(0, inf)``.

    ``lam`` and ``s`` are only read for SBA, ``h(R) = (R^(1+lam) - R) / (s lam (lam+1))``.
    At ``lam == 0`` SBA uses its limit ``R ln R / s``.
    """

    kind: GeneratorKind
    lam: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", GeneratorKind(self.kind))
        if self.kind is GeneratorKind.SBA:
            if not (np.isfinite(self.s) and self.s > 0):
                raise ConfigError(f"SBA scale s must be positive, got {self.s}")
            if not np.isfinite(self.lam) or self.lam == -1.0:
                raise ConfigError(f"SBA lambda must be finite and != -1, got {self.lam}")

    @classmethod
    def logistic(cls):
        return cls(GeneratorKind.LOGISTIC)

    @classmethod
    def kliep(cls):
        return cls(GeneratorKind.KLIEP)

    @classmethod
    def lsif(cls):
        return cls(GeneratorKind.LSIF)

    @classmethod
    def sba(cls, lam=0.0, s=4.0):
        return cls(GeneratorKind.SBA, float(lam), float(s))

    def to_dict(self):
        d = {"kind": self.kind.value}
        if self.kind is GeneratorKind.SBA:
            d["lambda"] = self.lam
            d["s"] = self.s
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            kind = GeneratorKind(d["kind"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad generator spec {d!r}") from exc
        if kind is GeneratorKind.SBA:
            return cls.sba(d.get("lambda", 0.0), d.get("s", 4.0))
        return cls(kind)


def _positive(R):
    R = np.asarray(R, dtype=np.float64)
    if not np.all(np.isfinite(R)) or np.any(R <= 0):
        raise DomainError("generator argument must be finite and > 0")
    return R


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def generator_value(gen, R):
    """``h(R)``."""
    R_in = R
    R = _positive(R)
    k = gen.kind
    if k is GeneratorKind.LOGISTIC:
        v = R * np.log(R) - (1 + R) * np.log1p(R)
    elif k is GeneratorKind.KLIEP:
        v = R * np.log(R) - R
    elif k is GeneratorKind.LSIF:
        v = 0.5 * (R - 1) ** 2
    elif gen.lam == 0:
        v = R * np.log(R) / gen.s
    else:
        lam = gen.lam
        v = R * np.expm1(lam * np.log(R)) / (gen.s * lam * (lam + 1))
    return _out(v, R_in)


def generator_deriv(gen, R):
    """``h'(R)``."""
    R_in = R
    R = _positive(R)
    k = gen.kind
    if k is GeneratorKind.LOGISTIC:
        v = np.log(R) - np.log1p(R)
    elif k is GeneratorKind.KLIEP:
        v = np.log(R)
    elif k is GeneratorKind.LSIF:
        v = R - 1
    elif gen.lam == 0:
        v = (np.log(R) + 1) / gen.s
    else:
        lam = gen.lam
        v = ((1 + lam) * np.expm1(lam * np.log(R)) + lam) / (gen.s * lam * (lam + 1))
    return _out(v, R_in)


def generator_second_deriv(gen, R):
    """``h''(R)``, strictly positive on ``(0, inf)``."""
    R_in = R
    R = _positive(R)
    k = gen.kind
    if k is GeneratorKind.LOGISTIC:
        v = 1.0 / (R * (1 + R))
    elif k is GeneratorKind.KLIEP:
        v = 1.0 / R
    elif k is GeneratorKind.LSIF:
        v = np.ones_like(R)
    else:
        v = R ** (gen.lam - 1) / gen.s
    return _out(v, R_in)


def bregman(gen, Ra, Rb):
    """Pointwise Bregman divergence ``B_h(Ra || Rb)``."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    return (generator_value(gen, Ra) - generator_value(gen, Rb)
            - generator_deriv(gen, Rb) * (Ra - Rb))


def token_log_ratio(logp_theta_w, logp_theta_l, logp_ref_w, logp_ref_l, log_w, beta):
    """``ln R_theta`` for one compared token pair (works elementwise on arrays).

    ``beta * [(log pi_theta(l) - log pi_ref(l)) - (log pi_theta(w) - log pi_ref(w)) + log w]``
    """
    parts = [np.asarray(p, dtype=np.float64)
             for p in (logp_theta_w, logp_theta_l, logp_ref_w, logp_ref_l, log_w)]
    if not all(np.all(np.isfinite(p)) for p in parts):
        raise DomainError("token_log_ratio inputs must be finite")
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    tw, tl, rw, rl, lw = parts
    out = beta * ((tl - rl) - (tw - rw) + lw)
    return float(out) if out.ndim == 0 else out


def _clamped(log_R):
    x = np.asarray(log_R, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("log ratio must be finite")
    return np.clip(x, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)


def per_token_loss(gen, log_R):
    """``h'(R) R - h(R) - h'(1/R)`` at ``R = exp(log_R)``, ``log_R`` clamped to +-30."""
    x = _clamped(log_R)
    k = gen.kind
    if k is GeneratorKind.LOGISTIC:
        v = 2.0 * np.logaddexp(0.0, x)
    elif k is GeneratorKind.KLIEP:
        v = np.exp(x) + x
    elif k is GeneratorKind.LSIF:
        v = 0.5 * (np.exp(2 * x) + 1) - np.exp(-x)
    elif gen.lam == 0:
        v = (np.exp(x) + x - 1) / gen.s
    else:
        lam, s = gen.lam, gen.s
        v = (np.exp((1 + lam) * x) / (s * (1 + lam))
             - np.expm1(-lam * x) / (s * lam)
             - 1.0 / (s * (1 + lam)))
    return _out(v, log_R)


def per_token_loss_grad(gen, log_R):
    """Derivative of :func:`per_token_loss` with respect to ``ln R``.

    Equals ``h''(R) R^2 + h''(1/R) / R``.  Outside the clamp window the
    derivative is taken at the clamped point so the signal keeps pulling
    extreme ratios back instead of vanishing.
    """
    x = _clamped(log_R)
    k = gen.kind
    if k is GeneratorKind.LOGISTIC:
        v = 2.0 / (1.0 + np.exp(-x))
    elif k is GeneratorKind.KLIEP:
        v = np.exp(x) + 1
    elif k is GeneratorKind.LSIF:
        v = np.exp(2 * x) + np.exp(-x)
    else:
        lam = gen.lam
        v = (np.exp((1 + lam) * x) + np.exp(-lam * x)) / gen.s
    return _out(v, log_R)


def pair_loss(gen, log_ratios):
    """Mean of the per-token losses over the ``T`` compared positions."""
    x = np.asarray(log_ratios, dtype=np.float64)
    if x.size == 0:
        raise DomainError("pair_loss needs at least one token ratio")
    return float(np.mean(per_token_loss(gen, x)))
