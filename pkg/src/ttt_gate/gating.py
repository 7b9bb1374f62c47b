"""SKIP/UPDATE policies: threshold gate with EMA rate control, oracle, random."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import nearest_rank_percentile, round_half_up
from .rng import SplitMix64


class Phase(str, enum.Enum):
    CALIBRATING = "calibrating"
    ONLINE = "online"


class Decision(str, enum.Enum):
    SKIP = "SKIP"
    UPDATE = "UPDATE"

    def __bool__(self) -> bool:
        return self is Decision.UPDATE


@dataclass(frozen=True)
class GateDecision:
    decision: Decision
    signal: float
    tau_at_decision: float
    phase: Phase


@dataclass
class ThresholdController:
    """Streaming threshold gate.

    For the first ``n_cal`` signals the controller only buffers (and answers
    ``warmup_decision``); the threshold is then set to the nearest-rank
    ``(1 - target_rate)`` percentile of the buffer. After that each signal is
    compared against the current threshold, which is nudged by proportional
    control on an EMA of the realized update rate.
    """

    target_rate: float = 0.5
    alpha: float = 0.1
    n_cal: int = 16
    warmup_decision: Decision = Decision.UPDATE
    tau: float = 0.0
    ema_rate: float = 0.0
    calibration_buffer: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError("target_rate must lie in (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.n_cal < 1:
            raise ValueError("n_cal must be >= 1")
        self.warmup_decision = Decision(self.warmup_decision)

    @property
    def phase(self) -> Phase:
        return Phase.CALIBRATING if len(self.calibration_buffer) < self.n_cal else Phase.ONLINE

    def observe_and_decide(self, signal: float) -> GateDecision:
        signal = float(signal)
        if not math.isfinite(signal):
            raise ValueError(f"gate signal must be finite, got {signal}")
        if self.phase is Phase.CALIBRATING:
            self.calibration_buffer.append(signal)
            out = GateDecision(self.warmup_decision, signal, self.tau, Phase.CALIBRATING)
            if len(self.calibration_buffer) == self.n_cal:
                self.tau = nearest_rank_percentile(self.calibration_buffer, 1.0 - self.target_rate)
                self.ema_rate = self.target_rate
            return out
        tau = self.tau
        d = 1.0 if signal > tau else 0.0
        # threshold moves with the pre-decision rate estimate, then the EMA absorbs d
        self.tau = tau + self.alpha * (self.ema_rate - self.target_rate) * abs(tau)
        self.ema_rate = (1.0 - self.alpha) * self.ema_rate + self.alpha * d
        return GateDecision(Decision.UPDATE if d else Decision.SKIP, signal, tau, Phase.ONLINE)

    def to_json(self) -> str:
        return json.dumps(
            {
                "target_rate": self.target_rate,
                "alpha": self.alpha,
                "n_cal": self.n_cal,
                "warmup_decision": self.warmup_decision.value,
                "tau": self.tau,
                "ema_rate": self.ema_rate,
                "phase": self.phase.value,
                "calibration_buffer": list(self.calibration_buffer),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ThresholdController":
        data = json.loads(text)
        data.pop("phase", None)
        return cls(**data)


def oracle_advantage(ce_skip: float, ce_update: float) -> float:
    return ce_skip - ce_update


def budget(K: int, rho: float) -> int:
    """Number of UPDATE chunks out of ``K`` at rate ``rho`` (half-up rounding)."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    return min(K, round_half_up(rho * K))


def oracle_select(advantages, rho: float) -> np.ndarray:
    """Mark the ``round(rho * K)`` largest advantages; ties go to the lower index."""
    adv = np.asarray(advantages, dtype=np.float64)
    K = adv.size
    if K < 1:
        raise ValueError("oracle_select needs at least one advantage")
    m = budget(K, rho)
    # stable sort on -adv keeps lower indices first among equal values
    order = np.argsort(-adv, kind="stable")
    out = np.zeros(K, dtype=bool)
    out[order[:m]] = True
    return out


def random_select(K: int, rho: float, seed: int) -> np.ndarray:
    """Exactly ``round(rho * K)`` UPDATE positions, uniformly at random."""
    return random_select_count(K, budget(K, rho), seed)


def random_select_count(K: int, m: int, seed: int) -> np.ndarray:
    """Exactly ``m`` UPDATE positions out of ``K``, uniformly at random."""
    if K < 1:
        raise ValueError("random_select needs K >= 1")
    if not 0 <= m <= K:
        raise ValueError(f"update count {m} outside [0, {K}]")
    perm = SplitMix64(seed).permutation(K)
    out = np.zeros(K, dtype=bool)
    out[perm[:m]] = True
    return out


def threshold_decisions(signals, tau: float) -> np.ndarray:
    """Fixed-threshold gate, ``signal > tau``."""
    return np.asarray(signals, dtype=np.float64) > tau
