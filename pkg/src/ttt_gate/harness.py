"""Policy evaluation over a corpus: per-chunk measurements, metrics, ablations, reports.

One measurement pass records, for every chunk, the reconstruction loss seen
by the initial forward, the one-step reconstruction improvement, and the CE
of both branches (SKIP reuses the initial forward; UPDATE re-forwards with
the causally masked inner step). Policies are then pure functions of those
records, so they cannot contaminate each other and the greedy oracle is
exactly optimal for its budget.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from . import __version__
from .backbone import (
    BackboneWeights,
    backbone_forward,
    ce_loss,
    chunk_stream,
    group_sequences,
    shuffle_stream,
    ttt_input,
)
from .gating import (
    ThresholdController,
    budget,
    oracle_advantage,
    oracle_select,
    random_select,
    random_select_count,
)
from .numerics import pearson, spearman
from .rng import derive_seed
from .ttt_layer import FastWeightState, TTTLayer

REPORT_FORMAT_VERSION = 1
POLICIES = ("skip", "update1", "gate", "random", "oracle")
SIGNALS = ("recon", "delta")
CARRY_MODES = ("chunk", "sequence")


class HarnessError(RuntimeError):
    pass


class ChunkNumericError(HarnessError):
    def __init__(self, sequence_id: int, chunk_index: int, cause: Exception):
        super().__init__(f"sequence {sequence_id}, chunk {chunk_index}: {cause}")
        self.sequence_id = sequence_id
        self.chunk_index = chunk_index


@dataclass(frozen=True)
class EvalConfig:
    seq_len: int = 256
    chunk_size: int = 64
    rho: float = 0.5
    alpha: float = 0.1
    n_cal: int = 16
    seed: int = 42
    signal: str = "recon"
    carry: str = "chunk"
    oracle_scope: str = "global"
    trailing_window: int = 500

    def __post_init__(self):
        if self.seq_len < 1 or self.chunk_size < 1 or self.seq_len % self.chunk_size:
            raise ValueError("chunk_size must be >= 1 and divide seq_len")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.n_cal < 1:
            raise ValueError("n_cal must be >= 1")
        if self.signal not in SIGNALS:
            raise ValueError(f"signal must be one of {SIGNALS}")
        if self.carry not in CARRY_MODES:
            raise ValueError(f"carry must be one of {CARRY_MODES}")
        if self.oracle_scope not in ("global", "sequence"):
            raise ValueError("oracle_scope must be 'global' or 'sequence'")


@dataclass
class EvalRecord:
    sequence_id: int
    chunk_index: int
    recon_loss: float
    ttt_delta: float
    ce_skip: float
    ce_update: float
    decisions: dict[str, bool] = field(default_factory=dict)
    ce_realized: dict[str, float] = field(default_factory=dict)
    flops_charged: dict[str, float] = field(default_factory=dict)

    @property
    def advantage(self) -> float:
        return oracle_advantage(self.ce_skip, self.ce_update)

    def signal(self, kind: str) -> float:
        return self.recon_loss if kind == "recon" else self.ttt_delta


@dataclass
class CostLedger:
    chunk_count: int
    update_count: dict[str, int]
    relative_flops: dict[str, float]
    signal_overhead: dict[str, float]
    measurement_flops: float

    def with_overhead(self, policy: str) -> float:
        return self.relative_flops[policy] + self.signal_overhead.get(policy, 0.0)


def relative_flops(policy: str, value: float = 0.0) -> float:
    """Forward-pass equivalents per chunk.

    ``skip`` -> 1; ``update`` with ``value = N`` steps -> 1 + 2N; any gated
    policy with ``value = update rate`` -> 1 + 2 * rate.
    """
    if policy == "skip":
        return 1.0
    if value < 0:
        raise ValueError("steps / rate must be non-negative")
    if policy == "update":
        return 1.0 + 2.0 * value
    if value > 1:
        raise ValueError("update rate must lie in [0, 1]")
    return 1.0 + 2.0 * value


def oracle_recovery(mean_skip: float, mean_ours: float, mean_oracle: float) -> float:
    denom = mean_skip - mean_oracle
    if not denom > 0:
        raise HarnessError("oracle recovery undefined: oracle does not improve on SKIP")
    return (mean_skip - mean_ours) / denom


# --- measurement -------------------------------------------------------------

def measure_corpus(tokens, backbone: BackboneWeights, layer: TTTLayer, cfg: EvalConfig) -> list[EvalRecord]:
    chunks = chunk_stream(tokens, cfg.seq_len, cfg.chunk_size)
    if not chunks:
        raise HarnessError(f"corpus too short for one sequence of {cfg.seq_len} tokens")
    records = []
    for seq in group_sequences(chunks):
        hidden = backbone_forward(seq, backbone)
        state = layer.initial_state()
        for chunk, h in zip(seq, hidden):
            if cfg.carry == "chunk":
                state = layer.initial_state()
            try:
                rec, state = _measure_chunk(chunk, h, state, backbone, layer)
            except FloatingPointError as exc:
                raise ChunkNumericError(chunk.sequence_id, chunk.chunk_index, exc) from exc
            records.append(rec)
    return records


def _measure_chunk(chunk, h, state: FastWeightState, backbone, layer: TTTLayer):
    views = layer.views(ttt_input(h))
    initial = layer.skip_forward(state, views)
    updated, new_state = layer.update_forward(state, views)
    delta, _, _ = layer.improvement(state, views)
    ce_skip, _ = ce_loss(h, initial.outputs, chunk.labels, backbone)
    ce_update, _ = ce_loss(h, updated.outputs, chunk.labels, backbone)
    values = (initial.recon_loss_scalar, delta, ce_skip, ce_update)
    if not all(math.isfinite(v) for v in values):
        raise FloatingPointError("non-finite chunk measurement")
    rec = EvalRecord(chunk.sequence_id, chunk.chunk_index, *values)
    return rec, new_state


# --- policies ----------------------------------------------------------------

def gate_decisions(signals, cfg: EvalConfig, controller: ThresholdController | None = None):
    """Run the streaming threshold gate; returns ``(decisions, taus, controller)``."""
    if controller is None:
        controller = ThresholdController(target_rate=cfg.rho, alpha=cfg.alpha, n_cal=cfg.n_cal)
    out, taus = [], []
    for s in signals:
        d = controller.observe_and_decide(s)
        out.append(bool(d.decision))
        taus.append(d.tau_at_decision)
    return np.array(out, dtype=bool), np.array(taus), controller


def oracle_decisions(records: list[EvalRecord], cfg: EvalConfig) -> np.ndarray:
    adv = np.array([r.advantage for r in records])
    if cfg.oracle_scope == "global":
        return oracle_select(adv, cfg.rho)
    out = np.zeros(len(records), dtype=bool)
    seq_ids = np.array([r.sequence_id for r in records])
    for sid in np.unique(seq_ids):
        idx = np.flatnonzero(seq_ids == sid)
        out[idx] = oracle_select(adv[idx], cfg.rho)
    return out


def policy_decisions(policy: str, records: list[EvalRecord], cfg: EvalConfig) -> np.ndarray:
    K = len(records)
    if policy == "skip":
        return np.zeros(K, dtype=bool)
    if policy == "update1":
        return np.ones(K, dtype=bool)
    if policy == "gate":
        return gate_decisions([r.signal(cfg.signal) for r in records], cfg)[0]
    if policy == "random":
        return random_select(K, cfg.rho, derive_seed(cfg.seed, "random_select"))
    if policy == "oracle":
        return oracle_decisions(records, cfg)
    raise HarnessError(f"unknown policy {policy!r}; choose from {POLICIES}")


def run_policy_suite(tokens, backbone, layer, cfg: EvalConfig, policies=POLICIES,
                     records: list[EvalRecord] | None = None):
    """Measure the corpus (unless ``records`` are given) and apply every policy.

    Returns ``(records, ledger)``; records carry per-policy decisions, realized
    CE and the FLOPs charged for that chunk.
    """
    policies = tuple(dict.fromkeys(policies))
    for p in policies:
        if p not in POLICIES:
            raise HarnessError(f"unknown policy {p!r}; choose from {POLICIES}")
    if records is None:
        records = measure_corpus(tokens, backbone, layer, cfg)
    else:
        records = [replace(r, decisions={}, ce_realized={}, flops_charged={}) for r in records]
    if not records:
        raise HarnessError("empty corpus")
    K = len(records)
    update_count, flops, overhead = {}, {}, {}
    for policy in policies:
        dec = policy_decisions(policy, records, cfg)
        for r, d in zip(records, dec):
            d = bool(d)
            r.decisions[policy] = d
            r.ce_realized[policy] = r.ce_update if d else r.ce_skip
            r.flops_charged[policy] = relative_flops("update", 1) if d else relative_flops("skip")
        n_up = int(dec.sum())
        update_count[policy] = n_up
        flops[policy] = math.fsum(r.flops_charged[policy] for r in records) / K
        # delta gating needs the backward + re-forward on every chunk before deciding
        overhead[policy] = 2.0 if (policy == "gate" and cfg.signal == "delta") else 0.0
    ledger = CostLedger(
        chunk_count=K,
        update_count=update_count,
        relative_flops=flops,
        signal_overhead=overhead,
        measurement_flops=relative_flops("update", 1) + 2.0,
    )
    return records, ledger


def matched_random_ce(records: list[EvalRecord], policy: str, seed: int) -> tuple[int, float]:
    """Mean CE of a random policy that updates exactly as many chunks as ``policy`` did."""
    m = sum(r.decisions[policy] for r in records)
    dec = random_select_count(len(records), m, derive_seed(seed, "matched_random", policy))
    ce = math.fsum(r.ce_update if d else r.ce_skip for r, d in zip(records, dec)) / len(records)
    return m, ce


# --- statistics ---------------------------------------------------------------

def topk_overlap(signal, advantage, rho: float) -> float:
    sig = np.asarray(signal, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    m = budget(sig.size, rho)
    if m == 0:
        raise ValueError("top-k overlap undefined for an empty budget")
    a = oracle_select(sig, rho)
    b = oracle_select(adv, rho)
    return float(np.sum(a & b)) / m


def correlation_suite(records: list[EvalRecord], signal: str = "recon", rho: float = 0.5):
    """``(pearson_r, spearman_rho, topk_overlap)`` between a gate signal and advantage."""
    if len(records) < 3:
        raise ValueError("correlations need at least 3 records")
    sig = np.array([r.signal(signal) for r in records])
    adv = np.array([r.advantage for r in records])
    return pearson(sig, adv), spearman(sig, adv), topk_overlap(sig, adv, rho)


def mcnemar(b: int, c: int):
    """Continuity-corrected McNemar statistic and chi-square(1) tail, or ``(None, None)``."""
    if b + c == 0:
        return None, None
    stat = (abs(b - c) - 1.0) ** 2 / (b + c)
    return stat, float(chi2.sf(stat, 1))


def decision_metrics(records: list[EvalRecord], policy_a: str = "gate", policy_b: str = "random"):
    """Per-policy agreement with the oracle and McNemar between ``policy_a`` and ``policy_b``.

    Returns ``(accuracy, (statistic, p_value, b, c))``; the McNemar part is
    ``None`` when either policy is missing.
    """
    if not records or "oracle" not in records[0].decisions:
        raise HarnessError("decision metrics need oracle decisions")
    oracle = np.array([r.decisions["oracle"] for r in records])
    accuracy = {}
    correct = {}
    for policy in records[0].decisions:
        dec = np.array([r.decisions[policy] for r in records])
        correct[policy] = dec == oracle
        accuracy[policy] = float(correct[policy].mean())
    if policy_a in correct and policy_b in correct:
        b = int(np.sum(correct[policy_a] & ~correct[policy_b]))
        c = int(np.sum(~correct[policy_a] & correct[policy_b]))
        stat, p = mcnemar(b, c)
        return accuracy, (stat, p, b, c)
    return accuracy, None


# --- summary ----------------------------------------------------------------

@dataclass
class ReportSummary:
    config: dict
    chunk_count: int
    mean_ce: dict[str, float]
    perplexity: dict[str, float]
    realized_update_rate: dict[str, float]
    oracle_recovery: float | None
    decision_accuracy: dict[str, float]
    pearson_r: float | None
    spearman_rho: float | None
    topk_overlap: float | None
    correlations: dict[str, dict]
    mcnemar: dict | None
    gate_trailing_rate: float | None
    matched_random: dict | None
    cost_ledger: dict
    versions: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_corr(records, signal, rho):
    try:
        r, s, o = correlation_suite(records, signal, rho)
        return {"pearson_r": r, "spearman_rho": s, "topk_overlap": o}
    except ValueError:
        return {"pearson_r": None, "spearman_rho": None, "topk_overlap": None}


def summarize(records: list[EvalRecord], ledger: CostLedger, cfg: EvalConfig, extra_config=None) -> ReportSummary:
    policies = list(records[0].decisions)
    K = len(records)
    mean_ce = {p: math.fsum(r.ce_realized[p] for r in records) / K for p in policies}
    rates = {p: ledger.update_count[p] / K for p in policies}
    recovery = None
    if {"skip", "gate", "oracle"} <= set(policies):
        try:
            recovery = oracle_recovery(mean_ce["skip"], mean_ce["gate"], mean_ce["oracle"])
        except HarnessError:
            recovery = None
    accuracy, mc = ({}, None)
    if "oracle" in policies:
        accuracy, mc_raw = decision_metrics(records)
        if mc_raw is not None:
            stat, p, b, c = mc_raw
            mc = {"policy_a": "gate", "policy_b": "random", "b": b, "c": c, "statistic": stat, "p_value": p}
    corr = {s: _safe_corr(records, s, cfg.rho) for s in SIGNALS}
    active = corr[cfg.signal]
    trailing, matched = None, None
    if "gate" in policies:
        tail = [r.decisions["gate"] for r in records[-min(cfg.trailing_window, K):]]
        trailing = float(np.mean(tail))
        m, ce = matched_random_ce(records, "gate", cfg.seed)
        matched = {"update_count": m, "mean_ce": ce}
    config = asdict(cfg) | (extra_config or {})
    return ReportSummary(
        config=config,
        chunk_count=K,
        mean_ce=mean_ce,
        perplexity={p: math.exp(v) for p, v in mean_ce.items()},
        realized_update_rate=rates,
        oracle_recovery=recovery,
        decision_accuracy=accuracy,
        pearson_r=active["pearson_r"],
        spearman_rho=active["spearman_rho"],
        topk_overlap=active["topk_overlap"],
        correlations=corr,
        mcnemar=mc,
        gate_trailing_rate=trailing,
        matched_random=matched,
        cost_ledger={
            "chunk_count": ledger.chunk_count,
            "update_count": ledger.update_count,
            "relative_flops": ledger.relative_flops,
            "signal_overhead": ledger.signal_overhead,
            "relative_flops_with_overhead": {p: ledger.with_overhead(p) for p in policies},
            "instrumentation_overhead": ledger.measurement_flops,
        },
        versions={
            "package": __version__,
            "report_format": REPORT_FORMAT_VERSION,
            "numpy": np.__version__,
        },
    )


def evaluate(tokens, backbone, layer, cfg: EvalConfig, policies=POLICIES, extra_config=None):
    records, ledger = run_policy_suite(tokens, backbone, layer, cfg, policies)
    return summarize(records, ledger, cfg, extra_config), records


# --- ablations ------------------------------------------------------------------

def relative_improvement(summary: ReportSummary, policy: str = "gate") -> float:
    skip = summary.mean_ce["skip"]
    return (skip - summary.mean_ce[policy]) / skip


def sanity_shuffled(tokens, backbone, layer, cfg: EvalConfig, policies=POLICIES):
    """Evaluate on the corpus and on a per-sequence shuffled copy with the same seeds."""
    policies = tuple(dict.fromkeys(("skip", "gate") + tuple(policies)))
    shuffled = shuffle_stream(tokens, cfg.seq_len, derive_seed(cfg.seed, "shuffle"))
    normal, rec_n = evaluate(tokens, backbone, layer, cfg, policies, {"input": "normal"})
    shuf, rec_s = evaluate(shuffled, backbone, layer, cfg, policies, {"input": "shuffled"})
    ratios = {"normal": relative_improvement(normal), "shuffled": relative_improvement(shuf)}
    return (normal, rec_n), (shuf, rec_s), ratios


def ablate_diagonal(tokens, backbone, layer: TTTLayer, cfg: EvalConfig, policies=POLICIES):
    """Identical runs that differ only in the mask diagonal (k = 0 vs k = -1)."""
    out = {}
    for k in (0, -1):
        lyr = TTTLayer(replace(layer.config, mask_diagonal=k), layer.params)
        out[k] = evaluate(tokens, backbone, lyr, cfg, policies, {"mask_diagonal": k})
    deltas = {p: out[0][0].mean_ce[p] - out[-1][0].mean_ce[p] for p in out[0][0].mean_ce}
    return out[0], out[-1], deltas


# --- report files ---------------------------------------------------------------

RECORD_COLUMNS = ("sequence_id", "chunk_index", "recon_loss", "ttt_delta", "ce_skip", "ce_update")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def records_csv(records: list[EvalRecord]) -> str:
    policies = list(records[0].decisions) if records else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(RECORD_COLUMNS)
    for p in policies:
        header += [f"{p}_decision", f"{p}_ce"]
    w.writerow(header)
    for r in records:
        row = [_fmt(getattr(r, c)) for c in RECORD_COLUMNS]
        for p in policies:
            row += [_fmt(r.decisions[p]), _fmt(r.ce_realized[p])]
        w.writerow(row)
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def report_json(summary: ReportSummary) -> str:
    return json.dumps(_jsonable(summary.to_dict()), indent=2, sort_keys=True) + "\n"


def load_schema() -> dict:
    return json.loads(resources.files("ttt_gate").joinpath("report_schema.json").read_text())


def validate_report(data: dict) -> None:
    import jsonschema

    jsonschema.validate(data, load_schema())


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(summary: ReportSummary, records: list[EvalRecord], path) -> tuple[Path, Path]:
    """Write ``report.json`` and ``records.csv`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    report_text = report_json(summary)
    validate_report(json.loads(report_text))
    rp, cp = out / "report.json", out / "records.csv"
    _atomic_write(rp, report_text)
    _atomic_write(cp, records_csv(records))
    return rp, cp
