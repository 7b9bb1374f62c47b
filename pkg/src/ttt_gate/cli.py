"""Command-line entry point: ``ttt-gate {eval,calibrate,ablate,synth}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
Every command validates its configuration and computes all results before it
writes anything, so a failing run leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import harness
from .backbone import (
    BackboneConfig,
    backbone_forward,
    chunk_stream,
    group_sequences,
    init_backbone,
    load_corpus,
    synth_corpus,
    ttt_input,
    write_corpus_bin,
)
from .gating import ThresholdController
from .numerics import nearest_rank_percentile
from .ttt_layer import TTTConfig, TTTLayer, init_params, load_params

log = logging.getLogger("ttt_gate")

OUT_ENV = "TTT_GATE_OUT"
DEFAULT_OUT = "ttt_gate_out"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str
    corpus: str | None = None
    weights: str | None = None
    seed: int = 42
    seq_len: int = 256
    chunk_size: int = 64
    rho: float = 0.5
    alpha: float = 0.1
    n_cal: int = 16
    mask_k: int = 0
    policies: tuple[str, ...] = harness.POLICIES
    signal: str = "recon"
    carry: str = "chunk"
    oracle_scope: str = "global"
    out: str = DEFAULT_OUT
    which: str | None = None

    def eval_config(self) -> harness.EvalConfig:
        return harness.EvalConfig(
            seq_len=self.seq_len, chunk_size=self.chunk_size, rho=self.rho, alpha=self.alpha,
            n_cal=self.n_cal, seed=self.seed, signal=self.signal, carry=self.carry,
            oracle_scope=self.oracle_scope,
        )

    def echo(self) -> dict:
        d = asdict(self)
        # where the files land is not part of the run, and keeping it out keeps reports comparable
        del d["out"]
        d["policies"] = list(self.policies)
        return d

    def validate(self) -> None:
        try:
            self.eval_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mask_k not in (0, -1):
            raise ConfigError("--mask-k must be 0 or -1")
        unknown = [p for p in self.policies if p not in harness.POLICIES]
        if unknown or not self.policies:
            raise ConfigError(f"unknown policies {unknown}; choose from {','.join(harness.POLICIES)}")
        if self.command != "synth" and not self.corpus:
            raise ConfigError("--corpus is required")


def _policies(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus", help="directory of UTF-8 text files, a single text file, or a .bin token stream")
    common.add_argument("--weights", help="TTT layer parameter file (default: seeded init)")
    common.add_argument("--seed", type=int, default=42, help="seed for init and random baselines (default 42)")
    common.add_argument("--seq-len", type=int, default=256, help="tokens per sequence (default 256)")
    common.add_argument("--chunk-size", type=int, default=64, help="tokens per chunk (default 64)")
    common.add_argument("--rho", type=float, default=0.5, help="target update rate (default 0.5)")
    common.add_argument("--alpha", type=float, default=0.1, help="controller EMA / gain (default 0.1)")
    common.add_argument("--ncal", type=int, default=16, dest="n_cal", help="calibration chunks (default 16)")
    common.add_argument("--mask-k", type=int, default=0, choices=(0, -1), help="mask diagonal offset")
    common.add_argument("--policies", type=_policies, default=harness.POLICIES,
                        help="comma list from " + ",".join(harness.POLICIES))
    common.add_argument("--signal", choices=harness.SIGNALS, default="recon", help="gate signal")
    common.add_argument("--carry", choices=harness.CARRY_MODES, default="chunk",
                        help="fast-weight carry: reset per chunk, or follow the dense-update path per sequence")
    common.add_argument("--oracle-scope", choices=("global", "sequence"), default="global")
    common.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                        help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ttt-gate", description="Gated test-time training evaluation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("eval", parents=[common], help="run the policy suite and write report.json + records.csv")
    sub.add_parser("calibrate", parents=[common], help="calibrate the gate threshold and write a controller checkpoint")
    ab = sub.add_parser("ablate", parents=[common], help="paired ablation runs")
    ab.add_argument("which", choices=("diagonal", "shuffled", "delta"))
    syn = sub.add_parser("synth", parents=[common], help="write a synthetic patterned .bin corpus")
    syn.add_argument("--size", type=int, default=125, help="number of sequences (default 125)")
    syn.add_argument("--pattern", choices=("mixed", "motif", "constant"), default="mixed")
    return parser


def run_config_from_args(args) -> RunConfig:
    return RunConfig(
        command=args.command, corpus=args.corpus, weights=args.weights, seed=args.seed,
        seq_len=args.seq_len, chunk_size=args.chunk_size, rho=args.rho, alpha=args.alpha,
        n_cal=args.n_cal, mask_k=args.mask_k, policies=tuple(args.policies), signal=args.signal,
        carry=args.carry, oracle_scope=args.oracle_scope, out=args.out,
        which=getattr(args, "which", None),
    )


def load_model(cfg: RunConfig):
    backbone = init_backbone(BackboneConfig())
    if cfg.weights:
        try:
            ttt_cfg, params = load_params(cfg.weights)
        except ValueError as exc:
            raise OSError(f"unreadable weights file {cfg.weights}: {exc}") from exc
    else:
        ttt_cfg = TTTConfig(chunk_size=cfg.chunk_size)
        params = init_params(ttt_cfg, seed=cfg.seed)
    if ttt_cfg.model_dim != backbone.config.model_dim:
        raise ConfigError(
            f"TTT model_dim {ttt_cfg.model_dim} does not match backbone width {backbone.config.model_dim}"
        )
    ttt_cfg = replace(ttt_cfg, chunk_size=cfg.chunk_size, mask_diagonal=cfg.mask_k)
    return backbone, TTTLayer(ttt_cfg, params)


def _load(cfg: RunConfig):
    cfg.validate()
    try:
        tokens = load_corpus(cfg.corpus)
    except ValueError as exc:
        raise OSError(f"unreadable corpus {cfg.corpus}: {exc}") from exc
    if len(chunk_stream(tokens, cfg.seq_len, cfg.chunk_size)) == 0:
        raise ConfigError(f"corpus has fewer than {cfg.seq_len + 1} tokens")
    backbone, layer = load_model(cfg)
    return tokens, backbone, layer


def cmd_eval(cfg: RunConfig) -> int:
    tokens, backbone, layer = _load(cfg)
    summary, records = harness.evaluate(tokens, backbone, layer, cfg.eval_config(), cfg.policies, cfg.echo())
    log.info("measured %d chunks", summary.chunk_count)
    harness.emit_report(summary, records, cfg.out)
    _print_summary(summary)
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    tokens, backbone, layer = _load(cfg)
    chunks = chunk_stream(tokens, cfg.seq_len, cfg.chunk_size)
    if len(chunks) < cfg.n_cal:
        raise ConfigError(f"corpus yields {len(chunks)} chunks, fewer than --ncal {cfg.n_cal}")
    ec = cfg.eval_config()
    controller = ThresholdController(target_rate=cfg.rho, alpha=cfg.alpha, n_cal=cfg.n_cal)
    seen = 0
    for seq in group_sequences(chunks):
        hidden = backbone_forward(seq, backbone)
        for h in hidden:
            if seen == cfg.n_cal:
                break
            views = layer.views(ttt_input(h))
            state = layer.initial_state()
            if ec.signal == "recon":
                sig = layer.skip_forward(state, views).recon_loss_scalar
            else:
                sig = layer.improvement(state, views)[0]
            controller.observe_and_decide(sig)
            seen += 1
        if seen == cfg.n_cal:
            break
    buf = controller.calibration_buffer
    pct = {f"p{q}": nearest_rank_percentile(buf, q / 100) for q in (0, 10, 25, 50, 75, 90, 100)}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    harness._atomic_write(out / "controller.json", controller.to_json() + "\n")
    print(f"tau = {controller.tau!r}")
    print(" ".join(f"{k}={v:.6g}" for k, v in pct.items()))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    tokens, backbone, layer = _load(cfg)
    ec = cfg.eval_config()
    out = Path(cfg.out)
    if cfg.which == "diagonal":
        a, b, deltas = harness.ablate_diagonal(tokens, backbone, layer, ec, cfg.policies)
        runs = {"k0": a, "k-1": b}
        for summ, _ in runs.values():
            k = summ.config.pop("mask_diagonal")
            summ.config.update(cfg.echo() | {"mask_k": k})
        extra = {"ce_delta_k0_minus_k-1": deltas}
    elif cfg.which == "shuffled":
        n, s, ratios = harness.sanity_shuffled(tokens, backbone, layer, ec, cfg.policies)
        for summ, _ in (n, s):
            summ.config.update({k: v for k, v in cfg.echo().items() if k not in summ.config})
        runs = {"normal": n, "shuffled": s}
        extra = {"relative_improvement": ratios}
    else:
        ec = replace(ec, signal="delta")
        summ, recs = harness.evaluate(tokens, backbone, layer, ec, cfg.policies, replace(cfg, signal="delta").echo())
        runs = {"delta": (summ, recs)}
        extra = {
            "signal": "delta",
            "gate_signal_overhead": summ.cost_ledger["signal_overhead"].get("gate"),
            "gate_flops_with_overhead": summ.cost_ledger["relative_flops_with_overhead"].get("gate"),
        }
    for name, (summ, recs) in runs.items():
        harness.emit_report(summ, recs, out / name)
    harness._atomic_write(out / "ablation.json", json.dumps(harness._jsonable(extra), indent=2, sort_keys=True) + "\n")
    print(json.dumps(harness._jsonable(extra), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(cfg: RunConfig, size: int, pattern: str) -> int:
    if size < 1:
        raise ConfigError("--size must be >= 1")
    if cfg.seq_len < 1:
        raise ConfigError("--seq-len must be >= 1")
    tokens = synth_corpus(cfg.seed, size, cfg.seq_len, pattern)
    path = Path(cfg.out)
    if path.suffix != ".bin":
        path = path / "corpus.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus_bin(path, tokens)
    print(path)
    return EXIT_OK


def _print_summary(summary: harness.ReportSummary) -> None:
    for p, ce in summary.mean_ce.items():
        print(f"{p:8s} CE {ce:.4f}  PPL {summary.perplexity[p]:.3f}  rate {summary.realized_update_rate[p]:.3f}")
    if summary.oracle_recovery is not None:
        print(f"oracle recovery {summary.oracle_recovery:.3f}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = run_config_from_args(args)
        if cfg.command == "synth":
            return cmd_synth(cfg, args.size, args.pattern)
        cfg.validate()
        return {"eval": cmd_eval, "calibrate": cmd_calibrate, "ablate": cmd_ablate}[cfg.command](cfg)
    except (ConfigError, harness.HarnessError) as exc:
        if isinstance(exc, harness.ChunkNumericError):
            print(f"numeric error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
