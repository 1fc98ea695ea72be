"""Command-line front end: ``forgelab <command> [options]``.

Exit codes::

    0  success
    2  configuration or usage error
    3  file input/output error (including unreadable checkpoints)
    4  base policy failed the accuracy gate
    5  non-finite loss during unlearning
    6  checkpoint, data or config hash mismatch
    7  report schema version mismatch
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .audit import (
    CSV_HEADER, PRECISION_BITS, PRECISIONS, SCHEMA_VERSION, AuditReport, ProvenanceError, csv_rows, merged_copy,
    write_report,
)
from . import thread_limit
from .config import ConfigError, RunConfig, load_config, parse_config
from .pipeline import METHODS, Corpus, evaluate, fit_base, make_corpus, unlearn
from .policy import CheckpointError, TinyVlaPolicy, load_checkpoint, save_adapters, save_checkpoint
from .training import AccuracyGateError
from .unlearn import STAGES, NonFiniteLossError, write_stage_json, write_trace
from .world import read_dataset, write_dataset

log = logging.getLogger("forgelab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_GATE, EXIT_NONFINITE, EXIT_HASH, EXIT_SCHEMA = 0, 2, 3, 4, 5, 6, 7


class HashMismatch(RuntimeError):
    pass


class SchemaMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def _resolve_config(args, fallback: Path | None = None) -> RunConfig:
    path = getattr(args, "config", None)
    if path is None and fallback is not None and fallback.is_file():
        path = fallback
    return load_config(path)


def _override(cfg: RunConfig, section: str, **kw) -> RunConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **kw)})
    cfg.validate()
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.ini").write_text(cfg.to_ini())


def _write_meta(out: Path, name: str, payload: dict) -> None:
    """Side file for wall-clock information so the main outputs stay byte-reproducible."""
    payload = {**payload, "written_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    (out / f"{name}.meta.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_data(data: Path, cfg: RunConfig) -> Corpus:
    data = Path(data)
    manifest_path = data / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("data_hash") != cfg.data_hash():
        raise HashMismatch(f"dataset {data} was generated with data hash {manifest.get('data_hash')}, "
                           f"the resolved config has {cfg.data_hash()}")
    return make_corpus(cfg, read_dataset(data, cfg.world))


def _ckpt_config(header: dict) -> RunConfig | None:
    text = header.get("extra", {}).get("run_config")
    return parse_config(text, "<checkpoint>") if text else None


def _check_provenance(base: TinyVlaPolicy, unlearned: TinyVlaPolicy, uheader: dict, cfg: RunConfig) -> None:
    extra = uheader.get("extra", {})
    base_hash = base.param_hash()
    if "base_hash" in extra:
        if extra["base_hash"] != base_hash:
            raise HashMismatch(f"unlearned checkpoint was derived from base {extra['base_hash']}, got {base_hash}")
    elif unlearned.param_hash() != base_hash:
        raise HashMismatch("unlearned checkpoint carries no base hash and differs from the base")
    if extra.get("data_hash", cfg.data_hash()) != cfg.data_hash():
        raise HashMismatch(f"checkpoint data hash {extra['data_hash']} != config data hash {cfg.data_hash()}")
    if extra.get("config_hash", cfg.config_hash()) != cfg.config_hash():
        raise HashMismatch(f"checkpoint config hash {extra['config_hash']} != config hash {cfg.config_hash()}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    cfg = _override(cfg, "run", seed=args.seed, count=args.count)
    cfg = _override(cfg, "world", forget_fraction=args.forget_fraction)
    corpus = make_corpus(cfg)
    out = _out_dir(args.out)
    write_dataset(corpus.episodes, out, cfg.world)
    req = cfg.request()
    n_forget = sum(1 for e in corpus.episodes if req(e))
    sp = corpus.splits
    manifest = {
        "data_hash": cfg.data_hash(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "count": len(corpus.episodes),
        "forget_total": n_forget,
        "splits": {s: [e.index for e in corpus.episodes if e.split == s] for s in ("train", "val", "test")},
        "train_forget": [e.index for e in sp.forget],
        "train_retain": [e.index for e in sp.retain],
        "train_boundary": [e.index for e in sp.boundary],
        "mismatch_pairs": [list(p) for p in sp.mismatch_pairs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    _write_config(cfg, out)
    print(f"episodes={len(corpus.episodes)} forget={n_forget} retain={len(corpus.episodes) - n_forget}")
    print(f"train: forget={len(sp.forget)} retain={len(sp.retain)} boundary={len(sp.boundary)} "
          f"val={len(manifest['splits']['val'])} test={len(manifest['splits']['test'])}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    data = Path(args.data)
    cfg = _resolve_config(args, data / "config.ini")
    cfg = _override(cfg, "train", epochs=args.epochs, lr=args.lr)
    corpus = _load_data(data, cfg)

    def progress(epoch, loss):
        if args.verbose:
            print(f"epoch {epoch} loss {loss:.4f}", flush=True)

    try:
        policy, info = fit_base(cfg, corpus, progress)
    except AccuracyGateError as exc:
        print(f"error: {exc}; checkpoint not saved", file=sys.stderr)
        return EXIT_GATE
    out = _out_dir(args.out)
    extra = {"config_hash": cfg.config_hash(), "data_hash": cfg.data_hash(), "run_config": cfg.to_ini(),
             "role": "base", "accuracy": info["accuracy"]}
    save_checkpoint(policy.params, out / "base.ckpt", policy.cfg, cfg.seed, extra)
    (out / "train.json").write_text(json.dumps({**info, "config_hash": cfg.config_hash()}, sort_keys=True, indent=1) + "\n")
    _write_config(cfg, out)
    acc = info["accuracy"]
    print(f"token accuracy forget={acc['forget']:.4f} retain={acc['retain']:.4f}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    data = Path(args.data)
    base, header = load_checkpoint(args.ckpt)
    cfg = _resolve_config(args, None) if args.config else (_ckpt_config(header) or RunConfig())
    corpus = _load_data(data, cfg)
    stages = tuple(s for s in args.stages.split(",") if s) if args.stages else STAGES
    bad = set(stages) - set(STAGES)
    if bad:
        raise ConfigError(f"unknown stages {sorted(bad)}; choose from {', '.join(STAGES)}")
    if args.method != "vla-forget" and args.stages:
        raise ConfigError("--stages only applies to --method vla-forget")
    out = _out_dir(args.out)
    handler = logging.FileHandler(out / "unlearn.log", mode="w")
    handler.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
    pkg_log = logging.getLogger("forgelab")
    old_level = pkg_log.level
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO)
    try:
        try:
            result = unlearn(base, corpus, cfg, args.method, stages)
        except NonFiniteLossError as exc:
            (out / "trace.json").write_text(json.dumps(exc.trace, indent=1) + "\n")
            print(f"error: {exc}; trace written to {out / 'trace.json'}", file=sys.stderr)
            return EXIT_NONFINITE
        except tc.NonFiniteError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NONFINITE
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(old_level)
        handler.close()
    extra = {"config_hash": cfg.config_hash(), "data_hash": cfg.data_hash(), "run_config": cfg.to_ini(),
             "base_hash": base.param_hash(), "method": args.method, "stages": list(stages), "role": "unlearned"}
    merged = merged_copy(result.model)
    save_checkpoint(merged.params, out / "model.ckpt", merged.cfg, cfg.seed, extra)
    if result.adapters.adapters:
        save_adapters(result.model, result.adapters, out / "adapters.ckpt", extra)
    write_trace(result.stages, out / "trace.csv")
    write_stage_json(result, out / "stages.json")
    _write_config(cfg, out)
    for st in result.stages:
        sel = ",".join(st.selected) if len(st.selected) <= 6 else f"{len(st.selected)} tensors"
        print(f"{st.stage}: steps={st.steps_run} selected={sel}"
              + (" early-stopped" if st.early_stopped else ""))
    return EXIT_OK


def _audit(args, precisions) -> int:
    base, _ = load_checkpoint(args.base)
    model, uheader = load_checkpoint(args.unlearned)
    embedded = _ckpt_config(uheader)
    cfg = _resolve_config(args) if args.config else (embedded or RunConfig())
    _check_provenance(base, model, uheader, cfg)
    corpus = _load_data(Path(args.data), cfg)
    method = uheader.get("extra", {}).get("method", "base")
    stages = uheader.get("extra", {}).get("stages")
    if method == "vla-forget" and stages and tuple(stages) != STAGES:
        method = f"vla-forget[{'+'.join(stages)}]"
    report = evaluate(base, model, corpus, cfg, method, precisions, rollouts=not args.no_rollouts)
    out = _out_dir(args.out)
    write_report(report, out)
    _write_meta(out, "report", {"base": str(args.base), "unlearned": str(args.unlearned)})
    fp = report.precisions["fp32"]
    print(f"{method}: FC={fp.fc_report:.2f} RC={fp.rc_report:.2f} FAD={fp.fad:.4f} RAD={fp.rad:.4f}"
          + ("" if fp.tsr is None else f" TSR={fp.tsr:.3f} SVR={fp.svr:.3f}"))
    for prec, rec in sorted(report.recovery.items()):
        print(f"  {prec}: FC={report.precisions[prec].fc_report:.2f} recovery={rec:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    return _audit(args, ("fp32",))


def parse_bits(text: str) -> tuple[str, ...]:
    precs = ["fp32"]
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            bits = int(tok)
        except ValueError as exc:
            raise ConfigError(f"bit width {tok!r} is not an integer") from exc
        name = f"int{bits}"
        if name not in PRECISION_BITS:
            raise ConfigError(f"unsupported bit width {bits}; choose from {sorted(PRECISION_BITS.values())}")
        if name not in precs:
            precs.append(name)
    return tuple(p for p in PRECISIONS if p in precs)


def cmd_quant_audit(args) -> int:
    return _audit(args, parse_bits(args.bits))


def _collect_reports(paths) -> list[AuditReport]:
    reports = []
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("report.json")) if p.is_dir() else [p]
        if not files:
            raise FileNotFoundError(f"no report.json under {p}")
        for f in files:
            doc = json.loads(f.read_text())
            if doc.get("schema_version") != SCHEMA_VERSION:
                raise SchemaMismatch(f"{f}: schema version {doc.get('schema_version')!r}, expected {SCHEMA_VERSION}")
            for r in doc["reports"]:
                if r.get("schema_version") != SCHEMA_VERSION:
                    raise SchemaMismatch(f"{f}: report schema version {r.get('schema_version')!r}")
                reports.append(AuditReport.from_json(r))
    return reports


SUMMARY_COLUMNS = ("fc_report", "rc_report", "fad", "rad", "tsr", "svr")
SUMMARY_TITLES = ("FC", "RC", "FAD", "RAD", "TSR", "SVR")


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(reports) -> tuple[dict, dict]:
    """Per-method fp32 mean/std of the summary columns, and per-method quantization recovery."""
    by_method = defaultdict(list)
    for r in reports:
        by_method[r.method].append(r)
    summary, recovery = {}, {}
    for m, rs in sorted(by_method.items()):
        summary[m] = {c: _mean_std([getattr(r.precisions["fp32"], c) for r in rs if "fp32" in r.precisions])
                      for c in SUMMARY_COLUMNS}
        summary[m]["n"] = len(rs)
        recovery[m] = {p: _mean_std([r.recovery[p] for r in rs if p in r.recovery])
                       for p in ("int8", "int4") if any(p in r.recovery for r in rs)}
    return summary, recovery


def summary_table(summary: dict, recovery: dict) -> str:
    def cell(ms, scale=1.0):
        if ms is None:
            return "n/a"
        return f"{ms[0] * scale:.2f} ± {ms[1] * scale:.2f}"

    head = ["method", "n"] + list(SUMMARY_TITLES) + ["rec@int8", "rec@int4"]
    rows = []
    for m, s in summary.items():
        scale = {"fad": 100.0, "rad": 100.0, "tsr": 100.0, "svr": 100.0}
        rows.append([m, str(s["n"])] + [cell(s[c], scale.get(c, 1.0)) for c in SUMMARY_COLUMNS]
                    + [cell(recovery[m].get(p)) for p in ("int8", "int4")])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))] + [fmt.format(*r) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    from .figures import forgetting_figure, recovery_figure

    reports = _collect_reports(args.runs)
    out = _out_dir(args.out)
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in sorted(csv_rows(reports), key=lambda r: (r[0], r[-1], PRECISIONS.index(r[1]))):
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    summary, recovery = summarize(reports)
    table = summary_table(summary, recovery)
    (out / "summary.txt").write_text(table)
    plot = {m: {c: s[c] or (0.0, 0.0) for c in ("fad", "rad")} for m, s in summary.items()}
    forgetting_figure(plot, out / "forgetting.png")
    recovery_figure({m: {p: v for p, v in r.items() if v} for m, r in recovery.items()}, out / "recovery.png")
    print(table, end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """gen-data, train-base, unlearn and quant-audit for each seed and method, then report."""
    root = _out_dir(args.out)
    base_cfg = _resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_cfg.seed]
    methods = [m for m in args.methods.split(",") if m]
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}")
    cfg_path = root / "run.ini"
    run_dirs = []
    for seed in seeds:
        cfg = base_cfg.with_seed(seed)
        cfg_path.write_text(cfg.to_ini())
        sd = root / f"seed{seed}"
        common = ["--config", str(cfg_path)]
        steps = [["gen-data", "--out", str(sd / "data")] + common,
                 ["train-base", "--data", str(sd / "data"), "--out", str(sd / "base")] + common]
        for m in methods:
            steps.append(["unlearn", "--ckpt", str(sd / "base" / "base.ckpt"), "--data", str(sd / "data"),
                          "--method", m, "--out", str(sd / m)] + common)
            audit = ["quant-audit", "--base", str(sd / "base" / "base.ckpt"), "--unlearned", str(sd / m / "model.ckpt"),
                     "--data", str(sd / "data"), "--bits", args.bits, "--out", str(sd / m / "audit")] + common
            if args.no_rollouts:
                audit.append("--no-rollouts")
            steps.append(audit)
            run_dirs.append(sd / m / "audit")
        for step in steps:
            print(f"[seed {seed}] {step[0]} {step[step.index('--out') + 1]}", flush=True)
            code = main(step)
            if code:
                return code
    return main(["report", "--runs", *map(str, run_dirs), "--out", str(root / "report")])


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgelab", description="Staged unlearning for a tiny vision-language-action policy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the grid-world corpus")
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--forget-fraction", type=float)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-base", help="behavior-clone the base policy")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_base)

    u = sub.add_parser("unlearn", help="remove the forget slice from a base checkpoint")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--data", required=True)
    u.add_argument("--method", choices=METHODS, default="vla-forget")
    u.add_argument("--stages", help="comma-separated subset of " + ",".join(STAGES))
    u.add_argument("--config")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_unlearn)

    for name, func, helptext in (("evaluate", cmd_evaluate, "fp32 forgetting and rollout metrics"),
                                 ("quant-audit", cmd_quant_audit, "metrics under simulated quantization")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--base", required=True)
        e.add_argument("--unlearned", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--config")
        e.add_argument("--no-rollouts", action="store_true", help="skip closed-loop rollouts")
        e.add_argument("--out", required=True)
        if name == "quant-audit":
            e.add_argument("--bits", default="8,4", help="comma-separated bit widths (4 and 8 supported)")
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="aggregate report.json files into tables and figures")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    pl = sub.add_parser("pipeline", help="run every step for one or more seeds")
    pl.add_argument("--config")
    pl.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    pl.add_argument("--methods", default=",".join(METHODS))
    pl.add_argument("--bits", default="8,4")
    pl.add_argument("--no-rollouts", action="store_true")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        thread_limit()
        return args.func(args)
    except (ProvenanceError, HashMismatch) as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except SchemaMismatch as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tc.NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
