"""Forgetting and utility metrics, closed-loop rollouts, simulated quantization and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .policy import TinyVlaPolicy, make_batch
from .world import DataSplits, Episode, UnlearnRequest, execute

SCHEMA_VERSION = 1
PRECISIONS = ("fp32", "int8", "int4")
PRECISION_BITS = {"int8": 8, "int4": 4}
CSV_HEADER = ("method", "precision", "fc_raw", "fc_report", "rc_raw", "rc_report", "fad", "rad", "tsr", "svr",
              "recovery", "seed")


class ProvenanceError(ValueError):
    """Two reports being compared do not come from the same run configuration."""


# ---------------------------------------------------------------- token metrics

def token_metrics(model: TinyVlaPolicy, episodes: Sequence[Episode], batch_size: int = 128) -> tuple[float, float]:
    """Token-weighted teacher-forced CE and argmax accuracy over every action position."""
    if not episodes:
        raise ValueError("token metrics need at least one episode")
    nll = 0.0
    hits = total = 0
    was, model.training = model.training, False
    try:
        for i in range(0, len(episodes), batch_size):
            b = make_batch(episodes[i : i + batch_size], model.cfg)
            logits = model.forward_batch(b)["logits"].data.astype(np.float64)
            m = b.mask
            logp = tc.log_softmax_np(logits[m], -1)
            tgt = b.targets[m]
            nll += float(-logp[np.arange(tgt.size), tgt].sum())
            hits += int((logits[m].argmax(-1) == tgt).sum())
            total += int(tgt.size)
    finally:
        model.training = was
    return nll / total, hits / total


# open ends of the report scales; keeps saturated values inside [0, 100) and (0, 100]
_FC_CEIL = math.nextafter(100.0, 0.0)
_RC_FLOOR = math.nextafter(0.0, 1.0)


def fc_scale(fc_raw: float) -> float:
    return min(-100.0 * math.expm1(-fc_raw), _FC_CEIL)


def rc_scale(retain_ce: float) -> float:
    return max(100.0 * math.exp(-retain_ce), _RC_FLOOR)


@dataclass
class SplitScores:
    ce_forget: float
    acc_forget: float
    ce_retain: float
    acc_retain: float

    @classmethod
    def measure(cls, model: TinyVlaPolicy, splits: DataSplits) -> SplitScores:
        if not splits.forget or not splits.retain:
            raise ValueError("forgetting metrics need non-empty forget and retain sets")
        cf, af = token_metrics(model, splits.forget)
        cr, ar = token_metrics(model, splits.retain)
        return cls(cf, af, cr, ar)


@dataclass
class ForgettingMetrics:
    fc_raw: float
    fc_report: float
    rc_raw: float
    rc_report: float
    fad: float
    rad: float


def forgetting_from_scores(base: SplitScores, unlearned: SplitScores) -> ForgettingMetrics:
    return ForgettingMetrics(
        fc_raw=unlearned.ce_forget,
        fc_report=fc_scale(unlearned.ce_forget),
        rc_raw=-unlearned.ce_retain,
        rc_report=rc_scale(unlearned.ce_retain),
        fad=base.acc_forget - unlearned.acc_forget,
        rad=base.acc_retain - unlearned.acc_retain,
    )


def forgetting_metrics(base: TinyVlaPolicy, unlearned: TinyVlaPolicy, splits: DataSplits) -> ForgettingMetrics:
    return forgetting_from_scores(SplitScores.measure(base, splits), SplitScores.measure(unlearned, splits))


# ---------------------------------------------------------------- rollouts

def rollout_metrics(policy, eval_episodes: Sequence[Episode], probe_episodes: Sequence[Episode], max_steps: int = 24,
                    request: UnlearnRequest = UnlearnRequest(), chunk: int = 128) -> tuple[float, float]:
    """(task success rate on eval episodes, violation rate on probe episodes) under greedy decoding.

    ``policy`` may be a TinyVlaPolicy or any callable ``(scene, instruction) -> tokens``.
    """
    if not eval_episodes or not probe_episodes:
        raise ValueError("rollout metrics need non-empty eval and probe sets")
    overlap = {e.index for e in eval_episodes} & {e.index for e in probe_episodes}
    if overlap:
        raise ValueError(f"eval and probe sets share episodes {sorted(overlap)[:5]}")

    def outcomes(eps):
        if isinstance(policy, TinyVlaPolicy):
            toks = []
            for i in range(0, len(eps), chunk):
                part = eps[i : i + chunk]
                toks += policy.generate_batch([e.scene for e in part], [e.instruction for e in part], max_steps)
        else:
            toks = [policy(e.scene, e.instruction) for e in eps]
        return [execute(t, e.scene, e.instruction, request, max_steps) for t, e in zip(toks, eps)]

    tsr = float(np.mean([o.success for o in outcomes(list(eval_episodes))]))
    svr = float(np.mean([o.violation for o in outcomes(list(probe_episodes))]))
    return tsr, svr


# ---------------------------------------------------------------- quantization

@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bits}; use 4 or 8")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w: np.ndarray, scheme: QuantScheme) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor integer codes and the scale max|w| / qmax."""
    w64 = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w64).max()) if w64.size else 0.0
    if peak == 0.0:
        return np.zeros(w64.shape, dtype=np.int32), 0.0
    q = round_half_away(w64 * scheme.qmax / peak)
    q = np.clip(q, -scheme.qmax, scheme.qmax).astype(np.int32)
    return q, peak / scheme.qmax


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


def fake_quantize(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    q, scale = quantize_tensor(w, scheme)
    if scale == 0.0:
        return np.array(w, copy=True)
    return dequantize(q, scale).astype(np.asarray(w).dtype)


def merged_copy(model: TinyVlaPolicy) -> TinyVlaPolicy:
    """Adapter-free copy whose weights include every unmerged adapter delta."""
    out = model.clone()
    for ad in model.adapters:
        if not ad.merged:
            W = out.params[ad.target_path]
            W.data = (W.data.astype(np.float64) + ad.delta()).astype(W.dtype)
    return out


def quantize_model(model: TinyVlaPolicy, scheme: QuantScheme) -> TinyVlaPolicy:
    """Merged copy with every 2-D projection weight quantize-dequantized; tables and 1-D params untouched."""
    out = merged_copy(model)
    for p in out.linear_paths():
        t = out.params[p]
        t.data = fake_quantize(t.data, scheme)
    return out


# ---------------------------------------------------------------- reports

@dataclass
class PrecisionReport:
    precision: str
    fc_raw: float
    fc_report: float
    rc_raw: float
    rc_report: float
    fad: float
    rad: float
    tsr: float | None
    svr: float | None
    acc_forget: float
    acc_retain: float
    provenance: str

    @classmethod
    def build(cls, precision: str, base: SplitScores, scores: SplitScores, tsr: float | None, svr: float | None,
              provenance: str) -> PrecisionReport:
        fm = forgetting_from_scores(base, scores)
        return cls(precision, fm.fc_raw, fm.fc_report, fm.rc_raw, fm.rc_report, fm.fad, fm.rad, tsr, svr,
                   scores.acc_forget, scores.acc_retain, provenance)


def quant_recovery(report_fp, report_q) -> float:
    """Forgetting given back by quantization: fc_report(fp) - fc_report(quantized)."""
    if getattr(report_fp, "provenance", None) != getattr(report_q, "provenance", None):
        raise ProvenanceError(f"provenance mismatch: {report_fp.provenance!r} vs {report_q.provenance!r}")
    return float(report_fp.fc_report - report_q.fc_report)


@dataclass
class AuditReport:
    method: str
    seed: int
    config_hash: str
    base_hash: str
    base: dict
    precisions: dict[str, PrecisionReport] = field(default_factory=dict)
    recovery: dict[str, float] = field(default_factory=dict)
    eval_ids: list[int] = field(default_factory=list)
    probe_ids: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def fp(self) -> PrecisionReport:
        return self.precisions["fp32"]

    def to_json(self) -> dict:
        d = asdict(self)
        d["precisions"] = {k: asdict(v) for k, v in sorted(self.precisions.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> AuditReport:
        d = dict(d)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')!r}")
        d["precisions"] = {k: PrecisionReport(**v) for k, v in d["precisions"].items()}
        return cls(**d)


def provenance_tag(config_hash: str, method: str, seed: int) -> str:
    return f"{config_hash}:{method}:{seed}"


def audit_model(base: TinyVlaPolicy, model: TinyVlaPolicy, splits: DataSplits, method: str, seed: int,
                config_hash: str, eval_episodes: Sequence[Episode], probe_episodes: Sequence[Episode],
                precisions: Sequence[str] = PRECISIONS, max_steps: int = 24,
                request: UnlearnRequest = UnlearnRequest(), base_scores: SplitScores | None = None,
                base_rollout: tuple[float, float] | None = None, rollouts: bool = True) -> AuditReport:
    """Evaluate ``model`` against the base at every requested precision.

    With ``rollouts=False`` only the token-level metrics are computed and tsr/svr are left empty.
    """
    bad = set(precisions) - set(PRECISIONS)
    if bad:
        raise ValueError(f"unknown precisions {sorted(bad)}")
    base_scores = base_scores or SplitScores.measure(base, splits)
    none = (None, None)
    btsr, bsvr = base_rollout or (rollout_metrics(base, eval_episodes, probe_episodes, max_steps, request)
                                  if rollouts else none)
    prov = provenance_tag(config_hash, method, seed)
    report = AuditReport(method, seed, config_hash, base.param_hash(),
                         {**asdict(base_scores), "tsr": btsr, "svr": bsvr},
                         eval_ids=sorted(e.index for e in eval_episodes),
                         probe_ids=sorted(e.index for e in probe_episodes))
    for prec in precisions:
        m = model if prec == "fp32" else quantize_model(model, QuantScheme(PRECISION_BITS[prec]))
        scores = SplitScores.measure(m, splits)
        tsr, svr = rollout_metrics(m, eval_episodes, probe_episodes, max_steps, request) if rollouts else none
        report.precisions[prec] = PrecisionReport.build(prec, base_scores, scores, tsr, svr, prov)
    if "fp32" in report.precisions:
        for prec in precisions:
            if prec != "fp32":
                report.recovery[prec] = quant_recovery(report.precisions["fp32"], report.precisions[prec])
    return report


def _check_dir(out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"report directory does not exist: {out_dir}")
    return out_dir


def report_json(reports: Sequence[AuditReport]) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "reports": [r.to_json() for r in reports]}
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_rows(reports: Sequence[AuditReport]) -> list[list]:
    rows = []
    for r in reports:
        for prec in PRECISIONS:
            if prec not in r.precisions:
                continue
            p = r.precisions[prec]
            rec = 0.0 if prec == "fp32" else r.recovery.get(prec, 0.0)
            rows.append([r.method, prec, p.fc_raw, p.fc_report, p.rc_raw, p.rc_report, p.fad, p.rad, p.tsr, p.svr,
                         rec, r.seed])
    return rows


def write_report(reports: AuditReport | Sequence[AuditReport], out_dir: Path) -> tuple[Path, Path]:
    """Write report.json and metrics.csv into an existing directory."""
    if isinstance(reports, AuditReport):
        reports = [reports]
    out_dir = _check_dir(out_dir)
    jpath, cpath = out_dir / "report.json", out_dir / "metrics.csv"
    try:
        jpath.write_text(report_json(reports))
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in csv_rows(reports):
                w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    except OSError as exc:
        raise OSError(f"cannot write report into {out_dir}: {exc}") from exc
    return jpath, cpath


def read_report(path: Path) -> list[AuditReport]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported report schema version {doc.get('schema_version')!r}")
    return [AuditReport.from_json(r) for r in doc["reports"]]
