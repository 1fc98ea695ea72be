"""Comparison unlearning methods sharing the adapter and report machinery of the staged pipeline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .policy import AdapterSet, FrozenReference, TinyVlaPolicy, make_batch
from .tensorcore import Tensor
from .training import token_accuracy
from .unlearn import (ForgetResult, NonFiniteLossError, RefCache, StageReport, _as_cache, _ce, apply_update,
                      collect_grads, eval_subset, sample)
from .world import DataSplits, Episode

log = logging.getLogger(__name__)

METHODS = ("ga", "npo", "ssd", "salun")


@dataclass
class BaselineConfig:
    method: str = "ga"
    lr: float = 1e-2
    steps: int = 210  # matches the staged pipeline's 60 + 60 + 90
    batch_forget: int = 16
    batch_retain: int = 16
    retain_weight: float | None = None  # None: 0 for ga, 1 otherwise
    npo_beta: float = 0.1
    ssd_lambda: float = 1.0
    ssd_floor: float = 0.1
    ssd_max_examples: int = 128
    salun_top_fraction: float = 0.1
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_dropout: float = 0.0
    eval_every: int = 10
    eval_cap: int = 64
    seed: int = 42

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.salun_top_fraction <= 1:
            raise ValueError("salun_top_fraction must lie in (0, 1]")
        if self.npo_beta <= 0 or self.ssd_floor < 0 or self.ssd_lambda < 0:
            raise ValueError("npo_beta must be positive, ssd knobs non-negative")

    @property
    def effective_retain_weight(self) -> float:
        if self.retain_weight is not None:
            return self.retain_weight
        return 0.0 if self.method == "ga" else 1.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> BaselineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- shared loop

def _eval_row(model: TinyVlaPolicy, step: int, losses: dict, ef: list[Episode], er: list[Episode] | None) -> dict:
    row = {"step": step, "l_retain": losses.get("l_retain"), "l_forget": losses.get("l_forget"),
           "l_mismatch": None, "l_feat": None, "forget_acc": None, "retain_acc": None}
    row["forget_acc"] = token_accuracy(model, ef)
    if er is not None:
        row["retain_acc"] = token_accuracy(model, er)
    return row


def _loop(model: TinyVlaPolicy, splits: DataSplits, cfg: BaselineConfig, report: StageReport, paths: list[str],
          loss_fn, grad_mask: dict[str, np.ndarray] | None = None) -> None:
    """Minimize ``loss_fn(bf, br)`` with Adam over ``paths`` for ``cfg.steps`` steps."""
    P = model.params
    rng = np.random.default_rng(cfg.seed)
    uses_retain = cfg.effective_retain_weight > 0
    ef = eval_subset(splits.forget, cfg.eval_cap)
    er = eval_subset(splits.retain, cfg.eval_cap) if uses_retain else None
    adam = tc.AdamState()
    P.set_trainable(paths)
    model.training = True
    try:
        for step in range(1, cfg.steps + 1):
            bf = sample(rng, splits.forget, cfg.batch_forget)
            br = sample(rng, splits.retain, cfg.batch_retain) if uses_retain else []
            try:
                loss, parts = loss_fn(bf, br)
                tc.backward(loss)
            except tc.NonFiniteError as exc:
                raise NonFiniteLossError(f"{cfg.method} step {step}: {exc}", report.trace) from exc
            flat = collect_grads(P, paths)
            if grad_mask is not None:
                flat = flat * np.concatenate([grad_mask[p].reshape(-1) for p in paths])
            P.zero_grad()
            apply_update(P, adam, flat, paths, cfg.lr)
            report.steps_run = step
            if step % cfg.eval_every == 0 or step == cfg.steps:
                model.training = False
                report.trace.append(_eval_row(model, step, parts, ef, er))
                model.training = True
            else:
                report.trace.append({"step": step, "l_retain": parts.get("l_retain"), "l_forget": parts.get("l_forget"),
                                     "l_mismatch": None, "l_feat": None, "forget_acc": None, "retain_acc": None})
    finally:
        model.training = False
        P.set_trainable([])


def _broad_adapters(model: TinyVlaPolicy, cfg: BaselineConfig) -> AdapterSet:
    return model.attach_lora(model.linear_paths(), cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, seed=cfg.seed)


def _forget_ce(model: TinyVlaPolicy, episodes: Sequence[Episode]) -> Tensor:
    b = make_batch(episodes, model.cfg)
    return _ce(model.forward_batch(b)["logits"], b)


# ---------------------------------------------------------------- methods

def ga_unlearn(model: TinyVlaPolicy, splits: DataSplits, cfg: BaselineConfig = BaselineConfig()) -> ForgetResult:
    """Gradient ascent on forget-set CE through adapters on every linear weight."""
    cfg.validate()
    model.reseed_dropout(cfg.seed)
    ads = _broad_adapters(model, cfg)
    report = StageReport("ga", sorted(ads.adapters), [])
    w = cfg.effective_retain_weight

    def loss_fn(bf, br):
        lf = _forget_ce(model, bf)
        loss = tc.mul(lf, -1.0)
        parts = {"l_forget": float(lf.data)}
        if w > 0:
            lr_ = model.batch_loss(br)
            loss = loss + tc.mul(lr_, w)
            parts["l_retain"] = float(lr_.data)
        return loss, parts

    _loop(model, splits, cfg, report, ads.param_paths(), loss_fn)
    report.adapter_paths = sorted(ads.adapters)
    log.info("ga finished; retain access: %s", "none" if w == 0 else "weighted CE")
    return ForgetResult(model, ads, [report], method="ga")


def sequence_logprob(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum over valid positions of log p(target) per sequence; shape (B,)."""
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    b, t = np.nonzero(mask)
    onehot[b, t, targets[b, t]] = 1.0
    return tc.tsum(tc.tsum(tc.mul(tc.log_softmax(logits), Tensor(onehot)), axis=-1), axis=-1)


def npo_forget_term(seq_lp: Tensor, ref_lp: np.ndarray, beta: float) -> Tensor:
    """(2/beta) * mean log(1 + (p/p_ref)^beta) written with softplus of the log-ratio."""
    ratio = seq_lp - Tensor(np.asarray(ref_lp, dtype=seq_lp.dtype))
    return tc.mul(tc.mean(tc.softplus(tc.mul(ratio, float(beta)))), 2.0 / beta)


def npo_unlearn(model: TinyVlaPolicy, ref: FrozenReference | RefCache | TinyVlaPolicy, splits: DataSplits,
                cfg: BaselineConfig = BaselineConfig(method="npo")) -> ForgetResult:
    cfg.validate()
    model.reseed_dropout(cfg.seed)
    cache = _as_cache(ref)
    ads = _broad_adapters(model, cfg)
    report = StageReport("npo", sorted(ads.adapters), [])
    w = cfg.effective_retain_weight

    def loss_fn(bf, br):
        b = make_batch(bf, model.cfg)
        logits = model.forward_batch(b)["logits"]
        seq = sequence_logprob(logits, b.targets, b.mask)
        ref_logits = cache.outputs(bf, b.targets.shape[1])["logits"].astype(np.float64)
        ref_seq = sequence_logprob(Tensor(ref_logits), b.targets, b.mask).data
        lf = npo_forget_term(seq, ref_seq, cfg.npo_beta)
        loss, parts = lf, {"l_forget": float(lf.data)}
        if w > 0:
            lr_ = model.batch_loss(br)
            loss = loss + tc.mul(lr_, w)
            parts["l_retain"] = float(lr_.data)
        return loss, parts

    _loop(model, splits, cfg, report, ads.param_paths(), loss_fn)
    report.adapter_paths = sorted(ads.adapters)
    return ForgetResult(model, ads, [report], method="npo")


def _per_example_sq_grads(model: TinyVlaPolicy, episodes: Sequence[Episode], paths: list[str]) -> dict[str, np.ndarray]:
    P = model.params
    acc = {p: np.zeros(P[p].shape, dtype=np.float64) for p in paths}
    for ep in episodes:
        P.zero_grad()
        tc.backward(model.batch_loss([ep]))
        for p in paths:
            g = P[p].grad
            if g is not None:
                acc[p] += g.astype(np.float64) ** 2
    P.zero_grad()
    return {p: a / len(episodes) for p, a in acc.items()}


def ssd_dampen(weight: np.ndarray, imp_f: np.ndarray, imp_r: np.ndarray, lam: float, floor: float) -> np.ndarray:
    """Scale entries whose forget importance exceeds lam * retain importance by min(1, floor * I_r / I_f)."""
    hit = imp_f > lam * imp_r
    factor = np.ones_like(imp_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor[hit] = np.minimum(1.0, floor * imp_r[hit] / imp_f[hit])
    return (weight.astype(np.float64) * factor).astype(weight.dtype)


def ssd_unlearn(model: TinyVlaPolicy, splits: DataSplits, cfg: BaselineConfig = BaselineConfig(method="ssd")) -> ForgetResult:
    """Single-pass dampening of parameters more important to the forget set than to the retain set."""
    cfg.validate()
    if not splits.forget or not splits.retain:
        raise ValueError("ssd needs non-empty forget and retain sets")
    rng = np.random.default_rng(cfg.seed)
    paths = model.base_paths()
    P = model.params
    P.set_trainable(paths)
    try:
        imp_f = _per_example_sq_grads(model, sample(rng, splits.forget, cfg.ssd_max_examples), paths)
        imp_r = _per_example_sq_grads(model, sample(rng, splits.retain, cfg.ssd_max_examples), paths)
    finally:
        P.set_trainable([])
    touched = []
    for p in paths:
        new = ssd_dampen(P[p].data, imp_f[p], imp_r[p], cfg.ssd_lambda, cfg.ssd_floor)
        if not np.array_equal(new, P[p].data):
            touched.append(p)
        P[p].data = new
    report = StageReport("ssd", touched, [], steps_run=1)
    report.trace.append({"step": 1, "l_retain": None, "l_forget": None, "l_mismatch": None, "l_feat": None,
                         "forget_acc": token_accuracy(model, eval_subset(splits.forget, cfg.eval_cap)),
                         "retain_acc": token_accuracy(model, eval_subset(splits.retain, cfg.eval_cap))})
    return ForgetResult(model, AdapterSet(), [report], method="ssd")


def saliency_mask(grads: dict[str, np.ndarray], fraction: float) -> dict[str, np.ndarray]:
    """Top ``fraction`` of entries by |grad| over all paths (sorted path order, ties by flat position)."""
    paths = sorted(grads)
    flat = np.concatenate([np.abs(grads[p]).reshape(-1) for p in paths])
    k = max(1, math.ceil(fraction * flat.size))
    keep = np.zeros(flat.size, dtype=bool)
    keep[np.argsort(-flat, kind="stable")[:k]] = True
    out, off = {}, 0
    for p in paths:
        n = grads[p].size
        out[p] = keep[off : off + n].reshape(grads[p].shape)
        off += n
    return out


def salun_unlearn(model: TinyVlaPolicy, splits: DataSplits, cfg: BaselineConfig = BaselineConfig(method="salun")) -> ForgetResult:
    """Ascent on forget CE plus retain CE, applied only to the most forget-salient raw weights."""
    cfg.validate()
    model.reseed_dropout(cfg.seed)
    P = model.params
    paths = model.base_paths()
    P.set_trainable(paths)
    try:
        grads = {p: np.zeros(P[p].shape, dtype=np.float64) for p in paths}
        for i in range(0, len(splits.forget), 64):
            chunk = splits.forget[i : i + 64]
            P.zero_grad()
            tc.backward(tc.mul(model.batch_loss(chunk), len(chunk) / len(splits.forget)))
            for p in paths:
                if P[p].grad is not None:
                    grads[p] += P[p].grad
        P.zero_grad()
    finally:
        P.set_trainable([])
    mask = saliency_mask(grads, cfg.salun_top_fraction)
    w = cfg.effective_retain_weight
    report = StageReport("salun", sorted(p for p in paths if mask[p].any()), [])

    def loss_fn(bf, br):
        lf = _forget_ce(model, bf)
        loss, parts = tc.mul(lf, -1.0), {"l_forget": float(lf.data)}
        if w > 0:
            lr_ = model.batch_loss(br)
            loss = loss + tc.mul(lr_, w)
            parts["l_retain"] = float(lr_.data)
        return loss, parts

    _loop(model, splits, cfg, report, paths, loss_fn, grad_mask={p: mask[p].astype(np.float64) for p in paths})
    report.adapter_paths = []
    return ForgetResult(model, AdapterSet(), [report], method="salun")


def run_baseline(model: TinyVlaPolicy, ref, splits: DataSplits, cfg: BaselineConfig) -> ForgetResult:
    cfg.validate()
    if cfg.method == "ga":
        return ga_unlearn(model, splits, cfg)
    if cfg.method == "npo":
        return npo_unlearn(model, ref, splits, cfg)
    if cfg.method == "ssd":
        return ssd_unlearn(model, splits, cfg)
    return salun_unlearn(model, splits, cfg)
