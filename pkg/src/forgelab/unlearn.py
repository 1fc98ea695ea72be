"""Staged adapter unlearning: layer scoring, the four objectives, PCGrad and the stage loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .policy import AdapterSet, Batch, FrozenReference, TinyVlaPolicy, make_batch
from .tensorcore import Tensor
from .world import PAD, DataSplits, Episode

log = logging.getLogger(__name__)

STAGES = ("vision", "projector", "reasoning")
FEAT_POOLS = ("mean", "cells")
STAGE_COMPONENT = {"vision": "V", "projector": "P", "reasoning": "L"}
TRACE_FIELDS = ("step", "l_retain", "l_forget", "l_mismatch", "l_feat", "forget_acc", "retain_acc")


class NonFiniteLossError(tc.NonFiniteError):
    """A loss or update went non-finite; ``trace`` holds the rows logged so far."""

    def __init__(self, msg: str, trace: list[dict] | None = None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class StageConfig:
    lambda_f: float = 0.7
    lambda_m: float = 0.8
    lambda_feat: float = 0.7
    beta_kl: float = 0.5
    alpha_ratio: float = 1.0
    gamma_feat: float = 1.0
    eps: float = 1e-8
    k_v: int = 2
    k_p: int = 2
    k_l: int = 3
    tau_v: float = 0.0
    tau_p: float = 0.0
    tau_l: float = 0.0
    steps_v: int = 60
    steps_p: int = 60
    steps_l: int = 90
    lr: float = 1e-2
    forget_acc_max: float = 0.30
    retain_ratio_min: float = 0.90
    eval_every: int = 10
    eval_cap: int = 64
    batch_forget: int = 16
    batch_retain: int = 16
    batch_boundary: int = 16
    select_batch: int = 64
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_dropout: float = 0.0
    clip_norm: float = 0.0
    include_action_rows: bool = False
    feat_pool: str = "mean"
    seed: int = 42

    def validate(self) -> None:
        for name in ("lambda_f", "lambda_m", "lambda_feat", "beta_kl", "alpha_ratio", "gamma_feat", "lr", "clip_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("k_v", "k_p", "k_l", "steps_v", "steps_p", "steps_l", "eval_every", "eval_cap",
                     "batch_forget", "batch_retain", "batch_boundary", "select_batch", "lora_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.lora_dropout < 1:
            raise ValueError("lora_dropout must lie in [0, 1)")
        if self.feat_pool not in FEAT_POOLS:
            raise ValueError(f"feat_pool must be one of {', '.join(FEAT_POOLS)}")

    def budget(self, stage: str) -> int:
        return {"vision": self.k_v, "projector": self.k_p, "reasoning": self.k_l}[stage]

    def steps(self, stage: str) -> int:
        return {"vision": self.steps_v, "projector": self.steps_p, "reasoning": self.steps_l}[stage]

    def tau(self, stage: str) -> float:
        return {"vision": self.tau_v, "projector": self.tau_p, "reasoning": self.tau_l}[stage]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> StageConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SelectionScore:
    layer: str
    index: int
    component: str
    gf_norm: float
    gr_norm: float
    cos: float
    theta_norm: float
    phi: float = 0.0
    sig: float = 0.0


@dataclass
class StageReport:
    stage: str
    selected: list[str]
    scores: list[SelectionScore]
    steps_run: int = 0
    early_stopped: bool = False
    expansions: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    adapter_paths: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["scores"] = [asdict(s) for s in self.scores]
        return d


# ---------------------------------------------------------------- selection

def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_grads(model, episodes: Sequence, paths: list[str]) -> np.ndarray:
    model.params.zero_grad()
    tc.backward(model.batch_loss(episodes))
    out = np.concatenate([
        (model.params[p].grad if model.params[p].grad is not None else np.zeros(model.params[p].shape)).reshape(-1)
        for p in paths
    ]).astype(np.float64)
    model.params.zero_grad()
    return out


def layer_grad_stats(model, forget_batch: Sequence, retain_batch: Sequence, component: str,
                     alpha_ratio: float = 1.0, eps: float = 1e-8) -> list[SelectionScore]:
    """Per-unit forget/retain gradient norms, their cosine and the unit's weight norm.

    ``model`` needs ``params`` (a ParamStore with unit tags), ``batch_loss(batch)`` and a
    ``training`` flag.  Each unit's gradient is the concatenation of its parameter grads.
    """
    if not len(forget_batch) or not len(retain_batch):
        raise ValueError("empty batch for gradient statistics")
    P = model.params
    units = P.units(component)
    if not units:
        raise ValueError(f"component {component!r} has no selectable layers")
    unit_paths = {u: [p for p in P.unit_paths(u) if not p.endswith((".lora_A", ".lora_B"))] for u in units}
    every = [p for u in units for p in unit_paths[u]]
    saved = {p: t.requires_grad for p, t in P.items()}
    was = getattr(model, "training", False)
    model.training = False
    try:
        P.set_trainable(every)
        gf = _unit_grads(model, forget_batch, every)
        gr = _unit_grads(model, retain_batch, every)
    finally:
        for p, flag in saved.items():
            P[p].requires_grad = flag
        model.training = was
    stats, off = [], 0
    for i, u in enumerate(units):
        n = sum(P[p].size for p in unit_paths[u])
        a, b = gf[off : off + n], gr[off : off + n]
        off += n
        theta = np.sqrt(sum(float((P[p].data.astype(np.float64) ** 2).sum()) for p in unit_paths[u]))
        stats.append(SelectionScore(u, i, component, float(np.linalg.norm(a)), float(np.linalg.norm(b)), _cos(a, b), theta))
    for s, phi, sig in zip(stats, score_ratio(stats, alpha_ratio, eps), score_sig(stats, eps)):
        s.phi, s.sig = phi, sig
    return stats


def score_ratio(stats: Sequence[SelectionScore], alpha_ratio: float = 1.0, eps: float = 1e-8) -> list[float]:
    """phi = |g_f| / (|theta| + eps) * (1 - cos)^alpha."""
    return [s.gf_norm / (s.theta_norm + eps) * max(0.0, 1.0 - s.cos) ** alpha_ratio for s in stats]


def score_sig(stats: Sequence[SelectionScore], eps: float = 1e-8) -> list[float]:
    """sig = |g_f| / (|g_r| + eps)."""
    return [s.gf_norm / (s.gr_norm + eps) for s in stats]


def rank_by_score(values: Sequence[float], tau: float, budget: int | None) -> list[int]:
    """Indices with value > tau, best first (ties by index), truncated to ``budget``.

    Falls back to the single argmax when nothing clears the threshold.
    """
    if not len(values):
        raise ValueError("no layers to select from")
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    keep = [i for i in order if values[i] > tau]
    if not keep:
        return [order[0]]
    return keep if budget is None else keep[:budget]


def vision_select(model, forget_batch, retain_batch, tau: float = 0.0, budget: int = 2, component: str = "V",
                  alpha_ratio: float = 1.0, eps: float = 1e-8, stats: list[SelectionScore] | None = None) -> list[str]:
    """Units of ``component`` whose phi clears ``tau``, top ``budget`` by phi."""
    if stats is None:
        stats = layer_grad_stats(model, forget_batch, retain_batch, component, alpha_ratio, eps)
    return [stats[i].layer for i in rank_by_score([s.phi for s in stats], tau, budget)]


def llm_select(model, forget_batch, retain_batch, tau: float = 0.0, budget: int = 3, component: str = "L",
               eps: float = 1e-8, stats: list[SelectionScore] | None = None) -> tuple[list[str], list[str]]:
    """(initial S_L, expansion queue); both in descending sig order."""
    if stats is None:
        stats = layer_grad_stats(model, forget_batch, retain_batch, component, 1.0, eps)
    sig = [s.sig for s in stats]
    picked = rank_by_score(sig, tau, budget)
    rest = [i for i in sorted(range(len(sig)), key=lambda i: (-sig[i], i)) if i not in picked]
    return [stats[i].layer for i in picked], [stats[i].layer for i in rest]


# ---------------------------------------------------------------- gradient surgery

def pcgrad(grads: Sequence[np.ndarray], seed=None, on_project: Callable[[int, int, np.ndarray, np.ndarray], None] | None = None) -> np.ndarray:
    """Shuffle, then for each g_i project away conflicts with every other g_j in place; return the sum.

    ``seed`` may be an int, a Generator or None (keep the given order).
    """
    if not len(grads):
        raise ValueError("pcgrad needs at least one gradient")
    size = grads[0].shape
    if any(g.shape != size for g in grads):
        raise tc.DimensionError(f"gradient lengths differ: {[g.shape for g in grads]}")
    g = [np.array(x, dtype=np.float64) for x in grads]
    if seed is not None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        g = [g[i] for i in rng.permutation(len(g))]
    n = len(g)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dot = float(np.dot(g[i], g[j]))
            if dot < 0:
                g[i] -= dot / float(np.dot(g[j], g[j])) * g[j]
                if on_project is not None:
                    on_project(i, j, g[i], g[j])
    return np.sum(g, axis=0)


# ---------------------------------------------------------------- reference cache

class RefCache:
    """Per-episode outputs of the frozen reference, computed once."""

    def __init__(self, ref: FrozenReference | TinyVlaPolicy, chunk: int = 64):
        self.policy = ref.policy if isinstance(ref, FrozenReference) else ref
        self.chunk = chunk
        self._logits: dict[int, np.ndarray] = {}
        self._hv: dict[int, np.ndarray] = {}
        self._hp: dict[int, np.ndarray] = {}
        self._cells: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _fill(self, episodes: Sequence[Episode]) -> None:
        todo = [ep for ep in episodes if ep.index not in self._hv]
        todo = list({ep.index: ep for ep in todo}.values())
        pol = self.policy
        was, pol.training = pol.training, False
        try:
            for i in range(0, len(todo), self.chunk):
                part = todo[i : i + self.chunk]
                out = pol.forward_batch(make_batch(part, pol.cfg))
                for k, ep in enumerate(part):
                    L = len(ep.expert_tokens) - 1
                    self._logits[ep.index] = out["logits"].data[k, :L].copy()
                    self._hv[ep.index] = out["h_v"].data[k].copy()
                    self._hp[ep.index] = out["h_p"].data[k].copy()
                    self._cells[ep.index] = (out["h_v_cells"].data[k].copy(), out["h_p_cells"].data[k].copy())
        finally:
            pol.training = was

    def outputs(self, episodes: Sequence[Episode], width: int | None = None) -> dict[str, np.ndarray]:
        self._fill(episodes)
        width = width or max(len(ep.expert_tokens) - 1 for ep in episodes)
        V = self.policy.cfg.action_vocab
        logits = np.zeros((len(episodes), width, V), dtype=self.policy.cfg.np_dtype)
        for k, ep in enumerate(episodes):
            row = self._logits[ep.index]
            logits[k, : len(row)] = row
        hv = np.stack([self._hv[ep.index] for ep in episodes])
        hp = np.stack([self._hp[ep.index] for ep in episodes])
        cells = [self._cells[ep.index] for ep in episodes]
        return {"logits": logits, "h_v": hv, "h_p": hp,
                "h_v_cells": np.stack([c[0] for c in cells]), "h_p_cells": np.stack([c[1] for c in cells])}


def _as_cache(ref) -> RefCache:
    return ref if isinstance(ref, RefCache) else RefCache(ref)


# ---------------------------------------------------------------- objectives

def _ce(logits: Tensor, batch: Batch) -> Tensor:
    return tc.cross_entropy_logits(logits, batch.targets, PAD)


def _kl(p: Tensor, q: Tensor, batch: Batch) -> Tensor:
    V = p.shape[-1]
    return tc.kl_divergence(p.reshape(-1, V), q.reshape(-1, V), batch.mask.reshape(-1))


def _sqdist(a: Tensor, b: np.ndarray) -> Tensor:
    d = a - Tensor(b)
    return tc.mean(tc.tsum(tc.mul(d, d), axis=-1))


def _require(episodes) -> None:
    if not len(episodes):
        raise ValueError("empty batch")


def retain_loss(model: TinyVlaPolicy, ref, episodes: Sequence[Episode], beta_kl: float = 0.5) -> Tensor:
    """CE on retain episodes plus beta * KL(p_ref || p_model)."""
    _require(episodes)
    batch = make_batch(episodes, model.cfg)
    logits = model.forward_batch(batch)["logits"]
    ce = _ce(logits, batch)
    if beta_kl == 0:
        return ce
    ref_logits = Tensor(_as_cache(ref).outputs(episodes, batch.targets.shape[1])["logits"])
    return ce + tc.mul(_kl(ref_logits, logits, batch), float(beta_kl))


def forget_loss(model: TinyVlaPolicy, episodes: Sequence[Episode]) -> Tensor:
    """Plain CE on forget episodes; the pipeline ascends it."""
    _require(episodes)
    return model.batch_loss(episodes)


def mismatch_loss(model: TinyVlaPolicy, ref, episodes: Sequence[Episode]) -> Tensor:
    """KL(p_model || p_ref) on forget episodes; the pipeline ascends it."""
    _require(episodes)
    batch = make_batch(episodes, model.cfg)
    logits = model.forward_batch(batch)["logits"]
    ref_logits = Tensor(_as_cache(ref).outputs(episodes, batch.targets.shape[1])["logits"])
    return _kl(logits, ref_logits, batch)


def _feat_drift(h_v: Tensor, h_p: Tensor, r: dict, gamma_feat: float, pool: str) -> Tensor:
    key = "" if pool == "mean" else "_cells"
    loss = _sqdist(h_v, r["h_v" + key])
    if gamma_feat:
        loss = loss + tc.mul(_sqdist(h_p, r["h_p" + key]), float(gamma_feat))
    return loss


def feat_loss(model: TinyVlaPolicy, ref, episodes: Sequence[Episode], gamma_feat: float = 1.0,
              pool: str = "mean") -> Tensor:
    """Mean squared drift of the vision and projector features, pooled over cells or per cell."""
    _require(episodes)
    if pool not in FEAT_POOLS:
        raise ValueError(f"pool must be one of {', '.join(FEAT_POOLS)}")
    batch = make_batch(episodes, model.cfg)
    tokens, h_v = model.encode_vision(batch.channels, pool=pool == "mean")
    _, h_p = model.project(tokens, pool=pool == "mean")
    return _feat_drift(h_v, h_p, _as_cache(ref).outputs(episodes), gamma_feat, pool)


# ---------------------------------------------------------------- pipeline state

def eval_subset(episodes: Sequence[Episode], cap: int) -> list[Episode]:
    return sorted(episodes, key=lambda e: e.index)[:cap]


@dataclass
class PipelineState:
    """Everything shared across stages of one run."""

    cache: RefCache
    batch_rng: np.random.Generator
    pc_rng: np.random.Generator
    eval_forget: list[Episode]
    eval_retain: list[Episode]
    base_forget_acc: float
    base_retain_acc: float
    adapters: AdapterSet = field(default_factory=AdapterSet)
    adapter_seed: int = 0

    @classmethod
    def create(cls, ref: FrozenReference | TinyVlaPolicy, splits: DataSplits, cfg: StageConfig) -> PipelineState:
        from .training import token_accuracy

        cache = _as_cache(ref)
        ef, er = eval_subset(splits.forget, cfg.eval_cap), eval_subset(splits.retain, cfg.eval_cap)
        return cls(cache, np.random.default_rng(cfg.seed), np.random.default_rng(cfg.seed + 1), ef, er,
                   token_accuracy(cache.policy, ef), token_accuracy(cache.policy, er), adapter_seed=cfg.seed * 1000)


def sample(rng: np.random.Generator, episodes: Sequence[Episode], size: int) -> list[Episode]:
    if not episodes:
        return []
    idx = rng.choice(len(episodes), size=min(size, len(episodes)), replace=False)
    return [episodes[i] for i in sorted(idx)]


def collect_grads(store: tc.ParamStore, paths: Sequence[str]) -> np.ndarray:
    """Flat gradient over ``paths`` with unreached parameters contributing zeros."""
    parts = []
    for p in paths:
        g = store[p].grad
        parts.append(np.zeros(store[p].size, dtype=np.float64) if g is None else g.reshape(-1).astype(np.float64))
    return np.concatenate(parts) if parts else np.zeros(0)


def apply_update(store: tc.ParamStore, adam: tc.AdamState, flat: np.ndarray, paths: Sequence[str], lr: float,
                 clip_norm: float = 0.0) -> None:
    for p, g in tc.scatter_flat(flat, store, paths).items():
        store[p].grad = g.astype(store[p].dtype)
    if clip_norm > 0:
        tc.clip_grad_norm(store, paths, clip_norm)
    tc.adam_step(store, adam, lr, paths)
    store.zero_grad()


def _finite(x: float, what: str, trace: list[dict]) -> float:
    if not np.isfinite(x):
        raise NonFiniteLossError(f"{what} became non-finite", trace)
    return x


def _stage_paths(model: TinyVlaPolicy, units: Iterable[str], cfg: StageConfig, stage: str) -> list[str]:
    paths = []
    for u in units:
        paths += model.unit_linear_paths(u)
    if stage == "reasoning" and cfg.include_action_rows:
        paths.append("lm.head.weight")
    return [p for p in paths if p not in model.adapters.adapters]


def _attach(model: TinyVlaPolicy, paths: list[str], cfg: StageConfig, state: PipelineState) -> AdapterSet:
    state.adapter_seed += 1
    ads = model.attach_lora(paths, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout, seed=state.adapter_seed)
    state.adapters.update(ads)
    return ads


# ---------------------------------------------------------------- stage loop

def _step_grads(model: TinyVlaPolicy, state: PipelineState, cfg: StageConfig, bf, br, bm, active: list[str]):
    """Three flat gradients (retain+feat, -forget, -mismatch) and the scalar losses."""
    P = model.params
    cache = state.cache
    # group 1: retain CE + KL anchor + feature distillation over retain and boundary
    b_r = make_batch(br, model.cfg)
    feat_eps = br + bm
    b_rm = make_batch(feat_eps, model.cfg)
    pooled = cfg.feat_pool == "mean"
    tokens, h_v = model.encode_vision(b_rm.channels, pool=pooled)
    projected, h_p = model.project(tokens, pool=pooled)
    logits_r = model.decode(projected[: len(br)], b_r.instr, b_r.prefix)
    ref_r = cache.outputs(br, b_r.targets.shape[1])
    ref_rm = cache.outputs(feat_eps)
    l_ce = _ce(logits_r, b_r)
    l_ret = l_ce + tc.mul(_kl(Tensor(ref_r["logits"]), logits_r, b_r), cfg.beta_kl) if cfg.beta_kl else l_ce
    l_feat = _feat_drift(h_v, h_p, ref_rm, cfg.gamma_feat, cfg.feat_pool)
    tc.backward(l_ret + tc.mul(l_feat, cfg.lambda_feat))
    g1 = collect_grads(P, active)
    P.zero_grad()
    # groups 2 and 3 share one forward on the forget batch
    b_f = make_batch(bf, model.cfg)
    logits_f = model.forward_batch(b_f)["logits"]
    l_f = _ce(logits_f, b_f)
    l_m = _kl(logits_f, Tensor(cache.outputs(bf, b_f.targets.shape[1])["logits"]), b_f)
    tc.backward(tc.mul(l_f, -cfg.lambda_f), retain_graph=True)
    g2 = collect_grads(P, active)
    P.zero_grad()
    tc.backward(tc.mul(l_m, -cfg.lambda_m))
    g3 = collect_grads(P, active)
    P.zero_grad()
    losses = {"l_retain": float(l_ret.data), "l_forget": float(l_f.data), "l_mismatch": float(l_m.data),
              "l_feat": float(l_feat.data)}
    return [g1, g2, g3], losses


def gamma_check(forget_acc: float, retain_acc: float, base_retain_acc: float, cfg: StageConfig) -> tuple[bool, bool]:
    return forget_acc <= cfg.forget_acc_max, retain_acc >= cfg.retain_ratio_min * base_retain_acc


def run_stage(model: TinyVlaPolicy, ref, splits: DataSplits, stage: str, cfg: StageConfig,
              state: PipelineState | None = None) -> StageReport:
    """One adapter stage: select units, attach adapters, run PCGrad-combined Adam steps."""
    from .training import token_accuracy

    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    cfg.validate()
    if state is None:
        state = PipelineState.create(ref, splits, cfg)
    P = model.params
    comp = STAGE_COMPONENT[stage]
    sel_f = sample(state.batch_rng, splits.forget, cfg.select_batch)
    sel_r = sample(state.batch_rng, splits.retain, cfg.select_batch)
    stats = layer_grad_stats(model, sel_f, sel_r, comp, cfg.alpha_ratio, cfg.eps)
    queue: list[str] = []
    if stage == "reasoning":
        selected, queue = llm_select(model, sel_f, sel_r, cfg.tau(stage), cfg.budget(stage), eps=cfg.eps, stats=stats)
    else:
        selected = vision_select(model, sel_f, sel_r, cfg.tau(stage), cfg.budget(stage), comp, stats=stats)
    if not selected:
        raise RuntimeError(f"stage {stage} selected no layers")
    ads = _attach(model, _stage_paths(model, selected, cfg, stage), cfg, state)
    active = ads.param_paths()
    P.set_trainable(active)
    adam = tc.AdamState()
    report = StageReport(stage, list(selected), stats)
    log.info("stage %s selected %s", stage, selected)
    T = cfg.steps(stage)
    model.training = True
    try:
        for step in range(1, T + 1):
            bf = sample(state.batch_rng, splits.forget, cfg.batch_forget)
            br = sample(state.batch_rng, splits.retain, cfg.batch_retain)
            bm = sample(state.batch_rng, splits.boundary, cfg.batch_boundary)
            try:
                grads, losses = _step_grads(model, state, cfg, bf, br, bm, active)
                g = pcgrad(grads, state.pc_rng)
                _finite(float(np.abs(g).sum()), "combined gradient", report.trace)
                apply_update(P, adam, g, active, cfg.lr, cfg.clip_norm)
            except tc.NonFiniteError as exc:
                if isinstance(exc, NonFiniteLossError):
                    raise
                raise NonFiniteLossError(f"stage {stage} step {step}: {exc}", report.trace) from exc
            row = {"step": step, **losses, "forget_acc": None, "retain_acc": None}
            report.steps_run = step
            if step % cfg.eval_every == 0 or step == T:
                model.training = False
                fa, ra = token_accuracy(model, state.eval_forget), token_accuracy(model, state.eval_retain)
                model.training = True
                row["forget_acc"], row["retain_acc"] = fa, ra
                report.trace.append(row)
                forget_ok, retain_ok = gamma_check(fa, ra, state.base_retain_acc, cfg)
                if stage == "reasoning" and not forget_ok and queue:
                    unit = queue.pop(0)
                    new = _attach(model, _stage_paths(model, [unit], cfg, stage), cfg, state)
                    active = sorted(set(active) | set(new.param_paths()))
                    P.set_trainable(active)
                    report.selected.append(unit)
                    report.expansions.append({"step": step, "layer": unit})
                    log.info("stage %s expanded with %s at step %d", stage, unit, step)
                if forget_ok and retain_ok:
                    report.early_stopped = True
                    break
            else:
                report.trace.append(row)
    finally:
        model.training = False
        P.set_trainable([])
    report.adapter_paths = sorted({p.rsplit(".lora_", 1)[0] for p in active})
    return report


# ---------------------------------------------------------------- end to end

def influence_triage(episodes: list[Episode], model: TinyVlaPolicy | None = None) -> list[Episode]:
    """Hook for pruning forget candidates by influence; currently returns them unchanged."""
    return episodes


@dataclass
class ForgetResult:
    model: TinyVlaPolicy
    adapters: AdapterSet
    stages: list[StageReport]
    method: str = "vla-forget"
    noop: bool = False
    audit: object | None = None

    def to_json(self) -> dict:
        return {"method": self.method, "noop": self.noop, "stages": [s.to_json() for s in self.stages],
                "adapters": sorted(self.adapters.adapters)}


def vla_forget(model: TinyVlaPolicy, splits: DataSplits, cfg: StageConfig = StageConfig(),
               stages: Iterable[str] = STAGES, ref: FrozenReference | None = None,
               auditor: Callable[[TinyVlaPolicy], object] | None = None) -> ForgetResult:
    """Run the requested stages in canonical order on ``model`` (edited in place through adapters)."""
    cfg.validate()
    wanted = set(stages)
    bad = wanted - set(STAGES)
    if bad:
        raise ValueError(f"unknown stages: {sorted(bad)}")
    ref = ref or FrozenReference(model)
    splits = DataSplits(influence_triage(list(splits.forget), model), splits.retain, splits.boundary, splits.mismatch_pairs)
    model.reseed_dropout(cfg.seed)
    state = PipelineState.create(ref, splits, cfg)
    reports = [run_stage(model, ref, splits, s, cfg, state) for s in STAGES if s in wanted]
    result = ForgetResult(model, state.adapters, reports, noop=not reports)
    if auditor is not None:
        result.audit = auditor(model)
    return result


def write_trace(reports: Sequence[StageReport], path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("stage",) + TRACE_FIELDS)
        for r in reports:
            for row in r.trace:
                w.writerow([r.stage] + ["" if row.get(k) is None else repr(row[k]) for k in TRACE_FIELDS])


def write_stage_json(result: ForgetResult, path: Path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), sort_keys=True, indent=1) + "\n")
