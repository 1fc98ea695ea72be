"""End-to-end orchestration shared by the command line and the experiment sweeps."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Sequence

from .audit import PRECISIONS, AuditReport, SplitScores, audit_model, merged_copy, rollout_metrics
from .baselines import METHODS as BASELINE_METHODS
from .baselines import run_baseline
from .config import RunConfig
from .policy import FrozenReference, TinyVlaPolicy
from .training import AccuracyGateError, token_accuracy, train_base
from .unlearn import STAGES, ForgetResult, vla_forget
from .world import DataSplits, Episode, assign_splits, build_splits, filter_split, gen_episodes

log = logging.getLogger(__name__)

METHODS = ("vla-forget",) + BASELINE_METHODS


@dataclass
class Corpus:
    episodes: list[Episode]
    train: list[Episode]
    splits: DataSplits

    def eval_sets(self) -> tuple[list[Episode], list[Episode]]:
        """Retain episodes for task success and forget-slice probes for violations."""
        return list(self.splits.retain), list(self.splits.forget)


def make_corpus(cfg: RunConfig, episodes: list[Episode] | None = None) -> Corpus:
    if episodes is None:
        episodes = gen_episodes(cfg.seed, cfg.run.count, cfg.world, cfg.run.forget_color)
        assign_splits(episodes, cfg.seed)
    train = filter_split(episodes, "train")
    return Corpus(episodes, train, build_splits(train, cfg.request()))


def fit_base(cfg: RunConfig, corpus: Corpus, progress=None) -> tuple[TinyVlaPolicy, dict]:
    """Train a fresh base policy and enforce the accuracy gate on both splits."""
    tcfg = cfg.train_config()
    policy = TinyVlaPolicy(cfg.policy_config(), seed=cfg.seed)
    history = train_base(policy, corpus.train, tcfg, progress)
    acc = {"forget": token_accuracy(policy, corpus.splits.forget), "retain": token_accuracy(policy, corpus.splits.retain)}
    info = {"history": history, "accuracy": acc}
    worst = min(acc.values())
    if worst < tcfg.gate:
        raise AccuracyGateError(f"base token accuracy {worst:.4f} is below the gate {tcfg.gate}")
    return policy, info


def unlearn(base: TinyVlaPolicy, corpus: Corpus, cfg: RunConfig, method: str,
            stages: Sequence[str] = STAGES) -> ForgetResult:
    """Run ``method`` on a copy of ``base``; the base itself is left untouched."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    model = base.clone()
    ref = FrozenReference(base)
    if method == "vla-forget":
        return vla_forget(model, corpus.splits, cfg.stage_config(), stages=stages, ref=ref)
    return run_baseline(model, ref, corpus.splits, cfg.baseline_config(method))


def evaluate(base: TinyVlaPolicy, model: TinyVlaPolicy, corpus: Corpus, cfg: RunConfig, method: str,
             precisions: Sequence[str] = PRECISIONS, rollouts: bool = True,
             base_scores: SplitScores | None = None, base_rollout=None) -> AuditReport:
    eval_eps, probe_eps = corpus.eval_sets()
    return audit_model(base, model, corpus.splits, method, cfg.seed, cfg.config_hash(), eval_eps, probe_eps,
                       precisions=precisions, max_steps=cfg.run.rollout_steps, request=cfg.request(),
                       base_scores=base_scores, base_rollout=base_rollout, rollouts=rollouts)


def base_reference(base: TinyVlaPolicy, corpus: Corpus, cfg: RunConfig, rollouts: bool = True):
    """Base-model scores reused across several audits of the same seed."""
    scores = SplitScores.measure(base, corpus.splits)
    roll = None
    if rollouts:
        eval_eps, probe_eps = corpus.eval_sets()
        roll = rollout_metrics(base, eval_eps, probe_eps, cfg.run.rollout_steps, cfg.request())
    return scores, roll


@dataclass
class SeedRun:
    seed: int
    base_info: dict
    reports: dict[str, AuditReport]


def run_seed(cfg: RunConfig, methods: Sequence[str] = METHODS, ablations: Sequence[str] = (),
             precisions: Sequence[str] = PRECISIONS, rollouts: bool = True) -> SeedRun:
    """Base training plus every requested method (and single-stage ablation) for one seed.

    Ablation reports are keyed ``vla-forget[<stage>]``.
    """
    corpus = make_corpus(cfg)
    base, info = fit_base(cfg, corpus)
    scores, roll = base_reference(base, corpus, cfg, rollouts)
    reports = {}
    jobs = [(m, STAGES) for m in methods] + [(f"vla-forget[{s}]", (s,)) for s in ablations]
    for name, stages in jobs:
        method = "vla-forget" if name.startswith("vla-forget") else name
        res = unlearn(base, corpus, cfg, method, stages)
        log.info("seed %d %s done", cfg.seed, name)
        rep = evaluate(base, merged_copy(res.model), corpus, cfg, name, precisions, rollouts, scores, roll)
        reports[name] = rep
    return SeedRun(cfg.seed, info, reports)


def with_overrides(cfg: RunConfig, section: str, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **kw)})
