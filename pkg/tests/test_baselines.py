import dataclasses
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgelab.baselines import (
    BaselineConfig, ga_unlearn, npo_forget_term, npo_unlearn, run_baseline, saliency_mask, salun_unlearn,
    sequence_logprob, ssd_dampen, ssd_unlearn,
)
from forgelab.policy import FrozenReference, make_batch
from forgelab.tensorcore import Tensor
from forgelab.world import DataSplits

from toys import small_setup

FAST = dict(steps=4, batch_forget=4, batch_retain=4, eval_every=2, eval_cap=8, lr=1e-2, ssd_max_examples=16)


def cfg(method, **kw):
    return BaselineConfig(method=method, **{**FAST, **kw})


def logits(pol, eps):
    pol.training = False
    return pol.forward_batch(make_batch(eps, pol.cfg))["logits"].data.copy()


def weights(pol):
    return {p: pol.params[p].data.copy() for p in pol.base_paths()}


# ---------------------------------------------------------------- ga


def test_ga_zero_lr_is_identity():
    pol, sp = small_setup(0)
    before = logits(pol, sp.forget[:4])
    res = ga_unlearn(pol, sp, cfg("ga", lr=0.0))
    assert res.stages[0].steps_run == 4
    assert np.array_equal(logits(pol, sp.forget[:4]), before)


def test_ga_raises_forget_loss():
    pol, sp = small_setup(1)
    before = float(pol.batch_loss(sp.forget).data)
    ga_unlearn(pol, sp, cfg("ga", steps=6, lr=2e-2, lora_dropout=0.0))
    pol.training = False
    assert float(pol.batch_loss(sp.forget).data) > before


def test_ga_never_reads_retain(caplog):
    pol, sp = small_setup(2)
    with caplog.at_level(logging.INFO, logger="forgelab"):
        a = ga_unlearn(pol.clone(), sp, cfg("ga"))
    assert "retain access: none" in caplog.text
    shuffled = DataSplits(sp.forget, list(reversed(sp.retain))[:3], sp.boundary, sp.mismatch_pairs)
    b = ga_unlearn(pol.clone(), shuffled, cfg("ga"))
    assert np.array_equal(logits(a.model, sp.forget[:4]), logits(b.model, sp.forget[:4]))
    assert all(r["retain_acc"] is None for r in a.stages[0].trace)


# ---------------------------------------------------------------- npo


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0.01, 5.0), r=st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_npo_term_matches_scalar_formula(beta, r):
    r = np.array(r)
    got = float(npo_forget_term(Tensor(r), np.zeros_like(r), beta).data)
    expect = 2.0 / beta * np.mean(np.logaddexp(0.0, beta * r))
    assert got == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_npo_term_at_reference():
    lp = np.array([-3.0, -0.5, -10.0])
    for beta in (0.1, 1.0, 2.0):
        assert float(npo_forget_term(Tensor(lp), lp, beta).data) == pytest.approx(2 / beta * math.log(2))


def test_npo_small_beta_limit():
    """As beta shrinks, the term minus its constant tends to the mean log-ratio, as in plain ascent."""
    r = np.array([-2.0, 0.5, -1.0])
    beta = 1e-5
    got = float(npo_forget_term(Tensor(r), np.zeros(3), beta).data) - 2 / beta * math.log(2)
    assert got == pytest.approx(r.mean(), abs=1e-3)


def test_sequence_logprob_oracle():
    pol, sp = small_setup(3)
    pol.training = False
    b = make_batch(sp.forget[:3], pol.cfg)
    lg = pol.forward_batch(b)["logits"].data.astype(np.float64)
    got = sequence_logprob(Tensor(lg), b.targets, b.mask).data
    for i in range(3):
        total = 0.0
        for t in np.nonzero(b.mask[i])[0]:
            row = lg[i, t]
            total += row[b.targets[i, t]] - np.log(np.exp(row - row.max()).sum()) - row.max()
        assert got[i] == pytest.approx(total, abs=1e-9)


def test_npo_runs_and_is_deterministic():
    outs = []
    for _ in range(2):
        pol, sp = small_setup(4)
        res = npo_unlearn(pol, FrozenReference(pol), sp, cfg("npo"))
        outs.append(logits(res.model, sp.forget[:4]))
        assert res.stages[0].trace[-1]["retain_acc"] is not None
    assert np.array_equal(*outs)


# ---------------------------------------------------------------- ssd


def test_ssd_dampen_examples():
    w = np.array([2.0, -4.0, 1.0], dtype=np.float32)
    imp_r = np.array([1.0, 2.0, 0.0])
    out = ssd_dampen(w, 10 * imp_r, imp_r, lam=1.0, floor=0.1)
    np.testing.assert_allclose(out[:2], w[:2] * 0.01, rtol=1e-6)
    assert out[2] == w[2]  # 0 > 0 fails: untouched
    assert out.dtype == w.dtype
    assert np.array_equal(ssd_dampen(w, imp_r, imp_r, 1.0, 0.1), w)
    # floor large enough that the factor saturates at 1
    assert np.array_equal(ssd_dampen(w, 2 * imp_r, imp_r, 1.0, 5.0), w)


def test_ssd_symmetric_sets_leave_model_unchanged():
    pol, sp = small_setup(5)
    same = DataSplits(sp.retain, sp.retain, sp.boundary, sp.mismatch_pairs)
    before = weights(pol)
    res = ssd_unlearn(pol, same, cfg("ssd", ssd_max_examples=len(sp.retain)))
    assert res.stages[0].selected == []
    assert all(np.array_equal(pol.params[p].data, v) for p, v in before.items())


def test_ssd_changes_something_and_needs_both_sets():
    pol, sp = small_setup(6)
    before = weights(pol)
    res = ssd_unlearn(pol, sp, cfg("ssd"))
    touched = res.stages[0].selected
    assert touched
    for p, v in before.items():
        assert np.array_equal(pol.params[p].data, v) == (p not in touched)
        assert np.all(np.abs(pol.params[p].data) <= np.abs(v))
    with pytest.raises(ValueError):
        ssd_unlearn(pol, DataSplits(sp.forget, [], [], []), cfg("ssd"))


# ---------------------------------------------------------------- salun


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.01, 1.0))
def test_saliency_mask_matches_full_sort(seed, frac):
    rng = np.random.default_rng(seed)
    grads = {"b": rng.standard_normal((3, 2)).round(1), "a": rng.standard_normal(5).round(1)}
    mask = saliency_mask(grads, frac)
    entries = [(abs(v), p, i) for p in sorted(grads) for i, v in enumerate(grads[p].ravel())]
    order = sorted(range(len(entries)), key=lambda j: (-entries[j][0], j))
    k = max(1, math.ceil(frac * len(entries)))
    keep = {(entries[j][1], entries[j][2]) for j in order[:k]}
    got = {(p, i) for p in grads for i, v in enumerate(mask[p].ravel()) if v}
    assert got == keep


def test_salun_masked_weights_untouched():
    pol, sp = small_setup(7)
    before = weights(pol)
    res = salun_unlearn(pol, sp, cfg("salun", salun_top_fraction=0.05))
    changed = 0
    total = 0
    for p, v in before.items():
        diff = pol.params[p].data != v
        changed += int(diff.sum())
        total += v.size
    assert 0 < changed <= math.ceil(0.05 * total)
    assert res.adapters.adapters == {}


def test_salun_full_fraction_touches_everything_reached():
    pol, sp = small_setup(8)
    res = salun_unlearn(pol, sp, cfg("salun", salun_top_fraction=1.0))
    assert res.stages[0].adapter_paths == []
    assert sorted(res.stages[0].selected) == sorted(pol.base_paths())


# ---------------------------------------------------------------- shared


@pytest.mark.parametrize("method", ["ga", "npo", "ssd", "salun"])
def test_every_baseline_is_deterministic(method):
    outs = []
    for _ in range(2):
        pol, sp = small_setup(9)
        res = run_baseline(pol, FrozenReference(pol), sp, cfg(method))
        res.model.training = False
        outs.append((logits(res.model, sp.forget[:4]), res.to_json()))
    assert np.array_equal(outs[0][0], outs[1][0]) and outs[0][1] == outs[1][1]


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(method="sgd").validate()
    with pytest.raises(ValueError):
        BaselineConfig(salun_top_fraction=0.0).validate()
    with pytest.raises(ValueError):
        BaselineConfig(npo_beta=0.0).validate()
    assert BaselineConfig(method="ga").effective_retain_weight == 0.0
    assert BaselineConfig(method="npo").effective_retain_weight == 1.0
    c = dataclasses.replace(BaselineConfig(), lr=1e-3)
    assert BaselineConfig.from_json(c.to_json()) == c
