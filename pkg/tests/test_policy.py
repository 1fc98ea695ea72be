import numpy as np
import pytest

from forgelab import tensorcore as tc
from forgelab.policy import (
    CorruptHeaderError, FrozenReference, PolicyConfig, ShapeMismatchError, TinyVlaPolicy, TruncatedPayloadError,
    UnsupportedVersionError, load_adapters, load_checkpoint, make_batch, save_adapters, save_checkpoint,
)
from forgelab.world import BOS, EOS, GRASP, PAD, STOP, GridObject, GridScene, Instruction, gen_episodes

SMALL = PolicyConfig(grid_n=4, d_model=16, n_heads=2, vision_blocks=2, lm_blocks=2, mlp_ratio=2)


def small_policy(seed=0):
    return TinyVlaPolicy(SMALL, seed=seed)


def episodes(n=4, seed=0, cfg=SMALL):
    return gen_episodes(seed, n, cfg.world)


def logits_of(pol, eps):
    return pol.forward_batch(make_batch(eps, pol.cfg))["logits"].data.copy()


def perturb_adapters(pol, adapters, seed):
    rng = np.random.default_rng(seed)
    for ad in adapters:
        ad.B.data = (rng.standard_normal(ad.B.shape) * 0.1).astype(ad.B.dtype)


# ---------------------------------------------------------------- config and structure


def test_config_invariants():
    with pytest.raises(ValueError):
        PolicyConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        PolicyConfig(action_vocab=6)
    with pytest.raises(ValueError):
        PolicyConfig(grid_n=2)


def test_component_partition():
    pol = small_policy()
    P = pol.params
    parts = [set(P.paths(c)) for c in "VPL"]
    assert sum(map(len, parts)) == len(P.paths())
    assert not (parts[0] & parts[1]) and not (parts[1] & parts[2]) and not (parts[0] & parts[2])


def test_linear_paths_exclude_tables():
    pol = small_policy()
    lin = pol.linear_paths()
    assert "lm.instr_embed" not in lin and "lm.action_embed" not in lin and "lm.pos" not in lin
    assert all(pol.params[p].data.ndim == 2 for p in lin)
    assert "lm.head.weight" in lin and "vision.embed.weight" in lin


# ---------------------------------------------------------------- forward


def test_empty_scene_vision_is_finite():
    pol = small_policy(3)
    x = np.zeros((SMALL.n_cells, SMALL.n_channels), dtype=np.float32)
    tokens, h_v = pol.encode_vision(x)
    assert tokens.shape == (SMALL.n_cells, SMALL.d_model)
    assert np.all(np.isfinite(tokens.data)) and np.linalg.norm(h_v.data) > 0
    _, h_v2 = pol.encode_vision(x)
    assert np.array_equal(h_v.data, h_v2.data)


def test_vision_channel_mismatch():
    pol = small_policy()
    with pytest.raises(tc.DimensionError):
        pol.encode_vision(np.zeros((SMALL.n_cells, SMALL.n_channels + 1), dtype=np.float32))


def test_project_zero_input_is_bias_path():
    pol = small_policy()
    x = tc.Tensor(np.zeros((5, SMALL.d_model), dtype=np.float32))
    out, h_p = pol.project(x)
    assert out.shape == (5, SMALL.d_model)
    P = pol.params
    hidden = tc.gelu(tc.Tensor(P["proj.fc1.bias"].data[None])).data
    expect = hidden @ P["proj.fc2.weight"].data.T + P["proj.fc2.bias"].data
    np.testing.assert_allclose(out.data, np.repeat(expect, 5, 0), rtol=1e-6, atol=1e-7)


def test_forward_logits_rows_and_normalization():
    pol = small_policy(1)
    ep = episodes(1)[0]
    instr = ep.instruction.tokens(SMALL.world)
    assert pol.forward_logits(ep.scene, instr).shape == (1, SMALL.action_vocab)
    lg = pol.forward_logits(ep.scene, instr, [0, 3, 1])
    assert lg.shape == (4, SMALL.action_vocab)
    np.testing.assert_allclose(tc.softmax_np(lg.data.astype(np.float64)).sum(-1), 1.0, atol=1e-6)


def test_causality_exact():
    pol = small_policy(2)
    ep = episodes(1)[0]
    instr = ep.instruction.tokens(SMALL.world)
    a = pol.forward_logits(ep.scene, instr, [0, 1, 2, 3]).data
    b = pol.forward_logits(ep.scene, instr, [0, 1, 3, 3]).data
    # changing token at prefix slot 2 may only affect rows after it
    assert np.array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_prefix_too_long():
    pol = small_policy()
    ep = episodes(1)[0]
    with pytest.raises(ValueError, match="context"):
        pol.forward_logits(ep.scene, ep.instruction.tokens(SMALL.world), [0] * (SMALL.max_action_len + 1))


def test_generate_contract():
    pol = small_policy(4)
    ep = episodes(1)[0]
    one = pol.generate(ep.scene, ep.instruction, max_len=1)
    assert len(one) == 1
    a = pol.generate(ep.scene, ep.instruction, max_len=10)
    assert a == pol.generate(ep.scene, ep.instruction, max_len=10)
    assert len(a) <= 10
    assert all(t not in (EOS, STOP) for t in a[:-1])


def test_batch_layout():
    eps = episodes(3)
    b = make_batch(eps, SMALL)
    for i, ep in enumerate(eps):
        n = len(ep.expert_tokens)
        assert list(b.targets[i, : n - 1]) == ep.expert_tokens[1:]
        assert np.all(b.targets[i, n - 1 :] == PAD)
    assert b.mask.sum() == sum(len(e.expert_tokens) - 1 for e in eps)
    with pytest.raises(ValueError):
        make_batch([], SMALL)


# ---------------------------------------------------------------- adapters


@pytest.mark.parametrize("seed", range(5))
def test_attach_is_bit_exact_noop(seed):
    pol = small_policy(seed)
    eps = episodes(3, seed)
    before = logits_of(pol, eps)
    rng = np.random.default_rng(seed)
    lin = pol.linear_paths()
    paths = list(rng.choice(lin, size=4, replace=False))
    pol.attach_lora(paths, rank=2, alpha=2.0, seed=seed)
    assert np.array_equal(before, logits_of(pol, eps))


def test_merge_matches_adapter_and_detach_restores():
    pol = small_policy(7)
    eps = episodes(3, 7)
    base = logits_of(pol, eps)
    ads = pol.attach_lora(pol.linear_paths("L")[:3] + ["proj.fc1.weight"], rank=2, alpha=4.0, dropout_p=0.3, seed=1)
    perturb_adapters(pol, ads, 2)
    pol.training = False
    with_ad = logits_of(pol, eps)
    assert not np.array_equal(with_ad, base)
    pol.merge_lora(ads)
    assert np.max(np.abs(logits_of(pol, eps) - with_ad)) <= 1e-5
    pol.detach_lora(ads)
    assert np.array_equal(logits_of(pol, eps), base)


def test_adapter_dropout_only_in_training():
    pol = small_policy(8)
    eps = episodes(2, 8)
    ads = pol.attach_lora(pol.linear_paths("L")[:2], rank=2, alpha=2.0, dropout_p=0.5, seed=0)
    perturb_adapters(pol, ads, 0)
    pol.training = False
    assert np.array_equal(logits_of(pol, eps), logits_of(pol, eps))
    pol.training = True
    pol.reseed_dropout(0)
    a = logits_of(pol, eps)
    b = logits_of(pol, eps)
    assert not np.array_equal(a, b)


def test_attach_errors():
    pol = small_policy()
    with pytest.raises(KeyError):
        pol.attach_lora(["nope.weight"])
    with pytest.raises(ValueError):
        pol.attach_lora(["lm.head.bias"])
    pol.attach_lora(["lm.head.weight"])
    with pytest.raises(ValueError):
        pol.attach_lora(["lm.head.weight"])


def test_lora_init_statistics():
    pol = TinyVlaPolicy(PolicyConfig(), seed=0)
    ads = pol.attach_lora(pol.linear_paths("L"), rank=4, alpha=4.0, seed=3)
    A = np.concatenate([a.A.data.ravel() for a in ads])
    assert all(np.all(a.B.data == 0) for a in ads)
    assert abs(A.std() - 0.02) < 0.002 and abs(A.mean()) < 0.002


def test_frozen_reference_is_readonly():
    pol = small_policy()
    ref = FrozenReference(pol)
    with pytest.raises(ValueError):
        ref.policy.params["lm.head.weight"].data[0, 0] = 1.0
    pol.params["lm.head.weight"].data[0, 0] += 1.0
    ref.verify()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    pol = small_policy(5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(pol.params, path, pol.cfg, seed=5, extra={"x": 1})
    back, header = load_checkpoint(path)
    assert header["seed"] == 5 and header["extra"] == {"x": 1}
    assert back.param_hash() == pol.param_hash()
    for p in pol.params.paths():
        assert np.array_equal(back.params[p].data, pol.params[p].data)
        assert back.params.tag(p) == pol.params.tag(p)
    save_checkpoint(pol.params, tmp_path / "m2.ckpt", pol.cfg, seed=5, extra={"x": 1})
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    pol = small_policy()
    path = tmp_path / "m.ckpt"
    save_checkpoint(pol.params, path, pol.cfg)
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-7])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptHeaderError):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:4] + (99).to_bytes(2, "little") + raw[6:])
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(tmp_path / "ver")
    other = TinyVlaPolicy(PolicyConfig(grid_n=4, d_model=16, n_heads=2, vision_blocks=1, lm_blocks=2, mlp_ratio=2))
    save_checkpoint(other.params, tmp_path / "shape", SMALL)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "shape")


def test_adapter_bundle_roundtrip(tmp_path):
    pol = small_policy(9)
    eps = episodes(2, 9)
    ads = pol.attach_lora(pol.linear_paths("P"), rank=2, alpha=2.0, seed=0)
    perturb_adapters(pol, ads, 1)
    pol.training = False
    want = logits_of(pol, eps)
    save_adapters(pol, ads, tmp_path / "a.ckpt")
    fresh = small_policy(9)
    load_adapters(fresh, tmp_path / "a.ckpt")
    fresh.training = False
    assert np.array_equal(logits_of(fresh, eps), want)


def test_trained_policy_reproduces_expert():
    """A briefly trained tiny policy decodes the expert sequence on a memorized episode."""
    from forgelab.training import TrainConfig, train_base

    cfg = PolicyConfig(grid_n=3, d_model=32, n_heads=2, vision_blocks=1, lm_blocks=2, mlp_ratio=2)
    sc = GridScene(3, (GridObject("red", "cube", (0, 2)), GridObject("blue", "ball", (2, 0))), (1, 1))
    from forgelab.world import make_episode

    eps = [make_episode(0, sc, sc.objects[0], cfg.world), make_episode(1, sc, sc.objects[1], cfg.world)]
    pol = TinyVlaPolicy(cfg, seed=0)
    train_base(pol, eps, TrainConfig(epochs=150, lr=3e-3, batch_size=2))
    for ep in eps:
        assert [BOS] + pol.generate(ep.scene, ep.instruction, 8) == ep.expert_tokens
    assert GRASP in ep.expert_tokens
