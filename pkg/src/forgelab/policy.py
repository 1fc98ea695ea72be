"""Tiny vision-language-action policy: vision encoder -> MLP projector -> causal action decoder."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import ParamStore, ParamTag, Tensor
from .world import BOS, EOS, INSTR_LEN, PAD, STOP, Episode, GridScene, Instruction, WorldConfig, scene_channels

CKPT_MAGIC = b"TVLA"
CKPT_VERSION = 1
LINEAR_NAMES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.fc1", "mlp.fc2")


@dataclass(frozen=True)
class PolicyConfig:
    grid_n: int = 7
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow")
    shapes: tuple[str, ...] = ("cube", "ball")
    d_model: int = 64
    n_heads: int = 4
    vision_blocks: int = 2
    lm_blocks: int = 4
    mlp_ratio: int = 4
    action_vocab: int = 9
    max_action_len: int = 24
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.action_vocab < 7:
            raise ValueError("action_vocab must be at least 7")
        if self.grid_n < 3:
            raise ValueError("grid_n must be at least 3")

    @property
    def world(self) -> WorldConfig:
        return WorldConfig(grid_n=self.grid_n, colors=tuple(self.colors), shapes=tuple(self.shapes),
                           max_action_len=self.max_action_len)

    @property
    def instr_vocab(self) -> int:
        return len(self.world.instr_vocab)

    @property
    def n_channels(self) -> int:
        return self.world.n_channels

    @property
    def n_cells(self) -> int:
        return self.grid_n * self.grid_n

    @property
    def context(self) -> int:
        return self.n_cells + INSTR_LEN + self.max_action_len + 1

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_json(self) -> dict:
        d = asdict(self)
        d["colors"] = list(self.colors)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> PolicyConfig:
        d = dict(d)
        d["colors"] = tuple(d["colors"])
        d["shapes"] = tuple(d["shapes"])
        return cls(**d)


@dataclass
class LoraAdapter:
    target_path: str
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    rank: int
    alpha: float
    dropout_p: float = 0.0
    merged: bool = False
    _saved_weight: np.ndarray | None = None

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def paths(self) -> tuple[str, str]:
        return self.target_path + ".lora_A", self.target_path + ".lora_B"

    def delta(self) -> np.ndarray:
        return (self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64)))


@dataclass
class AdapterSet:
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.values())

    def param_paths(self) -> list[str]:
        return sorted(p for a in self.adapters.values() for p in a.paths)

    def update(self, other: AdapterSet) -> None:
        self.adapters.update(other.adapters)

    def nonzero_targets(self) -> list[str]:
        return sorted(t for t, a in self.adapters.items() if np.any(a.B.data != 0))


@dataclass
class Batch:
    channels: np.ndarray  # (B, cells, C)
    instr: np.ndarray  # (B, INSTR_LEN)
    prefix: np.ndarray  # (B, L) padded with PAD
    targets: np.ndarray  # (B, L + 1) padded with PAD (ignored)

    def __len__(self) -> int:
        return self.channels.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.targets != PAD


def make_batch(episodes: Sequence[Episode], cfg: PolicyConfig) -> Batch:
    if not episodes:
        raise ValueError("cannot build a batch from zero episodes")
    wcfg = cfg.world
    L = max(len(ep.expert_tokens) for ep in episodes) - 2
    B = len(episodes)
    prefix = np.full((B, L), PAD, dtype=np.int64)
    targets = np.full((B, L + 1), PAD, dtype=np.int64)
    chans = np.stack([scene_channels(ep.scene, wcfg) for ep in episodes]).astype(cfg.np_dtype)
    instr = np.array([ep.instruction.tokens(wcfg) for ep in episodes], dtype=np.int64)
    for i, ep in enumerate(episodes):
        toks = ep.expert_tokens
        prefix[i, : len(toks) - 2] = toks[1:-1]
        targets[i, : len(toks) - 1] = toks[1:]
    return Batch(chans, instr, prefix, targets)


class TinyVlaPolicy:
    def __init__(self, cfg: PolicyConfig = PolicyConfig(), seed: int = 0, init: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.params = ParamStore()
        self.adapters = AdapterSet()
        self.training = False
        self._dropout_rng = np.random.default_rng(seed + 1)
        if init:
            self._init_params(np.random.default_rng(seed))
        mask = np.triu(np.full((cfg.context, cfg.context), -1e9, dtype=cfg.np_dtype), k=1)
        self._causal = mask

    def reseed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng(seed + 1)

    # ------------------------------------------------------------ parameters
    def _init_params(self, rng: np.random.Generator) -> None:
        cfg, d = self.cfg, self.cfg.d_model
        dt = cfg.np_dtype

        def w(shape, std):
            return (rng.standard_normal(shape) * std).astype(dt)

        def add(path, value, comp, layer=None, unit=None):
            self.params.add(path, Tensor(value), ParamTag(comp, layer, unit))

        def block(prefix, comp, layer):
            unit = prefix
            hid = cfg.mlp_ratio * d
            add(f"{prefix}.ln1.weight", np.ones(d, dt), comp, layer, unit)
            add(f"{prefix}.ln1.bias", np.zeros(d, dt), comp, layer, unit)
            for name in ("wq", "wk", "wv", "wo"):
                add(f"{prefix}.attn.{name}", w((d, d), d**-0.5), comp, layer, unit)
            add(f"{prefix}.ln2.weight", np.ones(d, dt), comp, layer, unit)
            add(f"{prefix}.ln2.bias", np.zeros(d, dt), comp, layer, unit)
            add(f"{prefix}.mlp.fc1.weight", w((hid, d), d**-0.5), comp, layer, unit)
            add(f"{prefix}.mlp.fc1.bias", np.zeros(hid, dt), comp, layer, unit)
            add(f"{prefix}.mlp.fc2.weight", w((d, hid), hid**-0.5 * 0.5), comp, layer, unit)
            add(f"{prefix}.mlp.fc2.bias", np.zeros(d, dt), comp, layer, unit)

        add("vision.embed.weight", w((d, cfg.n_channels), 1.0), "V")
        add("vision.embed.bias", np.zeros(d, dt), "V")
        add("vision.pos", w((cfg.n_cells, d), 0.1), "V")
        for i in range(cfg.vision_blocks):
            block(f"vision.block{i}", "V", i)
        add("vision.ln_f.weight", np.ones(d, dt), "V")
        add("vision.ln_f.bias", np.zeros(d, dt), "V")

        add("proj.fc1.weight", w((d, d), d**-0.5), "P", 0, "proj.fc1")
        add("proj.fc1.bias", np.zeros(d, dt), "P", 0, "proj.fc1")
        add("proj.fc2.weight", w((d, d), d**-0.5), "P", 1, "proj.fc2")
        add("proj.fc2.bias", np.zeros(d, dt), "P", 1, "proj.fc2")

        add("lm.instr_embed", w((cfg.instr_vocab, d), 0.1), "L")
        add("lm.action_embed", w((cfg.action_vocab, d), 0.1), "L")
        add("lm.pos", w((cfg.context, d), 0.1), "L")
        for i in range(cfg.lm_blocks):
            block(f"lm.block{i}", "L", i)
        add("lm.ln_f.weight", np.ones(d, dt), "L")
        add("lm.ln_f.bias", np.zeros(d, dt), "L")
        add("lm.head.weight", w((cfg.action_vocab, d), d**-0.5), "L")
        add("lm.head.bias", np.zeros(cfg.action_vocab, dt), "L")

    def linear_paths(self, component: str | None = None) -> list[str]:
        """All 2-D projection weights (embedding tables and positional tables excluded)."""
        out = []
        for p in self.params.paths(component):
            if p.endswith((".lora_A", ".lora_B")):
                continue
            t = self.params[p]
            if t.data.ndim == 2 and (".attn." in p or p.endswith(".weight")):
                out.append(p)
        return out

    def unit_linear_paths(self, unit: str) -> list[str]:
        if unit.startswith("proj."):
            return [unit + ".weight"]
        return [f"{unit}.{name}" + ("" if name.startswith("attn") else ".weight") for name in LINEAR_NAMES]

    # ------------------------------------------------------------ building blocks
    def _lin(self, x: Tensor, wpath: str, bias: bool = True) -> Tensor:
        P = self.params
        bpath = wpath[: -len(".weight")] + ".bias" if wpath.endswith(".weight") else None
        b = P[bpath] if bias and bpath and bpath in P else None
        y = tc.linear(x, P[wpath], b)
        ad = self.adapters.adapters.get(wpath)
        if ad is not None and not ad.merged:
            xa = x
            if self.training and ad.dropout_p > 0:
                keep = (self._dropout_rng.random(x.shape) >= ad.dropout_p).astype(x.dtype) / (1.0 - ad.dropout_p)
                xa = tc.mul(x, Tensor(keep))
            y = y + tc.mul(tc.linear(tc.linear(xa, ad.A), ad.B), ad.scale)
        return y

    def _block(self, x: Tensor, prefix: str, mask: np.ndarray | None) -> Tensor:
        P, cfg = self.params, self.cfg
        B, T, d = x.shape
        H = cfg.n_heads
        dh = d // H
        h = tc.layer_norm(x, P[f"{prefix}.ln1.weight"], P[f"{prefix}.ln1.bias"])
        q = self._lin(h, f"{prefix}.attn.wq").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = self._lin(h, f"{prefix}.attn.wk").reshape(B, T, H, dh).transpose(0, 2, 3, 1)
        v = self._lin(h, f"{prefix}.attn.wv").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = tc.mul(tc.matmul(q, k), dh**-0.5)
        if mask is not None:
            scores = scores + Tensor(mask[:T, :T])
        att = tc.softmax(scores, axis=-1)
        ctx = tc.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, d)
        x = x + self._lin(ctx, f"{prefix}.attn.wo")
        h = tc.layer_norm(x, P[f"{prefix}.ln2.weight"], P[f"{prefix}.ln2.bias"])
        h = tc.gelu(self._lin(h, f"{prefix}.mlp.fc1.weight"))
        return x + self._lin(h, f"{prefix}.mlp.fc2.weight")

    # ------------------------------------------------------------ forward
    def encode_vision(self, channels, pool: bool = True) -> tuple[Tensor, Tensor]:
        """Per-cell vision tokens and h^V from the last vision block (mean over cells unless ``pool`` is off)."""
        cfg, P = self.cfg, self.params
        x = np.asarray(channels, dtype=cfg.np_dtype)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (cfg.n_cells, cfg.n_channels):
            raise tc.DimensionError(f"scene channels {x.shape[1:]} do not match ({cfg.n_cells}, {cfg.n_channels})")
        h = self._lin(Tensor(x), "vision.embed.weight") + P["vision.pos"]
        for i in range(cfg.vision_blocks):
            h = self._block(h, f"vision.block{i}", None)
        h_v = tc.mean(h, axis=1) if pool else h
        tokens = tc.layer_norm(h, P["vision.ln_f.weight"], P["vision.ln_f.bias"])
        if single:
            return tokens[0], h_v[0]
        return tokens, h_v

    def project(self, vision_tokens: Tensor, pool: bool = True) -> tuple[Tensor, Tensor]:
        """Two-layer MLP projector; returns projected tokens and h^P (token mean unless ``pool`` is off)."""
        h = tc.gelu(self._lin(vision_tokens, "proj.fc1.weight"))
        out = self._lin(h, "proj.fc2.weight")
        return out, (tc.mean(out, axis=-2) if pool else out)

    def decode(self, projected: Tensor, instr: np.ndarray, prefix: np.ndarray) -> Tensor:
        """Causal decoder over [vision][instruction][BOS, prefix]; logits for each action slot."""
        cfg, P = self.cfg, self.params
        B = projected.shape[0]
        instr = np.asarray(instr, dtype=np.int64)
        prefix = np.asarray(prefix, dtype=np.int64).reshape(B, -1)
        La = prefix.shape[1]
        if La > cfg.max_action_len:
            raise ValueError(f"action prefix of length {La} exceeds the context limit {cfg.max_action_len}")
        if instr.min() < 0 or instr.max() >= cfg.instr_vocab:
            raise ValueError("instruction token out of vocabulary")
        if La and (prefix.min() < 0 or prefix.max() >= cfg.action_vocab):
            raise ValueError("action token out of vocabulary")
        acts = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), prefix], axis=1)
        seq = tc.concat([projected, tc.embedding(P["lm.instr_embed"], instr), tc.embedding(P["lm.action_embed"], acts)], axis=1)
        T = seq.shape[1]
        x = seq + P["lm.pos"][:T]
        for i in range(cfg.lm_blocks):
            x = self._block(x, f"lm.block{i}", self._causal)
        start = cfg.n_cells + instr.shape[1]
        x = x[:, start:]
        x = tc.layer_norm(x, P["lm.ln_f.weight"], P["lm.ln_f.bias"])
        return self._lin(x, "lm.head.weight")

    def forward_batch(self, batch: Batch) -> dict[str, Tensor]:
        tokens, h_cells = self.encode_vision(batch.channels, pool=False)
        projected, _ = self.project(tokens, pool=False)
        logits = self.decode(projected, batch.instr, batch.prefix)
        return {"logits": logits, "h_v": tc.mean(h_cells, axis=1), "h_p": tc.mean(projected, axis=-2),
                "h_v_cells": h_cells, "h_p_cells": projected}

    def batch_loss(self, episodes: Sequence[Episode]) -> Tensor:
        """Teacher-forced token CE over a list of episodes."""
        if not episodes:
            raise ValueError("empty batch")
        b = make_batch(episodes, self.cfg)
        return tc.cross_entropy_logits(self.forward_batch(b)["logits"], b.targets, PAD)

    def forward_logits(self, scene: GridScene | np.ndarray, instruction_tokens, action_prefix_tokens=()) -> Tensor:
        chans = scene_channels(scene, self.cfg.world) if isinstance(scene, GridScene) else scene
        tokens, _ = self.encode_vision(np.asarray(chans)[None])
        projected, _ = self.project(tokens)
        instr = np.asarray(instruction_tokens, dtype=np.int64)[None]
        prefix = np.asarray(list(action_prefix_tokens), dtype=np.int64)[None]
        return self.decode(projected, instr, prefix)[0]

    # ------------------------------------------------------------ generation
    def generate_batch(self, scenes: Sequence[GridScene], instructions: Sequence[Instruction], max_len: int) -> list[list[int]]:
        if max_len > self.cfg.max_action_len:
            raise ValueError(f"max_len {max_len} exceeds max_action_len {self.cfg.max_action_len}")
        wcfg = self.cfg.world
        chans = np.stack([scene_channels(s, wcfg) for s in scenes]).astype(self.cfg.np_dtype)
        instr = np.array([ins.tokens(wcfg) for ins in instructions], dtype=np.int64)
        was = self.training
        self.training = False
        tokens, _ = self.encode_vision(chans)
        projected, _ = self.project(tokens)
        B = len(scenes)
        out = np.zeros((B, 0), dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits = self.decode(projected, instr, out)
            nxt = logits.data[:, -1].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= (nxt == EOS) | (nxt == STOP)
            if done.all():
                break
        self.training = was
        return [[int(t) for t in row if t != PAD] for row in out]

    def generate(self, scene: GridScene, instruction: Instruction, max_len: int | None = None) -> list[int]:
        """Greedy decoding; stops at EOS or STOP or after ``max_len`` tokens."""
        return self.generate_batch([scene], [instruction], max_len or self.cfg.max_action_len)[0]

    # ------------------------------------------------------------ adapters
    def attach_lora(self, paths: Iterable[str], rank: int = 4, alpha: float = 4.0, dropout_p: float = 0.0,
                    seed: int = 0) -> AdapterSet:
        rng = np.random.default_rng(seed)
        added = AdapterSet()
        for path in sorted(paths):
            if path not in self.params:
                raise KeyError(f"parameter path not found: {path!r}")
            W = self.params[path]
            if W.data.ndim != 2:
                raise ValueError(f"{path!r} is not a 2-D weight")
            if path in self.adapters.adapters:
                raise ValueError(f"{path!r} already carries an adapter")
            d_out, d_in = W.shape
            tag = self.params.tag(path)
            A = self.params.add(path + ".lora_A", Tensor((rng.standard_normal((rank, d_in)) * 0.02).astype(W.dtype)), tag)
            Bm = self.params.add(path + ".lora_B", Tensor(np.zeros((d_out, rank), dtype=W.dtype)), tag)
            ad = LoraAdapter(path, A, Bm, rank, float(alpha), float(dropout_p))
            self.adapters.adapters[path] = ad
            added.adapters[path] = ad
        return added

    def merge_lora(self, adapters: AdapterSet | None = None) -> None:
        """Fold each adapter's scaled B @ A into its target weight."""
        for ad in adapters or self.adapters:
            if ad.merged:
                continue
            W = self.params[ad.target_path]
            ad._saved_weight = W.data.copy()
            W.data = (W.data.astype(np.float64) + ad.delta()).astype(W.dtype)
            ad.merged = True

    def detach_lora(self, adapters: AdapterSet | None = None) -> None:
        """Remove adapters and restore target weights exactly."""
        for ad in list(adapters or self.adapters):
            if ad.merged and ad._saved_weight is not None:
                self.params[ad.target_path].data = ad._saved_weight
            for p in ad.paths:
                if p in self.params:
                    self.params.remove(p)
            self.adapters.adapters.pop(ad.target_path, None)

    # ------------------------------------------------------------ copies
    def clone(self) -> TinyVlaPolicy:
        """Deep copy of the base weights without adapters."""
        other = TinyVlaPolicy(self.cfg, self.seed, init=False)
        for p in self.params.paths():
            if p.endswith((".lora_A", ".lora_B")):
                continue
            other.params.add(p, Tensor(self.params[p].data.copy()), self.params.tag(p))
        return other

    def base_paths(self) -> list[str]:
        return [p for p in self.params.paths() if not p.endswith((".lora_A", ".lora_B"))]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.base_paths():
            h.update(p.encode())
            h.update(np.ascontiguousarray(self.params[p].data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


class FrozenReference:
    """Read-only snapshot of a policy taken before unlearning."""

    def __init__(self, policy: TinyVlaPolicy):
        self._policy = policy.clone()
        for _, t in self._policy.params.items():
            t.requires_grad = False
            t.data.setflags(write=False)
        self.hash = self._policy.param_hash()

    @property
    def policy(self) -> TinyVlaPolicy:
        return self._policy

    def forward_batch(self, batch: Batch) -> dict[str, Tensor]:
        return self._policy.forward_batch(batch)

    def verify(self) -> None:
        if self._policy.param_hash() != self.hash:
            raise RuntimeError("frozen reference was mutated")


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _tag_json(tag: ParamTag) -> list:
    return [tag.component, tag.layer, tag.unit]


def save_checkpoint(store: ParamStore, path, cfg: PolicyConfig, seed: int = 0, extra: dict | None = None,
                    paths: Sequence[str] | None = None) -> None:
    """Write magic, u16 version, u32 header length, JSON header, then little-endian float32 tensors."""
    paths = sorted(paths) if paths is not None else store.paths()
    header = {
        "config": cfg.to_json(),
        "seed": seed,
        "tags": {p: _tag_json(store.tag(p)) for p in paths},
        "shapes": {p: list(store[p].shape) for p in paths},
        "created": (extra or {}).get("created"),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for p in paths:
            fh.write(np.ascontiguousarray(store[p].data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, ParamStore]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic, not a TVLA checkpoint")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: corrupt header ({exc})") from None
    offset = 10 + hlen
    store = ParamStore()
    for p in sorted(header["shapes"]):
        shape = tuple(header["shapes"][p])
        n = int(np.prod(shape)) * 4
        if offset + n > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated payload at {p!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)
        comp, layer, unit = header["tags"][p]
        store.add(p, Tensor(arr), ParamTag(comp, layer, unit))
        offset += n
    if offset != len(raw):
        raise CorruptHeaderError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, store


def load_checkpoint(path) -> tuple[TinyVlaPolicy, dict]:
    """Rebuild a policy from a checkpoint, validating tensor shapes against its config."""
    header, store = read_checkpoint(path)
    cfg = PolicyConfig.from_json(header["config"])
    policy = TinyVlaPolicy(cfg, int(header.get("seed", 0)), init=False)
    reference = TinyVlaPolicy(cfg, 0)
    expected = {p: reference.params[p].shape for p in reference.params.paths()}
    if set(store.paths()) != set(expected):
        missing = sorted(set(expected) - set(store.paths()))
        extra = sorted(set(store.paths()) - set(expected))
        raise ShapeMismatchError(f"{path}: parameter set differs from config (missing {missing[:3]}, extra {extra[:3]})")
    for p in store.paths():
        if store[p].shape != expected[p]:
            raise ShapeMismatchError(f"{path}: {p!r} has shape {store[p].shape}, config expects {expected[p]}")
        policy.params.add(p, store[p], store.tag(p))
    return policy, header


def save_adapters(policy: TinyVlaPolicy, adapters: AdapterSet, path, extra: dict | None = None) -> None:
    meta = {t: {"rank": a.rank, "alpha": a.alpha, "dropout_p": a.dropout_p} for t, a in adapters.adapters.items()}
    save_checkpoint(policy.params, path, policy.cfg, policy.seed, {**(extra or {}), "adapters": meta},
                    paths=adapters.param_paths())


def load_adapters(policy: TinyVlaPolicy, path) -> AdapterSet:
    header, store = read_checkpoint(path)
    out = AdapterSet()
    for target, meta in sorted(header["extra"]["adapters"].items()):
        ad = policy.attach_lora([target], meta["rank"], meta["alpha"], meta["dropout_p"])
        a = ad.adapters[target]
        a.A.data = store[target + ".lora_A"].data.copy()
        a.B.data = store[target + ".lora_B"].data.copy()
        out.update(ad)
    return out
