"""Tiny pre-norm decoder-only language model.

The forward pass returns both the logits and the final hidden state (after
the final layer norm), which is what gets distilled and constrained during
replay.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

CKPT_MAGIC = "GERE-CKPT"
CKPT_VERSION = 1
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_dim: int = 64
    n_heads: int = 4
    vocab_size: int = 128
    max_seq: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_layers", "hidden_dim", "n_heads", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("q", "k")

    def validate(self, hidden_dim: int) -> None:
        if not 1 <= self.rank <= hidden_dim:
            raise ValueError(f"LoRA rank must be in [1, {hidden_dim}], got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        bad = set(self.targets) - {"q", "k", "v", "o"}
        if bad or not self.targets:
            raise ValueError(f"bad LoRA targets {self.targets}")

    @classmethod
    def parse(cls, text: str) -> LoraConfig:
        """Parse ``"r,alpha,dropout"``."""
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError(f"expected r,alpha,dropout, got {text!r}")
        return cls(rank=int(parts[0]), alpha=float(parts[1]), dropout=float(parts[2]))


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class WeightVector:
    values: np.ndarray
    manifest: tuple[ManifestEntry, ...]

    def __post_init__(self):
        total = sum(e.size for e in self.manifest)
        if self.values.ndim != 1 or self.values.size != total:
            raise ValueError(f"weight vector of size {self.values.size} does not match manifest total {total}")


def build_manifest(params: dict[str, np.ndarray]) -> tuple[ManifestEntry, ...]:
    entries, offset = [], 0
    for name, arr in params.items():
        entries.append(ManifestEntry(name, tuple(arr.shape), offset))
        offset += arr.size
    return tuple(entries)


class ForwardOutput(NamedTuple):
    logits: Tensor
    last_hidden: Tensor


class TinyDecoder:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.lora: LoraConfig | None = None
        self.training = True
        self.params: dict[str, Tensor] = {}
        self._dropout_rng: np.random.Generator | None = None
        self._init_params()

    # ------------------------------------------------------------ init
    def _init_params(self) -> None:
        c = self.config
        d, V = c.hidden_dim, c.vocab_size
        rng = np.random.default_rng(c.seed)
        dtype = T.get_default_dtype()

        def uniform(shape, scale):
            return rng.uniform(-scale, scale, size=shape).astype(dtype)

        def add(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True)

        resid_scale = 1.0 / np.sqrt(2 * c.n_layers)
        add("tok_emb", uniform((V, d), 1.0 / np.sqrt(d)))
        add("pos_emb", uniform((c.max_seq, d), 1.0 / np.sqrt(d)))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            add(p + "ln1.gain", np.ones(d, dtype))
            add(p + "ln1.bias", np.zeros(d, dtype))
            for proj in ("q", "k", "v", "o"):
                scale = 1.0 / np.sqrt(d) * (resid_scale if proj == "o" else 1.0)
                add(p + f"attn.{proj}.weight", uniform((d, d), scale))
                add(p + f"attn.{proj}.bias", np.zeros(d, dtype))
            add(p + "ln2.gain", np.ones(d, dtype))
            add(p + "ln2.bias", np.zeros(d, dtype))
            add(p + "mlp.fc.weight", uniform((d, 4 * d), 1.0 / np.sqrt(d)))
            add(p + "mlp.fc.bias", np.zeros(4 * d, dtype))
            add(p + "mlp.proj.weight", uniform((4 * d, d), resid_scale / np.sqrt(4 * d)))
            add(p + "mlp.proj.bias", np.zeros(d, dtype))
        add("ln_f.gain", np.ones(d, dtype))
        add("ln_f.bias", np.zeros(d, dtype))
        add("lm_head.weight", uniform((d, V), 1.0 / np.sqrt(d)))

    def attach_lora(self, cfg: LoraConfig) -> TinyDecoder:
        if self.lora is not None:
            raise RuntimeError("LoRA adapters already attached")
        cfg.validate(self.config.hidden_dim)
        d, r = self.config.hidden_dim, cfg.rank
        rng = np.random.default_rng([self.config.seed, 0x10FA])
        dtype = T.get_default_dtype()
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        # adapters go right after their layer's weights so the manifest stays layer-major
        ordered: dict[str, Tensor] = {}
        for name, p in self.params.items():
            ordered[name] = p
            if name.endswith(".mlp.proj.bias"):
                prefix = name[: -len("mlp.proj.bias")]
                for proj in cfg.targets:
                    a = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, r)).astype(dtype)
                    ordered[prefix + f"attn.{proj}.lora_a"] = Tensor(a, requires_grad=True)
                    ordered[prefix + f"attn.{proj}.lora_b"] = Tensor(np.zeros((r, d), dtype), requires_grad=True)
        self.params = ordered
        self.lora = cfg
        self._dropout_rng = np.random.default_rng([self.config.seed, 0xD409])
        return self

    # --------------------------------------------------------- access
    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def trainable_params(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def train(self) -> TinyDecoder:
        self.training = True
        return self

    def eval(self) -> TinyDecoder:
        self.training = False
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(repr(tuple(p.shape)).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def clone(self) -> TinyDecoder:
        other = TinyDecoder.__new__(TinyDecoder)
        other.config = self.config
        other.lora = self.lora
        other.training = self.training
        other.params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        other._dropout_rng = (
            None if self._dropout_rng is None else np.random.default_rng([self.config.seed, 0xD409])
        )
        return other

    # -------------------------------------------------------- forward
    def _proj(self, h: Tensor, prefix: str, proj: str) -> Tensor:
        P = self.params
        out = h @ P[prefix + f"attn.{proj}.weight"] + P[prefix + f"attn.{proj}.bias"]
        a_name = prefix + f"attn.{proj}.lora_a"
        if a_name in P:
            x = h
            if self.training and self.lora.dropout > 0:
                keep = self._dropout_rng.random(h.shape) >= self.lora.dropout
                x = h * (keep.astype(h.dtype) / h.dtype.type(1.0 - self.lora.dropout))
            delta = (x @ P[a_name]) @ P[prefix + f"attn.{proj}.lora_b"]
            out = out + delta * (self.lora.alpha / self.lora.rank)
        return out

    def forward(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> ForwardOutput:
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, Tn = tokens.shape
        if Tn > c.max_seq:
            raise ValueError(f"sequence length {Tn} exceeds max_seq {c.max_seq}")
        if tokens.min() < 0 or tokens.max() >= c.vocab_size:
            raise ValueError(f"token id out of range [0, {c.vocab_size})")
        if mask is None:
            mask = np.ones_like(tokens, dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(B, Tn)
        P = self.params
        d, H = c.hidden_dim, c.n_heads
        dh = d // H
        dtype = P["tok_emb"].dtype

        bias = np.triu(np.full((Tn, Tn), _NEG, dtype=dtype), k=1)[None, None]
        bias = bias + np.where(mask, 0.0, _NEG).astype(dtype)[:, None, None, :]
        bias_t = Tensor(bias)
        scale = 1.0 / np.sqrt(dh)

        x = T.embedding(P["tok_emb"], tokens) + T.index_select(P["pos_emb"], slice(0, Tn))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            h = T.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"])
            q = self._proj(h, p, "q").reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)
            k = self._proj(h, p, "k").reshape(B, Tn, H, dh).transpose(0, 2, 3, 1)
            v = self._proj(h, p, "v").reshape(B, Tn, H, dh).transpose(0, 2, 1, 3)
            att = T.softmax((q @ k) * scale + bias_t, axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, Tn, d)
            x = x + self._proj(y, p, "o")
            h = T.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"])
            h = T.gelu(h @ P[p + "mlp.fc.weight"] + P[p + "mlp.fc.bias"])
            x = x + (h @ P[p + "mlp.proj.weight"] + P[p + "mlp.proj.bias"])
        last_hidden = T.layer_norm(x, P["ln_f.gain"], P["ln_f.bias"])
        logits = last_hidden @ P["lm_head.weight"]
        return ForwardOutput(logits, last_hidden)

    __call__ = forward


def init_model(config: ModelConfig) -> TinyDecoder:
    return TinyDecoder(config)


def attach_lora(model: TinyDecoder, cfg: LoraConfig) -> TinyDecoder:
    return model.attach_lora(cfg)


def flatten_weights(model: TinyDecoder) -> WeightVector:
    """Flatten the trainable weights (adapters only once LoRA is attached)."""
    arrays = {n: model.params[n].data for n in model.trainable_names()}
    manifest = build_manifest(arrays)
    if not arrays:
        return WeightVector(np.zeros(0, np.float32), manifest)
    values = np.concatenate([a.reshape(-1) for a in arrays.values()]).astype(np.float32, copy=False)
    return WeightVector(values, manifest)


def load_weights(model: TinyDecoder, wv: WeightVector) -> TinyDecoder:
    expected = build_manifest({n: model.params[n].data for n in model.trainable_names()})
    if tuple(wv.manifest) != expected:
        raise ValueError("weight manifest does not match the model (name, shape or order differ)")
    for e in wv.manifest:
        p = model.params[e.name]
        p.data = wv.values[e.offset : e.offset + e.size].reshape(e.shape).astype(p.dtype, copy=True)
        p.grad = None
    return model


def parameter_count(model: TinyDecoder, trainable_only: bool = True) -> int:
    names = model.trainable_names() if trainable_only else list(model.params)
    return sum(model.params[n].data.size for n in names)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model: TinyDecoder, path: str | Path) -> None:
    state = model.state()
    manifest = build_manifest(state)
    header = {
        "magic": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "dtype": "f32le",
        "config": dataclasses.asdict(model.config),
        "lora": None if model.lora is None else dataclasses.asdict(model.lora),
        "fingerprint": model.fingerprint(),
        "manifest": [{"name": e.name, "shape": list(e.shape), "offset": e.offset} for e in manifest],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> TinyDecoder:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupted checkpoint header") from exc
    if header.get("magic") != CKPT_MAGIC or header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    model = TinyDecoder(ModelConfig(**header["config"]))
    if header["lora"] is not None:
        lora = dict(header["lora"])
        lora["targets"] = tuple(lora["targets"])
        model.attach_lora(LoraConfig(**lora))
    entries = [ManifestEntry(e["name"], tuple(e["shape"]), e["offset"]) for e in header["manifest"]]
    if tuple(entries) != build_manifest(model.state()):
        raise ValueError(f"{path}: manifest does not match the model architecture")
    values = np.frombuffer(payload, dtype="<f4")
    if values.size != sum(e.size for e in entries):
        raise ValueError(f"{path}: payload size mismatch")
    for e in entries:
        model.params[e.name].data = values[e.offset : e.offset + e.size].reshape(e.shape).astype(np.float32)
    if model.fingerprint() != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch")
    return model
