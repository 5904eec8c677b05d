"""Encoder-decoder localization model over feature sequences.

The encoder applies dual-branch attention blocks to a projected (C_D, T)
feature map.  A fixed set of learnable query vectors is decoded against the
encoder memory with dense self- and cross-attention; the cross-attention
value stream is mixed with its shifted copy before use.  Two heads read the
decoded queries out: per-class logits and a (start, end) segment in [0, 1]
normalized time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import attention as att
from . import tensor as tc
from .attention import AttentionConfig, FusionMode, FusionWeights, ScoreScale, ShiftMode
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import Parameters, Tensor

CHECKPOINT_MAGIC = b"APF1"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    model_dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 10
    mlp_ratio: int = 4
    window: int = 5
    enc_shift: int = 9
    dec_shift: int = 7
    enc_shift_mode: ShiftMode = ShiftMode.BIDIRECTIONAL
    dec_shift_mode: ShiftMode = ShiftMode.GENERAL
    fusion_mode: FusionMode = FusionMode.ALPHA_COMPLEMENT
    score_scale: ScoreScale = ScoreScale.SQRT_T
    activation: str = "gelu"
    learned_positions: bool = False
    max_len: int = 2048
    cosine_weighting: bool = True

    def __post_init__(self):
        if self.feature_dim <= 0 or self.num_classes <= 0:
            raise ConfigError(
                f"feature_dim and num_classes must be positive, got {self.feature_dim}, {self.num_classes}"
            )
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.num_queries < 1:
            raise ConfigError(f"num_queries must be positive, got {self.num_queries}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        # delegate attention-shape validation
        self.encoder_attention()
        self.decoder_attention()

    def encoder_attention(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.model_dim,
            heads=self.heads,
            window=self.window,
            shift_size=self.enc_shift,
            shift_mode=self.enc_shift_mode,
            fusion_mode=self.fusion_mode,
            score_scale=self.score_scale,
            cosine_weighting=self.cosine_weighting,
        )

    def decoder_attention(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.model_dim,
            heads=self.heads,
            window=self.window,
            shift_size=self.dec_shift,
            shift_mode=self.dec_shift_mode,
            fusion_mode=self.fusion_mode,
            score_scale=self.score_scale,
            cosine_weighting=self.cosine_weighting,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, (ShiftMode, FusionMode, ScoreScale)) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key, enum_cls in (
            ("enc_shift_mode", ShiftMode),
            ("dec_shift_mode", ShiftMode),
            ("fusion_mode", FusionMode),
            ("score_scale", ScoreScale),
        ):
            if key in kw and isinstance(kw[key], str):
                try:
                    kw[key] = enum_cls(kw[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {kw[key]!r}") from exc
        return cls(**kw)


@dataclass
class ModelOutput:
    logits: Tensor    # (num_queries, num_classes)
    segments: Tensor  # (num_queries, 2) normalized (start, end)


def positional_encoding(model_dim: int, length: int) -> np.ndarray:
    """Sinusoidal position code, (model_dim, length)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(model_dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / model_dim)
    pe = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.T.copy()


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int, *shape: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape if shape else (fan_out, fan_in))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Parameters:
    """Fresh parameter set; draw order is fixed so a seed pins every value."""
    p = Parameters()
    dim, ratio = cfg.model_dim, cfg.mlp_ratio

    def add(name: str, value: np.ndarray):
        p.add(name, value)

    def linear(name: str, out_dim: int, in_dim: int):
        add(f"{name}.w", _xavier(rng, out_dim, in_dim))
        add(f"{name}.b", np.zeros(out_dim))

    def norm(name: str):
        add(f"{name}.gamma", np.ones(dim))
        add(f"{name}.beta", np.zeros(dim))

    def attention_block(prefix: str, with_output: bool):
        for part in ("q", "k", "v"):
            add(f"{prefix}.w{part}", _xavier(rng, dim, dim))
            add(f"{prefix}.b{part}", np.zeros(dim))
        if with_output:
            add(f"{prefix}.wo", _xavier(rng, dim, dim))
            add(f"{prefix}.bo", np.zeros(dim))

    def mlp_block(prefix: str):
        linear(f"{prefix}.w1_full", ratio * dim, dim)
        linear(f"{prefix}.w2_full", dim, ratio * dim)

    def fusion_block(prefix: str):
        add(f"{prefix}.alpha", np.array([0.5]))
        if cfg.fusion_mode == FusionMode.TWO_ALPHAS:
            add(f"{prefix}.alpha2", np.array([0.5]))

    linear("input.conv1", dim, 3 * cfg.feature_dim)
    linear("input.conv2", dim, 3 * dim)
    if cfg.learned_positions:
        add("pos.embed", rng.normal(0.0, 0.02, (dim, cfg.max_len)))

    for i in range(cfg.enc_layers):
        prefix = f"enc{i}"
        norm(f"{prefix}.ln1")
        attention_block(f"{prefix}.attn", with_output=False)
        fusion_block(f"{prefix}.fusion")
        norm(f"{prefix}.ln2")
        mlp_block(f"{prefix}.mlp")

    add("queries.embed", rng.normal(0.0, 0.5, (dim, cfg.num_queries)))

    for i in range(cfg.dec_layers):
        prefix = f"dec{i}"
        norm(f"{prefix}.ln1")
        attention_block(f"{prefix}.self", with_output=True)
        norm(f"{prefix}.ln2")
        attention_block(f"{prefix}.cross", with_output=True)
        fusion_block(f"{prefix}.fusion")
        norm(f"{prefix}.ln3")
        mlp_block(f"{prefix}.mlp")

    linear("head.cls", cfg.num_classes, dim)
    linear("head.reg1", dim, dim)
    linear("head.reg2", 2, dim)
    return p


def ln_cols(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer norm over the feature axis of a (C_D, T) map."""
    return tc.transpose(tc.layer_norm(tc.transpose(x), gamma, beta))


def _affine(w: Tensor, x: Tensor, b: Tensor) -> Tensor:
    return tc.add(tc.matmul(w, x), tc.reshape(b, (b.shape[0], 1)))


def column_mlp(x: Tensor, p: Parameters, prefix: str, kind: str) -> Tensor:
    hidden = tc.activation(_affine(p[f"{prefix}.w1_full.w"], x, p[f"{prefix}.w1_full.b"]), kind)
    return _affine(p[f"{prefix}.w2_full.w"], hidden, p[f"{prefix}.w2_full.b"])


def input_projection(features: Tensor, p: Parameters, cfg: ModelConfig) -> Tensor:
    """Two stacked kernel-3 same-padding convolutions along time."""
    if features.ndim != 2 or features.shape[0] != cfg.feature_dim:
        raise ShapeError(f"expected ({cfg.feature_dim}, T) features, got {features.shape}")

    def conv3(x: Tensor, name: str) -> Tensor:
        stacked = tc.concat([tc.shift_cols(x, 1), x, tc.shift_cols(x, -1)], axis=0)
        return _affine(p[f"{name}.w"], stacked, p[f"{name}.b"])

    hidden = tc.activation(conv3(features, "input.conv1"), cfg.activation)
    return conv3(hidden, "input.conv2")


def positions_for(length: int, p: Parameters, cfg: ModelConfig) -> Tensor:
    if not cfg.learned_positions:
        return Tensor(positional_encoding(cfg.model_dim, length))
    if length > cfg.max_len:
        raise ShapeError(f"sequence length {length} exceeds positional table {cfg.max_len}")
    table = p["pos.embed"]
    return tc.transpose(tc.take(tc.transpose(table), np.arange(length)))


def _fusion_weights(p: Parameters, prefix: str) -> FusionWeights:
    alpha2 = p[f"{prefix}.alpha2"] if f"{prefix}.alpha2" in p else None
    return FusionWeights(alpha=p[f"{prefix}.alpha"], alpha2=alpha2)


def _attn_weights(p: Parameters, prefix: str) -> dict[str, Tensor]:
    return {name: p[f"{prefix}.{name}"] for name in ("wq", "bq", "wk", "bk", "wv", "bv")}


def encoder_layer(x: Tensor, p: Parameters, prefix: str, cfg: ModelConfig, counter: dict | None = None) -> Tensor:
    acfg = cfg.encoder_attention()
    attended = att.dual_branch_attention(
        ln_cols(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"]),
        acfg,
        _attn_weights(p, f"{prefix}.attn"),
        _fusion_weights(p, f"{prefix}.fusion"),
        counter=counter,
    )
    h1 = tc.add(x, attended)
    h2 = tc.add(h1, column_mlp(ln_cols(h1, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"]), p, f"{prefix}.mlp", cfg.activation))
    return h2


def dense_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Ordinary softmax attention per head: (H,n,d) x (H,m,d) -> (H,n,d)."""
    scores = tc.mul(tc.bmm(q, tc.transpose(k, (0, 2, 1))), 1.0 / scale)
    return tc.bmm(tc.softmax_lastdim(scores), v)


def decoder_layer(
    y: Tensor, memory: Tensor, p: Parameters, prefix: str, cfg: ModelConfig
) -> Tensor:
    acfg = cfg.decoder_attention()
    scale = float(np.sqrt(acfg.head_dim))
    heads = cfg.heads

    def project(x: Tensor, block: str, part: str) -> Tensor:
        return att.split_heads(_affine(p[f"{block}.w{part}"], x, p[f"{block}.b{part}"]), heads)

    def out_proj(x: Tensor, block: str) -> Tensor:
        return _affine(p[f"{block}.wo"], att.merge_heads(x), p[f"{block}.bo"])

    # dense self-attention over the query set
    yn = ln_cols(y, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    block = f"{prefix}.self"
    mixed = dense_attention(project(yn, block, "q"), project(yn, block, "k"), project(yn, block, "v"), scale)
    y = tc.add(y, out_proj(mixed, block))

    # dense cross-attention; values are fused with their shifted mix
    yn = ln_cols(y, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    block = f"{prefix}.cross"
    v = project(memory, block, "v")
    v_fused = att.fuse_branches(v, att.shift_mix(v, acfg), cfg.fusion_mode, _fusion_weights(p, f"{prefix}.fusion"))
    mixed = dense_attention(project(yn, block, "q"), project(memory, block, "k"), v_fused, scale)
    y = tc.add(y, out_proj(mixed, block))

    yn = ln_cols(y, p[f"{prefix}.ln3.gamma"], p[f"{prefix}.ln3.beta"])
    return tc.add(y, column_mlp(yn, p, f"{prefix}.mlp", cfg.activation))


def prediction_heads(y: Tensor, p: Parameters, cfg: ModelConfig) -> ModelOutput:
    logits = tc.transpose(_affine(p["head.cls.w"], y, p["head.cls.b"]))
    hidden = tc.activation(_affine(p["head.reg1.w"], y, p["head.reg1.b"]), cfg.activation)
    center_width = tc.sigmoid(_affine(p["head.reg2.w"], hidden, p["head.reg2.b"]))  # (2, N_q)
    n = cfg.num_queries
    center = tc.reshape(tc.take(center_width, np.array([0])), (n,))
    width = tc.reshape(tc.take(center_width, np.array([1])), (n,))
    start = tc.clamp(tc.sub(center, tc.mul(width, 0.5)), 0.0, 1.0)
    end = tc.clamp(tc.add(center, tc.mul(width, 0.5)), 0.0, 1.0)
    segments = tc.concat([tc.reshape(start, (n, 1)), tc.reshape(end, (n, 1))], axis=1)
    return ModelOutput(logits=logits, segments=segments)


def model_forward(
    features: Tensor, p: Parameters, cfg: ModelConfig, counter: dict | None = None
) -> ModelOutput:
    """Full forward pass for one video's (feature_dim, T) array."""
    x = tc.add(input_projection(features, p, cfg), positions_for(features.shape[1], p, cfg))
    for i in range(cfg.enc_layers):
        x = encoder_layer(x, p, f"enc{i}", cfg, counter=counter)
    y = p["queries.embed"]
    for i in range(cfg.dec_layers):
        y = decoder_layer(y, x, p, f"dec{i}", cfg)
    return prediction_heads(y, p, cfg)


def build_model(cfg: ModelConfig, seed: int = 0) -> Parameters:
    return init_params(cfg, np.random.default_rng([seed, 0xA9F]))


# --- checkpoint serialization -------------------------------------------------


def save_checkpoint(path: str | Path, params: Parameters, config: dict, extra: dict | None = None) -> None:
    """Magic, u32 manifest length, JSON manifest, then little-endian f64 blocks."""
    tensors = []
    offset = 0
    blocks = []
    for name, t in params.items():
        count = int(t.data.size)
        tensors.append({"name": name, "shape": list(t.data.shape), "offset": offset, "count": count})
        blocks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        offset += count
    manifest = {"format_version": 1, "config": config, "tensors": tensors}
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for b in blocks:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns (config, {name: array}, extra).  Format errors name the field."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read checkpoint: {exc}") from exc
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a checkpoint file")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + mlen:
        raise DataFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    for key in ("format_version", "config", "tensors"):
        if key not in manifest:
            raise DataFormatError(f"{path}: manifest missing {key!r}")
    if manifest["format_version"] != 1:
        raise DataFormatError(f"{path}: unsupported format_version {manifest['format_version']}")
    payload = np.frombuffer(raw[8 + mlen :], dtype="<f8")
    total = sum(t["count"] for t in manifest["tensors"])
    if payload.size != total:
        raise DataFormatError(f"{path}: payload holds {payload.size} values, manifest declares {total}")
    arrays = {}
    for entry in manifest["tensors"]:
        for key in ("name", "shape", "offset", "count"):
            if key not in entry:
                raise DataFormatError(f"{path}: tensor entry missing {key!r}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["count"]]
        if chunk.size != entry["count"]:
            raise DataFormatError(f"{path}: tensor {entry['name']!r} extends past payload")
        if int(np.prod(entry["shape"], dtype=np.int64)) != entry["count"]:
            raise DataFormatError(f"{path}: tensor {entry['name']!r} shape/count mismatch")
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return manifest["config"], arrays, manifest.get("extra", {})


def restore_model(path: str | Path) -> tuple[ModelConfig, Parameters, dict]:
    """Rebuild a model from a checkpoint; name or shape mismatches raise."""
    config_dict, arrays, extra = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config_dict)
    params = build_model(cfg)
    missing = [n for n in params.names() if n not in arrays]
    surplus = [n for n in arrays if n not in params]
    if missing or surplus:
        raise DataFormatError(f"{path}: parameter names mismatch, missing {missing}, surplus {surplus}")
    for name, arr in arrays.items():
        if tuple(arr.shape) != params[name].data.shape:
            raise DataFormatError(
                f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, model expects {params[name].data.shape}"
            )
        params[name].data = np.ascontiguousarray(arr)
    return cfg, params, extra
