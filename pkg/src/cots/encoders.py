"""Two-stream token encoders, their momentum twins, and masked-token heads."""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError, PreconditionError
from .tensor import Tensor

ATTN_MASK = -1e30


@dataclass
class EncoderConfig:
    vocab_image: int = 64
    vocab_text: int = 64
    max_len: int = 16
    d_model: int = 32
    d_out: int = 32
    depth: int = 2
    n_heads: int = 2
    ffn_mult: int = 4
    ln_eps: float = 1e-5
    init_scale: float = 0.02

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        for name in ("vocab_image", "vocab_text", "max_len", "d_model", "d_out", "n_heads", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    token_embedding: Tensor
    position_embedding: Tensor
    mask_embedding: Tensor
    cls_embedding: Tensor
    blocks: list[BlockParams]
    final_gain: Tensor
    final_bias: Tensor
    projection: Tensor

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("token_embedding", "position_embedding", "mask_embedding", "cls_embedding"):
            yield prefix + name, getattr(self, name)
        for i, blk in enumerate(self.blocks):
            for k, v in vars(blk).items():
                yield f"{prefix}blocks.{i}.{k}", v
        for name in ("final_gain", "final_bias", "projection"):
            yield prefix + name, getattr(self, name)


@dataclass
class TwoStreamModel:
    config: EncoderConfig
    vision: EncoderParams
    text: EncoderParams
    vision_head: Tensor
    text_head: Tensor
    # d_out -> d_model maps for the conditioning global; None when d_out == d_model
    vision_bridge: Tensor | None = None
    text_bridge: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.vision.named("vision.")) + list(self.text.named("text."))
        out += [("vision_head", self.vision_head), ("text_head", self.text_head)]
        if self.vision_bridge is not None:
            out += [("vision_bridge", self.vision_bridge), ("text_bridge", self.text_bridge)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def stream(self, name: str) -> EncoderParams:
        return _pick_stream(self, name)


@dataclass
class MomentumState:
    vision: EncoderParams
    text: EncoderParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.vision.named("vision.")) + list(self.text.named("text."))

    def stream(self, name: str) -> EncoderParams:
        return _pick_stream(self, name)


def _pick_stream(obj, name: str) -> EncoderParams:
    if name == "vision":
        return obj.vision
    if name == "text":
        return obj.text
    raise ValueError(f"unknown stream {name!r}")


# ---------------------------------------------------------------- init


def _init_encoder(rng: np.random.Generator, cfg: EncoderConfig, vocab: int) -> EncoderParams:
    d, s = cfg.d_model, cfg.init_scale

    def normal(*shape):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    blocks = []
    for _ in range(cfg.depth):
        hidden = cfg.ffn_mult * d
        blocks.append(
            BlockParams(
                ln1_gain=const(1.0, d), ln1_bias=const(0.0, d),
                wq=normal(d, d), bq=const(0.0, d),
                wk=normal(d, d), bk=const(0.0, d),
                wv=normal(d, d), bv=const(0.0, d),
                wo=normal(d, d), bo=const(0.0, d),
                ln2_gain=const(1.0, d), ln2_bias=const(0.0, d),
                w1=normal(d, hidden), b1=const(0.0, hidden),
                w2=normal(hidden, d), b2=const(0.0, d),
            )
        )  # fmt: skip
    return EncoderParams(
        token_embedding=normal(vocab, d),
        position_embedding=normal(cfg.max_len, d),
        mask_embedding=normal(1, d),
        cls_embedding=normal(1, d),
        blocks=blocks,
        final_gain=const(1.0, d),
        final_bias=const(0.0, d),
        projection=normal(d, cfg.d_out),
    )


def _frozen_copy(params: EncoderParams) -> EncoderParams:
    clone = copy.deepcopy(params)
    for _, p in clone.named():
        p.requires_grad = False
        p.grad = None
    return clone


def init_model(cfg: EncoderConfig, seed: int) -> tuple[TwoStreamModel, MomentumState]:
    """Scaled-normal init; the momentum twins start as exact copies."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    vision = _init_encoder(rng, cfg, cfg.vocab_image)
    text = _init_encoder(rng, cfg, cfg.vocab_text)
    s = cfg.init_scale
    model = TwoStreamModel(
        config=cfg,
        vision=vision,
        text=text,
        vision_head=Tensor(rng.normal(0.0, s, (cfg.d_model, cfg.vocab_image)), requires_grad=True),
        text_head=Tensor(rng.normal(0.0, s, (cfg.d_model, cfg.vocab_text)), requires_grad=True),
    )
    if cfg.d_out != cfg.d_model:
        model.vision_bridge = Tensor(rng.normal(0.0, s, (cfg.d_out, cfg.d_model)), requires_grad=True)
        model.text_bridge = Tensor(rng.normal(0.0, s, (cfg.d_out, cfg.d_model)), requires_grad=True)
    momentum = MomentumState(vision=_frozen_copy(vision), text=_frozen_copy(text))
    return model, momentum


# ---------------------------------------------------------------- forward


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences with id 0; returns (tokens [B, T], lengths [B])."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    if max_len is not None and width > max_len:
        raise IndexError(f"sequence length {width} exceeds max_len {max_len}")
    tokens = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return tokens, lengths


def _block(blk: BlockParams, x: Tensor, key_bias: np.ndarray, n_heads: int, eps: float) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    h = T.layer_norm(x, blk.ln1_gain, blk.ln1_bias, eps)

    def heads(w, bias):
        y = T.add(T.matmul(h, w), bias)
        return T.transpose(T.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(blk.wq, blk.bq), heads(blk.wk, blk.bk), heads(blk.wv, blk.bv)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax_rows(T.add(scores, key_bias))
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    x = T.add(x, T.add(T.matmul(ctx, blk.wo), blk.bo))
    h = T.layer_norm(x, blk.ln2_gain, blk.ln2_bias, eps)
    h = T.gelu(T.add(T.matmul(h, blk.w1), blk.b1))
    return T.add(x, T.add(T.matmul(h, blk.w2), blk.b2))


def encode_batch(
    params: EncoderParams,
    cfg: EncoderConfig,
    tokens: np.ndarray,
    lengths: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Encode a padded batch.

    Returns ``(global [B, d_out], states [B, T, d_model])``. ``mask`` is a boolean
    ``[B, T]`` array of positions whose token embedding is replaced by the mask
    embedding. The classification slot is prepended internally and excluded
    from ``states``; padded positions are hidden from attention.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if t > cfg.max_len:
        raise IndexError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    vocab = params.token_embedding.shape[0]
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    if np.any(tokens[valid] < 0) or np.any(tokens[valid] >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    tokens = np.where(valid, tokens, 0)

    x = T.embedding_lookup(params.token_embedding, tokens)
    if mask is not None and np.any(mask):
        m = np.asarray(mask, dtype=np.float64)[:, :, None]
        x = T.add(T.mul(x, 1.0 - m), T.mul(params.mask_embedding, m))
    x = T.add(x, T.index(params.position_embedding, slice(0, t)))
    cls = T.broadcast_to(T.reshape(params.cls_embedding, (1, 1, cfg.d_model)), (b, 1, cfg.d_model))
    x = T.concat([cls, x], axis=1)

    keys = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
    key_bias = np.where(keys, 0.0, ATTN_MASK)[:, None, None, :]
    for blk in params.blocks:
        x = _block(blk, x, key_bias, cfg.n_heads, cfg.ln_eps)
    x = T.layer_norm(x, params.final_gain, params.final_bias, cfg.ln_eps)

    pooled = T.index(x, (slice(None), 0))
    glob = T.l2_normalize_rows(T.matmul(pooled, params.projection))
    states = T.index(x, (slice(None), slice(1, None)))
    return glob, states


def mask_from_positions(lengths: np.ndarray, positions: Sequence[Sequence[int]] | None, width: int) -> np.ndarray:
    mask = np.zeros((len(lengths), width), dtype=bool)
    if positions is None:
        return mask
    for i, pos in enumerate(positions):
        pos = np.asarray(list(pos), dtype=np.int64)
        if pos.size and (pos.min() < 0 or pos.max() >= lengths[i]):
            raise IndexError("masked position outside the sequence")
        mask[i, pos] = True
    return mask


def encode(params: EncoderParams, cfg: EncoderConfig, tokens: Sequence[int], masked_positions=None) -> tuple[Tensor, Tensor]:
    """Single-sequence convenience wrapper: ``(global [1, d_out], states [len, d])``."""
    toks, lengths = pad_batch([tokens])
    mask = mask_from_positions(lengths, None if masked_positions is None else [masked_positions], toks.shape[1])
    glob, states = encode_batch(params, cfg, toks, lengths, mask)
    return glob, T.index(states, 0)


def momentum_encode_batch(momentum: MomentumState, stream: str, cfg: EncoderConfig, tokens, lengths) -> np.ndarray:
    """Global embeddings from the momentum twin; plain arrays, never on a graph."""
    with T.no_grad():
        glob, _ = encode_batch(momentum.stream(stream), cfg, tokens, lengths)
    return glob.data


def momentum_encode(momentum: MomentumState, stream: str, cfg: EncoderConfig, tokens: Sequence[int]) -> Tensor:
    toks, lengths = pad_batch([tokens])
    return Tensor(momentum_encode_batch(momentum, stream, cfg, toks, lengths))


def momentum_update(model: TwoStreamModel, momentum: MomentumState, m: float) -> None:
    """In place: every mirrored parameter ``p_hat <- m * p_hat + (1 - m) * p``."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"momentum must be in [0, 1], got {m}")
    online = dict(model.vision.named("vision.")) | dict(model.text.named("text."))
    mirror = momentum.named_parameters()
    if len(mirror) != len(online):
        raise ParameterError("momentum state does not mirror the online encoders")
    for name, p_hat in mirror:
        p = online.get(name)
        if p is None or p.shape != p_hat.shape:
            raise ParameterError(f"parameter {name} missing or shape-mismatched")
        p_hat.data = m * p_hat.data + (1.0 - m) * p.data


# ---------------------------------------------------------------- masked-token heads


def _predict_masked(states: Tensor, mask: np.ndarray, cond_global: Tensor, bridge: Tensor | None, head: Tensor) -> Tensor:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise PreconditionError("masked-token prediction needs at least one masked position")
    h = T.index(states, (rows, cols))
    c = T.index(cond_global, rows)
    if bridge is not None:
        c = T.matmul(c, bridge)
    return T.matmul(T.add(h, c), head)


def predict_masked_vision_batch(model: TwoStreamModel, states: Tensor, mask: np.ndarray, text_global: Tensor) -> Tensor:
    """Logits ``[M, V_v]`` for every masked image position (row-major order over ``mask``)."""
    return _predict_masked(states, mask, text_global, model.vision_bridge, model.vision_head)


def predict_masked_text_batch(model: TwoStreamModel, states: Tensor, mask: np.ndarray, image_global: Tensor) -> Tensor:
    return _predict_masked(states, mask, image_global, model.text_bridge, model.text_head)


def _single_mask(states: Tensor, positions) -> np.ndarray:
    positions = list(positions)
    mask = np.zeros((1, states.shape[0]), dtype=bool)
    if positions:
        mask[0, positions] = True
    return mask


def predict_masked_vision(model: TwoStreamModel, vision_states: Tensor, masked_positions, text_global: Tensor) -> Tensor:
    states = T.reshape(vision_states, (1,) + vision_states.shape)
    return predict_masked_vision_batch(model, states, _single_mask(vision_states, masked_positions), text_global)


def predict_masked_text(model: TwoStreamModel, text_states: Tensor, masked_positions, image_global: Tensor) -> Tensor:
    states = T.reshape(text_states, (1,) + text_states.shape)
    return predict_masked_text_batch(model, states, _single_mask(text_states, masked_positions), image_global)


# ---------------------------------------------------------------- checkpoints


def _write_npy(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, buf.getvalue())


def save_checkpoint(path, model: TwoStreamModel, momentum: MomentumState, step: int = 0, extra: dict | None = None) -> None:
    """Write an ``.npz``-compatible archive with fixed timestamps (byte-reproducible).

    Arrays are stored as ``online/<name>`` and ``momentum/<name>``; ``__meta__``
    holds the JSON-encoded encoder config, step counter and any ``extra`` fields.
    """
    meta = {"encoder": asdict(model.config), "step": int(step), "extra": extra or {}}
    with zipfile.ZipFile(path, "w") as zf:
        _write_npy(zf, "__meta__", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
        for name, p in model.named_parameters():
            _write_npy(zf, "online/" + name, p.data)
        for name, p in momentum.named_parameters():
            _write_npy(zf, "momentum/" + name, p.data)


def load_checkpoint(path) -> tuple[TwoStreamModel, MomentumState, dict]:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        cfg = EncoderConfig(**meta["encoder"])
        model, momentum = init_model(cfg, 0)
        for prefix, named in (("online/", model.named_parameters()), ("momentum/", momentum.named_parameters())):
            for name, p in named:
                key = prefix + name
                if key not in npz.files:
                    raise ParameterError(f"checkpoint lacks {key}")
                arr = npz[key]
                if arr.shape != p.shape:
                    raise ParameterError(f"{key}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=np.float64)
    return model, momentum, meta


def parameters_equal(a: list[tuple[str, Tensor]], b: list[tuple[str, Tensor]]) -> bool:
    return len(a) == len(b) and all(na == nb and np.array_equal(pa.data, pb.data) for (na, pa), (nb, pb) in zip(a, b))


__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "TwoStreamModel",
    "MomentumState",
    "init_model",
    "encode",
    "encode_batch",
    "momentum_encode",
    "momentum_encode_batch",
    "momentum_update",
    "predict_masked_vision",
    "predict_masked_text",
    "save_checkpoint",
    "load_checkpoint",
    "pad_batch",
]
