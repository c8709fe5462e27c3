"""Toy multimodal decoder-only transformer with a KV cache.

Layout of every sequence is ``[U; W]``: ``N_v`` vision positions (one per
image patch) followed by prompt tokens. Generation starts by decoding BOS,
so every answer token, including the first, is produced by a decode step
that reads the cache. Blocks are pre-norm (RMS) with learned absolute
positions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from vflkit import numkit as nk
from vflkit.taskgen import Tokenizer

MAGIC = b"VFLCKPT1"


class CapacityError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 72
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    max_seq: int = 128
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if min(self.n_layers, self.d_model, self.d_ff, self.vocab_size, self.max_seq) < 1:
            raise ValueError("sizes must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_vision(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


LAYER_KEYS = ("wq", "wk", "wv", "wo", "ff1", "ff2", "norm1", "norm2")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes = {
        "patch_proj": (cfg.patch_dim, d),
        "patch_bias": (d,),
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
        "final_norm": (d,),
        "out_proj": (d, cfg.vocab_size),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
                       p + "ff1": (d, cfg.d_ff), p + "ff2": (cfg.d_ff, d),
                       p + "norm1": (d,), p + "norm2": (d,)})
    return shapes


class Params:
    """All learnable arrays of the model, keyed by name. Treated as immutable."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            raise nk.ShapeError(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, s in shapes.items():
            if tuple(tensors[k].shape) != s:
                raise nk.ShapeError(f"{k}: expected {s}, got {tensors[k].shape}")
        self.config = config
        self.tensors = dict(tensors)

    def weights(self) -> dict[str, np.ndarray]:
        return self.tensors

    def astype(self, dtype) -> "Params":
        return Params(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Params):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) and v.dtype == other.tensors[k].dtype
            for k, v in self.tensors.items())


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> Params:
    """Seeded small-uniform init: U(-1,1)/sqrt(fan_in), residual outputs shrunk by sqrt(2L)."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(("norm1", "norm2", "final_norm")):
            a = np.ones(shape)
        elif name == "patch_bias":
            a = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            a = rng.uniform(-0.1, 0.1, size=shape)
        else:
            a = rng.uniform(-1.0, 1.0, size=shape) / math.sqrt(shape[0])
            if name.endswith(("wo", "ff2")):
                a /= math.sqrt(2 * cfg.n_layers)
        out[name] = a.astype(dtype)
    return Params(cfg, out)


@dataclass
class MultimodalSequence:
    """Vision span (``N_v`` IMG placeholders) followed by prompt tokens.

    ``answer`` holds teacher-forcing targets and is not part of the prefill.
    ``image`` may be None only for text-only oracle sequences.
    """

    image: np.ndarray | None
    prompt: list[int]
    answer: list[int] = field(default_factory=list)
    n_vision: int = 0

    @classmethod
    def build(cls, cfg: ModelConfig, image: np.ndarray | None, prompt: Sequence[int],
              answer: Sequence[int] = ()) -> "MultimodalSequence":
        if image is not None and image.shape != (cfg.image_size, cfg.image_size, cfg.channels):
            raise nk.ShapeError(f"image {image.shape} does not match config")
        return cls(image, list(prompt), list(answer), cfg.n_vision if image is not None else 0)

    @property
    def vision_span(self) -> tuple[int, int]:
        return 0, self.n_vision

    @property
    def tokens(self) -> list[int]:
        return [Tokenizer.IMG] * self.n_vision + self.prompt

    def __len__(self) -> int:
        return self.n_vision + len(self.prompt)


@dataclass
class KvCache:
    """Per-layer key/value rows (positions x d_model) and their position ids."""

    k: list[np.ndarray]
    v: list[np.ndarray]
    pos: list[np.ndarray]
    next_pos: int
    vision_span: tuple[int, int] = (0, 0)

    @property
    def n_layers(self) -> int:
        return len(self.k)

    def rows(self, layer: int) -> int:
        return self.k[layer].shape[0]

    def copy(self) -> "KvCache":
        return KvCache([a.copy() for a in self.k], [a.copy() for a in self.v],
                       [a.copy() for a in self.pos], self.next_pos, self.vision_span)

    def equals(self, other: "KvCache") -> bool:
        return (self.next_pos == other.next_pos and self.n_layers == other.n_layers and all(
            np.array_equal(a, b) and a.dtype == b.dtype
            for xs, ys in ((self.k, other.k), (self.v, other.v), (self.pos, other.pos))
            for a, b in zip(xs, ys)))


# -- kernels ------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (N_v, patch*patch*C); patches in row-major grid order, each flattened row-major."""
    h, w, c = image.shape
    g_h, g_w = h // patch, w // patch
    return (image.reshape(g_h, patch, g_w, patch, c).transpose(0, 2, 1, 3, 4)
            .reshape(g_h * g_w, patch * patch * c))


def _linear(x, w):
    """(B, T, d_in) @ (d_in, d_out) through an explicit 2-D matmul."""
    b, t, d = x.shape
    y = nk.matmul(nk.reshape(x, (b * t, d)), w)
    return nk.reshape(y, (b, t, y.shape[-1]))


def _heads(x, n_heads):
    b, t, d = x.shape
    return nk.transpose(nk.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _layer(cfg: ModelConfig, w: Mapping[str, Any], l: int, x, qpos: np.ndarray,
           kpos: np.ndarray, past_k=None, past_v=None, keep: np.ndarray | None = None):
    """One pre-norm block. Returns (x_out, K, V) where K/V cover past + current rows.

    Attention is causal on position ids unless ``keep`` (B, T, S) gives an explicit
    per-example mask.
    """
    p = f"layers.{l}."
    h = nk.rms_norm(x, w[p + "norm1"], cfg.norm_eps)
    q, k, v = _linear(h, w[p + "wq"]), _linear(h, w[p + "wk"]), _linear(h, w[p + "wv"])
    if past_k is not None:
        k = nk.concat([past_k, k], axis=1)
        v = nk.concat([past_v, v], axis=1)
    b, t, d = q.shape
    s = k.shape[1]
    nh = cfg.n_heads
    q = nk.scale(q, 1.0 / math.sqrt(d // nh))
    scores = nk.matmul(_heads(q, nh), nk.transpose(_heads(k, nh), (0, 1, 3, 2)))
    if keep is None:
        allow = kpos[None, :] <= qpos[:, None]
    else:
        allow = keep[:, None]
    att = nk.matmul(nk.row_softmax(scores, np.broadcast_to(allow, scores.shape)), _heads(v, nh))
    att = nk.reshape(nk.transpose(att, (0, 2, 1, 3)), (b, t, d))
    x = nk.add(x, _linear(att, w[p + "wo"]))
    h = nk.rms_norm(x, w[p + "norm2"], cfg.norm_eps)
    x = nk.add(x, _linear(nk.gelu(_linear(h, w[p + "ff1"])), w[p + "ff2"]))
    return x, k, v


def _logits(cfg: ModelConfig, w: Mapping[str, Any], x):
    return _linear(nk.rms_norm(x, w["final_norm"], cfg.norm_eps), w["out_proj"])


def _vision_rows(cfg: ModelConfig, w: Mapping[str, Any], images):
    """images (B, H, W, C) -> (B, N_v, d) patch projections plus bias (no positions).
    A (B, m, H, W, C) stack gives m consecutive vision blocks, (B, m*N_v, d)."""
    images = np.asarray(images)
    if images.ndim == 5:
        b, m = images.shape[:2]
        images = images.reshape((b * m,) + images.shape[2:])
    else:
        b, m = images.shape[0], 1
    pix = np.stack([patchify(im, cfg.patch_size) for im in images]).astype(
        nk._arr(w["patch_proj"]).dtype)
    pix = pix.reshape(b, m * cfg.n_vision, cfg.patch_dim)
    return nk.bias_add(_linear(pix, w["patch_proj"]), w["patch_bias"])


def embed_tokens(cfg: ModelConfig, w: Mapping[str, Any], tokens: np.ndarray,
                 images=None, positions: np.ndarray | None = None):
    """Input embeddings for a (B, T) token batch whose leading positions are vision when
    ``images`` is given (N_v per image). ``positions`` is (T,) or per example (B, T)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if positions is None:
        positions = np.arange(t)
    x = nk.embedding(w["tok_emb"], tokens)
    if images is not None:
        vis = _vision_rows(cfg, w, images)
        nv = vis.shape[1]
        if t > nv:
            x = nk.concat([vis, nk.take(x, np.arange(nv, t), axis=1)], axis=1)
        else:
            x = vis
    pe = nk.embedding(w["pos_emb"], np.broadcast_to(positions, (b, t)))
    return nk.add(x, pe)


def forward(params, tokens: np.ndarray, images=None, positions: np.ndarray | None = None,
            weights: Mapping[str, Any] | None = None, keep: np.ndarray | None = None):
    """Full-sequence (no cache) forward. tokens (B, T) -> logits (B, T, V).

    ``weights`` may hold tape tensors for training; otherwise ``params.weights()``.
    ``positions`` (B, T) and ``keep`` (B, T, T) allow per-example layouts in training;
    by default positions are 0..T-1 and attention is causal.
    """
    cfg = params.config
    w = params.weights() if weights is None else weights
    tokens = np.asarray(tokens)
    t = tokens.shape[1]
    pos = np.arange(t) if positions is None else np.asarray(positions)
    if t > cfg.max_seq or pos.max() >= cfg.max_seq:
        raise CapacityError(f"sequence of {t} exceeds max_seq={cfg.max_seq}")
    x = embed_tokens(cfg, w, tokens, images, pos)
    for l in range(cfg.n_layers):
        if keep is None:
            x, _, _ = _layer(cfg, w, l, x, pos, pos)
        else:
            x, _, _ = _layer(cfg, w, l, x, pos, pos, keep=keep)
    return _logits(cfg, w, x)


# -- public inference API -----------------------------------------------------

def embed_image(params, image: np.ndarray) -> np.ndarray:
    """Vision embeddings U^0 (N_v, d): projected patches plus their position embeddings."""
    cfg = params.config
    if image.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise nk.ShapeError(f"image {image.shape} does not match config")
    w = params.weights()
    vis = _vision_rows(cfg, w, image[None]).data[0]
    return vis + w["pos_emb"][:cfg.n_vision]


def prefill(params, seq: MultimodalSequence, drop_from: int | None = None
            ) -> tuple[KvCache, np.ndarray]:
    """Run the prompt through every layer, returning the cache and last-position logits.

    With ``drop_from=k`` the vision rows are removed from the residual stream at the
    input of layer ``k``: layers >= k neither compute nor cache them. Text keeps its
    original position ids.
    """
    k = params.config.n_layers if drop_from is None else drop_from
    return prefill_family(params, seq, [k])[k]


def prefill_family(params, seq: MultimodalSequence, drop_points: Sequence[int]
                   ) -> dict[int, tuple[KvCache, np.ndarray]]:
    """Prefills for several drop layers at once; layers below each drop point are shared.

    Each entry is bit-identical to ``prefill(params, seq, drop_from=k)``.
    """
    cfg = params.config
    w = params.weights()
    n = len(seq)
    L = cfg.n_layers
    if n < 1:
        raise nk.ContractError("empty sequence")
    if n > cfg.max_seq:
        raise CapacityError(f"sequence of {n} exceeds max_seq={cfg.max_seq}")
    points = sorted(set(int(k) for k in drop_points))
    if not points or points[0] < 0 or points[-1] > L:
        raise IndexError(f"drop layers must lie in [0, {L}]")
    nv = seq.n_vision
    if nv and nv == n and points[0] < L:
        raise nk.ContractError("dropping vision leaves no text positions")
    pos = np.arange(n)
    images = None if seq.image is None else seq.image[None]
    x = embed_tokens(cfg, w, np.asarray([seq.tokens]), images, pos)
    ks: list[np.ndarray] = []
    vs: list[np.ndarray] = []
    out: dict[int, tuple[KvCache, np.ndarray]] = {}
    for l in range(L + 1):
        if l in points and l < L and nv:
            out[l] = _finish(cfg, w, seq, nk.take(x, np.arange(nv, n), axis=1), pos[nv:], l,
                             list(ks), list(vs), [pos] * l)
        if l == L:
            break
        x, k, v = _layer(cfg, w, l, x, pos, pos)
        ks.append(k.data[0])
        vs.append(v.data[0])
    for l in points:
        if l not in out:  # no-op drops share the full run
            out[l] = (KvCache(list(ks), list(vs), [pos.copy() for _ in range(L)], n,
                              seq.vision_span), _logits(cfg, w, x).data[0, -1])
    return out


def _finish(cfg, w, seq, x, pos, start, ks, vs, ps):
    for l in range(start, cfg.n_layers):
        x, k, v = _layer(cfg, w, l, x, pos, pos)
        ks.append(k.data[0])
        vs.append(v.data[0])
        ps.append(pos)
    ps = [p.copy() for p in ps]
    return KvCache(ks, vs, ps, len(seq), seq.vision_span), _logits(cfg, w, x).data[0, -1]


def extend(params, cache: KvCache, token_ids: Sequence[int]) -> np.ndarray:
    """Feed tokens at the next positions (causal among themselves); extends ``cache`` in
    place and returns their logits (n, V)."""
    cfg = params.config
    if cache.n_layers != cfg.n_layers or cache.next_pos == 0:
        raise nk.ContractError("cache does not match params or is empty")
    n = len(token_ids)
    p = cache.next_pos
    if n < 1:
        raise nk.ContractError("no tokens to feed")
    if p + n > cfg.max_seq:
        raise CapacityError(f"position {p + n - 1} exceeds max_seq={cfg.max_seq}")
    w = params.weights()
    qpos = np.arange(p, p + n)
    x = embed_tokens(cfg, w, np.array([list(token_ids)]), None, qpos)
    for l in range(cfg.n_layers):
        kpos = np.concatenate([cache.pos[l], qpos])
        x, k, v = _layer(cfg, w, l, x, qpos, kpos, cache.k[l][None], cache.v[l][None])
        cache.k[l], cache.v[l], cache.pos[l] = k.data[0], v.data[0], kpos
    cache.next_pos = p + n
    return _logits(cfg, w, x).data[0]


def decode_step(params, cache: KvCache, token_id: int) -> np.ndarray:
    """Feed one token at the next position; extends ``cache`` in place by one row per layer."""
    return extend(params, cache, [token_id])[-1]


def greedy_decode(params, cache: KvCache, max_new: int) -> list[int]:
    """Greedy continuation from BOS; argmax ties go to the lowest id. EOS is not returned."""
    if max_new < 1:
        raise nk.ContractError("max_new must be >= 1")
    out: list[int] = []
    tok = Tokenizer.BOS
    for _ in range(max_new):
        tok = int(np.argmax(decode_step(params, cache, tok)))
        if tok == Tokenizer.EOS:
            break
        out.append(tok)
    return out


def generate(params, seq: MultimodalSequence, max_new: int) -> list[int]:
    cache, _ = prefill(params, seq)
    return greedy_decode(params, cache, max_new)


def step_logprobs(params, seq: MultimodalSequence, cache: KvCache | None = None) -> list[float]:
    """Teacher-forced log-probabilities of each answer token, feeding BOS, y1, ... one
    decode step at a time (so scoring a prefix reproduces the same per-step values)."""
    if not seq.answer:
        raise nk.ContractError("answer must be non-empty")
    vocab = params.config.vocab_size
    if any(not 0 <= t < vocab for t in seq.answer):
        raise nk.ContractError("answer token out of vocabulary")
    if cache is None:
        cache, _ = prefill(params, seq)
    out = []
    for prev, t in zip([Tokenizer.BOS] + seq.answer[:-1], seq.answer):
        lsm = nk.log_softmax(decode_step(params, cache, prev).astype(np.float64)).data
        out.append(float(lsm[t]))
    return out


def sequence_logprob(params, seq: MultimodalSequence, given: int = 0,
                     cache: KvCache | None = None) -> float:
    """log P(answer[given:] | answer[:given], U, W), teacher forced."""
    total = 0.0
    for lp in step_logprobs(params, seq, cache)[given:]:
        total += lp
    return total


# -- checkpoint container -----------------------------------------------------

def write_container(path: str | Path, header: Mapping[str, Any],
                    tensors: Mapping[str, np.ndarray]) -> None:
    """magic, u32 LE header length + JSON, then name-sorted tensors as
    {u32 name len, name, u32 rank, u32 dims..., little-endian float32 data}."""
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hdr)), hdr]
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"{path}: truncated")
        out = buf[off:off + n]
        off += n
        return out

    try:
        (hlen,) = struct.unpack("<I", take(4))
        header = json.loads(take(hlen).decode("utf-8"))
        tensors = {}
        while off < len(buf):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n = math.prod(dims)
            tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from None
    return header, tensors


def save_params(params: Params, path: str | Path) -> None:
    write_container(path, json.loads(params.config.to_json()), params.tensors)


def load_params(path: str | Path) -> Params:
    header, tensors = read_container(path)
    if header.get("adapter"):
        raise FormatError(f"{path} holds an adapter, not model params")
    try:
        return Params(ModelConfig.from_dict(header), tensors)
    except (nk.ShapeError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from None
