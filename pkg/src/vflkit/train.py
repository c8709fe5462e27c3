"""Base-model training on the synthetic task mix, and layer-masked LoRA fine-tuning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from vflkit import model as M
from vflkit import numkit as nk
from vflkit import taskgen as tg

HELDOUT_BASE = 2**30  # training example seeds live below this, held-out seeds at or above


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 3e-4
    warmup: int = 200
    seed: int = 42
    mix: dict[str, float] = field(default_factory=lambda: {t: 0.25 for t in tg.TASKS})
    eval_every: int = 500
    eval_samples: int = 50
    mismatch: float = 0.5  # share of examples trained with a mismatched prompt context

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if any(t not in tg.TASKS for t in self.mix):
            raise ValueError(f"unknown task in mix: {sorted(self.mix)}")
        if any(w < 0 for w in self.mix.values()) or not math.isclose(sum(self.mix.values()), 1.0):
            raise ValueError("mix weights must be non-negative and sum to 1")
        if not 0.0 <= self.mismatch <= 1.0:
            raise ValueError("mismatch must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Linear warmup over ``warmup`` steps, then constant. ``step`` is 1-based."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


# -- batching -----------------------------------------------------------------

def encode_example(cfg: M.ModelConfig, tok: tg.Tokenizer, prompt: str, answer: str
                   ) -> tuple[list[int], int]:
    """Token ids of [IMG*N_v, prompt, BOS, answer, EOS] and the index of BOS."""
    ids = [tok.IMG] * cfg.n_vision + tok.encode(prompt)
    bos = len(ids)
    return ids + [tok.BOS] + tok.encode(answer) + [tok.EOS], bos


@dataclass
class Batch:
    tokens: np.ndarray               # (B, T) inputs
    images: np.ndarray               # (B, H, W, C), or (B, 2, H, W, C) with a context block
    targets: np.ndarray              # (B, T) next-token ids
    weights: np.ndarray              # (B, T) loss weights, 1 on answer tokens and EOS
    positions: np.ndarray | None = None   # (B, T) position ids for the two-block layout
    keep: np.ndarray | None = None        # (B, T, T) attention mask for the two-block layout


Example = tuple  # (image, prompt, answer) or (image, prompt, answer, context_image | None)


def make_batch(cfg: M.ModelConfig, examples: Sequence[Example],
               tok: tg.Tokenizer | None = None) -> Batch:
    """Right-padded token batch with next-token targets; loss weight 1 only where the
    target is an answer token or the closing EOS.

    When any example carries a context image, every row uses a two-block layout
    ``[ctx vision][vision][prompt][BOS answer EOS]`` where both vision blocks sit at
    positions 0..N_v-1. For a row with a context image the prompt attends only to
    the context block and the answer only to the real one (the answer is about the
    real image); for other rows the context block is masked out, which reduces to
    the plain layout. Training on such rows teaches the answer stream to read the
    image itself instead of relying on prompt rows that have already seen it.
    """
    tok = tok or tg.Tokenizer(cfg.vocab_size)
    nv = cfg.n_vision
    ctx = [ex[3] if len(ex) > 3 else None for ex in examples]
    two = any(c is not None for c in ctx)
    lead = 2 * nv if two else nv
    rows = []
    for ex in examples:
        ids, bos = encode_example(cfg, tok, ex[1], ex[2])
        rows.append(([tok.IMG] * (lead - nv) + ids, bos + lead - nv))
    t = max(len(r) for r, _ in rows) - 1
    n_pos = t - nv if two else t
    if n_pos > cfg.max_seq:
        raise M.CapacityError(f"example of {n_pos} positions exceeds max_seq")
    b = len(rows)
    tokens = np.full((b, t), tok.PAD, dtype=np.int64)
    targets = np.full((b, t), tok.PAD, dtype=np.int64)
    weights = np.zeros((b, t), dtype=np.float32)
    for i, (ids, bos) in enumerate(rows):
        n = len(ids) - 1
        tokens[i, :n] = ids[:-1]
        targets[i, :n] = ids[1:]
        weights[i, bos:n] = 1.0
    real = np.stack([ex[0] for ex in examples])
    if not two:
        return Batch(tokens, real, targets, weights)
    blank = np.zeros_like(real[0])
    images = np.stack([np.stack([blank if c is None else c, r]) for c, r in zip(ctx, real)])
    pos = np.concatenate([np.arange(nv), np.arange(nv), nv + np.arange(t - 2 * nv)])
    keep = np.repeat(np.tril(np.ones((t, t), dtype=bool))[None], b, axis=0)
    keep[:, nv:2 * nv, :nv] = False           # the real block never sees the context block
    for i, (c, (_, bos)) in enumerate(zip(ctx, rows)):
        if c is None:
            keep[i, 2 * nv:, :nv] = False
        else:
            keep[i, 2 * nv:bos, nv:2 * nv] = False
            keep[i, bos:, :nv] = False
    return Batch(tokens, images, targets, weights, np.broadcast_to(pos, (b, t)).copy(), keep)


def make_batches(cfg: M.ModelConfig, examples: Sequence[Example],
                 tok: tg.Tokenizer | None = None) -> list[Batch]:
    """Plain rows and context rows as separate batches, so plain rows skip the
    context block. The layout change is exact up to float rounding."""
    plain = [ex for ex in examples if len(ex) < 4 or ex[3] is None]
    mixed = [ex for ex in examples if len(ex) > 3 and ex[3] is not None]
    return [make_batch(cfg, group, tok) for group in (plain, mixed) if group]


def batch_loss(base: M.Params, batches: Sequence[Batch], weights: Mapping[str, Any]):
    """Weighted token cross-entropy pooled over all batches."""
    logits, targets, w = [], [], []
    for bt in batches:
        out = M.forward(base, bt.tokens, bt.images, bt.positions, weights=weights, keep=bt.keep)
        b, t, v = out.shape
        logits.append(nk.reshape(out, (b * t, v)))
        targets.append(bt.targets.reshape(-1))
        w.append(bt.weights.reshape(-1))
    flat = logits[0] if len(logits) == 1 else nk.concat(logits, axis=0)
    return nk.cross_entropy(flat, np.concatenate(targets), np.concatenate(w))


def sample_examples(cfg: M.ModelConfig, tcfg: TrainConfig, step: int,
                    tasks: Sequence[str] | None = None) -> list[Example]:
    rng = np.random.default_rng([tcfg.seed, step])
    names = list(tasks) if tasks else list(tcfg.mix)
    probs = np.array([tcfg.mix.get(t, 1.0) for t in names], dtype=np.float64)
    probs /= probs.sum()
    picks = rng.choice(len(names), size=tcfg.batch, p=probs)
    seeds = rng.integers(0, HELDOUT_BASE, size=tcfg.batch)
    ctx_seeds = rng.integers(0, HELDOUT_BASE, size=tcfg.batch)
    flags = rng.random(tcfg.batch) < tcfg.mismatch
    out = []
    for i, s, cs, f in zip(picks, seeds, ctx_seeds, flags):
        img, prompt, ans = tg.training_example(names[i], int(s), cfg.image_size, cfg.patch_size)
        ctx = None
        if f:
            ctx = tg.training_example(names[i], int(cs), cfg.image_size, cfg.patch_size)[0]
        out.append((img, prompt, ans, ctx))
    return out


def heldout_examples(cfg: M.ModelConfig, task: str, n: int, seed: int = 0):
    seeds = np.random.default_rng([seed, 977, tg.TASKS.index(task)]).integers(
        HELDOUT_BASE, 2**31 - 1, size=n)
    return [tg.training_example(task, int(s), cfg.image_size, cfg.patch_size) for s in seeds]


# -- evaluation ---------------------------------------------------------------

def max_answer_tokens(task: str) -> int:
    return {"ocr": 6, "grounding": 8, "count": 2, "recognition": 4}.get(task, 8)


def answer_correct(task: str, predicted: str, truth: str) -> bool:
    if task == "grounding":
        from vflkit.harness import iou
        a, b = tg.parse_box(predicted), tg.parse_box(truth)
        return a is not None and b is not None and iou(a, b) > 0.5
    return predicted == truth


def evaluate(params, task: str, examples: Iterable[tuple[np.ndarray, str, str]]) -> float:
    """Greedy-decoding accuracy in percent."""
    cfg = params.config
    tok = tg.Tokenizer(cfg.vocab_size)
    hits = n = 0
    for img, prompt, answer in examples:
        seq = M.MultimodalSequence.build(cfg, img, tok.encode(prompt))
        pred = tok.decode(M.generate(params, seq, max_answer_tokens(task)))
        hits += answer_correct(task, pred, answer)
        n += 1
    return 100.0 * hits / n if n else 0.0


def evaluate_heldout(params, tasks: Sequence[str] = tg.TASKS, n: int = 50,
                     seed: int = 0) -> dict[str, float]:
    return {t: evaluate(params, t, heldout_examples(params.config, t, n, seed)) for t in tasks}


# -- shared optimisation loop -------------------------------------------------

def _fit(base: M.Params, trainable: dict[str, np.ndarray],
         build: Callable[[dict[str, Any]], Mapping[str, Any]], tcfg: TrainConfig,
         tasks: Sequence[str] | None, on_step: Callable[[int, float, dict[str, np.ndarray]], None] | None
         ) -> dict[str, np.ndarray]:
    cfg = base.config
    tok = tg.Tokenizer(cfg.vocab_size)
    state = nk.AdamState()
    current = dict(trainable)
    for step in range(1, tcfg.steps + 1):
        batches = make_batches(cfg, sample_examples(cfg, tcfg, step, tasks), tok)
        tape = nk.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in current.items()}
        loss = batch_loss(base, batches, build(leaves))
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise TrainingDiverged(f"loss became {lval} at step {step} (lr={tcfg.lr_at(step)})")
        grads = nk.backward(tape, loss)
        current, state = nk.adam_step(current, grads, state, tcfg.lr_at(step), step=step)
        if on_step is not None:
            on_step(step, lval, current)
    return current


METRIC_FIELDS = ["step", "loss"] + [f"acc_{t}" for t in tg.TASKS]


def train_base(tcfg: TrainConfig, cfg: M.ModelConfig | None = None,
               log: Callable[[dict[str, Any]], None] | None = None
               ) -> tuple[M.Params, list[dict[str, Any]]]:
    """Train from a seeded init; returns final params and metric rows every ``eval_every`` steps."""
    cfg = cfg or M.ModelConfig()
    init = M.init_params(cfg, tcfg.seed)
    rows: list[dict[str, Any]] = []

    def on_step(step: int, loss: float, cur: dict[str, np.ndarray]) -> None:
        if tcfg.eval_every and (step % tcfg.eval_every == 0 or step == tcfg.steps):
            accs = evaluate_heldout(M.Params(cfg, cur), n=tcfg.eval_samples, seed=tcfg.seed)
            row = {"step": step, "loss": loss, **{f"acc_{t}": a for t, a in accs.items()}}
            rows.append(row)
            if log:
                log(row)

    final = _fit(init, init.tensors, lambda leaves: leaves, tcfg, None, on_step)
    return M.Params(cfg, final), rows


def write_metrics(rows: Sequence[Mapping[str, Any]], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


# -- LoRA ---------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Rank-``rank`` factors A (d x r) and B (r x d) for each adapted matrix of each masked layer."""

    config: M.ModelConfig
    rank: int = 8
    alpha: float = 16.0
    layer_mask: frozenset[int] = frozenset()
    targets: tuple[str, ...] = ("wq", "wv")
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def keys(self, layer: int, target: str) -> tuple[str, str]:
        p = f"layers.{layer}.{target}"
        return p + ".lora_a", p + ".lora_b"

    def header(self) -> dict[str, Any]:
        import json
        return {"adapter": True, "config": json.loads(self.config.to_json()), "rank": self.rank,
                "alpha": self.alpha, "layer_mask": sorted(self.layer_mask),
                "targets": list(self.targets)}


def init_adapter(cfg: M.ModelConfig, layer_mask: Iterable[int], rank: int = 8,
                 alpha: float = 16.0, targets: Sequence[str] = ("wq", "wv"),
                 seed: int = 0) -> LoraAdapter:
    mask = frozenset(int(l) for l in layer_mask)
    bad = [l for l in mask if not 0 <= l < cfg.n_layers]
    if bad:
        raise IndexError(f"layer mask entries {sorted(bad)} outside [0, {cfg.n_layers})")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if any(t not in M.LAYER_KEYS[:6] for t in targets):
        raise ValueError(f"cannot adapt {targets}")
    rng = np.random.default_rng(seed)
    ad = LoraAdapter(cfg, rank, float(alpha), mask, tuple(targets))
    d = cfg.d_model
    for l in sorted(mask):
        for t in ad.targets:
            shape = M.param_shapes(cfg)[f"layers.{l}.{t}"]
            ka, kb = ad.keys(l, t)
            ad.tensors[ka] = (rng.uniform(-1, 1, size=(shape[0], rank)) / math.sqrt(d)).astype(np.float32)
            ad.tensors[kb] = np.zeros((rank, shape[1]), dtype=np.float32)
    return ad


class LoraModel:
    """Base params plus an adapter; forward uses W + (alpha/r)·A·B on adapted matrices."""

    def __init__(self, base: M.Params, adapter: LoraAdapter):
        if adapter.config != base.config:
            raise nk.ContractError("adapter was built for a different model config")
        bad = [l for l in adapter.layer_mask if not 0 <= l < base.config.n_layers]
        if bad:
            raise IndexError(f"layer mask entries {sorted(bad)} out of range")
        self.base = base
        self.adapter = adapter
        self.config = base.config
        self._merged: dict[str, np.ndarray] | None = None

    def merged_weights(self, factors: Mapping[str, Any]) -> dict[str, Any]:
        w: dict[str, Any] = dict(self.base.tensors)
        s = self.adapter.scaling
        for l in sorted(self.adapter.layer_mask):
            for t in self.adapter.targets:
                ka, kb = self.adapter.keys(l, t)
                name = f"layers.{l}.{t}"
                w[name] = nk.add(w[name], nk.scale(nk.matmul(factors[ka], factors[kb]), s))
        return w

    def weights(self) -> dict[str, np.ndarray]:
        if self._merged is None:
            self._merged = {k: nk._arr(v) for k, v in self.merged_weights(self.adapter.tensors).items()}
        return self._merged


def attach_lora(params: M.Params, adapter: LoraAdapter) -> LoraModel:
    return LoraModel(params, adapter)


def finetune_lora(model: LoraModel, tasks: Sequence[str], tcfg: TrainConfig,
                  on_step: Callable[[int, float, dict[str, np.ndarray]], None] | None = None
                  ) -> LoraAdapter:
    """Train only the adapter factors on examples of ``tasks``; the base params are never written."""
    ad = model.adapter
    if not ad.tensors:
        return ad
    trained = _fit(model.base, ad.tensors, model.merged_weights, tcfg, tasks, on_step)
    return LoraAdapter(ad.config, ad.rank, ad.alpha, ad.layer_mask, ad.targets, trained)


def mask_from_report(report: Mapping[str, Any], threshold: float = 5.0) -> list[int]:
    """Layers whose swap change rate exceeds ``threshold`` percent."""
    return sorted(int(r["layer"]) for r in report["layers"] if r["change_rate"] > threshold)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(obj: M.Params | LoraAdapter, path: str | Path) -> None:
    if isinstance(obj, LoraAdapter):
        M.write_container(path, obj.header(), obj.tensors)
    else:
        M.save_params(obj, path)


def load_checkpoint(path: str | Path) -> M.Params | LoraAdapter:
    header, tensors = M.read_container(path)
    if not header.get("adapter"):
        try:
            return M.Params(M.ModelConfig.from_dict(header), tensors)
        except (nk.ShapeError, TypeError, ValueError) as e:
            raise M.FormatError(f"{path}: {e}") from None
    try:
        cfg = M.ModelConfig.from_dict(header["config"])
        ad = LoraAdapter(cfg, int(header["rank"]), float(header["alpha"]),
                         frozenset(header["layer_mask"]), tuple(header["targets"]), tensors)
    except (KeyError, TypeError, ValueError) as e:
        raise M.FormatError(f"{path}: bad adapter header ({e})") from None
    expected = {k for l in ad.layer_mask for t in ad.targets for k in ad.keys(l, t)}
    if set(tensors) != expected:
        raise M.FormatError(f"{path}: adapter tensors do not match its layer mask")
    return ad
