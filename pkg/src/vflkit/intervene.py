"""Vision Token Swapping (KV-cache splice at one layer) and Vision Token Dropping
(prefill-time pruning of vision rows from a layer onwards)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vflkit import model as M
from vflkit.numkit import ContractError


@dataclass(frozen=True)
class SwapSpec:
    """Replace layer ``layer``'s vision K/V rows with ``source``'s; ``source=None`` means NULL (zero) rows."""

    layer: int
    source: M.KvCache | None = None


@dataclass(frozen=True)
class DropSpec:
    """Vision reaches layers ``0..from_layer-1`` only; ``from_layer == L`` is no intervention."""

    from_layer: int


def splice_swap(target: M.KvCache, spec: SwapSpec) -> M.KvCache:
    """Return a copy of ``target`` whose layer-k vision rows come from the source cache.

    Text rows and all other layers are left exactly as they were: nothing is recomputed.
    """
    k = spec.layer
    if not 0 <= k < target.n_layers:
        raise IndexError(f"swap layer {k} outside [0, {target.n_layers})")
    a, b = target.vision_span
    if b - a == 0:
        raise ContractError("target cache has no vision span")
    if target.rows(k) < b or not np.array_equal(target.pos[k][a:b], np.arange(a, b)):
        raise ContractError("target cache does not hold the full vision span at this layer")
    out = target.copy()
    src = spec.source
    if src is None:
        out.k[k][a:b] = 0
        out.v[k][a:b] = 0
        return out
    if src.n_layers != target.n_layers or src.vision_span != target.vision_span:
        raise ContractError("source and target caches differ in layer count or vision span")
    if src.rows(k) < b or src.k[k].shape[1] != target.k[k].shape[1]:
        raise ContractError("source cache shape does not match target")
    if not np.array_equal(src.pos[k][a:b], target.pos[k][a:b]):
        raise ContractError("source and target vision positions differ")
    if src.next_pos != target.next_pos:
        raise ContractError("source and target sequences differ in length")
    out.k[k][a:b] = src.k[k][a:b]
    out.v[k][a:b] = src.v[k][a:b]
    return out


def generate_swapped(params, target_seq: M.MultimodalSequence, spec: SwapSpec,
                     max_new: int) -> list[int]:
    cache, _ = M.prefill(params, target_seq)
    return M.greedy_decode(params, splice_swap(cache, spec), max_new)


def swap_source(params, source_seq: M.MultimodalSequence, layer: int) -> SwapSpec:
    cache, _ = M.prefill(params, source_seq)
    return SwapSpec(layer, cache)


def _drop_layer(params, spec: DropSpec | int) -> int:
    k = spec.from_layer if isinstance(spec, DropSpec) else int(spec)
    L = params.config.n_layers
    if not 0 <= k <= L:
        raise IndexError(f"drop layer {k} outside [0, {L}]")
    return k


def prefill_with_drop(params, seq: M.MultimodalSequence, spec: DropSpec | int
                      ) -> tuple[M.KvCache, np.ndarray]:
    return M.prefill(params, seq, drop_from=_drop_layer(params, spec))


def generate_dropped(params, seq: M.MultimodalSequence, spec: DropSpec | int,
                     max_new: int) -> list[int]:
    cache, _ = prefill_with_drop(params, seq, spec)
    return M.greedy_decode(params, cache, max_new)


def logprob_dropped(params, seq: M.MultimodalSequence, spec: DropSpec | int,
                    given: int = 0) -> float:
    """Teacher-forced log P_drop(answer | U^(<k), W); decode steps never see the pruned rows."""
    cache, _ = prefill_with_drop(params, seq, spec)
    return M.sequence_logprob(params, seq, given=given, cache=cache)


def visible_rows(cache: M.KvCache) -> set[tuple[int, int]]:
    """(layer, position) pairs a decode step can attend to."""
    return {(l, int(p)) for l in range(cache.n_layers) for p in cache.pos[l]}
