"""Relevance-ratio profiling and dominant-layer stratified data selection.

``P(y | U^(<=k), W)`` is read as the answer likelihood with vision dropped from
layer ``k`` on, i.e. vision feeds layers ``0..k-1``. Under that reading the
ratio chain runs from the text-only likelihood (k = 0) to the full-model one
(k = L), and the log-ratios telescope.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vflkit import intervene as iv
from vflkit import model as M
from vflkit.harness import ordered_map
from vflkit.numkit import ContractError


class ProfileError(RuntimeError):
    def __init__(self, sample_id, cause: Exception):
        super().__init__(f"sample {sample_id}: {cause}")
        self.sample_id = sample_id


@dataclass
class RelevanceProfile:
    id: int
    ks: list[int]          # configured k values, ascending, each >= 1
    logp: list[float]      # log P_drop at [0] + ks
    r: list[float]         # R for each k in ks, relative to the previous configured k
    k_star: int
    logp_full: float       # log P_drop at k = L

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def relevance_ratio(params, seq: M.MultimodalSequence, k: int) -> float:
    L = params.config.n_layers
    if not 1 <= k <= L:
        raise IndexError(f"k={k} outside [1, {L}]")
    hi = iv.logprob_dropped(params, seq, iv.DropSpec(k))
    lo = iv.logprob_dropped(params, seq, iv.DropSpec(k - 1))
    return math.exp(hi - lo)


def dominant_layer(profile: RelevanceProfile) -> int:
    """argmax_k R_k over the configured ks; ties go to the smallest k."""
    if not profile.ks:
        raise ContractError("profile has no k values")
    best = 0
    for i in range(1, len(profile.ks)):
        if profile.r[i] > profile.r[best]:
            best = i
    return profile.ks[best]


def _k_set(L: int, ks: Iterable[int] | None) -> list[int]:
    out = sorted(set(range(1, L + 1) if ks is None else (int(k) for k in ks)))
    if not out or out[0] < 1 or out[-1] > L:
        raise IndexError(f"k values must lie in [1, {L}]")
    return out


def profile_sample(params, sample_id: int, seq: M.MultimodalSequence,
                   ks: Iterable[int] | None = None) -> RelevanceProfile:
    L = params.config.n_layers
    kset = _k_set(L, ks)
    points = [0] + kset + ([] if kset[-1] == L else [L])
    try:
        family = M.prefill_family(params, seq, points)
        lp = {k: M.sequence_logprob(params, seq, cache=family[k][0]) for k in points}
    except Exception as e:  # noqa: BLE001 - re-raised with the sample id attached
        raise ProfileError(sample_id, e) from e
    logp = [lp[0]] + [lp[k] for k in kset]
    r = [math.exp(logp[i + 1] - logp[i]) for i in range(len(kset))]
    prof = RelevanceProfile(sample_id, kset, logp, r, 0, lp[L])
    prof.k_star = dominant_layer(prof)
    return prof


def profile_dataset(params, dataset: Sequence[tuple[int, M.MultimodalSequence]],
                    ks: Iterable[int] | None = None, jobs: int = 1) -> list[RelevanceProfile]:
    ks = None if ks is None else list(ks)
    return ordered_map(lambda item: profile_sample(params, item[0], item[1], ks), dataset, jobs)


def _allocate(budget: int, sizes: Sequence[int], order: Sequence[int]) -> list[int]:
    """Split ``budget`` as equally as capacities allow (water-filling): groups smaller
    than the equal share are taken whole, the rest share what is left. Leftover
    units go to uncapped groups in ``order``."""
    alloc = [0] * len(sizes)
    left = budget
    open_ = [i for i in order if sizes[i] > 0]
    while open_:
        share, extra = divmod(left, len(open_))
        capped = [i for i in open_ if sizes[i] <= share]
        if not capped:
            for j, i in enumerate(open_):
                alloc[i] = share + (1 if j < extra else 0)
            break
        for i in capped:
            alloc[i] = sizes[i]
            left -= sizes[i]
        open_ = [i for i in open_ if i not in capped]
    return alloc


def partition_and_sample(profiles: Sequence[RelevanceProfile], budget: int, seed: int,
                         n_strata: int = 4) -> list[int]:
    """Group by dominant layer, split the budget equally across groups, then sample
    uniformly within terminal-likelihood quantile strata of each group.

    Remainders go to larger groups first, then smaller k*. Returns sorted ids.
    """
    if budget < 0 or budget > len(profiles):
        raise ContractError(f"budget {budget} outside [0, {len(profiles)}]")
    groups: dict[int, list[RelevanceProfile]] = {}
    for p in profiles:
        groups.setdefault(p.k_star, []).append(p)
    keys = sorted(groups)
    sizes = [len(groups[k]) for k in keys]
    order = sorted(range(len(keys)), key=lambda i: (-sizes[i], keys[i]))
    quota = _allocate(budget, sizes, order)
    chosen: list[int] = []
    for gi, k in enumerate(keys):
        members = sorted(groups[k], key=lambda p: (p.logp_full, p.id))
        strata = [list(s) for s in np.array_split(np.arange(len(members)), min(n_strata, len(members)))]
        ssizes = [len(s) for s in strata]
        sorder = sorted(range(len(strata)), key=lambda i: (-ssizes[i], i))
        squota = _allocate(quota[gi], ssizes, sorder)
        for si, (idx, q) in enumerate(zip(strata, squota)):
            if q == 0:
                continue
            rng = np.random.default_rng([seed, k, si])
            picks = rng.choice(len(idx), size=q, replace=False)
            chosen.extend(members[idx[int(j)]].id for j in sorted(picks))
    return sorted(chosen)


def group_sizes(profiles: Sequence[RelevanceProfile], selected: Iterable[int]) -> dict[int, int]:
    sel = set(selected)
    out: dict[int, int] = {}
    for p in profiles:
        if p.id in sel:
            out[p.k_star] = out.get(p.k_star, 0) + 1
    return dict(sorted(out.items()))


def selection_digest(ids: Iterable[int]) -> str:
    return hashlib.sha256("\n".join(str(i) for i in sorted(ids)).encode()).hexdigest()


def write_profiles(profiles: Sequence[RelevanceProfile], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in profiles:
            f.write(p.to_json() + "\n")


def read_profiles(path: str | Path) -> list[RelevanceProfile]:
    with open(path, encoding="utf-8") as f:
        return [RelevanceProfile(**json.loads(line)) for line in f if line.strip()]
