"""Layer sweeps: swap change rates per task and progressive drop accuracy.

Layers are 0-based everywhere. Per-(sample, layer) work may run on a thread
pool; results are always reduced in (sample, layer) order, so reports do not
depend on ``jobs``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from vflkit import intervene as iv
from vflkit import model as M
from vflkit import taskgen as tg
from vflkit.numkit import ContractError
from vflkit.train import answer_correct, max_answer_tokens

T = TypeVar("T")
R = TypeVar("R")

Box = tuple[int, int, int, int]


def ordered_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def config_hash(cfg: M.ModelConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of inclusive grid rectangles, in cells."""
    for box in (a, b):
        if len(box) != 4 or box[0] > box[2] or box[1] > box[3]:
            raise ContractError(f"malformed box {box}")
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(ix, 0) * max(iy, 0)
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)
    return inter / (area(a) + area(b) - inter)


def _parse_int(s: str) -> int | None:
    return int(s) if s.isdigit() else None


def _hits_source_box(out: str, sample: tg.PairedSample) -> bool:
    pred, src = tg.parse_box(out), tg.parse_box(sample.source_truth)
    return pred is not None and src is not None and iou(pred, src) > 0.5


def score_change(task: str, baseline_out: str, swapped_out: str, sample: tg.PairedSample) -> bool:
    """Whether a swap changed the answer, by the task's rule.

    ocr: text differs. count: both parse as integers and differ. recognition: the
    swapped answer is exactly "no". grounding: the swapped box has IoU > 0.5 with
    the source box. For recognition and grounding an answer that already met the
    rule without intervention is not counted, so an unswapped run scores 0.
    """
    if task == "ocr":
        return baseline_out != swapped_out
    if task == "count":
        a, b = _parse_int(baseline_out), _parse_int(swapped_out)
        return a is not None and b is not None and a != b
    if task == "recognition":
        return swapped_out == "no" and baseline_out != "no"
    if task == "grounding":
        return _hits_source_box(swapped_out, sample) and not _hits_source_box(baseline_out, sample)
    raise ContractError(f"unknown task {task!r}")


def parse_failed(task: str, out: str) -> bool:
    if task == "count":
        return _parse_int(out) is None
    if task == "grounding":
        return tg.parse_box(out) is None
    return False


@dataclass
class LayerRow:
    layer: int | str
    n_samples: int
    n_changed: int
    change_rate: float
    parse_failures: int = 0


@dataclass
class ChangeRateReport:
    task: str
    seed: int
    config_hash: str
    baseline: LayerRow
    layers: list[LayerRow] = field(default_factory=list)
    layer_index_origin: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "layer", "n", "changed", "rate", "parse_failures"])
        for r in [self.baseline, *self.layers]:
            w.writerow([self.task, r.layer, r.n_samples, r.n_changed, f"{r.change_rate:.4f}",
                        r.parse_failures])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChangeRateReport":
        return cls(d["task"], d["seed"], d["config_hash"], LayerRow(**d["baseline"]),
                   [LayerRow(**r) for r in d["layers"]], d.get("layer_index_origin", 0))


def _row(layer, flags: list[bool], fails: int = 0) -> LayerRow:
    n = len(flags)
    c = sum(flags)
    return LayerRow(layer, n, c, 100.0 * c / n, fails)


def sequences_for(params, sample: tg.PairedSample) -> tuple[M.MultimodalSequence, M.MultimodalSequence]:
    cfg = params.config
    prompt = tg.Tokenizer(cfg.vocab_size).encode(sample.prompt)
    return (M.MultimodalSequence.build(cfg, sample.target, prompt),
            M.MultimodalSequence.build(cfg, sample.source, prompt))


def _swap_one(params, sample: tg.PairedSample, layers: Sequence[int], max_new: int
              ) -> tuple[str, list[str]]:
    tok = tg.Tokenizer(params.config.vocab_size)
    t_seq, s_seq = sequences_for(params, sample)
    t_cache, _ = M.prefill(params, t_seq)
    s_cache, _ = M.prefill(params, s_seq)
    base = tok.decode(M.greedy_decode(params, t_cache.copy(), max_new))
    outs = []
    for k in layers:
        spliced = iv.splice_swap(t_cache, iv.SwapSpec(k, s_cache))
        outs.append(tok.decode(M.greedy_decode(params, spliced, max_new)))
    return base, outs


def change_rate_sweep(params, samples: Sequence[tg.PairedSample], layers: Iterable[int],
                      seed: int = 0, jobs: int = 1, max_new: int | None = None) -> ChangeRateReport:
    if not samples:
        raise ContractError("need at least one sample")
    tasks = {s.task for s in samples}
    if len(tasks) != 1:
        raise ContractError(f"samples mix tasks {sorted(tasks)}")
    task = tasks.pop()
    layers = list(layers)
    L = params.config.n_layers
    if any(not 0 <= k < L for k in layers):
        raise IndexError(f"layers must lie in [0, {L})")
    max_new = max_new or max_answer_tokens(task)
    results = ordered_map(lambda s: _swap_one(params, s, layers, max_new), samples, jobs)
    baseline = _row("baseline", [score_change(task, b, b, s) for (b, _), s in zip(results, samples)],
                    sum(parse_failed(task, b) for b, _ in results))
    rows = []
    for j, k in enumerate(layers):
        flags = [score_change(task, b, outs[j], s) for (b, outs), s in zip(results, samples)]
        rows.append(_row(k, flags, sum(parse_failed(task, outs[j]) for _, outs in results)))
    return ChangeRateReport(task, seed, config_hash(params.config), baseline, rows)


@dataclass
class DropRow:
    k: int
    n_samples: int
    n_correct: int
    accuracy: float


@dataclass
class DropSweepReport:
    tasks: list[str]
    seed: int
    config_hash: str
    baseline: DropRow
    rows: list[DropRow] = field(default_factory=list)
    layer_index_origin: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tasks", "k", "n", "correct", "accuracy"])
        for r in self.rows:
            w.writerow(["+".join(self.tasks), r.k, r.n_samples, r.n_correct, f"{r.accuracy:.4f}"])
        return buf.getvalue()


def _drop_one(params, sample: tg.PairedSample, ks: Sequence[int], max_new: int) -> list[bool]:
    tok = tg.Tokenizer(params.config.vocab_size)
    seq, _ = sequences_for(params, sample)
    out = []
    for k in ks:
        pred = tok.decode(iv.generate_dropped(params, seq, iv.DropSpec(k), max_new))
        out.append(answer_correct(sample.task, pred, sample.target_truth))
    return out


def drop_sweep(params, samples: Sequence[tg.PairedSample], k_list: Iterable[int],
               seed: int = 0, jobs: int = 1) -> DropSweepReport:
    """Accuracy on each sample's target image with vision dropped from layer k on.

    The k = L baseline row is always computed and uses the same code path as the
    requested rows, so a requested k = L row equals it exactly.
    """
    ks = sorted(set(int(k) for k in k_list))
    if not ks:
        raise ContractError("k_list is empty")
    if not samples:
        raise ContractError("need at least one sample")
    L = params.config.n_layers
    if ks[0] < 0 or ks[-1] > L:
        raise IndexError(f"drop layers must lie in [0, {L}]")
    all_ks = ks if ks[-1] == L else ks + [L]
    results = ordered_map(
        lambda s: _drop_one(params, s, all_ks, max_answer_tokens(s.task)), samples, jobs)

    def row(j: int) -> DropRow:
        c = sum(r[j] for r in results)
        return DropRow(all_ks[j], len(results), c, 100.0 * c / len(results))

    tasks = sorted({s.task for s in samples}, key=tg.TASKS.index)
    return DropSweepReport(tasks, seed, config_hash(params.config), row(len(all_ks) - 1),
                           [row(j) for j in range(len(ks))])


def write_report(report: ChangeRateReport | DropSweepReport, out: str | Path,
                 figure: bool = True) -> list[Path]:
    """Write ``<stem>.json`` and ``<stem>.csv`` (and ``<stem>.svg``) next to ``out``."""
    out = Path(out)
    stem = out.with_suffix("")
    paths = [stem.with_suffix(".json"), stem.with_suffix(".csv")]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.to_csv(), encoding="utf-8")
    if figure:
        from vflkit import plotting
        svg = stem.with_suffix(".svg")
        if isinstance(report, ChangeRateReport):
            plotting.change_rate_figure([report], svg)
        else:
            plotting.drop_figure(report, svg)
        paths.append(svg)
    return paths
