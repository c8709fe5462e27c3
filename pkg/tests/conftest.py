from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vflkit import model as M  # noqa: E402
from vflkit import taskgen as tg  # noqa: E402

SMALL = M.ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, image_size=16, patch_size=8,
                      max_seq=48)


@pytest.fixture
def small_cfg() -> M.ModelConfig:
    return SMALL


def random_params(cfg: M.ModelConfig, seed: int, dtype=np.float32, scale: float = 0.5) -> M.Params:
    """Larger-than-init random weights so that every layer matters."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in M.param_shapes(cfg).items():
        if name.endswith("norm1") or name.endswith("norm2") or name == "final_norm":
            a = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            fan = shape[0] if len(shape) == 2 and not name.endswith("_emb") else 1
            a = rng.standard_normal(shape) * scale / np.sqrt(fan)
        tensors[name] = a.astype(dtype)
    return M.Params(cfg, tensors)


def random_seq(cfg: M.ModelConfig, rng: np.random.Generator, n_prompt: int | None = None,
               n_answer: int = 0, image: bool = True) -> M.MultimodalSequence:
    n_prompt = n_prompt or int(rng.integers(2, 8))
    lo = 4  # skip PAD/BOS/EOS/IMG
    prompt = rng.integers(lo, cfg.vocab_size, size=n_prompt).tolist()
    answer = rng.integers(lo, cfg.vocab_size, size=n_answer).tolist() if n_answer else []
    img = rng.random((cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32) if image else None
    return M.MultimodalSequence.build(cfg, img, prompt, answer)


@pytest.fixture
def tok() -> tg.Tokenizer:
    return tg.Tokenizer()


# One summary line per acceptance criterion (tests named test_criterion_NN_<label>).
_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    # setup/teardown only matter when they fail (or skip); a failure is never overwritten
    if (report.when == "call" or report.outcome != "passed") and _CRITERIA.get(name) != "failed":
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_CRITERIA):
        num, label = name[len("test_criterion_"):].split("_", 1)
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(_CRITERIA[name], _CRITERIA[name].upper())
        terminalreporter.write_line(f"{verdict}  criterion {int(num):2d}: {label.replace('_', ' ')}")
