"""Layer-wise vision probing toolkit for a toy multimodal decoder.

Modules: ``numkit`` (tape autodiff), ``model`` (transformer + KV cache),
``intervene`` (swap/drop), ``taskgen`` (synthetic tasks), ``harness`` (sweeps),
``train`` (base training, LoRA), ``selection`` (relevance-ratio data selection),
``cli``.
"""

__version__ = "0.1.0"
