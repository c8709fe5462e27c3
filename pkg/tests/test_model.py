from __future__ import annotations

import math
import struct

import numpy as np
import pytest

from vflkit import model as M
from vflkit import numkit as nk
from vflkit.taskgen import Tokenizer

import reference as ref
from conftest import SMALL, random_params, random_seq


def test_config_invariants():
    cfg = M.ModelConfig()
    assert (cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size) == (8, 64, 4, 256, 72)
    assert cfg.n_vision == 16
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(image_size=30, patch_size=8)


def test_param_shapes_validated():
    p = random_params(SMALL, 0)
    bad = dict(p.tensors)
    bad["out_proj"] = bad["out_proj"][:, :3]
    with pytest.raises(nk.ShapeError):
        M.Params(SMALL, bad)


def test_embed_image_zero_image_gives_positions():
    p = random_params(SMALL, 1)
    p.tensors["patch_bias"] = np.zeros_like(p.tensors["patch_bias"])
    img = np.zeros((SMALL.image_size,) * 2 + (1,), np.float32)
    np.testing.assert_array_equal(M.embed_image(p, img), p.tensors["pos_emb"][:SMALL.n_vision])


def test_embed_image_single_patch_is_matmul():
    cfg = M.ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, image_size=4, patch_size=4, max_seq=8)
    p = random_params(cfg, 2, np.float64)
    img = np.random.default_rng(0).random((4, 4, 1))
    want = img.reshape(1, -1) @ p.tensors["patch_proj"] + p.tensors["patch_bias"] + p.tensors["pos_emb"][:1]
    np.testing.assert_allclose(M.embed_image(p, img), want, rtol=1e-12)


def test_embed_image_row_major_patches_and_determinism():
    p = random_params(SMALL, 3, np.float64)
    img = np.random.default_rng(1).random((16, 16, 1))
    u = M.embed_image(p, img)
    want = ref.patches(img, 8) @ p.tensors["patch_proj"] + p.tensors["patch_bias"] + p.tensors["pos_emb"][:4]
    np.testing.assert_allclose(u, want, rtol=1e-12)
    assert np.array_equal(u, M.embed_image(p, img.copy()))


def test_embed_image_shape_error():
    with pytest.raises(nk.ShapeError):
        M.embed_image(random_params(SMALL, 0), np.zeros((8, 8, 1), np.float32))


@pytest.mark.parametrize("seed", range(4))
def test_prefill_matches_reference_oracle(seed):
    p = random_params(SMALL, seed, np.float64)
    seq = random_seq(SMALL, np.random.default_rng(seed))
    cache, logits = M.prefill(p, seq)
    want = ref.logits_all(SMALL, p.tensors, seq.tokens, seq.image)
    np.testing.assert_allclose(logits, want[-1], atol=1e-10)
    assert all(cache.rows(l) == len(seq) for l in range(SMALL.n_layers))


@pytest.mark.parametrize("seed", range(4))
def test_cache_decoding_matches_no_cache_forward(seed):
    rng = np.random.default_rng(100 + seed)
    p = random_params(SMALL, seed)
    seq = random_seq(SMALL, rng)
    cache, first = M.prefill(p, seq)
    tokens = list(seq.tokens)
    fed = rng.integers(0, SMALL.vocab_size, size=6).tolist()
    full = M.forward(p, np.array([tokens + fed]), seq.image[None]).data[0]
    assert np.max(np.abs(full[len(tokens) - 1] - first)) <= 1e-5
    for j, t in enumerate(fed):
        lg = M.decode_step(p, cache, t)
        assert np.max(np.abs(full[len(tokens) + j] - lg)) <= 1e-5
        assert all(cache.rows(l) == len(tokens) + j + 1 for l in range(SMALL.n_layers))


def test_prefill_deterministic_and_decode_snapshot_repeatable():
    p = random_params(SMALL, 7)
    seq = random_seq(SMALL, np.random.default_rng(7))
    a, la = M.prefill(p, seq)
    b, lb = M.prefill(p, seq)
    assert a.equals(b) and np.array_equal(la, lb)
    x1 = M.decode_step(p, a.copy(), 5)
    x2 = M.decode_step(p, a.copy(), 5)
    assert np.array_equal(x1, x2)


def test_text_only_cache_has_no_vision_rows():
    p = random_params(SMALL, 0)
    seq = random_seq(SMALL, np.random.default_rng(0), image=False)
    cache, _ = M.prefill(p, seq)
    assert cache.vision_span == (0, 0)
    assert cache.rows(0) == len(seq.prompt)


def test_capacity_errors():
    p = random_params(SMALL, 0)
    rng = np.random.default_rng(0)
    with pytest.raises(M.CapacityError):
        M.prefill(p, random_seq(SMALL, rng, n_prompt=SMALL.max_seq))
    seq = random_seq(SMALL, rng, n_prompt=SMALL.max_seq - SMALL.n_vision)
    cache, _ = M.prefill(p, seq)
    with pytest.raises(M.CapacityError):
        M.decode_step(p, cache, 4)


def test_generate_forced_token():
    p = random_params(SMALL, 0)
    t = 9
    p.tensors["out_proj"] = np.zeros_like(p.tensors["out_proj"])
    p.tensors["final_norm"] = np.ones_like(p.tensors["final_norm"])
    p.tensors["out_proj"][:, t] = 0.0
    # an all-zero projection ties everything: lowest id wins
    seq = random_seq(SMALL, np.random.default_rng(0))
    assert M.generate(p, seq, 5) == [0] * 5
    # a constant bias direction: make one column dominate for every hidden state
    p.tensors["out_proj"][:, t] = 1e3 * np.sign(p.tensors["final_norm"])
    p.tensors["tok_emb"][:] = np.abs(p.tensors["tok_emb"]) + 1.0
    p.tensors["pos_emb"][:] = np.abs(p.tensors["pos_emb"])
    for l in range(SMALL.n_layers):
        for k in ("wo", "ff2"):
            p.tensors[f"layers.{l}.{k}"] = np.zeros_like(p.tensors[f"layers.{l}.{k}"])
    seq = M.MultimodalSequence.build(SMALL, None, [5, 6])
    assert M.generate(p, seq, 4) == [t] * 4


def test_generate_stops_at_eos_and_is_deterministic():
    p = random_params(SMALL, 4)
    p.tensors["out_proj"] = np.zeros_like(p.tensors["out_proj"])
    p.tensors["out_proj"][:, Tokenizer.EOS] = 0.0
    seq = random_seq(SMALL, np.random.default_rng(4))
    q = random_params(SMALL, 5)
    assert M.generate(q, seq, 6) == M.generate(q, seq, 6)
    with pytest.raises(nk.ContractError):
        M.generate(q, seq, 0)


def test_single_token_answer_logprob_is_first_decode_softmax():
    p = random_params(SMALL, 8)
    seq = random_seq(SMALL, np.random.default_rng(8), n_answer=1)
    cache, _ = M.prefill(p, seq)
    lg = M.decode_step(p, cache, Tokenizer.BOS).astype(np.float64)
    want = lg[seq.answer[0]] - np.log(np.sum(np.exp(lg - lg.max()))) - lg.max()
    assert M.sequence_logprob(p, seq) == pytest.approx(want, abs=1e-9)


def test_logprob_chain_rule_exact():
    p = random_params(SMALL, 9)
    rng = np.random.default_rng(9)
    seq = random_seq(SMALL, rng, n_answer=2)
    head = M.MultimodalSequence(seq.image, seq.prompt, seq.answer[:1], seq.n_vision)
    assert M.sequence_logprob(p, seq) == M.sequence_logprob(p, head) + M.sequence_logprob(p, seq, given=1)
    # longer answers differ only by the order of float additions
    seq = random_seq(SMALL, rng, n_answer=5)
    head = M.MultimodalSequence(seq.image, seq.prompt, seq.answer[:2], seq.n_vision)
    assert M.sequence_logprob(p, seq) == pytest.approx(
        M.sequence_logprob(p, head) + M.sequence_logprob(p, seq, given=2), abs=1e-12)


def test_logprob_contract_errors():
    p = random_params(SMALL, 0)
    rng = np.random.default_rng(0)
    with pytest.raises(nk.ContractError):
        M.sequence_logprob(p, random_seq(SMALL, rng))
    seq = random_seq(SMALL, rng, n_answer=1)
    seq.answer = [SMALL.vocab_size]
    with pytest.raises(nk.ContractError):
        M.sequence_logprob(p, seq)


def test_hand_weight_one_layer_vocab4():
    # zero attention/MLP output weights make the block an identity, leaving
    # logits = rms(tok + pos) @ out_proj, which is easy to do by hand.
    cfg = M.ModelConfig(n_layers=1, d_model=2, n_heads=1, d_ff=2, vocab_size=4, image_size=1,
                        patch_size=1, max_seq=8, norm_eps=0.0)
    t = {name: np.zeros(shape) for name, shape in M.param_shapes(cfg).items()}
    t["final_norm"] = np.array([1.0, 1.0])
    t["layers.0.norm1"] = np.ones(2)
    t["layers.0.norm2"] = np.ones(2)
    t["tok_emb"] = np.array([[0.0, 3], [1, 0], [0, 1], [1, 1]])
    t["pos_emb"] = np.array([[0.0, 0], [0, 0], [1, 0], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0]])
    t["out_proj"] = np.array([[1.0, 0, 0, -1], [0, 2, 0, 0]])
    p = M.Params(cfg, t)
    seq = M.MultimodalSequence.build(cfg, None, [3, 0], [3])
    # BOS (token 1) is fed at position 2: x = (1,0) + (1,0) = (2,0); rms -> (sqrt2, 0)
    z = [math.sqrt(2), 0.0, 0.0, -math.sqrt(2)]
    want = z[3] - math.log(sum(math.exp(v) for v in z))
    assert M.sequence_logprob(p, seq) == pytest.approx(want, abs=1e-12)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = random_params(SMALL, 11)
    path = tmp_path / "m.ckpt"
    M.save_params(p, path)
    q = M.load_params(path)
    assert q == p and q.config == p.config
    M.save_params(q, tmp_path / "m2.ckpt")
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    M.write_container(path, {"b": 1, "a": 2}, {"zz": np.arange(6, dtype=np.float32).reshape(2, 3),
                                               "aa": np.ones(1, np.float32)})
    raw = path.read_bytes()
    assert raw[:8] == b"VFLCKPT1"
    (n,) = struct.unpack("<I", raw[8:12])
    assert raw[12:12 + n] == b'{"a":2,"b":1}'
    off = 12 + n
    (ln,) = struct.unpack("<I", raw[off:off + 4])
    assert raw[off + 4:off + 4 + ln] == b"aa"
    off += 4 + ln
    assert struct.unpack("<II", raw[off:off + 8]) == (1, 1)
    assert struct.unpack("<f", raw[off + 8:off + 12]) == (1.0,)
    tail = raw[-24:]
    np.testing.assert_array_equal(np.frombuffer(tail, "<f4"), np.arange(6))


def test_checkpoint_format_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC")
    with pytest.raises(M.FormatError):
        M.load_params(bad)
    good = tmp_path / "g.ckpt"
    M.save_params(random_params(SMALL, 0), good)
    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(M.FormatError):
        M.load_params(trunc)
