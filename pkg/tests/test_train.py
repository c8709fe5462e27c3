from __future__ import annotations

import json

import numpy as np
import pytest

from vflkit import model as M
from vflkit import numkit as nk
from vflkit import taskgen as tg
from vflkit import train as T

from conftest import random_params
from gradcheck import check

CFG = M.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=64)


def _tcfg(**kw):
    base = dict(steps=3, batch=4, lr=1e-3, warmup=2, seed=5, eval_every=0)
    base.update(kw)
    return T.TrainConfig(**base)


def test_train_config_validation_and_warmup():
    with pytest.raises(ValueError):
        T.TrainConfig(steps=0)
    with pytest.raises(ValueError):
        T.TrainConfig(mix={"ocr": 0.5, "count": 0.4})
    with pytest.raises(ValueError):
        T.TrainConfig(mix={"caption": 1.0})
    t = T.TrainConfig(lr=1e-3, warmup=4)
    assert [t.lr_at(s) for s in (1, 2, 4, 100)] == [2.5e-4, 5e-4, 1e-3, 1e-3]


def test_batch_masks_answer_tokens_only():
    tok = tg.Tokenizer()
    img = np.zeros((32, 32, 1), np.float32)
    bt = T.make_batch(CFG, [(img, "how many squares", "3"), (img, "what is written", "cat")], tok)
    tokens, images, targets, weights = bt.tokens, bt.images, bt.targets, bt.weights
    assert bt.keep is None and bt.positions is None
    nv = CFG.n_vision
    # row 0: IMG*16 + 16 prompt chars, BOS, "3", EOS
    bos = nv + len("how many squares")
    assert tokens[0, bos] == tok.BOS and targets[0, bos] == tok.encode("3")[0]
    assert list(np.nonzero(weights[0])[0]) == [bos, bos + 1]
    assert targets[0, bos + 1] == tok.EOS
    bos1 = nv + len("what is written")
    assert list(np.nonzero(weights[1])[0]) == list(range(bos1, bos1 + 4))
    assert images.shape == (2, 32, 32, 1)


def test_two_block_layout_masks():
    rng = np.random.default_rng(0)
    a, b = (tg.training_example("count", s) for s in (1, 2))
    bt = T.make_batch(CFG, [a + (b[0],), b + (None,)])
    nv = CFG.n_vision
    assert bt.images.shape == (2, 2, 32, 32, 1)
    np.testing.assert_array_equal(bt.images[0, 0], b[0])
    assert not bt.images[1, 0].any()
    np.testing.assert_array_equal(bt.positions[0, :2 * nv], np.r_[np.arange(nv), np.arange(nv)])
    assert bt.positions[0, 2 * nv] == nv
    bos = 2 * nv + len(a[1])
    k = bt.keep[0]
    assert not k[nv:2 * nv, :nv].any()                                 # real block ignores context
    assert k[2 * nv:bos, :nv].all() and not k[2 * nv:bos, nv:2 * nv].any()  # prompt sees context
    assert not k[bos:, :nv].any() and k[bos:, nv:2 * nv].all()            # answer sees real image
    assert not bt.keep[1][2 * nv:, :nv].any() and bt.keep[1][2 * nv:, nv:2 * nv].all()
    assert not k[np.triu_indices(k.shape[0], 1)].any()


def test_two_block_plain_row_equals_plain_layout():
    p = random_params(CFG, 2)
    ex = tg.training_example("ocr", 3)
    other = tg.training_example("count", 4)
    two = T.make_batch(CFG, [ex + (None,), other + (other[0],)])
    one = T.make_batch(CFG, [ex])
    nv = CFG.n_vision
    lg2 = M.forward(p, two.tokens, two.images, two.positions, keep=two.keep).data[0]
    lg1 = M.forward(p, one.tokens, one.images).data[0]
    n = one.tokens.shape[1]
    np.testing.assert_allclose(lg2[nv:nv + n], lg1, atol=1e-5)


def test_split_batches_match_single_batch_loss():
    p = random_params(CFG, 3)
    exs = [tg.training_example(t, s) for t, s in (("ocr", 1), ("count", 2), ("grounding", 3))]
    rows = [exs[0] + (None,), exs[1] + (exs[2][0],), exs[2] + (None,)]
    split = T.make_batches(CFG, rows)
    assert [b.keep is None for b in split] == [True, False]
    whole = float(T.batch_loss(p, [T.make_batch(CFG, rows)], p.tensors).data)
    assert float(T.batch_loss(p, split, p.tensors).data) == pytest.approx(whole, abs=1e-5)


def test_sampler_mismatch_share():
    ex = T.sample_examples(CFG, T.TrainConfig(batch=400, mismatch=0.5), step=1)
    share = sum(e[3] is not None for e in ex) / len(ex)
    assert 0.4 < share < 0.6
    assert all(e[3] is None for e in T.sample_examples(CFG, T.TrainConfig(batch=20, mismatch=0.0), 1))


def test_lr_zero_keeps_params_bit_equal():
    params, _ = T.train_base(_tcfg(lr=0.0), CFG)
    assert params == M.init_params(CFG, 5)


def test_training_is_deterministic_and_moves():
    a, _ = T.train_base(_tcfg(), CFG)
    b, _ = T.train_base(_tcfg(), CFG)
    assert a == b
    assert a != M.init_params(CFG, 5)


def test_metrics_rows_and_csv(tmp_path):
    _, rows = T.train_base(_tcfg(steps=2, eval_every=2, eval_samples=2), CFG)
    assert [r["step"] for r in rows] == [2]
    path = tmp_path / "m.csv"
    T.write_metrics(rows, path)
    assert path.read_text().splitlines()[0] == "step,loss,acc_ocr,acc_grounding,acc_count,acc_recognition"


def test_divergence_aborts(monkeypatch):
    orig = nk.cross_entropy
    monkeypatch.setattr(nk, "cross_entropy", lambda *a: nk.scale(orig(*a), float("nan")))
    with pytest.raises(T.TrainingDiverged, match="step 1"):
        T.train_base(_tcfg(), CFG)


@pytest.mark.parametrize("seed", range(5))
def test_full_model_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(n_layers=int(rng.integers(1, 3)), d_model=8, n_heads=int(rng.choice([1, 2])),
                        d_ff=12, vocab_size=44, image_size=16, patch_size=8, max_seq=48)
    base = random_params(cfg, seed, np.float64)
    exs = [tg.training_example(t, int(rng.integers(1000)), 16, 8) for t in ("grounding", "recognition")]
    ctx = tg.training_example("grounding", int(rng.integers(1000)), 16, 8)[0]
    bt = T.make_batch(cfg, [exs[0] + (ctx,), exs[1] + (None,)])

    def loss(w):
        lg = M.forward(base, bt.tokens, bt.images.astype(np.float64), bt.positions, weights=w,
                       keep=bt.keep)
        b, t, v = lg.shape
        return nk.cross_entropy(nk.reshape(lg, (b * t, v)), bt.targets.reshape(-1),
                                bt.weights.reshape(-1))

    assert check(loss, dict(base.tensors), max_entries=4, seed=seed) < 1e-4


# -- LoRA ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def base():
    return random_params(CFG, 9)


def _logits(model, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((32, 32, 1)).astype(np.float32)
    toks = np.array([[tg.Tokenizer.IMG] * CFG.n_vision + rng.integers(4, 40, 6).tolist()])
    return M.forward(model, toks, img[None]).data


def test_lora_zero_init_is_exact(base):
    lm = T.attach_lora(base, T.init_adapter(CFG, [0, 1], seed=1))
    for s in range(5):
        assert np.array_equal(_logits(lm, s), _logits(base, s))


def test_lora_hand_rank1_delta(base):
    ad = T.init_adapter(CFG, [1], rank=1, alpha=2.0)
    a = np.zeros((16, 1), np.float32)
    b = np.zeros((1, 16), np.float32)
    a[3, 0], b[0, 5] = 0.5, -1.5
    ad.tensors["layers.1.wv.lora_a"], ad.tensors["layers.1.wv.lora_b"] = a, b
    w = T.attach_lora(base, ad).weights()
    delta = w["layers.1.wv"] - base.tensors["layers.1.wv"]
    want = np.zeros((16, 16), np.float32)
    want[3, 5] = 2.0 * 0.5 * -1.5
    np.testing.assert_array_equal(delta, want)
    for k in base.tensors:
        if k != "layers.1.wv":
            assert w[k] is base.tensors[k] or np.array_equal(w[k], base.tensors[k])


def test_lora_mask_range_and_targets(base):
    with pytest.raises(IndexError):
        T.init_adapter(CFG, [CFG.n_layers])
    with pytest.raises(ValueError):
        T.init_adapter(CFG, [0], targets=("norm1",))
    ad = T.init_adapter(CFG, [1])
    assert set(ad.tensors) == {"layers.1.wq.lora_a", "layers.1.wq.lora_b",
                               "layers.1.wv.lora_a", "layers.1.wv.lora_b"}
    assert not ad.tensors["layers.1.wq.lora_b"].any()


def test_lora_finetune_touches_only_masked_factors(base):
    before = base.copy()
    ad = T.init_adapter(CFG, [1], seed=2)
    trained = T.finetune_lora(T.attach_lora(base, ad), ["count"], _tcfg(steps=4, lr=1e-2))
    assert base == before
    assert set(trained.tensors) == set(ad.tensors)
    assert any(not np.array_equal(trained.tensors[k], ad.tensors[k]) for k in ad.tensors)
    w = T.attach_lora(base, trained).weights()
    changed = {k for k in base.tensors if not np.array_equal(w[k], base.tensors[k])}
    assert changed <= {"layers.1.wq", "layers.1.wv"} and changed


def test_lora_empty_mask_stays_base(base):
    ad = T.init_adapter(CFG, [])
    trained = T.finetune_lora(T.attach_lora(base, ad), ["ocr"], _tcfg(steps=2))
    assert np.array_equal(_logits(T.attach_lora(base, trained), 0), _logits(base, 0))


def test_mask_from_report():
    rep = {"layers": [{"layer": 0, "change_rate": 0.0}, {"layer": 1, "change_rate": 5.0},
                      {"layer": 2, "change_rate": 5.5}, {"layer": 3, "change_rate": 80.0}]}
    assert T.mask_from_report(rep) == [2, 3]
    assert T.mask_from_report(rep, threshold=0.0) == [1, 2, 3]


def test_checkpoints_round_trip(tmp_path, base):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    T.save_checkpoint(base, p1)
    T.save_checkpoint(T.load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    ad = T.init_adapter(CFG, [0], rank=2, seed=3)
    T.save_checkpoint(ad, p1)
    back = T.load_checkpoint(p1)
    assert isinstance(back, T.LoraAdapter) and back.layer_mask == ad.layer_mask
    assert all(np.array_equal(back.tensors[k], ad.tensors[k]) for k in ad.tensors)
    hdr_len = int.from_bytes(p1.read_bytes()[8:12], "little")
    assert json.loads(p1.read_bytes()[12:12 + hdr_len])["adapter"] is True
    p2.write_bytes(p1.read_bytes()[:-3])
    with pytest.raises(M.FormatError):
        T.load_checkpoint(p2)
