import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from armkit.model import (
    Greedy,
    HookSpec,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    Sample,
    attention_block,
    decode,
    forward,
    init_weights,
    mlp_block,
)
from armkit.weights_io import WeightFileError, load_weights, save_weights


def _straight_line_forward(tokens, w: ModelWeights, cfg: ModelConfig):
    """Scalar-loop float64 recomputation, independent of the numpy path."""
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    def norm(v, g):
        r = math.sqrt(sum(t * t for t in v) / len(v) + cfg.norm_eps)
        return [v[i] / r * float(g[i]) for i in range(len(v))]

    def vecmat(v, m):
        return [sum(v[i] * float(m[i, j]) for i in range(len(v))) for j in range(m.shape[1])]

    def act(x):
        if cfg.activation == "silu":
            return x / (1 + math.exp(-x))
        return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    hs = [[float(t) for t in w.embed[tok]] for tok in tokens]
    S = len(hs)
    for lw in w.layers:
        xs = [norm(h, lw.gamma_attn) for h in hs]
        q = [vecmat(x, lw.wq) for x in xs]
        k = [vecmat(x, lw.wk) for x in xs]
        v = [vecmat(x, lw.wv) for x in xs]
        cat = [[0.0] * d for _ in range(S)]
        for hd in range(H):
            sl = range(hd * dh, (hd + 1) * dh)
            for t in range(S):
                logits = [sum(q[t][i] * k[s][i] for i in sl) / math.sqrt(dh)
                          for s in range(t + 1)]
                m = max(logits)
                e = [math.exp(l - m) for l in logits]
                z = sum(e)
                for i in sl:
                    cat[t][i] = sum(e[s] / z * v[s][i] for s in range(t + 1))
        hs = [[a + b for a, b in zip(hs[t], vecmat(cat[t], lw.wo))] for t in range(S)]
        for t in range(S):
            x = norm(hs[t], lw.gamma_mlp)
            g = [act(u) for u in vecmat(x, lw.w_gate)]
            u = vecmat(x, lw.w_up)
            out = vecmat([a * b for a, b in zip(g, u)], lw.w_down)
            hs[t] = [a + b for a, b in zip(hs[t], out)]
    return np.array([vecmat(norm(h, w.gamma_final), w.unembed) for h in hs])


# -- config and init ------------------------------------------------------------

def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=8, n_heads=3)


def test_init_deterministic_and_seed_sensitive(tiny_cfg):
    a, b, c = init_weights(tiny_cfg, 5), init_weights(tiny_cfg, 5), init_weights(tiny_cfg, 6)
    for (_, x), (_, y), (_, z) in zip(a.named_tensors(), b.named_tensors(), c.named_tensors()):
        assert np.array_equal(x, y)
    big = [(x, z) for (n, x), (_, z) in zip(a.named_tensors(), c.named_tensors())
           if not n.startswith(("gamma", "layers.0.gamma", "layers.1.gamma"))]
    diff = sum(int(np.count_nonzero(x != z)) for x, z in big)
    total = sum(x.size for x, _ in big)
    assert diff / total >= 0.99


def test_init_scale(tiny_cfg):
    w = init_weights(tiny_cfg, 0)
    bound = 1 / math.sqrt(tiny_cfg.d_model)
    assert np.all(np.abs(w.layers[0].wq) <= bound)
    assert np.all(np.abs(w.layers[0].w_down) <= 1 / math.sqrt(tiny_cfg.d_ff))


# -- attention ------------------------------------------------------------------------

def _zero_layer(cfg):
    d, f = cfg.d_model, cfg.d_ff
    z = lambda *s: np.zeros(s, np.float32)
    return LayerWeights(z(d, d), z(d, d), z(d, d), z(d, d), z(d, f), z(d, f), z(f, d),
                        np.ones(d, np.float32), np.ones(d, np.float32))


def test_attention_single_token(tiny_cfg, tiny_weights, np_rng):
    lw = tiny_weights.layers[0]
    x = np_rng.standard_normal((1, tiny_cfg.d_model)).astype(np.float32)
    out, attn, _, _ = attention_block(x, lw, tiny_cfg)
    assert np.all(attn == 1.0)
    assert np.allclose(out, (x @ lw.wv) @ lw.wo, atol=1e-6)


def test_attention_zero_qk_is_uniform_causal(tiny_cfg, tiny_weights, np_rng):
    lw = tiny_weights.layers[0]
    lw0 = LayerWeights(**{**lw.__dict__, "wq": np.zeros_like(lw.wq), "wk": np.zeros_like(lw.wk)})
    x = np_rng.standard_normal((5, tiny_cfg.d_model)).astype(np.float32)
    _, attn, _, _ = attention_block(x, lw0, tiny_cfg)
    for t in range(5):
        assert np.allclose(attn[:, t, : t + 1], 1 / (t + 1))
        assert np.all(attn[:, t, t + 1:] == 0)


def test_attention_two_token_hand_case():
    cfg = ModelConfig(n_layers=1, d_model=2, d_ff=2, n_heads=1, vocab_size=3)
    lw = _zero_layer(cfg)
    lw.wq[:] = np.eye(2)
    lw.wk[:] = np.eye(2)
    lw.wv[:] = [[1, 2], [3, 4]]
    lw.wo[:] = np.eye(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
    out, attn, _, _ = attention_block(x, lw, cfg)
    # token 1: logits [0, 1] / sqrt(2)
    e = math.exp(1 / math.sqrt(2))
    w0, w1 = 1 / (1 + e), e / (1 + e)
    v0, v1 = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert np.allclose(attn[0], [[1, 0], [w0, w1]], atol=1e-7)
    assert np.allclose(out[1], w0 * v0 + w1 * v1, atol=1e-6)
    assert np.allclose(out[0], v0)


def test_attention_shape_mismatch(tiny_cfg, tiny_weights):
    with pytest.raises(ValueError):
        attention_block(np.zeros((2, 3), np.float32), tiny_weights.layers[0], tiny_cfg)


# -- mlp ------------------------------------------------------------------------------

def test_mlp_identity_hook_and_zero_up(tiny_cfg, tiny_weights, np_rng):
    lw = tiny_weights.layers[0]
    x = np_rng.standard_normal((4, tiny_cfg.d_model)).astype(np.float32)
    rec: dict = {}
    out = mlp_block(x, lw, tiny_cfg, lambda a: a, rec)
    assert np.array_equal(rec["act_pre"], rec["act_post"])
    assert np.array_equal(out, mlp_block(x, lw, tiny_cfg))
    lw0 = LayerWeights(**{**lw.__dict__, "w_up": np.zeros_like(lw.w_up)})
    assert np.all(mlp_block(x, lw0, tiny_cfg, lambda a: a + 5) == 0)


def test_mlp_hand_swiglu():
    cfg = ModelConfig(n_layers=1, d_model=1, d_ff=2, n_heads=1, vocab_size=3)
    lw = _zero_layer(cfg)
    lw.w_gate[:] = [[1.0, -2.0]]
    lw.w_up[:] = [[3.0, 0.5]]
    lw.w_down[:] = [[1.0], [2.0]]
    x = np.array([[0.7]], np.float32)
    silu = lambda t: t / (1 + math.exp(-t))
    want = silu(0.7) * 2.1 * 1.0 + silu(-1.4) * 0.35 * 2.0
    assert mlp_block(x, lw, cfg)[0, 0] == pytest.approx(want, rel=1e-6)


def test_mlp_hook_shape_change_rejected(tiny_cfg, tiny_weights):
    x = np.ones((2, tiny_cfg.d_model), np.float32)
    with pytest.raises(ValueError):
        mlp_block(x, tiny_weights.layers[0], tiny_cfg, lambda a: a[:, :3])


# -- forward ------------------------------------------------------------------------

def test_forward_matches_straight_line_oracle_hand_weights():
    cfg = ModelConfig(n_layers=1, d_model=2, d_ff=2, n_heads=1, vocab_size=3, norm_eps=1e-6)
    lw = LayerWeights(
        wq=np.array([[0.5, -0.2], [0.1, 0.3]], np.float32),
        wk=np.array([[0.4, 0.0], [-0.3, 0.2]], np.float32),
        wv=np.array([[1.0, 0.5], [-0.5, 1.0]], np.float32),
        wo=np.array([[0.9, 0.1], [0.2, 0.8]], np.float32),
        w_gate=np.array([[0.6, -0.4], [0.3, 0.7]], np.float32),
        w_up=np.array([[1.1, 0.2], [-0.3, 0.5]], np.float32),
        w_down=np.array([[0.25, -0.5], [0.75, 0.1]], np.float32),
        gamma_attn=np.array([1.0, 0.5], np.float32),
        gamma_mlp=np.array([0.8, 1.2], np.float32),
    )
    w = ModelWeights(np.array([[1, 0], [0, 1], [1, -1]], np.float32), [lw],
                     np.array([1.0, 1.0], np.float32),
                     np.array([[1, 0, -1], [0, 1, 2]], np.float32))
    logits, trace = forward([2, 0], w, cfg)
    assert logits.shape == (2, 3)
    assert np.allclose(logits, _straight_line_forward([2, 0], w, cfg), rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("activation", ["silu", "gelu"])
def test_forward_matches_oracle_random_model(activation):
    cfg = ModelConfig(n_layers=2, d_model=8, d_ff=12, n_heads=2, vocab_size=11,
                      activation=activation)
    w = init_weights(cfg, 3)
    toks = [1, 7, 3, 10, 0, 4]
    logits, _ = forward(toks, w, cfg)
    assert np.allclose(logits, _straight_line_forward(toks, w, cfg), rtol=1e-4, atol=1e-5)


def test_forward_errors(tiny_cfg, tiny_weights):
    with pytest.raises(ValueError):
        forward([tiny_cfg.vocab_size], tiny_weights, tiny_cfg)
    with pytest.raises(ValueError):
        forward([0] * (tiny_cfg.max_seq + 1), tiny_weights, tiny_cfg)
    with pytest.raises(ValueError):
        forward([], tiny_weights, tiny_cfg)
    with pytest.raises(ValueError):
        forward([1], tiny_weights, tiny_cfg, HookSpec(lambda a: a, tiny_cfg.n_layers))


def test_identity_hook_bit_identical(tiny_cfg, tiny_weights):
    toks = [3, 1, 4, 1, 5, 9, 2, 6]
    a, _ = forward(toks, tiny_weights, tiny_cfg)
    b, _ = forward(toks, tiny_weights, tiny_cfg, HookSpec(lambda x: x))
    assert np.array_equal(a, b)


@given(st.lists(st.integers(0, 39), min_size=2, max_size=24))
def test_trace_attention_row_stochastic_and_causal(tiny_cfg, tiny_weights, toks):
    _, tr = forward(toks, tiny_weights, tiny_cfg)
    S = len(toks)
    for lt in tr.layers:
        assert lt.attn.shape == (tiny_cfg.n_heads, S, S)
        assert np.allclose(lt.attn.sum(-1), 1, atol=1e-6)
        assert np.all(lt.attn[:, np.triu_indices(S, 1)[0], np.triu_indices(S, 1)[1]] == 0)


@given(st.lists(st.integers(0, 39), min_size=1, max_size=16),
       st.lists(st.integers(0, 39), min_size=1, max_size=8))
def test_causality_prefix_logits_unchanged(tiny_cfg, tiny_weights, prefix, suffix):
    a, _ = forward(prefix, tiny_weights, tiny_cfg)
    b, _ = forward(prefix + suffix, tiny_weights, tiny_cfg)
    assert np.allclose(a, b[: len(prefix)], atol=1e-5)


def test_zero_w_down_blocks_first_layer_hook(tiny_cfg, tiny_weights):
    lw = tiny_weights.layers[0]
    layers = [LayerWeights(**{**lw.__dict__, "w_down": np.zeros_like(lw.w_down)})]
    w = ModelWeights(tiny_weights.embed, layers + tiny_weights.layers[1:],
                     tiny_weights.gamma_final, tiny_weights.unembed)
    toks = [5, 6, 7, 8, 9]
    a, _ = forward(toks, w, tiny_cfg)
    b, _ = forward(toks, w, tiny_cfg, HookSpec(lambda x: x * 3 + 1))
    assert np.array_equal(a, b)


def test_hook_only_at_its_layer(tiny_cfg, tiny_weights):
    toks = [1, 2, 3]
    _, tr = forward(toks, tiny_weights, tiny_cfg, HookSpec(lambda x: x + 1, 1))
    assert np.array_equal(tr.layers[0].act_pre, tr.layers[0].act_post)
    assert np.array_equal(tr.layers[1].act_post, tr.layers[1].act_pre + 1)


# -- decode ---------------------------------------------------------------------------

def test_decode_examples(tiny_cfg, tiny_weights):
    p = [1, 2, 3]
    assert decode(p, tiny_weights, tiny_cfg, max_new=0) == p
    g1 = decode(p, tiny_weights, tiny_cfg, max_new=6)
    assert g1 == decode(p, tiny_weights, tiny_cfg, max_new=6)
    assert g1[:3] == p and len(g1) == 9
    s = Sample(temperature=1.0, top_p=0.9, seed=11)
    assert decode(p, tiny_weights, tiny_cfg, policy=s, max_new=6) == \
        decode(p, tiny_weights, tiny_cfg, policy=s, max_new=6)


def test_decode_greedy_follows_argmax(tiny_cfg, tiny_weights):
    out = decode([4, 4], tiny_weights, tiny_cfg, policy=Greedy(), max_new=3)
    for t in range(2, 5):
        logits, _ = forward(out[:t], tiny_weights, tiny_cfg)
        assert out[t] == int(np.argmax(logits[-1]))


def test_decode_stops_at_max_seq(tiny_weights, tiny_cfg):
    out = decode([1] * (tiny_cfg.max_seq - 2), tiny_weights, tiny_cfg, max_new=10)
    assert len(out) == tiny_cfg.max_seq


def test_sample_tiny_temperature_is_greedy(tiny_cfg, tiny_weights):
    g = decode([3, 9], tiny_weights, tiny_cfg, max_new=5)
    s = decode([3, 9], tiny_weights, tiny_cfg, policy=Sample(1e-6, 1.0, 4), max_new=5)
    assert g == s


# -- weight container ------------------------------------------------------------------

def test_weights_roundtrip(tmp_path, tiny_cfg, tiny_weights):
    save_weights(tmp_path, tiny_weights, tiny_cfg)
    w2, cfg2 = load_weights(tmp_path)
    assert cfg2 == tiny_cfg
    for (n, a), (_, b) in zip(tiny_weights.named_tensors(), w2.named_tensors()):
        assert a.tobytes() == b.tobytes(), n


def test_weights_manifest_shape(tmp_path, tiny_cfg, tiny_weights):
    save_weights(tmp_path, tiny_weights, tiny_cfg)
    m = json.loads((tmp_path / "weights.json").read_text())
    e = m["tensors"][1]
    assert set(e) == {"name", "shape", "dtype", "byte_offset"}
    assert e["dtype"] == "f32"
    assert m["total_bytes"] == (tmp_path / "weights.bin").stat().st_size


def test_truncated_blob_names_tensor(tmp_path, tiny_cfg, tiny_weights):
    save_weights(tmp_path, tiny_weights, tiny_cfg)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(WeightFileError, match="unembed"):
        load_weights(tmp_path)


def test_oversized_blob_rejected(tmp_path, tiny_cfg, tiny_weights):
    save_weights(tmp_path, tiny_weights, tiny_cfg)
    blob = tmp_path / "weights.bin"
    blob.write_bytes(blob.read_bytes() + b"\0\0\0\0")
    with pytest.raises(WeightFileError):
        load_weights(tmp_path)
