import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modalfuse.errors import ConfigError, StructuralError
from modalfuse.fusion import (
    FusionParams,
    Variant,
    apply_adapter,
    bilinear_interact,
    fuse_backward,
    fuse_forward,
    fuse_item,
    gate_alpha,
    init_params,
    moe_fuse,
    score,
)
from modalfuse.numerics import finite_diff_check, layer_norm, normalize_rows, normalize_rows_backward

small = st.floats(-5, 5, allow_nan=False)


def test_gate_examples():
    p = init_params(2, Variant.MOE)
    assert gate_alpha([1, 0], [0, 1], p) == 0.5
    p.gate_b[:] = 20.0
    assert abs(gate_alpha([1, 0], [0, 1], p) - 1.0) < 1e-8
    p.gate_b[:] = 0.0
    p.gate_w[:] = [1, 0, 0, 0]
    assert gate_alpha([1, 0], [0, 0], p) == pytest.approx(0.731058, abs=1e-6)
    with pytest.raises(StructuralError):
        gate_alpha([1, 0, 0], [0, 0, 0], p)


@given(st.integers(1, 6).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=small),
                                                     arrays(np.float64, d, elements=small),
                                                     arrays(np.float64, 2 * d, elements=small))))
def test_gate_strictly_inside(args):
    t, v, w = args
    p = init_params(t.size, Variant.MOE)
    p.gate_w = w / 10
    a = gate_alpha(t, v, p)
    assert 0.0 < a < 1.0


def test_moe_fuse_examples():
    t, v = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    np.testing.assert_array_equal(moe_fuse(t, v, 1.0), t)
    np.testing.assert_array_equal(moe_fuse(t, v, 0.0), v)
    np.testing.assert_array_equal(moe_fuse([1, 0], [0, 1], 0.5), [0.5, 0.5])
    with pytest.raises(StructuralError):
        moe_fuse([1, 0], [1, 0, 0], 0.5)
    with pytest.raises(ConfigError):
        moe_fuse([1, 0], [0, 1], 1.5)


@given(st.integers(1, 6).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=small),
                                                     arrays(np.float64, d, elements=small))),
       st.floats(0, 1))
def test_moe_fuse_on_segment(tv, a):
    t, v = tv
    h = moe_fuse(t, v, a)
    assert np.all(h >= np.minimum(t, v) - 1e-12)
    assert np.all(h <= np.maximum(t, v) + 1e-12)


def _hand_params():
    p = init_params(2, Variant.MOE_BILINEAR, heads=1, proj_dim=1, hidden=1)
    p.bilinear_t = np.array([[[1.0, 0.0]]])
    p.bilinear_i = np.array([[[0.0, 1.0]]])
    p.mlp_w1 = np.array([[1.0]])
    p.mlp_b1 = np.zeros(1)
    p.mlp_w2 = np.ones((2, 1))
    p.mlp_b2 = np.zeros(2)
    return p


def test_bilinear_examples():
    p = _hand_params()
    np.testing.assert_array_equal(bilinear_interact([2, 0], [0, 3], p), [6.0, 6.0])
    np.testing.assert_array_equal(bilinear_interact([2, 0], [0, 0], p), [0.0, 0.0])
    with pytest.raises(ConfigError):
        bilinear_interact([1, 0], [0, 1], init_params(2, Variant.MOE))


def test_bilinear_norm_gradient():
    rng = np.random.default_rng(4)
    p = init_params(6, Variant.MOE_BILINEAR, heads=2, proj_dim=2, hidden=5, seed=1)
    t, v = rng.standard_normal(6), rng.standard_normal(6)

    def f(tensors):
        q = p.with_tensors(tensors)
        out = fuse_forward(t[None], v[None], q)
        y = out.interaction[0]
        n = np.linalg.norm(y)
        # push d|y|/dy back through the interaction branch only
        zin, a1, _ = out.cache["mlp"]
        da1 = ((y / n) @ q.mlp_w2) * (a1[0] > 0)
        dz = (da1 @ q.mlp_w1).reshape(out.cache["pt"].shape)[0]
        return n, {"bilinear_t": np.einsum("kp,d->kpd", dz * out.cache["pv"][0], t)}

    rep = finite_diff_check(f, {"bilinear_t": p.bilinear_t})
    assert rep.max_error < 1e-4


def test_fuse_item_zero_interaction_equals_moe():
    p = init_params(4, Variant.MOE_BILINEAR, seed=2)
    p.gate_w = np.linspace(-1, 1, 8)
    for name in ("bilinear_t", "bilinear_i", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
        setattr(p, name, np.zeros_like(getattr(p, name)))
    moe = p.copy()
    moe.variant = Variant.MOE
    rng = np.random.default_rng(5)
    for _ in range(20):
        t, v = rng.standard_normal(4), rng.standard_normal(4)
        tr = fuse_item(t, v, p)
        np.testing.assert_array_equal(tr.h_x, fuse_item(t, v, moe).h_x)
        np.testing.assert_allclose(tr.h_x, layer_norm(tr.h_f, np.ones(4), np.zeros(4)), atol=1e-12)
        assert tr.interaction_norm == 0.0


def test_fuse_item_saturated_gate():
    p = init_params(3, Variant.MOE)
    p.gate_b[:] = 50.0
    t, v = np.array([1.0, -2.0, 0.5]), np.array([3.0, 3.0, -1.0])
    tr = fuse_item(t, v, p)
    np.testing.assert_allclose(tr.h_x, layer_norm(t, np.ones(3), np.zeros(3)), atol=1e-12)


def test_fuse_item_matches_scripted_evaluation():
    p = init_params(4, Variant.MOE_BILINEAR, heads=4, proj_dim=1, hidden=4, seed=11)
    p.gate_w = np.arange(8) / 10.0 - 0.3
    p.gate_b = np.array([0.1])
    p.ln_gain = np.array([1.0, 2.0, 0.5, 1.5])
    p.ln_bias = np.array([0.0, 0.1, -0.1, 0.2])
    t = np.array([1.0, 0.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0, 0.0])
    # straight-line evaluation, one scalar at a time
    z = sum(p.gate_w[i] * t[i] for i in range(4)) + sum(p.gate_w[4 + i] * v[i] for i in range(4)) + p.gate_b[0]
    a = 1.0 / (1.0 + np.exp(-z))
    h_f = [a * t[i] + (1 - a) * v[i] for i in range(4)]
    feats = []
    for k in range(4):
        pt = sum(p.bilinear_t[k, 0, i] * t[i] for i in range(4))
        pv = sum(p.bilinear_i[k, 0, i] * v[i] for i in range(4))
        feats.append(pt * pv)
    hid = [max(0.0, sum(p.mlp_w1[j, k] * feats[k] for k in range(4)) + p.mlp_b1[j]) for j in range(4)]
    inter = [sum(p.mlp_w2[i, j] * hid[j] for j in range(4)) + p.mlp_b2[i] for i in range(4)]
    pre = [h_f[i] + inter[i] for i in range(4)]
    mu = sum(pre) / 4
    var = sum((x - mu) ** 2 for x in pre) / 4
    expect = [p.ln_gain[i] * (pre[i] - mu) / np.sqrt(var + 1e-5) + p.ln_bias[i] for i in range(4)]
    tr = fuse_item(t, v, p)
    np.testing.assert_allclose(tr.h_x, expect, atol=1e-12)
    assert tr.alpha == pytest.approx(a, abs=1e-15)
    assert tr.interaction_norm == pytest.approx(np.linalg.norm(inter), abs=1e-12)


def test_fuse_item_deterministic_and_mlp_placeholder():
    rng = np.random.default_rng(6)
    t, v = rng.standard_normal(8), rng.standard_normal(8)
    for var in Variant:
        p = init_params(8, var, seed=3)
        a, b = fuse_item(t, v, p), fuse_item(t, v, p)
        assert np.array_equal(a.h_x, b.h_x) and a.alpha == b.alpha
        assert 0.0 <= a.alpha <= 1.0
    assert fuse_item(t, v, init_params(8, Variant.MLP)).alpha == 0.5


def test_attention_is_softmax_of_two_scores():
    p = init_params(3, Variant.ATTENTION, seed=4)
    p.attn_b = np.array([0.3, -0.2])
    t, v = np.array([0.2, -1.0, 0.4]), np.array([1.0, 0.5, -0.3])
    s = np.array([p.attn_w[0] @ t + p.attn_b[0], p.attn_w[1] @ v + p.attn_b[1]])
    w = np.exp(s) / np.exp(s).sum()
    tr = fuse_item(t, v, p)
    assert tr.alpha == pytest.approx(w[0], abs=1e-15)
    np.testing.assert_allclose(tr.h_f, w[0] * t + w[1] * v, atol=1e-15)


def test_adapter():
    p = init_params(2, Variant.MOE)
    np.testing.assert_array_equal(apply_adapter([0.3, -1], "text", p), [0.3, -1])
    p.image_adapter = 2 * np.eye(2)
    np.testing.assert_array_equal(apply_adapter([1, -1], "image", p), [2, -2])
    p.query_adapter = np.zeros((2, 2))
    np.testing.assert_array_equal(apply_adapter([1, 5], "query", p), [0, 0])
    with pytest.raises(StructuralError):
        apply_adapter([1, 2, 3], "query", p)
    with pytest.raises(ConfigError):
        apply_adapter([1, 2], "audio", p)


def test_score_scale_invariant():
    rng = np.random.default_rng(7)
    q, h = rng.standard_normal(5), rng.standard_normal(5)
    assert score(3.5 * q, h) == pytest.approx(score(q, h), abs=1e-15)


@pytest.mark.parametrize("variant", list(Variant))
def test_score_gradient_through_fusion(variant):
    rng = np.random.default_rng(8)
    d = 6
    base = init_params(d, variant, heads=2, proj_dim=2, hidden=5, seed=9)
    for name in FusionParams.TENSORS:
        arr = getattr(base, name)
        setattr(base, name, arr + 0.3 * rng.standard_normal(arr.shape))
    q = rng.standard_normal(d)
    t, v = rng.standard_normal(d), rng.standard_normal(d)
    names = base.fusion_tensor_names()

    def f(tensors):
        p = base.with_tensors(tensors)
        out = fuse_forward(t[None], v[None], p)
        xn, norm = normalize_rows(out.h_x)
        qn = q / np.linalg.norm(q)
        s = float(xn[0] @ qn)
        d_hx = normalize_rows_backward(xn, norm, qn[None])
        _, _, grads = fuse_backward(out, d_hx, p)
        return s, {k: grads[k] for k in names}

    rep = finite_diff_check(f, {k: getattr(base, k) for k in names})
    assert rep.max_error < 1e-4, rep.per_tensor


def test_params_validation():
    p = init_params(4, Variant.MOE_MLP)
    assert p.mlp_w1.shape == (4, 8)
    assert init_params(8, Variant.MOE_BILINEAR).mlp_w1.shape == (8, 8)
    p.gate_w = np.zeros(3)
    with pytest.raises(StructuralError, match="gate_w"):
        p.validate()
    with pytest.raises(ConfigError):
        Variant.parse("transformer")
    assert Variant.parse("moe+bilinear") is Variant.MOE_BILINEAR
