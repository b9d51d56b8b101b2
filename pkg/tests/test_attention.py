import math

import numpy as np
import numpy.testing as npt
import pytest

from vcrnet import attention as A
from vcrnet import tensor as T
from vcrnet.tensor import Tensor, ShapeError


def np_sdpa(q, k, v, mask=None):
    """Scalar-loop reference: scores, exp, normalize, and mix by hand."""
    m, d_k = q.shape
    n = k.shape[0]
    weights = np.zeros((m, n))
    for i in range(m):
        scores = []
        for j in range(n):
            s = 0.0
            for t in range(d_k):
                s += q[i, t] * k[j, t]
            s = s / math.sqrt(d_k)
            if mask is not None and not mask[j]:
                s = -1e9
            scores.append(s)
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        z = sum(exps)
        for j in range(n):
            weights[i, j] = exps[j] / z
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        for j in range(n):
            out[i] += weights[i, j] * v[j]
    return out, weights


def test_sdpa_single_key_copies_value():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((3, 4)))
    k = Tensor(rng.standard_normal((1, 4)))
    v = Tensor(rng.standard_normal((1, 5)))
    out, w = A.sdpa(q, k, v)
    npt.assert_allclose(w.data, np.ones((3, 1)))
    npt.assert_allclose(out.data, np.repeat(v.data, 3, axis=0))


def test_sdpa_identical_keys_split_evenly():
    q = Tensor(np.array([[1.0, 2.0]]))
    k = Tensor(np.array([[0.5, -0.3], [0.5, -0.3]]))
    v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out, w = A.sdpa(q, k, v)
    npt.assert_allclose(w.data, [[0.5, 0.5]], atol=1e-12)
    npt.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-12)


def test_sdpa_matches_scalar_loop_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(2000 + seed)
        m, n = rng.integers(1, 5, size=2)
        d_k, d_v = rng.integers(1, 5, size=2)
        q = rng.standard_normal((m, d_k))
        k = rng.standard_normal((n, d_k))
        v = rng.standard_normal((n, d_v))
        mask = None
        if n > 1 and seed % 3 == 0:
            mask = rng.random(n) < 0.7
            mask[rng.integers(n)] = True
        out, w = A.sdpa(Tensor(q), Tensor(k), Tensor(v), mask)
        want_out, want_w = np_sdpa(q, k, v, mask)
        worst = max(worst, np.abs(out.data - want_out).max(), np.abs(w.data - want_w).max())
    assert worst < 1e-10


def test_sdpa_masked_weights_are_exact_zeros():
    rng = np.random.default_rng(1)
    mask = np.array([True, False, True, False])
    _, w = A.sdpa(
        Tensor(rng.standard_normal((3, 2))),
        Tensor(rng.standard_normal((4, 2))),
        Tensor(rng.standard_normal((4, 2))),
        mask,
    )
    assert (w.data[:, ~mask] == 0.0).all()
    npt.assert_allclose(w.data.sum(axis=1), np.ones(3), atol=1e-12)


def test_sdpa_rejects_fully_masked():
    z = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        A.sdpa(z, z, z, np.array([False, False]))


def test_sdpa_shape_errors():
    with pytest.raises(ShapeError):
        A.sdpa(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
    with pytest.raises(ShapeError):
        A.sdpa(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        A.sdpa(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))),
               np.array([True]))


def test_multi_head_single_identity_head_reduces_to_sdpa():
    rng = np.random.default_rng(3)
    d = 4
    p = A.MhaParams(
        wq=[Tensor(np.eye(d))], wk=[Tensor(np.eye(d))], wv=[Tensor(np.eye(d))],
        wo=Tensor(np.eye(d)),
    )
    q = rng.standard_normal((3, d))
    k = rng.standard_normal((5, d))
    out, trace = A.multi_head(Tensor(q), Tensor(k), Tensor(k), p)
    want_out, want_w = np_sdpa(q, k, k)
    npt.assert_allclose(out.data, want_out, atol=1e-10)
    npt.assert_allclose(trace.heads[0], want_w, atol=1e-10)


def test_multi_head_identical_heads_identical_traces():
    rng = np.random.default_rng(4)
    base = A.init_mha(rng, 4, 2)
    p = A.MhaParams(wq=[base.wq[0]] * 2, wk=[base.wk[0]] * 2, wv=[base.wv[0]] * 2,
                    wo=base.wo)
    x = Tensor(rng.standard_normal((3, 4)))
    _, trace = A.multi_head(x, x, x, p)
    npt.assert_array_equal(trace.heads[0], trace.heads[1])


def test_multi_head_matches_composition_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(4000 + seed)
        p = A.init_mha(rng, 4, 2)
        m, n = rng.integers(1, 6, size=2)
        q = rng.standard_normal((m, 4))
        k = rng.standard_normal((n, 4))
        v = rng.standard_normal((n, 4))
        out, trace = A.multi_head(Tensor(q), Tensor(k), Tensor(v), p)
        pieces = []
        for i in range(2):
            o_i, w_i = np_sdpa(q @ p.wq[i].data, k @ p.wk[i].data, v @ p.wv[i].data)
            pieces.append(o_i)
            worst = max(worst, np.abs(trace.heads[i] - w_i).max())
        want = np.concatenate(pieces, axis=1) @ p.wo.data
        worst = max(worst, np.abs(out.data - want).max())
    assert worst < 1e-10


def test_guided_unit_single_guide_position():
    rng = np.random.default_rng(5)
    p = A.init_attn_unit(rng, 4, 2, 16)
    out, trace = A.guided_attention_unit(
        Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((1, 4))), p
    )
    assert out.data.shape == (3, 4)
    for head in trace.heads:
        npt.assert_allclose(head, np.ones((3, 1)))


def test_guided_unit_output_shape_tracks_x_not_guide():
    rng = np.random.default_rng(6)
    p = A.init_attn_unit(rng, 4, 2, 16)
    x = Tensor(rng.standard_normal((3, 4)))
    for n in (1, 2, 7):
        out, _ = A.guided_attention_unit(x, Tensor(rng.standard_normal((n, 4))), p)
        assert out.data.shape == (3, 4)


def test_guided_unit_blind_to_guide_order():
    for seed in range(20):
        rng = np.random.default_rng(5000 + seed)
        p = A.init_attn_unit(rng, 4, 2, 16)
        x = Tensor(rng.standard_normal((2, 4)))
        guide = rng.standard_normal((5, 4))
        mask = rng.random(5) < 0.8
        mask[0] = True
        perm = rng.permutation(5)
        base, _ = A.guided_attention_unit(x, Tensor(guide), p, mask)
        shuffled, _ = A.guided_attention_unit(x, Tensor(guide[perm]), p, mask[perm])
        npt.assert_allclose(shuffled.data, base.data, atol=1e-10)


def test_self_attention_single_position_attends_itself():
    rng = np.random.default_rng(7)
    p = A.init_attn_unit(rng, 4, 2, 16)
    _, trace = A.self_attention_unit(Tensor(rng.standard_normal((1, 4))), p)
    for head in trace.heads:
        npt.assert_allclose(head, np.ones((1, 1)))


def test_self_attention_is_guided_with_self_guide():
    rng = np.random.default_rng(8)
    p = A.init_attn_unit(rng, 4, 2, 16)
    x = Tensor(rng.standard_normal((3, 4)))
    a, _ = A.self_attention_unit(x, p)
    b, _ = A.guided_attention_unit(x, x, p)
    npt.assert_array_equal(a.data, b.data)


def test_trace_rows_are_distributions():
    for seed in range(100):
        rng = np.random.default_rng(6000 + seed)
        p = A.init_attn_unit(rng, 4, 2, 8)
        x = Tensor(rng.standard_normal((int(rng.integers(1, 6)), 4)))
        _, trace = A.self_attention_unit(x, p)
        for head in trace.heads:
            npt.assert_allclose(head.sum(axis=1), np.ones(head.shape[0]), atol=1e-6)
            assert (head >= 0.0).all() and (head <= 1.0).all()


def test_unit_grad_check():
    rng = np.random.default_rng(9)
    p = A.init_attn_unit(rng, 4, 2, 8)
    guide = Tensor(rng.standard_normal((3, 4)))
    x = Tensor(rng.standard_normal((2, 4)))

    def wrt_x(t):
        return A.guided_attention_unit(t, guide, p)[0]

    assert T.grad_check(wrt_x, x) < 1e-4

    def wrt_wq(t):
        old = p.mha.wq[0]
        p.mha.wq[0] = t
        try:
            return A.guided_attention_unit(x, guide, p)[0]
        finally:
            p.mha.wq[0] = old

    assert T.grad_check(wrt_wq, p.mha.wq[0]) < 1e-4

    def wrt_ffn(t):
        old = p.ffn.lin1.weight
        p.ffn.lin1.weight = t
        try:
            return A.guided_attention_unit(x, guide, p)[0]
        finally:
            p.ffn.lin1.weight = old

    assert T.grad_check(wrt_ffn, p.ffn.lin1.weight) < 1e-4


def test_unit_ignores_masked_guide_content():
    rng = np.random.default_rng(10)
    p = A.init_attn_unit(rng, 4, 2, 8)
    x = Tensor(rng.standard_normal((2, 4)))
    guide = rng.standard_normal((4, 4))
    mask = np.array([True, True, False, False])
    base, trace = A.guided_attention_unit(x, Tensor(guide), p, mask)
    for head in trace.heads:
        assert (head[:, 2:] == 0.0).all()
    corrupted = guide.copy()
    corrupted[2:] = 1e3
    out, _ = A.guided_attention_unit(x, Tensor(corrupted), p, mask)
    npt.assert_allclose(out.data, base.data, atol=1e-10)


def test_trace_json_shape():
    rng = np.random.default_rng(11)
    p = A.init_attn_unit(rng, 4, 2, 8)
    _, trace = A.self_attention_unit(Tensor(rng.standard_normal((2, 4))), p, label="sa.0")
    trace.query_tokens = ["a", "b"]
    trace.key_tokens = ["a", "b"]
    d = trace.to_json_dict()
    assert d["unit"] == "sa.0"
    assert len(d["heads"]) == 2
    assert np.asarray(d["heads"][0]).shape == (2, 2)
    assert d["query_tokens"] == ["a", "b"]
