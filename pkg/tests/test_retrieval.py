import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modalfuse.data import Dataset, ItemRecord, Label, LabeledPair, QueryRecord
from modalfuse.errors import ConfigError, DomainError, StructuralError
from modalfuse.fusion import Variant, fuse_item, init_params
from modalfuse.numerics import layer_norm
from modalfuse.retrieval import (
    ablate_fusions,
    analyze_gates,
    build_index,
    evaluate,
    gates_csv,
    ndcg_at_k,
    retrieve_topk,
)
from modalfuse.synth import generate, preset
from modalfuse.trainer import Stage, TrainConfig, adopt_variant, new_params, run_stage2_both, run_stage3


def items_from(rng, n, d, tag="c"):
    return [ItemRecord(f"x{i:03d}", rng.standard_normal(d), rng.standard_normal(d), tag) for i in range(n)]


def test_build_index_examples():
    p = init_params(4, Variant.MOE_BILINEAR, seed=1)
    empty = build_index([], p)
    assert len(empty) == 0 and retrieve_topk(empty, np.ones(4), p, 3).item_ids == []
    rng = np.random.default_rng(0)
    its = items_from(rng, 12, 4)
    idx = build_index(its, p)
    for row, it in zip(idx.embeddings, its):
        h = fuse_item(it.text_embedding, it.image_embedding, p).h_x
        np.testing.assert_allclose(row, h / np.linalg.norm(h), atol=1e-12)
    moe = init_params(4, Variant.MOE)
    moe.gate_b[:] = 60.0
    idx = build_index(its, moe)
    for row, it in zip(idx.embeddings, its):
        h = layer_norm(it.text_embedding, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(row, h / np.linalg.norm(h), atol=1e-12)
    with pytest.raises(StructuralError):
        build_index(items_from(rng, 2, 3), p)


def test_retrieve_examples():
    p = init_params(3, Variant.MOE)
    p.gate_b[:] = 60.0
    one = build_index([ItemRecord("a", np.array([1.0, 2, 3]), np.ones(3))], p)
    assert retrieve_topk(one, np.array([1.0, 0, 0]), p, 5).item_ids == ["a"]
    # identity adapters: query equal to a normalized fused embedding scores 1
    its = [ItemRecord(f"x{i}", v, v) for i, v in enumerate(np.array([[2.0, -1, -1], [-1, 2, -1], [-1, -1, 2]]))]
    idx = build_index(its, p)
    res = retrieve_topk(idx, idx.embeddings[1], p, 3)
    assert res.item_ids[0] == "x1" and res.scores[0] == pytest.approx(1.0, abs=1e-12)
    assert res.scores == sorted(res.scores, reverse=True)
    with pytest.raises(DomainError):
        retrieve_topk(idx, np.zeros(3), p, 1)
    with pytest.raises(ConfigError):
        retrieve_topk(idx, np.ones(3), p, 0)


def test_retrieve_matches_sort_oracle_50():
    rng = np.random.default_rng(1)
    p = init_params(8, Variant.MOE_BILINEAR, seed=3)
    idx = build_index(items_from(rng, 50, 8), p)
    q = rng.standard_normal(8)
    res = retrieve_topk(idx, q, p, 10)
    qa = p.query_adapter @ q
    s = idx.embeddings @ (qa / np.linalg.norm(qa))
    assert res.item_ids == sorted(idx.item_ids, key=lambda i: (-s[idx.item_ids.index(i)], i))[:10]


def test_ties_by_item_id():
    p = init_params(2, Variant.MOE)
    v = np.array([1.0, 0.0])
    its = [ItemRecord(i, v, v) for i in ("b", "c", "a")]
    assert retrieve_topk(build_index(its, p), np.array([0.0, 1.0]), p, 3).item_ids == ["a", "b", "c"]


def test_ndcg_examples():
    assert ndcg_at_k([2, 2, 1, 0], 3) == 1.0
    assert ndcg_at_k([0, 0, 0], 2) == 0.0
    assert ndcg_at_k([2, 0, 1], 3, ideal=[2, 1, 0]) == pytest.approx(3.5 / (3 + 1 / np.log2(3)), abs=1e-15)
    assert ndcg_at_k([2, 0], 2, ideal=[2, 2, 1]) < 1.0
    with pytest.raises(ConfigError):
        ndcg_at_k([1], 0)


gain_lists = st.lists(st.integers(0, 2), min_size=1, max_size=20)


@given(gain_lists, st.integers(1, 25), st.randoms(use_true_random=False))
def test_ndcg_properties(gains, k, rnd):
    v = ndcg_at_k(gains, k)
    assert 0.0 <= v <= 1.0
    # permuting equal gains is a no-op by construction; promoting a higher gain never hurts
    for i in range(len(gains) - 1):
        if gains[i + 1] > gains[i]:
            swapped = gains[:i] + [gains[i + 1], gains[i]] + gains[i + 2:]
            assert ndcg_at_k(swapped, k) >= v - 1e-15
            break


def _constructed():
    d = 4
    eye = np.eye(d)
    qs = [QueryRecord(f"q{i}", eye[i]) for i in range(2)]
    its, prs = [], []
    for i in range(2):
        its.append(ItemRecord(f"h{i}", eye[i], eye[i], "c"))
        its.append(ItemRecord(f"l{i}", eye[i] + eye[2], eye[i] + eye[2], "c"))
        prs += [LabeledPair(f"q{i}", f"h{i}", Label.HIGH, Label.HIGH),
                LabeledPair(f"q{i}", f"l{i}", Label.LOW, Label.LOW)]
    qs.append(QueryRecord("q_unlabeled", eye[3]))
    return Dataset(d, qs, its, prs)


def test_evaluate_constructed_optimum():
    ds = _constructed()
    p = init_params(4, Variant.MOE)
    rep = evaluate(ds, p)
    assert rep.get("desirability", 1) == 1.0 and rep.get("relevance", 1) == 1.0
    assert rep.query_count == 2 and rep.excluded_queries == 1
    assert sum(len(v) for v in rep.values.values()) == 8
    assert rep.to_csv().splitlines()[0] == "objective,cutoff,value,query_count"
    assert len(rep.to_csv().splitlines()) == 9


def test_evaluate_order_invariant_and_threads(monkeypatch):
    ds = generate(preset(dim=16, n_topics=4, n_queries=150, items_per_query=4))
    p = init_params(16, Variant.MOE_BILINEAR, seed=2)
    a = evaluate(ds, p, (1, 3, 10))
    rng = np.random.default_rng(0)
    shuffled = Dataset(ds.dim, [ds.queries[i] for i in rng.permutation(len(ds.queries))],
                       [ds.items[i] for i in rng.permutation(len(ds.items))], ds.pairs[::-1])
    assert evaluate(shuffled, p, (1, 3, 10)).values == a.values
    monkeypatch.setenv("MODALFUSE_THREADS", "1")
    serial = evaluate(ds, p, (1, 3, 10))
    monkeypatch.setenv("MODALFUSE_THREADS", "4")
    assert evaluate(ds, p, (1, 3, 10)).to_csv() == serial.to_csv() == a.to_csv()


def test_trained_beats_random():
    ds = generate(preset(dim=16, n_topics=4, n_queries=40, items_per_query=10))
    cfg = TrainConfig(epochs=5)
    p0 = new_params(16, cfg)
    trained = run_stage3(ds, p0, cfg).params
    r0, r1 = evaluate(ds, p0), evaluate(ds, trained)
    for obj in ("desirability", "relevance"):
        for c in (1, 3, 9, 24):
            assert r1.get(obj, c) >= r0.get(obj, c)


def test_gates():
    ds = generate(preset(dim=8, n_topics=2, n_queries=6, items_per_query=3))
    rows = analyze_gates(ds, init_params(8, Variant.MOE))
    assert [r.category for r in rows] == ["image_driven", "joint", "text_driven", "overall"]
    assert all(r.mean_alpha == 0.5 for r in rows)
    mlp = analyze_gates(ds, init_params(8, Variant.MLP))
    assert all(r.mean_alpha is None for r in mlp)
    assert "undefined" in gates_csv(mlp)
    untagged = Dataset(8, ds.queries, [ItemRecord(i.item_id, i.text_embedding, i.image_embedding)
                                       for i in ds.items], ds.pairs)
    assert analyze_gates(untagged, init_params(8, Variant.MOE))[0].category == "untagged"


def test_ablation_harness():
    ds = generate(preset(dim=16, n_topics=4, n_queries=30, items_per_query=6))
    base = TrainConfig(epochs=2)
    res = ablate_fusions(ds, base, [Variant.MOE])
    assert list(res.reports) == ["MoE"]
    cfg = base.replace(variant=Variant.MOE)
    s2 = run_stage2_both(ds, new_params(16, base), base)
    direct = run_stage3(ds, adopt_variant(s2, cfg), cfg).params
    assert evaluate(ds, direct, res.cutoffs).values == res.reports["MoE"].values
    again = ablate_fusions(ds, base, [Variant.MOE, Variant.MLP])
    assert again.reports["MoE"].values == res.reports["MoE"].values
    assert len(set(again.stage2_checksums.values())) == 1
    assert again.table() == ablate_fusions(ds, base, [Variant.MOE, Variant.MLP]).table()
    with pytest.raises(ConfigError):
        ablate_fusions(ds, base, [])
