import numpy as np
import pytest

from submapper.vocab import (
    SubmapDatabase,
    VocabularyTree,
    bow_similarity,
    bow_vector,
    build_vocabulary,
    quantize,
    quantize_batch,
)


def random_descriptors(rng, n, dim=128):
    return rng.uniform(0, 1, (n, dim))


def test_build_two_separable_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 0.01, (50, 8))
    b = rng.normal(10.0, 0.01, (50, 8))
    data = np.vstack([a, b])
    tree = build_vocabulary(data, k=2, depth=1, seed=1)
    assert tree.n_words == 2
    leaves = tree.centers[np.flatnonzero(tree.leaf_word >= 0)]
    got = sorted(leaves.mean(axis=1).round(3))
    want = sorted([a.mean(), b.mean()])
    np.testing.assert_allclose(got, want, atol=0.01)


def test_single_repeated_descriptor():
    data = np.tile(np.arange(8.0), (30, 1))
    tree = build_vocabulary(data, k=3, depth=2, seed=0)
    words = quantize_batch(tree, data)
    assert len(np.unique(words)) == 1


def test_build_determinism():
    rng = np.random.default_rng(1)
    data = random_descriptors(rng, 500, 16)
    t1 = build_vocabulary(data, k=4, depth=2, seed=7)
    t2 = build_vocabulary(data, k=4, depth=2, seed=7)
    np.testing.assert_array_equal(t1.centers, t2.centers)
    np.testing.assert_array_equal(t1.leaf_word, t2.leaf_word)
    np.testing.assert_array_equal(t1.word_weights, t2.word_weights)


def test_build_input_validation():
    with pytest.raises(ValueError):
        build_vocabulary(np.zeros((0, 8)), 2, 2)
    with pytest.raises(ValueError):
        build_vocabulary(np.zeros((10, 8)), 1, 2)


def test_quantize_leaf_center_maps_to_itself():
    rng = np.random.default_rng(2)
    data = random_descriptors(rng, 300, 16)
    tree = build_vocabulary(data, k=3, depth=2, seed=3)
    for node in np.flatnonzero(tree.leaf_word >= 0)[:10]:
        assert quantize(tree, tree.centers[node]) == tree.leaf_word[node]


def test_quantize_matches_brute_force_on_separated_clusters():
    rng = np.random.default_rng(3)
    centers = rng.uniform(0, 100, (8, 16))
    data = np.vstack([c + rng.normal(0, 0.05, (40, 16)) for c in centers])
    tree = build_vocabulary(data, k=2, depth=3, seed=4)
    leaves = np.flatnonzero(tree.leaf_word >= 0)
    for d in data[::17]:
        d2 = ((tree.centers[leaves] - d) ** 2).sum(axis=1)
        assert quantize(tree, d) == tree.leaf_word[leaves[d2.argmin()]]


def test_quantize_batch_matches_scalar():
    rng = np.random.default_rng(4)
    data = random_descriptors(rng, 400, 16)
    tree = build_vocabulary(data, k=4, depth=2, seed=5)
    queries = random_descriptors(rng, 100, 16)
    batch = quantize_batch(tree, queries)
    for i in range(100):
        assert batch[i] == quantize(tree, queries[i])


def make_db(rng, n_submaps=20, desc_per=60, dim=16):
    train = random_descriptors(rng, 2000, dim)
    tree = build_vocabulary(train, k=4, depth=3, seed=6)
    db = SubmapDatabase(tree)
    sets = {}
    for sid in range(n_submaps):
        sets[sid] = random_descriptors(rng, desc_per, dim)
        db.add_submap(sid, sets[sid])
    return db, sets, tree


def test_add_submap_bookkeeping():
    rng = np.random.default_rng(5)
    db, sets, tree = make_db(rng, n_submaps=5)
    assert len(db.vectors) == 5
    with pytest.raises(ValueError):
        db.add_submap(0, sets[0])
    db.add_submap(99, np.zeros((0, 16)))
    assert db.vectors[99] == {}

    # Postings reconstruct stored vectors exactly.
    rebuilt = {sid: {} for sid in db.vectors}
    for word, postings in db.index.items():
        for sid, w in postings:
            rebuilt[sid][word] = w
    for sid, vec in db.vectors.items():
        assert rebuilt[sid] == vec


def test_query_self_similarity():
    rng = np.random.default_rng(6)
    db, sets, tree = make_db(rng)
    db.add_submap(1000, sets[3])  # duplicate content under new id
    ranked = db.query(sets[3], exclude_id=1000)
    assert ranked[0][0] == 3
    assert abs(ranked[0][1] - 1.0) < 1e-12


def test_disjoint_word_sets_score_zero():
    rng = np.random.default_rng(7)
    a = np.zeros((50, 8))
    b = np.full((50, 8), 50.0)
    train = np.vstack([a + rng.normal(0, 0.1, a.shape),
                       b + rng.normal(0, 0.1, b.shape)])
    tree = build_vocabulary(train, k=2, depth=1, seed=8)
    va = bow_vector(tree, a)
    vb = bow_vector(tree, b)
    assert bow_similarity(va, vb) == 0.0
    db = SubmapDatabase(tree)
    db.add_submap(0, a)
    assert db.query(b) == []


def test_ranking_matches_brute_force():
    rng = np.random.default_rng(8)
    db, sets, tree = make_db(rng, n_submaps=20)
    for qid in range(0, 20, 3):
        ranked = db.query_submap(qid)
        vq = db.vectors[qid]
        brute = sorted(((sid, bow_similarity(vq, v))
                        for sid, v in db.vectors.items() if sid != qid),
                       key=lambda kv: (-kv[1], kv[0]))
        assert [sid for sid, _ in ranked] == [sid for sid, s in brute if s > 0]
        for (s1, v1), (s2, v2) in zip(ranked, brute):
            assert s1 == s2 and abs(v1 - v2) < 1e-12


def test_score_symmetry():
    rng = np.random.default_rng(9)
    db, sets, tree = make_db(rng, n_submaps=10)
    for a in range(10):
        for b in range(a + 1, 10):
            sab = bow_similarity(db.vectors[a], db.vectors[b])
            sba = bow_similarity(db.vectors[b], db.vectors[a])
            assert abs(sab - sba) < 1e-15


def test_incremental_equals_rebuild():
    rng = np.random.default_rng(10)
    db, sets, tree = make_db(rng, n_submaps=12)
    db2 = SubmapDatabase(tree)
    for sid in range(12):
        db2.add_submap(sid, sets[sid])
    q = random_descriptors(rng, 40, 16)
    assert db.query(q) == db2.query(q)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    data = random_descriptors(rng, 800, 16)
    tree = build_vocabulary(data, k=3, depth=3, seed=12)
    path = tmp_path / "vocab.npz"
    tree.save(path)
    loaded = VocabularyTree.load(path)
    np.testing.assert_array_equal(tree.centers, loaded.centers)
    np.testing.assert_array_equal(tree.child_start, loaded.child_start)
    np.testing.assert_array_equal(tree.child_count, loaded.child_count)
    np.testing.assert_array_equal(tree.child_index, loaded.child_index)
    np.testing.assert_array_equal(tree.leaf_word, loaded.leaf_word)
    np.testing.assert_array_equal(tree.word_weights, loaded.word_weights)
    q = random_descriptors(rng, 50, 16)
    np.testing.assert_array_equal(quantize_batch(tree, q),
                                  quantize_batch(loaded, q))


def test_query_cost_scales_with_postings_not_pairs():
    # Structural check: a query touches only postings of its own words.
    rng = np.random.default_rng(12)
    db, sets, tree = make_db(rng, n_submaps=30)
    q = sets[0]
    vec_words = set(bow_vector(tree, q))
    touched = sum(len(db.index.get(w, [])) for w in vec_words)
    all_postings = sum(len(p) for p in db.index.values())
    assert touched <= all_postings
    ranked = db.query(q, exclude_id=0)
    assert all(s > 0 for _, s in ranked)
