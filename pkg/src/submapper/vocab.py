"""Vocabulary-tree bag-of-words retrieval over submap descriptors.

A hierarchical k-means tree quantizes descriptors to leaf words; a
database of submaps keeps one L1-normalized TF-IDF vector per submap
plus an inverted index, so a query touches only the postings of the
words it contains rather than every stored submap.

Similarity between two normalized vectors a, b is (2 - ||a - b||_1) / 2,
which equals sum_w min(a_w, b_w) and is accumulated from the index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VOCAB_FORMAT_VERSION = 1


@dataclass
class VocabularyTree:
    branching: int
    depth: int
    centers: np.ndarray          # (n_nodes, dim)
    child_start: np.ndarray      # (n_nodes,) index into child_index
    child_count: np.ndarray      # (n_nodes,)
    child_index: np.ndarray      # flat child node ids
    leaf_word: np.ndarray        # (n_nodes,) word id or -1 for internal nodes
    word_weights: np.ndarray     # (n_words,) IDF weights
    seed: int = 0

    @property
    def n_words(self):
        return len(self.word_weights)

    def save(self, path):
        np.savez(path, version=VOCAB_FORMAT_VERSION, branching=self.branching,
                 depth=self.depth, centers=self.centers,
                 child_start=self.child_start, child_count=self.child_count,
                 child_index=self.child_index, leaf_word=self.leaf_word,
                 word_weights=self.word_weights, seed=self.seed)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            if int(z["version"]) != VOCAB_FORMAT_VERSION:
                raise ValueError(f"unsupported vocabulary version {z['version']}")
            return cls(branching=int(z["branching"]), depth=int(z["depth"]),
                       centers=z["centers"], child_start=z["child_start"],
                       child_count=z["child_count"], child_index=z["child_index"],
                       leaf_word=z["leaf_word"], word_weights=z["word_weights"],
                       seed=int(z["seed"]))


def _kmeans(data, k, rng, iters=50):
    """Plain seeded Lloyd iteration; drops empty clusters."""
    n = len(data)
    k = min(k, n)
    # Distinct starting centers (first occurrence of each unique row).
    _, first = np.unique(data.round(decimals=12), axis=0, return_index=True)
    pool = np.sort(first)
    if len(pool) <= k:
        centers = data[pool].copy()
    else:
        centers = data[np.sort(rng.choice(pool, size=k, replace=False))].copy()
    assign = None
    for _ in range(iters):
        d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        keep = []
        for c in range(len(centers)):
            members = data[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
                keep.append(c)
        if len(keep) < len(centers):
            centers = centers[keep]
            assign = None
    d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return centers, d2.argmin(axis=1)


def build_vocabulary(descriptors, k, depth, seed=0):
    """Hierarchical k-means tree over a training descriptor sample."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if len(descriptors) == 0:
        raise ValueError("empty training sample")
    if k < 2:
        raise ValueError("branching factor must be at least 2")
    rng = np.random.default_rng(seed)

    centers = [descriptors.mean(axis=0)]
    children = [[]]
    leaf_word = [-1]
    # (node id, member rows, remaining depth)
    stack = [(0, descriptors, depth)]
    while stack:
        node, data, remaining = stack.pop(0)
        if remaining == 0 or len(np.unique(data.round(decimals=12), axis=0)) < 2:
            leaf_word[node] = 0  # word ids assigned after construction
            continue
        ctrs, assign = _kmeans(data, k, rng)
        for c in range(len(ctrs)):
            child = len(centers)
            centers.append(ctrs[c])
            children.append([])
            leaf_word.append(-1)
            children[node].append(child)
            stack.append((child, data[assign == c], remaining - 1))

    n_nodes = len(centers)
    child_start = np.zeros(n_nodes, dtype=np.int64)
    child_count = np.zeros(n_nodes, dtype=np.int64)
    flat = []
    for i, ch in enumerate(children):
        child_start[i] = len(flat)
        child_count[i] = len(ch)
        flat.extend(ch)
    leaf_word = np.asarray(leaf_word, dtype=np.int64)
    leaves = np.flatnonzero(leaf_word >= 0)
    leaf_word[:] = -1
    leaf_word[leaves] = np.arange(len(leaves))

    tree = VocabularyTree(branching=k, depth=depth,
                          centers=np.asarray(centers),
                          child_start=child_start, child_count=child_count,
                          child_index=np.asarray(flat, dtype=np.int64),
                          leaf_word=leaf_word,
                          word_weights=np.ones(len(leaves)), seed=seed)
    # IDF from the training distribution; unseen words get the max weight.
    words = quantize_batch(tree, descriptors)
    counts = np.bincount(words, minlength=tree.n_words)
    n = len(descriptors)
    weights = np.where(counts > 0, np.log(n / np.maximum(counts, 1)), np.log(n))
    tree.word_weights = np.maximum(weights, 1e-3)
    return tree


def quantize(tree, descriptor):
    """Greedy nearest-child descent to a leaf word id (ties: lowest index)."""
    d = np.asarray(descriptor, dtype=np.float64)
    node = 0
    while tree.child_count[node] > 0:
        s, c = tree.child_start[node], tree.child_count[node]
        kids = tree.child_index[s:s + c]
        dist = ((tree.centers[kids] - d) ** 2).sum(axis=1)
        node = kids[int(dist.argmin())]
    return int(tree.leaf_word[node])


def quantize_batch(tree, descriptors):
    """Vectorized quantization: level-order descent grouped by node."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    nodes = np.zeros(len(descriptors), dtype=np.int64)
    active = tree.child_count[nodes] > 0
    while active.any():
        for node in np.unique(nodes[active]):
            rows = np.flatnonzero(active & (nodes == node))
            s, c = tree.child_start[node], tree.child_count[node]
            kids = tree.child_index[s:s + c]
            d2 = ((descriptors[rows, None, :]
                   - tree.centers[kids][None, :, :]) ** 2).sum(axis=2)
            nodes[rows] = kids[d2.argmin(axis=1)]
        active = tree.child_count[nodes] > 0
    return tree.leaf_word[nodes]


def bow_vector(tree, descriptors):
    """Sparse L1-normalized TF-IDF vector as {word id: weight}."""
    if len(descriptors) == 0:
        return {}
    words = quantize_batch(tree, descriptors)
    counts = np.bincount(words, minlength=tree.n_words).astype(float)
    v = counts * tree.word_weights
    total = v.sum()
    if total <= 0:
        return {}
    v /= total
    return {int(w): float(v[w]) for w in np.flatnonzero(v)}


@dataclass
class SubmapDatabase:
    tree: VocabularyTree
    vectors: dict = field(default_factory=dict)       # submap id -> bow dict
    index: dict = field(default_factory=dict)         # word id -> [(id, weight)]

    def add_submap(self, submap_id, descriptors):
        if submap_id in self.vectors:
            raise ValueError(f"duplicate submap id {submap_id}")
        vec = bow_vector(self.tree, descriptors)
        self.vectors[submap_id] = vec
        for word, weight in vec.items():
            self.index.setdefault(word, []).append((submap_id, weight))

    def query(self, descriptors, exclude_id=None):
        """Ranked [(submap id, score)] by accumulated min-intersection."""
        vec = bow_vector(self.tree, descriptors)
        scores = {}
        for word, q_weight in vec.items():
            for sid, s_weight in self.index.get(word, []):
                if sid == exclude_id:
                    continue
                scores[sid] = scores.get(sid, 0.0) + min(q_weight, s_weight)
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked

    def query_submap(self, submap_id):
        """Query with a stored submap's own vector, excluding itself."""
        vec = self.vectors[submap_id]
        scores = {}
        for word, q_weight in vec.items():
            for sid, s_weight in self.index.get(word, []):
                if sid == submap_id:
                    continue
                scores[sid] = scores.get(sid, 0.0) + min(q_weight, s_weight)
        return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def bow_similarity(va, vb):
    """Brute-force similarity between two sparse bow dicts."""
    return sum(min(w, vb[k]) for k, w in va.items() if k in vb)
