"""Vocabulary-tree retrieval: hierarchical k-means, TF-IDF node weights and
L1 scoring over inverted files.

Inverted files are kept at the leaves only; counts at an internal node are
the sums over its leaves ("virtual" inverted files).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from lrsift.geo import GeoTag

INDEX_MAGIC = b"LRVT"
INDEX_VERSION = 1


class EmptyQueryError(ValueError):
    """The query has no features to quantize."""


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------

@dataclass
class VocabTree:
    k: int
    depth: int
    centroids: np.ndarray  # (n_nodes, dim), breadth-first order, node 0 = root
    parent: np.ndarray  # (n_nodes,), -1 for the root
    idf: np.ndarray = None
    children: list = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parent)
        self.children = [[] for _ in range(n)]
        for node in range(1, n):
            self.children[int(self.parent[node])].append(node)
        if self.idf is None:
            self.idf = np.zeros(n)

    @property
    def n_nodes(self):
        return len(self.parent)

    def is_leaf(self, node):
        return not self.children[node]

    def leaves(self):
        return [n for n in range(self.n_nodes) if not self.children[n]]


def kmeans(X, k, rng, max_iter=30):
    """Lloyd's algorithm with k-means++ seeding; returns (labels, centers).

    Fewer than ``k`` centers come back when the data has fewer distinct
    points; empty clusters are dropped.
    """
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    C = np.array(centers)
    labels = None
    x2 = (X ** 2).sum(axis=1)[:, None]
    for _ in range(max_iter):
        dist = x2 - 2 * X @ C.T + (C ** 2).sum(axis=1)[None, :]
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(C)):
            members = labels == c
            if members.any():
                C[c] = X[members].mean(axis=0)
    used = np.unique(labels)
    remap = -np.ones(len(C), dtype=int)
    remap[used] = np.arange(len(used))
    return remap[labels], C[used]


def _stack(descriptor_sets):
    arrays = []
    for s in descriptor_sets:
        d = s.descriptors() if hasattr(s, "descriptors") else np.asarray(s, dtype=float)
        if len(d):
            arrays.append(np.asarray(d, dtype=float).reshape(len(d), -1))
    if not arrays:
        raise ValueError("no descriptors to build a vocabulary tree from")
    return np.concatenate(arrays)


def build_tree(descriptor_sets, k=8, L=3, seed=0):
    """Hierarchical k-means over all descriptors of ``descriptor_sets``.

    Nodes are numbered breadth first.  A node becomes a leaf at depth ``L``
    or when it holds fewer than ``k`` descriptors or cannot be split.  IDF
    weights ``ln(N / N_i)`` are computed treating each set as one image.
    """
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    X = _stack(descriptor_sets)
    centroids = [X.mean(axis=0)]
    parent = [-1]
    queue = [(0, np.arange(len(X)), 0)]
    head = 0
    while head < len(queue):
        node, idx, d = queue[head]
        head += 1
        if d >= L or len(idx) < k:
            continue
        rng = np.random.default_rng([seed, node])
        labels, centers = kmeans(X[idx], k, rng)
        if len(centers) < 2:
            continue
        for c in range(len(centers)):
            child = len(parent)
            parent.append(node)
            centroids.append(centers[c])
            queue.append((child, idx[labels == c], d + 1))
    tree = VocabTree(k, L, np.array(centroids), np.array(parent, dtype=np.int64))
    counts = [node_counts(tree, s) for s in descriptor_sets]
    tree.idf = idf_weights(tree.n_nodes, counts)
    return tree


def quantize(tree, descriptor):
    """Greedy root-to-leaf path of nearest children (ties -> lowest index)."""
    d = np.asarray(descriptor, dtype=float)
    path = [0]
    node = 0
    while tree.children[node]:
        kids = tree.children[node]
        dist = ((tree.centroids[kids] - d) ** 2).sum(axis=1)
        node = kids[int(np.argmin(dist))]
        path.append(node)
    return path


def quantize_many(tree, descriptors):
    """Leaf node of each row of ``descriptors`` (vectorized greedy descent)."""
    D = np.asarray(descriptors, dtype=float)
    node = np.zeros(len(D), dtype=np.int64)
    active = np.array([bool(tree.children[0])] * len(D))
    while active.any():
        for n in np.unique(node[active]):
            kids = tree.children[n]
            rows = np.nonzero(active & (node == n))[0]
            dist = ((D[rows, None, :] - tree.centroids[kids][None]) ** 2).sum(axis=2)
            node[rows] = np.asarray(kids)[np.argmin(dist, axis=1)]
        active = np.array([bool(tree.children[n]) for n in node], dtype=bool)
    return node


def leaf_counts(tree, descriptors):
    D = descriptors.descriptors() if hasattr(descriptors, "descriptors") else np.asarray(descriptors, float)
    if len(D) == 0:
        return {}
    leaves, counts = np.unique(quantize_many(tree, D), return_counts=True)
    return {int(a): int(b) for a, b in zip(leaves, counts)}


def expand_counts(tree, leaves):
    """Visit counts at every node on the paths to the given leaf counts."""
    out = {}
    for leaf, c in leaves.items():
        node = leaf
        while node >= 0:
            out[node] = out.get(node, 0) + c
            node = int(tree.parent[node])
    return out


def node_counts(tree, descriptors):
    return expand_counts(tree, leaf_counts(tree, descriptors))


def idf_weights(n_nodes, count_dicts):
    N = len(count_dicts)
    touched = np.zeros(n_nodes)
    for c in count_dicts:
        for node in c:
            touched[node] += 1
    w = np.zeros(n_nodes)
    nz = touched > 0
    w[nz] = np.log(N / touched[nz])
    return w


def tfidf_vector(counts, idf):
    """L1-normalized sparse TF-IDF vector ``{node: value}`` (zero weights dropped)."""
    vec = {n: c * idf[n] for n, c in sorted(counts.items()) if idf[n] > 0}
    total = sum(vec.values())
    if total <= 0:
        return {}
    return {n: v / total for n, v in vec.items()}


def l1_distance_sparse(q, d):
    """L1 distance using only the shared support:
    ``|q| + |d| + sum_shared(|q_i - d_i| - |q_i| - |d_i|)``."""
    total = sum(abs(v) for v in q.values()) + sum(abs(v) for v in d.values())
    small, big = (q, d) if len(q) <= len(d) else (d, q)
    for n, a in small.items():
        b = big.get(n)
        if b is not None:
            total += abs(a - b) - abs(a) - abs(b)
    return total


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

@dataclass
class IndexEntry:
    image_id: str
    geotag: GeoTag
    leaves: dict  # leaf -> term count (the inverted-file rows of this image)
    vector: dict
    label: str = ""


@dataclass
class Match:
    image_id: str
    score: float
    distance: float
    geotag: GeoTag


@dataclass
class DatabaseIndex:
    tree: VocabTree
    entries: list = field(default_factory=list)
    feature_kind: str = "lowrank"
    _postings: dict = field(default=None, init=False, repr=False, compare=False)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.image_id for e in self.entries]

    def inverted_file(self, node):
        """``{image_id: count}`` for ``node``; internal nodes sum their leaves."""
        out = {}
        for e in self.entries:
            c = expand_counts(self.tree, e.leaves).get(node, 0)
            if c:
                out[e.image_id] = c
        return out

    def add(self, image_id, features, geotag, label="", recompute_idf=False):
        """Index another image.  With frozen IDF weights (the default) the
        vectors of already indexed images are untouched."""
        if any(e.image_id == image_id for e in self.entries):
            raise ValueError(f"duplicate image id {image_id!r}")
        leaves = leaf_counts(self.tree, features)
        self.entries.append(IndexEntry(image_id, geotag, leaves, {}, label))
        self._postings = None
        if recompute_idf:
            self.refresh()
        else:
            self.entries[-1].vector = tfidf_vector(expand_counts(self.tree, leaves), self.tree.idf)

    def refresh(self):
        counts = [expand_counts(self.tree, e.leaves) for e in self.entries]
        self.tree.idf = idf_weights(self.tree.n_nodes, counts)
        for e, c in zip(self.entries, counts):
            e.vector = tfidf_vector(c, self.tree.idf)
        self._postings = None

    def postings(self):
        """Weighted inverted files: ``node -> [(entry position, value)]``."""
        if self._postings is None:
            post = {}
            for i, e in enumerate(self.entries):
                for node, v in e.vector.items():
                    post.setdefault(node, []).append((i, v))
            self._postings = post
        return self._postings

    def query_vector(self, features):
        counts = node_counts(self.tree, features)
        return tfidf_vector(counts, self.tree.idf)

    # -- persistence -------------------------------------------------------

    def to_bytes(self):
        """Self-contained binary index (little endian)::

            magic 'LRVT' | version u16 | k u16 | L u16 | node count u32 |
            image count u32 | dim u16 | kind (u16 len + utf-8)
            parent i32[nodes] | centroids f64[nodes x dim] | idf f64[nodes]
            inverted files: per leaf in node order, n u32 then n x (image u32, count u32)
            entries: per image id, source_id, label (u16 len + utf-8 each), lat f64, lon f64
        """
        t = self.tree
        dim = t.centroids.shape[1]
        out = [INDEX_MAGIC, struct.pack("<HHHIIH", INDEX_VERSION, t.k, t.depth, t.n_nodes, len(self.entries), dim),
               _pack_str(self.feature_kind),
               t.parent.astype("<i4").tobytes(), t.centroids.astype("<f8").tobytes(), t.idf.astype("<f8").tobytes()]
        for leaf in t.leaves():
            rows = [(i, e.leaves[leaf]) for i, e in enumerate(self.entries) if leaf in e.leaves]
            out.append(struct.pack("<I", len(rows)))
            out.append(np.array(rows, dtype="<u4").reshape(-1, 2).tobytes())
        for e in self.entries:
            out += [_pack_str(e.image_id), _pack_str(e.geotag.source_id), _pack_str(e.label),
                    struct.pack("<dd", e.geotag.latitude, e.geotag.longitude)]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw):
        if raw[:4] != INDEX_MAGIC:
            raise ValueError("not a vocabulary-tree index file")
        try:
            version, k, L, n_nodes, n_images, dim = struct.unpack_from("<HHHIIH", raw, 4)
            if version != INDEX_VERSION:
                raise ValueError(f"unsupported index version {version}")
            pos = 4 + struct.calcsize("<HHHIIH")
            kind, pos = _unpack_str(raw, pos)
            parent = np.frombuffer(raw, "<i4", n_nodes, pos).astype(np.int64)
            pos += 4 * n_nodes
            centroids = np.frombuffer(raw, "<f8", n_nodes * dim, pos).reshape(n_nodes, dim).copy()
            pos += 8 * n_nodes * dim
            idf = np.frombuffer(raw, "<f8", n_nodes, pos).copy()
            pos += 8 * n_nodes
            tree = VocabTree(k, L, centroids, parent, idf)
            per_image = [dict() for _ in range(n_images)]
            for leaf in tree.leaves():
                (n,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                rows = np.frombuffer(raw, "<u4", 2 * n, pos).reshape(n, 2)
                pos += 8 * n
                for img, c in rows:
                    per_image[int(img)][leaf] = int(c)
            entries = []
            for i in range(n_images):
                ident, pos = _unpack_str(raw, pos)
                source, pos = _unpack_str(raw, pos)
                label, pos = _unpack_str(raw, pos)
                lat, lon = struct.unpack_from("<dd", raw, pos)
                pos += 16
                leaves = dict(sorted(per_image[i].items()))
                vec = tfidf_vector(expand_counts(tree, leaves), idf)
                entries.append(IndexEntry(ident, GeoTag(lat, lon, source), leaves, vec, label))
        except (struct.error, ValueError) as exc:
            raise ValueError(f"corrupt index file: {exc}") from None
        if pos != len(raw):
            raise ValueError("corrupt index file: trailing bytes")
        return cls(tree, entries, kind)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(raw, pos):
    (n,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if pos + n > len(raw):
        raise ValueError("truncated string")
    return raw[pos:pos + n].decode("utf-8"), pos + n


def build_index(feature_sets, geotags, k=8, L=3, seed=0, labels=None, feature_kind="lowrank"):
    """Build the tree from ``feature_sets`` and index every set under its image id."""
    if len(feature_sets) != len(geotags):
        raise ValueError("one geotag per feature set is required")
    tree = build_tree(feature_sets, k, L, seed)
    index = DatabaseIndex(tree, [], feature_kind)
    labels = labels or [""] * len(feature_sets)
    for fs, tag, label in zip(feature_sets, geotags, labels):
        leaves = leaf_counts(tree, fs)
        index.entries.append(IndexEntry(fs.image_id, tag, leaves,
                                        tfidf_vector(expand_counts(tree, leaves), tree.idf), label))
    return index


def score_query(index, query):
    """Rank indexed images by L1 distance between normalized TF-IDF vectors.

    Returns matches in ascending distance order with ``score = 2 - distance``.
    Raises :class:`EmptyQueryError` for a query without features.
    """
    if not len(index):
        raise ValueError("index is empty")
    if len(query) == 0:
        raise EmptyQueryError("query has no features")
    q = index.query_vector(query)
    post = index.postings()
    dist = np.array([sum(abs(v) for v in e.vector.values()) for e in index.entries])
    dist += sum(abs(v) for v in q.values())
    for node, a in q.items():
        for i, b in post.get(node, ()):
            dist[i] += abs(a - b) - abs(a) - abs(b)
    dist = np.maximum(dist, 0.0)
    matches = [Match(e.image_id, 2.0 - float(d), float(d), e.geotag) for e, d in zip(index.entries, dist)]
    order = sorted(range(len(matches)), key=lambda i: (matches[i].distance, i))
    return [matches[i] for i in order]
