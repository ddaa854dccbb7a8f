"""Multi-view patient similarity graph construction.

Edges are directed ``src -> dst`` and carry a weight and a type:

* 0 -- diagnosis similarity (TF-IDF cosine, inner product, or penalized co-occurrence)
* 1 -- embedding kernel similarity
* 2 -- MST bridge between connected components
* 3 -- personalized-PageRank diffusion edge

A node's top-k neighbours are stored as edges ``neighbour -> node``, so the
message-passing layers (which aggregate over in-edges) let every node hear
from its own nearest neighbours, and the out-degree cap limits how many nodes
a hub can feed.  Ties are broken by ascending neighbour index.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist, pdist

log = logging.getLogger(__name__)

DIAGNOSIS, SEMANTIC, MST_BRIDGE, DIFFUSION = 0, 1, 2, 3
EDGE_TYPES = (DIAGNOSIS, SEMANTIC, MST_BRIDGE, DIFFUSION)

_BLOCK = 512


@dataclass
class EdgeList:
    """Typed, weighted, directed edges over ``n_nodes`` nodes."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    etype: np.ndarray

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.etype = np.asarray(self.etype, dtype=np.int64)
        n = len(self.src)
        if not (len(self.dst) == len(self.weight) == len(self.etype) == n):
            raise ValueError("edge arrays differ in length")
        if n:
            if self.src.min() < 0 or self.dst.min() < 0 or max(self.src.max(), self.dst.max()) >= self.n_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(self.src == self.dst):
                raise ValueError("self-loops are not allowed")
            if not np.isfinite(self.weight).all():
                raise ValueError("edge weights must be finite")
            if not np.isin(self.etype, EDGE_TYPES).all():
                raise ValueError("edge type must be in {0,1,2,3}")

    @classmethod
    def empty(cls, n_nodes: int) -> "EdgeList":
        z = np.zeros(0)
        return cls(n_nodes, z, z, z, z)

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, keep: np.ndarray) -> "EdgeList":
        return EdgeList(self.n_nodes, self.src[keep], self.dst[keep], self.weight[keep], self.etype[keep])

    def with_weights(self, weight: np.ndarray) -> "EdgeList":
        return EdgeList(self.n_nodes, self.src, self.dst, weight, self.etype)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    def undirected_adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency (parallel edges collapsed)."""
        n = self.n_nodes
        a = sp.coo_matrix((np.ones(len(self)), (self.src, self.dst)), shape=(n, n)).tocsr()
        a = a + a.T
        a.data[:] = 1.0
        return a

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def concat_edges(*lists: EdgeList) -> EdgeList:
    n = lists[0].n_nodes
    if any(e.n_nodes != n for e in lists):
        raise ValueError("cannot combine edge lists with different node counts")
    return EdgeList(n, np.concatenate([e.src for e in lists]), np.concatenate([e.dst for e in lists]),
                    np.concatenate([e.weight for e in lists]), np.concatenate([e.etype for e in lists]))


# ------------------------------------------------------------------- top-k core

def _topk_from_scores(scores: np.ndarray, rows: np.ndarray, k: int, valid: np.ndarray | None = None):
    """Per row of ``scores`` pick the ``k`` largest columns.

    ``scores[r, rows[r]]`` (self) is excluded; entries where ``valid`` is False
    are excluded.  Ties go to the lower column index.  Returns
    ``(query, neighbour, score)`` arrays.
    """
    s = scores.copy()
    s[np.arange(len(rows)), rows] = -np.inf
    if valid is not None:
        s[~valid] = -np.inf
    # stable sort on the negated score keeps ascending index order among ties
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(s, order, axis=1)
    ok = np.isfinite(picked)
    src = np.repeat(rows, order.shape[1]).reshape(order.shape)
    return src[ok], order[ok], picked[ok]


def _knn_edges(n: int, k: int, block_scores, etype: int, positive_only: bool) -> EdgeList:
    if k < 0:
        raise ValueError("k must be non-negative")
    k = min(k, n - 1)
    if k == 0 or n < 2:
        return EdgeList.empty(n)
    srcs, dsts, ws = [], [], []
    for start in range(0, n, _BLOCK):
        rows = np.arange(start, min(n, start + _BLOCK))
        scores = block_scores(rows)
        valid = scores > 0 if positive_only else None
        query, nbr, w = _topk_from_scores(scores, rows, k, valid)
        # neighbour -> query, so each node aggregates messages from its own top-k
        srcs.append(nbr)
        dsts.append(query)
        ws.append(w)
    src = np.concatenate(srcs)
    return EdgeList(n, src, np.concatenate(dsts), np.concatenate(ws), np.full(len(src), etype))


def _as_csr(D) -> sp.csr_matrix:
    m = sp.csr_matrix(D, dtype=np.float64)
    m.eliminate_zeros()
    if m.nnz and not np.all(m.data == 1.0):
        raise ValueError("diagnosis matrix entries must be 0/1")
    return m


# --------------------------------------------------------------- diagnosis views

def tfidf_weights(D) -> np.ndarray:
    D = _as_csr(D)
    n = D.shape[0]
    df = np.asarray((D > 0).sum(axis=0)).ravel()
    return np.log(n / (1.0 + df)) + 1.0


def tfidf_cosine_knn(D, k: int) -> EdgeList:
    """Top-k cosine neighbours of IDF-reweighted diagnosis rows."""
    D = _as_csr(D)
    n = D.shape[0]
    if n < 2:
        raise ValueError("need at least two patients")
    X = D @ sp.diags(tfidf_weights(D))
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    empty = norms == 0
    if empty.any():
        log.info("tfidf_cosine_knn: %d patients without codes emit no edges", int(empty.sum()))
    inv = np.where(empty, 0.0, 1.0 / np.where(empty, 1.0, norms))
    Xn = sp.diags(inv) @ X
    XnT = Xn.T.tocsc()

    def scores(rows):
        return np.asarray((Xn[rows] @ XnT).todense())

    return _knn_edges(n, k, scores, DIAGNOSIS, positive_only=True)


def approx_ip_knn(V, k: int, method: str = "auto", seed: int = 0, n_planes: int = 12) -> EdgeList:
    """Top-k neighbours by inner product.

    ``method="exact"`` is a blocked brute-force search.  ``"lsh"`` restricts
    candidates to sign-random-projection buckets and is only chosen
    automatically above 100,000 rows.
    """
    V = V.toarray() if sp.issparse(V) else np.asarray(V, dtype=np.float64)
    n = V.shape[0]
    if method == "auto":
        method = "lsh" if n > 100_000 else "exact"
    if method == "exact":
        return _knn_edges(n, k, lambda rows: V[rows] @ V.T, DIAGNOSIS, positive_only=False)
    if method != "lsh":
        raise ValueError(f"unknown method {method!r}")
    return _lsh_ip_knn(V, k, seed, n_planes)


def _lsh_ip_knn(V: np.ndarray, k: int, seed: int, n_planes: int) -> EdgeList:
    n = V.shape[0]
    k = min(k, n - 1)
    if k <= 0:
        return EdgeList.empty(n)
    rng = np.random.default_rng(seed)
    planes = rng.standard_normal((V.shape[1], n_planes))
    codes = (V @ planes > 0) @ (1 << np.arange(n_planes))
    srcs, dsts, ws = [], [], []
    for code in np.unique(codes):
        members = np.flatnonzero(codes == code)
        if len(members) < 2:
            continue
        sub = _knn_edges(len(members), k, lambda rows: V[members[rows]] @ V[members].T,
                         DIAGNOSIS, positive_only=False)
        srcs.append(members[sub.src])
        dsts.append(members[sub.dst])
        ws.append(sub.weight)
    if not srcs:
        return EdgeList.empty(n)
    src = np.concatenate(srcs)
    return EdgeList(n, src, np.concatenate(dsts), np.concatenate(ws), np.zeros(len(src)))


def cooccurrence_scores(D) -> np.ndarray:
    """Dense ``c_ij**2 / (|D_i| |D_j|)`` score matrix (zero for empty rows)."""
    D = _as_csr(D)
    counts = np.asarray(D.sum(axis=1)).ravel()
    c = np.asarray((D @ D.T).todense())
    denom = np.outer(counts, counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, c * c / np.where(denom > 0, denom, 1.0), 0.0)


def penalized_cooccurrence_knn(D, k: int) -> EdgeList:
    """Top-k by squared shared-code count over the product of code counts."""
    D = _as_csr(D)
    n = D.shape[0]
    counts = np.asarray(D.sum(axis=1)).ravel()
    if (counts == 0).any():
        log.info("penalized_cooccurrence_knn: %d patients without codes emit no edges",
                 int((counts == 0).sum()))
    DT = D.T.tocsc()

    def scores(rows):
        c = np.asarray((D[rows] @ DT).todense())
        denom = np.outer(counts[rows], counts)
        return np.where(denom > 0, c * c / np.where(denom > 0, denom, 1.0), 0.0)

    return _knn_edges(n, k, scores, DIAGNOSIS, positive_only=True)


# ------------------------------------------------------------ embedding kernel

def kernel_bandwidth(B: np.ndarray, max_rows: int = 5000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance divided by sqrt(2).

    Above ``max_rows`` rows the median is estimated on a seeded row sample.
    Returns 1.0 (with a warning) when every pair coincides.
    """
    B = np.asarray(B, dtype=np.float64)
    if len(B) > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(len(B), max_rows, replace=False))
        B = B[idx]
    med = float(np.median(pdist(B)))
    if med == 0.0:
        log.warning("all embeddings coincide; kernel bandwidth falls back to 1.0")
        return 1.0
    return med / math.sqrt(2.0)


def gaussian_kernel(dist: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-(dist * dist) / (2.0 * sigma * sigma))


def embedding_kernel_knn(B, k: int, sigma: float | None = None) -> EdgeList:
    """Top-k neighbours under the Gaussian kernel with median-distance bandwidth."""
    B = np.asarray(B, dtype=np.float64)
    n = B.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    if not np.isfinite(B).all():
        raise ValueError("embeddings must be finite")
    if sigma is None:
        sigma = kernel_bandwidth(B)
    return _knn_edges(n, k, lambda rows: gaussian_kernel(cdist(B[rows], B), sigma),
                      SEMANTIC, positive_only=False)


# ----------------------------------------------------------- normalize / prune

def normalize_prune(E: EdgeList, scheme: str = "log1p", prune_frac: float = 0.30) -> EdgeList:
    """Transform weights then drop the ``floor(prune_frac * |E|)`` weakest edges."""
    if not 0.0 <= prune_frac < 1.0:
        raise ValueError("prune_frac must lie in [0, 1)")
    if len(E) == 0:
        return E
    w = E.weight
    if scheme == "log1p":
        w = np.log1p(w)
    elif scheme == "zscore":
        sd = w.std()
        w = (w - w.mean()) / sd if sd > 0 else np.zeros_like(w)
    else:
        raise ValueError(f"unknown normalization {scheme!r}")
    n_drop = int(math.floor(prune_frac * len(E)))
    order = np.argsort(w, kind="stable")
    keep = np.sort(order[n_drop:])
    return E.with_weights(w).subset(keep)


def fuse_views(E_diag: EdgeList, E_bert: EdgeList) -> EdgeList:
    """Multiset union; a pair present in both views keeps both typed edges."""
    if E_diag.n_nodes != E_bert.n_nodes:
        raise ValueError(f"node counts differ: {E_diag.n_nodes} vs {E_bert.n_nodes}")
    return concat_edges(E_diag, E_bert)


# ------------------------------------------------------------------ MST bridge

class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def component_labels(E: EdgeList) -> np.ndarray:
    """Component id per node of the undirected view, numbered by smallest member."""
    uf = UnionFind(E.n_nodes)
    for s, d in zip(E.src.tolist(), E.dst.tolist()):
        uf.union(s, d)
    roots = np.array([uf.find(i) for i in range(E.n_nodes)])
    _, first = np.unique(roots, return_index=True)
    relabel = {roots[i]: c for c, i in enumerate(np.sort(first))}
    return np.array([relabel[r] for r in roots], dtype=np.int64)


def kruskal(n: int, edges: list[tuple[float, int, int]]) -> list[tuple[int, int, float]]:
    uf = UnionFind(n)
    tree = []
    for cost, a, b in sorted(edges):
        if uf.union(a, b):
            tree.append((a, b, cost))
            if len(tree) == n - 1:
                break
    return tree


def mst_bridge(E: EdgeList, B) -> EdgeList:
    """Connect components with an MST over their embedding centroids.

    Each component is represented by the member closest to its centroid; the
    C-1 tree edges are added in both directions as type-2 edges whose weight
    is the Gaussian kernel of the centroid distance (median-centroid bandwidth).
    """
    B = np.asarray(B, dtype=np.float64)
    if len(B) != E.n_nodes:
        raise ValueError("embedding rows must match node count")
    labels = component_labels(E)
    n_comp = int(labels.max()) + 1 if E.n_nodes else 0
    if n_comp <= 1:
        return E
    centroids = np.stack([B[labels == c].mean(axis=0) for c in range(n_comp)])
    reps = np.empty(n_comp, dtype=np.int64)
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        dist = np.linalg.norm(B[members] - centroids[c], axis=1)
        reps[c] = members[np.argmin(dist)]
    cd = cdist(centroids, centroids)
    pairs = [(float(cd[a, b]), a, b) for a in range(n_comp) for b in range(a + 1, n_comp)]
    tree = kruskal(n_comp, pairs)
    med = float(np.median(cd[np.triu_indices(n_comp, 1)]))
    sigma = med / math.sqrt(2.0) if med > 0 else 1.0
    src, dst, w = [], [], []
    for a, b, cost in tree:
        wt = float(gaussian_kernel(np.array(cost), sigma))
        src += [reps[a], reps[b]]
        dst += [reps[b], reps[a]]
        w += [wt, wt]
    bridges = EdgeList(E.n_nodes, src, dst, w, np.full(len(src), MST_BRIDGE))
    return concat_edges(E, bridges)


# ----------------------------------------------------------------- GDC / PPR

def ppr_matrix(E: EdgeList, teleport: float = 0.15, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """Dense personalized PageRank: row ``s`` is the score vector for seed ``s``.

    Walks use the row-normalized undirected adjacency; a node without
    neighbours keeps its mass (self-loop), so every row sums to one.
    """
    if not 0.0 < teleport < 1.0:
        raise ValueError("teleport must lie in (0, 1)")
    n = E.n_nodes
    A = E.undirected_adjacency().toarray()
    deg = A.sum(axis=1)
    dangling = deg == 0
    A[dangling, dangling] = 1.0
    P = A / A.sum(axis=1, keepdims=True)
    eye = np.eye(n)
    pi = eye.copy()
    for _ in range(max_iter):
        nxt = teleport * eye + (1.0 - teleport) * (pi @ P)
        resid = np.abs(nxt - pi).sum(axis=1).max() if n else 0.0
        pi = nxt
        if resid < tol:
            break
    else:
        log.warning("ppr_matrix: no convergence after %d iterations", max_iter)
    return pi


def gdc_ppr(E: EdgeList, teleport: float = 0.15, top_k: int = 1) -> EdgeList:
    """Add, per node, its ``top_k`` highest-PPR non-neighbours as type-3 edges."""
    n = E.n_nodes
    if top_k <= 0 or n < 2:
        return E
    pi = ppr_matrix(E, teleport)
    A = E.undirected_adjacency().toarray().astype(bool)
    scores = np.where(A, 0.0, pi)
    query, nbr, w = _topk_from_scores(scores, np.arange(n), top_k, valid=scores > 0)
    extra = EdgeList(n, nbr, query, w, np.full(len(w), DIFFUSION))
    return concat_edges(E, extra)


# ------------------------------------------------------------ degree capping

def type_quotas(type_counts: dict[int, int], cap: int, rng: np.random.Generator | None = None) -> dict[int, int]:
    """Largest-remainder apportionment of ``cap`` slots proportional to counts.

    Equal remainders are ordered by seeded noise when ``rng`` is given, else
    by ascending type.
    """
    total = sum(type_counts.values())
    if total <= cap:
        return dict(type_counts)
    types = sorted(type_counts)
    exact = {t: cap * type_counts[t] / total for t in types}
    quota = {t: int(math.floor(exact[t])) for t in types}
    left = cap - sum(quota.values())
    noise = rng.random(len(types)) if rng is not None else np.zeros(len(types))
    ranked = sorted(range(len(types)), key=lambda i: (-(exact[types[i]] - quota[types[i]]), noise[i], types[i]))
    for i in ranked[:left]:
        quota[types[i]] += 1
    return quota


def degree_cap_stratified(E: EdgeList, max_out: int = 15, seed: int = 0) -> EdgeList:
    """Limit every node's out-degree with per-type quotas.

    Within a type the heaviest edges are kept (ties: lower destination index).
    """
    if max_out < 1:
        raise ValueError("max_out must be at least 1")
    rng = np.random.default_rng(seed)
    deg = E.out_degree()
    keep = np.ones(len(E), dtype=bool)
    order = np.lexsort((E.dst, -E.weight, E.etype, E.src))
    bounds = np.searchsorted(E.src[order], np.arange(E.n_nodes + 1))
    for node in np.flatnonzero(deg > max_out):
        idx = order[bounds[node]:bounds[node + 1]]
        types = E.etype[idx]
        counts = {int(t): int((types == t).sum()) for t in np.unique(types)}
        quota = type_quotas(counts, max_out, rng)
        for t, q in quota.items():
            of_type = idx[types == t]
            keep[of_type[q:]] = False
    return E.subset(keep)


def edge_dropout(E: EdgeList, frac: float, seed: int) -> EdgeList:
    """Remove a uniformly random ``round(frac * |E|)`` subset of edges.

    The subset is a prefix of one seeded permutation, so under a fixed seed a
    larger fraction always removes a superset of the edges a smaller one does.
    """
    if not 0.0 <= frac <= 1.0:
        raise ValueError("dropout fraction must lie in [0, 1]")
    if frac == 0.0 or len(E) == 0:
        return E
    n_drop = int(round(frac * len(E)))
    drop = np.random.default_rng(seed).permutation(len(E))[:n_drop]
    keep = np.ones(len(E), dtype=bool)
    keep[drop] = False
    return E.subset(keep)


# -------------------------------------------------------------------- summary

def graph_density(edge_count: int, n: int) -> float:
    if n < 2:
        raise ValueError("density needs at least two nodes")
    return edge_count / (n * (n - 1) / 2.0)


def n_components(E: EdgeList) -> int:
    return int(component_labels(E).max()) + 1 if E.n_nodes else 0


@dataclass
class GraphSettings:
    diag_method: str = "ip"
    k_diag: int = 3
    k_bert: int = 1
    rewire: str = "mst"
    norm: str = "log1p"
    prune_frac: float = 0.30
    max_out: int = 15
    teleport: float = 0.15
    gdc_top_k: int = 1
    seed: int = 0


def build_graph(D, B, settings: GraphSettings | None = None) -> EdgeList:
    """Full pipeline: diagnosis view + kernel view, per-view normalize/prune,
    fusion, optional rewiring, stratified out-degree cap."""
    s = settings or GraphSettings()
    if s.diag_method == "tfidf":
        diag = tfidf_cosine_knn(D, s.k_diag)
    elif s.diag_method == "ip":
        diag = approx_ip_knn(_as_csr(D), s.k_diag, seed=s.seed)
    elif s.diag_method == "cooc":
        diag = penalized_cooccurrence_knn(D, s.k_diag)
    else:
        raise ValueError(f"unknown diagnosis method {s.diag_method!r}")
    bert = embedding_kernel_knn(B, s.k_bert)
    diag = normalize_prune(diag, s.norm, s.prune_frac)
    bert = normalize_prune(bert, s.norm, s.prune_frac)
    E = fuse_views(diag, bert)
    if s.rewire == "mst":
        E = mst_bridge(E, B)
    elif s.rewire == "gdc":
        E = gdc_ppr(E, s.teleport, s.gdc_top_k)
    elif s.rewire != "none":
        raise ValueError(f"unknown rewiring {s.rewire!r}")
    return degree_cap_stratified(E, s.max_out, s.seed)


def summary_line(E: EdgeList) -> str:
    dens = graph_density(len(E), E.n_nodes) if E.n_nodes >= 2 else 0.0
    return f"nodes={E.n_nodes} edges={len(E)} density={dens:.6e} components={n_components(E)}"


def write_edges(E: EdgeList, path: str | Path) -> None:
    """Tab-separated ``src dst weight type`` rows followed by a summary line."""
    lines = [f"{s}\t{d}\t{w:.17g}\t{t}" for s, d, w, t in
             zip(E.src.tolist(), E.dst.tolist(), E.weight.tolist(), E.etype.tolist())]
    lines.append("# " + summary_line(E))
    Path(path).write_text("\n".join(lines) + "\n")


def read_edges(path: str | Path) -> EdgeList:
    src, dst, w, t = [], [], [], []
    n_nodes = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for field in line[1:].split():
                if field.startswith("nodes="):
                    n_nodes = int(field.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        src.append(int(parts[0]))
        dst.append(int(parts[1]))
        w.append(float(parts[2]))
        t.append(int(parts[3]))
    if n_nodes is None:
        raise ValueError(f"{path}: missing summary line with nodes=N")
    return EdgeList(n_nodes, src, dst, w, t)
