"""Client graphs, spectral quantities and synthetic cSBM benchmark data."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numkit import sym_eig

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")
TASKS = ("dnc", "snc", "sc")
NOISE_MODES = ("p", "sqrt_p")
CONVENTIONS = ("paper", "teleport")
MAX_RETRIES = 10_000


class GraphFileError(ValueError):
    """Malformed edge/feature/label file; the message names path and line."""


class InfeasibleSplitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    n: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        clean = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}) outside [0, {self.n})")
            clean.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", tuple(sorted(clean)))

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.edges:
            e = np.array(self.edges)
            a[e[:, 0], e[:, 1]] = 1.0
            a[e[:, 1], e[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            nb[u].append(v)
            nb[v].append(u)
        return [sorted(x) for x in nb]

    def components(self) -> list[list[int]]:
        nb = self.neighbors()
        seen = [False] * self.n
        comps = []
        for s in range(self.n):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [s], deque([s])
            while queue:
                u = queue.popleft()
                for v in nb[u]:
                    if not seen[v]:
                        seen[v] = True
                        comp.append(v)
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return self.n <= 1 or len(self.components()) == 1

    def subgraph(self, nodes: Sequence[int]) -> "Graph":
        """Induced subgraph, relabelled to ``0..len(nodes)-1`` in the given order."""
        index = {int(u): i for i, u in enumerate(nodes)}
        edges = [(index[u], index[v]) for u, v in self.edges if u in index and v in index]
        return Graph(len(nodes), tuple(edges))


@dataclass(frozen=True)
class PropagationMatrix:
    matrix: np.ndarray
    alpha: float
    steps: int

    def off_diagonal(self) -> np.ndarray:
        m = self.matrix.copy()
        np.fill_diagonal(m, 0.0)
        return m


@dataclass(frozen=True)
class CsbmParams:
    n: int
    d: float
    lam: float
    mu: float
    p: int

    def __post_init__(self):
        if self.n <= 0 or self.p <= 0 or self.d <= 0:
            raise ValueError("cSBM needs n > 0, p > 0 and d > 0")
        p_in, p_out = self.edge_probabilities()
        if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
            raise ValueError(
                f"edge probabilities ({p_in:.4f}, {p_out:.4f}) outside [0, 1]; check d, lambda, n"
            )

    def edge_probabilities(self) -> tuple[float, float]:
        root = self.lam * math.sqrt(self.d)
        return (self.d + root) / self.n, (self.d - root) / self.n


@dataclass
class ClientDataset:
    """Per-client rows. ``splits`` tags every row with TRAIN/VALID/TEST."""

    features: list[np.ndarray]
    labels: list[np.ndarray]
    splits: list[np.ndarray]
    labeled: np.ndarray
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.features) == len(self.labels) == len(self.splits) == len(self.labeled)):
            raise ValueError("per-client lists must have equal length")
        dims = {f.shape[1] for f in self.features}
        if len(dims) > 1:
            raise ValueError(f"feature dimension differs across clients: {sorted(dims)}")
        for k, (f, y, s) in enumerate(zip(self.features, self.labels, self.splits)):
            if not (len(f) == len(y) == len(s)):
                raise ValueError(f"client {k}: feature/label/split row counts differ")
            if len(y) and not np.allclose(y.sum(axis=1), 1.0):
                raise ValueError(f"client {k}: label rows are not one-hot")
            if np.any(s == TRAIN) and not self.labeled[k]:
                raise ValueError(f"client {k} has training rows but is not marked labeled")

    @property
    def n_clients(self) -> int:
        return len(self.features)

    @property
    def p(self) -> int:
        return self.features[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels[0].shape[1]

    def rows(self, k: int, split: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits[k] == split
        return self.features[k][mask], self.labels[k][mask]

    def clients_with(self, split: int) -> list[int]:
        return [k for k in range(self.n_clients) if np.any(self.splits[k] == split)]

    def row_counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.features])

    @cached_property
    def stacked(self) -> "StackedRows":
        """All rows concatenated in client order (cached; treat as read-only)."""
        counts = self.row_counts()
        owner = np.repeat(np.arange(self.n_clients), counts)
        out = StackedRows(
            np.concatenate(self.features),
            np.concatenate(self.labels),
            np.concatenate(self.splits),
            owner,
            np.concatenate([[0], np.cumsum(counts)]),
        )
        for a in (out.features, out.labels, out.splits, out.owner, out.offsets):
            a.flags.writeable = False
        return out


@dataclass(frozen=True)
class StackedRows:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    owner: np.ndarray
    offsets: np.ndarray


@dataclass
class TaskLayout:
    """The fixed part of a benchmark: topology, node labels/tags and the split."""

    kind: str
    params: CsbmParams
    graph: Graph
    node_labels: np.ndarray
    per_client: int
    row_splits: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------- spectra


def laplacian(g: Graph) -> np.ndarray:
    a = g.adjacency()
    return np.diag(a.sum(axis=1)) - a


def propagation_coefficients(alpha: float, steps: int) -> np.ndarray:
    """Weights (1-alpha)*alpha**i for i < steps and alpha**steps for the last power."""
    c = np.array([(1.0 - alpha) * alpha**i for i in range(steps)] + [alpha**steps])
    return c


def propagation_matrix(
    g: Graph, alpha: float, steps: int, convention: str = "paper"
) -> PropagationMatrix:
    """Symmetrized sum_i c_i S^i over the renormalized adjacency S.

    ``convention="paper"`` uses propagation_coefficients(alpha).  With
    ``"teleport"`` alpha is the restart probability of personalized
    PageRank, so the weights are propagation_coefficients(1 - alpha):
    alpha (1 - alpha)**i and (1 - alpha)**steps.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    a_hat = g.adjacency() + np.eye(g.n)
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    s = inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]
    coef = propagation_coefficients(alpha if convention == "paper" else 1.0 - alpha, steps)
    power = np.eye(g.n)
    out = coef[0] * power
    for c in coef[1:]:
        power = power @ s
        out = out + c * power
    return PropagationMatrix(0.5 * (out + out.T), float(alpha), int(steps))


def connectivity_index(g: Graph) -> float:
    """lambda_max(B_N L^+), via the symmetric form (L^{1/2})^+ B_N (L^{1/2})^+."""
    if not g.is_connected():
        raise ValueError("connectivity_index requires a connected graph")
    n = g.n
    if n <= 1:
        return 0.0
    eig = sym_eig(laplacian(g))
    w, q = eig.eigenvalues, eig.eigenvectors
    keep = w > 1e-10 * w[-1]
    root_inv = np.zeros_like(w)
    root_inv[keep] = 1.0 / np.sqrt(w[keep])
    half_pinv = (q * root_inv) @ q.T
    b = np.eye(n) / n - np.ones((n, n)) / n**2
    m = half_pinv @ b @ half_pinv
    top = float(sym_eig(0.5 * (m + m.T)).eigenvalues[-1])
    return max(top, 0.0)


def phi_index(params: CsbmParams) -> float:
    if params.mu == 0:
        raise ValueError("phi is undefined for mu = 0")
    return 2.0 / math.pi * math.atan(params.lam * math.sqrt(params.n / params.p) / params.mu)


# ---------------------------------------------------------------- generation


def balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    y = np.where(np.arange(n) < n // 2, 1, -1)
    if n % 2:
        y[-1] = 1 if rng.random() < 0.5 else -1
    return rng.permutation(y)


def csbm_graph(params: CsbmParams, labels, rng: np.random.Generator) -> Graph:
    labels = np.asarray(labels)
    if labels.shape != (params.n,):
        raise ValueError(f"need {params.n} labels, got shape {labels.shape}")
    p_in, p_out = params.edge_probabilities()
    iu, ju = np.triu_indices(params.n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    return Graph(params.n, tuple(zip(iu[hit].tolist(), ju[hit].tolist())))


def _split_counts(total: int, split: Sequence[float]) -> tuple[int, int, int]:
    fr = np.asarray(split, dtype=float)
    fr = fr / fr.sum()
    n_train = int(math.floor(total * fr[0] + 0.5))
    n_valid = int(math.floor(total * fr[1] + 0.5))
    return n_train, n_valid, total - n_train - n_valid


def connected_balanced_subset(
    g: Graph, labels, size: int, rng: np.random.Generator, retries: int = MAX_RETRIES
) -> list[int]:
    """Random node set of ``size`` whose induced subgraph is connected and class balanced.

    Grows a random connected set from a random seed node, only admitting
    nodes whose class is still under quota; restarts on dead ends.
    """
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    quota = {c: size // len(classes) + (1 if i < size % len(classes) else 0) for i, c in enumerate(classes)}
    nb = g.neighbors()
    for _ in range(retries):
        start = int(rng.integers(g.n))
        chosen = [start]
        members = {start}
        counts = {c: 0 for c in classes}
        counts[labels[start]] += 1
        if counts[labels[start]] > quota[labels[start]]:
            continue
        while len(chosen) < size:
            cand = sorted(
                {v for u in chosen for v in nb[u] if v not in members and counts[labels[v]] < quota[labels[v]]}
            )
            if not cand:
                break
            v = cand[int(rng.integers(len(cand)))]
            chosen.append(v)
            members.add(v)
            counts[labels[v]] += 1
        if len(chosen) == size:
            return sorted(chosen)
    raise InfeasibleSplitError(f"no connected class-balanced set of size {size} after {retries} retries")


def make_layout(
    kind: str,
    params: CsbmParams,
    per_client: int,
    split: Sequence[float],
    rng: np.random.Generator,
) -> TaskLayout:
    kind = kind.lower()
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}; expected one of {TASKS}")
    if kind == "dnc" and per_client != 1:
        raise ValueError("DNC has exactly one row per client")
    labels = balanced_labels(params.n, rng)
    if kind == "sc":
        for _ in range(MAX_RETRIES):
            graph = csbm_graph(params, labels, rng)
            if graph.is_connected():
                break
        else:
            raise InfeasibleSplitError("could not draw a connected SC graph")
        row_splits = []
        n_train, n_valid, n_test = _split_counts(per_client, split)
        for _ in range(params.n):
            tags = np.array([TRAIN] * n_train + [VALID] * n_valid + [TEST] * n_test, dtype=np.int8)
            row_splits.append(rng.permutation(tags))
    else:
        graph = csbm_graph(params, labels, rng)
        n_train, n_valid, _ = _split_counts(params.n, split)
        train = connected_balanced_subset(graph, labels, n_train, rng)
        rest = np.setdiff1d(np.arange(params.n), train)
        valid = set(rng.choice(rest, size=n_valid, replace=False).tolist())
        train_set = set(train)
        row_splits = []
        for k in range(params.n):
            tag = TRAIN if k in train_set else VALID if k in valid else TEST
            row_splits.append(np.full(per_client, tag, dtype=np.int8))
    return TaskLayout(kind, params, graph, labels, per_client, row_splits)


def one_hot(signs) -> np.ndarray:
    """Map +1 -> (1, 0) and -1 -> (0, 1)."""
    signs = np.asarray(signs)
    return np.stack([(signs > 0), (signs <= 0)], axis=-1).astype(np.float64)


def sample_data(
    layout: TaskLayout, rng: np.random.Generator, noise: str = "sqrt_p"
) -> ClientDataset:
    """Draw features (and SC labels) for a fixed layout.

    ``noise`` picks the divisor of the standard-normal noise term: ``"p"``
    (x = sqrt(mu/N) y u + Z/p) or ``"sqrt_p"`` (Z/sqrt(p), the classic cSBM).
    """
    prm = layout.params
    if noise not in NOISE_MODES:
        raise ValueError(f"noise must be 'p' or 'sqrt_p', got {noise!r}")
    div = prm.p if noise == "p" else math.sqrt(prm.p)
    u = rng.standard_normal(prm.p) / math.sqrt(prm.p)
    scale = math.sqrt(prm.mu / prm.n)
    features, labels = [], []
    for k in range(prm.n):
        if layout.kind == "sc":
            rate = 0.7 if layout.node_labels[k] > 0 else 0.3
            y = np.where(rng.random(layout.per_client) < rate, 1, -1)
        else:
            y = np.full(layout.per_client, layout.node_labels[k])
        z = rng.standard_normal((layout.per_client, prm.p))
        features.append(scale * y[:, None] * u[None, :] + z / div)
        labels.append(one_hot(y))
    labeled = np.array([bool(np.any(s == TRAIN)) for s in layout.row_splits])
    return ClientDataset(features, labels, [s.copy() for s in layout.row_splits], labeled, layout.node_labels.copy())


def generate_task(
    kind: str,
    params: CsbmParams,
    per_client: int,
    split: Sequence[float],
    rng: np.random.Generator,
    noise: str = "sqrt_p",
) -> tuple[Graph, ClientDataset]:
    layout = make_layout(kind, params, per_client, split, rng)
    return layout.graph, sample_data(layout, rng, noise)


# ---------------------------------------------------------------- files


def _read_lines(path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _parse_row(path, lineno: int, line: str) -> list[float]:
    try:
        row = [float(tok) for tok in line.split(",")]
    except ValueError:
        raise GraphFileError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    if not all(math.isfinite(v) for v in row):
        raise GraphFileError(f"{path}:{lineno}: non-finite value")
    return row


def read_edges(path, n: int | None = None) -> list[tuple[int, int]]:
    edges = []
    for lineno, line in _read_lines(path):
        toks = line.split()
        if len(toks) != 2:
            raise GraphFileError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(toks[0]), int(toks[1])
        except ValueError:
            raise GraphFileError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
        if u < 0 or v < 0 or (n is not None and (u >= n or v >= n)):
            raise GraphFileError(f"{path}:{lineno}: node id out of range [0, {n})")
        if u == v:
            raise GraphFileError(f"{path}:{lineno}: self-loop on node {u}")
        edges.append((u, v))
    return edges


def read_matrix(path) -> np.ndarray:
    rows, width = [], None
    for lineno, line in _read_lines(path):
        row = _parse_row(path, lineno, line)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFileError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        rows.append(row)
    if not rows:
        raise GraphFileError(f"{path}: no data rows")
    return np.array(rows)


def _labels_to_one_hot(path, raw: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    if raw.shape[1] > 1:
        if not np.allclose(raw.sum(axis=1), 1.0) or not np.all((raw == 0) | (raw == 1)):
            raise GraphFileError(f"{path}: multi-column label rows must be one-hot")
        return raw.astype(np.float64)
    ids = raw[:, 0]
    if np.any(ids != np.round(ids)) or np.any(ids < 0):
        raise GraphFileError(f"{path}: class ids must be non-negative integers")
    ids = ids.astype(int)
    c = n_classes or int(ids.max()) + 1
    return np.eye(c)[ids]


def load_graph_files(edge_path, feature_path, label_path, rows_path=None) -> tuple[Graph, ClientDataset]:
    """Load a graph plus per-row features/labels.

    Without ``rows_path`` every row is one client (row index = node id) and
    no client is labeled.  ``rows_path`` lines are ``client,split``.
    """
    x = read_matrix(feature_path)
    y = _labels_to_one_hot(label_path, read_matrix(label_path))
    if len(y) != len(x):
        raise GraphFileError(f"{label_path}: {len(y)} label rows but {len(x)} feature rows")
    if rows_path is None:
        owner = np.arange(len(x))
        tags = np.full(len(x), TEST, dtype=np.int8)
    else:
        owner_list, tag_list = [], []
        for lineno, line in _read_lines(rows_path):
            toks = [t.strip() for t in line.split(",")]
            if len(toks) != 2 or toks[1] not in SPLIT_NAMES:
                raise GraphFileError(f"{rows_path}:{lineno}: expected 'client,train|valid|test'")
            try:
                owner_list.append(int(toks[0]))
            except ValueError:
                raise GraphFileError(f"{rows_path}:{lineno}: non-integer client id") from None
            tag_list.append(SPLIT_NAMES.index(toks[1]))
        if len(owner_list) != len(x):
            raise GraphFileError(f"{rows_path}: {len(owner_list)} rows but {len(x)} feature rows")
        owner = np.array(owner_list)
        tags = np.array(tag_list, dtype=np.int8)
    n = int(owner.max()) + 1
    if set(owner.tolist()) != set(range(n)):
        raise GraphFileError("client ids must cover 0..n-1 without gaps")
    graph = Graph(n, tuple(read_edges(edge_path, n)))
    feats = [x[owner == k] for k in range(n)]
    labs = [y[owner == k] for k in range(n)]
    splits = [tags[owner == k] for k in range(n)]
    labeled = np.array([bool(np.any(s == TRAIN)) for s in splits])
    return graph, ClientDataset(feats, labs, splits, labeled)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_task_files(out_dir, graph: Graph, data: ClientDataset) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "edges": out / "edges.txt",
        "features": out / "features.csv",
        "labels": out / "labels.csv",
        "rows": out / "rows.csv",
    }
    with open(paths["edges"], "w", encoding="utf-8") as fh:
        fh.write(f"# {graph.n} nodes, {len(graph.edges)} edges\n")
        fh.writelines(f"{u} {v}\n" for u, v in graph.edges)
    with open(paths["features"], "w", encoding="utf-8") as fh:
        for f in data.features:
            fh.writelines(",".join(_fmt(v) for v in row) + "\n" for row in f)
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        for y in data.labels:
            fh.writelines(f"{int(np.argmax(row))}\n" for row in y)
    with open(paths["rows"], "w", encoding="utf-8") as fh:
        for k, s in enumerate(data.splits):
            fh.writelines(f"{k},{SPLIT_NAMES[t]}\n" for t in s)
    return paths


# ---------------------------------------------------------------- subCora


@dataclass(frozen=True)
class SubgraphSplit:
    nodes: tuple[int, ...]  # all selected nodes, ids in the source graph
    train: tuple[int, ...]
    valid: tuple[int, ...]
    test: tuple[int, ...]


def qualifies_as_train_component(
    component_classes: Sequence[int], n_classes: int = 7, min_size: int = 30, max_size: int = 50, max_std: float = 2.5
) -> bool:
    size = len(component_classes)
    if not min_size <= size <= max_size:
        return False
    counts = np.bincount(np.asarray(component_classes, dtype=int), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        return False
    return float(np.std(counts)) <= max_std


def _bfs_layers(g_nb: list[list[int]], sources: Iterable[int]) -> list[list[int]]:
    dist = {s: 0 for s in sources}
    layers: list[list[int]] = []
    frontier = sorted(dist)
    while frontier:
        nxt = []
        for u in frontier:
            for v in g_nb[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        if nxt:
            layers.append(sorted(nxt))
        frontier = sorted(nxt)
    return layers


def subcora_split(
    g: Graph,
    labels,
    rng: np.random.Generator,
    sample_size: int = 800,
    total: int = 300,
    n_classes: int = 7,
) -> SubgraphSplit | None:
    """One attempt of the subCora extraction; ``None`` means the seed is rejected."""
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < n_classes:
        raise ValueError(f"need at least {n_classes} classes")
    sample = np.sort(rng.choice(g.n, size=min(sample_size, g.n), replace=False))
    sub = g.subgraph(sample.tolist())
    good = []
    for comp in sub.components():
        members = sample[comp]
        if qualifies_as_train_component(labels[members].tolist(), n_classes):
            good.append(sorted(members.tolist()))
    if not good:
        return None
    train = good[int(rng.integers(len(good)))]
    layers = _bfs_layers(g.neighbors(), train)
    near = sorted(v for layer in layers[:2] for v in layer)
    if len(near) < len(train):
        return None
    valid = sorted(rng.choice(near, size=len(train), replace=False).tolist())
    taken = set(train) | set(valid)
    need = total - len(taken)
    test: list[int] = []
    pools = [[v for v in near if v not in taken]] + [layer for layer in layers[2:]]
    for pool in pools:
        if need <= 0:
            break
        pool = [v for v in pool if v not in taken]
        pick = pool if len(pool) <= need else rng.choice(pool, size=need, replace=False).tolist()
        test.extend(int(v) for v in pick)
        need -= len(pick)
    if need > 0:
        return None
    nodes = tuple(sorted(set(train) | set(valid) | set(test)))
    return SubgraphSplit(nodes, tuple(train), tuple(valid), tuple(sorted(test)))
