"""Server, client states and the synchronous five-step round.

A round is: labeled clients upload models, the server broadcasts their
FedAvg, every client uploads its mean hidden packet at that model, the
server returns each labeled client its neighbour context, and labeled
clients take I local steps against the frozen context.

The per-client functions (client_hidden_estimate, encoder.local_gradient)
are the reference path.  The round itself computes packets and local
steps for fixed blocks of CHUNK clients at a time with stacked arrays;
block boundaries never depend on the thread count, so runs with any
number of threads are bit-identical.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..encoder import AggregatedContext, HiddenPacket, ModelParams, fedavg, mean_packet
from ..graphgen import TEST, TRAIN, VALID, ClientDataset, Graph, PropagationMatrix, propagation_matrix
from ..labkit.evaluation import evaluate_splits, score
from ..labkit.history import RoundRecord, TrainingHistory
from ..numkit import softmax_rows
from .transport import SERVER, TransportError, make_transport
from .wire import MessageKind, RoundMessage

CHUNK = 32
BASELINES = ("none", "fedmlp", "local_mlps")
DP_TARGETS = ("h", "h_and_grad")
STREAM_INIT, STREAM_BATCH, STREAM_DP = 2, 3, 4


class RoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class DPConfig:
    target: str = "h_and_grad"
    sigma: float = 0.0

    def __post_init__(self):
        if self.target not in DP_TARGETS:
            raise ValueError(f"dp target must be one of {DP_TARGETS}, got {self.target!r}")
        if not self.sigma >= 0:
            raise ValueError("dp sigma must be >= 0")


@dataclass(frozen=True)
class TrainingConfig:
    eta: float
    T: int
    I: int = 10
    batch_size: int = 1
    alpha: float = 0.1
    M: int = 10
    propagation: str = "teleport"
    hidden: int = 64
    task: str = "dnc"
    dp: DPConfig | None = None
    baseline: str = "none"
    seed: int = 0
    threads: int = 1
    transport: str = "inproc"

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.I < 1:
            raise ValueError("I must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden < 1 or self.M < 1:
            raise ValueError("hidden and M must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def replace(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)

    def echo(self) -> dict:
        out = asdict(self)
        dp = out.pop("dp")
        out["dp_target"] = dp["target"] if dp else "none"
        out["dp_sigma"] = dp["sigma"] if dp else 0.0
        return out


@dataclass
class ClientState:
    id: int
    features: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    labeled: bool
    params: ModelParams | None = None
    ctx: AggregatedContext | None = None
    ctx_round: int = -1
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    dp_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    _queue: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def next_batch(self, size: int) -> np.ndarray:
        """Indices of the next train batch.

        Epochs are seeded shuffles consumed without replacement; a tail
        shorter than ``size`` is dropped.  A full batch is the rows in order.
        """
        n = len(self.x_train)
        if size >= n:
            return np.arange(n)
        if len(self._queue) < size:
            self._queue = self.rng.permutation(n)
        idx, self._queue = self._queue[:size], self._queue[size:]
        return idx


def build_states(dataset: ClientDataset, seed: int) -> list[ClientState]:
    n = dataset.n_clients
    batch_seqs = np.random.SeedSequence([seed, STREAM_BATCH]).spawn(n)
    dp_seqs = np.random.SeedSequence([seed, STREAM_DP]).spawn(n)
    states = []
    for k in range(n):
        x, y = dataset.rows(k, TRAIN)
        states.append(
            ClientState(
                k,
                dataset.features[k],
                x,
                y,
                bool(dataset.labeled[k]),
                rng=np.random.default_rng(batch_seqs[k]),
                dp_rng=np.random.default_rng(dp_seqs[k]),
            )
        )
    return states


def initial_params(dataset: ClientDataset, cfg: TrainingConfig) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, STREAM_INIT]))
    return ModelParams.glorot(dataset.p, cfg.hidden, dataset.n_classes, rng)


# ---------------------------------------------------------------- reference operations


def client_hidden_estimate(shard, w_bar: ModelParams) -> HiddenPacket:
    """Mean hidden vector and Jacobian over every local row, at w_bar."""
    shard = np.asarray(shard, dtype=np.float64)
    if shard.ndim != 2 or len(shard) == 0:
        raise ValueError("client_hidden_estimate needs a nonempty shard")
    return mean_packet(shard, w_bar)


def server_aggregate_hidden(
    a_tilde: PropagationMatrix, packets, recipients: Sequence[int] | None = None
) -> dict[int, AggregatedContext]:
    """C_k = sum_{j != k} a_kj h_j and its Jacobian, for each recipient k."""
    a = a_tilde.matrix if isinstance(a_tilde, PropagationMatrix) else np.asarray(a_tilde)
    n = a.shape[0]
    if isinstance(packets, Mapping):
        missing = [k for k in range(n) if k not in packets]
        ordered = [packets[k] for k in range(n) if k in packets]
    else:
        missing = list(range(len(packets), n))
        ordered = list(packets)
    if missing:
        raise RoundError(f"missing hidden packet from client {missing[0]}")
    if len(ordered) != n:
        raise RoundError(f"got {len(ordered)} packets for {n} clients")
    c, size = ordered[0].jac.shape
    hs = np.stack([p.h for p in ordered])
    jacs = np.stack([p.jac for p in ordered]).reshape(n, c * size)
    off = a - np.diag(np.diag(a))
    rec = list(range(n)) if recipients is None else list(recipients)
    rows = off[rec]
    cv = rows @ hs
    cj = (rows @ jacs).reshape(len(rec), c, size)
    out = {}
    for i, k in enumerate(rec):
        ctx = AggregatedContext(cv[i], cj[i])
        ctx.c_vec.flags.writeable = False
        ctx.c_jac.flags.writeable = False
        out[k] = ctx
    return out


# ---------------------------------------------------------------- batched kernels


def _chunks(items: list) -> list[list]:
    return [items[i : i + CHUNK] for i in range(0, len(items), CHUNK)]


def _map(pool: ThreadPoolExecutor | None, fn, jobs: list) -> list:
    if pool is None or len(jobs) < 2:
        return [fn(j) for j in jobs]
    return list(pool.map(fn, jobs))


def _packet_block(states: list[ClientState], w: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean packets of a block of clients: h (m, c) and jac (m, c, P)."""
    m, p, hid, c = len(states), w.p, w.hidden, w.c
    counts = [len(s.features) for s in states]
    if min(counts) == 0:
        empty = states[counts.index(0)].id
        raise RoundError(f"client {empty} has no rows to summarize")
    x = np.concatenate([s.features for s in states])
    pre = x @ w.w1
    act = np.maximum(pre, 0.0)
    gate = (pre > 0.0).astype(np.float64)
    n = np.array(counts, dtype=np.float64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    mean_act = np.add.reduceat(act, starts, axis=0) / n[:, None]
    if len(set(counts)) == 1:
        k = counts[0]
        mixed = x.reshape(m, k, p).transpose(0, 2, 1) @ gate.reshape(m, k, hid) / k
    else:
        mixed = np.stack([x[a : a + k].T @ gate[a : a + k] / k for a, k in zip(starts, counts)])
    jac = np.empty((m, c, w.size))
    # d h_r / d w1[i, j] = w2[j, r] * mean(x_i gate_j), written in place
    np.multiply(mixed[:, None, :, :], w.w2.T[None, :, None, :], out=jac[:, :, : p * hid].reshape(m, c, p, hid))
    jac[:, :, p * hid :] = 0.0
    for r in range(c):
        jac[:, r, p * hid + r :: c] = mean_act
    return mean_act @ w.w2, jac


def compute_packets(
    states: list[ClientState], w_bar: ModelParams, dp: DPConfig | None, pool=None
) -> list[HiddenPacket]:
    blocks = _map(pool, lambda b: _packet_block(b, w_bar), _chunks(states))
    out = []
    for block, (hs, jacs) in zip(_chunks(states), blocks):
        for s, h, jac in zip(block, hs, jacs):
            if dp is not None and dp.sigma > 0:
                h = h + dp.sigma * s.dp_rng.standard_normal(h.shape)
                if dp.target == "h_and_grad":
                    jac = jac + dp.sigma * s.dp_rng.standard_normal(jac.shape)
            out.append(HiddenPacket(h, jac))
    return out


def _cohort_steps(
    block: list[ClientState], a_diag: np.ndarray | None, cfg: TrainingConfig, steps: int, batch: int
) -> np.ndarray:
    """Run ``steps`` local SGD updates for a block of clients in lockstep; returns (m, P)."""
    w0 = block[0].params
    p, hid, c = w0.shape
    m = len(block)
    flat = np.stack([s.params.flat() for s in block])
    w1 = flat[:, : p * hid].reshape(m, p, hid)
    w2 = flat[:, p * hid :].reshape(m, hid, c)
    if a_diag is None:
        a = np.ones(m)
        cvec = np.zeros((m, c))
        cjac = None
    else:
        a = a_diag
        cvec = np.stack([s.ctx.c_vec for s in block])
        cjac = np.stack([s.ctx.c_jac for s in block])
    a3 = a[:, None, None]
    scale = (a / batch)[:, None, None]
    for _ in range(steps):
        idx = [s.next_batch(batch) for s in block]
        x = np.stack([s.x_train[i] for s, i in zip(block, idx)])
        y = np.stack([s.y_train[i] for s, i in zip(block, idx)])
        pre = x @ w1
        act = np.maximum(pre, 0.0)
        err = softmax_rows(a3 * (act @ w2) + cvec[:, None, :]) - y
        g2 = scale * (act.transpose(0, 2, 1) @ err)
        delta = (err @ w2.transpose(0, 2, 1)) * (pre > 0.0)
        g1 = scale * (x.transpose(0, 2, 1) @ delta)
        grad = np.concatenate([g1.reshape(m, -1), g2.reshape(m, -1)], axis=1)
        if cjac is not None:
            grad += (err.sum(axis=1)[:, None, :] / batch @ cjac)[:, 0, :]
        flat -= cfg.eta * grad
    return flat


def local_updates(
    states: list[ClientState], cfg: TrainingConfig, steps: int, a_tilde: np.ndarray | None, pool=None
) -> None:
    """Apply ``steps`` local updates to every given (labeled) client in place."""
    groups: dict[int, list[ClientState]] = {}
    for s in states:
        if len(s.x_train) == 0:
            raise RoundError(f"labeled client {s.id} has no training rows")
        groups.setdefault(min(cfg.batch_size, len(s.x_train)), []).append(s)
    jobs = []
    for batch in sorted(groups):
        for block in _chunks(groups[batch]):
            diag = None if a_tilde is None else np.array([a_tilde[s.id, s.id] for s in block])
            jobs.append((block, diag, batch))
    results = _map(pool, lambda j: _cohort_steps(j[0], j[1], cfg, steps, j[2]), jobs)
    for (block, _, _), flat in zip(jobs, results):
        for s, row in zip(block, flat):
            s.params = ModelParams.from_flat(row, *s.params.shape)


# ---------------------------------------------------------------- protocol


class Server:
    """Round barrier: waits for every upload before broadcasting."""

    def __init__(self, a_tilde: PropagationMatrix | None, n_clients: int, labeled: Sequence[int], transport):
        self.a_tilde = a_tilde
        self.n_clients = n_clients
        self.labeled = sorted(labeled)
        self.transport = transport
        self.w_bar: ModelParams | None = None

    def _expect(self, kind: MessageKind, rnd: int, count: int) -> dict[int, RoundMessage]:
        got: dict[int, RoundMessage] = {}
        for _ in range(count):
            m = self.transport.recv(SERVER)
            if m.kind is not kind or m.round != rnd:
                raise RoundError(f"server expected {kind.name} for round {rnd}, got {m.kind.name} for round {m.round}")
            if m.client_id in got:
                raise RoundError(f"duplicate {kind.name} from client {m.client_id} in round {rnd}")
            got[m.client_id] = m
        return got

    def aggregate_models(self, rnd: int) -> ModelParams:
        got = self._expect(MessageKind.MODEL_UPLOAD, rnd, len(self.labeled))
        missing = [k for k in self.labeled if k not in got]
        if missing:
            raise RoundError(f"round {rnd}: no model upload from client {missing[0]}")
        self.w_bar = fedavg([got[k].payload for k in self.labeled])
        self.transport.send(RoundMessage(MessageKind.MODEL_BROADCAST, rnd, None, self.w_bar))
        return self.w_bar

    def aggregate_hidden(self, rnd: int) -> None:
        got = self._expect(MessageKind.HIDDEN_UPLOAD, rnd, self.n_clients)
        ctxs = server_aggregate_hidden(
            self.a_tilde, {k: m.payload for k, m in got.items()}, recipients=self.labeled
        )
        for k in self.labeled:
            self.transport.send(RoundMessage(MessageKind.AGG_BROADCAST, rnd, k, ctxs[k]))


def _receive(transport, state: ClientState, kind: MessageKind, rnd: int) -> RoundMessage:
    m = transport.recv(state.id)
    if m.kind is not kind or m.round != rnd:
        raise RoundError(f"client {state.id} expected {kind.name} for round {rnd}, got {m.kind.name} for round {m.round}")
    return m


def run_round(
    states: list[ClientState],
    server: Server,
    cfg: TrainingConfig,
    rnd: int,
    steps: int | None = None,
    pool: ThreadPoolExecutor | None = None,
) -> list[ClientState]:
    """One communication round followed by ``steps`` (default I) local updates."""
    steps = cfg.I if steps is None else steps
    tr = server.transport
    labeled = [s for s in states if s.labeled]
    try:
        for s in labeled:
            tr.send(RoundMessage(MessageKind.MODEL_UPLOAD, rnd, s.id, s.params))
        server.aggregate_models(rnd)
        for s in states:
            s.params = _receive(tr, s, MessageKind.MODEL_BROADCAST, rnd).payload
        graph_model = cfg.baseline == "none"
        if graph_model:
            packets = compute_packets(states, server.w_bar, cfg.dp, pool)
            for s, pk in zip(states, packets):
                tr.send(RoundMessage(MessageKind.HIDDEN_UPLOAD, rnd, s.id, pk))
            server.aggregate_hidden(rnd)
            for s in labeled:
                s.ctx = _receive(tr, s, MessageKind.AGG_BROADCAST, rnd).payload
                s.ctx_round = rnd
    except TransportError as exc:
        raise RoundError(f"round {rnd} aborted: {exc}") from exc
    if steps:
        a = server.a_tilde.matrix if graph_model else None
        local_updates(labeled, cfg, steps, a, pool)
    return states


# ---------------------------------------------------------------- training loops


def _pick_best(hist: TrainingHistory, rec: RoundRecord, params: ModelParams) -> None:
    if math.isnan(rec.valid_loss):
        return
    if math.isnan(hist.best_valid_loss) or rec.valid_loss < hist.best_valid_loss:
        hist.best_valid_loss = rec.valid_loss
        hist.best_update = rec.update
        hist.best_params = params


def _finish(hist: TrainingHistory, a, dataset: ClientDataset) -> TrainingHistory:
    if hist.best_params is None:
        hist.best_params = hist.final_params
    if np.any(dataset.stacked.splits == TEST):
        hist.test_loss, hist.test_acc = evaluate_splits(hist.best_params, a, dataset, (TEST,))[TEST]
    return hist


def run_training(
    cfg: TrainingConfig,
    graph: Graph | None,
    dataset: ClientDataset,
    a_tilde: PropagationMatrix | None = None,
    transport=None,
) -> TrainingHistory:
    """ceil(T/I) rounds totalling T local updates, recorded at each round end.

    ``graph`` may be None for the fedmlp baseline.  The snapshot with the
    lowest validation loss is kept and scored on the test rows.
    """
    if cfg.baseline == "local_mlps":
        return run_baseline(cfg, dataset)
    n = dataset.n_clients
    labeled = [k for k in range(n) if dataset.labeled[k]]
    if not labeled:
        raise ValueError("no labeled clients to train")
    if cfg.baseline == "none":
        if a_tilde is None:
            if graph is None:
                raise ValueError("GFL training needs a client graph")
            if graph.n != n:
                raise ValueError(f"graph has {graph.n} nodes but the dataset has {n} clients")
            a_tilde = propagation_matrix(graph, cfg.alpha, cfg.M, cfg.propagation)
        eval_a = a_tilde
    else:
        a_tilde = eval_a = None
    w0 = initial_params(dataset, cfg)
    states = build_states(dataset, cfg.seed)
    for s in states:
        s.params = w0
    hist = TrainingHistory(config=cfg.echo(), final_params=w0)
    own_transport = transport is None
    if own_transport:
        transport = make_transport(cfg.transport, range(n))
    server = Server(a_tilde, n, labeled, transport)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        t, rnd = 0, 0
        while t < cfg.T:
            steps = min(cfg.I, cfg.T - t)
            run_round(states, server, cfg, rnd, steps, pool)
            t += steps
            rnd += 1
            w_end = fedavg([states[k].params for k in labeled])
            ev = evaluate_splits(w_end, eval_a, dataset, (TRAIN, VALID))
            rec = RoundRecord(t, ev[TRAIN][0], ev[VALID][0], ev[TRAIN][1], ev[VALID][1])
            hist.append(rec)
            _pick_best(hist, rec, w_end)
            hist.final_params = w_end
    finally:
        if pool is not None:
            pool.shutdown()
        if own_transport:
            transport.close()
    return _finish(hist, eval_a, dataset)


def _client_scores(models: dict[int, ModelParams], dataset: ClientDataset, split: int) -> list[tuple[float, float]]:
    out = []
    for k, w in models.items():
        x, y = dataset.rows(k, split)
        if len(x):
            out.append(score(np.maximum(x @ w.w1, 0.0) @ w.w2, y))
    return out


def _mean_scores(scores: list[tuple[float, float]]) -> tuple[float, float]:
    if not scores:
        return math.nan, math.nan
    return sum(s[0] for s in scores) / len(scores), sum(s[1] for s in scores) / len(scores)


def run_baseline(cfg: TrainingConfig, dataset: ClientDataset, transport=None) -> TrainingHistory:
    """fedmlp: the round protocol without hidden sharing.  local_mlps: no communication.

    For local MLPs every client keeps its own model and its own
    lowest-validation-loss snapshot; reported metrics are plain means over
    the clients that have rows in the split.
    """
    if cfg.baseline == "fedmlp":
        return run_training(cfg, None, dataset, transport=transport)
    if cfg.baseline != "local_mlps":
        raise ValueError(f"run_baseline needs baseline fedmlp or local_mlps, got {cfg.baseline!r}")
    n = dataset.n_clients
    st = dataset.stacked
    evaluated = sorted(set(st.owner[st.splits != TRAIN].tolist()))
    blind = [k for k in evaluated if not dataset.labeled[k]]
    if blind:
        raise ValueError(f"local MLPs cannot score client {blind[0]}: it has no training rows")
    labeled = [k for k in range(n) if dataset.labeled[k]]
    if not labeled:
        raise ValueError("no labeled clients to train")
    w0 = initial_params(dataset, cfg)
    states = [s for s in build_states(dataset, cfg.seed) if s.labeled]
    for s in states:
        s.params = w0
    hist = TrainingHistory(config=cfg.echo(), final_params={k: w0 for k in labeled})
    best = {k: (math.inf, w0) for k in labeled}
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        t = 0
        while t < cfg.T:
            steps = min(cfg.I, cfg.T - t)
            local_updates(states, cfg, steps, None, pool)
            t += steps
            models = {s.id: s.params for s in states}
            for k, w in models.items():
                x, y = dataset.rows(k, VALID)
                if len(x):
                    vl = score(np.maximum(x @ w.w1, 0.0) @ w.w2, y)[0]
                    if vl < best[k][0]:
                        best[k] = (vl, w)
                else:
                    best[k] = (math.inf, w)
            tr = _mean_scores(_client_scores(models, dataset, TRAIN))
            va = _mean_scores(_client_scores(models, dataset, VALID))
            hist.append(RoundRecord(t, tr[0], va[0], tr[1], va[1]))
            hist.final_params = models
    finally:
        if pool is not None:
            pool.shutdown()
    hist.best_params = {k: b[1] for k, b in best.items()}
    finite = [b[0] for b in best.values() if math.isfinite(b[0])]
    if finite:
        hist.best_valid_loss = sum(finite) / len(finite)
    te = _client_scores(hist.best_params, dataset, TEST)
    if te:
        hist.test_loss, hist.test_acc = _mean_scores(te)
    return hist
