"""Round orchestration for FedFoA and its baselines.

Clients never exchange model weights in ``fedfoa`` mode. After each round a
client publishes the average of its per-batch correlation matrices to the
memory bank; during round ``t`` every client reads the bank as it stood at the
end of round ``t - 1``. Records published in the current round become visible
only after the batched commit that closes the round.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .config import RunConfig
from .correlation import CorrelationRecord, extract_correlation, independence_trace, packed_size
from .data import BatchStream, Dataset, gen_synthetic, load_cifar10, partition_iid, split_holdout, two_view_augment
from .ssl import (
    DivergenceError,
    EncoderModel,
    LossBreakdown,
    backward_and_step,
    build_encoder,
    contrastive_loss,
    foa_regularizer,
    forward,
)

log = logging.getLogger(__name__)

# Everything that may cross a client boundary in fedfoa mode.
BANK_CROSSING_TYPES = (CorrelationRecord,)


class TrainingError(RuntimeError):
    def __init__(self, round_index: int, client_id: int, cause: Exception):
        super().__init__(f"round {round_index}, client {client_id}: {cause}")
        self.round_index = round_index
        self.client_id = client_id


class MemoryBank:
    """Latest correlation record per client, plus an optional append-only log."""

    def __init__(self, keep_log: bool = True):
        self._entries: dict[int, CorrelationRecord] = {}
        self.keep_log = keep_log
        self.log: list[CorrelationRecord] = []

    def __len__(self):
        return len(self._entries)

    def __contains__(self, client_id):
        return client_id in self._entries

    def get(self, client_id: int) -> CorrelationRecord | None:
        return self._entries.get(client_id)

    def commit(self, records) -> None:
        records = list(records)
        for rec in records:
            if not isinstance(rec, BANK_CROSSING_TYPES):
                raise TypeError(f"memory bank only accepts {BANK_CROSSING_TYPES}, got {type(rec).__name__}")
            prev = self._entries.get(rec.client_id)
            if prev is not None and rec.round <= prev.round:
                raise ValueError(
                    f"client {rec.client_id}: round {rec.round} does not advance past {prev.round}"
                )
        ids = [r.client_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("one commit may carry at most one record per client")
        for rec in records:
            self._entries[rec.client_id] = rec
            if self.keep_log:
                self.log.append(rec)

    def view(self, round_index: int) -> dict[int, CorrelationRecord]:
        """Snapshot readable during ``round_index``: only records from earlier rounds."""
        return {cid: rec for cid, rec in self._entries.items() if rec.round < round_index}


@dataclass
class ClientState:
    client_id: int
    model: EncoderModel
    data: Dataset
    rng: np.random.Generator
    peer_rng: np.random.Generator
    stream: BatchStream
    batch_rs: list = field(default_factory=list)

    @property
    def arch_id(self) -> str:
        return self.model.arch_id


@dataclass
class ClientRoundStats:
    client_id: int
    arch_id: str
    loss_contrastive: float
    loss_reg: float
    loss_total: float
    trace_rbar: float
    bytes_up: int
    bytes_down: int
    peers_used: float = 0.0
    probe_acc: float | None = None


@dataclass
class RoundReport:
    round: int
    clients: list[ClientRoundStats]
    wall_time: float = 0.0

    @property
    def bytes_uploaded(self) -> int:
        return sum(c.bytes_up for c in self.clients)

    @property
    def bytes_downloaded(self) -> int:
        return sum(c.bytes_down for c in self.clients)

    def mean_trace(self) -> float:
        return float(np.mean([c.trace_rbar for c in self.clients]))

    def mean_probe(self) -> float | None:
        accs = [c.probe_acc for c in self.clients if c.probe_acc is not None]
        return float(np.mean(accs)) if accs else None

    def to_dict(self, with_time: bool = True) -> dict:
        out = {"round": self.round, "clients": [asdict(c) for c in self.clients]}
        if with_time:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class TrainingRun:
    config: RunConfig
    history: list[RoundReport]
    clients: list[ClientState]
    bank: MemoryBank
    records: dict[int, list[CorrelationRecord]]

    @property
    def models(self) -> list[EncoderModel]:
        return [c.model for c in self.clients]


class FoaTerms(NamedTuple):
    loss: float
    grad: np.ndarray
    regularizer: float
    peers_used: int


def fedfoa_loss_terms(z, r_own, bank: Mapping[int, CorrelationRecord], self_id: int, lam: float,
                      squared: bool = True, peers_per_batch: int = 0, rng=None) -> FoaTerms:
    """Trace-gated recreation terms against every qualifying peer.

    A peer ``j`` contributes ``lam * l_A(z, R_j)`` only if its stored trace is
    strictly larger than the trace of this batch's own correlation matrix.
    """
    z = np.asarray(z, dtype=np.float64)
    own_trace = independence_trace(r_own)
    eligible = []
    for cid in sorted(bank):
        if cid == self_id:
            continue
        rec = bank[cid]
        if rec.n != z.shape[1]:
            raise ValueError(
                f"peer {cid} published a {rec.n}x{rec.n} matrix but features have dim {z.shape[1]}"
            )
        if rec.trace > own_trace:
            eligible.append(rec)
    if peers_per_batch and len(eligible) > peers_per_batch:
        pick = np.sort(rng.choice(len(eligible), peers_per_batch, replace=False))
        eligible = [eligible[k] for k in pick]

    grad = np.zeros_like(z)
    reg = 0.0
    for rec in eligible:
        l_a, g_a = foa_regularizer(z, rec.r_bar, squared=squared)
        reg += l_a
        grad += lam * g_a
    return FoaTerms(lam * reg, grad, reg, len(eligible))


def _row_normalize(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    zn = z / norms

    def backward(g):
        return (g - zn * np.sum(zn * g, axis=1, keepdims=True)) / norms

    return zn, backward


def exchanges_correlations(cfg: RunConfig) -> bool:
    # With lambda = 0 nothing downloaded could affect training, so nothing is sent.
    return cfg.mode == "fedfoa" and cfg.lam > 0


def client_local_round(state: ClientState, bank: Mapping[int, CorrelationRecord], cfg: RunConfig,
                       t: int) -> tuple[ClientState, CorrelationRecord, ClientRoundStats]:
    """Run ``cfg.batches_per_round`` local SGD steps and publish the averaged R."""
    regularize = exchanges_correlations(cfg) and t > cfg.t_warm
    state.batch_rs = []
    lc_sum = reg_sum = peers_sum = 0.0
    model = state.model
    for _ in range(cfg.batches_per_round):
        views = two_view_augment(
            state.stream.next(), state.rng, cfg.aug_noise, cfg.aug_dropout,
            image_shape=state.data.image_shape,
        )
        z, cache = forward(model, views)
        if cfg.normalize_before_qr:
            zq, zq_backward = _row_normalize(z)
        else:
            zq, zq_backward = z, None
        r = extract_correlation(zq)
        lc, grad = contrastive_loss(z, cfg.tau)
        if regularize:
            terms = fedfoa_loss_terms(
                zq, r, bank, state.client_id, cfg.lam, squared=cfg.squared_residual,
                peers_per_batch=cfg.peers_per_batch, rng=state.peer_rng,
            )
            if terms.peers_used:
                grad = grad + (zq_backward(terms.grad) if zq_backward else terms.grad)
            reg_sum += terms.regularizer
            peers_sum += terms.peers_used
        lc_sum += lc
        model = backward_and_step(model, cache, grad, cfg.lr)
        state.batch_rs.append(r)
    state.model = model

    b = cfg.batches_per_round
    record = CorrelationRecord.from_batches(state.client_id, t, state.batch_rs)
    breakdown = LossBreakdown(lc_sum / b, reg_sum / b, cfg.lam if regularize else 0.0)
    size = packed_size(cfg.projection_dim)
    peers_read = sum(1 for cid in bank if cid != state.client_id) if regularize else 0
    stats = ClientRoundStats(
        client_id=state.client_id,
        arch_id=state.arch_id,
        loss_contrastive=breakdown.contrastive,
        loss_reg=breakdown.regularizer,
        loss_total=breakdown.total,
        trace_rbar=record.trace,
        bytes_up=size if exchanges_correlations(cfg) else 0,
        bytes_down=size * peers_read,
        peers_used=peers_sum / b,
    )
    return state, record, stats


def fedavg_aggregate(models: list[EncoderModel], weights) -> EncoderModel:
    """Weighted parameter average of identically shaped models."""
    if not models:
        raise ValueError("no models to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ValueError("weights must be non-negative and sum to 1")
    ref = models[0]
    shapes = [p.shape for p in ref.parameters()]
    for m in models[1:]:
        if m.arch_id != ref.arch_id or [p.shape for p in m.parameters()] != shapes:
            raise ValueError(
                f"FedAvg needs homogeneous models; got {ref.arch_id!r} and {m.arch_id!r}"
            )
    params = [
        sum(w * m.parameters()[k] for w, m in zip(weights, models))
        for k in range(len(shapes))
    ]
    return ref.with_parameters(params)


def comm_cost(cfg: RunConfig, mode: str = "round-wise") -> int:
    """Upload bytes per client per round for round-wise or batch-wise publishing."""
    size = packed_size(cfg.projection_dim)
    if mode == "round-wise":
        return size
    if mode == "batch-wise":
        return cfg.batches_per_round * size
    raise ValueError(f"mode must be 'round-wise' or 'batch-wise', got {mode!r}")


# --- orchestration -----------------------------------------------------------

def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Labeled train/test sets described by ``cfg``."""
    if cfg.dataset == "cifar10":
        return load_cifar10(cfg.data_path)
    per_class = cfg.samples_per_class * cfg.num_clients + cfg.test_per_class
    full = gen_synthetic(cfg.num_classes, cfg.input_dim, per_class, cfg.noise_scale, cfg.seed)
    return split_holdout(full, cfg.test_per_class, cfg.seed + 1)


def init_clients(cfg: RunConfig, partitions: list[Dataset]) -> list[ClientState]:
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(partitions))
    clients = []
    for cid, (part, seq) in enumerate(zip(partitions, seeds)):
        init_seq, data_seq, peer_seq = seq.spawn(3)
        model = build_encoder(cfg.arch_for(cid), part.input_dim, cfg.projection_dim,
                              np.random.default_rng(init_seq))
        rng = np.random.default_rng(data_seq)
        clients.append(ClientState(
            client_id=cid,
            model=model,
            data=part,
            rng=rng,
            peer_rng=np.random.default_rng(peer_seq),
            stream=BatchStream(part.samples, cfg.batch_size, rng),
        ))
    return clients


Evaluator = Callable[[int, list[ClientState]], Mapping[int, float]]


def run_training(cfg: RunConfig, partitions: list[Dataset] | None = None,
                 evaluator: Evaluator | None = None,
                 on_round: Callable[[RoundReport], None] | None = None) -> TrainingRun:
    """Execute ``cfg.rounds`` rounds; deterministic for a fixed config and seed.

    ``partitions`` are unlabeled client shards (built from ``cfg`` if omitted).
    ``evaluator`` is called every ``cfg.probe_every`` rounds and may attach a
    probe accuracy to each client's stats.
    """
    cfg.validate()
    if partitions is None:
        train, _ = build_datasets(cfg)
        partitions = partition_iid(train.unlabeled(), cfg.num_clients, cfg.seed)
    partitions = [p.unlabeled() for p in partitions]
    if len(partitions) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} partitions, got {len(partitions)}")
    clients = init_clients(cfg, partitions)
    if cfg.mode == "fedavg":
        # Raises for heterogeneous architectures; then every client starts from client 0's init.
        fedavg_aggregate([c.model for c in clients], np.full(len(clients), 1 / len(clients)))
        for c in clients[1:]:
            c.model = clients[0].model.copy()

    bank = MemoryBank(keep_log=True)
    history: list[RoundReport] = []
    records: dict[int, list[CorrelationRecord]] = {}
    sizes = np.array([len(p) for p in partitions], dtype=np.float64)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def work(state, snapshot, t):
        try:
            return client_local_round(state, snapshot, cfg, t)
        except (DivergenceError, ValueError, FloatingPointError) as exc:
            raise TrainingError(t, state.client_id, exc) from exc

    try:
        for t in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            snapshot = bank.view(t) if exchanges_correlations(cfg) else {}
            if pool is None:
                results = [work(c, snapshot, t) for c in clients]
            else:
                results = list(pool.map(lambda c: work(c, snapshot, t), clients))
            published = [rec for _, rec, _ in results]
            stats = [s for _, _, s in results]
            records[t] = published
            if exchanges_correlations(cfg):
                bank.commit(published)
            if cfg.mode == "fedavg":
                merged = fedavg_aggregate([c.model for c in clients], sizes / sizes.sum())
                nbytes = 8 * merged.num_parameters()
                for c, s in zip(clients, stats):
                    c.model = merged.copy()
                    s.bytes_up = s.bytes_down = nbytes
            if evaluator is not None and t % cfg.probe_every == 0:
                accs = evaluator(t, clients)
                for s in stats:
                    s.probe_acc = accs.get(s.client_id)
            report = RoundReport(t, stats, time.perf_counter() - started)
            history.append(report)
            log.info("round %d: mean trace %.4f, up %d B", t, report.mean_trace(), report.bytes_uploaded)
            if on_round is not None:
                on_round(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingRun(cfg, history, clients, bank, records)


# --- exports -----------------------------------------------------------------

METRIC_COLUMNS = ("round", "client_id", "arch_id", "loss_contrastive", "loss_reg",
                  "trace_rbar", "bytes_up", "bytes_down")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def history_to_csv(history: list[RoundReport]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for rep in history:
        for c in rep.clients:
            row = asdict(c)
            row["round"] = rep.round
            lines.append(",".join(_fmt(row[k]) for k in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def history_to_ndjson(history: list[RoundReport], with_time: bool = False) -> str:
    return "".join(json.dumps(rep.to_dict(with_time)) + "\n" for rep in history)


def history_from_ndjson(text: str) -> list[RoundReport]:
    out = []
    for line in text.splitlines():
        if line.strip():
            obj = json.loads(line)
            out.append(RoundReport(obj["round"], [ClientRoundStats(**c) for c in obj["clients"]],
                                   obj.get("wall_time", 0.0)))
    return out


def records_to_ndjson(records: Mapping[int, list[CorrelationRecord]]) -> str:
    return "".join(rec.to_json() + "\n" for t in sorted(records) for rec in records[t])


def records_from_ndjson(text: str) -> dict[int, list[CorrelationRecord]]:
    out: dict[int, list[CorrelationRecord]] = {}
    for line in text.splitlines():
        if line.strip():
            rec = CorrelationRecord.from_json(line)
            out.setdefault(rec.round, []).append(rec)
    return out
