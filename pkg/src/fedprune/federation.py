"""Federated rounds with per-client pruning and localization-preserving aggregation."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import comms
from .comms import CostLedger
from .config import ExperimentConfig
from .data import Silo, fingerprint, gen_synthetic_silos, group_widths, load_csv, normalize, oversample_equalize
from .errors import AlignmentError, ConfigError, DataError
from .nn import Architecture, DenseModel, default_architecture, forward, kaiming_init
from .optim import OptState
from .pruning import InitSnapshot, Mask, apply_mask, check_closure, magnitude_prune, reset_to_init, sparsity
from .schedule import LossHistory, PruneSchedule, hard_gates_open, should_prune
from .training import fit, val_mse

log = logging.getLogger(__name__)

# rng stream tags
_TRAIN, _RECOVER = 0, 1


def client_rng(seed: int, client: int, round: int, phase: int = _TRAIN) -> np.random.Generator:
    """Independent stream per (seed, client, round, phase); serial and parallel runs agree."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(client, round, phase)))


@dataclass(frozen=True)
class TrainSettings:
    epochs: int
    recovery_epochs: int
    batch_size: int = 64
    patience: int | None = 3


@dataclass
class ClientState:
    id: int
    data: Silo
    model: DenseModel
    mask: Mask
    opt: OptState
    init: InitSnapshot
    history: LossHistory = field(default_factory=LossHistory)
    epoch_losses: list[float] = field(default_factory=list)
    prune_rounds: list[int] = field(default_factory=list)
    last_val_mse: float = math.nan

    @property
    def name(self) -> str:
        return self.data.id

    @property
    def sparsity(self) -> float:
        return sparsity(self.mask).p_m


@dataclass
class GlobalState:
    t: int
    T: int
    params: np.ndarray
    masks: dict[int, Mask] = field(default_factory=dict)
    ledger: CostLedger = field(default_factory=CostLedger)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.t <= self.T:
            raise ConfigError(f"round {self.t} outside [0, {self.T}]")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    client_rmse: tuple[float, ...]
    client_sparsity: tuple[float, ...]
    up_bytes: int = 0
    down_bytes: int = 0
    up_bytes_wire: int = 0
    down_bytes_wire: int = 0
    pruned: tuple[int, ...] = ()  # ids of clients that pruned this round

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.client_rmse))

    @property
    def min_rmse(self) -> float:
        return float(np.min(self.client_rmse))

    @property
    def max_rmse(self) -> float:
        return float(np.max(self.client_rmse))

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(self.client_sparsity))

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "client_rmse": list(self.client_rmse),
            "client_sparsity": list(self.client_sparsity),
            "mean_rmse": self.mean_rmse,
            "min_rmse": self.min_rmse,
            "max_rmse": self.max_rmse,
            "mean_sparsity": self.mean_sparsity,
            "up_bytes": self.up_bytes,
            "down_bytes": self.down_bytes,
            "up_bytes_wire": self.up_bytes_wire,
            "down_bytes_wire": self.down_bytes_wire,
            "pruned": list(self.pruned),
        }


# -- aggregation -----------------------------------------------------------

def aggregate_localized(uploads: Sequence[tuple[np.ndarray, Mask]], previous: np.ndarray,
                        prunable_index: np.ndarray) -> np.ndarray:
    """Average each prunable weight over the clients that kept it.

    Weights pruned by every client keep their ``previous`` global value; all
    other parameters are averaged over every client. Sums run in client order
    in float64.
    """
    if not uploads:
        raise DataError("no uploads to aggregate")
    n = previous.size
    total = np.zeros(n, dtype=np.float64)
    count = np.zeros(n, dtype=np.int64)
    keep = np.ones(n, dtype=bool)
    for params, mask in uploads:
        if params.shape != (n,) or len(mask) != prunable_index.size:
            raise AlignmentError("upload does not match the global parameter layout")
        keep[:] = True
        keep[prunable_index[~mask.bits]] = False
        total = total + np.where(keep, params.astype(np.float64), 0.0)
        count += keep
    out = previous.astype(np.float64).copy()
    has = count > 0
    out[has] = total[has] / count[has]
    return out.astype(previous.dtype)


def aggregate_fedavg(uploads: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean of full parameter vectors (plain mean when weights are equal)."""
    if not uploads:
        raise DataError("no uploads to aggregate")
    n = uploads[0].shape
    if any(u.shape != n for u in uploads):
        raise AlignmentError("uploads differ in length")
    if weights is not None and len(weights) != len(uploads):
        raise AlignmentError("one weight per upload")
    if weights is None or len(set(weights)) == 1:
        total = np.zeros(n, dtype=np.float64)
        for u in uploads:
            total = total + u.astype(np.float64)
        return (total / len(uploads)).astype(uploads[0].dtype)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    total = np.zeros(n, dtype=np.float64)
    for wi, u in zip(w, uploads):
        total = total + wi * u.astype(np.float64)
    return (total / w.sum()).astype(uploads[0].dtype)


# -- client side -----------------------------------------------------------

def download(global_state: GlobalState, client: ClientState) -> None:
    """Install the global parameters, masked by the client's own mask."""
    if global_state.params.shape != client.model.params.shape:
        raise AlignmentError("global and client models differ in size")
    client.model.params[:] = global_state.params
    apply_mask(client.model, client.mask, inplace=True)


def local_train(global_state: GlobalState, client: ClientState, settings: TrainSettings) -> float:
    """Download, train, log the round's loss; returns the validation MSE."""
    download(global_state, client)
    client.opt.round = global_state.t
    d = client.data
    rng = client_rng(global_state.seed, client.id, global_state.t, _TRAIN)
    losses = fit(client.model, client.opt, client.mask, d.x_train, d.y_train, d.x_val, d.y_val,
                 settings.epochs, settings.batch_size, rng, settings.patience)
    client.epoch_losses.extend(losses)
    client.history.record(losses[-1])
    client.last_val_mse = losses[-1]
    return losses[-1]


def prune_and_recover(global_state: GlobalState, client: ClientState, schedule: PruneSchedule,
                      settings: TrainSettings) -> None:
    client.mask = magnitude_prune(client.model, client.mask, schedule.rate)
    apply_mask(client.model, client.mask, inplace=True)
    client.history.mark_pruned()
    client.prune_rounds.append(global_state.t)
    if schedule.lth_reset:
        reset_to_init(client.model, client.init, client.mask, client.opt, inplace=True)
    d = client.data
    rng = client_rng(global_state.seed, client.id, global_state.t, _RECOVER)
    losses = fit(client.model, client.opt, client.mask, d.x_train, d.y_train, d.x_val, d.y_val,
                 settings.recovery_epochs, settings.batch_size, rng, settings.patience)
    client.epoch_losses.extend(losses)
    client.last_val_mse = losses[-1]


def client_update(global_state: GlobalState, client: ClientState, schedule: PruneSchedule,
                  settings: TrainSettings | int, prune: bool | None = None) -> ClientState:
    """One client's round: masked download, local training, gated pruning and recovery.

    ``prune`` overrides the client's own gate (used for synchronized pruning).
    """
    if isinstance(settings, int):
        settings = TrainSettings(settings, settings)
    local_train(global_state, client, settings)
    if prune is None:
        prune = should_prune(schedule, client.history, global_state.t, global_state.T, client.sparsity)
    if prune:
        prune_and_recover(global_state, client, schedule, settings)
    return client


def _workers(n_clients: int) -> int:
    env = os.environ.get("FEDPRUNE_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else 1
    return max(1, min(cap, n_clients))


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _masked_model(params: np.ndarray, client: ClientState) -> DenseModel:
    m = DenseModel(client.model.arch, params.copy(), client.model.bn_state)
    return apply_mask(m, client.mask, inplace=True)


def run_round(global_state: GlobalState, clients: Sequence[ClientState], schedule: PruneSchedule,
              settings: TrainSettings | int, fedavg_weights: Sequence[float] | None = None,
              y_scale: float = 1.0) -> tuple[GlobalState, RoundMetrics]:
    """Broadcast, update every client, aggregate, account traffic and advance the round.

    Plain FedAvg is used when the schedule never prunes; otherwise sparse
    uploads are merged by :func:`aggregate_localized`. Reported RMSE is the
    local model's for pruning schedules and the new global model's for FedAvg,
    multiplied by ``y_scale``.
    """
    if isinstance(settings, int):
        settings = TrainSettings(settings, settings)
    g = global_state
    if g.t >= g.T:
        raise ConfigError(f"round {g.t} is past the last round {g.T}")
    workers = _workers(len(clients))
    ledger = g.ledger

    for c in clients:
        down = _masked_model(g.params, c)
        ledger.record(g.t, c.id, "down", comms.cost_of(down, c.mask, "idealized"), "idealized")
        ledger.record(g.t, c.id, "down", comms.cost_of(down, c.mask, "wire"), "wire")

    if schedule.synchronized and schedule.prunes:
        _map(lambda c: local_train(g, c, settings), list(clients), workers)
        ready = [should_prune(schedule, c.history, g.t, g.T, c.sparsity) for c in clients]
        go = sum(ready) * 2 >= len(clients)
        decisions = [go and hard_gates_open(schedule, g.t, g.T, c.sparsity) for c in clients]
        todo = [c for c, d in zip(clients, decisions) if d]
        _map(lambda c: prune_and_recover(g, c, schedule, settings), todo, workers)
    else:
        _map(lambda c: client_update(g, c, schedule, settings), list(clients), workers)

    up = up_w = 0
    for c in clients:
        if not check_closure(c.model, c.mask):
            raise AlignmentError(f"client {c.id} violates its mask")
        b = comms.cost_of(c.model, c.mask, "idealized")
        bw = comms.cost_of(c.model, c.mask, "wire")
        ledger.record(g.t, c.id, "up", b, "idealized")
        ledger.record(g.t, c.id, "up", bw, "wire")
        up, up_w = up + b, up_w + bw
        g.masks[c.id] = c.mask

    if schedule.prunes:
        g.params = aggregate_localized([(c.model.params, c.mask) for c in clients], g.params,
                                       clients[0].model.arch.prunable_index)
        rmse = [math.sqrt(c.last_val_mse) * y_scale for c in clients]
    else:
        g.params = aggregate_fedavg([c.model.params for c in clients], fedavg_weights)
        rmse = [math.sqrt(val_mse(_masked_model(g.params, c), c.data.x_val, c.data.y_val)) * y_scale
                for c in clients]

    down_i = ledger.per_round("idealized", "down").get(g.t, 0)
    down_w = ledger.per_round("wire", "down").get(g.t, 0)
    metrics = RoundMetrics(
        round=g.t,
        client_rmse=tuple(rmse),
        client_sparsity=tuple(c.sparsity for c in clients),
        up_bytes=up, down_bytes=down_i, up_bytes_wire=up_w, down_bytes_wire=down_w,
        pruned=tuple(c.id for c in clients if c.prune_rounds and c.prune_rounds[-1] == g.t),
    )
    g.t += 1
    return g, metrics


# -- experiments -----------------------------------------------------------

@dataclass
class ExperimentResult:
    method: str
    seed: int
    config: dict
    data_fingerprint: str
    y_scale: float
    rounds: list[RoundMetrics]
    client_names: list[str]
    dense_bytes: int
    ledger: CostLedger
    prune_rounds: list[list[int]]
    final_params_sha: list[str]
    clients: list[ClientState] = field(default_factory=list, repr=False)
    global_params: np.ndarray | None = field(default=None, repr=False)
    wall_clock_s: float = 0.0

    @property
    def final_client_rmse(self) -> list[float]:
        return list(self.rounds[-1].client_rmse)

    @property
    def final_client_sparsity(self) -> list[float]:
        return list(self.rounds[-1].client_sparsity)

    @property
    def mean_rmse(self) -> float:
        return self.rounds[-1].mean_rmse

    @property
    def model_bytes(self) -> float:
        """Average final client model size under the idealized cost model."""
        last = self.rounds[-1]
        n = len(last.client_rmse)
        if last.up_bytes:
            return last.up_bytes / n
        return float(self.dense_bytes)

    def to_dict(self) -> dict:
        """Everything except wall-clock time and in-memory models; deterministic per seed."""
        idl, wire = self.ledger.totals("idealized"), self.ledger.totals("wire")
        return {
            "method": self.method,
            "seed": self.seed,
            "data_fingerprint": self.data_fingerprint,
            "y_scale": self.y_scale,
            "client_names": self.client_names,
            "final_client_rmse": self.final_client_rmse,
            "final_client_sparsity": self.final_client_sparsity,
            "mean_rmse": self.mean_rmse,
            "mean_sparsity": self.rounds[-1].mean_sparsity,
            "dense_kb": comms.to_kb(self.dense_bytes),
            "model_kb": comms.to_kb(self.model_bytes),
            "ledger": {
                "idealized": {"upload_bytes": idl.upload, "download_bytes": idl.download,
                              "per_client_mb": comms.to_mb(idl.per_client)},
                "wire": {"upload_bytes": wire.upload, "download_bytes": wire.download,
                         "per_client_mb": comms.to_mb(wire.per_client)},
            },
            "prune_rounds": self.prune_rounds,
            "final_params_sha": self.final_params_sha,
            "rounds": [r.to_dict() for r in self.rounds],
            "config": self.config,
        }


def prepare_silos(config: ExperimentConfig) -> tuple[list[Silo], float, str]:
    """Build, normalise and (optionally) oversample the silos.

    Returns the silos, the target scale for reporting RMSE in original units
    and a fingerprint of the raw data.
    """
    if config.synthetic is not None:
        silos = gen_synthetic_silos(config.synthetic)
    else:
        silos = load_csv(config.csv_path, config.csv_schema).silos
    fp = fingerprint(silos)
    silos, stats = normalize(silos)
    if config.oversample:
        silos = oversample_equalize(silos, seed=0)
    return silos, stats.y_std, fp


def build_architecture(config: ExperimentConfig, n_features: int) -> Architecture:
    if config.synthetic is not None:
        groups = group_widths(config.synthetic.groups)
    else:
        groups = [{"name": "features", "width": n_features, "channels": 1, "temporal": False}]
    return default_architecture(groups, config.hidden, config.conv_channels, config.kernel, config.stride)


def _new_opt(config: ExperimentConfig, params: np.ndarray) -> OptState:
    lrs = config.lr_values
    return OptState.for_params(params, lr=lrs[0], lr_values=lrs, weight_decay=config.weight_decay,
                               decay_rounds=config.lr_decay_points)


def _make_client(i: int, silo: Silo, init_model: DenseModel, config: ExperimentConfig) -> ClientState:
    model = init_model.copy()
    return ClientState(i, silo, model, Mask.ones(model.arch), _new_opt(config, model.params),
                       InitSnapshot.capture(init_model))


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def run_experiment(config: ExperimentConfig, seed: int | None = None,
                   silos: Sequence[Silo] | None = None, y_scale: float | None = None,
                   data_fingerprint: str | None = None) -> ExperimentResult:
    """Run one method end to end for one seed.

    Pre-built ``silos`` (already normalised) may be passed to share data
    between runs.
    """
    start = time.perf_counter()
    seed = config.seeds[0] if seed is None else seed
    if silos is None:
        silos, y_scale, data_fingerprint = prepare_silos(config)
    y_scale = 1.0 if y_scale is None else y_scale
    silos = list(silos)
    arch = build_architecture(config, silos[0].n_features)
    init = kaiming_init(arch, seed)
    dense_bytes = comms.idealized_bytes(arch.n_prunable, arch.n_params - arch.n_prunable)
    settings = TrainSettings(config.n_epochs, config.n_recovery_epochs, config.batch_size, config.patience)
    clients = [_make_client(i, s, init, config) for i, s in enumerate(silos)]
    ledger = CostLedger()

    if config.federated:
        g = GlobalState(0, config.n_rounds, init.params.copy(), ledger=ledger, seed=seed)
        schedule = config.prune_schedule()
        weights = [c.data.n_train for c in clients] if config.sample_weighted else None
        rounds = []
        for _ in range(config.n_rounds):
            g, m = run_round(g, clients, schedule, settings, weights, y_scale)
            rounds.append(m)
            log.debug("round %d: mean rmse %.4f sparsity %.3f", m.round, m.mean_rmse, m.mean_sparsity)
        global_params = g.params
        if schedule.prunes:
            final = [_sha(c.model.params) for c in clients]
        else:
            final = [_sha(global_params)]
    elif config.method == "local_only":
        for c in clients:
            rng = client_rng(seed, c.id, 0)
            d = c.data
            fit(c.model, c.opt, c.mask, d.x_train, d.y_train, d.x_val, d.y_val, config.n_epochs,
                config.batch_size, rng, config.patience, decay_by_epoch=True)
        rmse = tuple(math.sqrt(val_mse(c.model, c.data.x_val, c.data.y_val)) * y_scale for c in clients)
        rounds = [RoundMetrics(0, rmse, tuple(0.0 for _ in clients))]
        global_params = None
        final = [_sha(c.model.params) for c in clients]
    else:  # centralized
        model = init.copy()
        opt = _new_opt(config, model.params)
        x_tr = np.concatenate([s.x_train for s in silos])
        y_tr = np.concatenate([s.y_train for s in silos])
        x_va = np.concatenate([s.x_val for s in silos])
        y_va = np.concatenate([s.y_val for s in silos])
        fit(model, opt, None, x_tr, y_tr, x_va, y_va, config.n_epochs, config.batch_size,
            client_rng(seed, len(silos), 0), config.patience, decay_by_epoch=True)
        rmse = tuple(math.sqrt(val_mse(model, s.x_val, s.y_val)) * y_scale for s in silos)
        rounds = [RoundMetrics(0, rmse, tuple(0.0 for _ in silos))]
        global_params = model.params
        final = [_sha(model.params)]
        for c in clients:
            c.model = model

    return ExperimentResult(
        method=config.method,
        seed=seed,
        config=config.to_dict(),
        data_fingerprint=data_fingerprint or "",
        y_scale=y_scale,
        rounds=rounds,
        client_names=[s.id for s in silos],
        dense_bytes=dense_bytes,
        ledger=ledger,
        prune_rounds=[list(c.prune_rounds) for c in clients],
        final_params_sha=final,
        clients=clients,
        global_params=global_params,
        wall_clock_s=time.perf_counter() - start,
    )


def forward_global(params: np.ndarray, client: ClientState, x: np.ndarray) -> np.ndarray:
    """Predictions of the given global parameters with a client's local batchnorm statistics."""
    return forward(DenseModel(client.model.arch, params.astype(client.model.params.dtype),
                              client.model.bn_state), x)
