"""Federated training loop: pruned global model, DP local training,
Laplace-noised validation, privacy ledger, and final-model selection.

All randomness comes from :func:`fedltp.rng.stream`, keyed by purpose,
client id and round, so a run is a pure function of its config.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import accountant as acct
from .config import ExperimentConfig
from .data import (
    ClientShards,
    Dataset,
    carve_public,
    dirichlet_partition,
    load_idx_pair,
    load_or_synthesize,
    split_train_val_test,
)
from .errors import InvalidInputError
from .lth import generate_winning_tickets, load_tickets, select_ticket_softmax
from .mechanisms import add_gaussian_noise, perturb_score
from .metrics import BITS_PER_PARAM, MetricsRow, write_json, write_metrics
from .model import (
    MaskedModel,
    clip_gradient,
    evaluate,
    loss_and_grad,
    mlp_layers,
    param_layout,
    sgd_momentum_step,
)
from .pruning import (
    AssignmentState,
    ClientModelSpec,
    aggregate,
    assign_models,
    fed_iterative,
    fed_one_shot,
    nested_masks,
)
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class ClientState:
    cid: int
    shards: ClientShards
    spec_index: Optional[int] = None


@dataclass
class Snapshot:
    """Global model at the end of a round: on-support values plus the mask."""

    round: int
    mask: np.ndarray
    values: Optional[np.ndarray] = None
    path: Optional[str] = None

    @classmethod
    def take(cls, t: int, model: MaskedModel, spill_dir: str = "") -> "Snapshot":
        values = model.params[model.mask].copy()
        if spill_dir:
            path = Path(spill_dir) / f"round_{t:05d}.npy"
            np.save(path, values)
            return cls(t, model.mask, None, str(path))
        return cls(t, model.mask, values)

    def restore(self, layers) -> MaskedModel:
        values = self.values if self.values is not None else np.load(self.path)
        params = np.zeros(self.mask.size)
        params[self.mask] = values
        return MaskedModel(params, self.mask, list(layers))


@dataclass
class RoundRecord:
    round: int
    snapshot: Snapshot
    noisy_val_score: float
    noisy_scores: List[float]
    test_accuracy: float
    epsilon: float
    best_alpha: Optional[float]
    comm_bits_cumulative: float
    retention_p: float
    selected: List[int]
    assignment: Dict[int, int]
    lr: float
    true_scores: Optional[List[int]] = None


@dataclass
class FLState:
    config: ExperimentConfig
    layers: list
    public: Dataset
    private: Dataset
    clients: List[ClientState]
    global_model: MaskedModel
    specs: List[ClientModelSpec]
    assignment: AssignmentState
    ledger: acct.PrivacyLedger
    ticket_mask: Optional[np.ndarray] = None
    ticket_index: Optional[int] = None
    ticket_scores: List[int] = field(default_factory=list)
    nominal_p: float = 1.0
    records: List[RoundRecord] = field(default_factory=list)
    next_round: int = 0
    comm_bits: float = 0.0
    init_snapshot: Optional[Snapshot] = None

    @property
    def d(self) -> int:
        return self.global_model.d

    @property
    def retention(self) -> float:
        """Measured average retention across client models."""
        return float(np.mean([s.retention for s in self.specs]))


# -- setup ------------------------------------------------------------------

def build_datasets(config: ExperimentConfig):
    """Return ``(public, private)`` pools."""
    full = load_or_synthesize(config.dataset, images=config.images, labels=config.labels,
                              classes=config.blob_classes, dim=config.blob_dim,
                              separation=config.blob_separation, size=config.blob_size,
                              seed=config.seed)
    if config.public == "carve":
        return carve_public(full, config.public_fraction, stream(config.seed, "carve"))
    public = load_idx_pair(config.public_images, config.public_labels)
    if public.dim != full.dim:
        raise InvalidInputError(
            f"public data has {public.dim} features, private data has {full.dim}")
    return public, full


def build_clients(config: ExperimentConfig, private: Dataset) -> List[ClientState]:
    parts = dirichlet_partition(private.labels, config.clients, config.alpha_dir,
                                stream(config.seed, "partition"))
    fractions = (config.train_fraction, config.val_fraction, config.test_fraction)
    clients = []
    for cid, idx in enumerate(parts):
        tr, va, te = split_train_val_test(idx, private.labels, fractions,
                                          stream(config.seed, "split", cid))
        if tr.size == 0:
            # tiny shards: keep at least one training example
            tr, va, te = idx[:1], va[~np.isin(va, idx[:1])], te[~np.isin(te, idx[:1])]
        clients.append(ClientState(cid, ClientShards(tr, va, te)))
    return clients


def initialize(config: ExperimentConfig) -> FLState:
    config.validate()
    public, private = build_datasets(config)
    layers = mlp_layers([private.dim, *config.hidden, private.class_count])
    clients = build_clients(config, private)

    ticket_mask = None
    ticket_index = None
    scores: List[int] = []
    if config.scheme == "dp-fed-baseline":
        global_model = MaskedModel.create(layers, stream(config.seed, "baseline-init"))
        specs = [ClientModelSpec(1, global_model.mask)]
        nominal_p = 1.0
    else:
        if config.tickets_file and Path(config.tickets_file).is_file():
            tickets, cached_layers = load_tickets(config.tickets_file)
            if cached_layers != layers:
                raise InvalidInputError("cached tickets were built for a different network")
        else:
            tickets = generate_winning_tickets(
                public.features, public.labels, layers, config.tickets,
                config.lth_iterations, config.prune_degree, config.seed,
                lr=config.lth_lr, batch_size=config.lth_batch_size, mode=config.prune_mode)
        scores = [t.score for t in tickets]
        ticket_index = select_ticket_softmax(tickets, stream(config.seed, "select"),
                                             config.softmax_temperature)
        ticket = tickets[ticket_index]
        ticket_mask = ticket.mask
        if config.scheme == "fed-one-shot":
            global_model, nominal_p = fed_one_shot(ticket, layers)
            nominal_p = 1.0 - ticket.pruning_degree
            specs = [ClientModelSpec(1, global_model.mask)]
        else:
            global_model, specs, schedule = fed_iterative(
                ticket, layers, config.sampled_clients, config.further_prune, config.prune_mode)
            nominal_p = schedule.average

    q_tilde = max(min(1.0, config.batch_size / c.shards.train.size) for c in clients)
    ledger = acct.PrivacyLedger(
        tau=config.local_steps, q=q_tilde, sigma=config.sigma,
        lambda_val=config.lambda_val, delta=config.delta,
        composition_mode=config.composition_mode,
        validation_mode=config.validation_accounting)
    state = FLState(config, layers, public, private, clients, global_model, specs,
                    AssignmentState(), ledger, ticket_mask, ticket_index, scores, nominal_p)
    state.init_snapshot = Snapshot.take(-1, global_model)
    return state


# -- one client -------------------------------------------------------------

def client_update(model: MaskedModel, features: np.ndarray, labels: np.ndarray,
                  config: ExperimentConfig, lr: float, rng: np.random.Generator) -> np.ndarray:
    """Run ``local_steps`` clipped, noised momentum-SGD steps; return the delta."""
    n = len(labels)
    if n == 0:
        raise InvalidInputError("client has no training data")
    batch = config.batch_size
    if batch > n:
        log.debug("batch size %d clamped to shard size %d", batch, n)
        batch = n
    start = model
    buffer = np.zeros(model.d)
    order = rng.permutation(n)
    pos = 0
    for _ in range(config.local_steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        _, grad = loss_and_grad(model, features[idx], labels[idx])
        noisy = add_gaussian_noise(clip_gradient(grad, config.clip), config.sigma,
                                   config.clip, rng, model.mask)
        model, buffer = sgd_momentum_step(model, noisy, lr, config.momentum, buffer)
    return model.params - start.params


# -- validation -------------------------------------------------------------

def validate_global(model: MaskedModel, clients: List[ClientState], data: Dataset,
                    lambda_val: float, seed: int, t: int):
    """Every client scores the model on its validation shard and adds Laplace noise.

    Returns ``(S, noisy_scores, true_scores)``.
    """
    noisy, true = [], []
    for c in clients:
        val = c.shards.val
        score = evaluate(model, data.features[val], data.labels[val])
        true.append(score)
        noisy.append(perturb_score(score, lambda_val, stream(seed, "laplace", c.cid, t)))
    return float(sum(noisy)), noisy, true


def global_test_accuracy(model: MaskedModel, clients: List[ClientState], data: Dataset) -> float:
    idx = np.concatenate([c.shards.test for c in clients])
    if idx.size == 0:
        return math.nan
    return evaluate(model, data.features[idx], data.labels[idx]) / idx.size


# -- rounds -----------------------------------------------------------------

def _recompute_specs(state: FLState) -> None:
    cfg = state.config
    masks = nested_masks(state.global_model.params, state.ticket_mask, param_layout(state.layers),
                         cfg.further_prune, len(state.specs), cfg.prune_mode)
    state.specs = [ClientModelSpec(i + 1, m) for i, m in enumerate(masks)]
    state.global_model = state.global_model.with_mask(masks[0])


def run_round(state: FLState) -> FLState:
    cfg = state.config
    t = state.next_round
    if cfg.recompute_masks and cfg.scheme == "fed-iterative" and t > 0:
        _recompute_specs(state)

    lr = cfg.lr * cfg.lr_decay ** t
    k = cfg.sampled_clients
    selected = sorted(int(c) for c in stream(cfg.seed, "sample", t).choice(cfg.clients, k, replace=False))
    mapping, state.assignment = assign_models(selected, state.specs, state.assignment,
                                              stream(cfg.seed, "assign", t))
    specs = {s.index: s for s in state.specs}
    global_mask = state.global_model.mask
    down_bits = BITS_PER_PARAM * float(global_mask.sum())

    deltas, masks = [], []
    round_bits = 0.0
    for cid in selected:
        client = state.clients[cid]
        client.spec_index = mapping[cid]
        mask = specs[mapping[cid]].mask
        received = state.global_model.with_mask(mask)
        tr = client.shards.train
        delta = client_update(received, state.private.features[tr], state.private.labels[tr],
                              cfg, lr, stream(cfg.seed, "client", cid, t))
        deltas.append(delta)
        masks.append(mask)
        round_bits += BITS_PER_PARAM * float(mask.sum())
        if cfg.comm_direction_factor == 2:
            round_bits += down_bits

    state.global_model = aggregate(state.global_model, deltas, masks)
    s_total, noisy, true = validate_global(state.global_model, state.clients, state.private,
                                           cfg.lambda_val, cfg.seed, t)
    state.ledger = state.ledger.advance(1)
    eps, alpha = acct.accumulate(state.ledger)
    state.comm_bits += round_bits

    record = RoundRecord(
        round=t,
        snapshot=Snapshot.take(t, state.global_model, cfg.snapshot_dir),
        noisy_val_score=s_total,
        noisy_scores=noisy,
        test_accuracy=global_test_accuracy(state.global_model, state.clients, state.private),
        epsilon=eps,
        best_alpha=alpha,
        comm_bits_cumulative=state.comm_bits,
        retention_p=state.retention,
        selected=selected,
        assignment=dict(mapping),
        lr=lr,
        true_scores=true if cfg.debug_scores else None,
    )
    state.records.append(record)
    state.next_round = t + 1
    return state


def select_final_model(records: List[RoundRecord]) -> Snapshot:
    """Snapshot with the highest noisy validation total; earliest round wins ties."""
    if not records:
        raise InvalidInputError("no rounds to select from")
    best = records[0]
    for rec in records[1:]:
        if rec.noisy_val_score > best.noisy_val_score:
            best = rec
    return best.snapshot


# -- whole run --------------------------------------------------------------

@dataclass
class ExperimentResult:
    final_model: MaskedModel
    final_round: Optional[int]
    final_test_accuracy: float
    last_test_accuracy: float
    stop_reason: str
    state: FLState
    summary: dict
    metrics_path: Optional[Path] = None
    summary_path: Optional[Path] = None


def metrics_rows(state: FLState) -> List[MetricsRow]:
    cfg = state.config
    return [
        MetricsRow(r.round, float(r.test_accuracy), float(r.noisy_val_score), float(r.epsilon),
                   float(r.comm_bits_cumulative), float(r.retention_p), cfg.scheme, cfg.seed)
        for r in state.records
    ]


def build_summary(state: FLState, stop_reason: str, final_round, final_acc) -> dict:
    cfg = state.config
    init_acc = global_test_accuracy(state.init_snapshot.restore(state.layers), state.clients, state.private)
    return {
        "config": cfg.to_dict(),
        "d": state.d,
        "bits_per_param": BITS_PER_PARAM,
        "q_tilde": state.ledger.q,
        "composition_mode": state.ledger.composition_mode,
        "validation_accounting": state.ledger.validation_mode,
        "initialization": {
            "round": -1,
            "test_accuracy": init_acc,
            "global_retention": float(state.init_snapshot.mask.mean()),
            "nominal_p": state.nominal_p,
            "spec_retention": [s.retention for s in state.specs],
            "ticket_scores": state.ticket_scores,
            "ticket_index": state.ticket_index,
            "public_size": len(state.public),
            "private_size": len(state.private),
            "public_source": cfg.public,
        },
        "rounds_run": len(state.records),
        "stop_reason": stop_reason,
        "final_round": final_round,
        "final_test_accuracy": final_acc,
        "epsilon_trajectory": [[r.round, r.epsilon, r.best_alpha] for r in state.records],
        "comm_bits_total": state.comm_bits,
        "comm_mb_total": state.comm_bits / 8e6,
    }


def run_experiment(config: ExperimentConfig, out_dir=None, fmt: str = "csv") -> ExperimentResult:
    """Initialize, train until the round limit or the privacy budget, pick the final model."""
    state = initialize(config)
    stop_reason = "rounds"
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / f"metrics.{fmt}"
    try:
        while state.next_round < config.rounds:
            if acct.budget_check(state.ledger, config.epsilon_budget) == "stop":
                stop_reason = "budget"
                break
            run_round(state)
    except BaseException:
        if metrics_path is not None:
            write_metrics(metrics_rows(state), metrics_path, fmt)
        raise

    if state.records:
        snap = select_final_model(state.records)
        final_round = snap.round
        final_model = snap.restore(state.layers)
        last_acc = state.records[-1].test_accuracy
    else:
        final_round = None
        final_model = state.init_snapshot.restore(state.layers)
        last_acc = global_test_accuracy(final_model, state.clients, state.private)
    final_acc = global_test_accuracy(final_model, state.clients, state.private)
    summary = build_summary(state, stop_reason, final_round, final_acc)

    result = ExperimentResult(final_model, final_round, final_acc, last_acc, stop_reason,
                              state, summary, metrics_path)
    if out_dir is not None:
        write_metrics(metrics_rows(state), metrics_path, fmt)
        result.summary_path = write_json(summary, out_dir / "summary.json")
    return result
