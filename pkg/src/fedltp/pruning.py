"""Server-side pruning, client model assignment, and masked aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, PruningError, ShapeError
from .lth import PERCENTILE, WinningTicket, weight_based_mask
from .model import LayerSpec, MaskedModel, param_layout

log = logging.getLogger(__name__)


@dataclass
class ClientModelSpec:
    index: int  # 1-based; index 1 has the highest retention
    mask: np.ndarray

    @property
    def retention(self) -> float:
        return float(np.mean(self.mask))


@dataclass
class RetentionSchedule:
    p1: float
    p2: float
    gammas: List[float]
    per_client: List[float]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_client))


def retention_schedule(p1: float, p2: float, k: int) -> RetentionSchedule:
    """Nominal per-client retention ``(1 - p2)**i * (1 - p1)`` for ``i = 1..k``."""
    if not 0.0 <= p1 < 1.0 or not 0.0 <= p2 < 1.0:
        raise InvalidInputError("pruning degrees must lie in [0, 1)")
    if k < 1:
        raise InvalidInputError("need at least one client model")
    gammas = [(1.0 - p2) ** i for i in range(1, k + 1)]
    return RetentionSchedule(p1, p2, gammas, [g * (1.0 - p1) for g in gammas])


def fed_one_shot(ticket: WinningTicket, layers: Sequence[LayerSpec]) -> Tuple[MaskedModel, float]:
    """The selected ticket itself is the global model broadcast to everyone."""
    model = ticket.model(layers)
    return model, model.retention


def nested_masks(params: np.ndarray, base_mask: np.ndarray, layout, prune: float, k: int,
                 mode: str = PERCENTILE) -> List[np.ndarray]:
    """``k`` masks, each the previous one pruned again by ``prune`` (ranked by ``params``)."""
    masks = []
    current = np.asarray(base_mask, dtype=bool)
    for i in range(k):
        for offset, length in layout:
            alive = int(current[offset:offset + length].sum())
            if mode == PERCENTILE and alive > 0 and int(np.floor(prune * alive + 0.5)) >= alive:
                raise PruningError(
                    f"client model {i + 1}: layer at offset {offset} has {alive} weight(s) "
                    "left and cannot be pruned further"
                )
        current = weight_based_mask(params, layout, prune, mode, current=current)
        masks.append(current)
    return masks


def fed_iterative(ticket: WinningTicket, layers: Sequence[LayerSpec], k: int, p2: float,
                  mode: str = PERCENTILE):
    """Build ``k`` nested client models from the ticket.

    Returns ``(global_model, specs, schedule)``.  The global model shares the
    structure of spec 1, the least-pruned client model.
    """
    if k < 1:
        raise InvalidInputError("need at least one client model")
    if not 0.0 < p2 < 1.0:
        raise InvalidInputError("further pruning degree must lie in (0, 1)")
    masks = nested_masks(ticket.init_params, ticket.mask, param_layout(layers), p2, k, mode)
    specs = [ClientModelSpec(i + 1, m) for i, m in enumerate(masks)]
    global_model = MaskedModel(ticket.init_params * masks[0], masks[0], list(layers))
    schedule = retention_schedule(ticket.pruning_degree, p2, k)
    return global_model, specs, schedule


@dataclass
class AssignmentState:
    """Sticky client -> spec binding; a client's spec never changes once set."""

    bound: Dict[Hashable, int] = field(default_factory=dict)

    def copy(self) -> "AssignmentState":
        return AssignmentState(dict(self.bound))


def assign_models(selected: Sequence[Hashable], specs: Sequence[ClientModelSpec],
                  state: AssignmentState, rng: np.random.Generator):
    """Map each selected client to a spec index; returns ``(mapping, new_state)``.

    Returning clients keep their spec.  First-timers get a shuffle of the
    indices not already held by returning clients in this cohort; if that pool
    runs dry the remainder is drawn uniformly from all specs.
    """
    state = state.copy()
    indices = [s.index for s in specs]
    if len(indices) == 1:
        return {c: indices[0] for c in selected}, state

    mapping = {}
    fixed = []
    for c in selected:
        if c in state.bound:
            mapping[c] = state.bound[c]
            fixed.append(state.bound[c])
    if len(set(fixed)) < len(fixed):
        log.info("returning clients share a spec in this cohort: %s", sorted(fixed))

    newcomers = [c for c in selected if c not in state.bound]
    pool = [i for i in indices if i not in set(fixed)]
    pool = [pool[j] for j in rng.permutation(len(pool))]
    for c in newcomers:
        if pool:
            spec = pool.pop(0)
        else:
            spec = indices[int(rng.integers(len(indices)))]
            log.info("no distinct spec left for client %s; drew %d", c, spec)
        mapping[c] = spec
        state.bound[c] = spec
    return mapping, state


def aggregate(global_model: MaskedModel, deltas: Sequence[np.ndarray],
              masks: Sequence[np.ndarray]) -> MaskedModel:
    """Average client deltas per coordinate over the clients that hold it."""
    if len(deltas) != len(masks):
        raise ShapeError("one mask per delta is required")
    d = global_model.d
    total = np.zeros(d)
    counts = np.zeros(d)
    for delta, mask in zip(deltas, masks):
        delta = np.asarray(delta, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if delta.shape != (d,) or mask.shape != (d,):
            raise ShapeError(f"delta and mask must have length {d}")
        total += delta * mask
        counts += mask
    step = np.divide(total, counts, out=np.zeros(d), where=counts > 0)
    return global_model.with_params(global_model.params + step)
