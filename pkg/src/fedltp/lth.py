"""Winning-ticket generation on public data: train, prune, reset, select."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .errors import DataFormatError, InvalidInputError
from .model import (
    LayerSpec,
    MaskedModel,
    check_layers,
    evaluate,
    loss_and_grad,
    param_layout,
    sgd_momentum_step,
)

log = logging.getLogger(__name__)

THRESHOLD = "threshold"
PERCENTILE = "percentile"

TICKET_FORMAT = "fedltp-tickets"
TICKET_VERSION = 1


def weight_based_mask(params: np.ndarray, layout: Sequence[Tuple[int, int]], prune: float,
                      mode: str = PERCENTILE, current: Optional[np.ndarray] = None) -> np.ndarray:
    """Magnitude pruning applied independently inside every layer.

    ``threshold`` keeps ``|w| > prune * max|w|``; ``percentile`` drops the
    ``round(prune * n)`` smallest of the ``n`` weights still alive in the layer.
    When ``current`` is given only its support is considered, so the result is
    always a subset of it.  The largest surviving weight of a layer is never
    pruned.
    """
    if not 0.0 <= prune < 1.0:
        raise InvalidInputError(f"pruning degree must lie in [0, 1), got {prune}")
    if mode not in (THRESHOLD, PERCENTILE):
        raise InvalidInputError(f"unknown pruning mode {mode!r}")
    params = np.asarray(params, dtype=np.float64)
    if current is None:
        current = np.ones(params.size, dtype=bool)
    mask = np.asarray(current, dtype=bool).copy()

    for offset, length in layout:
        alive = np.flatnonzero(mask[offset:offset + length]) + offset
        if alive.size == 0 or prune == 0.0:
            continue
        mags = np.abs(params[alive])
        keep_top = alive[np.argmax(mags)]
        if mode == THRESHOLD:
            drop = alive[mags <= prune * mags.max()]
        else:
            n_drop = min(int(np.floor(prune * alive.size + 0.5)), alive.size - 1)
            order = np.argsort(mags, kind="stable")
            drop = alive[order[:n_drop]]
        mask[drop] = False
        mask[keep_top] = True
    return mask


@dataclass
class WinningTicket:
    init_params: np.ndarray
    mask: np.ndarray
    score: int
    pruning_degree: float

    @property
    def retention(self) -> float:
        return float(np.mean(self.mask))

    def model(self, layers: Sequence[LayerSpec]) -> MaskedModel:
        return MaskedModel(self.init_params * self.mask, self.mask, list(layers))


def train_plain_sgd(model: MaskedModel, features, labels, iterations: int, lr: float,
                    batch_size: int, rng: np.random.Generator) -> MaskedModel:
    n = len(labels)
    batch_size = min(batch_size, n)
    zero = np.zeros(model.d)
    order = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        _, grad = loss_and_grad(model, features[idx], labels[idx])
        model, _ = sgd_momentum_step(model, grad, lr, 0.0, zero)
    return model


def generate_winning_tickets(features, labels, layers: Sequence[LayerSpec], count: int,
                             iterations: int, prune: float, seed: int, lr: float = 1.2e-3,
                             batch_size: int = 64, mode: str = PERCENTILE) -> List[WinningTicket]:
    """Train/prune/reset ``count`` independent tickets on the public shard.

    Ticket ``j`` draws from its own stream ``(seed, "ticket", j)``.  The score
    is the correct-count of the trained weights restricted to the new mask.
    """
    if count < 1:
        raise InvalidInputError("need at least one ticket")
    if iterations < 0:
        raise InvalidInputError("iterations must be non-negative")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidInputError("public shard is empty")
    check_layers(layers)
    layout = param_layout(layers)
    tickets = []
    for j in range(count):
        gen = rngmod.stream(seed, "ticket", j)
        init = MaskedModel.create(layers, gen)
        trained = train_plain_sgd(init, features, labels, iterations, lr, batch_size, gen)
        mask = weight_based_mask(trained.params, layout, prune, mode)
        score = evaluate(trained.with_mask(mask), features, labels)
        tickets.append(WinningTicket(init.params * mask, mask, score, prune))
    return tickets


def ticket_probabilities(scores: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def select_ticket_softmax(tickets: Sequence[WinningTicket], rng: np.random.Generator,
                          temperature: float = 1.0) -> int:
    """Sample a ticket index with probability proportional to ``exp(score / T)``."""
    if len(tickets) == 0:
        raise InvalidInputError("cannot select from an empty ticket list")
    p = ticket_probabilities([t.score for t in tickets], temperature)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(tickets) - 1)


# -- serialization ----------------------------------------------------------

def save_tickets(path, tickets: Sequence[WinningTicket], layers: Sequence[LayerSpec]) -> None:
    doc = {
        "format": TICKET_FORMAT,
        "version": TICKET_VERSION,
        "layers": [[l.kind, l.in_dim, l.out_dim] for l in layers],
        "tickets": [
            {
                "d": int(t.mask.size),
                "mask": np.packbits(t.mask.astype(np.uint8)).tobytes().hex(),
                "init_params": [float(v) for v in t.init_params],
                "score": int(t.score),
                "pruning_degree": float(t.pruning_degree),
            }
            for t in tickets
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_tickets(path):
    """Return ``(tickets, layers)`` from a file written by :func:`save_tickets`."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"not a ticket file: {exc.msg}", offset=exc.pos, path=path) from exc
    if doc.get("format") != TICKET_FORMAT:
        raise DataFormatError("not a ticket file", path=path)
    if doc.get("version") != TICKET_VERSION:
        raise DataFormatError(f"unsupported ticket file version {doc.get('version')}", path=path)
    layers = [LayerSpec(k, int(a), int(b)) for k, a, b in doc["layers"]]
    tickets = []
    for entry in doc["tickets"]:
        d = entry["d"]
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(entry["mask"]), dtype=np.uint8))[:d]
        params = np.asarray(entry["init_params"], dtype=np.float64)
        if params.size != d:
            raise DataFormatError("parameter count does not match mask length", path=path)
        tickets.append(WinningTicket(params, bits.astype(bool), int(entry["score"]),
                                     float(entry["pruning_degree"])))
    return tickets, layers
