"""Privacy accounting for DP local training plus Laplace-noised validation.

Training cost is the Renyi divergence of the subsampled Gaussian mechanism,
evaluated by Gauss-Legendre quadrature.  Validation cost converts each
``1/lambda_val``-DP Laplace release to RDP through zCDP.  The total is turned
into ``(epsilon, delta)`` and minimized over a grid of orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import InvalidInputError

DEFAULT_ORDERS: Tuple[float, ...] = (
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0,
    20.0, 24.0, 28.0, 32.0, 40.0, 48.0, 56.0, 64.0,
)

PER_STEP = "per-step"
PER_ROUND = "per-round"
VALIDATION_PAPER = "paper"
VALIDATION_ZCDP = "zcdp"

TAIL_SIGMAS = 20.0
GL_ORDER = 20
_NODES, _WEIGHTS = leggauss(GL_ORDER)


def _scaled_excess(z, alpha, sigma, q):
    """Return ``(log mu0(z), (1-q+q*r(z))**alpha - 1)`` pieces in log form.

    ``r = N(z;1,s^2)/N(z;0,s^2)``.  Gives ``log_mu0`` and ``ell`` where the
    integrand of ``A - 1`` is ``mu0 * expm1(ell)``.
    """
    log_mu0 = -0.5 * (z / sigma) ** 2 - math.log(sigma * math.sqrt(2.0 * math.pi))
    s = (2.0 * z - 1.0) / (2.0 * sigma * sigma)
    if q == 1.0:
        ell = alpha * s
    else:
        ell = alpha * np.logaddexp(math.log1p(-q), math.log(q) + s)
    return log_mu0, ell


def _log_moment(alpha: float, sigma: float, q: float, panels: int) -> float:
    """``log E_{z~mu0}[(1 - q + q r(z))**alpha]`` on ``panels`` GL panels."""
    lo = -TAIL_SIGMAS * sigma
    hi = max(1.0, alpha) + TAIL_SIGMAS * sigma
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    z = (mid[:, None] + half[:, None] * _NODES).ravel()
    w = (half[:, None] * _WEIGHTS).ravel()

    log_mu0, ell = _scaled_excess(z, alpha, sigma, q)
    # Scale by the largest term so nothing overflows at large alpha.
    m = float(np.max(log_mu0 + np.maximum(ell, 0.0)))
    big = ell > 1.0
    terms = np.empty_like(z)
    terms[big] = np.exp(log_mu0[big] + ell[big] - m) - np.exp(log_mu0[big] - m)
    terms[~big] = np.exp(log_mu0[~big] - m) * np.expm1(ell[~big])
    total = float(np.dot(w, terms))
    if total <= 0.0:
        return 0.0
    # log A = log(1 + e^m * total)
    return float(np.logaddexp(0.0, m + math.log(total)))


@lru_cache(maxsize=4096)
def subsampled_gaussian_rdp(alpha: float, sigma: float, q: float, rtol: float = 1e-12) -> float:
    """Per-composition RDP at order ``alpha`` of the sampled Gaussian mechanism.

    Returns ``math.inf`` when ``sigma == 0`` and data is touched.
    """
    if not alpha > 1.0:
        raise InvalidInputError(f"RDP order must exceed 1, got {alpha}")
    if not 0.0 <= q <= 1.0:
        raise InvalidInputError(f"sample rate must lie in [0, 1], got {q}")
    if sigma < 0:
        raise InvalidInputError("noise multiplier must be non-negative")
    if q == 0.0:
        return 0.0
    if sigma == 0.0 or math.isinf(alpha):
        return math.inf
    if math.isinf(sigma):
        return 0.0

    width = max(1.0, alpha) + 2.0 * TAIL_SIGMAS * sigma
    panels = max(8, int(math.ceil(width / (0.25 * sigma))))
    prev = _log_moment(alpha, sigma, q, panels)
    for _ in range(6):
        panels *= 2
        cur = _log_moment(alpha, sigma, q, panels)
        if abs(cur - prev) <= rtol * abs(cur):
            break
        prev = cur
    return max(cur, 0.0) / (alpha - 1.0)


def laplace_validation_rho(alpha: float, lambda_val: float, releases: int,
                           mode: str = VALIDATION_PAPER) -> float:
    """RDP of ``releases`` Laplace validations, each ``1/lambda_val``-DP.

    ``paper`` uses ``alpha * (alpha - 1) / (2 lambda^2)`` per release; ``zcdp``
    uses the tighter ``alpha / (2 lambda^2)``.
    """
    if not alpha > 1.0:
        raise InvalidInputError(f"RDP order must exceed 1, got {alpha}")
    if not lambda_val > 0:
        raise InvalidInputError("lambda_val must be positive")
    if releases < 0:
        raise InvalidInputError("release count must be non-negative")
    if math.isinf(lambda_val) or releases == 0:
        return 0.0
    if mode == VALIDATION_PAPER:
        per = alpha * (alpha - 1.0) / (2.0 * lambda_val ** 2)
    elif mode == VALIDATION_ZCDP:
        per = alpha / (2.0 * lambda_val ** 2)
    else:
        raise InvalidInputError(f"unknown validation accounting mode {mode!r}")
    return releases * per


def rdp_to_dp(rho: float, alpha: float, delta: float) -> float:
    if not alpha > 1.0:
        raise InvalidInputError(f"RDP order must exceed 1, got {alpha}")
    if not 0.0 < delta < 1.0:
        raise InvalidInputError(f"delta must lie in (0, 1), got {delta}")
    return (rho + (math.log(1.0 / delta) - math.log(alpha)) / (alpha - 1.0)
            + math.log1p(-1.0 / alpha))


@dataclass(frozen=True)
class PrivacyLedger:
    """Counters of released mechanisms plus their parameters.

    ``rounds_completed`` rounds each run ``tau`` noisy steps and one
    validation release.  Training steps compose per step, or once per round
    in ``per-round`` mode.
    """

    tau: int
    q: float
    sigma: float
    lambda_val: float
    delta: float
    rounds_completed: int = 0
    composition_mode: str = PER_STEP
    validation_mode: str = VALIDATION_PAPER

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise InvalidInputError(f"sample rate must lie in (0, 1], got {self.q}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError(f"delta must lie in (0, 1), got {self.delta}")
        if self.tau < 0 or self.rounds_completed < 0:
            raise InvalidInputError("counters must be non-negative")
        if self.composition_mode not in (PER_STEP, PER_ROUND):
            raise InvalidInputError(f"unknown composition mode {self.composition_mode!r}")

    @property
    def steps(self) -> int:
        return self.rounds_completed * self.tau

    @property
    def releases(self) -> int:
        return self.rounds_completed

    @property
    def compositions(self) -> int:
        return self.steps if self.composition_mode == PER_STEP else self.rounds_completed

    def advance(self, rounds: int = 1) -> "PrivacyLedger":
        return replace(self, rounds_completed=self.rounds_completed + rounds)


def rdp_curve(ledger: PrivacyLedger, orders: Sequence[float] = DEFAULT_ORDERS) -> List[Tuple[float, float]]:
    """``(alpha, epsilon(alpha))`` for every order in the grid."""
    out = []
    for alpha in orders:
        train = subsampled_gaussian_rdp(float(alpha), float(ledger.sigma), float(ledger.q))
        rho = ledger.compositions * train if ledger.compositions else 0.0
        rho += laplace_validation_rho(alpha, ledger.lambda_val, ledger.releases,
                                      ledger.validation_mode)
        out.append((float(alpha), rdp_to_dp(rho, alpha, ledger.delta)))
    return out


def accumulate(ledger: PrivacyLedger, orders: Sequence[float] = DEFAULT_ORDERS) -> Tuple[float, Optional[float]]:
    """Best ``(epsilon, alpha)`` over the grid; ``(0.0, None)`` before any release."""
    if len(orders) == 0:
        raise InvalidInputError("the order grid is empty")
    if ledger.rounds_completed == 0:
        return 0.0, None
    curve = rdp_curve(ledger, orders)
    alpha, eps = min(curve, key=lambda item: item[1])
    return eps, alpha


def epsilon_after_round(ledger: PrivacyLedger, t: int, orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Epsilon once round ``t`` (0-based) has finished, i.e. after ``t + 1`` rounds."""
    return accumulate(replace(ledger, rounds_completed=t + 1), orders)[0]


def budget_check(ledger: PrivacyLedger, epsilon_budget: float,
                 orders: Sequence[float] = DEFAULT_ORDERS) -> str:
    """``"continue"`` if one more round keeps epsilon within budget, else ``"stop"``."""
    if not epsilon_budget > 0:
        raise InvalidInputError("the privacy budget must be positive")
    if math.isinf(epsilon_budget):
        return "continue"
    eps, _ = accumulate(ledger.advance(1), orders)
    return "stop" if eps > epsilon_budget else "continue"
