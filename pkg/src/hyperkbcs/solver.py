"""Split Bregman solver for l1-fidelity Kronecker blind compressed sensing.

The model is ``X = D1 @ Z @ D2`` with ``D1`` a spatial dictionary acting on
vectorized bands and ``D2`` a spectral dictionary whose rows are spectral
atoms. The solver minimizes

    ||Y - D1 Z D2||_1 + lambda1 ||Z||_1 + lambda2 ||D1||_F^2 + lambda3 ||D2||_F^2

by splitting ``P ~ Y - D1 Z D2``, ``Q ~ Z``, ``R ~ D1`` and ``S ~ D2`` and
alternating over the seven resulting sub-problems. Three modes share the
loop:

``kbcs``
    learn both dictionaries.
``bcs``
    spatial dictionary only; ``D2`` is pinned to the identity and
    ``lambda3`` is ignored.
``kcs``
    both dictionaries frozen (fixed transforms by default), only the sparse
    coefficients are estimated.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from hyperkbcs import dictionaries
from hyperkbcs.linops import (
    LsqConfig,
    NonFiniteError,
    ridge_shrink,
    soft_threshold,
    solve_D1,
    solve_D2,
    solve_Z,
)

logger = logging.getLogger(__name__)

MODES = ("kbcs", "bcs", "kcs")
BREGMAN_RULES = ("printed", "additive")
STOP_RULES = ("absolute", "relative")


@dataclass(frozen=True)
class KbcsParams:
    lambda1: float = 1e-1
    lambda2: float = 1e-1
    lambda3: float = 1e4
    mu: float = 10.0
    mu1: float = 10.0
    mu2: float = 1e3
    mu3: float = 1e3
    tol: float = 1e-4
    max_iter: int = 200
    mode: str = "kbcs"
    seed: int = 0
    lsq: LsqConfig = field(default_factory=LsqConfig)
    # "printed": B <- (proxy residual) - B; "additive": B <- B - (proxy residual)
    bregman: str = "printed"
    # "absolute": |dJ| < tol; "relative": |dJ| < tol * max(1, |J|)
    stop_rule: str = "absolute"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.bregman not in BREGMAN_RULES:
            raise ValueError(f"unknown Bregman rule {self.bregman!r}; expected one of {BREGMAN_RULES}")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"unknown stop rule {self.stop_rule!r}; expected one of {STOP_RULES}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("mu", "mu1", "mu2", "mu3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be nonnegative, got {self.max_iter}")

    @property
    def learns_spatial(self) -> bool:
        return self.mode in ("kbcs", "bcs")

    @property
    def learns_spectral(self) -> bool:
        return self.mode == "kbcs"

    @property
    def effective_lambda3(self) -> float:
        return 0.0 if self.mode == "bcs" else self.lambda3

    def settled(self, prev: float, cur: float) -> bool:
        scale = 1.0 if self.stop_rule == "absolute" else max(1.0, abs(prev))
        return abs(cur - prev) < self.tol * scale

    def replace(self, **changes) -> "KbcsParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SolverState:
    Z: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    B3: np.ndarray
    B4: np.ndarray
    objective_history: tuple = ()

    def estimate(self) -> np.ndarray:
        return self.D1 @ self.Z @ self.D2

    def replace(self, **changes) -> "SolverState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DenoiseResult:
    X_hat: np.ndarray
    state: SolverState
    iterations: int
    converged: bool
    objective_history: tuple

    @property
    def clamped(self) -> np.ndarray:
        """Estimate clipped to the valid intensity range, for metrics and output files."""
        return np.clip(self.X_hat, 0.0, 1.0)

    @property
    def final_objective(self) -> float:
        return self.objective_history[-1]


def objective(Y, Z, D1, D2, params: KbcsParams) -> float:
    """The unsplit cost: entrywise l1 misfit plus the three regularizers."""
    X = D1 @ Z @ D2
    if X.shape != Y.shape:
        raise ValueError(f"model output shape {X.shape} does not match data shape {Y.shape}")
    return float(
        np.abs(Y - X).sum()
        + params.lambda1 * np.abs(Z).sum()
        + params.lambda2 * np.sum(D1 * D1)
        + params.effective_lambda3 * np.sum(D2 * D2)
    )


def split_objective(state: SolverState, Y, params: KbcsParams) -> float:
    """The relaxed cost with proxies and Bregman offsets, minimized blockwise by ``iterate``."""
    s = state
    X = s.estimate()
    total = (
        np.abs(s.P).sum()
        + params.lambda1 * np.abs(s.Q).sum()
        + params.mu * np.sum((s.P - (Y - X) - s.B1) ** 2)
        + params.mu1 * np.sum((s.Q - s.Z - s.B2) ** 2)
    )
    if params.learns_spatial:
        total += params.lambda2 * np.sum(s.R**2) + params.mu2 * np.sum((s.R - s.D1 - s.B3) ** 2)
    if params.learns_spectral:
        total += params.lambda3 * np.sum(s.S**2) + params.mu3 * np.sum((s.S - s.D2 - s.B4) ** 2)
    return float(total)


def _seeds(seed: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(3)
    return [int(c.generate_state(1)[0]) for c in children]


def initial_dictionaries(n_pixels, n_bands, k1, k2, params, image_shape=None):
    """Starting ``(D1, D2)`` for a mode.

    Learned modes start from unit-norm Gaussian atoms; fixed factors are the
    identity (``bcs`` spectral side) or orthonormal Haar/DCT transforms
    (``kcs``), which need ``k1 == n_pixels`` and ``k2 == n_bands``.
    """
    s1, s2, _ = _seeds(params.seed)
    if params.mode == "kcs":
        if k1 != n_pixels or k2 != n_bands:
            raise ValueError(
                f"kcs with fixed transforms needs k1 == n_pixels ({n_pixels}) and "
                f"k2 == n_bands ({n_bands}); got k1={k1}, k2={k2}"
            )
        if image_shape is None:
            side = int(round(np.sqrt(n_pixels)))
            if side * side != n_pixels:
                raise ValueError("image_shape is required for non-square bands in kcs mode")
            image_shape = (side, side)
        return dictionaries.spatial_transform(*image_shape), dictionaries.spectral_transform(n_bands)

    D1 = dictionaries.build(dictionaries.DictionarySpec("random_gaussian", n_pixels, k1, s1))
    if params.mode == "bcs":
        if k2 != n_bands:
            raise ValueError(f"bcs mode pins D2 to the identity, so k2 must equal n_bands ({n_bands})")
        D2 = dictionaries.build(dictionaries.DictionarySpec("identity", n_bands, n_bands))
    else:
        D2 = dictionaries.build(dictionaries.DictionarySpec("random_gaussian", n_bands, k2, s2)).T
    return D1, D2


def init_state(Y, k1, k2, params: KbcsParams, D1=None, D2=None, image_shape=None) -> SolverState:
    """Zero coefficients, consistent proxies and uniform(0, 1) Bregman variables.

    ``D1``/``D2`` override the mode's default starting dictionaries (in
    ``kcs`` mode they are then the frozen dictionaries).
    """
    Y = np.asarray(Y, dtype=np.float64)
    n, b = Y.shape
    if D1 is None or D2 is None:
        d1, d2 = initial_dictionaries(n, b, k1, k2, params, image_shape)
        D1 = d1 if D1 is None else D1
        D2 = d2 if D2 is None else D2
    D1 = np.array(D1, dtype=np.float64)
    D2 = np.array(D2, dtype=np.float64)
    if D1.shape[0] != n or D2.shape[1] != b:
        raise ValueError(f"dictionaries {D1.shape} and {D2.shape} do not fit data {Y.shape}")
    k1, k2 = D1.shape[1], D2.shape[0]

    rng = np.random.default_rng(_seeds(params.seed)[2])
    Z = np.zeros((k1, k2))
    state = SolverState(
        Z=Z,
        D1=D1,
        D2=D2,
        P=Y - D1 @ Z @ D2,
        Q=Z.copy(),
        R=D1.copy(),
        S=D2.copy(),
        B1=rng.uniform(0.0, 1.0, (n, b)),
        B2=rng.uniform(0.0, 1.0, (k1, k2)),
        B3=rng.uniform(0.0, 1.0, D1.shape),
        B4=rng.uniform(0.0, 1.0, D2.shape),
    )
    return state.replace(objective_history=(objective(Y, Z, D1, D2, params),))


def _finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values after sub-problem {name}")
    return value


def step_Z(s, Y, p):
    return s.replace(Z=solve_Z(Y, s.D1, s.D2, s.P, s.B1, s.Q, s.B2, p.mu, p.mu1, p.lsq, Z0=s.Z))


def step_D1(s, Y, p):
    return s.replace(D1=solve_D1(Y, s.Z, s.D2, s.P, s.B1, s.R, s.B3, p.mu, p.mu2))


def step_D2(s, Y, p):
    return s.replace(D2=solve_D2(Y, s.Z, s.D1, s.P, s.B1, s.S, s.B4, p.mu, p.mu3))


def step_P(s, Y, p):
    # no 1/2 on the quadratic, hence 1/(2 mu)
    return s.replace(P=_finite("P4", soft_threshold(Y - s.estimate() + s.B1, 1.0 / (2.0 * p.mu))))


def step_Q(s, Y, p):
    return s.replace(Q=_finite("P5", soft_threshold(s.Z + s.B2, p.lambda1 / (2.0 * p.mu1))))


def step_R(s, Y, p):
    return s.replace(R=_finite("P6", ridge_shrink(s.D1 + s.B3, p.lambda2, p.mu2)))


def step_S(s, Y, p):
    return s.replace(S=_finite("P7", ridge_shrink(s.D2 + s.B4, p.lambda3, p.mu3)))


def step_bregman(s, Y, p):
    X = s.estimate()
    if p.bregman == "printed":
        upd = {"B1": s.P - Y + X - s.B1, "B2": s.Q - s.Z - s.B2}
        if p.learns_spatial:
            upd["B3"] = s.R - s.D1 - s.B3
        if p.learns_spectral:
            upd["B4"] = s.S - s.D2 - s.B4
    else:
        upd = {"B1": s.B1 + (Y - X - s.P), "B2": s.B2 + (s.Z - s.Q)}
        if p.learns_spatial:
            upd["B3"] = s.B3 + (s.D1 - s.R)
        if p.learns_spectral:
            upd["B4"] = s.B4 + (s.D2 - s.S)
    for name, value in upd.items():
        _finite(f"Bregman update {name}", value)
    return s.replace(**upd)


def schedule(params: KbcsParams):
    """Ordered ``(name, step)`` pairs making up one sweep for the given mode."""
    steps = [("P1", step_Z)]
    if params.learns_spatial:
        steps.append(("P2", step_D1))
    if params.learns_spectral:
        steps.append(("P3", step_D2))
    steps += [("P4", step_P), ("P5", step_Q)]
    if params.learns_spatial:
        steps.append(("P6", step_R))
    if params.learns_spectral:
        steps.append(("P7", step_S))
    return steps


def iterate(state: SolverState, Y, params: KbcsParams) -> SolverState:
    """One full sweep over the sub-problems followed by the Bregman updates."""
    Y = np.asarray(Y, dtype=np.float64)
    s = state
    for name, step in schedule(params):
        try:
            s = step(s, Y, params)
        except NonFiniteError as exc:
            raise NonFiniteError(f"sub-problem {name}: {exc}") from exc
    s = step_bregman(s, Y, params)
    J = objective(Y, s.Z, s.D1, s.D2, params)
    if not np.isfinite(J):
        raise NonFiniteError("objective became non-finite")
    return s.replace(objective_history=s.objective_history + (J,))


def denoise(Y, params: KbcsParams = KbcsParams(), k1=None, k2=None, D1=None, D2=None,
            image_shape=None) -> DenoiseResult:
    """Run the solver from ``init_state`` until the objective settles.

    Parameters
    ----------
    Y : ndarray, shape (n_pixels, n_bands)
        Noisy band matrix.
    params : KbcsParams
        Weights, mode and stopping rule.
    k1, k2 : int, optional
        Number of spatial / spectral atoms. Default to ``n_pixels`` and
        ``n_bands`` (square dictionaries).
    D1, D2 : ndarray, optional
        Starting (or, in ``kcs`` mode, fixed) dictionaries.
    image_shape : (rows, cols), optional
        Band shape, needed for the fixed spatial transform of non-square bands.

    Stops when ``|J_t - J_{t-1}| < tol`` (or ``tol * max(1, |J_{t-1}|)``
    with ``stop_rule="relative"``) or after ``max_iter`` sweeps.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"expected a band matrix, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("input band matrix contains non-finite values")
    n, b = Y.shape
    k1 = n if k1 is None else k1
    k2 = b if k2 is None else k2

    state = init_state(Y, k1, k2, params, D1=D1, D2=D2, image_shape=image_shape)
    converged = False
    for t in range(1, params.max_iter + 1):
        state = iterate(state, Y, params)
        prev, cur = state.objective_history[-2], state.objective_history[-1]
        logger.debug("iter %d objective %.6g", t, cur)
        if params.settled(prev, cur):
            converged = True
            break
    X_hat = state.estimate()
    return DenoiseResult(
        X_hat=X_hat,
        state=state,
        iterations=len(state.objective_history) - 1,
        converged=converged,
        objective_history=state.objective_history,
    )
