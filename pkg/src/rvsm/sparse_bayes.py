"""Fast sequential sparse Bayesian classifier (binary relevance vector machine).

The weight posterior under a Bernoulli likelihood and an ARD Gaussian prior is
approximated by a Gaussian at its mode (Laplace).  Candidate basis functions
are visited one at a time and, based on their sparsity and quality factors,
added to the model, removed from it, or have their precision re-estimated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit

from .errors import (
    DegenerateInitializationError,
    InvalidInputError,
    ModeSearchError,
    RvsmError,
    TwoClassRequiredError,
)
from .kernel import KernelSpec, design_matrix

MODEL_VERSION = 1
BETA_FLOOR = 1e-10
JITTER_MAX = 1e-4
POLICIES = ("random", "greedy")
# relative tolerance on a Laplace-evidence drop before an action is rejected
ACCEPT_SLACK = 1e-10
# bounded search window for the per-basis evidence maximization, in log alpha
LOG_ALPHA_MIN = -25.0
LOG_ALPHA_MAX = 25.0
LOG_ALPHA_MARGIN = 3.0
LOG_ALPHA_XTOL = 1e-4
WINDOW_SHIFTS = 8
# inactive bases tried against the exact evidence before declaring convergence
ESCAPE_CANDIDATES = 8


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs.

    ``max_iterations`` bounds the number of sweeps; one sweep visits each
    candidate basis once, in an order drawn from the seeded RNG (greedy policy:
    ``n_b`` greedy steps).  Convergence requires a sweep with no basis added or
    deleted and every re-estimated ``|log alpha_new - log alpha_old|`` below
    ``convergence_tol``.
    """

    max_iterations: int = 1000
    convergence_tol: float = 1e-3
    jitter: float = 1e-8
    irls_max_steps: int = 100
    irls_tol: float = 1e-8
    rng_seed: int = 0
    policy: str = "random"

    def __post_init__(self):
        for name in ("max_iterations", "irls_max_steps"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise InvalidInputError(f"{name} must be a positive integer")
        for name in ("convergence_tol", "jitter", "irls_tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be a positive number")
        if not isinstance(self.rng_seed, (int, np.integer)) or self.rng_seed < 0:
            raise InvalidInputError("rng_seed must be an unsigned integer")
        if self.policy not in POLICIES:
            raise InvalidInputError(f"policy must be one of {POLICIES}")

    def to_dict(self) -> dict:
        return {
            "max_iterations": int(self.max_iterations),
            "convergence_tol": float(self.convergence_tol),
            "jitter": float(self.jitter),
            "irls_max_steps": int(self.irls_max_steps),
            "irls_tol": float(self.irls_tol),
            "rng_seed": int(self.rng_seed),
            "policy": self.policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainingSet:
    """Input points ``(n_t, 3)`` with binary targets in {0, 1}."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float).reshape(-1, 3)
        t = np.asarray(self.targets, dtype=float).ravel()
        if x.shape[0] != t.shape[0]:
            raise InvalidInputError("inputs and targets differ in length")
        if x.shape[0] < 2:
            raise TwoClassRequiredError("at least two training points are required")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("inputs contain non-finite coordinates")
        if not np.all((t == 0) | (t == 1)):
            raise InvalidInputError("targets must be 0 or 1")
        if t.min() == t.max():
            raise TwoClassRequiredError("targets must contain both classes (0 and 1)")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)


@dataclass
class ActiveModel:
    """Laplace fit over the currently active bases.

    ``active_indices`` index columns of the full candidate design matrix.
    The remaining fields cache quantities at the mode that the factor
    computation needs.
    """

    active_indices: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_marginal: float
    y_hat: np.ndarray = field(repr=False, default=None)
    beta: np.ndarray = field(repr=False, default=None)
    chol: np.ndarray = field(repr=False, default=None)
    t_hat: np.ndarray = field(repr=False, default=None)


@dataclass
class FactorTable:
    """Per-candidate factors.

    ``sparsity``/``quality`` hold the model-corrected ``s_m``/``q_m`` (equal to
    the raw values for inactive bases); ``s_raw``/``q_raw`` are the factors with
    every active basis included.  ``flagged`` marks active bases whose
    ``alpha - s`` denominator was clamped.
    """

    sparsity: np.ndarray
    quality: np.ndarray
    theta: np.ndarray
    s_raw: np.ndarray
    q_raw: np.ndarray
    flagged: np.ndarray


class Action(enum.Enum):
    REESTIMATE = "reestimate"
    ADD = "add"
    DELETE = "delete"
    NOOP = "noop"


def sigmoid(y):
    """Logistic function ``1 / (1 + exp(-y))``; saturates without overflow."""
    return expit(y)


def _log_likelihood(a: np.ndarray, t: np.ndarray) -> float:
    return float(np.sum(t * log_expit(a) + (1.0 - t) * log_expit(-a)))


def _objective(phi, t, alpha, w) -> float:
    return _log_likelihood(phi @ w, t) - 0.5 * float(np.sum(alpha * w * w))


def _cholesky(H: np.ndarray, jitter: float) -> np.ndarray:
    """Lower Cholesky factor, adding ``jitter * 10**k`` to the diagonal on failure."""
    try:
        return linalg.cholesky(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    eye = np.eye(H.shape[0])
    j = jitter
    while j <= JITTER_MAX * (1 + 1e-12):
        try:
            return linalg.cholesky(H + j * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            j *= 10.0
    raise linalg.LinAlgError("matrix not positive definite even with maximal jitter")


def find_mode(ts: TrainingSet, active_phi, alpha, cfg: TrainConfig, mu0=None):
    """Posterior mode of the weights by damped Newton (IRLS).

    Returns
    -------
    mu : ndarray
        Mode; satisfies ``Phi^T (t - y) - A mu ~ 0`` to ``cfg.irls_tol``.
    beta : ndarray
        Diagonal of ``B``, ``y_i (1 - y_i)`` floored at ``BETA_FLOOR``.
    y_hat : ndarray
        ``sigmoid(Phi mu)``.
    """
    phi = np.asarray(active_phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.shape[0] != phi.shape[1]:
        raise InvalidInputError("alpha length must equal number of active bases")
    if not np.all(np.isfinite(alpha) & (alpha > 0)):
        raise InvalidInputError("alpha must be finite and positive")
    t = ts.targets
    w = np.zeros(phi.shape[1]) if mu0 is None else np.array(mu0, dtype=float)

    f = _objective(phi, t, alpha, w)
    for _ in range(cfg.irls_max_steps):
        y = expit(phi @ w)
        grad = phi.T @ (t - y) - alpha * w
        if np.max(np.abs(grad)) < cfg.irls_tol:
            break
        beta = np.maximum(y * (1.0 - y), BETA_FLOOR)
        H = (phi.T * beta) @ phi + np.diag(alpha)
        try:
            L = _cholesky(H, cfg.jitter)
        except linalg.LinAlgError as exc:
            raise ModeSearchError(str(exc), mu=w) from exc
        step = linalg.cho_solve((L, True), grad, check_finite=False)
        # step halving until the objective does not drop
        size = 1.0
        slack = 1e-12 * (1.0 + abs(f))
        while True:
            w_new = w + size * step
            f_new = _objective(phi, t, alpha, w_new)
            if f_new >= f - slack:
                break
            size *= 0.5
            if size < 1e-12:
                raise ModeSearchError("line search failed to improve the log posterior", mu=w)
        w, f = w_new, f_new
    else:
        y = expit(phi @ w)
        grad = phi.T @ (t - y) - alpha * w
        if np.max(np.abs(grad)) >= cfg.irls_tol:
            raise ModeSearchError(
                f"IRLS did not converge in {cfg.irls_max_steps} steps "
                f"(|grad|_inf={np.max(np.abs(grad)):.3g})",
                mu=w,
            )
    y = expit(phi @ w)
    beta = np.maximum(y * (1.0 - y), BETA_FLOOR)
    return w, beta, y


def _fit(ts, full_phi, active_indices, alpha, cfg, mu0=None) -> ActiveModel:
    idx = np.asarray(active_indices, dtype=int)
    alpha = np.asarray(alpha, dtype=float)
    phi = full_phi[:, idx]
    if len(idx) == 0:
        # every weight pruned: the model predicts 0.5 everywhere
        y = np.full(len(ts.targets), 0.5)
        beta = y * (1.0 - y)
        return ActiveModel(idx, alpha, np.zeros(0), np.zeros((0, 0)),
                           _log_likelihood(np.zeros_like(y), ts.targets),
                           y_hat=y, beta=beta, chol=np.zeros((0, 0)),
                           t_hat=(ts.targets - y) / beta)
    mu, beta, y = find_mode(ts, phi, alpha, cfg, mu0=mu0)
    H = (phi.T * beta) @ phi + np.diag(alpha)
    L = _cholesky(H, cfg.jitter)
    sigma = linalg.cho_solve((L, True), np.eye(len(idx)))
    sigma = 0.5 * (sigma + sigma.T)
    t = ts.targets
    lm = (
        _log_likelihood(phi @ mu, t)
        - 0.5 * float(np.sum(alpha * mu * mu))
        + 0.5 * float(np.sum(np.log(alpha)))
        - float(np.sum(np.log(np.diag(L))))
    )
    t_hat = phi @ mu + (t - y) / beta
    return ActiveModel(idx, alpha, mu, sigma, lm, y_hat=y, beta=beta, chol=L, t_hat=t_hat)


def log_marginal_likelihood(ts: TrainingSet, active_phi, alpha, cfg: TrainConfig) -> float:
    """Laplace estimate of ``log p(t | alpha)`` at the posterior mode.

    ``log p(t|w*) + log p(w*|alpha) + 0.5 log det Sigma + (M/2) log 2 pi``.
    """
    phi = np.asarray(active_phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    return _fit(ts, phi, np.arange(phi.shape[1]), alpha, cfg).log_marginal


def _factors(model: ActiveModel, full_phi, cols, active_alpha, jitter):
    """Factors for candidate columns ``cols``.

    ``active_alpha`` holds alpha for each column (``inf`` when inactive).
    """
    phi_a = full_phi[:, model.active_indices]
    C = full_phi[:, cols]
    beta = model.beta
    BC = beta[:, None] * C
    bt = beta * model.t_hat
    S = np.einsum("ij,ij->j", C, BC)
    Q = C.T @ bt
    if phi_a.shape[1]:
        Lr = linalg.solve_triangular(model.chol, phi_a.T @ BC, lower=True)
        Lt = linalg.solve_triangular(model.chol, phi_a.T @ bt, lower=True)
        S = S - np.einsum("ij,ij->j", Lr, Lr)
        Q = Q - Lr.T @ Lt

    s_m = S.copy()
    q_m = Q.copy()
    flagged = np.zeros(len(S), dtype=bool)
    act = np.isfinite(active_alpha)
    if np.any(act):
        a = active_alpha[act]
        denom = a - S[act]
        bad = denom <= 0
        denom = np.where(bad, jitter, denom)
        s_m[act] = a * S[act] / denom
        q_m[act] = a * Q[act] / denom
        flagged[np.flatnonzero(act)[bad]] = True
    return s_m, q_m, S, Q, flagged


def _alpha_of(n_b, model: ActiveModel) -> np.ndarray:
    full = np.full(n_b, np.inf)
    full[model.active_indices] = model.alpha
    return full


def update_model(ts: TrainingSet, full_phi, active: ActiveModel, cfg: TrainConfig):
    """Refit the Laplace approximation and compute factors for every candidate.

    Returns the refitted :class:`ActiveModel` and a :class:`FactorTable`.
    """
    full_phi = np.asarray(full_phi, dtype=float)
    model = _fit(ts, full_phi, active.active_indices, active.alpha, cfg, mu0=active.mu)
    n_b = full_phi.shape[1]
    s_m, q_m, S, Q, flagged = _factors(
        model, full_phi, np.arange(n_b), _alpha_of(n_b, model), cfg.jitter
    )
    return model, FactorTable(s_m, q_m, q_m**2 - s_m, S, Q, flagged)


def initial_alpha(phi, targets) -> float:
    """``||phi||^2 / (||phi^T t||^2 / ||phi||^2)``.

    The targets are oriented (``t`` or ``1 - t``) to maximize the projection so
    that relabeling the two classes yields the same value.
    """
    phi = np.asarray(phi, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    nrm2 = float(phi @ phi)
    proj2 = max(float(phi @ t) ** 2, float(phi @ (1.0 - t)) ** 2)
    if nrm2 == 0.0 or proj2 == 0.0:
        raise DegenerateInitializationError("initial basis has zero projection onto the targets")
    return nrm2 / (proj2 / nrm2)


def initialize_model(ts: TrainingSet, phi_matrix, cfg: TrainConfig, exclude=()) -> ActiveModel:
    """Single-basis starting model.

    Picks the candidate (outside ``exclude``) with the largest normalized
    projection onto the targets, sets its alpha by :func:`initial_alpha` and
    fits the Laplace approximation.
    """
    phi = np.asarray(phi_matrix, dtype=float)
    t = ts.targets
    norms2 = np.einsum("ij,ij->j", phi, phi)
    proj2 = np.maximum((phi.T @ t) ** 2, (phi.T @ (1.0 - t)) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(norms2 > 0, proj2 / norms2, -np.inf)
    score[list(exclude)] = -np.inf
    j = int(np.argmax(score))
    if not np.isfinite(score[j]) or score[j] <= 0:
        raise DegenerateInitializationError("no candidate basis projects onto the targets")
    a = initial_alpha(phi[:, j], t)
    return _fit(ts, phi, np.array([j]), np.array([a]), cfg)


def evaluate_hyperparameter(s_m: float, q_m: float) -> float:
    """Evidence-maximizing alpha for one basis; ``inf`` when ``q^2 <= s``."""
    theta = q_m * q_m - s_m
    if theta > 0:
        return s_m * s_m / theta
    return math.inf


def select_action(j: int, table: FactorTable, active: ActiveModel):
    """Return ``(Action, alpha_new)`` for basis ``j``; ``alpha_new`` is None
    for delete/no-op."""
    is_active = bool(np.any(active.active_indices == j))
    theta = table.theta[j]
    if theta > 0:
        a = evaluate_hyperparameter(table.sparsity[j], table.quality[j])
        return (Action.REESTIMATE if is_active else Action.ADD), a
    return (Action.DELETE if is_active else Action.NOOP), None


def _delta_log_marginal(action, alpha_old, alpha_new, S, Q):
    """Change in the (Gaussian-surrogate) log evidence for a candidate action,
    in terms of the full-model factors ``S``, ``Q``."""
    if action is Action.ADD:
        return 0.5 * ((Q * Q - S) / S + math.log(S / (Q * Q)))
    if action is Action.REESTIMATE:
        d = 1.0 / alpha_new - 1.0 / alpha_old
        if d == 0:
            return 0.0
        return 0.5 * (Q * Q / (S + 1.0 / d) - math.log1p(S * d))
    if action is Action.DELETE:
        return 0.5 * (Q * Q / (S - alpha_old) - math.log1p(-S / alpha_old))
    return 0.0


# --------------------------------------------------------------------------
# trained model


@dataclass(frozen=True)
class BinaryRvmModel:
    """Sparse binary classifier.

    When ``kernel.include_bias`` is set, ``weights[0]`` is the bias weight
    (zero, with zero variance, if the bias basis was pruned).
    """

    class_id: int
    kernel: KernelSpec
    relevance_vectors: np.ndarray
    weights: np.ndarray
    covariance: np.ndarray
    trained: bool = True

    def __post_init__(self):
        rv = np.asarray(self.relevance_vectors, dtype=float).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float).ravel()
        cov = np.asarray(self.covariance, dtype=float).reshape(len(w), len(w))
        if self.trained and len(w) != len(rv) + int(self.kernel.include_bias):
            raise InvalidInputError("weights length does not match relevance vectors")
        object.__setattr__(self, "relevance_vectors", rv)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def untrained(cls, class_id, kernel):
        return cls(class_id, kernel, np.zeros((0, 3)), np.zeros(0), np.zeros((0, 0)), trained=False)

    def latent(self, points) -> np.ndarray:
        """``w^T phi(x)`` for each row of ``points``."""
        if not self.trained:
            raise RvsmError(f"class {self.class_id} has no trained model")
        x = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("query points contain non-finite coordinates")
        out = np.zeros(x.shape[0])
        w = self.weights
        if self.kernel.include_bias:
            out += w[0]
            w = w[1:]
        if len(self.relevance_vectors) and x.shape[0]:
            k = self.kernel
            d = x[:, None, :] - self.relevance_vectors[None, :, :]
            K = k.signal_variance * np.exp(
                -np.einsum("ijk,ijk->ij", d, d) / (2.0 * k.length_scale**2)
            )
            # row-wise reduction: a point's value does not depend on its batch
            out += (K * w).sum(axis=1)
        return out

    def predict_proba(self, points) -> np.ndarray:
        return expit(self.latent(points))

    def flipped(self) -> "BinaryRvmModel":
        """Model for the complementary class (negated weights)."""
        return BinaryRvmModel(
            self.class_id, self.kernel, self.relevance_vectors, -self.weights,
            self.covariance, self.trained,
        )

    def to_dict(self) -> dict:
        n = len(self.weights)
        tril = self.covariance[np.tril_indices(n)] if n else np.zeros(0)
        return {
            "version": MODEL_VERSION,
            "class_id": int(self.class_id),
            "kernel": self.kernel.to_dict(),
            "relevance_vectors": [[float(c) for c in p] for p in self.relevance_vectors],
            "weights": [float(v) for v in self.weights],
            "covariance": [float(v) for v in tril],
            "trained_flag": bool(self.trained),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryRvmModel":
        if d.get("version") != MODEL_VERSION:
            raise InvalidInputError(f"unsupported model version {d.get('version')!r}")
        w = np.asarray(d["weights"], dtype=float)
        n = len(w)
        cov = np.zeros((n, n))
        if n:
            il = np.tril_indices(n)
            cov[il] = d["covariance"]
            cov.T[il] = d["covariance"]
        return cls(
            class_id=d["class_id"],
            kernel=KernelSpec.from_dict(d["kernel"]),
            relevance_vectors=np.asarray(d["relevance_vectors"], dtype=float).reshape(-1, 3),
            weights=w,
            covariance=cov,
            trained=bool(d["trained_flag"]),
        )


def predict_binary(model: BinaryRvmModel, x) -> float:
    """Class-membership probability ``sigmoid(w^T phi(x))`` at a single point."""
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise InvalidInputError("query must be a single 3D point")
    return float(model.predict_proba(x[None, :])[0])


@dataclass
class TraceStep:
    step: int
    basis: int
    action: str
    alpha: float
    log_marginal: float
    n_active: int


@dataclass
class TrainReport:
    class_id: int
    converged: bool
    n_steps: int
    n_sweeps: int
    final_log_marginal: float
    n_active: int
    n_positive: int
    n_negative: int
    trace: list = field(default_factory=list)
    rejected: int = 0

    @property
    def active_trajectory(self):
        return [s.n_active for s in self.trace]

    @property
    def log_marginal_trajectory(self):
        return [s.log_marginal for s in self.trace]

    def summary(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "converged": bool(self.converged),
            "n_steps": int(self.n_steps),
            "n_sweeps": int(self.n_sweeps),
            "final_log_marginal": float(self.final_log_marginal),
            "n_active": int(self.n_active),
            "n_positive": int(self.n_positive),
            "n_negative": int(self.n_negative),
            "rejected": int(self.rejected),
        }


def _apply(model, j, action, alpha_new):
    idx = list(model.active_indices)
    alpha = list(model.alpha)
    mu = list(model.mu)
    if action is Action.ADD:
        idx.append(j)
        alpha.append(alpha_new)
        mu.append(0.0)
    elif action is Action.REESTIMATE:
        p = idx.index(j)
        alpha[p] = alpha_new
    elif action is Action.DELETE:
        p = idx.index(j)
        del idx[p], alpha[p], mu[p]
    return np.array(idx, dtype=int), np.array(alpha), np.array(mu)


class SequentialTrainer:
    """Stateful driver of the add/delete/re-estimate loop for one class.

    Most callers want :func:`train_binary`; the trainer is exposed for tests
    that need to inspect the candidate design matrix or the intermediate fits.
    """

    def __init__(self, ts: TrainingSet, kernel: KernelSpec, cfg: TrainConfig, class_id=1):
        self.ts = ts
        self.kernel = kernel
        self.cfg = cfg
        self.class_id = class_id
        self.centers = ts.inputs
        self.phi = design_matrix(kernel, ts.inputs, ts.inputs)
        self.n_b = self.phi.shape[1]
        self.bias_index = 0 if kernel.include_bias else None

    def _step_factors(self, model, j):
        """Factors of a single candidate; same arithmetic as :func:`_factors`
        with the model-dependent products cached on the fit."""
        cache = model.__dict__.setdefault("_cache", {})
        if not cache:
            phi_a = self.phi[:, model.active_indices]
            bt = model.beta * model.t_hat
            if phi_a.shape[1]:
                W = linalg.solve_triangular(model.chol, phi_a.T * model.beta, lower=True,
                                            check_finite=False)
                cache["W"] = W
                cache["Lt"] = linalg.solve_triangular(model.chol, phi_a.T @ bt, lower=True,
                                                      check_finite=False)
            cache["bt"] = bt
            cache["alpha"] = _alpha_of(self.n_b, model)
        c = self.phi[:, j]
        Bc = model.beta * c
        S = float(c @ Bc)
        Q = float(c @ cache["bt"])
        if "W" in cache:
            r = cache["W"] @ c
            S -= float(r @ r)
            Q -= float(r @ cache["Lt"])
        a = cache["alpha"][j]
        if math.isfinite(a):
            denom = a - S
            if denom <= 0:
                denom = self.cfg.jitter
            return a * S / denom, a * Q / denom, S, Q
        return S, Q, S, Q

    def _refit(self, idx, alpha, mu0):
        return _fit(self.ts, self.phi, idx, alpha, self.cfg, mu0=mu0)

    def _evidence_along(self, model, j, action):
        """Laplace evidence as a function of ``log alpha_j``, memoized fits."""
        cache = {}

        def fit_at(log_a):
            if log_a not in cache:
                idx, alpha, mu0 = _apply(model, j, action, math.exp(log_a))
                try:
                    cache[log_a] = self._refit(idx, alpha, mu0)
                except (ModeSearchError, linalg.LinAlgError):
                    cache[log_a] = None
            return cache[log_a]

        def neg(log_a):
            f = fit_at(log_a)
            return math.inf if f is None else -f.log_marginal

        return fit_at, neg, cache

    def _attempt(self, model, j, action, alpha_new):
        """Carry out an action if it raises (or, for re-estimates, keeps) the
        Laplace evidence.

        The factor-based ``alpha_new`` seeds a bounded 1-D search over
        ``log alpha_j`` of the Laplace evidence; the best point found is used.
        Returns ``(new_model, alpha_used)`` or ``(None, None)`` if rejected.
        """
        lm = model.log_marginal
        slack = ACCEPT_SLACK * (1.0 + abs(lm))
        if action is Action.DELETE:
            idx, alpha, mu0 = _apply(model, j, action, None)
            try:
                new = self._refit(idx, alpha, mu0)
            except (ModeSearchError, linalg.LinAlgError):
                return None, None
            return (new, None) if new.log_marginal >= lm - slack else (None, None)

        fit_at, neg, cache = self._evidence_along(model, j, action)
        log_new = min(max(math.log(alpha_new), LOG_ALPHA_MIN), LOG_ALPHA_MAX)
        points = [log_new]
        if action is Action.REESTIMATE:
            log_old = math.log(model.alpha[list(model.active_indices).index(j)])
            points.append(log_old)
            cache[log_old] = model
        lo = max(min(points) - LOG_ALPHA_MARGIN, LOG_ALPHA_MIN)
        hi = min(max(points) + LOG_ALPHA_MARGIN, LOG_ALPHA_MAX)
        neg(log_new)
        for _ in range(WINDOW_SHIFTS):
            x = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                         options={"xatol": LOG_ALPHA_XTOL}).x
            # optimum pinned to the window edge: slide the window outward
            if x - lo < 10 * LOG_ALPHA_XTOL and lo > LOG_ALPHA_MIN:
                lo, hi = max(lo - 2 * LOG_ALPHA_MARGIN, LOG_ALPHA_MIN), lo + LOG_ALPHA_MARGIN
            elif hi - x < 10 * LOG_ALPHA_XTOL and hi < LOG_ALPHA_MAX:
                lo, hi = hi - LOG_ALPHA_MARGIN, min(hi + 2 * LOG_ALPHA_MARGIN, LOG_ALPHA_MAX)
            else:
                break
        ok = [(k, f) for k, f in cache.items() if f is not None]
        log_best, best = max(ok, key=lambda kv: (kv[1].log_marginal, -abs(kv[0] - points[-1])))
        if action is Action.REESTIMATE:
            if best is model:
                return None, None
            return best, math.exp(log_best)
        # additions must pay for themselves
        if best.log_marginal > lm + slack:
            return best, math.exp(log_best)
        return None, None

    def run(self):
        cfg = self.cfg
        exclude = () if self.bias_index is None else (self.bias_index,)
        model = initialize_model(self.ts, self.phi, cfg, exclude=exclude)
        rng = np.random.default_rng(cfg.rng_seed)
        trace = [TraceStep(0, int(model.active_indices[0]), "init", float(model.alpha[0]),
                           model.log_marginal, 1)]
        best = model
        step = 0
        rejected = 0
        converged = False
        sweeps = 0
        for sweep in range(cfg.max_iterations):
            sweeps = sweep + 1
            structural = False
            max_dlog = 0.0
            if cfg.policy == "random":
                order = rng.permutation(self.n_b)
            else:
                order = range(self.n_b)
            skip = set()
            for j in order:
                step += 1
                if cfg.policy == "greedy":
                    j, action, alpha_new = self._greedy_choice(model, skip)
                    if j is None:
                        break
                else:
                    s_m, q_m, _, _ = self._step_factors(model, j)
                    is_active = bool(np.any(model.active_indices == j))
                    theta = q_m * q_m - s_m
                    if theta > 0:
                        alpha_new = evaluate_hyperparameter(s_m, q_m)
                        action = Action.REESTIMATE if is_active else Action.ADD
                    else:
                        alpha_new = None
                        action = Action.DELETE if is_active else Action.NOOP
                if action is Action.NOOP:
                    continue
                new, alpha_new = self._attempt(model, j, action, alpha_new)
                if new is None:
                    rejected += 1
                    skip.add(j)
                    continue
                skip = set()
                if action is Action.REESTIMATE:
                    old = model.alpha[list(model.active_indices).index(j)]
                    max_dlog = max(max_dlog, abs(math.log(alpha_new) - math.log(old)))
                else:
                    structural = True
                model = new
                if model.log_marginal > best.log_marginal:
                    best = model
                trace.append(TraceStep(step, int(j), action.value,
                                       float(alpha_new) if alpha_new else math.inf,
                                       model.log_marginal, len(model.active_indices)))
            settled = (cfg.policy == "greedy" and j is None) or (
                not structural and max_dlog < cfg.convergence_tol)
            if settled:
                escape = self._escape(model)
                if escape is None:
                    converged = True
                    break
                model, j, action, alpha_new = escape
                if model.log_marginal > best.log_marginal:
                    best = model
                trace.append(TraceStep(step, int(j), action.value,
                                       float(alpha_new) if alpha_new else math.inf,
                                       model.log_marginal, len(model.active_indices)))
        final = model if converged else best
        return final, TrainReport(
            class_id=self.class_id,
            converged=converged,
            n_steps=step,
            n_sweeps=sweeps,
            final_log_marginal=final.log_marginal,
            n_active=len(final.active_indices),
            n_positive=int(self.ts.targets.sum()),
            n_negative=int(len(self.ts.targets) - self.ts.targets.sum()),
            trace=trace,
            rejected=rejected,
        )

    def _escape(self, model):
        """Structural move the factor test missed.

        The factor-based test for adding (``theta > 0``) and deleting
        (``theta <= 0``) comes from a Gaussian surrogate of the evidence and
        can disagree with the Laplace evidence near ``theta = 0``.  Before
        stopping, the inactive bases with the largest ``theta`` and every
        active basis are tried directly.  Returns ``(model, j, action,
        alpha)`` for the first improving move, else None.
        """
        lm = model.log_marginal
        slack = ACCEPT_SLACK * (1.0 + abs(lm))
        alpha_full = _alpha_of(self.n_b, model)
        s_m, q_m, _, _, _ = _factors(model, self.phi, np.arange(self.n_b), alpha_full, self.cfg.jitter)
        theta = q_m**2 - s_m
        inactive = np.flatnonzero(~np.isfinite(alpha_full))
        inactive = inactive[np.argsort(-theta[inactive], kind="stable")][:ESCAPE_CANDIDATES]
        for j in inactive:
            # seed the search near the surrogate's boundary
            guess = s_m[j] ** 2 / max(theta[j], 1e-3 * s_m[j])
            new, a = self._attempt(model, int(j), Action.ADD, guess)
            if new is not None:
                return new, int(j), Action.ADD, a
        for j in model.active_indices:
            new, _ = self._attempt(model, int(j), Action.DELETE, None)
            if new is not None and new.log_marginal > lm + slack:
                return new, int(j), Action.DELETE, None
        return None

    def _greedy_choice(self, model, skip=()):
        """Action with the largest predicted evidence gain, or ``(None, ...)``
        when the model is at a fixed point.  Bases in ``skip`` (already
        rejected for this model) are passed over."""
        alpha_full = _alpha_of(self.n_b, model)
        s_m, q_m, S, Q, _ = _factors(model, self.phi, np.arange(self.n_b), alpha_full, self.cfg.jitter)
        theta = q_m**2 - s_m
        active = np.isfinite(alpha_full)
        best_gain, best = 0.0, None
        settled = True
        for j in range(self.n_b):
            if j in skip:
                continue
            if theta[j] > 0:
                a_new = s_m[j] ** 2 / theta[j]
                if active[j]:
                    if abs(math.log(a_new) - math.log(alpha_full[j])) >= self.cfg.convergence_tol:
                        settled = False
                    gain = _delta_log_marginal(Action.REESTIMATE, alpha_full[j], a_new, S[j], Q[j])
                    act = Action.REESTIMATE
                else:
                    settled = False
                    gain = _delta_log_marginal(Action.ADD, None, a_new, S[j], Q[j])
                    act = Action.ADD
            elif active[j]:
                settled = False
                a_new = None
                gain = _delta_log_marginal(Action.DELETE, alpha_full[j], None, S[j], Q[j])
                act = Action.DELETE
            else:
                continue
            if best is None or gain > best_gain:
                best_gain, best = gain, (j, act, a_new)
        if settled or best is None:
            return None, Action.NOOP, None
        return best

    def to_model(self, fit: ActiveModel, trained=True) -> BinaryRvmModel:
        idx = fit.active_indices
        bias = self.kernel.include_bias
        kernel_cols = [int(i) for i in idx if i != self.bias_index]
        order = sorted(range(len(idx)), key=lambda p: int(idx[p]))
        # bias first, then relevance vectors in training-set order
        if bias:
            perm = [p for p in order if idx[p] == self.bias_index]
            perm += [p for p in order if idx[p] != self.bias_index]
        else:
            perm = order
        mu = fit.mu[perm]
        sigma = fit.sigma[np.ix_(perm, perm)]
        offset = 1 if bias else 0
        rv = self.centers[[c - offset for c in sorted(kernel_cols)]]
        if bias and self.bias_index not in set(int(i) for i in idx):
            mu = np.concatenate([[0.0], mu])
            sigma = np.pad(sigma, ((1, 0), (1, 0)))
        return BinaryRvmModel(self.class_id, self.kernel, rv, mu, sigma, trained=trained)


def train_binary(ts: TrainingSet, kernel: KernelSpec, cfg: TrainConfig = TrainConfig(), class_id=1):
    """Train one binary RVM with the sequential sparse Bayesian algorithm.

    Returns ``(BinaryRvmModel, TrainReport)``.  When the sweep budget runs out
    the best model seen so far is returned with ``report.converged`` False.
    """
    trainer = SequentialTrainer(ts, kernel, cfg, class_id=class_id)
    fit, report = trainer.run()
    return trainer.to_model(fit), report
