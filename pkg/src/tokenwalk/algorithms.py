"""Token-walk update rules on an explicit network state.

The state holds every agent's local model ``x[i]``, the live tokens ``z[m]``
and each agent's local copies ``copies[i, m]`` of every token.  Step functions
mutate the state in place and return a :class:`Step` describing what moved;
the simulator decides who is active and when.

Token bookkeeping
-----------------
When agent ``i`` replaces ``x_i`` by ``x_new`` while holding token ``m``, the
token absorbs ``(x_new - prior)/N``.  With ``token_update="literal"`` the prior
is the agent's current model.  With ``"tracking"`` (the default) it is the
model the agent last contributed to *this* walk, so that every token stays
equal to the average of the agent models it has seen.  The two coincide for a
single walk and in fresh-token mode, where every update is shared with all
tokens and anchors are the live tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALGORITHMS = ("ibcd", "apibcd", "gapibcd", "wpg", "centralized", "sync-multi")
WALK_ALGORITHMS = ("ibcd", "apibcd", "gapibcd", "wpg")
SINGLE_WALK = ("ibcd", "wpg", "centralized")
TOKEN_UPDATES = ("tracking", "literal")
THEOREMS = ("thm1", "thm2", "thm3")
# "nmse-target" is the regression name of "metric-target"
STOP_MODES = ("max-events", "objective-tol", "metric-target", "nmse-target")


class ConfigError(ValueError):
    """Invalid run configuration."""


class TheoremViolation(AssertionError):
    """A descent inequality failed on some iteration."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class RunConfig:
    algorithm: str = "apibcd"
    tau: float = 0.1
    rho: float = 0.0
    alpha: float = 0.5
    n_walks: int = 1
    fresh_tokens: bool = False
    token_update: str = "tracking"
    max_events: int = 1000
    seed: int = 0
    selection: str = "cyclic"
    transition_policy: str = "uniform-neighbors"
    inner_tol: float = 1e-6
    # network timing
    latency_low: float = 1e-5
    latency_high: float = 1e-4
    compute_model: str = "measured"
    compute_constant: float = 0.0
    # tracing and stopping
    probe_every: int = 1
    stop: str = "max-events"
    stop_tol: float = 1e-12
    metric_target: float | None = None

    def validate(self, n_agents=None):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm != "wpg" and not self.tau > 0:
            raise ConfigError(f"tau must be > 0 for penalty methods, got {self.tau}")
        if self.algorithm == "wpg" and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0 for WPG, got {self.alpha}")
        if self.rho < 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if self.n_walks < 1:
            raise ConfigError("n_walks must be >= 1")
        if self.algorithm in SINGLE_WALK and self.n_walks != 1:
            raise ConfigError(f"{self.algorithm} runs a single walk; set n_walks=1")
        if n_agents is not None and self.n_walks > n_agents:
            raise ConfigError(
                f"n_walks={self.n_walks} exceeds the {n_agents} agents (start agents must be distinct)"
            )
        if self.token_update not in TOKEN_UPDATES:
            raise ConfigError(f"token_update must be one of {TOKEN_UPDATES}")
        if self.selection not in ("cyclic", "markov"):
            raise ConfigError("selection must be 'cyclic' or 'markov'")
        if self.algorithm == "wpg" and self.selection != "cyclic":
            raise ConfigError("WPG visits agents along a Hamiltonian cycle; use selection='cyclic'")
        if self.max_events < 0:
            raise ConfigError("max_events must be >= 0")
        if not 0 <= self.latency_low <= self.latency_high:
            raise ConfigError("need 0 <= latency_low <= latency_high")
        if self.compute_model not in ("measured", "constant", "zero"):
            raise ConfigError("compute_model must be measured, constant or zero")
        if self.probe_every < 1:
            raise ConfigError("probe_every must be >= 1")
        if self.stop not in STOP_MODES:
            raise ConfigError(f"stop must be one of {STOP_MODES}")
        if self.stop in ("metric-target", "nmse-target") and self.metric_target is None:
            raise ConfigError(f"stop={self.stop!r} needs metric_target")
        return self


class NetworkState:
    """Agent models, live tokens and per-agent copies for one run."""

    def __init__(self, models, n_walks, tau):
        self.models = list(models)
        self.n_agents = len(self.models)
        self.dim = self.models[0].dim
        self.n_walks = n_walks
        self.tau = tau
        N, M, p = self.n_agents, n_walks, self.dim
        self.x = np.zeros((N, p))
        self.z = np.zeros((M, p))
        self.copies = np.zeros((N, M, p))
        # model each agent last contributed to each walk
        self.seen = np.zeros((N, M, p))
        self.location = [0] * M

    def token_average(self):
        return self.z.mean(axis=0)

    def agent_average(self):
        return self.x.mean(axis=0)


@dataclass
class Step:
    agent: int
    walk_id: int
    x_old: np.ndarray
    x_new: np.ndarray
    dz: np.ndarray  # (M, p); rows of walks that did not move are zero
    extra: dict = field(default_factory=dict)

    @property
    def dx(self):
        return self.x_new - self.x_old


def init_run(config, topology, models):
    """Zero models, zero tokens, zero copies (so z_m = mean(x) holds at start)."""
    if len(models) != topology.n_agents:
        raise ConfigError(f"{len(models)} shards for {topology.n_agents} agents")
    config.validate(topology.n_agents)
    return NetworkState(models, config.n_walks, config.tau)


def _commit(state, i, m, x_new, fresh, rule):
    """Install ``x_new`` at agent ``i`` and push the change into the token(s)."""
    N = state.n_agents
    x_old = state.x[i].copy()
    dz = np.zeros_like(state.z)
    receivers = range(state.n_walks) if fresh else (m,)
    for r in receivers:
        prior = state.seen[i, r] if rule == "tracking" else x_old
        inc = (x_new - prior) / N
        state.z[r] += inc
        dz[r] = inc
        state.seen[i, r] = x_new
    state.x[i] = x_new
    if fresh:
        state.copies[:] = state.z[None, :, :]
    else:
        state.copies[i, m] = state.z[m]
    return Step(i, m, x_old, x_new.copy(), dz)


def ibcd_step(state, agent, tau, inner_tol=1e-10):
    """Single-token incremental BCD: prox at the active agent, then z += dx/N."""
    if state.n_walks != 1:
        raise ConfigError("I-BCD uses exactly one token")
    i = agent
    x_new = state.models[i].prox(state.z[:1], tau, inner_tol, x0=state.x[i])
    return _commit(state, i, 0, x_new, fresh=False, rule="literal")


def _anchors(state, i, m, fresh):
    if fresh:
        return state.z
    # Alg. 2 step 3: refresh this walk's copy on arrival
    state.copies[i, m] = state.z[m]
    return state.copies[i]


def apibcd_step(state, walk_id, agent, tau, fresh_tokens=False, token_update="tracking", inner_tol=1e-10):
    """Multi-token prox update anchored at the agent's copies of all M tokens."""
    i, m = agent, walk_id
    anchors = _anchors(state, i, m, fresh_tokens)
    x_new = state.models[i].prox(anchors, tau, inner_tol, x0=state.x[i])
    return _commit(state, i, m, x_new, fresh_tokens, token_update)


def gapibcd_step(state, walk_id, agent, tau, rho, fresh_tokens=False, token_update="tracking"):
    """As :func:`apibcd_step` with the loss linearized at the current model."""
    i, m = agent, walk_id
    anchors = _anchors(state, i, m, fresh_tokens)
    x_new = state.models[i].grad_prox_step(state.x[i], anchors, tau, rho)
    return _commit(state, i, m, x_new, fresh_tokens, token_update)


def wpg_step(state, agent, alpha):
    """Walk proximal gradient: x_i = z - alpha grad f_i(z), z += dx/N."""
    i = agent
    z = state.z[0]
    x_new = z - alpha * state.models[i].grad(z)
    return _commit(state, i, 0, x_new, fresh=False, rule="literal")


def centralized_step(state, tau, inner_tol=1e-10):
    """Parameter-server round: every agent proxes against z, z becomes their mean."""
    if state.n_walks != 1:
        raise ConfigError("the centralized reference uses one global model")
    return sync_multi_step(state, tau, inner_tol)


def sync_multi_step(state, tau, inner_tol=1e-10):
    """Synchronous M-token round; all tokens collapse onto mean(x)."""
    anchors = state.z.copy()
    x_old = state.x.copy()
    for i, model in enumerate(state.models):
        state.x[i] = model.prox(anchors, tau, inner_tol, x0=x_old[i])
    z_old = state.z.copy()
    state.z[:] = state.x.mean(axis=0)
    state.copies[:] = state.z[None, :, :]
    state.seen[:] = state.x[:, None, :]
    return Step(-1, -1, x_old, state.x.copy(), state.z - z_old)


def eval_objective(state, tau=None):
    """F(x, z) = sum_i f_i(x_i) + tau/2 sum_i sum_m ||x_i - z_m||^2, by direct summation."""
    tau = state.tau if tau is None else tau
    loss = sum(model.loss(state.x[i]) for i, model in enumerate(state.models))
    diff = state.x[:, None, :] - state.z[None, :, :]
    return loss + 0.5 * tau * float(np.sum(diff * diff))


def global_loss(state, w):
    """sum_i f_i(w): the original, unpenalized objective at a single model."""
    return sum(model.loss(w) for model in state.models)


class ObjectiveTracker:
    """O(p) per-event bookkeeping of F using running sums.

    penalty = tau/2 (M sum_i ||x_i||^2 - 2 <sum_i x_i, sum_m z_m> + N sum_m ||z_m||^2)
    """

    def __init__(self, state, tau, refresh_every=100):
        self.state = state
        self.tau = tau
        self.refresh_every = refresh_every
        self._since = 0
        self.refresh()

    def refresh(self):
        s = self.state
        self.f = np.array([m.loss(s.x[i]) for i, m in enumerate(s.models)])
        self.sx = s.x.sum(axis=0)
        self.qx = float(np.sum(s.x * s.x))
        self.sz = s.z.sum(axis=0)
        self.qz = float(np.sum(s.z * s.z))
        self._since = 0

    def update(self, step):
        if step.agent < 0:
            self.refresh()
            return
        s = self.state
        i = step.agent
        self.f[i] = s.models[i].loss(s.x[i])
        self.sx += step.x_new - step.x_old
        self.qx += float(step.x_new @ step.x_new - step.x_old @ step.x_old)
        self.sz = s.z.sum(axis=0)
        self.qz = float(np.sum(s.z * s.z))
        self._since += 1
        if self._since >= self.refresh_every:
            self.refresh()

    @property
    def value(self):
        s = self.state
        pen = s.n_walks * self.qx - 2.0 * float(self.sx @ self.sz) + s.n_agents * self.qz
        return float(self.f.sum()) + 0.5 * self.tau * max(pen, 0.0)


@dataclass
class DescentCheck:
    passed: bool
    slack: float
    change: float
    bound: float
    F_before: float = 0.0


def descent_bound(delta_x, delta_z, tau, rho, L, variant, n_agents):
    """Right-hand side of the per-iteration descent inequality."""
    dx2 = float(np.dot(delta_x, delta_x))
    dz = np.atleast_2d(delta_z)
    dz2 = float(np.sum(dz * dz))
    M = dz.shape[0]
    if variant == "thm1":
        coeff = tau / 2
    elif variant == "thm2":
        coeff = tau * M / 2
    elif variant == "thm3":
        coeff = tau * M / 2 + rho - L / 2
    else:
        raise ValueError(f"variant must be one of {THEOREMS}")
    return -coeff * dx2 - tau * n_agents / 2 * dz2


def check_descent(F_before, F_after, delta_x, delta_z, tau, rho, L, variant, n_agents, atol=1e-8):
    """Compare F_after - F_before with the descent bound.

    Tolerance is ``atol * (1 + |F_before|)``; ``slack >= 0`` means the bound held.
    """
    bound = descent_bound(delta_x, delta_z, tau, rho, L, variant, n_agents)
    change = F_after - F_before
    slack = bound + atol * (1.0 + abs(F_before)) - change
    return DescentCheck(bool(slack >= 0), float(slack), float(change), float(bound), float(F_before))


def mean_consistency_error(state, fresh_tokens, token_update):
    """Relative deviation of each token from the average it should equal.

    Single-walk and fresh-token runs: z_m = mean_i x_i.  Stale runs with
    several walks: z_m = mean_i seen[i, m] (tracking) or sum_m z_m = mean_i x_i
    (literal).
    """
    if state.n_walks == 1 or fresh_tokens:
        target = np.broadcast_to(state.x.mean(axis=0), state.z.shape)
        got = state.z
    elif token_update == "tracking":
        target = state.seen.mean(axis=0)
        got = state.z
    else:
        target = state.x.mean(axis=0)[None, :]
        got = state.z.sum(axis=0)[None, :]
    err = np.linalg.norm(got - target, axis=-1)
    scale = np.maximum(np.linalg.norm(target, axis=-1), np.linalg.norm(got, axis=-1))
    rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), err)
    return float(rel.max())


def penalty_oracle(models, tau, n_walks=1):
    """Exact minimizer of F for least-squares losses by one linear solve.

    At the minimum all tokens coincide with mean(x), so the stationarity
    conditions are ``(H_i + tau M I) x_i - tau M z = A_i^T b_i / d_i`` and
    ``N z = sum_i x_i``.  Returns ``(x, z)`` with ``x`` of shape (N, p), ``z``
    of shape (p,).
    """
    if any(m.kind != "least-squares" for m in models):
        raise ValueError("the direct penalty oracle needs least-squares losses")
    N, p = len(models), models[0].dim
    w = tau * n_walks
    K = np.zeros(((N + 1) * p, (N + 1) * p))
    rhs = np.zeros((N + 1) * p)
    eye = np.eye(p)
    zs = slice(N * p, (N + 1) * p)
    for i, m in enumerate(models):
        xs = slice(i * p, (i + 1) * p)
        A, b = m.shard.features, m.shard.labels
        K[xs, xs] = m.gram() + (m.l2_reg + w) * eye
        K[xs, zs] = -w * eye
        K[zs, xs] = -w * eye
        rhs[xs] = np.asarray(A.T @ b).ravel() / m._d
    K[zs, zs] = N * w * eye
    sol = np.linalg.solve(K, rhs)
    return sol[: N * p].reshape(N, p), sol[zs]
