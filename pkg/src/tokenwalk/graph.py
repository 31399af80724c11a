"""Agent networks, transition matrices and token routing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

UNIFORM = "uniform-neighbors"
METROPOLIS = "metropolis-hastings"
INCLUDE_SELF = "include-self"
POLICIES = (UNIFORM, METROPOLIS, INCLUDE_SELF)


class PolicyError(ValueError):
    """A routing policy was asked for something the topology cannot provide."""


@dataclass(frozen=True)
class Topology:
    """Undirected connected graph on agents ``0..n_agents-1``.

    ``edges`` holds sorted pairs ``(i, j)`` with ``i < j`` in sorted order.
    ``cycle_order``, when present, is a Hamiltonian cycle of the graph.
    """

    n_agents: int
    edges: tuple[tuple[int, int], ...]
    cycle_order: tuple[int, ...] | None = None

    def __post_init__(self):
        n = self.n_agents
        if n < 1:
            raise ValueError("a topology needs at least one agent")
        edges = tuple(sorted({(min(i, j), max(i, j)) for i, j in self.edges}))
        if len(edges) != len(self.edges):
            raise ValueError("duplicate edges")
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at agent {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) has an endpoint outside [0, {n})")
        object.__setattr__(self, "edges", edges)
        if self.cycle_order is not None:
            order = tuple(int(a) for a in self.cycle_order)
            if sorted(order) != list(range(n)):
                raise ValueError("cycle_order must be a permutation of the agents")
            edge_set = set(edges)
            for a, b in zip(order, order[1:] + order[:1]):
                if a != b and (min(a, b), max(a, b)) not in edge_set:
                    raise ValueError(f"cycle step {a}->{b} is not an edge")
            object.__setattr__(self, "cycle_order", order)

    @cached_property
    def neighbors(self):
        adj = [[] for _ in range(self.n_agents)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    @property
    def degrees(self):
        return np.array([len(a) for a in self.neighbors])

    def is_connected(self):
        seen = {0}
        stack = [0]
        while stack:
            for j in self.neighbors[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n_agents

    def to_edge_list(self):
        lines = [f"{self.n_agents} {len(self.edges)}"]
        lines += [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows:
            raise ValueError("empty edge list")
        n, m = int(rows[0][0]), int(rows[0][1])
        edges = tuple((int(a), int(b)) for a, b in rows[1:])
        if len(edges) != m:
            raise ValueError(f"header announces {m} edges, found {len(edges)}")
        return cls(n, edges)


def target_edge_count(n, zeta):
    # round half up; Python's round() is banker's rounding
    return int(math.floor(zeta * n * (n - 1) / 2 + 0.5))


def generate_topology(n, zeta, seed, require_cycle=False):
    """Random connected graph with ``round(zeta * n(n-1)/2)`` edges.

    With ``require_cycle`` the graph is grown from a random ring (so a
    Hamiltonian cycle is known by construction), otherwise from a random
    spanning tree.  Remaining edges are drawn uniformly from the non-edges.
    """
    if n < 2:
        raise ValueError(f"need at least 2 agents, got {n}")
    if not 0 < zeta <= 1:
        raise ValueError(f"zeta must lie in (0, 1], got {zeta}")
    rng = np.random.default_rng(seed)
    target = target_edge_count(n, zeta)
    perm = [int(a) for a in rng.permutation(n)]
    if require_cycle:
        base = {(min(a, b), max(a, b)) for a, b in zip(perm, perm[1:] + perm[:1]) if a != b}
    else:
        # random recursive tree over a random labelling
        base = set()
        for k in range(1, n):
            parent = perm[int(rng.integers(k))]
            a = perm[k]
            base.add((min(a, parent), max(a, parent)))
    if target < len(base):
        kind = "ring" if require_cycle else "spanning tree"
        raise ValueError(
            f"zeta={zeta} gives {target} edges, fewer than the {len(base)} of the base {kind}; "
            f"use zeta >= {len(base) / (n * (n - 1) / 2):.4f}"
        )
    rest = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in base]
    extra = rng.choice(len(rest), size=target - len(base), replace=False) if target > len(base) else []
    edges = base | {rest[int(k)] for k in extra}
    return Topology(n, tuple(edges), tuple(perm) if require_cycle else None)


def build_transition_matrix(topology, policy=UNIFORM):
    """Row-stochastic matrix supported on each agent's closed neighbourhood."""
    n = topology.n_agents
    deg = topology.degrees
    P = np.zeros((n, n))
    for i, nbrs in enumerate(topology.neighbors):
        if policy == UNIFORM:
            if not nbrs:
                P[i, i] = 1.0
            for j in nbrs:
                P[i, j] = 1.0 / deg[i]
        elif policy == METROPOLIS:
            for j in nbrs:
                P[i, j] = min(1.0 / deg[i], 1.0 / deg[j])
            P[i, i] = max(0.0, 1.0 - P[i].sum())  # rounding can dip below 0
        elif policy == INCLUDE_SELF:
            for j in (*nbrs, i):
                P[i, j] = 1.0 / (deg[i] + 1)
        else:
            raise PolicyError(f"unknown transition policy {policy!r}; expected one of {POLICIES}")
    return P


def check_transition_matrix(P, topology, atol=1e-12):
    """Raise if ``P`` is not row-stochastic on the closed neighbourhoods."""
    P = np.asarray(P)
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("entries must lie in [0, 1]")
    if not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("rows must sum to 1")
    allowed = np.eye(topology.n_agents, dtype=bool)
    for i, j in topology.edges:
        allowed[i, j] = allowed[j, i] = True
    if np.any(P[~allowed] > 0):
        raise ValueError("probability mass on a non-neighbour")


def next_agent(P, current, rng):
    """Sample the next agent from row ``current`` of ``P`` using ``rng``."""
    row = P[current]
    return int(rng.choice(row.shape[0], p=row))


def next_agent_cyclic(topology, current):
    if topology.cycle_order is None:
        raise PolicyError("cyclic routing needs a topology with a Hamiltonian cycle")
    order = topology.cycle_order
    return order[(order.index(current) + 1) % len(order)]


def walk_rng(seed, walk_id):
    """Dedicated stream for one walk; independent of how many walks exist."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, walk_id)))


def start_agents(topology, n_walks, seed, cyclic):
    """Distinct starting agents for ``n_walks`` tokens.

    Cyclic mode spaces the tokens evenly along the cycle, beginning at agent 0;
    otherwise they are a prefix of a seeded permutation, so walk m starts at
    the same agent whatever the number of walks.
    """
    n = topology.n_agents
    if n_walks > n:
        raise ValueError(f"{n_walks} walks need distinct start agents but only {n} agents exist")
    if cyclic:
        order = topology.cycle_order
        if order is None:
            raise PolicyError("cyclic routing needs a topology with a Hamiltonian cycle")
        pos0 = order.index(0)
        return [order[(pos0 + (m * n) // n_walks) % n] for m in range(n_walks)]
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    return [int(a) for a in rng.permutation(n)[:n_walks]]
