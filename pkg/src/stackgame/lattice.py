"""Binomial lattices for the one-dimensional Brownian filtration.

Two layouts share one interface:

* recombining: layer i has i + 1 nodes, node j moves to j (down) or j + 1 (up);
* full tree: layer i has 2**i nodes, node j moves to 2j (down) or 2j + 1 (up).

Path-dependent processes (anything driven by node controls) live on the
full tree.  Increments are ``±√dt`` with probability ½ each.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import comb

MAX_FULL_TREE_N = 16


class Lattice:
    def __init__(self, T, N, recombining=False):
        if N < 1:
            raise ValueError("lattice needs at least one step")
        if not recombining and N > MAX_FULL_TREE_N:
            raise ValueError(f"full tree capped at N <= {MAX_FULL_TREE_N}, got {N}")
        self.T = float(T)
        self.N = int(N)
        self.recombining = bool(recombining)
        self.dt = self.T / self.N
        self.sqdt = np.sqrt(self.dt)

    def __repr__(self):
        kind = "recombining" if self.recombining else "full"
        return f"Lattice(T={self.T}, N={self.N}, {kind})"

    def size(self, i):
        return i + 1 if self.recombining else 1 << i

    def time(self, i):
        return i * self.dt

    def times(self):
        return np.arange(self.N + 1) * self.dt

    def down_up(self, values):
        """Split a layer-(i+1) array into (down, up) successor values of layer i."""
        if self.recombining:
            return values[:-1], values[1:]
        return values[0::2], values[1::2]

    def expand(self, values):
        """Copy layer-i values onto their layer-(i+1) successors (full tree only)."""
        if self.recombining:
            raise ValueError("expand is only defined on the full tree")
        return np.repeat(values, 2, axis=0)

    def xi(self, i):
        """Increment ``ΔW`` leading into each node of layer ``i`` (full tree)."""
        if self.recombining:
            raise ValueError("increments per node exist only on the full tree")
        if i == 0:
            return np.zeros(1)
        return np.tile([-self.sqdt, self.sqdt], 1 << (i - 1))

    def weights(self, i):
        """Probability of reaching each node of layer ``i``."""
        if self.recombining:
            return comb(i, np.arange(i + 1)) / 2.0**i
        return np.full(1 << i, 0.5**i)

    def expectation_step(self, values):
        down, up = self.down_up(values)
        return 0.5 * (down + up)

    def integrand_step(self, values):
        down, up = self.down_up(values)
        return (up - down) / (2.0 * self.sqdt)


@dataclass
class NodeProcess:
    """One value (a vector of length ``dim``) per node and layer.

    ``layers[i]`` has shape ``(lattice.size(i), dim)``.  Processes that only
    live on non-terminal nodes (controls, integrands) have ``N`` layers.
    """

    lattice: Lattice
    layers: list

    def __post_init__(self):
        self.layers = [np.atleast_2d(np.asarray(a, dtype=float)) for a in self.layers]

    @classmethod
    def zeros(cls, lattice, dim, terminal=True):
        count = lattice.N + 1 if terminal else lattice.N
        return cls(lattice, [np.zeros((lattice.size(i), dim)) for i in range(count)])

    @classmethod
    def constant(cls, lattice, value, terminal=True):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        count = lattice.N + 1 if terminal else lattice.N
        return cls(lattice, [np.tile(value, (lattice.size(i), 1)) for i in range(count)])

    @classmethod
    def from_function(cls, lattice, fn, terminal=True):
        """Full tree only: ``fn(i, W)`` with ``W`` the Brownian value at each node."""
        count = lattice.N + 1 if terminal else lattice.N
        layers = []
        W = np.zeros(1)
        for i in range(count):
            if i > 0:
                W = lattice.expand(W) + lattice.xi(i)
            layers.append(np.atleast_2d(np.asarray(fn(i, W), dtype=float).reshape(W.size, -1)))
        return cls(lattice, layers)

    @property
    def dim(self):
        return self.layers[0].shape[1]

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def copy(self):
        return NodeProcess(self.lattice, [a.copy() for a in self.layers])

    def max_abs(self):
        return max(float(np.max(np.abs(a), initial=0.0)) for a in self.layers)

    def distance(self, other):
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(self.layers, other.layers))

    def expectation(self, i):
        """Unconditional mean over layer ``i``."""
        w = self.lattice.weights(i)
        return w @ self.layers[i]


def conditional_expectation(proc, i):
    """``E_i[proc(i+1)]`` at every node of layer ``i``."""
    if i + 1 >= len(proc):
        raise IndexError("process is not defined at layer i + 1")
    return proc.lattice.expectation_step(proc.layers[i + 1])


def martingale_integrand(proc, i):
    """The z with ``proc(i+1) = E_i[proc(i+1)] + z·ΔW`` at both successors."""
    if i + 1 >= len(proc):
        raise IndexError("process is not defined at layer i + 1")
    return proc.lattice.integrand_step(proc.layers[i + 1])
