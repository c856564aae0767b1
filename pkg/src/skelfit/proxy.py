"""Reduced-variable proxy maps p -> y with analytic (constant) Jacobians.

All variants are affine in p, so the Jacobian does not depend on p and the
per-iteration quadratic-model assembly stays exact. Maps are immutable;
"rebasing" (re-reading frozen/base coordinates from a state vector) returns
a new map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ProxyMap:
    """Interface: apply, jacobian, project (least-squares preimage), rebased."""

    n_p: int
    n_y: int

    def apply(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, p: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def project(self, y: np.ndarray) -> np.ndarray:
        """p minimizing ||apply(p) - y|| on the targeted coordinates."""
        raise NotImplementedError

    def rebased(self, y: np.ndarray) -> "ProxyMap":
        """Same map with frozen/base coordinates taken from y."""
        return self

    def _check_p(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_p,):
            raise ValueError(f"proxy vector has shape {p.shape}, expected ({self.n_p},)")
        return p

    def _check_y(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_y,):
            raise ValueError(f"state vector has shape {y.shape}, expected ({self.n_y},)")
        return y


@dataclass(frozen=True)
class Identity(ProxyMap):
    """y = p."""

    n: int

    @property
    def n_p(self):
        return self.n

    @property
    def n_y(self):
        return self.n

    def apply(self, p):
        return self._check_p(p).copy()

    def jacobian(self, p=None):
        return np.eye(self.n)

    def project(self, y):
        return self._check_y(y).copy()


@dataclass(frozen=True)
class Selection(ProxyMap):
    """Active coordinates come from p; the rest are frozen constants.

    ``frozen_values`` has full length n_y; entries at active indices are
    ignored.
    """

    active_indices: np.ndarray
    frozen_values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.active_indices, dtype=int)
        frozen = np.asarray(self.frozen_values, dtype=float)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate active indices")
        if idx.size and (idx.min() < 0 or idx.max() >= frozen.size):
            raise ValueError("active index out of range")
        object.__setattr__(self, "active_indices", idx)
        object.__setattr__(self, "frozen_values", frozen)

    @property
    def n_p(self):
        return len(self.active_indices)

    @property
    def n_y(self):
        return len(self.frozen_values)

    def apply(self, p):
        y = self.frozen_values.copy()
        y[self.active_indices] = self._check_p(p)
        return y

    def jacobian(self, p=None):
        J = np.zeros((self.n_y, self.n_p))
        J[self.active_indices, np.arange(self.n_p)] = 1.0
        return J

    def project(self, y):
        return self._check_y(y)[self.active_indices].copy()

    def rebased(self, y):
        return Selection(self.active_indices, self._check_y(y).copy())


@dataclass(frozen=True)
class Affine(ProxyMap):
    """y = A p + b."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if A.ndim != 2 or b.shape != (A.shape[0],):
            raise ValueError("A must be (n_y, n_p) and b (n_y,)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_p(self):
        return self.A.shape[1]

    @property
    def n_y(self):
        return self.A.shape[0]

    def apply(self, p):
        return self.A @ self._check_p(p) + self.b

    def jacobian(self, p=None):
        return self.A.copy()

    def project(self, y):
        return np.linalg.lstsq(self.A, self._check_y(y) - self.b, rcond=None)[0]


@dataclass(frozen=True)
class ChainBasis(ProxyMap):
    """Targeted DoFs follow basis @ p; every other coordinate is held at a
    stored base state (refreshed via rebased at solve start)."""

    target_dofs: np.ndarray
    basis: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.target_dofs, dtype=int)
        basis = np.asarray(self.basis, dtype=float)
        base = np.asarray(self.base, dtype=float)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate target DoFs")
        if basis.shape[0] != idx.size:
            raise ValueError("basis rows must match target DoF count")
        if idx.size and (idx.min() < 0 or idx.max() >= base.size):
            raise ValueError("target DoF out of range")
        object.__setattr__(self, "target_dofs", idx)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "base", base)

    @property
    def n_p(self):
        return self.basis.shape[1]

    @property
    def n_y(self):
        return len(self.base)

    def apply(self, p):
        y = self.base.copy()
        y[self.target_dofs] = self.basis @ self._check_p(p)
        return y

    def jacobian(self, p=None):
        J = np.zeros((self.n_y, self.n_p))
        J[self.target_dofs, :] = self.basis
        return J

    def project(self, y):
        return np.linalg.lstsq(self.basis, self._check_y(y)[self.target_dofs], rcond=None)[0]

    def rebased(self, y):
        return ChainBasis(self.target_dofs, self.basis, self._check_y(y).copy())


@dataclass(frozen=True)
class Composite(ProxyMap):
    """Blockwise map: each block owns a disjoint set of y coordinates.

    ``blocks`` is a sequence of (y_indices, submap) pairs; together the
    index sets must cover 0..n_y-1 exactly once. Proxy coordinates are the
    concatenation of the blocks' p vectors, in block order.
    """

    blocks: tuple
    total_y: int

    def __post_init__(self):
        norm = []
        seen = np.zeros(self.total_y, dtype=int)
        for idx, sub in self.blocks:
            idx = np.asarray(idx, dtype=int)
            if idx.size != sub.n_y:
                raise ValueError("block index count does not match submap n_y")
            seen[idx] += 1
            norm.append((idx, sub))
        if np.any(seen != 1):
            raise ValueError("composite blocks must cover each y coordinate exactly once")
        object.__setattr__(self, "blocks", tuple(norm))

    @property
    def n_p(self):
        return sum(sub.n_p for _, sub in self.blocks)

    @property
    def n_y(self):
        return self.total_y

    def _p_slices(self):
        out = []
        off = 0
        for idx, sub in self.blocks:
            out.append((idx, sub, slice(off, off + sub.n_p)))
            off += sub.n_p
        return out

    def apply(self, p):
        p = self._check_p(p)
        y = np.zeros(self.total_y)
        for idx, sub, sl in self._p_slices():
            y[idx] = sub.apply(p[sl])
        return y

    def jacobian(self, p=None):
        J = np.zeros((self.total_y, self.n_p))
        for idx, sub, sl in self._p_slices():
            J[np.ix_(idx, range(sl.start, sl.stop))] = sub.jacobian()
        return J

    def project(self, y):
        y = self._check_y(y)
        return np.concatenate([sub.project(y[idx]) for idx, sub in self.blocks])

    def rebased(self, y):
        y = self._check_y(y)
        return Composite(tuple((idx, sub.rebased(y[idx])) for idx, sub in self.blocks), self.total_y)


SPINE_MODES = ("poly", "nopoly", "classical")


def make_spine_maps(chain, mode: str, degree: int = 2, segment_count: int = 3) -> ProxyMap:
    """Proxy map over one bending-axis chain of DoFs (a block for Composite).

    poly: a polynomial basis over normalized chain position, one proxy
    coordinate per degree, so n_p = degree + 1 and the whole chain bends as
    a low-order curve. nopoly: every chain DoF independent. classical: the
    chain split into ``segment_count`` rigid groups, one active DoF at each
    group's base and the rest frozen at zero.
    """
    chain = np.asarray(chain, dtype=int)
    n = chain.size
    if n == 0:
        raise ValueError("empty chain")
    if mode not in SPINE_MODES:
        raise ValueError(f"unknown spine mode {mode!r}")
    if mode == "poly":
        if degree < 0:
            raise ValueError("degree must be >= 0")
        if degree + 1 > n:
            raise ValueError(f"degree+1 = {degree + 1} exceeds chain length {n}")
        xi = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
        basis = np.column_stack([xi**d for d in range(degree + 1)])
        return ChainBasis(target_dofs=np.arange(n), basis=basis, base=np.zeros(n))
    if mode == "nopoly":
        return Identity(n)
    if segment_count < 1 or segment_count > n:
        raise ValueError("segment_count must be in 1..chain length")
    groups = np.array_split(np.arange(n), segment_count)
    active = np.array([g[0] for g in groups])
    return Selection(active_indices=active, frozen_values=np.zeros(n))
