"""State spaces, intensity matrices and mixture models.

States are indexed ``0..w-1`` (transient set E) followed by ``w..w+d-1``
(absorbing set). All arrays are stored read-only; the types are immutable
after construction. Semantic invariants are checked by :func:`validate_model`
(returns violations) and :func:`require_valid` (raises).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AbsorbingTransientState, DimensionMismatch, InvariantError

CONSTRUCT_TOL = 1e-12
INGEST_TOL = 1e-9


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StateSpace:
    num_transient: int
    num_absorbing: int = 0
    labels: Optional[tuple] = None

    def __post_init__(self):
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @property
    def size(self) -> int:
        return self.num_transient + self.num_absorbing

    @property
    def transient(self) -> range:
        return range(self.num_transient)

    @property
    def absorbing(self) -> range:
        return range(self.num_transient, self.size)

    def is_absorbing(self, s: int) -> bool:
        return s >= self.num_transient

    def label(self, s: int) -> str:
        if self.labels is not None:
            return self.labels[s]
        return str(s + 1)

    def violations(self):
        out = []
        if self.num_transient < 1:
            out.append(f"state space needs at least one transient state, got {self.num_transient}")
        if self.num_absorbing < 0:
            out.append(f"negative absorbing state count {self.num_absorbing}")
        if self.labels is not None:
            if len(self.labels) != self.size:
                out.append(f"{len(self.labels)} labels for {self.size} states")
            if len(set(self.labels)) != len(self.labels):
                out.append("state labels are not unique")
        return out


@dataclass(frozen=True, eq=False)
class IntensityMatrix:
    """Generator of a Markov jump process over ``space`` (rates per unit time)."""

    space: StateSpace
    entries: np.ndarray

    def __post_init__(self):
        q = _frozen(self.entries)
        n = self.space.size
        if q.shape != (n, n):
            raise DimensionMismatch(f"intensity matrix shape {q.shape}, expected {(n, n)}")
        object.__setattr__(self, "entries", q)

    @classmethod
    def from_rates(cls, space: StateSpace, rates) -> "IntensityMatrix":
        """Build from off-diagonal rates; the diagonal is set to minus the row sum.

        ``rates`` may be ``w x |S|`` (transient rows only) or ``|S| x |S|``.
        """
        rates = np.asarray(rates, dtype=float)
        n, w = space.size, space.num_transient
        q = np.zeros((n, n))
        if rates.shape == (w, n):
            q[:w] = rates
        elif rates.shape == (n, n):
            q[:] = rates
        else:
            raise DimensionMismatch(f"rates shape {rates.shape} fits neither {(w, n)} nor {(n, n)}")
        np.fill_diagonal(q, 0.0)
        q[w:] = 0.0
        q[np.diag_indices(n)] = -q.sum(axis=1)
        return cls(space, q)

    @property
    def exit_rates(self) -> np.ndarray:
        w = self.space.num_transient
        return -np.diag(self.entries)[:w].copy()

    @property
    def offdiag(self) -> np.ndarray:
        """Transient rows with the diagonal zeroed, shape ``(w, |S|)``."""
        w = self.space.num_transient
        out = self.entries[:w].copy()
        out[np.arange(w), np.arange(w)] = 0.0
        return out

    def violations(self, tol: float = CONSTRUCT_TOL, prefix: str = "Q"):
        q = self.entries
        n, w = self.space.size, self.space.num_transient
        out = []
        if not np.all(np.isfinite(q)):
            out.append(f"{prefix} has non-finite entries")
            return out
        for i in range(n):
            for j in range(n):
                if i != j and q[i, j] < 0:
                    out.append(f"{prefix} entry ({i},{j}) negative off-diagonal {q[i, j]:.12g}")
        rs = q.sum(axis=1)
        for i in range(n):
            if abs(rs[i]) > tol:
                out.append(f"{prefix} row {i} sums to {rs[i]:.12g}")
        for i in range(w, n):
            if np.any(q[i] != 0):
                out.append(f"{prefix} absorbing row {i} is not identically zero")
        for i in range(w):
            if q[i, i] > 0:
                out.append(f"{prefix} entry ({i},{i}) positive diagonal {q[i, i]:.12g}")
        return out


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Initial distribution ``pi`` (w), regime probabilities ``phi`` (w x M) and
    one intensity matrix per regime, all over one state space.

    ``structural_zeros`` optionally marks transitions (w x |S| boolean) that
    are fixed at zero by design; they do not count as free parameters.
    """

    space: StateSpace
    pi: np.ndarray
    phi: np.ndarray
    regimes: tuple
    structural_zeros: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        w, n = self.space.num_transient, self.space.size
        pi = _frozen(self.pi)
        phi = _frozen(self.phi)
        if phi.ndim == 1:
            phi = _frozen(phi.reshape(w, -1))
        regimes = tuple(self.regimes)
        if pi.shape != (w,):
            raise DimensionMismatch(f"pi has shape {pi.shape}, expected ({w},)")
        if phi.shape != (w, len(regimes)):
            raise DimensionMismatch(f"phi has shape {phi.shape}, expected ({w}, {len(regimes)})")
        if not regimes:
            raise DimensionMismatch("a mixture needs at least one regime")
        for q in regimes:
            if not isinstance(q, IntensityMatrix):
                raise TypeError("regimes must be IntensityMatrix instances")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "regimes", regimes)
        if self.structural_zeros is not None:
            sz = _frozen(self.structural_zeros, dtype=bool)
            if sz.shape != (w, n):
                raise DimensionMismatch(f"structural_zeros shape {sz.shape}, expected {(w, n)}")
            object.__setattr__(self, "structural_zeros", sz)

    @property
    def num_regimes(self) -> int:
        return len(self.regimes)

    @property
    def q(self) -> np.ndarray:
        """Stacked generators, shape ``(M, |S|, |S|)``."""
        return np.stack([r.entries for r in self.regimes])

    @property
    def rates(self) -> np.ndarray:
        """Off-diagonal transient rates, shape ``(M, w, |S|)``, diagonal zeroed."""
        return np.stack([r.offdiag for r in self.regimes])

    @classmethod
    def from_arrays(cls, space, pi, phi, rates, structural_zeros=None) -> "MixtureModel":
        """Build from rate arrays of shape ``(M, w, |S|)`` (diagonals ignored)."""
        rates = np.asarray(rates, dtype=float)
        regimes = tuple(IntensityMatrix.from_rates(space, r) for r in rates)
        return cls(space, pi, phi, regimes, structural_zeros)

    def replace(self, **changes) -> "MixtureModel":
        kw = dict(space=self.space, pi=self.pi, phi=self.phi, regimes=self.regimes,
                  structural_zeros=self.structural_zeros)
        kw.update(changes)
        return MixtureModel(**kw)

    def allowed(self) -> np.ndarray:
        """Boolean ``(w, |S|)`` mask of free off-diagonal transitions."""
        w, n = self.space.num_transient, self.space.size
        mask = np.ones((w, n), dtype=bool)
        mask[np.arange(w), np.arange(w)] = False
        if self.structural_zeros is not None:
            mask &= ~self.structural_zeros
        return mask


@dataclass(frozen=True, eq=False)
class EmbeddedChain:
    space: StateSpace
    exit_rates: np.ndarray
    jump_matrix: np.ndarray

    def __post_init__(self):
        w, n = self.space.num_transient, self.space.size
        er = _frozen(self.exit_rates)
        jm = _frozen(self.jump_matrix)
        if er.shape != (w,) or jm.shape != (w, n):
            raise DimensionMismatch(
                f"embedded chain shapes {er.shape}, {jm.shape}; expected ({w},), ({w}, {n})")
        object.__setattr__(self, "exit_rates", er)
        object.__setattr__(self, "jump_matrix", jm)


def validate_model(model: MixtureModel, tol: float = CONSTRUCT_TOL) -> list:
    """Return every violated invariant of ``model`` as a message; empty if valid."""
    out = list(model.space.violations())
    pi, phi = model.pi, model.phi
    if not np.all(np.isfinite(pi)) or not np.all(np.isfinite(phi)):
        out.append("pi or phi has non-finite entries")
        return out
    for i, p in enumerate(pi):
        if p < 0:
            out.append(f"pi entry {i} negative {p:.12g}")
    if abs(pi.sum() - 1.0) > tol:
        out.append(f"pi sums to {pi.sum():.12g}")
    for i in range(phi.shape[0]):
        for m in range(phi.shape[1]):
            if not 0.0 <= phi[i, m] <= 1.0:
                out.append(f"phi entry ({i},{m}) outside [0,1]: {phi[i, m]:.12g}")
        s = phi[i].sum()
        if abs(s - 1.0) > tol:
            out.append(f"phi row {i} sums to {s:.12g}")
    for m, q in enumerate(model.regimes):
        if q.space != model.space:
            out.append(f"regime {m} intensity matrix uses a different state space")
            continue
        out.extend(q.violations(tol, prefix=f"Q[{m}]"))
        if model.structural_zeros is not None:
            bad = np.argwhere(model.structural_zeros & (q.entries[: model.space.num_transient] != 0))
            for i, j in bad:
                out.append(f"Q[{m}] entry ({i},{j}) declared structural zero but is {q.entries[i, j]:.12g}")
    return out


def require_valid(model: MixtureModel, tol: float = CONSTRUCT_TOL) -> MixtureModel:
    bad = validate_model(model, tol)
    if bad:
        raise InvariantError("invalid mixture model: " + "; ".join(bad), bad)
    return model


def to_embedded(q: IntensityMatrix) -> EmbeddedChain:
    """Exit rates and jump probabilities ``p_ij = q_ij / |q_ii|`` of the transient rows."""
    w = q.space.num_transient
    exit_rates = q.exit_rates
    zero = [i for i in range(w) if not exit_rates[i] > 0]
    if zero:
        raise AbsorbingTransientState(
            f"transient states {[q.space.label(i) for i in zero]} have zero exit rate")
    jump = q.offdiag / exit_rates[:, None]
    return EmbeddedChain(q.space, exit_rates, jump)


def from_embedded(chain: EmbeddedChain) -> IntensityMatrix:
    """Inverse of :func:`to_embedded`: ``Q = diag(exit_rates) (P - I)`` on transient rows."""
    space = chain.space
    w, n = space.num_transient, space.size
    p = np.array(chain.jump_matrix, dtype=float)
    p[np.arange(w), np.arange(w)] = 0.0
    q = np.zeros((n, n))
    q[:w] = chain.exit_rates[:, None] * p
    q[np.arange(w), np.arange(w)] = -chain.exit_rates
    return IntensityMatrix(space, q)


def permute_regimes(model: MixtureModel, perm: Sequence[int]) -> MixtureModel:
    """Reorder regimes so that new regime ``k`` is old regime ``perm[k]``."""
    perm = list(perm)
    return model.replace(phi=model.phi[:, perm], regimes=tuple(model.regimes[k] for k in perm))


def canonical_permutation(phi: np.ndarray) -> tuple:
    """Stable ordering of regimes by non-increasing ``(phi[0,m], phi[1,m], ...)``."""
    phi = np.asarray(phi)
    return tuple(sorted(range(phi.shape[1]), key=lambda m: tuple(-phi[:, m])))


def canonicalize_labels(model: MixtureModel):
    """Return ``(canonical_model, permutation)``; ``permutation[k]`` is the old index
    of the regime now in position ``k``."""
    perm = canonical_permutation(model.phi)
    if perm == tuple(range(model.num_regimes)):
        return model, perm
    return permute_regimes(model, perm), perm


# ---------------------------------------------------------------- JSON schema

def model_to_dict(model: MixtureModel) -> dict:
    sp = model.space
    labels = [sp.label(s) for s in range(sp.size)]
    d = {
        "states": {"transient": labels[: sp.num_transient], "absorbing": labels[sp.num_transient:]},
        "pi": [float(x) for x in model.pi],
        "phi": [[float(x) for x in row] for row in model.phi],
        "Q": [[[float(x) for x in row] for row in q.entries] for q in model.regimes],
    }
    if model.structural_zeros is not None:
        d["structural_zeros"] = [[int(i) + 1, int(j) + 1] for i, j in np.argwhere(model.structural_zeros)]
    return d


def model_from_dict(d: dict, tol: float = INGEST_TOL) -> MixtureModel:
    """Parse the model JSON schema; rejects invariant violations with coordinates."""
    try:
        states = d["states"]
        transient = list(states["transient"])
        absorbing = list(states.get("absorbing", []))
        labels = transient + absorbing
        space = StateSpace(len(transient), len(absorbing), tuple(labels) if labels else None)
        qs = d["Q"]
        regimes = tuple(IntensityMatrix(space, np.asarray(q, dtype=float)) for q in qs)
        sz = None
        if d.get("structural_zeros"):
            sz = np.zeros((space.num_transient, space.size), dtype=bool)
            for i, j in d["structural_zeros"]:
                sz[int(i) - 1, int(j) - 1] = True
        model = MixtureModel(space, np.asarray(d["pi"], dtype=float),
                             np.asarray(d["phi"], dtype=float), regimes, sz)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvariantError):
            raise
        raise InvariantError(f"malformed model document: {exc}") from exc
    return require_valid(model, tol)
