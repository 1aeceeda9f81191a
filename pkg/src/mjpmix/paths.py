"""Sample paths, file ingestion and sufficient statistics (B, N, T).

A path starts in a transient state at time 0, jumps at strictly increasing
times and ends either by entering an absorbing state (``end_time`` is then the
absorption time) or by right censoring at ``end_time``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InvariantError, ParseError
from .model import StateSpace

CENSORED = "CENSORED"


@dataclass(frozen=True)
class SamplePath:
    id: str
    initial_state: int
    events: tuple
    end_time: float
    censored: bool

    def __post_init__(self):
        object.__setattr__(self, "events",
                           tuple((float(t), int(s)) for t, s in self.events))
        object.__setattr__(self, "id", str(self.id))

    @property
    def last_state(self) -> int:
        return self.events[-1][1] if self.events else self.initial_state

    def states(self) -> list:
        return [self.initial_state] + [s for _, s in self.events]


def path_violations(path: SamplePath, space: StateSpace) -> list:
    """Every violated path invariant, as messages naming the path id."""
    pid, w, n = path.id, space.num_transient, space.size
    out = []
    if not 0 <= path.initial_state < w:
        out.append(f"path {pid}: initial state {path.initial_state} is not transient")
    if not (np.isfinite(path.end_time) and path.end_time > 0):
        out.append(f"path {pid}: end_time {path.end_time} must be positive and finite")
    prev_t, prev_s = 0.0, path.initial_state
    for k, (t, s) in enumerate(path.events):
        if not 0 <= s < n:
            out.append(f"path {pid}: event {k} state {s} outside the state space")
        if not (t > prev_t):
            out.append(f"path {pid}: event {k} time {t} not after {prev_t}")
        if t > path.end_time:
            out.append(f"path {pid}: event {k} time {t} after end_time {path.end_time}")
        if s == prev_s:
            out.append(f"path {pid}: event {k} repeats state {s}")
        if space.is_absorbing(prev_s) and k > 0:
            out.append(f"path {pid}: event {k} occurs after absorption")
        prev_t, prev_s = t, s
    last = path.last_state
    if path.censored and space.is_absorbing(last):
        out.append(f"path {pid}: censored but last state {last} is absorbing")
    if not path.censored:
        if not path.events or not space.is_absorbing(last):
            out.append(f"path {pid}: not censored but never enters an absorbing state")
    return out


def require_valid_path(path: SamplePath, space: StateSpace) -> SamplePath:
    bad = path_violations(path, space)
    if bad:
        raise InvariantError("; ".join(bad), bad)
    return path


@dataclass(frozen=True, eq=False)
class PathStats:
    """Sufficient statistics of one path: B (w,), N (w, |S|), T (w,)."""

    initial_indicator: np.ndarray
    transition_counts: np.ndarray
    occupancy: np.ndarray
    path_id: str = ""
    censored: bool = False


def path_stats(path: SamplePath, space: StateSpace) -> PathStats:
    w, n = space.num_transient, space.size
    b = np.zeros(w)
    b[path.initial_state] = 1.0
    counts = np.zeros((w, n))
    occ = np.zeros(w)
    t_prev, s_prev = 0.0, path.initial_state
    for t, s in path.events:
        occ[s_prev] += t - t_prev
        counts[s_prev, s] += 1
        t_prev, s_prev = t, s
    if s_prev < w:
        occ[s_prev] += path.end_time - t_prev
    return PathStats(b, counts, occ, path.id, path.censored)


@dataclass(frozen=True, eq=False)
class CohortStats:
    """Per-path statistics stacked as arrays.

    ``B`` is ``(K, w)``, ``N`` is ``(K, w, |S|)``, ``T`` is ``(K, w)``.
    """

    space: StateSpace
    B: np.ndarray
    N: np.ndarray
    T: np.ndarray
    ids: tuple = ()
    censored: np.ndarray = field(default=None)

    def __post_init__(self):
        w, n = self.space.num_transient, self.space.size
        B = np.asarray(self.B, dtype=float).reshape(-1, w)
        K = B.shape[0]
        N = np.asarray(self.N, dtype=float).reshape(K, w, n)
        T = np.asarray(self.T, dtype=float).reshape(K, w)
        cens = np.zeros(K, dtype=bool) if self.censored is None else np.asarray(self.censored, dtype=bool)
        ids = tuple(self.ids) if self.ids else tuple(str(k) for k in range(K))
        if cens.shape != (K,) or len(ids) != K:
            raise DimensionMismatch("ids/censored length does not match path count")
        for name, arr in (("B", B), ("N", N), ("T", T), ("censored", cens)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "ids", ids)

    @property
    def K(self) -> int:
        return self.B.shape[0]

    @property
    def B_total(self) -> np.ndarray:
        return self.B.sum(axis=0)

    @property
    def N_total(self) -> np.ndarray:
        return self.N.sum(axis=0)

    @property
    def T_total(self) -> np.ndarray:
        return self.T.sum(axis=0)

    @property
    def initial_states(self) -> np.ndarray:
        return np.argmax(self.B, axis=1)

    @property
    def per_path(self) -> list:
        return [PathStats(self.B[k], self.N[k], self.T[k], self.ids[k], bool(self.censored[k]))
                for k in range(self.K)]

    def subset(self, idx) -> "CohortStats":
        idx = np.asarray(idx, dtype=int)
        return CohortStats(self.space, self.B[idx], self.N[idx], self.T[idx],
                           tuple(self.ids[i] for i in idx), self.censored[idx])

    def concat(self, other: "CohortStats") -> "CohortStats":
        if other.space.size != self.space.size or other.space.num_transient != self.space.num_transient:
            raise DimensionMismatch("cohorts use different state spaces")
        return CohortStats(self.space, np.concatenate([self.B, other.B]),
                           np.concatenate([self.N, other.N]), np.concatenate([self.T, other.T]),
                           self.ids + other.ids, np.concatenate([self.censored, other.censored]))


def aggregate(stats: Sequence[PathStats], space: Optional[StateSpace] = None) -> CohortStats:
    """Stack per-path statistics; totals are exact sums in input order."""
    stats = list(stats)
    if space is None:
        if not stats:
            raise DimensionMismatch("cannot infer the state space of an empty list")
        w, n = stats[0].transition_counts.shape
        space = StateSpace(w, n - w)
    w, n = space.num_transient, space.size
    for s in stats:
        if s.initial_indicator.shape != (w,) or s.transition_counts.shape != (w, n) \
                or s.occupancy.shape != (w,):
            raise DimensionMismatch(f"path {s.path_id!r} statistics do not match a ({w}, {n}) state space")
    if not stats:
        return CohortStats(space, np.zeros((0, w)), np.zeros((0, w, n)), np.zeros((0, w)), (), np.zeros(0, bool))
    return CohortStats(space,
                       np.stack([s.initial_indicator for s in stats]),
                       np.stack([s.transition_counts for s in stats]),
                       np.stack([s.occupancy for s in stats]),
                       tuple(s.path_id for s in stats),
                       np.array([s.censored for s in stats], dtype=bool))


def cohort_stats(paths: Iterable[SamplePath], space: StateSpace) -> CohortStats:
    return aggregate([path_stats(p, space) for p in paths], space)


# ------------------------------------------------------------------ ingestion

@dataclass
class _RawPath:
    id: str
    initial: str
    events: list
    end_time: Optional[float]
    censored: bool
    locus: str


def _label(x) -> str:
    if isinstance(x, bool):
        raise TypeError("boolean is not a state label")
    if isinstance(x, float) and x.is_integer():
        x = int(x)
    return str(x)


def _label_key(s: str):
    try:
        return (0, int(s), s)
    except ValueError:
        return (1, 0, s)


def infer_space(raws: Sequence[_RawPath]) -> StateSpace:
    """Absorbing states are those seen only as the terminal state of uncensored paths."""
    seen, nonterminal = set(), set()
    for r in raws:
        seq = [r.initial] + [s for _, s in r.events]
        seen.update(seq)
        nonterminal.update(seq[:-1] if not r.censored else seq)
    absorbing = sorted(seen - nonterminal, key=_label_key)
    transient = sorted(nonterminal, key=_label_key)
    return StateSpace(len(transient), len(absorbing), tuple(transient + absorbing))


def _resolve(raws: Sequence[_RawPath], space: StateSpace) -> list:
    index = {lab: i for i, lab in enumerate(space.labels or [str(s + 1) for s in range(space.size)])}
    out = []
    for r in raws:
        try:
            init = index[r.initial]
            events = [(t, index[s]) for t, s in r.events]
        except KeyError as exc:
            raise ParseError(f"unknown state label {exc.args[0]!r}", r.locus) from None
        end = r.end_time
        if end is None:
            end = events[-1][0] if events else 0.0
        path = SamplePath(r.id, init, events, end, r.censored)
        out.append(require_valid_path(path, space))
    return out


def _check_order(r: _RawPath):
    prev = 0.0
    for k, (t, _) in enumerate(r.events):
        if not np.isfinite(t) or t <= prev:
            raise ParseError(f"path {r.id}: event times must be finite and strictly increasing "
                             f"(event {k} at {t} after {prev})", r.locus)
        prev = t


def _parse_json(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    space = None
    if isinstance(doc, dict):
        if "states" in doc:
            st = doc["states"]
            tr = [_label(x) for x in st["transient"]]
            ab = [_label(x) for x in st.get("absorbing", [])]
            space = StateSpace(len(tr), len(ab), tuple(tr + ab))
        doc = doc.get("paths")
    if not isinstance(doc, list):
        raise ParseError("expected an array of path records", "document")
    raws = []
    for k, rec in enumerate(doc):
        locus = f"record {k}"
        try:
            events = [(float(t), _label(s)) for t, s in rec["events"]]
            end = rec.get("end_time")
            raws.append(_RawPath(str(rec.get("id", k)), _label(rec["initial"]), events,
                                 None if end is None else float(end),
                                 bool(rec.get("censored", False)), locus))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed path record ({exc.__class__.__name__}: {exc})", locus) from None
        _check_order(raws[-1])
    return raws, space


def _parse_csv(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        return [], None
    if [h.strip() for h in header] != ["path_id", "time", "state"]:
        raise ParseError("header must be path_id,time,state", "line 1")
    raws, by_id = [], {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        locus = f"line {lineno}"
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", locus)
        pid, t_text, state = (c.strip() for c in row)
        try:
            t = float(t_text)
        except ValueError:
            raise ParseError(f"bad time {t_text!r}", locus) from None
        raw = by_id.get(pid)
        if raw is None:
            if raws and raws[-1].id != pid and pid in by_id:
                raise ParseError(f"rows of path {pid} are not contiguous", locus)
            if t != 0.0:
                raise ParseError(f"first row of path {pid} must have time 0", locus)
            if state == CENSORED:
                raise ParseError(f"path {pid} has no initial state", locus)
            raw = _RawPath(pid, _label(state), [], None, False, locus)
            by_id[pid] = raw
            raws.append(raw)
            continue
        if raws[-1] is not raw:
            raise ParseError(f"rows of path {pid} are not contiguous", locus)
        if raw.censored:
            raise ParseError(f"row after the censoring row of path {pid}", locus)
        prev = raw.events[-1][0] if raw.events else 0.0
        if state == CENSORED:
            if t < prev:
                raise ParseError(f"censoring time {t} before last event {prev}", locus)
            raw.censored, raw.end_time = True, t
        else:
            if t <= prev:
                raise ParseError(f"time {t} not after {prev} in path {pid}", locus)
            raw.events.append((t, _label(state)))
    return raws, None


def parse_paths(source, fmt: str = "json", space: Optional[StateSpace] = None):
    """Parse paths from bytes, text or a binary/text stream.

    Returns ``(paths, space)``. State labels in files are user-facing labels
    (typically 1-based integers); the state space is taken from ``space``, from
    an embedded ``states`` block, or inferred from the data.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if fmt == "json":
        raws, declared = _parse_json(source)
    elif fmt == "csv":
        raws, declared = _parse_csv(source)
    else:
        raise ValueError(f"unknown paths format {fmt!r}")
    space = space or declared or infer_space(raws)
    return _resolve(raws, space), space


def load_paths(path: str, space: Optional[StateSpace] = None):
    fmt = "csv" if str(path).lower().endswith(".csv") else "json"
    with open(path, "rb") as fh:
        return parse_paths(fh, fmt, space)


def paths_to_json(paths: Sequence[SamplePath], space: StateSpace) -> dict:
    lab = [space.label(s) for s in range(space.size)]

    def out(s):
        return int(lab[s]) if lab[s].isdigit() else lab[s]

    return {
        "states": {"transient": [out(s) for s in space.transient],
                   "absorbing": [out(s) for s in space.absorbing]},
        "paths": [{"id": p.id, "initial": out(p.initial_state),
                   "events": [[t, out(s)] for t, s in p.events],
                   "end_time": p.end_time, "censored": p.censored} for p in paths],
    }


def paths_to_csv(paths: Sequence[SamplePath], space: StateSpace) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["path_id", "time", "state"])
    for p in paths:
        wr.writerow([p.id, repr(0.0), space.label(p.initial_state)])
        for t, s in p.events:
            wr.writerow([p.id, repr(t), space.label(s)])
        if p.censored:
            wr.writerow([p.id, repr(p.end_time), CENSORED])
    return buf.getvalue()
