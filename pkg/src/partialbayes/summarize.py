"""Reduce replicate data to (z, s2) summaries and read/write summary CSVs."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class SummaryError(ValueError):
    """Bad summary input: malformed files, degenerate fits, invalid pairs."""


class DegenerateVarianceError(SummaryError):
    pass


@dataclass(frozen=True)
class SummaryPair:
    id: str
    z: float
    s2: float

    def __post_init__(self):
        if not math.isfinite(self.z):
            raise SummaryError(f"{self.id}: z must be finite")
        if not (self.s2 > 0 and math.isfinite(self.s2)):
            raise SummaryError(f"{self.id}: s2 must be positive and finite")


@dataclass
class SummaryDataset:
    """Ordered collection of summaries sharing one degrees-of-freedom value."""

    pairs: List[SummaryPair]
    nu: float
    dropped: int = 0
    _z: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _s2: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.nu > 0:
            raise SummaryError("degrees of freedom must be positive")
        seen = set()
        for row, p in enumerate(self.pairs, start=1):
            if p.id in seen:
                raise SummaryError(f"row {row}: duplicate id {p.id!r}")
            seen.add(p.id)

    @classmethod
    def from_arrays(cls, z, s2, nu, ids: Optional[Sequence[str]] = None) -> "SummaryDataset":
        z = np.asarray(z, dtype=float)
        s2 = np.asarray(s2, dtype=float)
        if z.shape != s2.shape or z.ndim != 1:
            raise SummaryError("z and s2 must be 1-d arrays of equal length")
        if ids is None:
            ids = [str(i + 1) for i in range(len(z))]
        pairs = [SummaryPair(str(i), float(a), float(b)) for i, a, b in zip(ids, z, s2)]
        return cls(pairs, nu)

    def __len__(self):
        return len(self.pairs)

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.pairs]

    @property
    def z(self) -> np.ndarray:
        if self._z is None or len(self._z) != len(self.pairs):
            self._z = np.array([p.z for p in self.pairs], dtype=float)
        return self._z

    @property
    def s2(self) -> np.ndarray:
        if self._s2 is None or len(self._s2) != len(self.pairs):
            self._s2 = np.array([p.s2 for p in self.pairs], dtype=float)
        return self._s2

    def concat(self, other: "SummaryDataset") -> "SummaryDataset":
        if other.nu != self.nu:
            raise SummaryError("cannot concatenate datasets with different df")
        return SummaryDataset(self.pairs + other.pairs, self.nu)


def summarize_contrast(y, design, contrast):
    """OLS summary for one unit: estimate of ``c'beta`` and its squared SE.

    Parameters
    ----------
    y : array of shape (K,)
    design : array of shape (K, p), full column rank, K > p
    contrast : array of shape (p,)

    Returns
    -------
    (z, s2, nu) with ``z = c'beta_hat``, ``s2 = c'(X'X)^{-1}c * RSS/(K-p)``
    and ``nu = K - p``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(design, dtype=float)
    c = np.asarray(contrast, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K, p = X.shape
    if y.shape != (K,) or c.shape != (p,):
        raise SummaryError("dimension mismatch between y, design and contrast")
    if K <= p:
        raise SummaryError("need more observations than design columns")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SummaryError("design matrix is rank deficient")
    beta = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    # c'(X'X)^{-1}c = |R^{-T} c|^2
    v = np.linalg.solve(R.T, c)
    scale = float(v @ v)
    nu = K - p
    s2 = scale * rss / nu
    # residuals of an exact fit are O(eps * |y|), not exactly zero
    tiny = (64 * np.finfo(float).eps * max(float(np.abs(y).max()), 1.0)) ** 2 * K
    if rss <= tiny or s2 <= 0:
        raise DegenerateVarianceError("degenerate variance")
    return float(c @ beta), s2, nu


def _parse_float(text, row, col):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise SummaryError(f"row {row}: column {col!r} is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise SummaryError(f"row {row}: column {col!r} is not finite")
    return value


def read_pairs(path, nu: Optional[float] = None) -> SummaryDataset:
    """Read an ``id,z,s2`` CSV.

    The degrees of freedom come from ``nu`` or, failing that, from a leading
    metadata line of the form ``# df=<value>``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    meta_nu = None
    while lines and lines[0].startswith("#"):
        key, _, val = lines.pop(0).lstrip("#").strip().partition("=")
        if key.strip() in ("df", "nu"):
            meta_nu = _parse_float(val.strip(), 0, "df")
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SummaryError("empty file") from None
    missing = [c for c in ("id", "z", "s2") if c not in header]
    if missing:
        raise SummaryError(f"row 1: missing columns {missing}")
    iid, iz, is2 = (header.index(c) for c in ("id", "z", "s2"))
    pairs = []
    seen = set()
    for row, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise SummaryError(f"row {row}: expected {len(header)} fields, got {len(rec)}")
        ident = rec[iid].strip()
        if ident in seen:
            raise SummaryError(f"row {row}: duplicate id {ident!r}")
        seen.add(ident)
        z = _parse_float(rec[iz], row, "z")
        s2 = _parse_float(rec[is2], row, "s2")
        if s2 <= 0:
            raise SummaryError(f"row {row}: s2 must be positive")
        pairs.append(SummaryPair(ident, z, s2))
    if nu is None:
        nu = meta_nu
    if nu is None:
        raise SummaryError("degrees of freedom not given (use --df or a '# df=' line)")
    return SummaryDataset(pairs, float(nu))


def write_pairs(dataset: SummaryDataset, path, include_df: bool = True) -> None:
    """Write ``dataset`` as ``id,z,s2``; floats use ``repr`` so they round-trip."""
    with atomic_open(path) as fh:
        if include_df:
            fh.write(f"# df={dataset.nu!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "z", "s2"])
        for p in dataset.pairs:
            w.writerow([p.id, repr(p.z), repr(p.s2)])


def _read_numeric_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SummaryError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    return header, body


def parse_contrast(spec) -> np.ndarray:
    if isinstance(spec, str):
        try:
            return np.array([float(x) for x in spec.split(",")], dtype=float)
        except ValueError:
            raise SummaryError(f"bad contrast {spec!r}") from None
    return np.asarray(spec, dtype=float)


def read_matrix(path, design_path, contrast) -> SummaryDataset:
    """Summarize a replicate matrix (``id,y1,...,yK``) against a design CSV.

    The design CSV has a header row and one row per sample (column of the
    matrix). Units whose residuals vanish are dropped with a warning; the
    count is stored on ``SummaryDataset.dropped``.
    """
    header, body = _read_numeric_table(path)
    _, dbody = _read_numeric_table(design_path)
    try:
        X = np.array([[float(v) for v in r] for r in dbody], dtype=float)
    except ValueError:
        raise SummaryError(f"{design_path}: design must be numeric") from None
    c = parse_contrast(contrast)
    K = len(header) - 1
    if X.shape[0] != K:
        raise SummaryError(f"design has {X.shape[0]} rows but matrix has {K} samples")
    if X.ndim != 2 or X.shape[1] != len(c):
        raise SummaryError("contrast length must equal the number of design columns")
    pairs, dropped, nu = [], 0, K - X.shape[1]
    seen = set()
    for row, rec in enumerate(body, start=2):
        if len(rec) != K + 1:
            raise SummaryError(f"row {row}: expected {K + 1} fields, got {len(rec)}")
        ident = rec[0].strip()
        if ident in seen:
            raise SummaryError(f"row {row}: duplicate id {ident!r}")
        seen.add(ident)
        y = np.array([_parse_float(v, row, f"y{j + 1}") for j, v in enumerate(rec[1:])])
        try:
            z, s2, nu = summarize_contrast(y, X, c)
        except DegenerateVarianceError:
            dropped += 1
            continue
        pairs.append(SummaryPair(ident, z, s2))
    if dropped:
        logger.warning("dropped %d unit(s) with zero residual variance", dropped)
    ds = SummaryDataset(pairs, float(nu))
    ds.dropped = dropped
    return ds


class atomic_open:
    """Write to a temporary sibling file and rename into place on success."""

    def __init__(self, path, mode="w"):
        self.path = os.fspath(path)
        self.mode = mode
        self.tmp = f"{self.path}.tmp{os.getpid()}"

    def __enter__(self):
        d = os.path.dirname(self.path)
        if d:
            os.makedirs(d, exist_ok=True)
        kw = {} if "b" in self.mode else {"encoding": "utf-8", "newline": ""}
        self.fh = open(self.tmp, self.mode, **kw)
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            try:
                os.remove(self.tmp)
            except OSError:
                pass
        return False
