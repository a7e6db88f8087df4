"""Finite-support reproduction laws, their Laplace transform, and kappa."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import brentq


class LawError(ValueError):
    """Malformed or invalid reproduction law."""


class NoRootBracket(ValueError):
    """psi never dips below 1 on the probe grid, so no kappa can be bracketed."""


def _exact(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x.strip())
    if isinstance(x, int):
        return Fraction(x)
    # floats are taken at their exact binary value
    return Fraction(x)


@dataclass(frozen=True)
class Branch:
    prob: Fraction
    weights: tuple[Fraction, ...]


@dataclass(frozen=True)
class ReproductionLaw:
    """Point-process law of children displacements.

    Each branch is chosen with ``prob`` and produces one child per weight
    ``A_j = exp(-displacement_j)``.
    """

    branches: tuple[Branch, ...]
    name: str = ""
    _arrays: tuple = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if not self.branches:
            raise LawError("branches: empty")
        for i, b in enumerate(self.branches):
            if b.prob <= 0:
                raise LawError(f"branches[{i}].prob: must be positive")
            if len(b.weights) == 0:
                raise LawError(f"branches[{i}].weights: each branch needs at least one child")
            if any(w <= 0 for w in b.weights):
                raise LawError(f"branches[{i}].weights: weights must be positive")
        total = sum(b.prob for b in self.branches)
        if abs(float(total) - 1.0) > 1e-12:
            raise LawError(f"branches.prob: probabilities sum to {float(total)!r}, not 1")
        object.__setattr__(self, "_arrays", self._build_arrays())

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ReproductionLaw":
        try:
            raw = d["branches"]
        except (KeyError, TypeError):
            raise LawError("branches: missing") from None
        branches = []
        for i, b in enumerate(raw):
            try:
                prob = _exact(b["prob"])
                weights = tuple(_exact(w) for w in b["weights"])
            except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
                raise LawError(f"branches[{i}]: {exc}") from None
            branches.append(Branch(prob, weights))
        return cls(tuple(branches), name=d.get("name", name))

    @classmethod
    def from_json(cls, path) -> "ReproductionLaw":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LawError(f"law file {path}: {exc}") from None
        return cls.from_dict(d, name=path.stem)

    @classmethod
    def simple(cls, *branches, name=""):
        """``ReproductionLaw.simple((0.5, [1.25]), (0.5, [0.25, 0.25, 0.25]))``"""
        return cls(tuple(Branch(_exact(str(p)), tuple(_exact(str(w)) for w in ws))
                         for p, ws in branches), name=name)

    def to_dict(self) -> dict:
        return {"branches": [{"prob": str(b.prob) if b.prob.denominator != 1 else str(b.prob.numerator),
                              "weights": [_fmt(w) for w in b.weights]} for b in self.branches]}

    def _build_arrays(self):
        probs = np.array([float(b.prob) for b in self.branches])
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        starts = np.zeros(len(self.branches) + 1, dtype=np.int64)
        starts[1:] = np.cumsum([len(b.weights) for b in self.branches])
        weights = np.array([float(w) for b in self.branches for w in b.weights])
        disp = -np.log(weights)
        return cdf, starts, weights, disp

    @property
    def arrays(self):
        """(branch cdf, branch offsets, flat weights, flat displacements) for the kernels."""
        return self._arrays

    @property
    def probs(self) -> np.ndarray:
        return np.array([float(b.prob) for b in self.branches])

    @property
    def max_children(self) -> int:
        return max(len(b.weights) for b in self.branches)

    def atoms(self):
        """Flat list of (branch prob, weight) pairs, one per child slot."""
        return [(float(b.prob), float(w)) for b in self.branches for w in b.weights]


def _fmt(w: Fraction) -> str:
    if w.denominator == 1:
        return str(w.numerator)
    f = float(w)
    return repr(f) if Fraction(repr(f)) == w else str(w)


def load_reference(name: str) -> ReproductionLaw:
    """Shipped reference laws: ``"A"``, ``"B"`` or ``"C"``."""
    fname = f"env_{name.lower()}.json"
    with resources.files("btwalk.data").joinpath(fname).open() as fh:
        return ReproductionLaw.from_dict(json.load(fh), name=f"ENV-{name.upper()}")


def psi(law: ReproductionLaw, t: float) -> float:
    """Laplace transform ``sum_b p_b sum_j A_{b,j}^t``."""
    _, starts, weights, _ = law.arrays
    probs = law.probs
    per_branch = np.add.reduceat(weights ** t, starts[:-1])
    return float(probs @ per_branch)


def psi_exact(law: ReproductionLaw, t: int) -> Fraction:
    """psi at an integer point, in exact rationals."""
    if int(t) != t:
        raise ValueError("exact psi needs an integer t")
    t = int(t)
    return sum((b.prob * sum(w ** t for w in b.weights) for b in law.branches), Fraction(0))


def dpsi(law: ReproductionLaw, t: float) -> float:
    """psi'(t) = sum_b p_b sum_j A^t ln A."""
    _, starts, weights, disp = law.arrays
    per_branch = np.add.reduceat(-disp * weights ** t, starts[:-1])
    return float(law.probs @ per_branch)


INFINITE = math.inf


@dataclass(frozen=True)
class KappaResult:
    value: float
    bracket: tuple[float, float]
    residual: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def solve_kappa(law: ReproductionLaw, t_max: float = 50.0, tol: float = 1e-13,
                grid: int = 400) -> KappaResult:
    """Second root of psi(t) = 1 on (1, t_max], or INFINITE."""
    ts = 1.0 + (t_max - 1.0) * np.linspace(0.0, 1.0, grid + 1)[1:] ** 2
    vals = np.array([psi(law, t) for t in ts])
    below = vals < 1.0
    if not below.any():
        raise NoRootBracket("psi never drops below 1 on the probe grid: psi'(1) < 0 fails numerically")
    first_below = int(np.argmax(below))
    after = np.nonzero(~below[first_below:])[0]
    if after.size == 0:
        if dpsi(law, t_max) < 0:
            return KappaResult(INFINITE, (float(ts[first_below]), float(t_max)), float("nan"))
        raise NoRootBracket(f"psi < 1 on the grid but increasing at t_max={t_max:g}; raise t_max")
    hi_i = first_below + int(after[0])
    lo, hi = float(ts[hi_i - 1]), float(ts[hi_i])
    if vals[hi_i] == 1.0:
        root = hi
    else:
        root = brentq(lambda t: psi(law, t) - 1.0, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps,
                      maxiter=500)
    return KappaResult(float(root), (lo, hi), abs(psi(law, root) - 1.0))


def nonlattice_check(law: ReproductionLaw, max_den: int = 10**6, rtol: float = 1e-13):
    """Heuristic: True when two displacement values have an irrational-looking ratio."""
    vals = sorted({round(float(d), 15) for d in law.arrays[3] if abs(d) > 1e-15})
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            r = vals[j] / vals[i]
            approx = Fraction(r).limit_denominator(max_den)
            if abs(r - float(approx)) > rtol * max(1.0, abs(r)):
                return True
    return False


@dataclass
class ConditionRow:
    name: str
    ok: bool
    detail: str
    fatal: bool = True


def validate_law(law: ReproductionLaw, t_max: float = 50.0):
    """Condition table for a law; returns (rows, KappaResult or None)."""
    rows = []
    p0 = psi(law, 0.0)
    rows.append(ConditionRow("psi(0) > 1 (supercritical)", p0 > 1, f"psi(0) = {p0:.12g}"))
    p1 = psi_exact(law, 1)
    ok1 = abs(float(p1) - 1.0) <= 1e-9
    rows.append(ConditionRow("psi(1) = 1", ok1, f"psi(1) = {p1} ({float(p1):.15g})"))
    d1 = dpsi(law, 1.0)
    rows.append(ConditionRow("psi'(1) < 0", d1 < 0, f"psi'(1) = {d1:.12g}"))
    kap = None
    if ok1 and d1 < 0:
        try:
            kap = solve_kappa(law, t_max=t_max)
            if kap.finite:
                detail = f"kappa = {kap.value:.12g}, |psi(kappa)-1| = {kap.residual:.2e}"
            else:
                detail = f"kappa = inf (psi < 1 on (1, {t_max:g}])"
            rows.append(ConditionRow("kappa: psi(kappa)=1 or psi<1 on (1,inf)", True, detail))
        except NoRootBracket as exc:
            rows.append(ConditionRow("kappa: psi(kappa)=1 or psi<1 on (1,inf)", False, str(exc)))
    else:
        rows.append(ConditionRow("kappa: psi(kappa)=1 or psi<1 on (1,inf)", False,
                                 "skipped: psi(1)=1 and psi'(1)<0 required"))
    nl = nonlattice_check(law)
    rows.append(ConditionRow("non-lattice support (heuristic)", nl,
                             "irrational displacement ratio found" if nl
                             else "all displacement ratios look rational", fatal=False))
    rows.append(ConditionRow("moment condition", True, "finite support: all moments finite"))
    return rows, kap


def check_law(law: ReproductionLaw):
    """Raise LawError naming the first violated fatal condition; warn on lattice."""
    rows, kap = validate_law(law)
    for row in rows:
        if not row.ok and row.fatal:
            raise LawError(f"{row.name}: {row.detail}")
        if not row.ok:
            warnings.warn(f"{row.name}: {row.detail}", stacklevel=2)
    return kap
