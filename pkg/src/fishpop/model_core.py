"""Domain types, coefficient fields, movement matrix, and data validation.

The population model lives on the closed box [0,T] x [0,A] x [0,L]
(time, age, length) with N discrete geographic regions.  Every rate entering
the balance law (growth, dispersion, mortalities, movements, weighting) is a
scalar field over (t, a, l).  Two concrete field representations are
supported:

* ``ExpressionField`` -- a closed-form expression in ``t``, ``a``, ``l``
  drawn from a deliberately small grammar (literals, the three variables,
  ``+ - * /``, ``exp``, ``sin``, ``cos``, ``min``, ``max``,
  ``indicator(x, lo, hi)``).  Expressions are parsed once into a tiny AST
  that evaluates on numpy arrays and knows how to differentiate itself
  (needed by the manufactured-solution machinery).
* ``TableField`` -- values on a rectilinear lattice over any subset of the
  three axes, evaluated by multilinear interpolation and clamped to the
  lattice hull outside it.

Model assumptions on the data (nonnegative rates, dispersion bounded away
from zero, finite values) are almost-everywhere statements in the continuous
model; they are undecidable from finitely many samples, so
``validate_coefficients`` checks them on the simulation lattice and says so
in its report.
"""

from __future__ import annotations

import ast as _pyast
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ExpressionError

__all__ = [
    "DomainBounds",
    "CoefficientField",
    "ExpressionField",
    "TableField",
    "CoefficientSet",
    "ValidationReport",
    "Violation",
    "constant_field",
    "parse_expression",
    "evaluate_field",
    "movement_matrix_at",
    "validate_coefficients",
]


# ---------------------------------------------------------------------------
# Expression grammar
# ---------------------------------------------------------------------------

_VARIABLES = ("t", "a", "l")


class Expr:
    """Node of the expression AST.  Subclasses are immutable."""

    def __call__(self, t, a, l):
        raise NotImplementedError

    def diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def variables(self) -> frozenset:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def __call__(self, t, a, l):
        return self.value

    def diff(self, var):
        return Const(0.0)

    def variables(self):
        return frozenset()

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def __call__(self, t, a, l):
        return {"t": t, "a": a, "l": l}[self.name]

    def diff(self, var):
        return Const(1.0 if var == self.name else 0.0)

    def variables(self):
        return frozenset((self.name,))

    def __str__(self):
        return self.name


def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return True if value is None else e.value == value


def add(x: Expr, y: Expr) -> Expr:
    if _is_const(x) and _is_const(y):
        return Const(x.value + y.value)
    if _is_const(x, 0.0):
        return y
    if _is_const(y, 0.0):
        return x
    return BinOp("+", x, y)


def sub(x: Expr, y: Expr) -> Expr:
    if _is_const(x) and _is_const(y):
        return Const(x.value - y.value)
    if _is_const(y, 0.0):
        return x
    return BinOp("-", x, y)


def mul(x: Expr, y: Expr) -> Expr:
    if _is_const(x) and _is_const(y):
        return Const(x.value * y.value)
    if _is_const(x, 0.0) or _is_const(y, 0.0):
        return Const(0.0)
    if _is_const(x, 1.0):
        return y
    if _is_const(y, 1.0):
        return x
    return BinOp("*", x, y)


def div(x: Expr, y: Expr) -> Expr:
    if _is_const(x, 0.0):
        return Const(0.0)
    if _is_const(y, 1.0):
        return x
    return BinOp("/", x, y)


def neg(x: Expr) -> Expr:
    if _is_const(x):
        return Const(-x.value)
    return sub(Const(0.0), x)


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def __call__(self, t, a, l):
        x = self.left(t, a, l)
        y = self.right(t, a, l)
        if self.op == "+":
            return np.add(x, y)
        if self.op == "-":
            return np.subtract(x, y)
        if self.op == "*":
            return np.multiply(x, y)
        return np.divide(x, y)

    def diff(self, var):
        fx, gx = self.left, self.right
        df, dg = fx.diff(var), gx.diff(var)
        if self.op == "+":
            return add(df, dg)
        if self.op == "-":
            return sub(df, dg)
        if self.op == "*":
            return add(mul(df, gx), mul(fx, dg))
        # quotient rule
        return div(sub(mul(df, gx), mul(fx, dg)), mul(gx, gx))

    def variables(self):
        return self.left.variables() | self.right.variables()

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


_SMOOTH_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}
_FUNC_ARITY = {"exp": 1, "sin": 1, "cos": 1, "min": 2, "max": 2, "indicator": 3}


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple

    def __call__(self, t, a, l):
        vals = [arg(t, a, l) for arg in self.args]
        if self.func in _SMOOTH_FUNCS:
            return _SMOOTH_FUNCS[self.func](vals[0])
        if self.func == "min":
            return np.minimum(vals[0], vals[1])
        if self.func == "max":
            return np.maximum(vals[0], vals[1])
        # indicator(x, lo, hi): 1 where lo <= x <= hi, else 0
        x, lo, hi = vals
        return np.where((np.asarray(x) >= lo) & (np.asarray(x) <= hi), 1.0, 0.0)

    def diff(self, var):
        if self.func not in _SMOOTH_FUNCS:
            raise ExpressionError(
                f"'{self.func}' is not differentiable under the expression grammar"
            )
        inner = self.args[0]
        dinner = inner.diff(var)
        if self.func == "exp":
            return mul(Call("exp", (inner,)), dinner)
        if self.func == "sin":
            return mul(Call("cos", (inner,)), dinner)
        return mul(neg(Call("sin", (inner,))), dinner)

    def variables(self):
        out = frozenset()
        for arg in self.args:
            out |= arg.variables()
        return out

    def __str__(self):
        return f"{self.func}({', '.join(str(a) for a in self.args)})"


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into an expression AST, rejecting anything outside the
    grammar (variables t/a/l, numeric literals, + - * /, unary minus, and the
    calls exp/sin/cos/min/max/indicator)."""
    try:
        tree = _pyast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"malformed expression {text!r}: {exc.msg}") from exc
    return _convert(tree.body, text)


def _convert(node, text: str) -> Expr:
    if isinstance(node, _pyast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric literal in {text!r}")
        return Const(float(node.value))
    if isinstance(node, _pyast.Name):
        if node.id not in _VARIABLES:
            raise ExpressionError(
                f"unknown variable {node.id!r} in {text!r} (only t, a, l)"
            )
        return Var(node.id)
    if isinstance(node, _pyast.UnaryOp):
        operand = _convert(node.operand, text)
        if isinstance(node.op, _pyast.USub):
            return neg(operand)
        if isinstance(node.op, _pyast.UAdd):
            return operand
        raise ExpressionError(f"unsupported unary operator in {text!r}")
    if isinstance(node, _pyast.BinOp):
        ops = {_pyast.Add: "+", _pyast.Sub: "-", _pyast.Mult: "*", _pyast.Div: "/"}
        op = ops.get(type(node.op))
        if op is None:
            raise ExpressionError(
                f"unsupported operator in {text!r} (only + - * / are allowed)"
            )
        left, right = _convert(node.left, text), _convert(node.right, text)
        return {"+": add, "-": sub, "*": mul, "/": div}[op](left, right)
    if isinstance(node, _pyast.Call):
        if not isinstance(node.func, _pyast.Name) or node.func.id not in _FUNC_ARITY:
            raise ExpressionError(f"unsupported function call in {text!r}")
        name = node.func.id
        if node.keywords or len(node.args) != _FUNC_ARITY[name]:
            raise ExpressionError(
                f"{name}() takes exactly {_FUNC_ARITY[name]} positional arguments"
            )
        return Call(name, tuple(_convert(arg, text) for arg in node.args))
    raise ExpressionError(f"unsupported syntax in {text!r}")


# ---------------------------------------------------------------------------
# Coefficient fields
# ---------------------------------------------------------------------------


class CoefficientField:
    """A scalar field over (t, a, l).  Evaluation is pure and deterministic:
    identical inputs give bit-identical outputs."""

    name: str = ""
    units: str = ""

    def __call__(self, t, a, l):
        raise NotImplementedError


@dataclass(frozen=True)
class ExpressionField(CoefficientField):
    """Closed-form field defined by a grammar expression."""

    expr: Expr
    name: str = ""
    units: str = ""

    @classmethod
    def parse(cls, text: str, name: str = "", units: str = "") -> "ExpressionField":
        return cls(parse_expression(text), name=name, units=units)

    def __call__(self, t, a, l):
        return np.asarray(self.expr(np.asarray(t, dtype=float),
                                    np.asarray(a, dtype=float),
                                    np.asarray(l, dtype=float)), dtype=float)

    def variables(self):
        return self.expr.variables()

    def __str__(self):
        return str(self.expr)


def constant_field(value: float, name: str = "", units: str = "") -> ExpressionField:
    return ExpressionField(Const(float(value)), name=name, units=units)


@dataclass(frozen=True, eq=False)
class TableField(CoefficientField):
    """Lattice table over a subset of the (t, a, l) axes with multilinear
    interpolation.

    ``dims`` names the axes present (in t, a, l order); the field is constant
    along absent axes.  Queries outside the lattice hull are clamped to the
    nearest face, so the field is defined on the whole closed domain.
    """

    dims: tuple
    axes: tuple
    values: np.ndarray
    name: str = ""
    units: str = ""
    source: str = ""

    def __post_init__(self):
        if len(self.dims) != len(self.axes):
            raise ValueError("dims and axes length mismatch")
        for d in self.dims:
            if d not in _VARIABLES:
                raise ValueError(f"unknown table dimension {d!r}")
        shape = tuple(len(ax) for ax in self.axes)
        if self.values.shape != shape:
            raise ValueError(
                f"table values shape {self.values.shape} inconsistent with "
                f"declared lattice {shape}"
            )
        for ax in self.axes:
            if len(ax) == 0 or (len(ax) > 1 and np.any(np.diff(ax) <= 0)):
                raise ValueError("table axes must be strictly increasing")

    def variables(self):
        return frozenset(self.dims)

    def __call__(self, t, a, l):
        coords = {"t": t, "a": a, "l": l}
        pts = [np.asarray(coords[d], dtype=float) for d in self.dims]
        if not pts:
            shape = np.broadcast(np.asarray(t), np.asarray(a), np.asarray(l)).shape
            return np.full(shape, float(self.values))
        pts = np.broadcast_arrays(*pts, *(np.asarray(coords[v], dtype=float)
                                          for v in _VARIABLES))[: len(self.dims)]
        # per-axis cell index and linear weight, clamped to the hull
        idx, wgt = [], []
        for ax, x in zip(self.axes, pts):
            if len(ax) == 1:
                idx.append(np.zeros(x.shape, dtype=np.intp))
                wgt.append(np.zeros(x.shape))
                continue
            i = np.clip(np.searchsorted(ax, x, side="right") - 1, 0, len(ax) - 2)
            w = (x - ax[i]) / (ax[i + 1] - ax[i])
            idx.append(i)
            wgt.append(np.clip(w, 0.0, 1.0))
        out = np.zeros(idx[0].shape)
        ndim = len(self.dims)
        for corner in range(1 << ndim):
            coef = np.ones(idx[0].shape)
            sel = []
            for d in range(ndim):
                hi = (corner >> d) & 1
                if len(self.axes[d]) == 1:
                    if hi:
                        coef = None
                        break
                    sel.append(idx[d])
                    continue
                coef = coef * (wgt[d] if hi else (1.0 - wgt[d]))
                sel.append(idx[d] + hi)
            if coef is None:
                continue
            out = out + coef * self.values[tuple(sel)]
        return out


def evaluate_field(field_: CoefficientField, t, a, l, bounds: "DomainBounds | None" = None):
    """Evaluate a field at (t, a, l), optionally rejecting points outside the
    closed domain box."""
    if bounds is not None:
        t_, a_, l_ = np.asarray(t, float), np.asarray(a, float), np.asarray(l, float)
        if (np.any(t_ < 0) or np.any(t_ > bounds.max_time)
                or np.any(a_ < 0) or np.any(a_ > bounds.max_age)
                or np.any(l_ < 0) or np.any(l_ > bounds.max_length)):
            raise ValueError("evaluation point outside the closed domain")
    return field_(t, a, l)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainBounds:
    """Extent of the simulation box and the number of regions."""

    max_time: float
    max_age: float
    max_length: float
    n_regions: int

    def __post_init__(self):
        if not (self.max_time > 0 and self.max_age > 0 and self.max_length > 0):
            raise ValueError("domain extents must be positive")
        if self.n_regions < 1:
            raise ValueError("need at least one region")


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """All coefficient fields and scalar parameters of one model instance.

    Per region i: growth rate, dispersion rate, natural and fishing
    mortality, biomass weighting (fields over (t,a,l)), the recruitment
    modulation (a field over t only) and the recruitment half-saturation
    constant.  Movement rates are stored sparsely: a missing (i, j) key means
    the regions are not adjacent, i.e. the rate is identically zero.

    Total mortality is the sum of natural and fishing mortality and is always
    sampled as that sum (``sample_total_mortality``), never stored.
    """

    growth: tuple
    dispersion: tuple
    natural_mortality: tuple
    fishing_mortality: tuple
    weighting: tuple
    recruitment_modulation: tuple
    half_saturation: tuple
    movement: Mapping
    recruit_length: float
    maturity_length: float

    def __post_init__(self):
        n = len(self.growth)
        for attr in ("dispersion", "natural_mortality", "fishing_mortality",
                     "weighting", "recruitment_modulation", "half_saturation"):
            if len(getattr(self, attr)) != n:
                raise ValueError(f"{attr} must have one entry per region")
        if not (0.0 < self.recruit_length < self.maturity_length):
            raise ValueError("length thresholds must satisfy 0 < recruit < maturity")
        for th in self.half_saturation:
            if not th > 0:
                raise ValueError("half-saturation constants must be positive")
        for (i, j) in self.movement:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bad movement key ({i}, {j})")
        for i, psi in enumerate(self.recruitment_modulation):
            vars_ = getattr(psi, "variables", None)
            if vars_ is not None and not vars_() <= {"t"}:
                raise ValueError(
                    f"recruitment modulation of region {i} must depend on t only"
                )

    @property
    def n_regions(self) -> int:
        return len(self.growth)

    def movement_rate(self, i: int, j: int) -> CoefficientField | None:
        """Rate of movement from region i to region j, or None if the regions
        are not adjacent."""
        return self.movement.get((i, j))


def sample_total_mortality(coeffs: CoefficientSet, region: int, t, a, l):
    """Sum of natural and fishing mortality at the given points."""
    return (np.asarray(coeffs.natural_mortality[region](t, a, l), float)
            + np.asarray(coeffs.fishing_mortality[region](t, a, l), float))


def movement_matrix_at(coeffs: CoefficientSet, t: float, a: float, l: float) -> np.ndarray:
    """N x N movement matrix at one point.

    Entry (i, j), i != j, is the rate from region j into region i; each
    diagonal entry is minus the total outflow rate of its region, so every
    column sums to zero exactly (the diagonal is built from the same floats
    as the off-diagonal column it balances).
    """
    n = coeffs.n_regions
    mat = np.zeros((n, n))
    for (src, dst), rate in coeffs.movement.items():
        mat[dst, src] = float(rate(t, a, l))
    mat[np.diag_indices(n)] = 0.0
    mat[np.diag_indices(n)] = -mat.sum(axis=0)
    return mat


def sample_movement_matrices(coeffs: CoefficientSet, t, a, l) -> np.ndarray:
    """Movement matrices over broadcast (t, a, l) arrays, shape (..., N, N).

    Column sums are exactly zero by the same construction as
    ``movement_matrix_at``.
    """
    n = coeffs.n_regions
    shape = np.broadcast(np.asarray(t, float), np.asarray(a, float),
                         np.asarray(l, float)).shape
    mats = np.zeros(shape + (n, n))
    for (src, dst), rate in coeffs.movement.items():
        mats[..., dst, src] = rate(t, a, l)
    diag = -mats.sum(axis=-2)
    ii = np.arange(n)
    mats[..., ii, ii] = diag
    return mats


# ---------------------------------------------------------------------------
# Validation of the model assumptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One violated assumption: which condition, which field, and the lattice
    point where the violation is worst."""

    assumption: str
    field_name: str
    point: tuple | None
    value: float

    def __str__(self):
        where = "" if self.point is None else f" at (t,a,l)={self.point}"
        return f"{self.assumption}: {self.field_name} = {self.value:g}{where}"


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking the model assumptions on a sampling lattice.

    ``dispersion_floor`` is the lattice-wide minimum of all dispersion
    fields; a positive value is the ellipticity margin the solver relies on.
    """

    violations: tuple
    dispersion_floor: float
    note: str = ("assumptions checked on the simulation lattice, "
                 "not almost everywhere")

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        head = "ok" if self.ok else f"{len(self.violations)} violation(s)"
        lines = [f"validation: {head} (dispersion floor {self.dispersion_floor:g})",
                 f"  [{self.note}]"]
        lines += [f"  - {v}" for v in self.violations]
        return "\n".join(lines)


def _worst_point(values: np.ndarray, tt, aa, ll, minimize: bool) -> tuple:
    flat = np.argmin(values) if minimize else np.argmax(values)
    i = np.unravel_index(flat, values.shape)
    t = np.broadcast_to(tt, values.shape)[i]
    a = np.broadcast_to(aa, values.shape)[i]
    l = np.broadcast_to(ll, values.shape)[i]
    return (float(t), float(a), float(l))


def validate_coefficients(coeffs: CoefficientSet, bounds: DomainBounds, grid,
                          initial: Sequence[CoefficientField] | None = None
                          ) -> ValidationReport:
    """Check the model's data assumptions on the grid's node lattice.

    Checked per region: dispersion bounded below by a positive constant
    (the inferred floor is the lattice minimum over all regions), growth
    finite, natural/fishing mortality nonnegative, movement rates
    nonnegative, weighting nonnegative, recruitment modulation nonnegative,
    optional initial distributions nonnegative, every sampled value finite,
    and maturity length strictly below the length extent.  Violations are
    data, not exceptions; a field that cannot be evaluated does raise.
    """
    if bounds.n_regions != coeffs.n_regions:
        raise ValueError("bounds/coefficients region count mismatch")
    tt = grid.t_nodes[:, None, None]
    aa = grid.a_nodes[None, :, None]
    ll = grid.l_nodes[None, None, :]
    violations: list[Violation] = []

    def check(field_, fname, condition):
        vals = np.asarray(field_(tt, aa, ll), dtype=float)
        vals = np.broadcast_to(vals, (len(grid.t_nodes), len(grid.a_nodes),
                                      len(grid.l_nodes)))
        if not np.all(np.isfinite(vals)):
            bad = ~np.isfinite(vals)
            masked = np.where(bad, np.inf, -np.inf)
            violations.append(Violation(
                "bounded (finite at every sample)", fname,
                _worst_point(masked, tt, aa, ll, minimize=False),
                float(vals[bad][0])))
            vals = np.where(bad, 0.0, vals)
        lo = float(vals.min())
        if condition == "nonnegative" and lo < 0.0:
            violations.append(Violation(
                "nonnegative", fname,
                _worst_point(vals, tt, aa, ll, minimize=True), lo))
        return lo

    floor = np.inf
    for i in range(coeffs.n_regions):
        lo = check(coeffs.dispersion[i], f"dispersion[{i}]", "any")
        floor = min(floor, lo)
        check(coeffs.growth[i], f"growth[{i}]", "any")
        check(coeffs.natural_mortality[i], f"natural_mortality[{i}]", "nonnegative")
        check(coeffs.fishing_mortality[i], f"fishing_mortality[{i}]", "nonnegative")
        check(coeffs.weighting[i], f"weighting[{i}]", "nonnegative")
        check(coeffs.recruitment_modulation[i],
              f"recruitment_modulation[{i}]", "nonnegative")
    if not floor > 0.0:
        worst = None
        for i in range(coeffs.n_regions):
            vals = np.asarray(coeffs.dispersion[i](tt, aa, ll), float)
            vals = np.broadcast_to(vals, (len(grid.t_nodes), len(grid.a_nodes),
                                          len(grid.l_nodes)))
            lo = float(np.where(np.isfinite(vals), vals, np.inf).min())
            if lo == floor:
                worst = (i, _worst_point(np.where(np.isfinite(vals), vals, np.inf),
                                         tt, aa, ll, minimize=True))
                break
        violations.append(Violation(
            "dispersion must have a positive lower bound (d >= d0 > 0)",
            f"dispersion[{worst[0]}]" if worst else "dispersion",
            worst[1] if worst else None, floor))
    for (src, dst), rate in sorted(coeffs.movement.items()):
        check(rate, f"movement[{src}->{dst}]", "nonnegative")
    if initial is not None:
        t0 = np.zeros((1, 1, 1))
        for i, p0 in enumerate(initial):
            vals = np.asarray(p0(t0, aa, ll), float)
            vals = np.broadcast_to(vals, (1, len(grid.a_nodes), len(grid.l_nodes)))
            if not np.all(np.isfinite(vals)):
                violations.append(Violation(
                    "bounded (finite at every sample)", f"initial[{i}]", None,
                    float("nan")))
                continue
            lo = float(vals.min())
            if lo < 0.0:
                violations.append(Violation(
                    "nonnegative", f"initial[{i}]",
                    _worst_point(vals, t0, aa, ll, minimize=True), lo))
    if not coeffs.maturity_length < bounds.max_length:
        violations.append(Violation(
            "maturity length must lie strictly inside the length range",
            "maturity_length", None, coeffs.maturity_length))
    return ValidationReport(tuple(violations), float(floor))
