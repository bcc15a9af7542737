"""Time integration of the balance law along characteristics.

Because the transport part of the balance law is ``d/ds`` along the
characteristic lines {(t0+s, a0+s)}, the grid locks the time step to the
age step (dt = da): transport in (t, a) is then an exact index shift and
introduces no numerical diffusion in age.  Within one step each cohort is
advanced by first-order Lie splitting, in this fixed order:

1. growth-dispersion in length: one backward-Euler step of the
   finite-volume discretization (centered diffusion with face-averaged
   dispersion, first-order upwind growth flux), solved by Thomas
   elimination;
2. mortality: exact pointwise decay ``exp(-(mu+f) dt)``;
3. migration across regions: backward Euler per (age, length) cell with
   the movement matrix, which conserves the region sum exactly because
   the matrix columns sum to zero;
4. age shift: cohort j lands at j+1, the oldest cohort leaves the domain
   and is recorded;
5. the age-zero row is filled from the recruitment law (lagged biomass by
   default, optional fixed-point coupling).

Every implicit system is an M-matrix, and the elimination routines below
only ever add products of like-signed terms, so nonnegative input profiles
produce nonnegative outputs exactly in floating point -- not merely up to
roundoff.  That makes the scheme's positivity a hard guarantee rather than
a tolerance statement.

Two boundary closures in length are available.  ``paper-neumann`` (the
default) imposes a vanishing length-derivative at both walls: the diffusive
wall flux is zero and the growth flux is upwinded against an empty
exterior, so walls may leak mass outward when the growth rate pushes
through them but never create mass.  ``zero-flux`` cancels the total flux
(dispersion against growth) at the walls and conserves the length integral
exactly; the particle oracle and the mass-balance checks use this mode.

Reported per-region totals weigh every age node by the full age step
(node j stands for the cohort aged in [a_j, a_j + da)), so the discrete
mass balance

    total(t_{k+1}) - total(t_k) = recruited(k+1) - exited(k+1)        (*)

telescopes exactly when mortality is off and the walls are zero-flux.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TYPE_CHECKING

import numpy as np

from .errors import DataValidationError, ExpressionError, GridError, NumericalError
from .model_core import (
    CoefficientSet,
    DomainBounds,
    Expr,
    ExpressionField,
    add,
    mul,
    neg,
    sub,
    sample_movement_matrices,
    sample_total_mortality,
    validate_coefficients,
)
from .recruitment import (
    RecruitmentParams,
    recruitment_row,
    spawning_biomass,
    trapezoid_weights,
)

if TYPE_CHECKING:  # pragma: no cover
    from .cli_io import Scenario

__all__ = [
    "Grid",
    "State",
    "SolverOptions",
    "SourceHook",
    "StepRecord",
    "SummarySeries",
    "Trajectory",
    "build_grid",
    "advection_diffusion_substep",
    "mortality_substep",
    "migration_substep",
    "step",
    "run",
    "manufactured_source",
]

BC_MODES = ("paper-neumann", "zero-flux")
COUPLING_MODES = ("lagged", "fixed-point")


# ---------------------------------------------------------------------------
# Grid and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid:
    """Node lattice with the characteristic alignment dt = da."""

    n_steps: int
    n_age: int
    n_length: int
    dt: float
    dl: float
    t_nodes: np.ndarray
    a_nodes: np.ndarray
    l_nodes: np.ndarray

    @property
    def da(self) -> float:
        return self.dt


def build_grid(bounds: DomainBounds, n_steps: int, n_length: int) -> Grid:
    """Build the simulation grid from cell counts in time and length.

    The age step equals the time step, so the age extent must be an integer
    multiple of T/n_steps (checked to tiny relative tolerance); otherwise the
    age axis would not tile and the characteristic shift would break.
    """
    if n_steps < 1:
        raise GridError("need at least one time step")
    if n_length < 3:
        raise GridError("need at least three length cells")
    dt = bounds.max_time / n_steps
    na_exact = bounds.max_age * n_steps / bounds.max_time
    n_age = int(round(na_exact))
    if n_age < 1 or abs(na_exact - n_age) > 1e-12 * max(1.0, abs(na_exact)):
        raise GridError(
            f"age extent {bounds.max_age} is not an integer multiple of the "
            f"time step {dt} (got {na_exact} age cells)")
    dl = bounds.max_length / n_length
    return Grid(
        n_steps=n_steps, n_age=n_age, n_length=n_length, dt=dt, dl=dl,
        t_nodes=np.arange(n_steps + 1) * dt,
        a_nodes=np.arange(n_age + 1) * dt,
        l_nodes=np.linspace(0.0, bounds.max_length, n_length + 1),
    )


@dataclass(eq=False)
class State:
    """Density values on the node lattice at one time level,
    shape (regions, age nodes, length nodes)."""

    values: np.ndarray
    time_index: int

    def copy(self) -> "State":
        return State(self.values.copy(), self.time_index)


@dataclass(frozen=True)
class SolverOptions:
    bc_mode: str = "paper-neumann"
    coupling: str = "lagged"
    fixed_point_tol: float = 1e-10
    fixed_point_max_iter: int = 50

    def __post_init__(self):
        if self.bc_mode not in BC_MODES:
            raise ValueError(f"bc_mode must be one of {BC_MODES}")
        if self.coupling not in COUPLING_MODES:
            raise ValueError(f"coupling must be one of {COUPLING_MODES}")


@dataclass(frozen=True)
class SourceHook:
    """Optional forcing attached to a run.

    ``sources`` adds per-region terms s_i(t, a, l) to the balance law
    (explicitly, after the implicit substeps).  ``boundary_values`` replaces
    the recruitment fill with prescribed age-zero data b_i(t, l), and
    ``initial_values`` replaces the scenario's initial distribution; both are
    what a manufactured-solution run needs to pin the exact solution on every
    boundary.  All entries are callables of (t, a, l).
    """

    sources: tuple | None = None
    boundary_values: tuple | None = None
    initial_values: tuple | None = None


@dataclass(frozen=True)
class StepRecord:
    """Per-region bookkeeping of one step: abundance that left through the
    maximum age and abundance recruited into the new age-zero row."""

    exit_abundance: np.ndarray
    recruit_abundance: np.ndarray


@dataclass(frozen=True, eq=False)
class SummarySeries:
    """Per-time-node derived outputs; every array has n_steps + 1 rows.

    ``totals`` uses the age-slab convention of (*) in the module docstring;
    ``recruitment[k]`` and ``exits[k]`` are the abundances recruited into,
    and retired from, the domain during step k-1 -> k (zero at k = 0).
    """

    t: np.ndarray
    biomass: np.ndarray
    recruitment: np.ndarray
    totals: np.ndarray
    exits: np.ndarray


@dataclass(eq=False)
class Trajectory:
    summary: SummarySeries
    snapshots: list
    grid: Grid


# ---------------------------------------------------------------------------
# Linear-algebra cores
#
# Hand-rolled on purpose: for M-matrix systems, elimination without pivoting
# only adds like-signed quantities, so nonnegativity of the solution for
# nonnegative right-hand sides is exact in floating point.  Both routines are
# batched over the leading axis and checked against dense solves in the test
# suite.
# ---------------------------------------------------------------------------


def _thomas(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
            rhs: np.ndarray) -> np.ndarray:
    """Solve batched tridiagonal systems; arrays are (batch, n)."""
    n = rhs.shape[1]
    c = diag.copy()
    d = rhs.copy()
    for m in range(1, n):
        piv = c[:, m - 1]
        if np.any(piv <= 0.0):
            raise NumericalError("tridiagonal system lost positive pivots")
        w = lower[:, m] / piv
        c[:, m] = c[:, m] - w * upper[:, m - 1]
        d[:, m] = d[:, m] - w * d[:, m - 1]
    if np.any(c[:, -1] <= 0.0):
        raise NumericalError("tridiagonal system lost positive pivots")
    x = np.empty_like(d)
    x[:, -1] = d[:, -1] / c[:, -1]
    for m in range(n - 2, -1, -1):
        x[:, m] = (d[:, m] - upper[:, m] * x[:, m + 1]) / c[:, m]
    return x


def _solve_mmatrix_systems(mats: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve batched dense systems A x = b for column-dominant M-matrices A;
    mats is (batch, n, n), rhs (batch, n)."""
    a = np.array(mats, dtype=float)
    b = np.array(rhs, dtype=float)
    n = a.shape[-1]
    for k in range(n - 1):
        piv = a[:, k, k]
        if np.any(piv <= 0.0):
            raise NumericalError("migration system lost positive pivots")
        w = a[:, k + 1:, k] / piv[:, None]
        a[:, k + 1:, k + 1:] -= w[:, :, None] * a[:, k, None, k + 1:]
        b[:, k + 1:] -= w * b[:, k, None]
    if np.any(a[:, n - 1, n - 1] <= 0.0):
        raise NumericalError("migration system lost positive pivots")
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        acc = b[:, i]
        if i < n - 1:
            acc = acc - (a[:, i, i + 1:] * x[:, i + 1:]).sum(axis=1)
        x[:, i] = acc / a[:, i, i]
    return x


def _advance_profiles(profiles: np.ndarray, disp: np.ndarray, grow: np.ndarray,
                      dl: float, dt: float, bc_mode: str) -> np.ndarray:
    """One backward-Euler growth-dispersion step for batched length profiles.

    All arrays are (batch, nodes).  Dispersion and growth are node samples;
    face values are arithmetic means.  Wall nodes own half control volumes so
    the trapezoid integral is the conserved quantity in zero-flux mode.
    """
    b, m = profiles.shape
    d_face = 0.5 * (disp[:, :-1] + disp[:, 1:])
    g_face = 0.5 * (grow[:, :-1] + grow[:, 1:])
    diffus = d_face / dl
    # outflow/inflow parts of each interior face, assembled so that the two
    # rows a face couples receive exactly negated coefficients
    cplus = np.maximum(g_face, 0.0) + diffus   # multiplies the left node
    cminus = np.minimum(g_face, 0.0) - diffus  # multiplies the right node
    diag = np.zeros((b, m))
    lower = np.zeros((b, m))
    upper = np.zeros((b, m))
    diag[:, :-1] += cplus
    upper[:, :-1] = cminus
    lower[:, 1:] = -cplus
    diag[:, 1:] += -cminus
    if bc_mode == "paper-neumann":
        # zero diffusive wall flux; growth flux upwinded against an empty
        # exterior: pure outflow, which keeps the M-matrix structure
        diag[:, 0] += np.maximum(-grow[:, 0], 0.0)
        diag[:, -1] += np.maximum(grow[:, -1], 0.0)
    elif bc_mode != "zero-flux":
        raise ValueError(f"unknown bc_mode {bc_mode!r}")
    vol = np.full(m, dl)
    vol[0] = vol[-1] = dl / 2.0
    scale = dt / vol
    return _thomas(scale * lower, 1.0 + scale * diag, scale * upper, profiles)


# ---------------------------------------------------------------------------
# Public substeps
# ---------------------------------------------------------------------------


def advection_diffusion_substep(profile: np.ndarray, coeffs: CoefficientSet,
                                grid: Grid, region: int, t: float, a: float,
                                dt: float, bc_mode: str = "paper-neumann"
                                ) -> np.ndarray:
    """Advance one region's length profile at fixed (t, a) by one implicit
    growth-dispersion step.  Nonnegative profiles map to nonnegative
    profiles for any data."""
    ll = grid.l_nodes
    disp = np.broadcast_to(np.asarray(coeffs.dispersion[region](t, a, ll), float),
                           ll.shape)
    grow = np.broadcast_to(np.asarray(coeffs.growth[region](t, a, ll), float),
                           ll.shape)
    out = _advance_profiles(np.asarray(profile, float)[None, :],
                            disp[None, :], grow[None, :], grid.dl, dt, bc_mode)
    return out[0]


def mortality_substep(profile: np.ndarray, coeffs: CoefficientSet, region: int,
                      t: float, a: float, dt: float, grid: Grid | None = None,
                      l=None) -> np.ndarray:
    """Exact decay of one length profile by the total mortality field."""
    if l is None:
        if grid is None:
            raise ValueError("need either grid or explicit length nodes")
        l = grid.l_nodes
    z = np.broadcast_to(np.asarray(sample_total_mortality(coeffs, region, t, a, l),
                                   float), np.shape(l))
    return np.asarray(profile, float) * np.exp(-z * dt)


def migration_substep(cell_vector: np.ndarray, movement_matrix: np.ndarray,
                      dt: float) -> np.ndarray:
    """Backward-Euler exchange between regions at one (a, l) cell.

    Solves (I - dt M) x = p.  The region sum is preserved to roundoff
    (columns of M sum to zero) and nonnegative inputs give nonnegative
    outputs exactly.
    """
    p = np.asarray(cell_vector, dtype=float)
    mat = np.asarray(movement_matrix, dtype=float)
    n = p.shape[-1]
    if n == 1:
        return p.copy()
    system = np.eye(n) - dt * mat
    flat = p.reshape(-1, n)
    if system.ndim == 2:
        mats = np.broadcast_to(system, (flat.shape[0], n, n))
    else:
        mats = system.reshape(-1, n, n)
    return _solve_mmatrix_systems(mats, flat).reshape(p.shape)


# ---------------------------------------------------------------------------
# Full step and run loop
# ---------------------------------------------------------------------------


def _sample_region_fields(fields, t: float, a_nodes: np.ndarray,
                          l_nodes: np.ndarray) -> np.ndarray:
    """Sample per-region fields on an (age, length) node lattice at time t;
    returns (regions, len(a_nodes), len(l_nodes))."""
    aa = a_nodes[:, None]
    ll = l_nodes[None, :]
    shape = (len(a_nodes), len(l_nodes))
    return np.stack([
        np.broadcast_to(np.asarray(f(t, aa, ll), float), shape) for f in fields
    ])


def _eval_hook(callables, t, a, l, shape):
    return np.stack([
        np.broadcast_to(np.asarray(c(t, a, l), float), shape) for c in callables
    ])


def step(state: State, coeffs: CoefficientSet, grid: Grid,
         options: SolverOptions | None = None, hooks: SourceHook | None = None,
         lagged_biomass=None) -> tuple[State, StepRecord]:
    """Advance the state one time step; returns the new state and the step's
    exit/recruitment bookkeeping.

    ``lagged_biomass`` may pass in the spawning biomass of ``state`` (it is
    recomputed when absent).  Coefficients are sampled at the step's left
    time endpoint and each cohort's departure age.
    """
    options = options or SolverOptions()
    n, n_age = state.values.shape[0], grid.n_age
    k = state.time_index
    t_k = grid.t_nodes[k]
    t_next = t_k + grid.dt
    ages = grid.a_nodes[:-1]          # departure ages of the advancing cohorts
    nl = len(grid.l_nodes)

    disp = _sample_region_fields(coeffs.dispersion, t_k, ages, grid.l_nodes)
    grow = _sample_region_fields(coeffs.growth, t_k, ages, grid.l_nodes)
    aa = ages[:, None]
    ll = grid.l_nodes[None, :]
    zed = np.stack([
        np.broadcast_to(sample_total_mortality(coeffs, i, t_k, aa, ll),
                        (n_age, nl)) for i in range(n)
    ])

    prof = state.values[:, :-1, :].reshape(n * n_age, nl)
    prof = _advance_profiles(prof, disp.reshape(n * n_age, nl),
                             grow.reshape(n * n_age, nl),
                             grid.dl, grid.dt, options.bc_mode)
    prof = prof * np.exp(-zed.reshape(n * n_age, nl) * grid.dt)
    prof = prof.reshape(n, n_age, nl)

    if n > 1 and coeffs.movement:
        mats = sample_movement_matrices(coeffs, t_k, aa, ll)  # (n_age, nl, n, n)
        systems = (np.eye(n) - grid.dt * mats).reshape(-1, n, n)
        cells = prof.transpose(1, 2, 0).reshape(-1, n)
        solved = _solve_mmatrix_systems(systems, cells)
        prof = solved.reshape(n_age, nl, n).transpose(2, 0, 1)

    if hooks is not None and hooks.sources is not None:
        prof = prof + grid.dt * _eval_hook(hooks.sources, t_k, aa, ll,
                                           (n_age, nl))

    new_values = np.empty_like(state.values)
    new_values[:, 1:, :] = prof

    wl = trapezoid_weights(grid.l_nodes)
    exit_abundance = grid.da * (state.values[:, -1, :] @ wl)

    if hooks is not None and hooks.boundary_values is not None:
        new_values[:, 0, :] = _eval_hook(hooks.boundary_values, t_next, 0.0,
                                         grid.l_nodes, (nl,))
    else:
        params = RecruitmentParams.from_coefficients(coeffs)
        if options.coupling == "lagged":
            biomass = lagged_biomass if lagged_biomass is not None else \
                spawning_biomass(state, coeffs, grid, t_k)
            row0 = recruitment_row(t_next, biomass.values, params, grid.l_nodes)
        else:
            biomass = lagged_biomass if lagged_biomass is not None else \
                spawning_biomass(state, coeffs, grid, t_k)
            row0 = recruitment_row(t_next, biomass.values, params, grid.l_nodes)
            for _ in range(options.fixed_point_max_iter):
                new_values[:, 0, :] = row0
                p_now = spawning_biomass(State(new_values, k + 1), coeffs, grid,
                                         t_next)
                row_next = recruitment_row(t_next, p_now.values, params,
                                           grid.l_nodes)
                done = np.max(np.abs(row_next - row0)) <= options.fixed_point_tol
                row0 = row_next
                if done:
                    break
        new_values[:, 0, :] = row0

    recruit_abundance = grid.da * (new_values[:, 0, :] @ wl)
    return State(new_values, k + 1), StepRecord(exit_abundance, recruit_abundance)


def _region_totals(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-region abundance with the age-slab weighting (da per age node,
    trapezoid in length)."""
    wl = trapezoid_weights(grid.l_nodes)
    return grid.da * (values @ wl).sum(axis=1)


def _snapshot_indices(snapshot_times, grid: Grid) -> set:
    out = set()
    for t in snapshot_times:
        out.add(int(np.clip(round(float(t) / grid.dt), 0, grid.n_steps)))
    return out


def run(scenario: "Scenario", hooks: SourceHook | None = None,
        on_step: Callable[[State], None] | None = None) -> Trajectory:
    """Run the full solver on a scenario and collect the summary series.

    Validates the data first (raising ``DataValidationError`` on any
    violated assumption), then loops ``step`` over the whole time range.
    Identical scenarios produce bit-identical summaries.  A non-finite state
    entry aborts the run naming the step and cell.
    """
    bounds: DomainBounds = scenario.bounds
    coeffs: CoefficientSet = scenario.coefficients
    grid = build_grid(bounds, scenario.n_steps, scenario.n_length)
    initial = (hooks.initial_values if hooks is not None
               and hooks.initial_values is not None else scenario.initial)
    report = validate_coefficients(coeffs, bounds, grid, initial=initial)
    if not report.ok:
        raise DataValidationError(str(report))
    options = SolverOptions(
        bc_mode=scenario.bc_mode, coupling=scenario.coupling,
        fixed_point_tol=scenario.fixed_point_tol,
        fixed_point_max_iter=scenario.fixed_point_max_iter)

    n = coeffs.n_regions
    aa = grid.a_nodes[:, None]
    ll = grid.l_nodes[None, :]
    values = np.stack([
        np.broadcast_to(np.asarray(f(0.0, aa, ll), float),
                        (grid.n_age + 1, grid.n_length + 1)).copy()
        for f in initial
    ])
    state = State(values, 0)

    nt = grid.n_steps
    series_t = grid.t_nodes.copy()
    biomass = np.zeros((nt + 1, n))
    recruitment = np.zeros((nt + 1, n))
    totals = np.zeros((nt + 1, n))
    exits = np.zeros((nt + 1, n))
    snapshots: list[State] = []
    snap_at = _snapshot_indices(scenario.snapshot_times, grid)

    if 0 in snap_at:
        snapshots.append(state.copy())
    for k in range(nt):
        bm = spawning_biomass(state, coeffs, grid, grid.t_nodes[k])
        biomass[k] = bm.values
        totals[k] = _region_totals(state.values, grid)
        state, record = step(state, coeffs, grid, options, hooks,
                             lagged_biomass=bm)
        exits[k + 1] = record.exit_abundance
        recruitment[k + 1] = record.recruit_abundance
        if not np.all(np.isfinite(state.values)):
            bad = np.argwhere(~np.isfinite(state.values))[0]
            raise NumericalError(
                f"non-finite density after step {k + 1} at (region, age, "
                f"length) cell {tuple(int(v) for v in bad)}")
        if state.time_index in snap_at:
            snapshots.append(state.copy())
        if on_step is not None:
            on_step(state)
    bm = spawning_biomass(state, coeffs, grid, grid.t_nodes[nt])
    biomass[nt] = bm.values
    totals[nt] = _region_totals(state.values, grid)

    summary = SummarySeries(series_t, biomass, recruitment, totals, exits)
    return Trajectory(summary=summary, snapshots=snapshots, grid=grid)


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------


def _field_expr(f, what: str) -> Expr:
    if isinstance(f, ExpressionField):
        return f.expr
    if isinstance(f, Expr):
        return f
    raise ExpressionError(
        f"manufactured sources need closed-form {what} (got {type(f).__name__})")


def manufactured_source(exact_solution: Sequence, coeffs: CoefficientSet
                        ) -> SourceHook:
    """Build the forcing that makes ``exact_solution`` solve the balance law.

    The source for region i is assembled symbolically:

        s_i = dp/dt + dp/da - d(d_i dp/dl)/dl + d(g_i p)/dl
              + (mu_i + f_i) p - (inflows - outflow) ,

    differentiating within the expression grammar.  Both the exact solution
    and every coefficient it touches must be expression fields; tables and
    the non-smooth grammar calls raise ``ExpressionError``.  The returned
    hook also pins the age-zero boundary and the initial data to the exact
    solution.
    """
    n = coeffs.n_regions
    if len(exact_solution) != n:
        raise ValueError("need one exact solution per region")
    p = [_field_expr(e, "exact solutions") for e in exact_solution]
    sources = []
    for i in range(n):
        d_expr = _field_expr(coeffs.dispersion[i], "dispersion")
        g_expr = _field_expr(coeffs.growth[i], "growth")
        z_expr = add(_field_expr(coeffs.natural_mortality[i], "mortality"),
                     _field_expr(coeffs.fishing_mortality[i], "mortality"))
        p_t = p[i].diff("t")
        p_a = p[i].diff("a")
        p_l = p[i].diff("l")
        p_ll = p_l.diff("l")
        diffusion = add(mul(d_expr.diff("l"), p_l), mul(d_expr, p_ll))
        advection = add(mul(g_expr.diff("l"), p[i]), mul(g_expr, p_l))
        s = add(add(p_t, p_a), sub(advection, diffusion))
        s = add(s, mul(z_expr, p[i]))
        for j in range(n):
            if j == i:
                continue
            inflow = coeffs.movement_rate(j, i)
            if inflow is not None:
                s = sub(s, mul(_field_expr(inflow, "movement"), p[j]))
            outflow = coeffs.movement_rate(i, j)
            if outflow is not None:
                s = add(s, mul(_field_expr(outflow, "movement"), p[i]))
        sources.append(s)
    return SourceHook(sources=tuple(sources), boundary_values=tuple(p),
                      initial_values=tuple(p))
