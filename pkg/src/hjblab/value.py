"""Monte Carlo cost and value estimation.

The value of a point (t, x) is approached from above by minimizing the
estimated cost over a family of admissible candidates: sampled open-loop
signals, the zero signal, and optionally feedback policies or recorded
per-path traces. Policies count as candidates on purpose: with nonzero
noise the best open-loop signal is strictly worse than the best adapted
control, so a family without feedback candidates stalls above the value.

All candidates at one point are evaluated on the same Brownian increments
(common random numbers), which makes candidate comparisons paired and lets
ties break deterministically toward the lowest index.
"""

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .controls import (
    ConstantSignal,
    PiecewiseConstantSignal,
    clip_box,
    project_ball,
    zero_signal,
)
from .engine import gaussian_increments, simulate_costs
from .parallel import parallel_map
from .report import PASS, FAIL, DiagnosticReport
from .seeds import stream

__all__ = [
    "MCEstimate",
    "ValueField",
    "ControlFamily",
    "FamilyValue",
    "evaluate_cost",
    "cost_samples",
    "estimate_value_family",
    "truncation_scan",
    "gradient_fd",
    "PolicyIterationConfig",
    "PolicyIterationResult",
    "policy_iteration",
    "make_policy_evaluator",
    "make_family_evaluator",
    "make_exact_evaluator",
]


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    std_error: float
    n_paths: int

    @classmethod
    def from_samples(cls, samples):
        s = np.asarray(samples, dtype=float)
        n = s.shape[0]
        se = float(s.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean=float(s.mean()), std_error=se, n_paths=n)


@dataclass
class ValueField:
    """Value estimates (and optionally gradients) on a set of (t, x) points."""

    points: list          # [(t, x array), ...]
    estimates: list       # [MCEstimate, ...]
    method_tag: str       # family_inf | policy_iteration
    gradients: Optional[list] = None

    def __post_init__(self):
        if self.method_tag not in ("family_inf", "policy_iteration"):
            raise ValueError(f"unknown method_tag '{self.method_tag}'")
        if len(self.points) != len(self.estimates):
            raise ValueError("one estimate per point required")

    def values(self):
        return np.array([e.mean for e in self.estimates])

    def to_csv(self, path):
        dim = len(np.atleast_1d(self.points[0][1]))
        cols = ["t"] + [f"x{i}" for i in range(dim)] + ["value", "std_error", "n_paths"]
        if self.gradients is not None:
            cols += [f"dv{i}" for i in range(dim)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i, ((t, x), est) in enumerate(zip(self.points, self.estimates)):
                row = [repr(float(t))] + [repr(float(v)) for v in np.atleast_1d(x)]
                row += [repr(est.mean), repr(est.std_error), str(est.n_paths)]
                if self.gradients is not None:
                    row += [repr(float(g)) for g in np.atleast_1d(self.gradients[i])]
                fh.write(",".join(row) + "\n")


@dataclass(frozen=True)
class ControlFamily:
    """Recipe for candidate controls at a point (t, x).

    Sampled candidates are piecewise constant on n_segments equal pieces of
    [t, T], drawn coordinatewise, clipped into the box and projected into
    the weighted ball of radius m_truncation. base_candidates are prepended
    verbatim (signals, traces or feedback policies); the zero signal is
    always worth including since costs here are nonnegative-ish near zero.
    """

    n_segments: int = 4
    m_truncation: float = 8.0
    draw_scale: Optional[float] = None
    include_zero: bool = True
    base_candidates: tuple = ()

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("need at least one segment")
        if not (self.m_truncation > 0):
            raise ValueError("m_truncation must be positive")

    def sampled(self, problem, t, index, seed, m=None):
        """Candidate #index; depends only on (seed, index), not on how many
        candidates are drawn alongside it."""
        m_eff = self.m_truncation if m is None else m
        spec = problem.control_spec
        rng = stream(seed, "family_draw", index)
        scale = self.draw_scale
        if scale is None:
            scale = m_eff / 2.0
        if spec.box is not None:
            lo, hi = spec.box
            vals = rng.uniform(lo, hi, size=(self.n_segments, spec.dim))
        else:
            vals = rng.normal(size=(self.n_segments, spec.dim)) * scale
        vals = clip_box(vals, spec.box)
        vals = project_ball(vals, m_eff, spec.weights)
        knots = np.linspace(t, problem.horizon, self.n_segments + 1)
        return PiecewiseConstantSignal(knots, vals)

    def candidates(self, problem, t, n_candidates, seed, m=None):
        """(label, control) pairs: bases, then zero, then sampled draws."""
        out = [(f"base{i}", c) for i, c in enumerate(self.base_candidates)]
        if self.include_zero:
            out.append(("zero", zero_signal(problem.control_spec.dim)))
        out += [
            (f"sample{j}", self.sampled(problem, t, j, seed, m=m))
            for j in range(n_candidates)
        ]
        return out


@dataclass
class FamilyValue:
    """Best-candidate estimate plus the bookkeeping around it."""

    estimate: MCEstimate
    argmin_index: int
    argmin_label: str
    argmin_control: object
    candidate_estimates: list
    candidate_labels: list
    argmin_samples: Optional[np.ndarray] = None


def cost_samples(problem, t, x, control, n_paths, n_steps=200, seed=42,
                 dw=None, stream_label="paths"):
    """Per-path total costs J_k; the raw material under every estimate."""
    run = simulate_costs(problem, t, x, control, n_paths, n_steps, seed,
                         stream_label, dw=dw)
    return run.costs


def evaluate_cost(problem, t, x, control, n_paths, n_steps=200, seed=42,
                  dw=None, stream_label="paths") -> MCEstimate:
    return MCEstimate.from_samples(
        cost_samples(problem, t, x, control, n_paths, n_steps, seed, dw,
                     stream_label)
    )


def estimate_value_family(
    problem,
    t,
    x,
    family: ControlFamily,
    n_candidates=12,
    paths_per_candidate=2000,
    n_steps=200,
    seed=42,
    jobs=1,
) -> FamilyValue:
    """Upper value estimate: paired minimum over the candidate family.

    Enlarging n_candidates with the same seed only appends candidates, so
    the reported mean is nonincreasing in n_candidates by construction.
    Ties go to the lowest candidate index (np.argmin semantics).
    """
    dt = (problem.horizon - t) / n_steps
    dw = gaussian_increments(seed, "family_paths", paths_per_candidate,
                             n_steps, problem.noise_dim, dt)
    pairs = family.candidates(problem, t, n_candidates, seed)

    def one(pair):
        _, control = pair
        return cost_samples(problem, t, x, control, paths_per_candidate,
                            n_steps, seed, dw=dw, stream_label="family_paths")

    all_samples = parallel_map(one, pairs, jobs=jobs)
    estimates = [MCEstimate.from_samples(s) for s in all_samples]
    means = np.array([e.mean for e in estimates])
    best = int(np.argmin(means))
    return FamilyValue(
        estimate=estimates[best],
        argmin_index=best,
        argmin_label=pairs[best][0],
        argmin_control=pairs[best][1],
        candidate_estimates=estimates,
        candidate_labels=[p[0] for p in pairs],
        argmin_samples=all_samples[best],
    )


def _truncate_candidate(candidate, m, weights):
    """Project a candidate into the radius-m ball: signals by value, feedback
    policies by wrapping their output."""
    if hasattr(candidate, "feedback"):
        inner = candidate.feedback

        class _Truncated:
            provenance = getattr(candidate, "provenance", "truncated")

            @staticmethod
            def feedback(s, x_batch):
                return project_ball(inner(s, x_batch), m, weights)

        return _Truncated()
    if isinstance(candidate, PiecewiseConstantSignal):
        return PiecewiseConstantSignal(candidate.knots,
                                       project_ball(candidate.values, m, weights))
    if isinstance(candidate, ConstantSignal):
        return ConstantSignal(project_ball(candidate.value, m, weights))
    raise TypeError("truncation supports constant or piecewise signals and policies")


def truncation_scan(
    problem,
    t,
    x,
    m_list,
    family: Optional[ControlFamily] = None,
    n_candidates=10,
    paths_per_candidate=1000,
    n_steps=120,
    seed=7,
    flat_se_mult=2.0,
) -> DiagnosticReport:
    """Value vs truncation radius: find where enlarging the ball stops helping.

    One raw candidate set is drawn at the largest radius; each level m sees
    its projections onto the m-ball. Reported level values are running
    minima over levels (the candidate sets then nest), so the curve is
    nonincreasing by construction and flatness is a statistical question:
    m_bar is the smallest level whose value is within flat_se_mult combined
    standard errors of everything after it. The scan fails if that never
    happens before the second-to-last level, i.e. the curve is still moving
    at the edge of the scanned range.
    """
    m_arr = np.asarray(m_list, dtype=float)
    if len(m_arr) < 3 or np.any(np.diff(m_arr) <= 0) or m_arr[0] <= 0:
        raise ValueError("m_list must be >= 3 increasing positive radii")
    if family is None:
        family = ControlFamily(m_truncation=float(m_arr[-1]))
    else:
        family = replace(family, m_truncation=float(m_arr[-1]))

    dt = (problem.horizon - t) / n_steps
    dw = gaussian_increments(seed, "family_paths", paths_per_candidate,
                             n_steps, problem.noise_dim, dt)
    raw = family.candidates(problem, t, n_candidates, seed, m=float(m_arr[-1]))
    weights = problem.control_spec.weights

    level_values, level_ses = [], []
    for m in m_arr:
        best_mean, best_se = np.inf, np.inf
        for _, cand in raw:
            c_m = _truncate_candidate(cand, float(m), weights)
            est = MCEstimate.from_samples(
                cost_samples(problem, t, x, c_m, paths_per_candidate, n_steps,
                             seed, dw=dw, stream_label="family_paths")
            )
            if est.mean < best_mean:
                best_mean, best_se = est.mean, est.std_error
        level_values.append(best_mean)
        level_ses.append(best_se)

    run_min, run_se = [], []
    cur, cur_se = np.inf, np.inf
    for v, s in zip(level_values, level_ses):
        if v < cur:
            cur, cur_se = v, s
        run_min.append(cur)
        run_se.append(cur_se)

    m_bar_idx = None
    for j in range(len(m_arr)):
        tol = flat_se_mult * np.sqrt(
            np.array(run_se[j:]) ** 2 + run_se[j] ** 2
        )
        if np.all(run_min[j] - np.array(run_min[j:]) <= tol):
            m_bar_idx = j
            break
    ok = m_bar_idx is not None and m_bar_idx <= len(m_arr) - 2
    return DiagnosticReport(
        name="truncation_scan",
        verdict=PASS if ok else FAIL,
        samples_used=paths_per_candidate * len(raw) * len(m_arr),
        constants={
            "m_list": m_arr.tolist(),
            "values": run_min,
            "level_values": level_values,
            "std_errors": run_se,
            "m_bar": float(m_arr[m_bar_idx]) if m_bar_idx is not None else float("nan"),
            "m_bar_index": -1 if m_bar_idx is None else m_bar_idx,
        },
        witness=None if ok else {"seed": seed, "values": run_min},
        tolerance=flat_se_mult,
        notes="value flatness across truncation radii",
    )


def gradient_fd(value_evaluator, t, x, h=None, seed=0, weights=None):
    """Central-difference spatial gradient of an estimated value field.

    value_evaluator(t, x, seed) returns per-path cost samples; both sides
    of every difference run on the same seed, so the difference samples are
    paired and the reported standard errors are of the differences, not of
    the values. The returned gradient is taken in the weighted inner
    product: coordinate slopes divided by the weights.

    Warns when any component's standard error exceeds the component itself;
    at that point the sign of the slope is statistically unresolved.
    """
    x = np.asarray(x, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if h is None:
        h = 1e-3 * (1.0 + float(np.sqrt(np.sum(w * x * x))))
    grad = np.empty_like(x)
    ses = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        plus = np.asarray(value_evaluator(t, x + e, seed), dtype=float)
        minus = np.asarray(value_evaluator(t, x - e, seed), dtype=float)
        diff = (plus - minus) / (2.0 * h)
        n = diff.shape[0]
        slope = float(diff.mean())
        se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        grad[i] = slope / w[i]
        ses[i] = se / w[i]
    noisy = np.abs(ses) > np.abs(grad)
    if np.any(noisy):
        warnings.warn(
            f"gradient components {np.flatnonzero(noisy).tolist()} are below "
            "the Monte Carlo noise floor; increase paths or the step",
            stacklevel=2,
        )
    return grad, ses


# ---------------------------------------------------------------------------
# evaluators: the uniform (t, x, seed) -> samples contract
# ---------------------------------------------------------------------------


def make_policy_evaluator(problem, policy, n_paths=2000, n_steps=150,
                          stream_label="paths"):
    def evaluator(t, x, seed):
        return cost_samples(problem, t, x, policy, n_paths, n_steps, seed,
                            stream_label=stream_label)
    return evaluator


def make_family_evaluator(problem, family, n_candidates=10,
                          paths_per_candidate=1500, n_steps=150):
    def evaluator(t, x, seed):
        fv = estimate_value_family(problem, t, x, family, n_candidates,
                                   paths_per_candidate, n_steps, seed)
        return fv.argmin_samples
    return evaluator


def make_exact_evaluator(fn):
    """Wrap a closed-form value function as a zero-noise evaluator."""
    def evaluator(t, x, seed):
        return np.array([float(fn(t, np.asarray(x, dtype=float)))])
    return evaluator


# ---------------------------------------------------------------------------
# approximate policy iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyIterationConfig:
    paths_per_point: int = 1500
    n_steps: int = 120
    fd_step: Optional[float] = None
    tol_abs: float = 0.02
    tol_rel: float = 0.01
    jobs: int = 1


@dataclass
class PolicyIterationResult:
    value_field: ValueField
    policy: object
    converged: bool
    rounds_run: int
    round_changes: list
    round_values: list  # list of value arrays, one per round


class _GridGradientField:
    """Per-row 1-D linear interpolation of gradients over x_grid; rows are
    looked up by nearest time. Multi-dimensional states fall back to the
    nearest grid point."""

    def __init__(self, t_grid, x_grid, grads):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.grads = np.asarray(grads, dtype=float)  # (T, K, N)
        self.scalar = self.x_grid.shape[1] == 1
        if self.scalar:
            order = np.argsort(self.x_grid[:, 0])
            self.x_sorted = self.x_grid[order, 0]
            self.g_sorted = self.grads[:, order, 0]

    def row_index(self, s):
        return int(np.argmin(np.abs(self.t_grid - s)))

    def __call__(self, s, x_batch):
        i = self.row_index(s)
        x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
        if self.scalar:
            vals = np.interp(x_batch[:, 0], self.x_sorted, self.g_sorted[i])
            return vals[:, None]
        d2 = np.sum((x_batch[:, None, :] - self.x_grid[None, :, :]) ** 2, axis=-1)
        return self.grads[i][np.argmin(d2, axis=1)]


def policy_iteration(
    problem,
    t_grid,
    x_grid,
    gamma_selector=None,
    n_rounds=5,
    cfg: Optional[PolicyIterationConfig] = None,
    seed=42,
) -> PolicyIterationResult:
    """Evaluate-then-improve on a (t, x) grid.

    Each round evaluates the current policy's cost at every grid point (same
    derived seed per point across rounds, so round-to-round comparisons are
    paired), differentiates the field in x, and feeds the interpolated
    gradient through the pointwise selector to get the next policy. Stops
    early once the value field moves less than tol_abs + tol_rel * |V|
    between rounds; otherwise reports non-convergence along with the whole
    change sequence rather than pretending.
    """
    cfg = cfg or PolicyIterationConfig()
    t_arr = np.asarray(t_grid, dtype=float)
    x_arr = np.atleast_2d(np.asarray(x_grid, dtype=float))
    if x_arr.shape[0] == 1 and x_arr.shape[1] != problem.dim:
        x_arr = x_arr.T
    if np.any(t_arr >= problem.horizon):
        raise ValueError("evaluation times must sit strictly inside the horizon")
    if gamma_selector is None:
        from .synthesis import gamma_separated

        def gamma_selector(pb, x_batch, p_batch):
            return gamma_separated(pb, p_batch, x=x_batch)

    from .synthesis import Policy

    policy = Policy(
        feedback=lambda s, xb: np.zeros((np.atleast_2d(xb).shape[0],
                                         problem.control_spec.dim)),
        provenance="policy_iteration",
        gradient_source="zero_start",
    )

    round_values, round_changes = [], []
    prev_vals = None
    est_grid, grad_grid = None, None
    rounds_run = 0
    converged = False
    for rnd in range(n_rounds):
        rounds_run = rnd + 1
        evaluator = make_policy_evaluator(problem, policy, cfg.paths_per_point,
                                          cfg.n_steps)

        def eval_point(args):
            i, j = args
            t_i, x_j = float(t_arr[i]), x_arr[j]
            s = (seed * 1000003 + i * 1009 + j) & 0x7FFFFFFF
            samples = evaluator(t_i, x_j, s)
            est = MCEstimate.from_samples(samples)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                grad, _ = gradient_fd(evaluator, t_i, x_j, h=cfg.fd_step,
                                      seed=s, weights=problem.space.weights)
            return est, grad

        coords = [(i, j) for i in range(len(t_arr)) for j in range(x_arr.shape[0])]
        results = parallel_map(eval_point, coords, jobs=cfg.jobs)
        est_grid = [[None] * x_arr.shape[0] for _ in t_arr]
        grad_grid = np.empty((len(t_arr), x_arr.shape[0], problem.dim))
        for (i, j), (est, grad) in zip(coords, results):
            est_grid[i][j] = est
            grad_grid[i, j] = grad
        vals = np.array([[e.mean for e in row] for row in est_grid])
        round_values.append(vals)

        if prev_vals is not None:
            change = float(np.max(np.abs(vals - prev_vals)))
            round_changes.append(change)
            if change <= cfg.tol_abs + cfg.tol_rel * float(np.max(np.abs(vals))):
                converged = True
        prev_vals = vals

        field = _GridGradientField(t_arr, x_arr, grad_grid)
        box = problem.control_spec.box

        def feedback(s, xb, _field=field):
            xb = np.atleast_2d(np.asarray(xb, dtype=float))
            a = gamma_selector(problem, xb, _field(s, xb))
            return clip_box(a, box)

        policy = Policy(feedback=feedback, provenance="policy_iteration",
                        gradient_source=field)
        if converged:
            break

    points, estimates, grads = [], [], []
    for i in range(len(t_arr)):
        for j in range(x_arr.shape[0]):
            points.append((float(t_arr[i]), x_arr[j].copy()))
            estimates.append(est_grid[i][j])
            grads.append(grad_grid[i, j].copy())
    vf = ValueField(points=points, estimates=estimates,
                    method_tag="policy_iteration", gradients=grads)
    return PolicyIterationResult(
        value_field=vf,
        policy=policy,
        converged=converged,
        rounds_run=rounds_run,
        round_changes=round_changes,
        round_values=round_values,
    )
