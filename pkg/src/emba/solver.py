"""Analytical linearization of the residual terms and the Levenberg-Marquardt
loop that jointly refines control poses and the gradient map."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .events import (
    DEFAULT_CONTRAST,
    EventArray,
    TermSet,
    build_terms,
    count_map_hits,
    event_bearings,
    pair_events,
)
from .geometry import CameraModel, e_matrix_vjp
from .normal_equations import (
    SOLVERS,
    JacobianRows,
    SingularSystemError,
    accumulate,
    apply_regularization,
    huber_loss,
    huber_reweight,
    merge,
    merge_duplicate_slots,
)
from .panorama import DEFAULT_VALID_THRESHOLD, GradientMap, ValidMask, build_valid_mask, gradient_hessian_field
from .trajectory import DEFAULT_POSE_RATE, Trajectory

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    contrast: float = DEFAULT_CONTRAST
    eta: float = 5.0
    pose_rate: float = DEFAULT_POSE_RATE
    map_width: int = 1024
    map_height: int = 512
    valid_threshold: int = DEFAULT_VALID_THRESHOLD
    huber: bool = False
    huber_delta: float = 0.1
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iters: int = 50
    tol: float = 1e-6
    solver: str = "schur"
    threads: int = 1
    optimize_poses: bool = True
    linear_pose_weights: bool = False

    def __post_init__(self):
        if not self.contrast > 0:
            raise ValueError("contrast must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda factors must exceed 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {sorted(SOLVERS)}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------


def linearize_terms(terms: TermSet, traj: Trajectory, g, dg, width, height, linear_weights=False, segment_logs=None):
    """Jacobian rows for every term given the sampled gradient ``g`` (N, 2)
    and its spatial derivative ``dg`` (N, 2, 2) at ``p(t_k)``.

    A left perturbation ``dphi`` of the orientation moves a map point by
    ``-E dphi``. Differentiating ``e = G(p_k) . (p_k - p_prev) - pC`` gives
    ``-(dp^T dG + G^T) E_k`` for the orientation at ``t_k`` and ``G^T E_prev``
    for the orientation at ``t_k - dt``; the map part is ``dp``.
    """
    if segment_logs is None:
        segment_logs = traj.segment_logs()
    dp = terms.dp
    e = np.einsum("ni,ni->n", g, dp) - terms.measured
    w = np.einsum("ni,nij->nj", dp, dg) + g
    r_k = -e_matrix_vjp(terms.z_k, w, width, height)
    r_p = e_matrix_vjp(terms.z_prev, g, width, height)

    n = len(terms)
    blocks = np.empty((n, 4, 3))
    blocks[:, 0], blocks[:, 1] = traj.apply_perturbation_blocks(terms.seg_k, terms.tau_k, r_k, linear_weights, segment_logs)
    blocks[:, 2], blocks[:, 3] = traj.apply_perturbation_blocks(
        terms.seg_prev, terms.tau_prev, r_p, linear_weights, segment_logs
    )
    poses = np.stack([terms.seg_k, terms.seg_k + 1, terms.seg_prev, terms.seg_prev + 1], axis=1)
    poses, blocks = merge_duplicate_slots(poses, blocks)
    return JacobianRows(poses, blocks, terms.pixel.copy(), dp.copy(), e)


def sample_map(terms: TermSet, G: GradientMap, mask: ValidMask, hessian=None):
    """Nearest-neighbour gradient and its central-difference derivative at each term's pixel."""
    if hessian is None:
        hessian = gradient_hessian_field(G)
    iu, iv = mask.pixel_of(terms.pixel)
    return G.data[iv, iu], hessian[iv, iu]


def linearize_term(terms: TermSet, G: GradientMap, mask: ValidMask, traj: Trajectory, linear_weights=False):
    g, dg = sample_map(terms, G, mask)
    return linearize_terms(terms, traj, g, dg, G.width, G.height, linear_weights)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    trial_loss: float
    damping: float
    step_pose: float
    step_map: float
    accepted: bool
    n_terms: int
    phe: float


@dataclass
class StepTimings:
    evaluate: float = 0.0  # residuals, association and derivatives
    form: float = 0.0  # accumulation + regularization
    solve: float = 0.0

    def as_dict(self):
        return {"objective_evaluation": self.evaluate, "forming_normal_equations": self.form, "solving_normal_equations": self.solve}


@dataclass
class OptimizationReport:
    iterations: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    initial_phe: float = float("nan")
    final_phe: float = float("nan")
    n_terms: int = 0
    n_dropped: int = 0
    dropped: dict = field(default_factory=dict)
    n_valid_pixels: int = 0
    converged: bool = False
    status: str = ""
    solver: str = "schur"
    timings: StepTimings = field(default_factory=StepTimings)
    timing_history: list = field(default_factory=list)

    def summary_dict(self):
        """Everything except wall-clock timings (reproducible bit for bit)."""
        return {
            "status": self.status,
            "converged": self.converged,
            "solver": self.solver,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "initial_phe": self.initial_phe,
            "final_phe": self.final_phe,
            "n_terms": self.n_terms,
            "n_dropped": self.n_dropped,
            "dropped": self.dropped,
            "n_valid_pixels": self.n_valid_pixels,
            "iterations": [asdict(r) for r in self.iterations],
        }

    def timing_dict(self):
        return {"total": self.timings.as_dict(), "per_iteration": self.timing_history}

    def to_json(self, timings=False):
        data = self.summary_dict()
        if timings:
            data["timings"] = self.timing_dict()
        return json.dumps(data, indent=2, sort_keys=True)

    def to_text(self):
        lines = [
            f"status {self.status}",
            f"converged {int(self.converged)}",
            f"solver {self.solver}",
            f"n_terms {self.n_terms}",
            f"n_dropped {self.n_dropped}",
            f"n_valid_pixels {self.n_valid_pixels}",
            f"initial_loss {self.initial_loss!r}",
            f"final_loss {self.final_loss!r}",
            f"initial_phe {self.initial_phe!r}",
            f"final_phe {self.final_phe!r}",
            "# iter loss trial_loss lambda step_pose step_map accepted n_terms phe",
        ]
        for r in self.iterations:
            lines.append(
                f"{r.iteration} {r.loss!r} {r.trial_loss!r} {r.damping!r} {r.step_pose!r} "
                f"{r.step_map!r} {int(r.accepted)} {r.n_terms} {r.phe!r}"
            )
        return "\n".join(lines) + "\n"

    def timing_text(self):
        t = self.timings
        return (
            "# step seconds\n"
            f"objective_evaluation {t.evaluate:.6f}\n"
            f"forming_normal_equations {t.form:.6f}\n"
            f"solving_normal_equations {t.solve:.6f}\n"
        )


# ---------------------------------------------------------------------------
# Problem and LM loop
# ---------------------------------------------------------------------------


class Problem:
    """Fixed data of one refinement run: events, pairing, camera and frozen mask."""

    def __init__(self, events: EventArray, cam: CameraModel, mask: ValidMask, config: SolverConfig):
        events.check_bounds(cam)
        self.events = events
        self.cam = cam
        self.mask = mask
        self.config = config
        self.pairs = pair_events(events, (cam.height, cam.width))
        self.bearings = event_bearings(events, cam)

    @classmethod
    def from_initial(cls, events, traj0: Trajectory, cam, config: SolverConfig, width=None, height=None):
        width = config.map_width if width is None else width
        height = config.map_height if height is None else height
        counts = count_map_hits(events, traj0, cam, width, height)
        mask = build_valid_mask(counts, config.valid_threshold)
        return cls(events, cam, mask, config)

    @property
    def width(self):
        return self.mask.width

    @property
    def height(self):
        return self.mask.height

    def terms(self, traj: Trajectory, allow_empty=False):
        return build_terms(
            self.events,
            self.pairs,
            traj,
            self.cam,
            self.mask,
            self.config.contrast,
            bearings=self.bearings,
            allow_empty=allow_empty,
        )

    def residuals(self, terms: TermSet, G: GradientMap):
        iu, iv = self.mask.pixel_of(terms.pixel)
        return np.einsum("ni,ni->n", G.data[iv, iu], terms.dp) - terms.measured

    def data_loss(self, e):
        if self.config.huber:
            return float(np.sum(huber_loss(e, self.config.huber_delta)))
        return float(e @ e)

    def prior(self, G: GradientMap):
        g = G.data[self.mask.valid]
        return self.config.eta * float(np.sum(g * g))

    def objective(self, e, G):
        return self.data_loss(e) + self.prior(G)

    def linearize(self, terms: TermSet, traj: Trajectory, G: GradientMap, hessian=None):
        g, dg = sample_map(terms, G, self.mask, hessian)
        return linearize_terms(
            terms, traj, g, dg, self.width, self.height, self.config.linear_pose_weights
        )

    def normal_equations(self, terms: TermSet, traj: Trajectory, G: GradientMap, timings: StepTimings | None = None):
        """Linearize, reweight and accumulate, optionally over partitions in threads."""
        cfg = self.config
        fixed = (0,) if cfg.optimize_poses else tuple(range(traj.n_poses))
        hessian = gradient_hessian_field(G)
        segment_logs = traj.segment_logs()

        def evaluate(part):
            g, dg = sample_map(part, G, self.mask, hessian)
            rows = linearize_terms(part, traj, g, dg, self.width, self.height, cfg.linear_pose_weights, segment_logs)
            if cfg.huber:
                rows = huber_reweight(rows, cfg.huber_delta)
            return rows

        def form(rows):
            return accumulate(rows, traj.n_poses, self.mask.n_valid, fixed=fixed)

        if cfg.threads == 1:
            t0 = time.perf_counter()
            rows = evaluate(terms)
            t1 = time.perf_counter()
            ne = form(rows)
            t2 = time.perf_counter()
            if timings is not None:
                timings.evaluate += t1 - t0
                timings.form += t2 - t1
        else:
            bounds = np.linspace(0, len(terms), cfg.threads + 1).astype(int)
            parts = [terms.subset(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
            t0 = time.perf_counter()
            with ThreadPoolExecutor(cfg.threads) as pool:
                rows = list(pool.map(evaluate, parts))
                t1 = time.perf_counter()
                ne = merge(pool.map(form, rows))
            t2 = time.perf_counter()
            if timings is not None:
                timings.evaluate += t1 - t0
                timings.form += t2 - t1
        t2 = time.perf_counter()
        g_valid = G.data[self.mask.valid]
        ne = apply_regularization(ne, cfg.eta, g_valid)
        if timings is not None:
            timings.form += time.perf_counter() - t2
        return ne


def _apply_map_update(G: GradientMap, mask: ValidMask, d_beta):
    data = G.data.copy()
    data[mask.valid] += d_beta.reshape(-1, 2)
    return GradientMap(data)


def optimize(
    events: EventArray,
    traj0: Trajectory,
    G0: GradientMap | None,
    cam: CameraModel,
    config: SolverConfig,
    problem: Problem | None = None,
    callback=None,
):
    """Levenberg-Marquardt refinement of control poses and the gradient map.

    Returns ``(trajectory, gradient_map, report)``. The first control pose is
    held fixed. The valid mask is built once from ``traj0``.
    ``callback(record, traj, G)`` is invoked after every iteration.
    """
    cfg = config
    if problem is None:
        width = G0.width if G0 is not None else cfg.map_width
        height = G0.height if G0 is not None else cfg.map_height
        problem = Problem.from_initial(events, traj0, cam, cfg, width, height)
    mask = problem.mask
    if G0 is None:
        G0 = GradientMap.zeros(problem.width, problem.height)
    if (G0.width, G0.height) != (problem.width, problem.height):
        raise ValueError("initial gradient map size does not match the problem")
    G = G0.masked(mask)  # invalid pixels are driven to zero by the prior alone
    traj = traj0
    solve = SOLVERS[cfg.solver]
    fixed = (0,) if cfg.optimize_poses else tuple(range(traj.n_poses))
    fmap_free = [i for i in range(traj.n_poses) if i not in set(fixed)]

    report = OptimizationReport(solver=cfg.solver, n_valid_pixels=mask.n_valid)
    timings = report.timings

    t0 = time.perf_counter()
    terms, stats = problem.terms(traj)
    e = problem.residuals(terms, G)
    timings.evaluate += time.perf_counter() - t0
    loss = problem.objective(e, G)
    report.initial_loss = loss
    report.initial_phe = float(e @ e)
    lam = cfg.lambda0
    rejections = 0
    ne = None
    status = "max_iterations"
    converged = False

    for it in range(cfg.max_iters):
        snap = (timings.evaluate, timings.form, timings.solve)
        if ne is None:
            ne = problem.normal_equations(terms, traj, G, timings)
        ts = time.perf_counter()
        try:
            d_alpha, d_beta = solve(ne, lam)
        except SingularSystemError as exc:
            logger.info("iteration %d: %s; raising damping", it, exc)
            timings.solve += time.perf_counter() - ts
            lam *= cfg.lambda_up
            rejections += 1
            report.iterations.append(
                IterationRecord(it, loss, float("nan"), lam, float("nan"), float("nan"), False, len(terms), float(e @ e))
            )
            if rejections >= 5 and lam >= 1e8:
                status = "stalled"
                break
            continue
        timings.solve += time.perf_counter() - ts

        delta = np.zeros(3 * traj.n_poses)
        for j, k in enumerate(fmap_free):
            delta[3 * k : 3 * k + 3] = d_alpha[3 * j : 3 * j + 3]
        trial_traj = traj.apply_update(delta, fixed=fixed) if fmap_free else traj
        trial_G = _apply_map_update(G, mask, d_beta)

        te = time.perf_counter()
        trial_terms, trial_stats = problem.terms(trial_traj, allow_empty=True)
        trial_e = problem.residuals(trial_terms, trial_G)
        timings.evaluate += time.perf_counter() - te
        trial_loss = problem.objective(trial_e, trial_G) if len(trial_terms) else float("inf")

        accepted = trial_loss < loss
        report.iterations.append(
            IterationRecord(
                it,
                loss,
                trial_loss,
                lam,
                float(np.linalg.norm(d_alpha)),
                float(np.linalg.norm(d_beta)),
                bool(accepted),
                len(trial_terms) if accepted else len(terms),
                float(trial_e @ trial_e) if accepted else float(e @ e),
            )
        )
        logger.info(
            "iter %d loss %.6g trial %.6g lambda %.1e |da| %.2e |db| %.2e %s",
            it, loss, trial_loss, lam, np.linalg.norm(d_alpha), np.linalg.norm(d_beta),
            "accept" if accepted else "reject",
        )
        report.timing_history.append(
            {
                "objective_evaluation": timings.evaluate - snap[0],
                "forming_normal_equations": timings.form - snap[1],
                "solving_normal_equations": timings.solve - snap[2],
            }
        )
        if callback is not None:
            callback(report.iterations[-1], trial_traj if accepted else traj, trial_G if accepted else G)
        if accepted:
            rel = (loss - trial_loss) / max(loss, 1e-300)
            traj, G, terms, stats, e, loss = trial_traj, trial_G, trial_terms, trial_stats, trial_e, trial_loss
            ne = None
            lam = max(lam / cfg.lambda_down, 1e-12)
            rejections = 0
            if rel < cfg.tol:
                status = "converged"
                converged = True
                break
        else:
            lam *= cfg.lambda_up
            rejections += 1
            if rejections >= 5 and lam >= 1e8:
                status = "stalled"
                break

    report.final_loss = loss
    report.final_phe = float(e @ e)
    report.n_terms = len(terms)
    report.dropped = dict(stats.dropped)
    report.n_dropped = stats.n_dropped
    report.converged = converged
    report.status = status
    return traj, G, report
