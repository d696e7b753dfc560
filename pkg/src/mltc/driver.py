"""Multilevel tensor collocation: level schedules, the per-level compression
loop, surrogate evaluation, statistics, and error metrics.

Per level l = 0..L the difference of FE solutions on two consecutive grids is
sampled at tensorized Chebyshev points and compressed in hierarchical form
with relative accuracy eps_l = 2^(l-L) * eps0; the degree schedule
p(l) = floor((L - l + 1) / 2) balances interpolation and FE error across
levels.  The surrogate is the sum of the per-level interpolants and supports
pointwise evaluation, exact expectation against the uniform density, and the
output functional psi(u) = integral of u.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .colloc import CollocationGrid
from .cross import (DEFAULT_EVAL_BUDGET, DEFAULT_RANK_CAP, ApproxResult,
                    ColumnSource, EvalBudget, approximate_tensor)
from .errors import BudgetError
from .fem import (build_grid, delta_nodal, delta_vector, functional_psi,
                  h1_frame, prolongation_matrix, solve_at)
from .fields import CoefficientModel
from .htensor import HTensor, build_tree, storage_and_ranks


def degree_schedule(L: int) -> list[int]:
    """Isotropic degrees p(l) = floor((L - l + 1) / 2) for l = 0..L."""
    if L < 0:
        raise ValueError("max level must be nonnegative")
    return [(L - level + 1) // 2 for level in range(L + 1)]


def anisotropic_degrees(eps: float, gammas, c: float = 1.0) -> list[int]:
    """Per-dimension degrees p_k = ceil(log eps / log(c gamma_k / 2)) - 1.

    Diagnostic only: this is the degree rule matched to per-dimension decay
    rates gamma_k (requires c * gamma_k < 2); the level schedules actually
    used are isotropic.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    out = []
    for g in gammas:
        q = c * g / 2.0
        if not 0 < q < 1:
            raise ValueError("need 0 < c * gamma / 2 < 1")
        out.append(max(math.ceil(math.log(eps) / math.log(q)) - 1, 0))
    return out


def accuracy_schedule(L: int, eps0: float = 0.25) -> list[float]:
    """Tensor accuracies eps_l = 2^(l-L) * eps0, doubling per level."""
    return [2.0 ** (level - L) * eps0 for level in range(L + 1)]


@dataclass(frozen=True)
class LevelPlan:
    max_level: int
    eps0: float = 0.25

    @property
    def degrees(self) -> tuple:
        return tuple(degree_schedule(self.max_level))

    @property
    def accuracies(self) -> tuple:
        return tuple(accuracy_schedule(self.max_level, self.eps0))

    def collocation_counts(self, n_params: int) -> tuple:
        return tuple((p + 1) ** n_params for p in self.degrees)


@dataclass
class LevelRecord:
    level: int
    grid: CollocationGrid
    tensor: HTensor          # parametric modes (p+1)^N, spatial mode n_level


@dataclass
class LevelDiagnostics:
    level: int
    degree: int
    n_spatial: int
    eps_target: float
    r_max: int = 0
    r_eff: float = 0.0
    storage: int = 0
    step1_evals: int = 0
    step2_evals: int = 0
    fibers: int = 0
    pde_solves: int = 0
    time_s: float = 0.0
    cross_residual: float = float("nan")
    converged: bool = False


def _contract_batch(X: HTensor, weight_mats: dict, spatial_mode: int) -> np.ndarray:
    """Contract all parametric modes with per-sample weight rows.

    weight_mats maps mode -> (M, size) array; returns (M, n_spatial).
    """
    def reduce_node(node_index):
        node = X.tree.nodes[node_index]
        if node.is_leaf:
            m = node.modes[0]
            U = X.leaf_frames[node_index]
            if m == spatial_mode:
                return U, "spatial"
            return weight_mats[m] @ U, "batch"
        a, ka = reduce_node(node.children[0])
        b, kb = reduce_node(node.children[1])
        B = X.transfers[node_index]
        if ka == "batch" and kb == "batch":
            return np.einsum("sab,ma,mb->ms", B, a, b), "batch"
        if ka == "spatial" and kb == "batch":
            return np.einsum("sab,na,mb->mns", B, a, b, optimize=True), "mixed"
        if ka == "batch" and kb == "spatial":
            return np.einsum("sab,ma,nb->mns", B, a, b, optimize=True), "mixed"
        if ka == "mixed" and kb == "batch":
            return np.einsum("sab,mna,mb->mns", B, a, b, optimize=True), "mixed"
        if ka == "batch" and kb == "mixed":
            return np.einsum("sab,ma,mnb->mns", B, a, b, optimize=True), "mixed"
        raise ValueError("tensor has more than one uncontracted mode")

    out, kind = reduce_node(X.tree.root)
    if kind != "mixed":
        raise ValueError("expected exactly one free spatial mode")
    return out[:, :, 0]


class MLSurrogate:
    """Sum over levels of interpolated, compressed level differences."""

    def __init__(self, model: CoefficientModel, n_params: int, plan: LevelPlan,
                 records: list[LevelRecord]):
        self.model = model
        self.n_params = n_params
        self.plan = plan
        self.records = records

    @property
    def max_level(self) -> int:
        return self.plan.max_level

    def _weights(self, Y: np.ndarray, grid: CollocationGrid) -> dict:
        return {m: grid.lagrange_weights_many(Y[:, m]) for m in range(self.n_params)}

    def components_h1(self, Y: np.ndarray) -> list[np.ndarray]:
        """Per level, the H1-coordinate vectors of the level interpolant.

        Y has shape (M, N); each returned array has shape (M, n_level).
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.n_params:
            raise ValueError(f"samples must have {self.n_params} columns")
        out = []
        for rec in self.records:
            W = self._weights(Y, rec.grid)
            out.append(_contract_batch(rec.tensor, W, self.n_params))
        return out

    def _accumulate_nodal(self, comps: list[np.ndarray]) -> np.ndarray:
        """Map per-level H1 components to nodal vectors at the top level."""
        L = self.max_level
        m_samples = comps[0].shape[0]
        total = np.zeros((build_grid(L).n, m_samples))
        for rec, Z in zip(self.records, comps):
            C = h1_frame(rec.level).from_h1(Z.T)
            for lev in range(rec.level + 1, L + 1):
                C = prolongation_matrix(lev) @ C
            total += C
        return total.T

    def evaluate_batch(self, Y: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """Nodal surrogate solutions at the top level, shape (M, n_L)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n_top = build_grid(self.max_level).n
        chunk = max(1, min(chunk, int(4e6 // max(n_top, 1)) or 1))
        blocks = []
        for start in range(0, Y.shape[0], chunk):
            comps = self.components_h1(Y[start:start + chunk])
            blocks.append(self._accumulate_nodal(comps))
        return np.vstack(blocks)

    def evaluate(self, y) -> np.ndarray:
        """Nodal surrogate solution at one parameter point."""
        return self.evaluate_batch(np.asarray(y, dtype=float)[None, :])[0]

    def psi_batch(self, Y: np.ndarray) -> np.ndarray:
        """psi(u) per sample without leaving H1 coordinates."""
        comps = self.components_h1(Y)
        out = np.zeros(comps[0].shape[0])
        for rec, Z in zip(self.records, comps):
            out += Z @ h1_frame(rec.level).psi_vec
        return out

    def expectation_components(self) -> list[np.ndarray]:
        out = []
        for rec in self.records:
            w = rec.grid.quadrature_weights
            W = {m: w[None, :] for m in range(self.n_params)}
            out.append(_contract_batch(rec.tensor, W, self.n_params))
        return out

    def expectation(self) -> np.ndarray:
        """Exact uniform-density expectation of the surrogate (nodal, level L)."""
        return self._accumulate_nodal(self.expectation_components())[0]

    def expectation_psi(self) -> float:
        total = 0.0
        for rec, Z in zip(self.records, self.expectation_components()):
            total += float(Z[0] @ h1_frame(rec.level).psi_vec)
        return total


def run_ml(model: CoefficientModel, n_params: int, L: int, *, eps0: float = 0.25,
           tree_shape: str = "balanced", seed: int = 0,
           rank_cap: int = DEFAULT_RANK_CAP, eval_budget: int = DEFAULT_EVAL_BUDGET,
           threads: int = 1, keep_results: list | None = None):
    """Build the multilevel surrogate level by level.

    Per level, an oracle over ((p+1)^N, n_level) backed by cached PDE solves
    feeds the three-step compression at accuracy eps_l.  Returns the
    surrogate and per-level diagnostics; a budget abort raises BudgetError
    with the diagnostics gathered so far attached as `partial_diagnostics`.
    """
    if n_params < 1:
        raise ValueError("need at least one parametric dimension")
    plan = LevelPlan(L, eps0)
    seeds = np.random.SeedSequence(seed).spawn(L + 1)
    budget = EvalBudget(eval_budget)
    timer = time.process_time if threads == 1 else time.perf_counter

    records: list[LevelRecord] = []
    diags: list[LevelDiagnostics] = []
    for level in range(L + 1):
        p = plan.degrees[level]
        eps_l = plan.accuracies[level]
        grid = CollocationGrid(p)
        n_spatial = build_grid(level).n
        diag = LevelDiagnostics(level=level, degree=p, n_spatial=n_spatial,
                                eps_target=eps_l)
        t0 = timer()
        nodes = grid.nodes

        def fetch(j, level=level, nodes=nodes):
            y = nodes[list(j)]
            return delta_vector(y, level, model)

        source = ColumnSource((p + 1,) * n_params, n_spatial, fetch,
                              max_workers=threads, budget=budget)
        tree = build_tree(n_params + 1, tree_shape)
        rng = np.random.default_rng(seeds[level])
        try:
            result: ApproxResult = approximate_tensor(
                source, tree, eps_l, rng=rng, rank_cap=rank_cap, budget=budget)
        except BudgetError as err:
            diag.time_s = timer() - t0
            diag.fibers = source.n_fetched
            diag.pde_solves = source.n_fetched * (1 if level == 0 else 2)
            diags.append(diag)
            err.partial_diagnostics = diags
            raise
        diag.time_s = timer() - t0
        diag.step1_evals = result.step1_evals
        diag.step2_evals = result.step2_evals
        diag.fibers = source.n_fetched
        diag.pde_solves = source.n_fetched * (1 if level == 0 else 2)
        diag.cross_residual = result.cross_diag.validation_residual
        diag.converged = result.cross_diag.converged
        rep = storage_and_ranks(result.tensor)
        diag.r_max, diag.r_eff, diag.storage = rep.r_max, rep.r_eff, rep.storage_scalars
        records.append(LevelRecord(level, grid, result.tensor))
        diags.append(diag)
        if keep_results is not None:
            keep_results.append(result)
    return MLSurrogate(model, n_params, plan, records), diags


def prolongate_to(v: np.ndarray, from_level: int, to_level: int) -> np.ndarray:
    out = v
    for lev in range(from_level + 1, to_level + 1):
        out = prolongation_matrix(lev) @ out
    return out


@dataclass
class ErrorMetrics:
    samples: int
    seed: int
    eps_ml_u: float
    eps_ml_psi: float
    eps_level_u: list = field(default_factory=list)
    eps_e_u: float | None = None
    eps_e_psi: float | None = None


def error_metrics(surrogate: MLSurrogate, reference: MLSurrogate | None = None,
                  samples: int = 100, seed: int = 0,
                  per_level: bool = True) -> ErrorMetrics:
    """Sampled relative errors of the surrogate in the H1_0 seminorm.

    eps_ml compares the surrogate against direct FE solves at the top level
    over `samples` random parameters; the per-level errors compare each
    compressed level interpolant against the exact level difference at the
    same samples.  With a reference surrogate (same model, higher level) the
    expectation errors are computed at the reference level.
    """
    if reference is not None:
        if reference.model != surrogate.model or reference.n_params != surrogate.n_params:
            raise ValueError("reference surrogate was built for a different problem")
        if reference.max_level < surrogate.max_level:
            raise ValueError("reference level must not be below the surrogate level")
    model = surrogate.model
    N = surrogate.n_params
    L = surrogate.max_level
    rng = np.random.default_rng(seed)
    Y = rng.uniform(-1.0, 1.0, size=(samples, N))

    frame_top = h1_frame(L)
    comps = surrogate.components_h1(Y)
    surr_nodal = surrogate._accumulate_nodal(comps)
    psi_surr = surrogate.psi_batch(Y)

    num_ml = 0.0
    den = 0.0
    num_psi = 0.0
    den_psi = 0.0
    num_level = np.zeros(L + 1)
    for i in range(samples):
        if per_level:
            ladder = [solve_at(Y[i], lev, model) for lev in range(L + 1)]
            u_direct = ladder[L]
            for lev in range(L + 1):
                if lev == 0:
                    d_nodal = ladder[0]
                else:
                    d_nodal = ladder[lev] - prolongation_matrix(lev) @ ladder[lev - 1]
                z_exact = h1_frame(lev).to_h1(d_nodal)
                num_level[lev] += float(np.sum((comps[lev][i] - z_exact) ** 2))
        else:
            u_direct = solve_at(Y[i], L, model)
        diff = frame_top.to_h1(surr_nodal[i] - u_direct)
        num_ml += float(diff @ diff)
        zd = frame_top.to_h1(u_direct)
        den += float(zd @ zd)
        psi_d = functional_psi(u_direct, L)
        num_psi += (psi_surr[i] - psi_d) ** 2
        den_psi += psi_d**2

    metrics = ErrorMetrics(
        samples=samples, seed=seed,
        eps_ml_u=float(np.sqrt(num_ml / den)),
        eps_ml_psi=float(np.sqrt(num_psi / den_psi)),
        eps_level_u=(list(np.sqrt(num_level / den)) if per_level else []),
    )
    if reference is not None:
        L_ref = reference.max_level
        frame_ref = h1_frame(L_ref)
        e_surr = prolongate_to(surrogate.expectation(), L, L_ref)
        e_ref = reference.expectation()
        z_ref = frame_ref.to_h1(e_ref)
        metrics.eps_e_u = float(np.linalg.norm(frame_ref.to_h1(e_surr - e_ref))
                                / np.linalg.norm(z_ref))
        psi_ref = reference.expectation_psi()
        metrics.eps_e_psi = float(abs(surrogate.expectation_psi() - psi_ref)
                                  / abs(psi_ref))
    return metrics
