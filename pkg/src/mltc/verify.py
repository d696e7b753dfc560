"""Built-in self-verification suites (deterministic, a few minutes total)."""

from __future__ import annotations

import math

import numpy as np

from . import colloc, cross, driver, fem, fields, htensor


def _random_htensor(tree, sizes, rmax, rng):
    ranks = {n.index: (1 if n.parent == -1 else int(rng.integers(1, rmax + 1)))
             for n in tree.nodes}
    frames = {n.index: rng.standard_normal((sizes[n.modes[0]], ranks[n.index]))
              for n in tree.leaves()}
    transfers = {n.index: rng.standard_normal(
        (ranks[n.index], ranks[n.children[0]], ranks[n.children[1]]))
        for n in tree.internal_nodes()}
    return htensor.HTensor(tree, sizes, frames, transfers)


def suite_htensor():
    rng = np.random.default_rng(101)
    for trial in range(20):
        d = int(rng.integers(2, 6))
        shape = "balanced" if trial % 2 == 0 else "linear"
        tree = htensor.build_tree(d, shape)
        sizes = tuple(int(rng.integers(2, 5)) for _ in range(d))
        X = _random_htensor(tree, sizes, 3, rng)
        T = htensor.ht_full(X)
        scale = max(abs(T).max(), 1e-300)
        idx = tuple(int(rng.integers(n)) for n in sizes)
        if abs(htensor.ht_entry(X, idx) - T[idx]) > 1e-12 * scale:
            return f"entry mismatch at trial {trial}"
        nrm = np.linalg.norm(T.ravel())
        if abs(htensor.ht_norm(X) - nrm) > 1e-10 * max(nrm, 1e-300):
            return f"norm mismatch at trial {trial}"
        Y = htensor.ht_from_dense(T, tree, 1e-12)
        if abs(htensor.ht_full(Y) - T).max() > 1e-9 * scale:
            return f"from_dense round trip failed at trial {trial}"
    return None


def suite_cross():
    rng = np.random.default_rng(202)
    tree = htensor.build_tree(6, "balanced")
    sizes = (4, 4, 4, 4, 4, 5)
    X0 = _random_htensor(tree, sizes, 3, rng)
    T0 = htensor.ht_full(X0)
    oracle = cross.EntryOracle(sizes, lambda idx: T0[idx])
    source = cross.ColumnSource.from_entry_oracle(oracle)
    result = cross.approximate_tensor(source, tree, 1e-10,
                                      rng=np.random.default_rng(7))
    probes = np.column_stack([rng.integers(0, n, 500) for n in sizes])
    approx = htensor.ht_entries(result.tensor, probes)
    exact = np.array([T0[tuple(r)] for r in probes])
    err = abs(approx - exact).max() / abs(T0).max()
    if err > 1e-8:
        return f"synthetic recovery error {err:.2e}"
    if result.step2_evals >= T0.size:
        return "cross approximation evaluated too many entries"
    return None


def suite_fem():
    grid = fem.build_grid(0)
    A = fem.assemble(grid, lambda p: np.ones(p.shape[0]))
    interior = np.flatnonzero(~grid.boundary_mask)
    if not np.allclose(A.diagonal()[interior], 8.0 / 3.0):
        return "interior stencil diagonal is not 8/3"
    model = fields.make_model("affine", "zero", 1)
    psi_target = 0.5 * 0.03514425
    u4 = fem.solve_at(np.zeros(1), 4, model)
    if abs(fem.functional_psi(u4, 4) - psi_target) > 5e-5:
        return "psi value off at level 4"
    norms = []
    ref = fem.solve_at(np.zeros(1), 6, model)
    for lev in (2, 3):
        u = fem.solve_at(np.zeros(1), lev, model)
        diff = driver.prolongate_to(u, lev, 6) - ref
        norms.append(fem.h1_frame(6).seminorm(diff))
    ratio = norms[0] / norms[1]
    if not 1.6 <= ratio <= 2.4:
        return f"H1 self-convergence ratio {ratio:.2f} outside [1.6, 2.4]"
    rng = np.random.default_rng(5)
    m2 = fields.make_model("affine", "exponential", 3)
    y = rng.uniform(-1, 1, 3)
    dn = fem.delta_nodal(y, 2, m2)
    a = np.linalg.norm(fem.delta_vector(y, 2, m2))
    b = fem.seminorm_quadrature(dn, 2)
    if abs(a - b) > 1e-6 * b:
        return "H1 coordinate norm does not match quadrature"
    return None


def suite_driver():
    if driver.degree_schedule(7) != [4, 3, 3, 2, 2, 1, 1, 0]:
        return "degree schedule for L=7 is wrong"
    expected_n = [25, 81, 289, 1089, 4225, 16641, 66049, 263169]
    if [fem.build_grid(lev).n for lev in range(8)] != expected_n:
        return "grid sizes do not match the schedule"
    for p in range(11):
        w = colloc.CollocationGrid(p).quadrature_weights
        if w.min() <= 0 or abs(w.sum() - 1.0) > 1e-12:
            return f"quadrature weights invalid at degree {p}"
    if abs(colloc.stability_constant([0, 0]) - 1.0) > 1e-15:
        return "stability constant at degree 0 must be 1"
    model = fields.make_model("affine", "zero", 2)
    surrogate, _ = driver.run_ml(model, 2, 1, seed=3)
    u_det = fem.solve_at(np.zeros(2), 1, model)
    err = np.linalg.norm(surrogate.evaluate(np.array([0.4, -0.9])) - u_det)
    if err > 1e-10 * np.linalg.norm(u_det):
        return "degenerate model surrogate is parameter dependent"
    return None


SUITES = [
    ("htensor dense oracle", suite_htensor),
    ("cross exact recovery", suite_cross),
    ("fem convergence", suite_fem),
    ("driver schedule and weights", suite_driver),
]


def run_all(out=print) -> bool:
    ok = True
    for name, fn in SUITES:
        failure = fn()
        if failure is None:
            out(f"PASS {name}")
        else:
            out(f"FAIL {name}: {failure}")
            ok = False
    return ok
