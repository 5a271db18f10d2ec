"""Acceptance criteria, one test per criterion.

Each test records a ``[criterion N] PASS/FAIL`` line (shown live with ``-s``
and repeated in the terminal summary) before asserting.
"""
import hashlib
import json
import time

import numpy as np
import pytest
import test_autodiff as adjoint
from oracles import correlation_ratio, naive_loss

from conftest import smooth_random, smooth_velocity
from fdreg import autodiff as ad
from fdreg.basis import eval_basis, init_learned, polynomial
from fdreg.cli import main as cli_main
from fdreg.deformation import (
    DeformationField,
    VelocityField,
    compose,
    exponentiate,
    exponentiate_tensor,
    jacobian_determinant,
    warp_tensor,
)
from fdreg.evaluation import TRE_CLIP, aggregate, tre
from fdreg.io import save_config
from fdreg.pipeline import LevelConfig, RegistrationConfig, register
from fdreg.regularizer import bending_energy_tensor
from fdreg.similarity import (
    MomentFields,
    SamplingGrid,
    WeightKernel,
    bidirectional_loss_tensor,
    compute_moments,
    correlation_ratio_oracle,
    locor_loss,
    locor_loss_tensor,
    solve_local_wls,
)
from fdreg.synthetic import make_case
from fdreg.volume import GridGeometry, Volume


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- 1 ---------------------------------------------------------------------


def test_c01_loss_matches_naive_evaluation(acceptance):
    rng = np.random.default_rng(101)
    worst, n_pairs = 0.0, 0
    t0 = time.perf_counter()
    for k in range(24):
        shape = tuple(rng.integers(8, 17, 3))
        J = (2, 3, 4)[k % 3]
        basis = polynomial(J - 1) if k % 2 else init_learned(J, 1, seed=k)
        a = smooth_random(rng, shape)
        b = np.cos(5 * a) + 0.3 * smooth_random(rng, shape)
        mask = rng.random(shape) > 0.05
        sigma = float(rng.uniform(1.0, 2.5))
        grid = SamplingGrid.random(3, rng)
        for variant in ("log", "normalized"):
            lv = locor_loss(Volume(b, valid_mask=mask), Volume(a), basis, WeightKernel(sigma), grid, variant)
            ref, _ = naive_loss(b, a, basis, sigma, grid.stride, grid.shift, mask, variant, ridge=1e-6)
            worst = max(worst, abs(lv.value - ref) / abs(ref))
        n_pairs += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 60 and n_pairs >= 20
    acceptance(1, ok, f"{n_pairs} pairs x 2 variants, max rel err {worst:.2e} (< 1e-9), {elapsed:.1f} s (< 60 s)")
    assert ok


# -- 2 ---------------------------------------------------------------------


def test_c02_wls_matches_normal_equations(acceptance):
    rng = np.random.default_rng(202)
    worst, total = 0.0, 0
    for J in range(2, 7):
        n = 200
        m = rng.standard_normal((n, J, J))
        gram = m @ np.swapaxes(m, 1, 2) + 0.5 * np.eye(J)
        cross = rng.standard_normal((n, J, 1))
        mf = MomentFields(gram, cross, np.ones((1, n)), np.ones(n), np.zeros((1, n)), np.zeros((n, 3), int))
        lc = solve_local_wls(mf, ridge=0.0)
        ref = np.linalg.inv(gram) @ cross
        err = np.linalg.norm(lc.theta - ref, axis=(1, 2)) / np.linalg.norm(ref, axis=(1, 2))
        worst = max(worst, float(err.max()))
        total += n
    ok = worst < 1e-10 and total == 1000
    acceptance(2, ok, f"{total} SPD systems, J=2..6, max rel err {worst:.2e} (< 1e-10)")
    assert ok


# -- 3, 4 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def gradient_fixture():
    rng = np.random.default_rng(303)
    a = smooth_random(rng, (12, 12, 12))
    a = (a - a.min()) / (a.max() - a.min())
    b = np.sin(3.0 * a) + 0.1 * smooth_random(rng, (12, 12, 12))
    return {
        "A": Volume(a), "B": Volume(b), "v": smooth_velocity(rng, (12, 12, 12), 0.8),
        "ab": init_learned(4, 1, 1), "ba": init_learned(4, 1, 2),
        "grid": SamplingGrid(3, (1, 0, 2)), "kernel": WeightKernel(2.0),
    }


def _full_loss(fx, v, w_ab, w_ba, detach=True, variant="log"):
    loss, _ = bidirectional_loss_tensor(fx["A"], fx["B"], v, fx["ab"], fx["ba"], w_ab, w_ba, fx["kernel"],
                                        fx["grid"], variant, 1e-6, 7, detach)
    return loss + bending_energy_tensor(v) * 0.1


def _gradients(fx, params, detach=True, variant="log"):
    leaves = [ad.Tensor(p, requires_grad=True) for p in params]
    grads = ad.backward(_full_loss(fx, *leaves, detach=detach, variant=variant))
    return [grads[t] for t in leaves]


@pytest.mark.parametrize("variant", ["log", "normalized"])
def test_c03_gradient_matches_finite_differences(acceptance, gradient_fixture, variant):
    fx = gradient_fixture
    params = [fx["v"], fx["ab"].omega, fx["ba"].omega]
    grads = _gradients(fx, params, variant=variant)
    rng = np.random.default_rng(3)
    h = 1e-5

    def value(ps):
        return float(_full_loss(fx, *[ad.Tensor(p) for p in ps], variant=variant).value)

    worst = 0.0
    for k, name in enumerate(("v", "omega_ab", "omega_ba")):
        g = grads[k].ravel()
        scale = 1e-3 * np.abs(g).max()
        picks = np.concatenate([np.argsort(-np.abs(g))[:8], rng.choice(g.size, 8, replace=False)])
        for i in picks:
            fd = []
            for sign in (1, -1):
                ps = [p.copy() for p in params]
                ps[k].ravel()[i] += sign * h
                fd.append(value(ps))
            fd = (fd[0] - fd[1]) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), scale))
        # one directional derivative over all entries of this parameter
        d = rng.standard_normal(params[k].shape)
        ps_p = [p.copy() for p in params]
        ps_m = [p.copy() for p in params]
        ps_p[k] += h * d
        ps_m[k] -= h * d
        fd = (value(ps_p) - value(ps_m)) / (2 * h)
        worst = max(worst, abs(np.sum(grads[k] * d) - fd) / abs(fd))
    ok = worst < 1e-4
    acceptance(3, ok, f"{variant} loss on 12^3: gradient vs central differences (h=1e-5), "
                      f"max rel err {worst:.2e} (< 1e-4)")
    assert ok


def test_c03_op_adjoints(acceptance):
    rng = np.random.default_rng(33)
    failures = []
    checks = [(name, f, [rng.standard_normal(s) for s in shapes], adjoint.jvp_complex)
              for name, (f, shapes) in sorted(adjoint.ELEMENTWISE.items())]
    m = rng.standard_normal((4, 3, 3))
    spd = m @ np.swapaxes(m, 1, 2) + 3 * np.eye(3)
    clampx = rng.standard_normal(20)
    clampx[np.abs(clampx) < 0.05] = 0.5
    taps = tuple(rng.random(5) for _ in range(3))
    coords = np.stack([rng.integers(0, s - 1, 30) + rng.uniform(0.2, 0.8, 30) for s in (5, 6, 7)])
    checks += [
        ("log", lambda a: ad.log(a), [rng.uniform(0.5, 2.0, (3, 3))], adjoint.jvp_complex),
        ("solve", lambda A, b: ad.solve(A, b, 1e-3), [spd, rng.standard_normal((4, 3, 2))], adjoint.jvp_complex),
        ("clamp_min", lambda a: ad.clamp_min(a, 0.0), [clampx], adjoint.jvp_richardson),
        ("sep_conv", lambda x: ad.sep_conv(x, taps, (3, 2, 3), (2, 1, 0)), [rng.standard_normal((2, 7, 6, 8))],
         adjoint.jvp_richardson),
        ("trilinear", lambda d, c: ad.trilinear(d, c, True)[0], [rng.standard_normal((2, 5, 6, 7)), coords],
         adjoint.jvp_richardson),
    ]
    for name, f, xs, jvp in checks:
        try:
            adjoint.assert_adjoint(f, xs, rng, jvp=jvp)
        except AssertionError:
            failures.append(name)
    ok = not failures
    acceptance(3, ok, f"{len(checks)} op adjoints pass the dot-product test at 1e-10"
                      + (f"; failing: {failures}" if failures else ""))
    assert ok


def test_c04_envelope_theorem(acceptance, gradient_fixture):
    fx = gradient_fixture
    params = [fx["v"], fx["ab"].omega, fx["ba"].omega]
    worst = 0.0
    for variant in ("log", "normalized"):
        detached = _gradients(fx, params, detach=True, variant=variant)
        through = _gradients(fx, params, detach=False, variant=variant)
        worst = max(worst, max(_rel(d, t) for d, t in zip(detached, through)))
    ok = worst < 1e-4
    acceptance(4, ok, f"detached vs through-solve gradients (v, omega), max rel diff {worst:.2e} (< 1e-4)")
    assert ok


# -- 5 ---------------------------------------------------------------------


def test_c05_scale_invariance(acceptance, gradient_fixture):
    fx = gradient_fixture
    a = fx["A"].data.reshape(1, -1)
    n = a.shape[1]
    worst = 0.0

    def grads(target):
        v = ad.Tensor(fx["v"], requires_grad=True)
        w = ad.Tensor(fx["ab"].omega, requires_grad=True)
        fwd, _ = exponentiate_tensor(v)
        warped, mask = warp_tensor(ad.Tensor(fx["B"].data), None, fwd)
        loss, _ = locor_loss_tensor(target, ad.reshape(warped, (1, n)), mask, (12, 12, 12), fx["ab"], w,
                                    fx["kernel"], fx["grid"], "log")
        g = ad.backward(loss)
        return g[v], g[w]

    base = grads(a)
    for c in (0.1, 10.0):
        scaled = grads(c * a)
        worst = max(worst, max(_rel(s, b) for s, b in zip(scaled, base)))
    ok = worst < 1e-10
    acceptance(5, ok, f"I_A scaled by 0.1 and 10: log-variant gradients (v, omega) max rel change {worst:.2e} "
                      "(< 1e-10)")
    assert ok


# -- 6 ---------------------------------------------------------------------


def test_c06_functional_dependence_detected(acceptance):
    rng = np.random.default_rng(606)
    worst = 0.0
    for k in range(5):
        x = smooth_random(rng, (14, 14, 14), 1.0)
        coef = rng.standard_normal(4)
        y = np.polynomial.polynomial.polyval(x, coef)
        mf = compute_moments(Volume(y), eval_basis(polynomial(3), x[None]), WeightKernel(2.0), SamplingGrid(2))
        lc = solve_local_wls(mf, ridge=0.0)
        resid = mf.target_sq[0] - np.einsum("nj,nj->n", lc.theta[..., 0], mf.cross[..., 0])
        worst = max(worst, float(np.max(np.abs(resid) / mf.target_sq[0])))
    ok = worst < 1e-8
    acceptance(6, ok, f"I_A = cubic(I_B), cubic basis: max per-center residual / second moment {worst:.2e} (< 1e-8)")
    assert ok


# -- 7 ---------------------------------------------------------------------


def test_c07_correlation_ratio_oracle(acceptance):
    rng = np.random.default_rng(707)
    exact, worst = 0.0, 0.0
    for _ in range(5):
        a = rng.integers(0, 8, (8, 8, 8)).astype(float)
        g = rng.standard_normal(8)
        exact = max(exact, abs(correlation_ratio_oracle(Volume(a), Volume(g[a.astype(int)]))))
        b = np.round(rng.random((8, 8, 8)) * 16) / 16
        worst = max(worst, abs(correlation_ratio_oracle(Volume(a), Volume(b)) - correlation_ratio(a, b)))
    ok = exact < 1e-12 and worst < 1e-10
    acceptance(7, ok, f"1-CR for exact dependence {exact:.1e} (= 0); vs brute force max abs diff {worst:.1e} (< 1e-10)")
    assert ok


# -- 8 ---------------------------------------------------------------------


def test_c08_diffeomorphism(acceptance):
    rng = np.random.default_rng(808)
    geom = GridGeometry((32, 32, 32), np.eye(4))
    inv_err, min_jac = 0.0, np.inf
    for _ in range(3):
        fwd, inv = exponentiate(VelocityField(smooth_velocity(rng, geom.shape, 1.0, sigma=4.0), geom))
        err = np.linalg.norm(compose(fwd, inv).displacement, axis=0)[4:-4, 4:-4, 4:-4]
        inv_err = max(inv_err, float(err.max()))
        for sigma in (2.0, 4.0):
            fwd2, _ = exponentiate(VelocityField(smooth_velocity(rng, geom.shape, 2.0, sigma=sigma), geom))
            min_jac = min(min_jac, float(jacobian_determinant(fwd2)[1:-1, 1:-1, 1:-1].min()))
    ok = inv_err < 0.05 and min_jac > 0
    acceptance(8, ok, f"max interior |exp(v) o exp(-v) - Id| {inv_err:.4f} vox (< 0.05); "
                      f"min Jacobian det {min_jac:.3f} (> 0)")
    assert ok


# -- 9 ---------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def benchmark_runs():
    rows = []
    for seed in SEEDS:
        case = make_case(64, seed=seed)
        initial = tre(DeformationField.identity(case.ground_truth.geometry), case.ground_truth, case.foreground)
        for basis in ("learned", "polynomial"):
            t0 = time.perf_counter()
            res = register(case.fixed, case.moving, RegistrationConfig(basis=basis))
            rows.append({"seed": seed, "basis": basis, "initial": initial["mean"],
                         "tre": tre(res.inverse, case.ground_truth, case.foreground)["mean"],
                         "time": time.perf_counter() - t0})
            print(json.dumps(rows[-1]))
    return rows


@pytest.mark.slow
def test_c09_synthetic_benchmark(acceptance, benchmark_runs):
    def pick(basis, key):
        return [r[key] for r in benchmark_runs if r["basis"] == basis]

    initial = float(np.mean(pick("learned", "initial")))
    learned = aggregate(pick("learned", "tre"), clip=TRE_CLIP)["mean"]
    poly = aggregate(pick("polynomial", "tre"), clip=TRE_CLIP)["mean"]
    slowest = max(r["time"] for r in benchmark_runs)
    per_case = ", ".join(f"{t:.2f}" for t in pick("learned", "tre"))
    checks = {
        "initial TRE ~3": 2.5 <= initial <= 3.5,
        "learned < 0.6": learned < 0.6,
        "reduction >= 80%": learned <= 0.2 * initial,
        "learned <= polynomial": learned <= poly,
        "< 10 min per case": slowest < 600,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance(9, ok, f"64^3 x 5 cases: initial mean TRE {initial:.2f}, learned {learned:.3f} ({per_case}), "
                      f"polynomial {poly:.3f}, slowest run {slowest:.0f} s on this machine"
                      + (f"; failed: {failed}" if failed else ""))
    assert ok


# -- 10 --------------------------------------------------------------------


def test_c10_determinism(acceptance, tmp_path, capsys):
    case_dir = tmp_path / "case"
    assert cli_main(["synth", "--geometry", "32", "--seed", "10", "--out", str(case_dir)]) == 0
    cfg = tmp_path / "cfg.yaml"
    save_config(RegistrationConfig(levels=[LevelConfig(4, 20), LevelConfig(2, 20), LevelConfig(1, 10)]), cfg)
    digests, traces = [], []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["register", str(case_dir / "fixed.nii.gz"), str(case_dir / "moving.nii.gz"),
                         "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
        digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())})
        traces.append(json.loads((out / "trace.json").read_text())["loss"])
    capsys.readouterr()
    ok = digests[0] == digests[1] and traces[0] == traces[1]
    acceptance(10, ok, f"two seeded CLI runs: loss traces identical ({len(traces[0])} values), "
                       f"{len(digests[0])} output checksums identical")
    assert ok


# -- 11 --------------------------------------------------------------------


def test_c11_ablation_plumbing(acceptance):
    case = make_case(32, seed=11)
    done, errors = [], []
    for variant in ("log", "normalized"):
        for basis in ("learned", "polynomial"):
            for deriv in (False, True):
                cfg = RegistrationConfig(levels=[LevelConfig(2, 5), LevelConfig(1, 5)], variant=variant,
                                         basis=basis, derivative_channel=deriv,
                                         J=4 if not (deriv and basis == "polynomial") else 6,
                                         degree=2 if deriv and basis == "polynomial" else None)
                name = f"{variant}/{basis}/{'deriv' if deriv else 'plain'}"
                try:
                    res = register(case.fixed, case.moving, cfg)
                    assert np.all(np.isfinite(res.loss_trace)) and np.all(np.isfinite(res.inverse.displacement))
                    done.append(name)
                except Exception as exc:  # report every combination
                    errors.append(f"{name}: {exc}")
    ok = not errors
    acceptance(11, ok, f"{len(done)}/8 combinations (log/normalized x learned/polynomial x +-derivative) "
                       "completed on 32^3" + (f"; errors: {errors}" if errors else ""))
    assert ok
