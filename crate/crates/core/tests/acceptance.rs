//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 10 (2D geometry) takes tens of minutes; it runs only when
//! `JKO_SLOW=1` is set and is reported as skipped otherwise.

use std::process::ExitCode;
use std::time::Instant;

use jko_core::driver::{
    derivative_check, linear_fit_r2, lookup, preset_library, radial_mass_fraction, run,
    Overrides, Preset,
};
use jko_core::linalg::SparseMatrix;
use jko_core::oracles::{
    agg1d_steady, barenblatt, dlss_steady, l1_err, linf_err, nfp_constant, nfp_steady, reference_heat_solver,
};
use jko_core::qp::{solve_qp, QpProblem};
use jko_core::sqp::{sqp_step, warm_start, SqpParams};
use jko_core::{DensityField, Grid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn preset(name: &str, o: Overrides) -> Preset {
    let mut p = lookup(name).expect("preset exists");
    p.apply(&o).expect("valid overrides");
    p
}

fn sampled(grid: Grid, f: impl Fn(f64) -> f64) -> DensityField {
    DensityField::from_fn(grid, |x| f(x[0])).expect("nonnegative oracle")
}

/// Cell averages of `fine` over blocks of `factor` cells (1D).
fn coarsen(fine: &DensityField, coarse: Grid, factor: usize) -> DensityField {
    let v = fine
        .values
        .chunks(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect();
    DensityField::new(coarse, v).expect("same domain")
}

fn c1_heat_order() -> Verdict {
    let t_max = 0.1;
    let p = preset(
        "heat1d",
        Overrides {
            nx: Some(400),
            t_max: Some(t_max),
            ..Overrides::default()
        },
    );
    let grid = p.build_grid().unwrap();
    // Reference: backward Euler on a 4x refined grid with a tiny step.
    let mut fine_p = p.clone();
    fine_p.grid.nx = 1600;
    let fine = reference_heat_solver(&fine_p.initial_density().unwrap(), 1e-6, t_max).unwrap();
    let reference = coarsen(&fine, grid, 4);
    let taus = [2.5e-3, 1.25e-3, 6.25e-4, 3.125e-4];
    let table = jko_core::driver::convergence_study(&p, &taus, Some(&reference)).unwrap();
    let r = table.richardson_order;
    let e = table.reference_order.unwrap();
    let ok = (0.8..=1.2).contains(&r) && (0.8..=1.2).contains(&e);
    let errs: Vec<String> = table
        .rows
        .iter()
        .map(|row| format!("{:.3e}/{:.3e}", row.richardson, row.reference.unwrap()))
        .collect();
    verdict(
        ok,
        format!("slope err1 {r:.3}, err2 {e:.3} (need [0.8, 1.2]); errors {}", errs.join(" ")),
    )
}

fn c2_pme_beta() -> Verdict {
    let mut errs = Vec::new();
    for beta in [1.0, 2.0, 4.0] {
        let p = preset(
            "pme1d",
            Overrides {
                nx: Some(200),
                beta: Some(beta),
                t_max: Some(6e-3),
                tau: Some(5e-4),
                ..Overrides::default()
            },
        );
        let out = run(&p).unwrap();
        let bp = p.barenblatt_params().unwrap();
        let exact = sampled(out.final_rho.grid, |x| barenblatt(x, 6e-3, &bp));
        errs.push(l1_err(&out.final_rho, &exact).unwrap());
    }
    let ok = errs[1] < errs[0] && errs[2] < errs[1];
    verdict(
        ok,
        format!(
            "l1 errors for beta^-1 = 1, 0.5, 0.25: {:.4e} {:.4e} {:.4e} (need strictly decreasing)",
            errs[0], errs[1], errs[2]
        ),
    )
}

fn c3_structure() -> Verdict {
    let mut worst_drift: f64 = 0.0;
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut worst_min = f64::INFINITY;
    let mut failures = Vec::new();
    for mut p in preset_library() {
        if p.grid.dim == 2 {
            // desk scale: the first few steps at full resolution
            p.t_max = 2.0 * p.tau;
        }
        let out = match run(&p) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("{}: {e}", p.name));
                continue;
            }
        };
        let m0 = out.initial.mass;
        let hist: Vec<_> = out.history().collect();
        for w in hist.windows(2) {
            let drift = (w[1].mass - w[0].mass).abs() / m0;
            let rise = w[1].modified_energy - w[0].modified_energy;
            worst_drift = worst_drift.max(drift);
            worst_rise = worst_rise.max(rise);
            worst_min = worst_min.min(w[1].min_rho);
            let tol = 10.0 * p.sqp.qp_tol;
            if drift > 1e-8 || w[1].min_rho <= 0.0 || rise > tol {
                failures.push(format!(
                    "{} step {}: drift {drift:.2e} min {:.2e} rise {rise:.2e}",
                    p.name, w[1].step, w[1].min_rho
                ));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "max drift {worst_drift:.2e} (<= 1e-8), min rho {worst_min:.2e} (> 0), max modified-energy rise {worst_rise:.2e} (<= 10 qp_tol of each preset){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

fn c4_nfp() -> Verdict {
    let p = preset("nfp1d", Overrides::default());
    let out = run(&p).unwrap();
    let mass = out.initial.mass;
    let steady = sampled(out.final_rho.grid, |x| nfp_steady(x, 2.0, mass));
    let l1 = l1_err(&out.final_rho, &steady).unwrap();
    // decay window: gap between 1e-2 and 1e-8 of the initial gap
    let e_inf = out.diagnostics.last().unwrap().modified_energy;
    let gap0 = out.initial.modified_energy - e_inf;
    let (ts, ls): (Vec<f64>, Vec<f64>) = out
        .history()
        .filter_map(|d| {
            let gap = d.modified_energy - e_inf;
            (gap <= 1e-2 * gap0 && gap >= 1e-8 * gap0).then(|| (d.t, gap.ln()))
        })
        .unzip();
    let (slope, r2) = linear_fit_r2(&ts, &ls);
    let ok = l1 <= 2e-2 && r2 >= 0.98 && slope < 0.0;
    verdict(
        ok,
        format!(
            "l1 to steady state {l1:.3e} (<= 2e-2, C = {:.5}); log energy gap slope {slope:.3}, R^2 {r2:.4} over {} records (>= 0.98)",
            nfp_constant(2.0, mass),
            ts.len()
        ),
    )
}

fn c5_agg1d() -> Verdict {
    let p = preset("agg1d", Overrides::default());
    let out = run(&p).unwrap();
    let steady = sampled(out.final_rho.grid, agg1d_steady);
    let l1 = l1_err(&out.final_rho, &steady).unwrap();
    verdict(l1 <= 5e-2, format!("l1 to (1/pi) sqrt(2 - x^2) at t = {}: {l1:.3e} (<= 5e-2)", p.t_max))
}

fn c6_dlss1d() -> Verdict {
    let p = preset("dlss1d", Overrides::default());
    let out = run(&p).unwrap();
    let steady = sampled(out.final_rho.grid, dlss_steady);
    let linf = linf_err(&out.final_rho, &steady).unwrap();
    verdict(
        linf <= 1e-2,
        format!("linf to the standard Gaussian at t = {}: {linf:.3e} (<= 1e-2)", p.t_max),
    )
}

/// Minimizer by enumerating active bound sets.
fn active_set_oracle(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, bounds: &[usize]) -> DVector<f64> {
    let n = h.nrows();
    let m = a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0..(1usize << bounds.len()) {
        let active: Vec<usize> = (0..bounds.len()).filter(|k| mask >> k & 1 == 1).map(|k| bounds[k]).collect();
        let rows = m + active.len();
        let mut k = DMatrix::zeros(n + rows, n + rows);
        let mut rhs = DVector::zeros(n + rows);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        for i in 0..n {
            rhs[i] = -g[i];
        }
        for r in 0..m {
            for c in 0..n {
                k[(n + r, c)] = a[(r, c)];
                k[(c, n + r)] = a[(r, c)];
            }
            rhs[n + r] = b[r];
        }
        for (j, &i) in active.iter().enumerate() {
            k[(n + m + j, i)] = 1.0;
            k[(i, n + m + j)] = 1.0;
        }
        let Some(sol) = k.clone().lu().solve(&rhs) else { continue };
        // singular systems (too many active constraints) may still "solve"
        if (&k * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        if bounds.iter().any(|&i| z[i] < -1e-12) {
            continue;
        }
        let f = 0.5 * z.dot(&(h * &z)) + g.dot(&z);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, z));
        }
    }
    best.expect("feasible by construction").1
}

fn c7_qp() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_err: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    let mut unconverged = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=2.min(n - 1));
        let nb = rng.random_range(0..=3.min(n));
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let b = &a * z0;
        let mut bounds: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            bounds.swap(i, rng.random_range(0..=i));
        }
        bounds.truncate(nb);
        bounds.sort_unstable();

        let q = QpProblem {
            h: SparseMatrix::from_dense(n, n, h.transpose().as_slice()),
            g: g.as_slice().to_vec(),
            a: SparseMatrix::from_dense(m, if m == 0 { 0 } else { n }, a.transpose().as_slice()),
            b: b.as_slice().to_vec(),
            nonneg: bounds.clone(),
            center: vec![0.0; n],
        };
        let r = solve_qp(&q, 1e-11, 100).unwrap();
        if !r.converged {
            unconverged += 1;
            continue;
        }
        worst_res = worst_res.max(r.kkt_residuals.max());
        let z = active_set_oracle(&h, &g, &a, &b, &bounds);
        let err = r.z.iter().zip(z.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_err = worst_err.max(err);
    }
    verdict(
        unconverged == 0 && worst_err <= 1e-8 && worst_res <= 1e-9,
        format!("200 instances: max |z - oracle| {worst_err:.2e} (<= 1e-8), max KKT residual {worst_res:.2e} (<= 1e-9), unconverged {unconverged}"),
    )
}

fn c8_derivatives() -> Verdict {
    let cases: [(&str, usize); 9] = [
        ("heat1d", 20),
        ("pme1d", 20),
        ("nfp1d", 20),
        ("agg1d", 20),
        ("dlss1d_doublewell", 20),
        ("ring2d", 8),
        ("aggdrift2d", 10),
        ("aggdiff2d", 10),
        ("dlss2d", 10),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, nx) in cases {
        let p = preset(
            name,
            Overrides {
                nx: Some(nx),
                ..Overrides::default()
            },
        );
        let r = derivative_check(&p, 11, false).unwrap();
        assert!(r.n_cells <= 100);
        worst = worst.max(r.worst());
        parts.push(format!("{name} {:.1e}", r.worst()));
    }
    verdict(worst <= 1e-5, format!("max relative FD error {worst:.2e} (<= 1e-5): {}", parts.join(", ")))
}

fn c9_rates() -> Verdict {
    let p = preset(
        "heat1d",
        Overrides {
            nx: Some(50),
            ..Overrides::default()
        },
    );
    let prob = p.problem().unwrap();
    let warm = warm_start(&prob.rho_prev, None, None, 1e-6).unwrap();
    let base = SqpParams {
        max_inner: 200,
        record_iterates: true,
        ..SqpParams::default()
    };
    let star = sqp_step(
        &prob,
        &SqpParams {
            tol_rel: 1e-12,
            qp_tol: 1e-12,
            ..base.clone()
        },
        &warm,
    )
    .unwrap();
    let exact = sqp_step(
        &prob,
        &SqpParams {
            tol_rel: 1e-10,
            ..base.clone()
        },
        &warm,
    )
    .unwrap();
    let lagged = sqp_step(
        &prob,
        &SqpParams {
            tol_rel: 1e-10,
            hessian_lag: 5,
            ..base
        },
        &warm,
    )
    .unwrap();
    let dist = |x: &[f64]| {
        x.iter()
            .zip(&star.state.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    // errors above the over-converged reference's own accuracy
    let floor = 1e-9;
    let errs = |r: &jko_core::StepResult| -> Vec<f64> {
        r.iterates.iter().map(|u| dist(u)).filter(|&e| e > floor).collect()
    };
    let ee = errs(&exact);
    let quad: Vec<f64> = ee.windows(2).map(|w| w[1] / (w[0] * w[0])).collect();
    let quad_max = quad.iter().copied().fold(0.0, f64::max);
    let le = errs(&lagged);
    let tail = &le[le.len().saturating_sub(12)..];
    let factors: Vec<f64> = tail.windows(2).map(|w| w[1] / w[0]).collect();
    let fmax = factors.iter().copied().fold(0.0, f64::max);
    let ls: Vec<f64> = tail.iter().map(|e| e.ln()).collect();
    let idx: Vec<f64> = (0..tail.len()).map(|i| i as f64).collect();
    let (slope, r2) = linear_fit_r2(&idx, &ls);
    let lag_quad_max = tail.windows(2).map(|w| w[1] / (w[0] * w[0])).fold(0.0, f64::max);
    let ok = exact.converged
        && lagged.converged
        && exact.inner_iterations < lagged.inner_iterations
        && quad_max <= 1e3
        && tail.len() >= 4
        && fmax < 1.0
        && slope < 0.0
        && r2 >= 0.9
        && lag_quad_max > quad_max;
    verdict(
        ok,
        format!(
            "inner iterations exact {} < lagged {}; exact max e_(l+1)/e_l^2 {quad_max:.2e} (bounded, <= 1e3); lagged tail contraction max {fmax:.3}, log-linear R^2 {r2:.3}, max e_(l+1)/e_l^2 {lag_quad_max:.2e}",
            exact.inner_iterations, lagged.inner_iterations
        ),
    )
}

fn c10_geometry() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    let ring = preset("ring2d", Overrides::default());
    let out = run(&ring).unwrap();
    let dx = ring.build_grid().unwrap().dx();
    let c = ring.center.unwrap();
    let f = radial_mass_fraction(&out.final_rho, c, 0.5 - 2.0 * dx, 0.5 + 2.0 * dx);
    ok &= f >= 0.8;
    // For this kernel the ring energy is proportional to 3R^4/2 - R^2, so the
    // minimizing radius is 1/sqrt(3); report the shell there as well.
    let r_star = 1.0 / 3f64.sqrt();
    let f_star = radial_mass_fraction(&out.final_rho, c, r_star - 2.0 * dx, r_star + 2.0 * dx);
    parts.push(format!("ring shell mass {f:.3} (>= 0.8; at r = 1/sqrt(3): {f_star:.3})"));

    let disk = preset("disk2d", Overrides::default());
    let out = run(&disk).unwrap();
    let c = disk.center.unwrap();
    let inside = radial_mass_fraction(&out.final_rho, c, 0.0, 1.0 + 2.0 * dx);
    let core = radial_mass_fraction(&out.final_rho, c, 0.0, 0.5);
    ok &= inside >= 0.8 && (0.15..=0.35).contains(&core);
    parts.push(format!("disk r <= 1 + 2dx mass {inside:.3} (>= 0.8), r <= 0.5 mass {core:.3} (uniform: 0.25)"));

    let ann = preset("aggdrift2d", Overrides::default());
    let out = run(&ann).unwrap();
    let dx = ann.build_grid().unwrap().dx();
    let c = ann.center.unwrap();
    let shell = radial_mass_fraction(&out.final_rho, c, 0.5 - 2.0 * dx, 1.25f64.sqrt() + 2.0 * dx);
    let hole = radial_mass_fraction(&out.final_rho, c, 0.0, 0.5 - 2.0 * dx);
    ok &= shell >= 0.8;
    parts.push(format!("annulus shell mass {shell:.3} (>= 0.8), hole mass {hole:.3}"));
    verdict(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let slow = std::env::var("JKO_SLOW").is_ok_and(|v| v == "1");
    let criteria: [(u32, &str, fn() -> Verdict, bool); 10] = [
        (1, "heat equation temporal order", c1_heat_order, false),
        (2, "porous medium vs Barenblatt", c2_pme_beta, false),
        (3, "structure preservation", c3_structure, false),
        (4, "nonlinear Fokker-Planck equilibrium", c4_nfp, false),
        (5, "1D aggregation equilibrium", c5_agg1d, false),
        (6, "1D DLSS equilibrium", c6_dlss1d, false),
        (7, "QP vs active-set oracle", c7_qp, false),
        (8, "derivative audits", c8_derivatives, false),
        (9, "exact vs lagged Hessian rates", c9_rates, false),
        (10, "2D ring, disk and annulus", c10_geometry, true),
    ];
    let only: Option<u32> = std::env::var("JKO_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (id, name, check, is_slow) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        if is_slow && !slow {
            println!("criterion {id:>2} SKIP  {name}: slow suite, set JKO_SLOW=1");
            continue;
        }
        let clock = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {status}  {name} [{:.1}s]: {}",
            clock.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
