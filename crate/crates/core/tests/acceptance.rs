//! Acceptance checks. Runs as a plain binary so every criterion prints its
//! own PASS/FAIL line; exits non-zero if any gating criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nudged_pf::bootstrap_pf::pf_assimilation_cycle;
use nudged_pf::diagnostics::{CycleNoise, CycleOptions};
use nudged_pf::ensemble::{self, EnsembleMoments, ObservationModel, ParticleEnsemble};
use nudged_pf::harness::{self, median, ExperimentConfig, FilterKind, McSummary};
use nudged_pf::nudging::{self, NudgingConfig};
use nudged_pf::sde::{BrownianPath, LinearSde, Lorenz63, SdeModel};
use nudged_pf::var_npf::{var_npf_assimilation_cycle, VarNpfConfig};
use nudged_pf::variational::{self, VariationalProblem, VariationalSettings};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn criterion_1() -> Outcome {
    let n = 10;
    let uniform = vec![0.1; n];
    let mut one_hot = vec![0.0; n];
    one_hot[3] = 1.0;
    let mut pair = vec![0.0; n];
    pair[0] = 0.5;
    pair[1] = 0.5;
    let got: Vec<f64> = [uniform, one_hot, pair]
        .iter()
        .map(|w| ensemble::effective_sample_size(w).unwrap())
        .collect();
    outcome(got == [10.0, 1.0, 2.0], format!("ESS = {got:?}"))
}

fn l63_ensemble(n: usize, seed: u64) -> ParticleEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = harness::DEFAULT_TRUTH_INITIAL;
    let states = (0..n)
        .map(|_| {
            DVector::from_iterator(
                3,
                mu.iter().map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + 2f64.sqrt() * z
                }),
            )
        })
        .collect();
    ParticleEnsemble::uniform(states, 0.0).unwrap()
}

fn criterion_2() -> Outcome {
    let model = Lorenz63::standard();
    let obs = ObservationModel::identity(3, 2.0).unwrap();
    let e = l63_ensemble(10, 2);
    let y = v(&[-2.0, -4.5, 21.0]);
    let noise = CycleNoise::seeded(22, 10, 3, 0.01, 50);
    let cfg = NudgingConfig { rollback_log_threshold: f64::INFINITY, ..Default::default() };
    let opts = CycleOptions::default();
    let (pf, pf_d) = pf_assimilation_cycle(&e, &model, &obs, &y, 0.5, &noise, opts).unwrap();
    let (npf, npf_d) = nudging::npf_assimilation_cycle(&e, &model, &obs, &y, 0.5, &cfg, &noise, opts).unwrap();
    let (var, var_d) =
        var_npf_assimilation_cycle(&e, &model, &obs, &y, 0.5, &cfg, &VarNpfConfig::default(), &noise, opts).unwrap();
    let same = |a: &ParticleEnsemble, b: &ParticleEnsemble| a.states() == b.states() && a.weights() == b.weights();
    let pass = same(&pf, &npf)
        && same(&pf, &var)
        && pf_d.trajectories == npf_d.trajectories
        && pf_d.trajectories == var_d.trajectories
        && pf_d.posterior_weights == npf_d.posterior_weights
        && pf_d.posterior_weights == var_d.posterior_weights;
    outcome(pass, format!("bitwise equal states, weights and trajectories: {pass}"))
}

fn criterion_3() -> Outcome {
    let clock = Instant::now();
    let sigma = Lorenz63::standard().dispersion().clone();
    let (dt, steps, paths) = (0.01, 50, 10_000);
    // v = σᵀa(t) for a smooth deterministic a(t)
    let schedule: Vec<DVector<f64>> = (0..steps)
        .map(|s| {
            let t = s as f64 * dt;
            sigma.transpose() * v(&[(6.0 * t).sin(), 0.5 + t, -(3.0 * t).cos()])
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..paths)
        .map(|_| {
            let path = BrownianPath::sample(&mut rng, 3, dt, steps);
            nudging::rn_log_increment(&schedule, &path.increments, dt).exp()
        })
        .collect();
    let n = paths as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let secs = clock.elapsed().as_secs_f64();
    let tol = 3.0 * sd / 100.0;
    outcome(
        (mean - 1.0).abs() <= tol && secs < 10.0,
        format!("mean exp(log RN) = {mean:.5}, band ±{tol:.5}, {secs:.2}s"),
    )
}

fn criterion_4() -> Outcome {
    let clock = Instant::now();
    let (a, s, r, dt, steps, y) = (-1.0f64, 1.0f64, 0.5f64, 0.01f64, 50usize, 0.7f64);
    let model = LinearSde::ornstein_uhlenbeck(a, s);
    let obs = ObservationModel::identity(1, r).unwrap();
    // exact law of the discrete scheme: X_n ~ N(ρⁿx, v_n)
    let z = a * dt;
    let rho = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
    let rn = rho.powi(steps as i32);
    let var = s * s * dt * (1.0 - rho.powi(2 * steps as i32)) / (1.0 - rho * rho);
    let gauss = |m: f64, c: f64| (c / (c + var)).sqrt() * (-(y - m).powi(2) / (2.0 * (c + var))).exp();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (k, x) in [-2.0, -0.5, 0.0, 0.8, 2.5].into_iter().enumerate() {
        let m = rn * x;
        let phi = gauss(m, r);
        let phi_se = ((gauss(m, r / 2.0) - phi * phi) / 10_000.0).sqrt();
        let u = s * s * rn * (y - m) / (r + var);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k as u64);
        let est = nudging::estimate_phi_grad(&model, &obs, 0.0, &v(&[x]), 0.5, &v(&[y]), 10_000, dt, &mut rng).unwrap();
        let control = nudging::feedback_control(est.phi, &est.grad_phi, &model.diffusion())[0];
        let u_se = s * s * est.grad_log_phi_std_error[0];
        let zp = (est.phi - phi).abs() / phi_se;
        let zu = (control - u).abs() / u_se;
        worst = worst.max(zp).max(zu);
        pass &= zp <= 3.0 && zu <= 3.0;
    }
    let secs = clock.elapsed().as_secs_f64();
    outcome(pass && secs < 30.0, format!("largest deviation {worst:.2} standard errors, {secs:.2}s"))
}

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    (&b * b.transpose() + DMatrix::identity(3, 3) * 0.5) * scale
}

fn criterion_5() -> Outcome {
    let settings = VariationalSettings::default();
    let still = LinearSde::new(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap();
    let id_obs = ObservationModel::identity(3, 1.0).unwrap();
    let mu = v(&[1.0, -2.0, 0.5]);
    let y = v(&[3.0, 0.0, -1.5]);
    let moments = EnsembleMoments { mean: mu.clone(), covariance: DMatrix::identity(3, 3) };
    let p = VariationalProblem::new(&still, &id_obs, &moments, &y, 0.0, 0.5, 0.01, &settings).unwrap();
    let quad_err = (variational::minimize_cost(&p, &mu, &settings).x - (&mu + &y) / 2.0).amax();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (dt, steps) = (0.01, 50);
    // the default stopping rule (‖projected gradient‖∞ < 1e-5) only pins x to
    // about 1e-5/λ_min of the Hessian, so the 1e-6 comparison tightens it
    let tight = VariationalSettings {
        projected_gradient_tol: 1e-9,
        relative_decrease_tol: 1e-15,
        ..settings
    };
    let mut gm_err: f64 = 0.0;
    let mut gm_err_default: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    for _ in 0..20 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let model = LinearSde::new(a.clone(), DMatrix::zeros(3, 3)).unwrap();
        let sigma = random_spd(&mut rng, 1.0);
        let sigma_y = random_spd(&mut rng, 0.5);
        let obs = ObservationModel::new(DMatrix::identity(3, 3), sigma_y.clone()).unwrap();
        let mu = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
        let y = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
        let moments = EnsembleMoments { mean: mu.clone(), covariance: sigma.clone() };
        let wide = DVector::from_element(3, 1e3);
        let p = VariationalProblem::new(&model, &obs, &moments, &y, 0.0, 0.5, dt, &settings)
            .unwrap()
            .with_bounds(&mu - &wide, &mu + &wide);
        // one RK4 step of a linear field is multiplication by the degree-4 Taylor polynomial of A·dt
        let z = &a * dt;
        let z2 = &z * &z;
        let step = DMatrix::identity(3, 3) + &z + &z2 / 2.0 + &z2 * &z / 6.0 + &z2 * &z2 / 24.0;
        let f = (0..steps).fold(DMatrix::identity(3, 3), |acc, _| &step * acc);
        let si = sigma.clone().try_inverse().unwrap();
        let syi = sigma_y.try_inverse().unwrap();
        let lhs = &si + f.transpose() * &syi * &f;
        let rhs = &si * &mu + f.transpose() * &syi * &y;
        let exact = lhs.lu().solve(&rhs).unwrap();
        let got = variational::minimize_cost(&p, &mu, &tight).x;
        gm_err = gm_err.max((got - &exact).amax());
        let loose = variational::minimize_cost(&p, &mu, &settings).x;
        gm_err_default = gm_err_default.max((loose - &exact).amax());

        let probe = &exact + DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let g = variational::variational_gradient(&probe, &p);
        let h = 1e-3;
        let fd = DVector::from_fn(3, |i, _| {
            let e = |t: f64| {
                let mut q = probe.clone();
                q[i] += t;
                variational::variational_cost(&q, &p)
            };
            (-e(2.0 * h) + 8.0 * e(h) - 8.0 * e(-h) + e(-2.0 * h)) / (12.0 * h)
        });
        grad_err = grad_err.max((g - &fd).amax() / fd.amax().max(1.0));
    }
    outcome(
        quad_err <= 1e-6 && gm_err <= 1e-6 && grad_err <= 1e-4,
        format!(
            "quadratic {quad_err:.2e}, Gauss-Markov {gm_err:.2e} (default tolerances {gm_err_default:.2e}), gradient rel {grad_err:.2e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10;
    let mut bounds_ok = true;
    let mut worst_bias: f64 = 0.0;
    for _ in 0..50 {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut sums = vec![0.0; n];
        for k in 0..1000 {
            let u = (k as f64 + 0.5) / 1000.0;
            let counts = ensemble::offspring_counts(&ensemble::systematic_indices(&w, u), n);
            for i in 0..n {
                let nw = n as f64 * w[i];
                bounds_ok &= counts[i] == nw.floor() as usize || counts[i] == nw.ceil() as usize;
                sums[i] += counts[i] as f64;
            }
        }
        for i in 0..n {
            worst_bias = worst_bias.max((sums[i] / 1000.0 - n as f64 * w[i]).abs());
        }
    }
    outcome(
        bounds_ok && worst_bias <= 1.0 / n as f64,
        format!("floor/ceil bounds hold: {bounds_ok}, largest mean-count bias {worst_bias:.4}"),
    )
}

fn criterion_7() -> Outcome {
    let cfg = ExperimentConfig { seed: 7, ..Default::default() };
    let truth = harness::generate_truth_and_observations(&cfg, cfg.seed).unwrap();
    let npf = harness::run_filter(&cfg, FilterKind::Npf, cfg.seed, &truth).unwrap();
    let var = harness::run_filter(&cfg, FilterKind::VarNpf, cfg.seed, &truth).unwrap();
    let per_cycle = |r: &harness::ExperimentRecord| -> Vec<usize> {
        r.cycles.iter().map(|c| c.nudging.as_ref().unwrap().realization_steps()).collect()
    };
    let (a, b) = (per_cycle(&npf), per_cycle(&var));
    let one_subinterval = var
        .cycles
        .iter()
        .flat_map(|c| c.nudging.as_ref().unwrap().subintervals.iter())
        .all(|s| s.horizon_steps == 10);
    let every_cycle = a.iter().zip(&b).all(|(n, v)| v <= n);
    let ratio = b.iter().sum::<usize>() as f64 / a.iter().sum::<usize>() as f64;
    outcome(
        one_subinterval && every_cycle && ratio < 0.5,
        format!("realization steps var_npf/npf = {ratio:.3}, every cycle smaller: {every_cycle}, one-subinterval horizons: {one_subinterval}"),
    )
}

fn medians(mc: &McSummary, ic: usize, f: FilterKind, metric: fn(&harness::RunMetrics) -> Option<f64>) -> f64 {
    median(&mc.completed(ic, f).filter_map(metric).collect::<Vec<_>>())
}

fn main() {
    let mut failures = 0;
    let mut report = |id: &str, o: Outcome| {
        println!("criterion {id}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    report("1", criterion_1());
    report("2", criterion_2());
    report("3", criterion_3());
    report("4", criterion_4());
    report("5", criterion_5());
    report("6", criterion_6());
    report("7", criterion_7());

    let template = ExperimentConfig::default();
    let star = harness::parse_ic_selection("star").unwrap();
    let clock = Instant::now();
    let mc = harness::run_monte_carlo(&template, &star, 30, 8_000, &FilterKind::ALL, None).unwrap();
    let mc_secs = clock.elapsed().as_secs_f64();
    let failed = mc.runs.iter().filter(|r| r.metrics.is_none()).count();
    let rmse = |f| medians(&mc, 0, f, |m| Some(m.avg_rmse));
    let (r_pf, r_npf, r_var) = (rmse(FilterKind::Pf), rmse(FilterKind::Npf), rmse(FilterKind::VarNpf));
    report(
        "8",
        outcome(
            failed == 0 && r_var <= 0.8 * r_pf && r_var <= 0.8 * r_npf,
            format!("median RMSE pf {r_pf:.3}, npf {r_npf:.3}, var_npf {r_var:.3} (30 paired runs, {mc_secs:.1}s)"),
        ),
    );
    let ness = |f| medians(&mc, 0, f, |m| Some(m.avg_ness));
    let (n_npf, n_var) = (ness(FilterKind::Npf), ness(FilterKind::VarNpf));
    report("9", outcome(n_var > n_npf, format!("median nESS npf {n_npf:.3}, var_npf {n_var:.3}")));
    let ratio = |f| medians(&mc, 0, f, |m| m.ratio_mean);
    let (q_npf, q_var) = (ratio(FilterKind::Npf), ratio(FilterKind::VarNpf));
    report(
        "10",
        outcome(q_var < 1.0 && 1.0 < q_npf, format!("median nudging/BM ratio npf {q_npf:.3}, var_npf {q_var:.3}")),
    );
    let wall = |f| {
        let t: Vec<f64> = mc.completed(0, f).map(|m| m.runtime_secs).collect();
        t.iter().sum::<f64>() / t.len() as f64
    };
    let (w_npf, w_var) = (wall(FilterKind::Npf), wall(FilterKind::VarNpf));
    report(
        "11",
        outcome(w_var < w_npf, format!("mean filter wall-clock npf {w_npf:.4}s, var_npf {w_var:.4}s")),
    );

    let all = harness::default_initial_conditions();
    let sweep = harness::run_monte_carlo(&template, &all, 10, 12_000, &[FilterKind::Pf, FilterKind::VarNpf], None).unwrap();
    let wins: Vec<bool> = (0..all.len())
        .map(|ic| {
            medians(&sweep, ic, FilterKind::VarNpf, |m| Some(m.avg_rmse))
                < medians(&sweep, ic, FilterKind::Pf, |m| Some(m.avg_rmse))
        })
        .collect();
    let won = wins.iter().filter(|w| **w).count();
    let lost: Vec<&str> = all.iter().zip(&wins).filter(|(_, w)| !**w).map(|(ic, _)| ic.label.as_str()).collect();
    report(
        "12",
        outcome(won >= 9, format!("var_npf median RMSE below pf on {won}/11 initial conditions (not on {lost:?})")),
    );

    let max_batches = mc.runs.iter().filter_map(|r| r.metrics.and_then(|m| m.max_batches)).max().unwrap_or(0);
    let capped = max_batches >= NudgingConfig::default().max_batches;
    println!(
        "criterion 13: {} | largest batch count over the 30 paired runs: {max_batches}",
        if capped { "WARN" } else { "PASS" }
    );

    println!("acceptance: {} gating failure(s)", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
