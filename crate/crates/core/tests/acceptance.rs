//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tse_core::config::RunConfig;
use tse_core::eval::{field_metrics, run_single, wave_speed_from_angle, Dataset, Method, MetricScope, ModelConfig};
use tse_core::gp_exact::{log_marginal_likelihood, posterior, MeanMode, PredictOptions};
use tse_core::grid::{
    aggregate_to_grid, field_to_observations, sample_penetration, CoordinateUnits, ObservationSet,
    SpatioTemporalGrid, SpeedField,
};
use tse_core::kernels::{ard_sq_dist, rotated_sq_dist, Coregionalization, Input, KernelFamily, KernelSpec};
use tse_core::multilane::{fit_joint, predict_grid, MultiLaneProblem};
use tse_core::synth::{generate_field, trajectories_in_field, LaneVariation, WaveScenario};
use tse_core::vsgp::{default_init, elbo, fit, model_from_parts, FitConfig, InducingSet};
use tse_core::{cli, Error};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const FAMILIES: [KernelFamily; 3] = [KernelFamily::SquaredExponential, KernelFamily::Matern32, KernelFamily::Matern52];

fn random_spec(rng: &mut ChaCha8Rng) -> KernelSpec {
    KernelSpec::new(
        FAMILIES[rng.random_range(0..3)],
        rng.random_range(0.5..3.0),
        [rng.random_range(0.8..4.0), rng.random_range(0.8..4.0)],
        rng.random_range(-1.5..1.5),
        rng.random_range(0.05..1.0),
    )
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize, lanes: u32) -> ObservationSet {
    let x: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
        .collect();
    let y = x
        .iter()
        .map(|p| (0.5 * p[0]).sin() + 0.2 * p[1] + rng.random_range(-0.5..0.5))
        .collect();
    ObservationSet {
        x,
        lane: (0..n).map(|_| rng.random_range(1..=lanes)).collect(),
        y,
        units: CoordinateUnits::Cells,
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, m: usize, lanes: u32) -> Vec<Input> {
    (0..m)
        .map(|_| {
            Input::new(
                [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)],
                rng.random_range(1..=lanes),
            )
        })
        .collect()
}

// ---- independent dense oracle ----

fn oracle_k(spec: &KernelSpec, a: &Input, b: &Input) -> f64 {
    let (ds, dt) = (a.x[0] - b.x[0], a.x[1] - b.x[1]);
    let (c, s) = (spec.angle.cos(), spec.angle.sin());
    let u1 = c * ds - s * dt;
    let u2 = s * ds + c * dt;
    let r = (u1 / spec.lengthscale_s).powi(2) + (u2 / spec.lengthscale_t).powi(2);
    let d = r.sqrt();
    let g = match spec.family {
        KernelFamily::SquaredExponential => (-0.5 * r).exp(),
        KernelFamily::Matern32 => (1.0 + 3f64.sqrt() * d) * (-(3f64.sqrt()) * d).exp(),
        KernelFamily::Matern52 => (1.0 + 5f64.sqrt() * d + 5.0 * r / 3.0) * (-(5f64.sqrt()) * d).exp(),
    };
    let b_ij = match &spec.coregionalization {
        Some(co) => {
            let a_m = DMatrix::from_row_slice(co.a.len() / co.rank, co.rank, &co.a);
            (a_m.row(a.lane as usize - 1) * a_m.row(b.lane as usize - 1).transpose())[0]
        }
        None => 1.0,
    };
    spec.variance * g * b_ij
}

fn oracle_gram(spec: &KernelSpec, xa: &[Input], xb: &[Input]) -> DMatrix<f64> {
    DMatrix::from_fn(xa.len(), xb.len(), |i, j| oracle_k(spec, &xa[i], &xb[j]))
}

fn oracle_exact(spec: &KernelSpec, train: &ObservationSet, q: &[Input]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let x = train.inputs();
    let n = x.len();
    let mut k = oracle_gram(spec, &x, &x);
    for i in 0..n {
        k[(i, i)] += spec.noise_variance;
    }
    let y = DVector::from_column_slice(&train.y);
    let lu = k.clone().lu();
    let alpha = lu.solve(&y).unwrap();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * lu.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln();
    let ks = oracle_gram(spec, &x, q);
    let mean = ks.transpose() * &alpha;
    let cov = oracle_gram(spec, q, q) - ks.transpose() * lu.solve(&ks).unwrap();
    (lml, mean, cov)
}

// ---- criteria ----

fn c1_collapse() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let train = random_obs(&mut rng, 30, 1);
    let spec = KernelSpec::new(KernelFamily::Matern52, 1.5, [2.0, 1.2], 0.4, 0.1);
    let z = InducingSet { points: train.inputs() };
    let e = elbo(&spec, &z, &train).unwrap();
    let lml = log_marginal_likelihood(&spec, &train, MeanMode::Zero).unwrap();
    let model = model_from_parts(&train, None, &spec, z, MeanMode::Zero, 0).unwrap();
    let q = random_inputs(&mut rng, 50, 1);
    let sparse = model.predict(&q, PredictOptions::default()).unwrap();
    let exact = posterior(&spec, &train, &q, MeanMode::Zero, PredictOptions::default()).unwrap();
    let mean_err = sparse
        .mean
        .iter()
        .zip(&exact.mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let gap = (e.value - lml).abs();
    outcome(
        gap <= 1e-6 && mean_err <= 1e-6 && secs < 5.0,
        format!("|ELBO-LML| = {gap:.2e}, max mean diff = {mean_err:.2e}, {secs:.2}s"),
    )
}

fn c2_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = f64::NEG_INFINITY;
    let mut draws = 0;
    while draws < 250 {
        let n = rng.random_range(2..=60);
        let m = rng.random_range(1..=n.min(20));
        let train = random_obs(&mut rng, n, 1);
        let spec = random_spec(&mut rng);
        let z = InducingSet {
            points: random_inputs(&mut rng, m, 1),
        };
        let (Ok(e), Ok(lml)) = (elbo(&spec, &z, &train), log_marginal_likelihood(&spec, &train, MeanMode::Zero)) else {
            continue;
        };
        worst = worst.max(e.value - lml);
        draws += 1;
    }
    outcome(worst <= 1e-6, format!("{draws} draws, max(ELBO - LML) = {worst:.3e}"))
}

/// Parameter vector `[log var, log ls, log lt, angle, log noise, Z.., A..]`.
fn pack(spec: &KernelSpec, z: &[Input]) -> Vec<f64> {
    let mut v = vec![
        spec.variance.ln(),
        spec.lengthscale_s.ln(),
        spec.lengthscale_t.ln(),
        spec.angle,
        spec.noise_variance.ln(),
    ];
    z.iter().for_each(|p| v.extend_from_slice(&p.x));
    if let Some(c) = &spec.coregionalization {
        v.extend_from_slice(&c.a);
    }
    v
}

fn unpack(template: &KernelSpec, z0: &[Input], v: &[f64]) -> (KernelSpec, InducingSet) {
    let mut spec = template.clone();
    spec.variance = v[0].exp();
    spec.lengthscale_s = v[1].exp();
    spec.lengthscale_t = v[2].exp();
    spec.angle = v[3];
    spec.noise_variance = v[4].exp();
    let m = z0.len();
    let points = (0..m)
        .map(|i| Input::new([v[5 + 2 * i], v[6 + 2 * i]], z0[i].lane))
        .collect();
    if let Some(c) = &mut spec.coregionalization {
        c.a = v[5 + 2 * m..].to_vec();
    }
    (spec, InducingSet { points })
}

fn c3_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut draws, mut checked, mut worst) = (0, 0usize, 0.0f64);
    let mut failures = 0;
    while draws < 120 {
        let lanes = if draws % 3 == 0 { 2 } else { 1 };
        let n = rng.random_range(8..=30);
        let m = rng.random_range(2..=6);
        let train = random_obs(&mut rng, n, lanes);
        let mut spec = random_spec(&mut rng);
        if lanes == 2 {
            let rank = rng.random_range(1..=2);
            spec.coregionalization = Some(Coregionalization {
                rank,
                a: (0..2 * rank).map(|_| rng.random_range(-1.5..1.5)).collect(),
            });
        }
        let z0 = random_inputs(&mut rng, m, lanes);
        let theta = pack(&spec, &z0);
        let eval = |v: &[f64]| {
            let (s, z) = unpack(&spec, &z0, v);
            elbo(&s, &z, &train)
        };
        let Ok(base) = eval(&theta) else { continue };
        let g = &base.gradient;
        let mut analytic = vec![
            g.log_variance,
            g.log_lengthscale_s,
            g.log_lengthscale_t,
            g.angle,
            g.log_noise_variance,
        ];
        g.inducing.iter().for_each(|d| analytic.extend_from_slice(d));
        analytic.extend_from_slice(&g.coregionalization);
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(theta.len());
        let mut consistent = true;
        for i in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[i] += h;
            dn[i] -= h;
            match (eval(&up), eval(&dn)) {
                (Ok(a), Ok(b)) if a.jitter == base.jitter && b.jitter == base.jitter => {
                    numeric.push((a.value - b.value) / (2.0 * h))
                }
                _ => consistent = false,
            }
        }
        if !consistent {
            // jitter rung switched inside the stencil; not differentiable there
            continue;
        }
        draws += 1;
        for (a, nm) in analytic.iter().zip(&numeric) {
            let rel = (a - nm).abs() / nm.abs().max(1.0);
            worst = worst.max(rel);
            checked += 1;
            if rel > 1e-4 {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("{draws} draws, {checked} partials, worst rel. err {worst:.2e}, {failures} over 1e-4"),
    )
}

fn c4_rotation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let x = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let y = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let (ls, lt) = (rng.random_range(0.1..20.0), rng.random_range(0.1..20.0));
        let a = rng.random_range(-PI..PI);
        let ard = ard_sq_dist(x, y, ls, lt);
        let scale = ard.max(ard_sq_dist(x, y, lt, ls)).max(1.0);
        worst = worst.max((rotated_sq_dist(x, y, ls, lt, 0.0) - ard).abs() / scale);
        worst = worst.max((rotated_sq_dist(x, y, ls, lt, FRAC_PI_2) - ard_sq_dist(x, y, lt, ls)).abs() / scale);
        let r = rotated_sq_dist(x, y, ls, lt, a);
        worst = worst.max((r - rotated_sq_dist(x, y, ls, lt, a + PI)).abs() / r.max(1.0));
    }
    let exact_zero = rotated_sq_dist([1.3, -2.2], [0.4, 7.9], 2.0, 0.7, 0.0) == ard_sq_dist([1.3, -2.2], [0.4, 7.9], 2.0, 0.7);
    outcome(worst <= 1e-12 && exact_zero, format!("worst rel. deviation {worst:.2e}"))
}

fn c5_wave_speed() -> Outcome {
    let a = wave_speed_from_angle(0.108, 3.0, 5.0).unwrap();
    let b = wave_speed_from_angle(0.160, 4.0, 5.0).unwrap();
    let (ea, eb) = ((a / -19.87 - 1.0).abs(), (b / -17.86 - 1.0).abs());
    outcome(
        ea < 0.005 && eb < 0.005,
        format!("{a:.3} km/h ({:.2}%), {b:.3} km/h ({:.2}%)", 100.0 * ea, 100.0 * eb),
    )
}

fn synthetic_dataset(scn: &WaveScenario, seed: u64) -> Dataset {
    let field = generate_field(scn, seed).unwrap();
    let points = trajectories_in_field(scn, &field, scn.vehicles, seed).unwrap();
    Dataset {
        points,
        grid: scn.grid,
        truth: field,
    }
}

fn angle_error(a: f64, a0: f64) -> f64 {
    let mut d = (a - a0).rem_euclid(PI);
    if d > FRAC_PI_2 {
        d -= PI;
    }
    d.abs()
}

fn c6_angle_recovery() -> Outcome {
    let start = Instant::now();
    let scn = WaveScenario::default();
    let a0 = ((3.0 / 5.0) / (15.0 / 3.6f64)).atan();
    let model = ModelConfig::default();
    let mut hits = 0;
    let mut found = Vec::new();
    for seed in 0..5 {
        let data = synthetic_dataset(&scn, seed);
        let out = run_single(&data, Method::GpRotated, 0.1, seed, &model, &Default::default(), MetricScope::Composite).unwrap();
        let a = out.model.unwrap().kernel.angle;
        if angle_error(a, a0) <= 0.15 * a0 {
            hits += 1;
        }
        found.push(format!("{a:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits >= 4 && secs < 300.0,
        format!("a0 = {a0:.4}, fitted [{}], {hits}/5 within 15%, {secs:.1}s", found.join(", ")),
    )
}

fn ngsim_check() -> String {
    let Ok(path) = std::env::var("TSE_NGSIM_CONFIG") else {
        return "NGSIM check skipped (set TSE_NGSIM_CONFIG to a run config)".into();
    };
    let cfg = match RunConfig::load(Path::new(&path)) {
        Ok(c) => c,
        Err(e) => return format!("NGSIM check could not load config: {e}"),
    };
    let mut cfg = cfg;
    cfg.sweep.methods = vec![Method::GpRotated];
    cfg.sweep.rates = vec![0.05];
    match cli::cmd_sweep(&cfg) {
        Ok(_) => {
            let text = std::fs::read_to_string(cfg.output.directory.join("report.json")).unwrap_or_default();
            let doc: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            let mae = doc["groups"][0]["mae_mean"].as_f64().unwrap_or(f64::NAN);
            let ok = (mae - 4.85).abs() <= 0.5;
            format!("NGSIM GP-rotated rate 0.05 MAE {mae:.3} ({})", if ok { "within 0.5 of 4.85" } else { "OUTSIDE 4.85 +- 0.5" })
        }
        Err(e) => format!("NGSIM sweep failed: {e}"),
    }
}

fn c7_anisotropy_pays() -> Outcome {
    let scn = WaveScenario::default();
    let model = ModelConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    let datasets: Vec<Dataset> = (0..10).map(|s| synthetic_dataset(&scn, s)).collect();
    for rate in [0.05, 0.1] {
        let mut sums = [0.0, 0.0];
        for (seed, data) in datasets.iter().enumerate() {
            for (k, method) in [Method::GpRotated, Method::GpArd].into_iter().enumerate() {
                let out = run_single(data, method, rate, seed as u64, &model, &Default::default(), MetricScope::Composite).unwrap();
                sums[k] += out.metrics.rmse / 10.0;
            }
        }
        pass &= sums[0] < sums[1];
        parts.push(format!("rate {rate}: rotated {:.3} vs ARD {:.3}", sums[0], sums[1]));
    }
    parts.push(ngsim_check());
    outcome(pass, parts.join("; "))
}

fn c8_multilane() -> Outcome {
    let mut scn = WaveScenario::default();
    scn.grid.n_lanes = 2;
    scn.lanes = vec![
        LaneVariation::default(),
        LaneVariation {
            amplitude_scale: 0.9,
            time_shift: 10.0,
        },
    ];
    let g = scn.grid;
    let single = SpatioTemporalGrid { n_lanes: 1, ..g };
    // 25% of the time window, covering the wave passage
    let gap = (g.n_time * 3 / 8, g.n_time * 5 / 8);
    let cfg = FitConfig {
        mean: MeanMode::Constant,
        ..FitConfig::default()
    };
    let model_cfg = ModelConfig {
        fit: cfg.clone(),
        ..ModelConfig::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let field = generate_field(&scn, seed).unwrap();
        let points = trajectories_in_field(&scn, &field, scn.vehicles, seed).unwrap();
        let (probes, _) = sample_penetration(&points, 0.1, seed).unwrap();
        let probes: Vec<_> = probes
            .into_iter()
            .filter(|p| {
                let j = g.locate(p.s, p.t).unwrap().1;
                p.lane != 2 || !(gap.0..gap.1).contains(&j)
            })
            .collect();
        let observed = aggregate_to_grid(&probes, &g);
        let obs = field_to_observations(&observed, None, CoordinateUnits::Cells).unwrap();
        let problem = MultiLaneProblem::from_observations(&obs, g);
        let init = model_cfg.initial_spec(&obs, &g);
        let joint = fit_joint(&problem, &cfg, &init, seed).unwrap();
        let jp = predict_grid(&joint, &g, true).unwrap();
        let mut lane2 = obs.select_lane(2);
        lane2.lane = vec![1; lane2.len()];
        let init1 = default_init(&lane2, &single, KernelFamily::Matern52, MeanMode::Constant);
        let indep = fit(&lane2, &single, &cfg, &init1, seed).unwrap();
        let ip = predict_grid(&indep, &single, true).unwrap();
        let (mut ej, mut ei, mut n) = (0.0, 0.0, 0.0);
        for i in 0..g.n_space {
            for j in gap.0..gap.1 {
                let y = field.get(2, i, j).unwrap();
                ej += (jp.estimate.get(2, i, j).unwrap() - y).powi(2);
                ei += (ip.estimate.get(1, i, j).unwrap() - y).powi(2);
                n += 1.0;
            }
        }
        let (rj, ri) = ((ej / n).sqrt(), (ei / n).sqrt());
        if rj < ri {
            wins += 1;
        }
        detail.push(format!("{rj:.2}/{ri:.2}"));
    }
    outcome(
        wins >= 8,
        format!("{wins}/10 seeds joint < independent (gap RMSE joint/indep: {})", detail.join(" ")),
    )
}

fn c9_calibration() -> Outcome {
    let scn = WaveScenario::default();
    let model = ModelConfig::default();
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..10 {
        let data = synthetic_dataset(&scn, seed);
        let out = run_single(&data, Method::GpRotated, 0.1, seed, &model, &Default::default(), MetricScope::Composite).unwrap();
        let pred = predict_grid(&out.model.unwrap(), &scn.grid, true).unwrap();
        for k in 0..scn.grid.len() {
            if out.observed.values[k].is_some() {
                continue;
            }
            let (mu, var, y) = (
                pred.estimate.values[k].unwrap(),
                pred.variance.values[k].unwrap(),
                data.truth.values[k].unwrap(),
            );
            total += 1;
            if (y - mu).abs() <= 3.0 * var.sqrt() {
                inside += 1;
            }
        }
    }
    let frac = inside as f64 / total as f64;
    outcome(frac >= 0.95, format!("{inside}/{total} held-out cells inside mean +- 3 std ({:.2}%)", 100.0 * frac))
}

fn c10_exact_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst = 0.0f64;
    let mut fixtures = 0;
    for k in 0..60 {
        let lanes = if k % 4 == 0 { 2 } else { 1 };
        let n = rng.random_range(1..=50);
        let train = random_obs(&mut rng, n, lanes);
        let mut spec = random_spec(&mut rng);
        if lanes == 2 {
            spec.coregionalization = Some(Coregionalization {
                rank: 2,
                a: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            });
        }
        let q = random_inputs(&mut rng, 15, lanes);
        let (lml0, mean0, cov0) = oracle_exact(&spec, &train, &q);
        let lml = log_marginal_likelihood(&spec, &train, MeanMode::Zero).unwrap();
        let post = posterior(&spec, &train, &q, MeanMode::Zero, PredictOptions::default()).unwrap();
        let cov = post.covariance.unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst.max(rel(lml, lml0));
        for i in 0..q.len() {
            worst = worst.max(rel(post.mean[i], mean0[i]));
            for j in 0..q.len() {
                let target = if i == j { cov0[(i, j)].max(0.0) } else { cov0[(i, j)] };
                worst = worst.max(rel(cov[(i, j)], target));
            }
        }
        fixtures += 1;
    }
    outcome(worst <= 1e-10, format!("{fixtures} fixtures (n <= 50), worst rel. deviation {worst:.2e}"))
}

fn c11_metrics() -> Outcome {
    let g = SpatioTemporalGrid::new(3.0, 5.0, 1, 2, 1).unwrap();
    let truth = SpeedField::dense(g, vec![10.0, 20.0]);
    let est = SpeedField::dense(g, vec![11.0, 17.0]);
    let m = field_metrics(&truth, &est, None).unwrap();
    let hand = m.mae == 2.0 && m.rmse == 5f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut violations = 0;
    for _ in 0..1000 {
        let cells = rng.random_range(1..50);
        let g = SpatioTemporalGrid::new(1.0, 1.0, 1, cells, 1).unwrap();
        let t = SpeedField::dense(g, (0..cells).map(|_| rng.random_range(0.0..35.0)).collect());
        let e = SpeedField::dense(g, (0..cells).map(|_| rng.random_range(0.0..35.0)).collect());
        let m = field_metrics(&t, &e, None).unwrap();
        if m.rmse < m.mae || m.mae < 0.0 {
            violations += 1;
        }
    }
    outcome(
        hand && violations == 0,
        format!("2-cell MAE {} RMSE {}, {violations}/1000 random pairs with RMSE < MAE", m.mae, m.rmse),
    )
}

fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            [&cols[..5], &cols[7..]].concat().join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        seed: 7,
        threads: Some(2),
        ..RunConfig::default()
    };
    cfg.output.directory = dir.path().to_path_buf();
    cfg.data.rate = Some(0.1);
    cfg.sweep.methods = vec![Method::Asm, Method::GpArd, Method::GpRotated];
    cfg.sweep.rates = vec![0.1];
    cfg.sweep.seeds = 2;
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    let run = || -> Result<Vec<Vec<u8>>, Error> {
        cli::cmd_synth(&cfg)?;
        cli::cmd_fit(&cfg)?;
        cli::cmd_sweep(&cfg)?;
        Ok(vec![
            read("trajectories.csv"),
            read("model.json"),
            read("manifest_fit.json"),
            read("report.json"),
            read("manifest_sweep.json"),
            strip_timing(&String::from_utf8(read("report.csv")).unwrap()).into_bytes(),
        ])
    };
    let (a, b) = match (run(), run()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("command failed: {e}")),
    };
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    outcome(same == a.len(), format!("{same}/{} artifacts byte-identical across two runs", a.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("sparse-to-exact collapse", c1_collapse),
        ("ELBO lower bound", c2_bound),
        ("gradient correctness", c3_gradients),
        ("rotation semantics", c4_rotation),
        ("wave-speed conversion", c5_wave_speed),
        ("angle recovery", c6_angle_recovery),
        ("anisotropy pays", c7_anisotropy_pays),
        ("multi-lane compensation", c8_multilane),
        ("uncertainty calibration", c9_calibration),
        ("exact-GP oracle", c10_exact_oracle),
        ("metric identities", c11_metrics),
        ("determinism", c12_determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<26} {} ({:.1}s) {}",
            k + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
