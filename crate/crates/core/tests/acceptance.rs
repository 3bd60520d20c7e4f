//! End-to-end acceptance checks. Run with `--nocapture` to see the table:
//!
//! ```text
//! cargo test -p mbe-core --test acceptance -- --nocapture
//! ```

use std::time::{Duration, Instant};

use mbe_core::backbone::dump::write_dump;
use mbe_core::canonical::{
    build_level_grid, coeffs_from_logsnr, match_discrete_level, DiscreteSchedule, GridConfig, Realization,
};
use mbe_core::config::RunConfig;
use mbe_core::harness::diagnostics::{run_diagnostics, DiagnosticsReport};
use mbe_core::harness::replay::{record_run, replay_config};
use mbe_core::harness::{run_benchmark, BenchmarkReport};
use mbe_core::metrics::{auroc, mann_whitney_u};
use mbe_core::theory::{oracle_score_moments, separation_decomposition, LocalModel};
use mbe_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DEFAULT: &str = include_str!("../../cli/configs/default.toml");
const DIAG: &str = include_str!("../../cli/configs/diag.toml");
const ID_VS_ID: &str = include_str!("../../cli/configs/id_vs_id.toml");
const STUB: &str = include_str!("../../cli/configs/budget_stub.toml");
const REPLAY: &str = include_str!("../../cli/configs/replay_small.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let mut s = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05;
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            s[(i, j)] = s[(j, i)];
        }
    }
    s
}

fn complementarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_gap = 0.0f64;
    let mut worst_residual = f64::INFINITY;
    let mut ordered = true;
    for _ in 0..1000 {
        let d = rng.random_range(2..=16);
        let k = rng.random_range(1..d);
        let sigma = random_spd(&mut rng, d);
        let delta = DVector::from_fn(d, |_, _| normal(&mut rng));
        let model = LocalModel::centered(sigma.clone(), delta.clone(), k).unwrap();
        let sep = separation_decomposition(&model).unwrap();
        // oracle: full and decoder quadratic forms by LU solves
        let pair = delta.dot(&sigma.clone().lu().solve(&delta).unwrap());
        let dd = sigma.view((0, 0), (k, k)).into_owned();
        let dv = delta.rows(0, k).into_owned();
        let dec = dv.dot(&dd.lu().solve(&dv).unwrap());
        let gap = (sep.pair - sep.dec - sep.residual).abs() / sep.pair.max(1.0);
        let oracle_gap = ((sep.pair - pair).abs() + (sep.dec - dec).abs()) / pair.max(1.0);
        worst_gap = worst_gap.max(gap).max(oracle_gap);
        worst_residual = worst_residual.min(sep.residual);
        ordered &= sep.pair >= sep.dec;
    }
    outcome(
        worst_gap <= 1e-8 && worst_residual >= -1e-12 && ordered,
        format!("max rel gap {worst_gap:.2e}, min residual {worst_residual:.2e}, pair ≥ dec: {ordered}"),
    )
}

fn score_moments() -> Outcome {
    let d = 64;
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigma = {
        let s = random_spd(&mut rng, d);
        let scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let inv: Vec<f64> = (0..d).map(|i| 1.0 / s[(i, i)].sqrt()).collect();
        DMatrix::from_fn(d, d, |i, j| s[(i, j)] * inv[i] * inv[j] * scale[i] * scale[j])
    };
    let delta = DVector::from_fn(d, |i, _| 0.8 * sigma[(i, i)].sqrt() * if i % 3 == 0 { 1.0 } else { -0.5 });
    let model = LocalModel::centered(sigma.clone(), delta.clone(), d / 2).unwrap();
    let m = oracle_score_moments(&model);
    let chol = sigma.clone().cholesky().unwrap().l();
    let diag: Vec<f64> = (0..d).map(|i| sigma[(i, i)]).collect();
    let (mut s0, mut q0, mut s1, mut q1) = (0.0, 0.0, 0.0, 0.0);
    let mut g = DVector::zeros(d);
    for _ in 0..n {
        for v in g.iter_mut() {
            *v = normal(&mut rng);
        }
        let z = &chol * &g;
        let (mut h0, mut h1) = (0.0, 0.0);
        for j in 0..d {
            h0 += z[j] * z[j] / diag[j];
            h1 += (z[j] + delta[j]).powi(2) / diag[j];
        }
        let (h0, h1) = (h0 / d as f64, h1 / d as f64);
        s0 += h0;
        q0 += h0 * h0;
        s1 += h1;
        q1 += h1 * h1;
    }
    let nf = n as f64;
    let (mean0, mean1) = (s0 / nf, s1 / nf);
    let var0 = (q0 - nf * mean0 * mean0) / (nf - 1.0);
    let var1 = (q1 - nf * mean1 * mean1) / (nf - 1.0);
    let errs = [
        (mean0 - m.mean_h0).abs() / m.mean_h0,
        (mean1 - m.mean_h1).abs() / m.mean_h1,
        (var0 - m.var_h0).abs() / m.var_h0,
        (var1 - m.var_h1).abs() / m.var_h1,
    ];
    outcome(
        errs[0] <= 0.01 && errs[1] <= 0.01 && errs[2] <= 0.05 && errs[3] <= 0.05,
        format!(
            "rel err mean H0 {:.4}, mean H1 {:.4}, var H0 {:.4}, var H1 {:.4} (κ/d = {:.3})",
            errs[0],
            errs[1],
            errs[2],
            errs[3],
            model.kappa() / d as f64
        ),
    )
}

fn low_noise(diag: &DiagnosticsReport) -> Outcome {
    let rows = &diag.low_noise;
    let small = rows.iter().all(|r| r.b_squared.sqrt() <= 0.3);
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.exact.map(|e| r.variance / e)).collect();
    let in_band = ratios.len() == rows.len() && ratios.iter().all(|r| (0.98..=1.02).contains(r));
    let slope = diag.low_noise_slope.unwrap_or(f64::NAN);
    outcome(
        rows.len() == 6 && small && in_band && (slope - 1.0).abs() <= 0.02,
        format!(
            "{} levels, b ≤ 0.3: {small}, ratio range [{:.4}, {:.4}], slope {slope:.4}",
            rows.len(),
            ratios.iter().copied().fold(f64::INFINITY, f64::min),
            ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ),
    )
}

fn exhaustive_match(schedule: &DiscreteSchedule, lambda: f64) -> usize {
    let mut best = 0;
    for (t, l) in schedule.lambdas().iter().enumerate() {
        if (l - lambda).abs() < (schedule.lambdas()[best] - lambda).abs() {
            best = t;
        }
    }
    best
}

fn canonicalization() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..=2000 {
        let lambda = -10.0 + 20.0 * i as f64 / 2000.0;
        for r in [Realization::Ve, Realization::Vp] {
            let (a, b) = coeffs_from_logsnr(lambda, r).unwrap();
            let target = (-lambda / 2.0).exp();
            worst = worst.max((b / a - target).abs() / target.max(1.0));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..50 {
        let steps = rng.random_range(2..400);
        let mut ab: Vec<f64> = (0..steps).map(|_| rng.random_range(1e-4..0.9999)).collect();
        ab.sort_by(|x, y| y.total_cmp(x));
        ab.dedup();
        let schedule = DiscreteSchedule::new(ab).unwrap();
        let lambdas = schedule.lambdas().to_vec();
        let mut queries: Vec<f64> = (0..200).map(|_| rng.random_range(-14.0..14.0)).collect();
        queries.extend(lambdas.iter().copied());
        // exact midpoints probe the tie rule
        queries.extend(lambdas.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        for q in queries {
            if match_discrete_level(&schedule, q).unwrap() != exhaustive_match(&schedule, q) {
                mismatches += 1;
            }
        }
    }
    // two distinct matched timesteps for five requested levels
    let collide = DiscreteSchedule::from_lambdas(&[4.5, -0.5]).unwrap();
    let grid = |k_grid, k_c, unique, s: Option<&DiscreteSchedule>, lo, hi| {
        build_level_grid(
            &GridConfig {
                lambda_min: lo,
                lambda_max: hi,
                k_grid,
                k_c,
                unique,
                realization: Realization::Ve,
            },
            s,
        )
        .unwrap()
    };
    let dedup = grid(5, 5, true, Some(&collide), 0.0, 4.0);
    let kept = grid(5, 5, false, Some(&collide), 0.0, 4.0);
    let fine = DiscreteSchedule::from_lambdas(&(0..40).map(|t| 8.0 - 0.4 * t as f64).collect::<Vec<_>>()).unwrap();
    let sub = grid(9, 3, true, Some(&fine), -4.0, 4.0);
    let flat = grid(3, 3, true, None, 0.0, 0.0);
    let single = grid(1, 1, true, None, 5.0, 5.0);
    let dedup_ok = dedup.len() == 2
        && dedup.requested.len() == 5
        && kept.len() == 5
        && sub.requested.len() == 9
        && sub.lambdas() == vec![4.0, 0.0, -4.0]
        && flat.len() == 1
        && single.lambdas() == vec![5.0];
    outcome(
        worst <= 1e-12 && mismatches == 0 && dedup_ok,
        format!("max |b/a − e^(−λ/2)| {worst:.1e}, matching mismatches {mismatches}/50 schedules, dedup cases ok: {dedup_ok}"),
    )
}

fn pairwise_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for o in ood {
        for i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mismatch, mut asym) = (0, 0);
    for case in 0..100 {
        let n_id = rng.random_range(1..=200);
        let n_ood = rng.random_range(1..=200);
        let tied = case % 2 == 0;
        let mut draw = |shift: f64| -> f64 {
            let v = normal(&mut rng) + shift;
            if tied {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(0.0)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(0.7)).collect();
        if auroc(&id, &ood).unwrap() != pairwise_auroc(&id, &ood) {
            mismatch += 1;
        }
        let u = mann_whitney_u(&id, &ood).unwrap();
        let u_swap = mann_whitney_u(&ood, &id).unwrap();
        let complement = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
        if u + u_swap != (n_id * n_ood) as f64 || complement != 1.0 {
            asym += 1;
        }
    }
    outcome(
        mismatch == 0 && asym == 0,
        format!("midrank ≠ pairwise in {mismatch}/100, complement asymmetric in {asym}/100"),
    )
}

fn diagnostics_predictivity(diag: &DiagnosticsReport, elapsed: Duration) -> Outcome {
    outcome(
        diag.probes.len() >= 20
            && diag.spearman_kappa >= 0.90
            && diag.spearman_ratio >= 0.80
            && elapsed < Duration::from_secs(120),
        format!(
            "{} probes, ρ(κ̂/d, AUROC) {:.4}, ρ(R̂, AUROC) {:.4}",
            diag.probes.len(),
            diag.spearman_kappa,
            diag.spearman_ratio
        ),
    )
}

fn expected_forwards(method: &str) -> Option<u64> {
    Some(match method {
        "cfs_dec1x1" | "cfs_ed1x2" => 1,
        "msma" | "diffpath_1d" | "diffpath_6d" => 10,
        // starts 0, 3, 6, 9 over 10 levels: 10 + 7 + 4 + 1
        "ddpm_ood" => 22,
        "gepc" => 8,
        _ => return None,
    })
}

fn budget_laws(report: &BenchmarkReport) -> Outcome {
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| expected_forwards(&r.method) != Some(r.forwards) || r.jacobians != 0)
        .map(|r| format!("{}/{}={}", r.method, r.backbone, r.forwards))
        .collect();
    let stub = RunConfig::parse(STUB).unwrap();
    let aborted = matches!(run_benchmark(&stub), Err(Error::Protocol(_)));
    outcome(
        bad.is_empty() && aborted && !report.rows.is_empty(),
        format!(
            "{} rows match CFS 1F, MSMA/DiffPath 10F, DDPM-OOD 22F, GEPC 8F; off-budget rows {:?}; stub aborts: {aborted}",
            report.rows.len(),
            bad
        ),
    )
}

fn protocol_sanity(report: &BenchmarkReport) -> Outcome {
    let far: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.backbone == "gauss64" && r.ood == "shift_far")
        .map(|r| r.auroc)
        .collect();
    let far_min = far.iter().copied().fold(f64::INFINITY, f64::min);
    let null = run_benchmark(&RunConfig::parse(ID_VS_ID).unwrap()).unwrap();
    let null_dev = null.rows.iter().map(|r| (r.auroc - 0.5).abs()).fold(0.0, f64::max);
    let pairs: std::collections::BTreeSet<(&str, &str)> =
        report.rows.iter().map(|r| (r.id.as_str(), r.ood.as_str())).collect();
    let worst_ok = report
        .aggregates
        .iter()
        .all(|a| a.avg_worst_auroc <= a.avg_auroc && a.per_seed.iter().all(|s| s.avg_worst_auroc <= s.avg_auroc));
    let methods = report.aggregates.iter().map(|a| &a.method).collect::<std::collections::BTreeSet<_>>().len();
    outcome(
        far.len() == 3 * methods * report.seeds.len() && far_min >= 0.95 && null_dev <= 0.03 && pairs.len() == 12 && worst_ok,
        format!(
            "far-OOD min AUROC {far_min:.4} over {} rows, ID-vs-ID max |AUROC − 0.5| {null_dev:.4}, {} pairs, worst ≤ avg: {worst_ok}",
            far.len(),
            pairs.len()
        ),
    )
}

fn seed_stability(report: &BenchmarkReport, bench_time: Duration) -> Outcome {
    let worst = report.aggregates.iter().map(|a| a.avg_auroc_std).fold(0.0, f64::max);
    outcome(
        report.seeds.len() == 3 && worst <= 0.005,
        format!(
            "max AvgAUROC std {worst:.4} over {} method×backbone rows, default benchmark {:.1}s",
            report.aggregates.len(),
            bench_time.as_secs_f64()
        ),
    )
}

fn replay_fidelity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::parse(REPLAY).unwrap();
    config.seeds = vec![0];
    let (live_cfg, live, records) = record_run(&config).unwrap();
    let dump = dir.path().join("features.cfsd");
    write_dump(&dump, &records).unwrap();
    let replay = run_benchmark(&replay_config(&live_cfg, &dump).unwrap()).unwrap();
    let same_keys = live.rows.len() == replay.rows.len()
        && live
            .rows
            .iter()
            .zip(&replay.rows)
            .all(|(a, b)| (&a.id, &a.ood, &a.method, a.seed) == (&b.id, &b.ood, &b.method, b.seed));
    let max_diff = live
        .rows
        .iter()
        .zip(&replay.rows)
        .map(|(a, b)| (a.auroc - b.auroc).abs())
        .fold(0.0, f64::max);

    let bytes = std::fs::read(&dump).unwrap();
    let open = |data: &[u8]| {
        let path = dir.path().join("bad.cfsd");
        std::fs::write(&path, data).unwrap();
        replay_config(&live_cfg, &path)
            .and_then(|c| c.backbones[0].build().map(|_| ()))
            .is_err()
    };
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x01;
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let rejected = [
        open(&flipped),
        open(&magic),
        open(&bytes[..bytes.len() - 3]),
        open(&bytes[..10]),
    ];
    outcome(
        same_keys && max_diff <= 1e-12 && rejected.iter().all(|r| *r),
        format!(
            "{} pairs, max |ΔAUROC| {max_diff:.1e}, corrupt/magic/truncated/short rejected: {rejected:?}",
            live.rows.len()
        ),
    )
}

fn mismatch(diag: &DiagnosticsReport) -> Outcome {
    let rows = &diag.mismatch;
    let exact = rows.first().is_some_and(|r| r.mismatch == 0.0 && r.drift == 0.0);
    let monotone = rows.windows(2).all(|w| w[1].drift >= w[0].drift && w[1].mismatch > w[0].mismatch);
    outcome(
        rows.len() == 3 && exact && monotone,
        format!(
            "drift {:?} at |Δλ| {:?}",
            rows.iter().map(|r| (r.drift * 1e4).round() / 1e4).collect::<Vec<_>>(),
            rows.iter().map(|r| r.mismatch).collect::<Vec<_>>()
        ),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[test]
fn acceptance() {
    let suite = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, Duration, Option<Duration>)> = Vec::new();

    let (o, t) = timed(complementarity);
    results.push((1, "complementarity identity", o, t, Some(Duration::from_secs(5))));
    let (o, t) = timed(score_moments);
    results.push((2, "diagonal-score moments", o, t, Some(Duration::from_secs(30))));

    let diag_cfg = RunConfig::parse(DIAG).unwrap();
    let (diag, diag_time) = timed(|| run_diagnostics(&diag_cfg, diag_cfg.seeds[0]).unwrap());
    let (o, t) = timed(|| low_noise(&diag));
    results.push((3, "low-noise stability", o, t + diag_time, Some(Duration::from_secs(30))));
    let (o, t) = timed(canonicalization);
    results.push((4, "canonicalization", o, t, None));
    let (o, t) = timed(auroc_oracle);
    results.push((5, "AUROC oracle equivalence", o, t, None));
    results.push((
        6,
        "diagnostics predictivity",
        diagnostics_predictivity(&diag, diag_time),
        diag_time,
        Some(Duration::from_secs(120)),
    ));

    let default_cfg = RunConfig::parse(DEFAULT).unwrap();
    let (report, bench_time) = timed(|| run_benchmark(&default_cfg).unwrap());
    let (o, t) = timed(|| budget_laws(&report));
    results.push((7, "budget laws", o, t + bench_time, None));
    let (o, t) = timed(|| protocol_sanity(&report));
    results.push((8, "protocol sanity", o, t, None));
    let (o, t) = timed(replay_fidelity);
    let replay = (o, t);
    let (o, t) = timed(|| mismatch(&diag));
    let mismatch_row = (o, t);

    results.push((10, "replay fidelity", replay.0, replay.1, None));
    results.push((11, "mismatch diagnostic", mismatch_row.0, mismatch_row.1, None));
    let total = suite.elapsed();
    let seed = seed_stability(&report, bench_time);
    let seed = outcome(
        seed.pass && total < Duration::from_secs(300),
        format!("{}; suite {:.1}s", seed.detail, total.as_secs_f64()),
    );
    results.push((9, "seed stability", seed, total, Some(Duration::from_secs(300))));
    results.sort_by_key(|r| r.0);

    println!();
    let mut failed = Vec::new();
    for (id, name, o, t, limit) in &results {
        let pass = o.pass && limit.is_none_or(|l| *t < l);
        if !pass {
            failed.push(*id);
        }
        let budget = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
        println!(
            "[{}] {id:>2}. {name:<27} {:>7.2}s{budget}  {}",
            if pass { "PASS" } else { "FAIL" },
            t.as_secs_f64(),
            o.detail
        );
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
