use approx::assert_abs_diff_eq;
use rand::Rng;
use rand_distr::StandardNormal;

use jelo::data::{LongitudinalDataset, RawRecord};
use jelo::error::Error;
use jelo::model::{JointModel, ModelSpec, ParamVector, PriorConfig};
use jelo::ppc::{
    ppc_pvalues, ppc_report, replicate_quantiles, simulate_outcome_replicates, t_statistic,
};
use jelo::sampler::{
    run_model, ChainDraws, ChainStats, FitResult, PosteriorDraws, SamplerConfig,
};
use jelo::seeding::rng_for;

#[test]
fn t_statistic_matches_hand_examples() {
    // x identical to the fitted mean curve
    let t = t_statistic(&[1.0, 3.0], &[0.0, 2.0], &[1.0, 1.0], 0.7, false).unwrap();
    assert_abs_diff_eq!(t, 0.0);
    // one observation, residual 2, sd 2 -> 4/2 = 2
    let t = t_statistic(&[3.0], &[0.0], &[1.0, 0.0], 2.0, false).unwrap();
    assert_abs_diff_eq!(t, 2.0);
    // residuals (1,-1,2) with unit sd -> 1+1+4 = 6
    let t = t_statistic(
        &[1.0, -1.0, 2.0],
        &[0.0, 1.0, 2.0],
        &[0.0, 0.0],
        1.0,
        false,
    )
    .unwrap();
    assert_abs_diff_eq!(t, 6.0);
    // variance denominator divides by s^2 instead
    let t = t_statistic(&[3.0], &[0.0], &[1.0, 0.0], 2.0, true).unwrap();
    assert_abs_diff_eq!(t, 1.0);
    assert!(matches!(
        t_statistic(&[1.0], &[0.0], &[0.0, 0.0], 0.0, false),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        t_statistic(&[], &[], &[0.0, 0.0], 1.0, false),
        Err(Error::Domain(_))
    ));
}

/// Dataset with subject-level truths returned for corruption tests.
fn gen_dataset(n_subjects: usize, tag: &str) -> (LongitudinalDataset, Vec<(f64, f64, f64)>) {
    let mut rng = rng_for(777, tag);
    let mut records = Vec::new();
    let mut truths = Vec::new();
    for i in 0..n_subjects {
        let b0 = 0.5 * rng.sample::<f64, _>(StandardNormal);
        let b1 = 0.8 + 0.2 * rng.sample::<f64, _>(StandardNormal);
        let log_s2 = -1.6 + 0.9 * rng.sample::<f64, _>(StandardNormal);
        let s = (0.5 * log_s2).exp();
        let a = 0.3 * rng.sample::<f64, _>(StandardNormal);
        truths.push((b0, b1, s));
        let n_i = 4 + (i % 3);
        for j in 0..n_i {
            let t = j as f64;
            let x = b0 + b1 * t + s * rng.sample::<f64, _>(StandardNormal);
            let eta = 1.0 + 0.5 * (b0 + b1 * t) - 0.2 * t + a;
            let y = eta + 0.2 * rng.sample::<f64, _>(StandardNormal);
            records.push(RawRecord {
                subject_id: format!("s{i:02}"),
                time: t,
                marker: x,
                outcome: y,
                covariates: vec![],
            });
        }
    }
    (LongitudinalDataset::from_records(records, vec![]), truths)
}

/// FitResult around hand-chosen constrained draws; no sampling involved.
fn fit_from_params(dataset: &LongitudinalDataset, pvs: &[ParamVector]) -> FitResult {
    let model = JointModel::new(dataset, ModelSpec::default(), PriorConfig::default()).unwrap();
    let thetas: Vec<Vec<f64>> = pvs
        .iter()
        .map(|pv| model.layout.unconstrain(pv).unwrap())
        .collect();
    let dim = model.layout.dim();
    let stats = ChainStats {
        step_size: vec![],
        n_leapfrog: vec![],
        accept_stat: vec![],
        divergent: vec![],
        adapted_step_size: 0.1,
    };
    FitResult {
        model,
        draws: PosteriorDraws {
            dim,
            chains: vec![ChainDraws {
                draws: thetas,
                stats,
            }],
            warnings: vec![],
        },
        global_names: vec![],
        global_draws: vec![vec![]],
        summaries: vec![],
        warnings: vec![],
    }
}

/// ParamVector for the default spec (P=2, constant variance, intercept RE).
fn pv_for(
    b: Vec<Vec<f64>>,
    log_s2: Vec<f64>,
    a0: Vec<f64>,
    beta: Vec<f64>,
    sigma: f64,
) -> ParamVector {
    let nu = log_s2.iter().sum::<f64>() / log_s2.len() as f64;
    ParamVector {
        b,
        log_s2,
        lambda: vec![],
        a: a0.into_iter().map(|v| vec![v]).collect(),
        alpha: vec![0.0, 0.5],
        k: vec![1.0, 1.0],
        l: vec![1.0, 0.0, 0.0, 1.0],
        nu,
        psi: 0.5,
        delta: vec![],
        k_s: vec![],
        l_s: vec![],
        beta,
        sigma,
        tau_a: vec![0.5],
        l_a: vec![1.0],
    }
}

#[test]
fn zero_noise_draw_replicates_linear_predictor() {
    let (data, _) = gen_dataset(3, "zero-noise");
    let b = vec![vec![0.2, 0.9], vec![-0.1, 1.0], vec![0.4, 0.7]];
    let log_s2 = vec![-1.0, -1.5, -2.0];
    let a0 = vec![0.1, -0.2, 0.0];
    let beta = vec![1.0, 0.5, -0.3, -0.2, 0.05, 0.02];
    let pv = pv_for(b.clone(), log_s2.clone(), a0.clone(), beta.clone(), 1e-12);
    let fit = fit_from_params(&data, &[pv]);
    let reps = simulate_outcome_replicates(&fit, 1, 42).unwrap();
    assert_eq!(reps.len(), 1);

    let mut col = 0usize;
    for i in 0..3 {
        for &t in &fit.model.data.times[i] {
            let mu = b[i][0] + b[i][1] * t;
            let s2 = log_s2[i].exp();
            let eta = a0[i]
                + beta[0]
                + beta[1] * mu
                + beta[2] * s2
                + beta[3] * t
                + beta[4] * mu * t
                + beta[5] * s2 * t;
            assert_abs_diff_eq!(reps[0][col], eta, epsilon = 1e-9);
            col += 1;
        }
    }
    assert_eq!(col, reps[0].len());
}

#[test]
fn n_rep_bounded_by_available_draws() {
    let (data, _) = gen_dataset(3, "bound");
    let pv = pv_for(
        vec![vec![0.0, 1.0]; 3],
        vec![-1.0; 3],
        vec![0.0; 3],
        vec![1.0, 0.5, -0.3, -0.2, 0.05, 0.02],
        0.2,
    );
    let fit = fit_from_params(&data, &[pv]);
    assert!(matches!(
        simulate_outcome_replicates(&fit, 2, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        simulate_outcome_replicates(&fit, 0, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn replicate_grand_mean_matches_observed_on_well_fit_data() {
    let (data, _) = gen_dataset(20, "selfcons");
    let cfg = SamplerConfig {
        iterations: 600,
        warmup: 300,
        seed: 11,
        ..SamplerConfig::default()
    };
    let fit = run_model(&data, &ModelSpec::default(), &PriorConfig::default(), &cfg).unwrap();
    let reps = simulate_outcome_replicates(&fit, 400, 3).unwrap();

    let obs_mean = {
        let all: Vec<f64> = fit.model.data.y.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let rep_means: Vec<f64> = reps
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let grand = rep_means.iter().sum::<f64>() / rep_means.len() as f64;
    let sd = {
        let v = rep_means
            .iter()
            .map(|m| (m - grand) * (m - grand))
            .sum::<f64>()
            / (rep_means.len() - 1) as f64;
        v.sqrt()
    };
    assert!(
        (grand - obs_mean).abs() < 3.0 * sd,
        "grand {grand} obs {obs_mean} sd {sd}"
    );
}

#[test]
fn pvalues_calibrated_on_well_specified_fit() {
    let (data, _) = gen_dataset(60, "calib");
    let cfg = SamplerConfig {
        iterations: 600,
        warmup: 300,
        seed: 12,
        ..SamplerConfig::default()
    };
    let fit = run_model(&data, &ModelSpec::default(), &PriorConfig::default(), &cfg).unwrap();
    let report = ppc_report(&fit, 100, false, 9).unwrap();
    assert_eq!(report.p_values.len(), 60);
    assert!(report.p_values.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(
        report.frac_wide >= 0.8,
        "frac in (0.05,0.95) = {}",
        report.frac_wide
    );
    assert!(
        report.frac_mid > 0.5,
        "frac in (0.25,0.75) = {}",
        report.frac_mid
    );
}

#[test]
fn inflated_variance_subject_flagged() {
    let (data, truths) = gen_dataset(25, "misfit");
    let cfg = SamplerConfig {
        iterations: 500,
        warmup: 250,
        seed: 13,
        ..SamplerConfig::default()
    };
    let fit = run_model(&data, &ModelSpec::default(), &PriorConfig::default(), &cfg).unwrap();

    // Inflate subject s00's marker residuals around its true mean curve by
    // sqrt(10)x AFTER fitting, so the fitted variances stay clean.
    let (b0, b1, _) = truths[0];
    let mut records = data.to_records();
    for r in &mut records {
        if r.subject_id == "s00" {
            let mu = b0 + b1 * r.time;
            r.marker = mu + 10f64.sqrt() * (r.marker - mu);
        }
    }
    let data2 = LongitudinalDataset::from_records(records, vec![]);
    let model2 = JointModel::new(&data2, ModelSpec::default(), PriorConfig::default()).unwrap();
    let idx0 = model2
        .data
        .subject_ids
        .iter()
        .position(|s| s == "s00")
        .unwrap();
    let fit2 = FitResult {
        model: model2,
        draws: fit.draws,
        global_names: vec![],
        global_draws: vec![vec![]],
        summaries: vec![],
        warnings: vec![],
    };
    let p = ppc_pvalues(&fit2, false, 21).unwrap();
    assert!(p[idx0] < 0.05, "inflated subject p = {}", p[idx0]);
}

#[test]
fn degenerate_subject_at_fitted_mean_has_pvalue_near_one() {
    let (data, _) = gen_dataset(3, "degen");
    // put subject 0's observations exactly on the draw's mean curve
    let b = vec![vec![0.2, 0.9], vec![-0.1, 1.0], vec![0.4, 0.7]];
    let mut records = data.to_records();
    for r in &mut records {
        if r.subject_id == "s00" {
            r.marker = b[0][0] + b[0][1] * r.time;
        }
    }
    let data = LongitudinalDataset::from_records(records, vec![]);
    let pv = pv_for(
        b,
        vec![-1.0, -1.5, -2.0],
        vec![0.0; 3],
        vec![1.0, 0.5, -0.3, -0.2, 0.05, 0.02],
        0.2,
    );
    // several identical draws so the fraction is over a few comparisons
    let fit = fit_from_params(&data, &vec![pv; 20]);
    let p = ppc_pvalues(&fit, false, 5).unwrap();
    assert_abs_diff_eq!(p[0], 1.0);
}

#[test]
fn pvalues_follow_subject_relabeling() {
    let (data, _) = gen_dataset(4, "relabel");
    let b = vec![
        vec![0.2, 0.9],
        vec![-0.1, 1.0],
        vec![0.4, 0.7],
        vec![0.0, 1.2],
    ];
    let log_s2 = vec![-1.0, -1.5, -2.0, -0.5];
    let a0 = vec![0.1, -0.2, 0.0, 0.3];
    let beta = vec![1.0, 0.5, -0.3, -0.2, 0.05, 0.02];
    let pv = pv_for(b.clone(), log_s2.clone(), a0.clone(), beta.clone(), 0.2);
    let fit = fit_from_params(&data, &[pv]);
    let p1 = ppc_pvalues(&fit, false, 33).unwrap();

    // rename so the sorted subject order reverses: s00->z3, s01->z2, ...
    let rename = |id: &str| -> String {
        let i: usize = id[1..].parse().unwrap();
        format!("z{}", 3 - i)
    };
    let mut records = data.to_records();
    for r in &mut records {
        r.subject_id = rename(&r.subject_id);
    }
    let data2 = LongitudinalDataset::from_records(records, vec![]);
    // subject-indexed params must be permuted to match the new sort order
    let perm = [3usize, 2, 1, 0];
    let pv2 = pv_for(
        perm.iter().map(|&i| b[i].clone()).collect(),
        perm.iter().map(|&i| log_s2[i]).collect(),
        perm.iter().map(|&i| a0[i]).collect(),
        beta,
        0.2,
    );
    let model2 = JointModel::new(&data2, ModelSpec::default(), PriorConfig::default()).unwrap();
    assert_eq!(
        model2.data.subject_ids,
        vec!["z0", "z1", "z2", "z3"],
        "sorted order should have reversed"
    );
    let fit2 = fit_from_params(&data2, &[pv2]);
    let p2 = ppc_pvalues(&fit2, false, 33).unwrap();
    // old subject i sits at new position 3-i under id zi -> z(3-i)... map:
    // new position j holds old subject perm[j]
    for (j, &old) in perm.iter().enumerate() {
        assert_abs_diff_eq!(p2[j], p1[old]);
    }
}

#[test]
fn replicate_quantiles_are_ordered_and_match_hand_case() {
    let reps = vec![
        vec![1.0, 10.0],
        vec![2.0, 20.0],
        vec![3.0, 30.0],
        vec![4.0, 40.0],
        vec![5.0, 50.0],
    ];
    let q = replicate_quantiles(&reps, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(q[0], vec![1.0, 10.0]);
    assert_eq!(q[1], vec![3.0, 30.0]);
    assert_eq!(q[2], vec![5.0, 50.0]);
    assert!(matches!(
        replicate_quantiles(&[], &[0.5]),
        Err(Error::Config(_))
    ));
}
