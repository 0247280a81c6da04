use jelo::simstudy::*;

#[test]
fn probe_hv_variance_magnitudes() {
    for (lo, hi) in [(-5.0, 5.0), (-1.0, 1.0), (0.0, 1.0), (0.0, 2.0)] {
        let mut cfg = DgpConfig::sim2_hv(7);
        cfg.time_range = (lo, hi);
        let rep = generate_replicate(&cfg, 0).unwrap();
        let mut max_s2 = 0f64;
        let mut max_abs_y = 0f64;
        let mut max_abs_x = 0f64;
        for (i, s) in rep.dataset.subjects.iter().enumerate() {
            let lam0 = rep.latents.log_var_intercept[i];
            let lam1 = rep.latents.log_var_slope[i];
            for (j, &t) in s.times.iter().enumerate() {
                let s2 = (lam0 + lam1 * t).exp();
                max_s2 = max_s2.max(s2);
                max_abs_y = max_abs_y.max(s.outcome[j].abs());
                max_abs_x = max_abs_x.max(s.marker[j].abs());
            }
        }
        println!(
            "range [{lo},{hi}]: max s2 {max_s2:.3e}  max|x| {max_abs_x:.3e}  max|y| {max_abs_y:.3e}"
        );
    }
}

#[test]
fn probe_tslmm_sim1_bias() {
    let cfg = DgpConfig::sim1(7);
    let mut sums = vec![0.0; 6];
    let mut cov = vec![0usize; 6];
    let r_max = 20;
    for r in 0..r_max {
        let rep = fit_replicate(&cfg, r, Fitter::Tslmm, &desk_sampler(7)).unwrap();
        for (k, p) in rep.params.iter().enumerate() {
            sums[k] += p.mean - p.truth;
            cov[k] += p.covered as usize;
        }
    }
    for k in 0..6 {
        println!("beta{k}: bias {:+.4}  coverage {}/{r_max}", sums[k] / r_max as f64, cov[k]);
    }
}

#[test]
fn probe_time_one_sim1_jelo_fit() {
    let cfg = DgpConfig::sim1(7);
    let t0 = std::time::Instant::now();
    let rep = fit_replicate(&cfg, 0, Fitter::Jelo, &desk_sampler(7)).unwrap();
    println!("sim1 desk JELO fit: {:.1?}s", t0.elapsed().as_secs_f64());
    for p in &rep.params {
        println!(
            "  {:14} truth {:+.3} mean {:+.3} [{:+.3},{:+.3}] cov {}",
            p.name, p.truth, p.mean, p.lower, p.upper, p.covered
        );
    }
    println!("warnings: {:?}", rep.warnings);
    println!("divergence rate: {:.3}", rep.divergence_rate);
}

#[test]
fn probe_init_point_finiteness() {
    use jelo::model::{JointModel, LogDensityModel, ModelSpec, PriorConfig};
    let cfg = DgpConfig::sim1(7);
    let rep = generate_replicate(&cfg, 0).unwrap();
    let model =
        JointModel::new(&rep.dataset, ModelSpec::default(), PriorConfig::default()).unwrap();
    let p = model.data_informed_init().expect("init point");
    let mut grad = vec![0.0; p.len()];
    let v = model.logdensity_grad(&p, &mut grad);
    println!("value {v}");
    let bad: Vec<usize> = (0..p.len()).filter(|&i| !grad[i].is_finite()).collect();
    println!("non-finite grad coords: {:?} of {}", &bad[..bad.len().min(10)], p.len());
    if let Some(&i) = bad.first() {
        println!("theta[{i}] = {}", p[i]);
    }
    let gmax = grad.iter().cloned().fold(0f64, |a, g| a.max(g.abs()));
    println!("max |grad| {gmax:.3e}");
}

#[test]
fn probe_map_ascent_progress() {
    use jelo::model::{JointModel, LogDensityModel, ModelSpec, PriorConfig};
    use jelo::sampler::map_ascent;
    let cfg = DgpConfig::sim1(7);
    let rep = generate_replicate(&cfg, 0).unwrap();
    let model =
        JointModel::new(&rep.dataset, ModelSpec::default(), PriorConfig::default()).unwrap();
    let mut p = model.data_informed_init().expect("init point");
    let mut grad = vec![0.0; p.len()];
    let v0 = model.logdensity_grad(&p, &mut grad);
    let t0 = std::time::Instant::now();
    map_ascent(&model, &mut p, 60);
    let v1 = model.logdensity_grad(&p, &mut grad);
    println!("map ascent: {v0:.1} -> {v1:.1} in {:.2}s", t0.elapsed().as_secs_f64());
    let pv = model.layout.constrain(&p);
    println!("sigma {:.4} tau_a {:?} k {:?}", pv.sigma, pv.tau_a, pv.k);
    println!("beta {:?}", pv.beta.iter().map(|b| (b * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("nu {:.3} psi {:.3}", pv.nu, pv.psi);
}

#[test]
fn probe_map_budget_curve() {
    use jelo::model::{JointModel, LogDensityModel, ModelSpec, PriorConfig};
    use jelo::sampler::map_ascent;
    let cfg = DgpConfig::sim1(7);
    let rep = generate_replicate(&cfg, 0).unwrap();
    let model =
        JointModel::new(&rep.dataset, ModelSpec::default(), PriorConfig::default()).unwrap();
    for steps in [60, 150, 400, 1000] {
        let mut p = model.data_informed_init().unwrap();
        let t0 = std::time::Instant::now();
        map_ascent(&model, &mut p, steps);
        let mut g = vec![0.0; p.len()];
        let v = model.logdensity_grad(&p, &mut g);
        let pv = model.layout.constrain(&p);
        println!(
            "steps {steps:4}: value {v:10.1} sigma {:.4} k0 {:.3} beta0 {:.3} time {:.2}s",
            pv.sigma, pv.k[0], pv.beta[0], t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
fn probe_long_trajectories() {
    let cfg = DgpConfig::sim1(7);
    let mut sc = desk_sampler(7);
    sc.leapfrog_steps = 256;
    let t0 = std::time::Instant::now();
    let rep = fit_replicate(&cfg, 0, Fitter::Jelo, &sc).unwrap();
    println!("sim1 desk L=256 fit: {:.1}s", t0.elapsed().as_secs_f64());
    for p in &rep.params {
        println!(
            "  {:14} truth {:+.3} mean {:+.3} [{:+.3},{:+.3}] len {:.3} cov {}",
            p.name, p.truth, p.mean, p.lower, p.upper, p.length, p.covered
        );
    }
    println!("warnings: {:?}", rep.warnings);
    println!("divergence rate: {:.3}", rep.divergence_rate);
}

#[test]
fn probe_max_trajectories() {
    let cfg = DgpConfig::sim1(7);
    let mut sc = desk_sampler(7);
    sc.leapfrog_steps = 1024;
    sc.target_accept = 0.9;
    let t0 = std::time::Instant::now();
    let rep = fit_replicate(&cfg, 0, Fitter::Jelo, &sc).unwrap();
    println!("sim1 desk L=1024 ta=0.9 fit: {:.1}s", t0.elapsed().as_secs_f64());
    for p in &rep.params {
        println!(
            "  {:14} truth {:+.3} mean {:+.3} [{:+.3},{:+.3}] len {:.3} cov {}",
            p.name, p.truth, p.mean, p.lower, p.upper, p.length, p.covered
        );
    }
    println!("warnings: {:?}", rep.warnings);
    println!("divergence rate: {:.3}", rep.divergence_rate);
}

#[test]
fn probe_mini_study_jelo() {
    let cfg = DgpConfig::sim1(7);
    let sc = desk_sampler(7);
    for r in 0..3usize {
        let t0 = std::time::Instant::now();
        let rep = fit_replicate(&cfg, r, Fitter::Jelo, &sc).unwrap();
        println!("rep {} ({:.0}s) div {:.3}", r, t0.elapsed().as_secs_f64(), rep.divergence_rate);
        for p in rep.params.iter().filter(|p| p.name.starts_with("beta")) {
            println!(
                "  {:14} bias {:+.4} len {:.4} cov {}",
                p.name,
                p.mean - p.truth,
                p.length,
                p.covered
            );
        }
        println!("  warnings: {:?}", rep.warnings);
    }
}

#[test]
fn probe_tslo_timing() {
    let cfg = DgpConfig::sim1(7);
    let sc = desk_sampler(7);
    let t0 = std::time::Instant::now();
    let rep = fit_replicate(&cfg, 0, Fitter::Tslo, &sc).unwrap();
    println!("tslo fit: {:.1}s", t0.elapsed().as_secs_f64());
    for p in &rep.params {
        println!(
            "  {:14} truth {:+.3} mean {:+.3} len {:.3} cov {}",
            p.name, p.truth, p.mean, p.length, p.covered
        );
    }
    println!("warnings: {:?}", rep.warnings);
}

#[test]
fn probe_init_globals() {
    let cfg = DgpConfig::sim1(7);
    let rep = generate_replicate(&cfg, 0).unwrap();
    let spec = jelo::model::config::ModelSpec::default();
    let model = jelo::model::JointModel::new(
        &rep.dataset,
        spec,
        jelo::model::config::PriorConfig::default(),
    )
    .unwrap();
    let mut theta = model.data_informed_init().unwrap();
    let names = model.layout.global_names();
    let vals = model.layout.global_values(&model.layout.constrain(&theta));
    println!("after init+refine:");
    for (n, v) in names.iter().zip(&vals) {
        println!("  {:14} {:+.4}", n, v);
    }
    jelo::sampler::map_ascent(&model, &mut theta, 60);
    let vals = model.layout.global_values(&model.layout.constrain(&theta));
    println!("after map_ascent:");
    for (n, v) in names.iter().zip(&vals) {
        println!("  {:14} {:+.4}", n, v);
    }
}
