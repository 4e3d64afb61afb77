//! Executable identity suite behind `snapdiff verify`.
//!
//! Every check prints one pass/fail line with the measured quantity, so a
//! regression names the identity it broke. The `--inject-bug` negative
//! control deliberately mis-scales the effective loss weight to prove the
//! equivalence check has teeth.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{
    denoise, forward_process, loss_d, loss_f, sample_sigma, scalings, train_target,
    DiffusionConfig, Variant,
};
use crate::error::Result;
use crate::sampler::{karras_schedule, SamplerConfig};
use crate::snr::snr_scaling_experiment;
use crate::tensor::{grad_check, Tensor};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Negative control: corrupt the effective loss weight so the
    /// loss-equivalence check must fail.
    pub inject_sigma_in_bug: bool,
}

fn cfg(variant: Variant, sigma_in: f64) -> DiffusionConfig {
    DiffusionConfig {
        variant,
        sigma_in,
        ..DiffusionConfig::default()
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.sample(StandardNormal)).collect(), shape).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn sigma_grid(n: usize) -> Vec<f64> {
    // Log-spaced grid over the default [sigma_min, sigma_max].
    let (lo, hi) = (0.002f64.ln(), 80f64.ln());
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Framework reduction at `sigma_in = 1`: every quantity of the SnapVideo
/// column matches the side-by-side EDM implementation to relative 1e-12
/// over a 100-point grid, and the modified sampler's schedule and map
/// coincide with the plain EDM one.
pub fn check_table1_reduction() -> CheckResult {
    let e = cfg(Variant::Edm, 1.0);
    let s = cfg(Variant::SnapVideo, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for sigma in sigma_grid(100) {
        let (se, ss) = (scalings(sigma, &e).unwrap(), scalings(sigma, &s).unwrap());
        for (a, b) in [
            (se.c_in, ss.c_in),
            (se.c_out, ss.c_out),
            (se.c_skip, ss.c_skip),
            (se.c_nrm, ss.c_nrm),
            (se.w, ss.w),
            (se.lambda, ss.lambda),
        ] {
            worst = worst.max(rel(a, b));
        }
        let x = randn(&[1, 4], &mut rng);
        let eps = randn(&[1, 4], &mut rng);
        let f = randn(&[1, 4], &mut rng);
        let te = train_target(&x, &eps, sigma, &e).unwrap();
        let ts = train_target(&x, &eps, sigma, &s).unwrap();
        let fe = forward_process(&x, sigma, &eps, &e).unwrap();
        let fs = forward_process(&x, sigma, &eps, &s).unwrap();
        let de = denoise(&f, &fe, sigma, &e).unwrap();
        let ds = denoise(&f, &fs, sigma, &s).unwrap();
        for (a, b) in te
            .data()
            .iter()
            .zip(ts.data())
            .chain(fe.data().iter().zip(fs.data()))
            .chain(de.data().iter().zip(ds.data()))
        {
            if (a - b).abs() > 1e-14 {
                worst = worst.max(rel(*a, *b));
            }
        }
        let lde = loss_d(&de, &x, sigma, &e).unwrap().item().unwrap();
        let lds = loss_d(&ds, &x, sigma, &s).unwrap().item().unwrap();
        let lfe = loss_f(&f, &x, &eps, sigma, &e).unwrap().item().unwrap();
        let lfs = loss_f(&f, &x, &eps, sigma, &s).unwrap().item().unwrap();
        worst = worst.max(rel(lde, lds)).max(rel(lfe, lfs));
    }

    // Sampler reduction: the modified Heun loop with sigma_in = 1 against an
    // independent plain-EDM reference on the Gaussian-oracle denoiser.
    let scfg = SamplerConfig {
        steps: 24,
        threshold_percentile: None,
        ..SamplerConfig::default()
    };
    let schedule = karras_schedule(&scfg, &s).unwrap();
    let denoiser = |x: &Tensor<f64>, sigma: f64| -> Tensor<f64> {
        x.scale(1.0 / (1.0 + sigma * sigma)).unwrap()
    };
    let init = randn(&[64], &mut rng).scale(80.0).unwrap();

    // Modified sampler at sigma_in = 1.
    let mut x = init.clone();
    for i in 0..scfg.steps {
        x = crate::sampler::heun_step(&x, schedule[i], schedule[i + 1], 1.0, |xs, sg| {
            Ok(denoiser(xs, sg))
        })
        .unwrap();
    }
    let ours = x.scale(1.0).unwrap();

    // Plain EDM reference (no sigma_in anywhere).
    let mut x = init;
    for i in 0..scfg.steps {
        let (s0, s1) = (schedule[i], schedule[i + 1]);
        let d0 = denoiser(&x, s0);
        let slope = x.sub(&d0).unwrap().scale(1.0 / s0).unwrap();
        let euler = x.add(&slope.scale(s1 - s0).unwrap()).unwrap();
        x = if s1 == 0.0 {
            euler
        } else {
            let d1 = denoiser(&euler, s1);
            let slope1 = euler.sub(&d1).unwrap().scale(1.0 / s1).unwrap();
            x.add(&slope.add(&slope1).unwrap().scale(0.5).unwrap().scale(s1 - s0).unwrap())
                .unwrap()
        };
    }
    for (a, b) in ours.data().iter().zip(x.data()) {
        if (a - b).abs() > 1e-14 {
            worst = worst.max(rel(*a, *b));
        }
    }

    check(
        "table1-reduction",
        worst <= 1e-12,
        format!("max relative deviation {worst:.3e} (tolerance 1e-12)"),
    )
}

/// Loss-form equivalence `lambda ||D - x||^2 == w ||F - c_nrm F_tgt||^2`
/// over 1000 random tuples for each `sigma_in` in {1, 2, 4, 32}.
pub fn check_loss_equivalence(inject_bug: bool) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for sigma_in in [1.0, 2.0, 4.0, 32.0] {
        let c = cfg(Variant::SnapVideo, sigma_in);
        for _ in 0..250 {
            let sigma = sample_sigma(&mut rng, &c);
            let x = randn(&[2, 4], &mut rng);
            let eps = randn(&[2, 4], &mut rng);
            let f = randn(&[2, 4], &mut rng);
            let xs = forward_process(&x, sigma, &eps, &c).unwrap();
            let d = denoise(&f, &xs, sigma, &c).unwrap();
            let ld = loss_d(&d, &x, sigma, &c).unwrap().item().unwrap();
            let mut lf = loss_f(&f, &x, &eps, sigma, &c).unwrap().item().unwrap();
            if inject_bug {
                // Pretend the effective weight had no sigma_in correction.
                let s = scalings(sigma, &c).unwrap();
                lf /= s.w;
            }
            worst = worst.max(rel(ld, lf));
        }
    }
    check(
        "loss-equivalence",
        worst <= 1e-8,
        format!("max relative deviation {worst:.3e} (tolerance 1e-8)"),
    )
}

/// v-prediction correspondence at `sigma_data = 1`: the target is exactly
/// `eps - sigma x` and `lambda = 1 + 1/sigma^2`.
pub fn check_v_prediction() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ok = true;
    let mut worst = 0.0f64;
    for sigma_in in [1.0, 4.0] {
        let c = cfg(Variant::SnapVideo, sigma_in);
        for sigma in sigma_grid(50) {
            let x = randn(&[8], &mut rng);
            let eps = randn(&[8], &mut rng);
            let tgt = train_target(&x, &eps, sigma, &c).unwrap();
            for ((t, xv), ev) in tgt.data().iter().zip(x.data()).zip(eps.data()) {
                let want = ev - sigma * xv;
                if (t - want).abs() > 0.0 {
                    worst = worst.max((t - want).abs());
                    ok = false;
                }
            }
            let lambda = scalings(sigma, &c).unwrap().lambda;
            if lambda != 1.0 + 1.0 / (sigma * sigma) {
                ok = false;
                worst = worst.max(rel(lambda, 1.0 + 1.0 / (sigma * sigma)));
            }
        }
    }
    check(
        "v-prediction",
        ok,
        format!("worst deviation {worst:.3e} (exactness required)"),
    )
}

/// The naive-EDM target diverges as `sigma -> 0` while the rewritten target
/// stays bounded.
pub fn check_spurious_divergence() -> CheckResult {
    let x = Tensor::<f64>::new(vec![1.0], &[1]).unwrap();
    let eps = Tensor::<f64>::zeros(&[1]).unwrap();
    let e = cfg(Variant::Edm, 4.0);
    let lo = train_target(&x, &eps, 1e-3, &e).unwrap().data()[0].abs();
    let hi = train_target(&x, &eps, 0.1, &e).unwrap().data()[0].abs();
    let ratio = lo / hi;

    let s = cfg(Variant::SnapVideo, 4.0);
    let bound = 1.0 + 80.0;
    let mut bounded = true;
    for sigma in sigma_grid(100) {
        let t = train_target(&x, &eps, sigma, &s).unwrap().data()[0].abs();
        bounded &= t <= bound + 1e-9;
    }
    check(
        "spurious-divergence",
        ratio >= 70.0 && bounded,
        format!("naive target ratio {ratio:.1} (needs >= 70); rewritten target bounded: {bounded}"),
    )
}

/// `c_in x_sigma` and `c_nrm F_tgt` have unit variance under
/// `x ~ N(0, sigma_data^2)`, `eps ~ N(0, 1)`.
pub fn check_unit_variance() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let c = cfg(Variant::SnapVideo, 4.0);
    let n = 1_000_000usize;
    let mut worst: f64 = 1.0;
    for sigma in [0.05, 1.0, 20.0] {
        let s = scalings(sigma, &c).unwrap();
        let mut var_in = 0.0;
        let mut var_tgt = 0.0;
        for _ in 0..n {
            let x: f64 = rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample::<f64, _>(StandardNormal);
            let xs = x / c.sigma_in + sigma * e;
            let tgt = e - sigma * x;
            var_in += (s.c_in * xs) * (s.c_in * xs);
            var_tgt += (s.c_nrm * tgt) * (s.c_nrm * tgt);
        }
        var_in /= n as f64;
        var_tgt /= n as f64;
        for v in [var_in, var_tgt] {
            if (v - 1.0).abs() > (worst - 1.0).abs() {
                worst = v;
            }
        }
    }
    check(
        "unit-variance",
        (0.98..=1.02).contains(&worst),
        format!("worst variance {worst:.5} (tolerance [0.98, 1.02])"),
    )
}

/// The ideal network output makes the denoiser reproduce `x` to 1e-9.
pub fn check_oracle_exactness() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for sigma_in in [1.0, 2.0, 4.0, 32.0] {
        let c = cfg(Variant::SnapVideo, sigma_in);
        for sigma in sigma_grid(25) {
            let x = randn(&[16], &mut rng);
            let eps = randn(&[16], &mut rng);
            let xs = forward_process(&x, sigma, &eps, &c).unwrap();
            let s = scalings(sigma, &c).unwrap();
            let ideal = train_target(&x, &eps, sigma, &c).unwrap().scale(s.c_nrm).unwrap();
            let d = denoise(&ideal, &xs, sigma, &c).unwrap();
            for (dv, xv) in d.data().iter().zip(x.data()) {
                worst = worst.max((dv - xv).abs());
            }
        }
    }
    check(
        "oracle-exactness",
        worst <= 1e-9,
        format!("max |D - x| = {worst:.3e} (tolerance 1e-9)"),
    )
}

/// `lambda` carries no `sigma_in` dependence.
pub fn check_lambda_invariance() -> CheckResult {
    let mut ok = true;
    for sigma in sigma_grid(50) {
        let base = scalings(sigma, &cfg(Variant::SnapVideo, 1.0)).unwrap().lambda;
        for sigma_in in [2.0, 4.0, 32.0] {
            ok &= scalings(sigma, &cfg(Variant::SnapVideo, sigma_in)).unwrap().lambda == base;
        }
    }
    check("lambda-invariance", ok, "lambda identical across sigma_in".into())
}

/// `x_from_v(v_from_x(..))` round trip to 1e-10.
pub fn check_xv_roundtrip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for sigma_in in [1.0, 4.0, 32.0] {
        let c = cfg(Variant::SnapVideo, sigma_in);
        for sigma in sigma_grid(25) {
            let x = randn(&[8], &mut rng);
            let xs = randn(&[8], &mut rng);
            let v = crate::diffusion::v_from_x(&xs, &x, sigma, &c).unwrap();
            let back = crate::diffusion::x_from_v(&xs, &v, sigma, &c).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(
        "xv-roundtrip",
        worst <= 1e-10,
        format!("max round-trip error {worst:.3e} (tolerance 1e-10)"),
    )
}

/// The block-averaging SNR law over the (T, s) grid, plus the restoration
/// of the single-frame SNR under `sigma_in = s sqrt(T)`.
pub fn check_snr_law(trials: usize) -> CheckResult {
    let sigma = 1.0;
    let mut worst_ratio = 1.0f64;
    let mut worst_restore = 1.0f64;
    for t in [1usize, 2, 4, 16] {
        for s in [1usize, 2, 4] {
            let un = snr_scaling_experiment(t, s, sigma, false, trials, 909).unwrap();
            let norm = un.ratio / un.predicted_ratio;
            if (norm - 1.0).abs() > (worst_ratio - 1.0).abs() {
                worst_ratio = norm;
            }
            let sc = snr_scaling_experiment(t, s, sigma, true, trials, 909).unwrap();
            let reference = 1.0 / (sigma * sigma);
            let restore = sc.snr_avg / reference;
            if (restore - 1.0).abs() > (worst_restore - 1.0).abs() {
                worst_restore = restore;
            }
        }
    }
    let pass = (0.95..=1.05).contains(&worst_ratio) && (0.9..=1.1).contains(&worst_restore);
    check(
        "snr-law",
        pass,
        format!(
            "worst ratio/(T s^2) = {worst_ratio:.4} (in [0.95, 1.05]); worst restored SNR factor = {worst_restore:.4} (in [0.9, 1.1])"
        ),
    )
}

/// Finite-difference check of every differentiable primitive.
pub fn check_grad_primitives() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let x = randn(&[3, 4], &mut rng);
    let w = randn(&[3, 4], &mut rng);
    let m = randn(&[4, 5], &mut rng);
    let w35 = randn(&[3, 5], &mut rng);
    let g4 = randn(&[4], &mut rng);

    let mut worst = 0.0f64;
    let mut run = |f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>| {
        worst = worst.max(grad_check(f, &x, 1e-5).unwrap());
    };
    let wc = w.clone();
    run(&move |t| t.add(&wc)?.square()?.sum_all());
    let wc = w.clone();
    run(&move |t| t.sub(&wc)?.square()?.sum_all());
    let wc = w.clone();
    run(&move |t| t.mul(&wc)?.sum_all());
    run(&|t| t.scale(-1.5)?.sum_all());
    let wc = w.clone();
    run(&move |t| t.gelu()?.mul(&wc)?.sum_all());
    let (mc, w35c) = (m.clone(), w35.clone());
    run(&move |t| t.matmul(&mc)?.mul(&w35c)?.sum_all());
    let wc = w.clone();
    run(&move |t| t.softmax(1)?.mul(&wc)?.sum_all());
    let (gc, bc, wc) = (g4.clone(), g4.clone(), w.clone());
    run(&move |t| t.layer_norm(&gc, &bc, 1e-5)?.mul(&wc)?.sum_all());
    let wc = w.clone();
    run(&move |t| t.permute(&[1, 0])?.permute(&[1, 0])?.mul(&wc)?.sum_all());
    run(&|t| t.sum_all());

    check(
        "grad-primitives",
        worst <= 1e-5,
        format!("max relative gradient error {worst:.3e} (tolerance 1e-5)"),
    )
}

/// Run the whole suite.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_table1_reduction(),
        check_loss_equivalence(opts.inject_sigma_in_bug),
        check_v_prediction(),
        check_spurious_divergence(),
        check_unit_variance(),
        check_oracle_exactness(),
        check_lambda_invariance(),
        check_xv_roundtrip(),
        check_snr_law(400),
        check_grad_primitives(),
    ]
}

pub fn write_table<W: Write>(results: &[CheckResult], mut w: W) -> Result<()> {
    for r in results {
        writeln!(
            w,
            "{} {:<22} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        )?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(w, "{} checks, {} failed", results.len(), failed)?;
    Ok(())
}

pub fn write_csv<W: Write>(results: &[CheckResult], mut w: W) -> Result<()> {
    writeln!(w, "name,passed,detail")?;
    for r in results {
        writeln!(w, "{},{},\"{}\"", r.name, r.passed, r.detail.replace('"', "'"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_fresh_build() {
        let results = run_all(&VerifyOptions::default());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn injected_bug_fails_loss_equivalence() {
        let r = check_loss_equivalence(true);
        assert!(!r.passed, "negative control must fail: {}", r.detail);
    }

    #[test]
    fn table_and_csv_render() {
        let results = vec![CheckResult {
            name: "demo".into(),
            passed: true,
            detail: "ok".into(),
        }];
        let mut buf = Vec::new();
        write_table(&results, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("PASS demo"));
        let mut buf = Vec::new();
        write_csv(&results, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("name,passed"));
    }
}
