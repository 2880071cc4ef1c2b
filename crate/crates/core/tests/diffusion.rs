use actionguide::diffusion::{
    apply_guidance, cfg_combine, clip_prediction, ddim_grid, energy, energy_grad, energy_of, guidance_gradient, guided_step, make_schedule, predict_z0, q_sample,
    reverse_step, step_pairs, EnergyKind, GuidanceMode, GuidanceSpec, NoiseSchedule, ReverseMode, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use actionguide::rng::{normal_mat, stream};
use actionguide::tensor::Mat;
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn alpha_bar_matches_running_product() {
    let s = NoiseSchedule::default();
    assert_eq!(s.len(), 1000);
    let mut prod = 1.0;
    for t in 1..=1000 {
        let beta = DEFAULT_BETA_START + (DEFAULT_BETA_END - DEFAULT_BETA_START) * (t - 1) as f64 / 999.0;
        assert!(close(s.beta(t), beta, 1e-12));
        prod *= 1.0 - beta;
        assert!(close(s.alpha_bar(t), prod, 1e-10), "t={t}");
    }
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 0.01);
}

#[test]
fn forward_noising_matches_closed_form() {
    let s = NoiseSchedule::default();
    let mut rng = stream(11, 0);
    let z0 = normal_mat(&mut rng, 4, 8);
    let eps = normal_mat(&mut rng, 4, 8);
    for t in [1, 17, 500, 1000] {
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..zt.len() {
            let expected = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!(close(zt.data()[i], expected, 1e-12));
        }
        // The true noise recovers the clean latent exactly.
        assert!(predict_z0(&zt, &eps, t, &s).max_abs_diff(&z0) < 1e-9);
    }
    assert!(q_sample(&z0, 0, &eps, &s).is_err());
    assert!(q_sample(&z0, 1001, &eps, &s).is_err());
    assert!(q_sample(&z0, 3, &Mat::zeros(2, 8), &s).is_err());
}

#[test]
fn deterministic_step_with_true_noise_lands_on_forward_marginal() {
    let s = NoiseSchedule::default();
    let mut rng = stream(12, 0);
    let z0 = normal_mat(&mut rng, 4, 6);
    let eps = normal_mat(&mut rng, 4, 6);
    let grid = ddim_grid(1000, 50).unwrap();
    let mut z = q_sample(&z0, grid[0], &eps, &s).unwrap();
    for (t, tp) in step_pairs(&grid) {
        z = reverse_step(&z, &eps, t, tp, &s, ReverseMode::Deterministic, None).unwrap();
        let expected = if tp == 0 { z0.clone() } else { q_sample(&z0, tp, &eps, &s).unwrap() };
        assert!(z.max_abs_diff(&expected) < 1e-9, "t={t} -> {tp}");
    }
}

#[test]
fn ancestral_without_noise_is_posterior_mean() {
    let s = NoiseSchedule::default();
    let mut rng = stream(13, 0);
    let z = normal_mat(&mut rng, 3, 5);
    let eps = normal_mat(&mut rng, 3, 5);
    for t in [1usize, 2, 400, 1000] {
        let out = reverse_step(&z, &eps, t, t - 1, &s, ReverseMode::Ancestral, None).unwrap();
        let zero = Mat::zeros(3, 5);
        let with_zero = reverse_step(&z, &eps, t, t - 1, &s, ReverseMode::Ancestral, Some(&zero)).unwrap();
        assert_eq!(out, with_zero);
        let (a, b, ab) = (s.alpha(t), s.beta(t), s.alpha_bar(t));
        for i in 0..z.len() {
            let mean = (z.data()[i] - b / (1.0 - ab).sqrt() * eps.data()[i]) / a.sqrt();
            assert!(close(out.data()[i], mean, 1e-12));
        }
    }
    let noise = normal_mat(&mut rng, 3, 5);
    let last = reverse_step(&z, &eps, 1, 0, &s, ReverseMode::Ancestral, Some(&noise)).unwrap();
    assert_eq!(last, reverse_step(&z, &eps, 1, 0, &s, ReverseMode::Ancestral, None).unwrap());
    let mid = reverse_step(&z, &eps, 10, 9, &s, ReverseMode::Ancestral, Some(&noise)).unwrap();
    let mean = reverse_step(&z, &eps, 10, 9, &s, ReverseMode::Ancestral, None).unwrap();
    assert!(mid.sub(&mean).max_abs_diff(&noise.scale(s.beta(10).sqrt())) < 1e-12);
    assert!(reverse_step(&z, &eps, 10, 5, &s, ReverseMode::Ancestral, None).is_err());
}

#[test]
fn grid_shapes() {
    assert_eq!(ddim_grid(1000, 1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
    let g = ddim_grid(1000, 50).unwrap();
    assert_eq!(g.len(), 50);
    assert_eq!(g[0], 1000);
    assert_eq!(*g.last().unwrap(), 1);
    assert!(g.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(step_pairs(&g).last().unwrap().1, 0);
    assert!(ddim_grid(1000, 0).is_err());
    assert!(ddim_grid(10, 11).is_err());
}

#[test]
fn cfg_endpoints() {
    let mut rng = stream(14, 0);
    let c = normal_mat(&mut rng, 2, 3);
    let u = normal_mat(&mut rng, 2, 3);
    assert_eq!(cfg_combine(&c, &u, 1.0), c);
    assert_eq!(cfg_combine(&c, &u, 0.0), u);
    let seven = cfg_combine(&c, &u, 7.5);
    assert!(seven.max_abs_diff(&u.add(&c.sub(&u).scale(7.5))) < 1e-12);
}

#[test]
fn clipping_clamps_only_out_of_range_predictions() {
    let sched = NoiseSchedule::default();
    let mut rng = stream(15, 0);
    for t in [1, 200, 999] {
        let z = normal_mat(&mut rng, 4, 8).scale(3.0);
        let eps = normal_mat(&mut rng, 4, 8).scale(3.0);
        let clipped = clip_prediction(&z, &eps, t, &sched, 3.0);
        let raw = predict_z0(&z, &eps, t, &sched);
        let z0 = predict_z0(&z, &clipped, t, &sched);
        let mut outside = 0;
        for i in 0..4 {
            for j in 0..8 {
                let r = raw.get(i, j);
                if r.abs() <= 3.0 {
                    assert_eq!(clipped.get(i, j).to_bits(), eps.get(i, j).to_bits());
                } else {
                    outside += 1;
                    assert!(close(z0.get(i, j), r.signum() * 3.0, 1e-9), "t {t}: {} vs {r}", z0.get(i, j));
                }
            }
        }
        assert!(outside > 0, "t {t} exercised no clamping");
    }
    let z = normal_mat(&mut rng, 2, 3);
    let eps = normal_mat(&mut rng, 2, 3);
    assert_eq!(clip_prediction(&z, &eps, 500, &sched, f64::INFINITY), eps);
}

#[test]
fn empty_guidance_is_bitwise_identity() {
    let s = NoiseSchedule::default();
    let mut rng = stream(15, 0);
    let z = normal_mat(&mut rng, 4, 4);
    let eps = normal_mat(&mut rng, 4, 4);
    for mode in [ReverseMode::Deterministic, ReverseMode::Ancestral] {
        let plain = reverse_step(&z, &eps, 20, 19, &s, mode, None).unwrap();
        let guided = guided_step(&z, &eps, 20, 19, &s, &GuidanceSpec::none(), mode, None).unwrap();
        assert_eq!(plain.data(), guided.data());
    }
}

#[test]
fn guidance_gradient_sums_over_references() {
    let s = NoiseSchedule::default();
    let mut rng = stream(16, 0);
    let z = normal_mat(&mut rng, 2, 4);
    let eps = normal_mat(&mut rng, 2, 4);
    let refs: Vec<Mat> = (0..3).map(|_| normal_mat(&mut rng, 2, 4)).collect();
    let weights = [0.3, 0.0, 1.2];
    for mode in [GuidanceMode::ScaledReference, GuidanceMode::CleanEstimate] {
        let joint = GuidanceSpec { references: refs.clone(), weights: weights.to_vec(), mode, energy: EnergyKind::SquaredL2 };
        let total = guidance_gradient(&z, &eps, 300, &s, &joint).unwrap();
        let mut parts = Mat::zeros(2, 4);
        for k in 0..3 {
            let one = GuidanceSpec { references: vec![refs[k].clone()], weights: vec![weights[k]], mode, energy: EnergyKind::SquaredL2 };
            parts.add_assign(&guidance_gradient(&z, &eps, 300, &s, &one).unwrap());
        }
        assert!(total.max_abs_diff(&parts) < 1e-12);
    }
}

#[test]
fn clean_estimate_gradient_matches_finite_differences() {
    let s = NoiseSchedule::default();
    let mut rng = stream(17, 0);
    let z = normal_mat(&mut rng, 2, 3);
    let eps = normal_mat(&mut rng, 2, 3);
    let c = normal_mat(&mut rng, 2, 3);
    let t = 250;
    for kind in [EnergyKind::SquaredL2, EnergyKind::L2] {
        let spec = GuidanceSpec { references: vec![c.clone()], weights: vec![1.0], mode: GuidanceMode::CleanEstimate, energy: kind };
        let g = guidance_gradient(&z, &eps, t, &s, &spec).unwrap();
        let f = |z: &Mat| energy_of(kind, &c, &predict_z0(z, &eps, t, &s)).unwrap();
        for i in 0..z.len() {
            let h = 1e-6;
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(close(g.data()[i], fd, 1e-5), "{kind:?} {} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn guidance_rejects_bad_specs() {
    let s = NoiseSchedule::default();
    let z = Mat::zeros(2, 2);
    let bad_shape = GuidanceSpec { references: vec![Mat::zeros(3, 2)], weights: vec![0.1], ..GuidanceSpec::none() };
    assert!(apply_guidance(&z, &z, &z, 5, &s, &bad_shape).is_err());
    let negative = GuidanceSpec { references: vec![Mat::zeros(2, 2)], weights: vec![-0.1], ..GuidanceSpec::none() };
    assert!(apply_guidance(&z, &z, &z, 5, &s, &negative).is_err());
    let count = GuidanceSpec { references: vec![Mat::zeros(2, 2)], weights: vec![], ..GuidanceSpec::none() };
    assert!(apply_guidance(&z, &z, &z, 5, &s, &count).is_err());
    assert!(make_schedule(0, 0.1, 0.2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_is_a_squared_metric(seed in 0u64..100_000) {
        let mut rng = stream(seed, 0);
        let a = normal_mat(&mut rng, 3, 4);
        let b = normal_mat(&mut rng, 3, 4);
        prop_assert!(energy(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(energy(&a, &a).unwrap(), 0.0);
        prop_assert!(close(energy(&a, &b).unwrap(), energy(&b, &a).unwrap(), 1e-12));
        let l2 = energy_of(EnergyKind::L2, &a, &b).unwrap();
        prop_assert!(close(l2 * l2, energy(&a, &b).unwrap(), 1e-12));
        prop_assert!(energy_grad(EnergyKind::SquaredL2, &a, &b).max_abs_diff(&b.sub(&a).scale(2.0)) < 1e-12);
    }

    #[test]
    fn single_reference_contracts_toward_target(seed in 0u64..100_000, lambda in 0.0f64..0.5, t in 1usize..=1000) {
        // With z̃ = z_t the scaled-reference step gives z − √ᾱc ↦ (1 − 2λ)(z − √ᾱc).
        let s = NoiseSchedule::default();
        let mut rng = stream(seed, 1);
        let z = normal_mat(&mut rng, 2, 5);
        let c = normal_mat(&mut rng, 2, 5);
        let eps = normal_mat(&mut rng, 2, 5);
        let spec = GuidanceSpec { references: vec![c.clone()], weights: vec![lambda], mode: GuidanceMode::ScaledReference, energy: EnergyKind::SquaredL2 };
        let out = apply_guidance(&z, &z, &eps, t, &s, &spec).unwrap();
        let target = c.scale(s.alpha_bar(t).sqrt());
        let before = energy(&target, &z).unwrap();
        let after = energy(&target, &out).unwrap();
        let factor = (1.0 - 2.0 * lambda).powi(2);
        prop_assert!(close(after, factor * before, 1e-9));
        prop_assert!(after <= before + 1e-12);
    }
}
