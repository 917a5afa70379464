//! Cross-solver consistency: the barrier, water-filling, weighted, and
//! channel-simulation paths must agree wherever their domains overlap.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semantic_rd::gaussian::{
    exhaustive_gaussian_oracle, solve_gaussian_rdf, solve_gaussian_rdf_weighted, GaussianOptions,
};
use semantic_rd::linalg;
use semantic_rd::model::GaussianSemanticModel;
use semantic_rd::verify::{build_test_channel, lemma2_psd_check, monte_carlo_distortions};
use semantic_rd::waterfill::{simultaneous_diagonalize, waterfill_solve};

fn toy_model() -> GaussianSemanticModel<f64> {
    GaussianSemanticModel::new(
        DMatrix::from_row_slice(3, 3, &[11.0, 0.0, 0.5, 0.0, 3.0, -2.0, 0.5, -2.0, 2.35]),
        DMatrix::from_row_slice(2, 3, &[0.0701, 0.305, 0.457, -0.0305, -0.220, 0.671]),
        DMatrix::from_row_slice(2, 2, &[0.701, -0.305, -0.305, 0.220]),
    )
    .unwrap()
}

/// Model whose covariance and state gram share an eigenbasis, rotated by a
/// random orthogonal matrix so nothing is diagonal in coordinates.
fn commuting_model(seed: u64, m: usize) -> GaussianSemanticModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = linalg::random_orthogonal::<f64, _>(m, &mut rng);
    let sigma: Vec<f64> = (0..m).map(|i| 0.5 + 1.3 * i as f64 + seed as f64 % 3.0).collect();
    let gains: Vec<f64> = (0..m).map(|i| if i % 3 == 2 { 0.0 } else { 0.3 + 0.4 * i as f64 }).collect();
    let kx = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma)) * q.transpose();
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
        gains.iter().map(|g| g.sqrt()).collect(),
    )) * q.transpose();
    GaussianSemanticModel::new(
        linalg::symmetrize(&kx),
        h,
        DMatrix::identity(m, m) * 0.05,
    )
    .unwrap()
}

#[test]
fn barrier_and_waterfill_agree_on_commuting_models() {
    let opts = GaussianOptions::default();
    for seed in 0..6u64 {
        let m = 2 + (seed as usize % 3);
        let model = commuting_model(seed, m);
        let spectral = simultaneous_diagonalize(&model, None).unwrap();
        let smax = model.state_image_trace() + model.noise_trace();
        let omax = model.obs_trace();
        for (fs, fo) in [(0.35, 0.3), (0.35, 0.85), (0.9, 0.3), (0.9, 0.9)] {
            let d_s = model.noise_trace() + fs * (smax - model.noise_trace());
            let d_o = fo * omax;
            let wf = waterfill_solve(&spectral, d_s, d_o).unwrap();
            let ip = solve_gaussian_rdf(&model, d_s, d_o, &opts).unwrap();
            assert!(
                (wf.rate - ip.rate).abs() < 1e-6,
                "seed {seed} budgets ({d_s:.3}, {d_o:.3}): {} vs {}",
                wf.rate,
                ip.rate
            );
        }
    }
}

#[test]
fn toy_budget_grid_matches_the_gradient_oracle() {
    let model = toy_model();
    let opts = GaussianOptions::default();
    for (d_s, d_o) in [(1.5, 4.0), (1.5, 9.0), (3.0, 4.0), (4.5, 12.0)] {
        let sol = solve_gaussian_rdf(&model, d_s, d_o, &opts).unwrap();
        let oracle = exhaustive_gaussian_oracle(&model, d_s, d_o).unwrap();
        assert!(
            (sol.rate - oracle).abs() < 1e-4,
            "({d_s}, {d_o}): {} vs {oracle}",
            sol.rate
        );
    }
}

#[test]
fn orthogonal_state_transform_collapses_to_one_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = GaussianOptions::default();
    for m in [2usize, 4] {
        let q = linalg::random_orthogonal::<f64, _>(m, &mut rng);
        let kx = linalg::random_spd::<f64, _>(m, 0.4, 6.0, &mut rng);
        let noise = 0.3;
        let model = GaussianSemanticModel::new(
            kx,
            q,
            DMatrix::identity(m, m) * (noise / m as f64),
        )
        .unwrap();
        // With H orthogonal the state budget is a second trace constraint
        // on the same matrix, so only the smaller effective budget counts.
        for (d_s, d_o) in [(1.2, 2.5), (2.0, 1.0), (1.3, 1.0 + noise)] {
            let both = solve_gaussian_rdf(&model, d_s, d_o, &opts).unwrap();
            let single = (d_s - noise).min(d_o);
            let merged = solve_gaussian_rdf(&model, f64::INFINITY, single, &opts).unwrap();
            assert!(
                (both.rate - merged.rate).abs() < 1e-8,
                "m={m} ({d_s}, {d_o}): {} vs {}",
                both.rate,
                merged.rate
            );
        }
    }
}

#[test]
fn solved_points_are_achieved_by_their_channel() {
    let model = toy_model();
    let opts = GaussianOptions::default();
    for (d_s, d_o) in [(1.5, 4.0), (2.0, 6.0), (1.2, 10.0), (5.0, 3.0)] {
        let sol = solve_gaussian_rdf(&model, d_s, d_o, &opts).unwrap();
        let channel = build_test_channel(&model, &sol.delta).unwrap();
        // The channel meets both budgets analytically...
        assert!(channel.obs_distortion() <= d_o + 1e-7);
        assert!(channel.state_distortion() <= d_s + 1e-7);
        // ...its noise really is a covariance...
        assert!(lemma2_psd_check(&sol.delta, model.obs_cov()).unwrap() >= -1e-10);
        // ...and it uses exactly the reported rate.
        assert!((channel.rate().unwrap() - sol.rate).abs() < 1e-9);
    }
}

#[test]
fn monte_carlo_bias_shrinks_with_sample_size() {
    let model = toy_model();
    let opts = GaussianOptions::default();
    let sol = solve_gaussian_rdf(&model, 1.5, 4.0, &opts).unwrap();
    let channel = build_test_channel(&model, &sol.delta).unwrap();
    let d_o = channel.obs_distortion();
    let d_s = channel.state_distortion();
    let mut small = 0.0;
    let mut large = 0.0;
    for seed in 0..10u64 {
        let coarse = monte_carlo_distortions(&channel, 10_000, seed).unwrap();
        let fine = monte_carlo_distortions(&channel, 160_000, seed).unwrap();
        small += (coarse.obs_distortion - d_o).abs() + (coarse.state_distortion - d_s).abs();
        large += (fine.obs_distortion - d_o).abs() + (fine.state_distortion - d_s).abs();
    }
    // 16x the samples: biases should shrink about fourfold on average.
    assert!(large < small, "bias did not shrink: {large} vs {small}");
}

#[test]
fn weighted_gaussian_matches_the_budget_line_minimum() {
    let model = toy_model();
    let opts = GaussianOptions::default();
    let (w_s, w_o, combined) = (0.4, 0.6, 4.0);
    let weighted = solve_gaussian_rdf_weighted(&model, w_s, w_o, combined, &opts).unwrap();

    let mut line_min = f64::INFINITY;
    for k in 1..80 {
        let d_s = model.noise_trace() + k as f64 * 0.05;
        let d_o = (combined - w_s * d_s) / w_o;
        if d_o <= 0.0 {
            break;
        }
        if let Ok(sol) = solve_gaussian_rdf(&model, d_s, d_o, &opts) {
            line_min = line_min.min(sol.rate);
        }
    }
    assert!(
        weighted.rate <= line_min + 1e-6,
        "{} vs line minimum {line_min}",
        weighted.rate
    );
    assert!(
        weighted.rate >= line_min - 1e-3,
        "{} vs line minimum {line_min}",
        weighted.rate
    );
}
