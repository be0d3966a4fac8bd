//! Oracles for the vol-of-vol calibration: the kernel/second-difference
//! correspondence on a smooth path, an independent Simpson oracle for the
//! normal quantile, Monte Carlo noise floors and recovery windows for the
//! normed variations, the coarse-grid consistency direction, a normality
//! check for the standardized first variation, and exact scaling laws.

mod common;

use common::{quantile, reflected_scalar_vol_path, rng};
use spotrank::realized::{block_covariances, spot_gap_estimate, BlockSpectrum, BlockingScheme};
use spotrank::simulate::{
    sample_observations, CovariancePath, ObservationSet, Provenance, SimulationSpec,
};
use spotrank::specmat::{sym_eigen, SymMatrix};
use spotrank::volofvol::{
    bnv_hat, datadriven_kappa, estimate_vol_of_vol, nearest_coarse_scheme, normal_quantile,
    nv_hat, rho_p_oracle, second_difference_weight, CalibrationMode, CoarseScheme, MatrixNorm,
};

fn coarse_blocks_of(obs: &ObservationSet, scheme: &CoarseScheme) -> Vec<BlockSpectrum> {
    let blocking = scheme.blocking().unwrap();
    block_covariances(obs, &blocking).unwrap()
}

#[test]
fn second_differences_match_kernel_quadrature_on_a_smooth_path() {
    // Sigma(t) = t^2 has exact block averages ((m+1)^3 - m^3) h^2 / 3, and
    // the second difference must equal int w_m(s) dSigma(s) = int w_m(s) 2s ds
    let h = 0.05;
    let blocks: Vec<BlockSpectrum> = (0..20)
        .map(|m| {
            let mf = m as f64;
            let avg = ((mf + 1.0).powi(3) - mf.powi(3)) * h * h / 3.0;
            BlockSpectrum::from_matrix(m, h, SymMatrix::diag(&[avg]).unwrap()).unwrap()
        })
        .collect();
    let diffs = spotrank::volofvol::second_differences(&blocks).unwrap();
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    };
    for (m, d) in diffs.iter().enumerate() {
        let start = m as f64 * h;
        let mut integral = 0.0;
        for piece in 0..3 {
            let a = start + piece as f64 * h;
            let b = a + h;
            integral += simpson(&|s| second_difference_weight(s - start, h) * 2.0 * s, a, b);
        }
        assert!(
            (d.get(0, 0) - integral).abs() < 1e-12,
            "block {m}: difference {} vs quadrature {integral}",
            d.get(0, 0)
        );
    }
}

#[test]
fn quantile_agrees_with_simpson_integration_of_the_density() {
    let density = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let simpson = |a: f64, b: f64, steps: usize| {
        let mut total = 0.0;
        let w = (b - a) / steps as f64;
        for i in 0..steps {
            let lo = a + i as f64 * w;
            total += w / 6.0 * (density(lo) + 4.0 * density(lo + 0.5 * w) + density(lo + w));
        }
        total
    };
    // bulk: CDF at the computed quantile recovers p at the 1e-9 scale
    for p in [1e-4, 0.01, 0.05, 0.2, 0.5, 0.77, 0.95, 0.999] {
        let q = normal_quantile(p).unwrap();
        let cdf = 0.5 + simpson(0.0, q, 40_000);
        assert!(
            (cdf - p).abs() < 1e-9,
            "p = {p}: Simpson CDF at the quantile is {cdf}"
        );
    }
    // far tails: the integrated tail mass beyond the quantile matches p
    // to 1e-8 relative
    for p in [1e-9, 1e-7, 1e-5] {
        let q = normal_quantile(p).unwrap();
        let tail = simpson(q.abs(), q.abs() + 14.0, 60_000);
        assert!(
            (tail - p).abs() < 1e-8 * p,
            "p = {p}: Simpson tail mass is {tail}"
        );
    }
}

#[test]
fn constant_covariance_keeps_variations_near_zero() {
    let n = 100_000;
    let scheme = nearest_coarse_scheme(n, 0.002, (n as f64).powf(-0.25)).unwrap();
    assert_eq!(scheme.coarse_blocks, 16);
    let path = CovariancePath::constant(SymMatrix::diag(&[1.0]).unwrap()).unwrap();
    let reps = 30;
    let (mut nv2_sum, mut bnv1_sum) = (0.0, 0.0);
    for rep in 0..reps {
        let spec = SimulationSpec::new(n, 0x11f0 + rep, path.clone()).unwrap();
        let obs = sample_observations(&spec).unwrap();
        let blocks = coarse_blocks_of(&obs, &scheme);
        let est = estimate_vol_of_vol(&blocks, 1, MatrixNorm::Spectral).unwrap();
        nv2_sum += est.nv_2p;
        bnv1_sum += est.bnv_p;
    }
    let nv2 = nv2_sum / reps as f64;
    let bnv1 = bnv1_sum / reps as f64;
    assert!(nv2 <= 0.05, "mean NV2 = {nv2} on a constant path");
    assert!(bnv1 <= 0.05, "mean BNV1 = {bnv1} on a constant path");
}

#[test]
fn reflected_scalar_model_recovers_unit_vol_of_vol() {
    let n = 1_000_000;
    let scheme = CoarseScheme::new(n, 0.01).unwrap();
    let reps = 20;
    let (mut nv1_sum, mut nv2_sum) = (0.0, 0.0);
    for rep in 0..reps {
        let mut path_rng = rng(0x9f0000 + rep);
        let path = reflected_scalar_vol_path(0.0, 1.0, 10_000, &mut path_rng);
        let spec = SimulationSpec::new(n, 0x1_0000 + rep, path).unwrap();
        let obs = sample_observations(&spec).unwrap();
        let blocks = coarse_blocks_of(&obs, &scheme);
        let est = estimate_vol_of_vol(&blocks, 1, MatrixNorm::Spectral).unwrap();
        nv1_sum += est.nv_p;
        nv2_sum += est.nv_2p;
    }
    let nv1 = nv1_sum / reps as f64;
    let nv2 = nv2_sum / reps as f64;
    assert!((0.8..=1.2).contains(&nv2), "mean NV2 = {nv2}");
    assert!((0.70..=0.90).contains(&nv1), "mean NV1 = {nv1}");
}

#[test]
fn bipower_variation_matches_squared_absolute_moment() {
    // disjoint sextet factors are independent, so BNV1 estimates
    // (E|gamma Z|)^2 = 2/pi for gamma = 1
    let n = 1_000_000;
    let scheme = CoarseScheme::new(n, 0.02).unwrap();
    let reps = 60;
    let mut bnv1_sum = 0.0;
    for rep in 0..reps {
        let mut path_rng = rng(0xb19_0000 + rep);
        let path = reflected_scalar_vol_path(0.0, 1.0, 10_000, &mut path_rng);
        let spec = SimulationSpec::new(n, 0x2_0000 + rep, path).unwrap();
        let obs = sample_observations(&spec).unwrap();
        let blocks = coarse_blocks_of(&obs, &scheme);
        bnv1_sum += bnv_hat(&blocks[..48], 1, MatrixNorm::Spectral).unwrap();
    }
    let bnv1 = bnv1_sum / reps as f64;
    let want = 2.0 / std::f64::consts::PI;
    assert!((bnv1 - want).abs() <= 0.1, "mean BNV1 = {bnv1}, want {want} +- 0.1");
}

#[test]
fn coarser_data_estimates_the_constant_vol_of_vol_worse() {
    let oracle = rho_p_oracle(
        &[SymMatrix::diag(&[1.0]).unwrap()],
        2,
        MatrixNorm::Spectral,
        200_000,
        0x0e0e,
    )
    .unwrap();
    assert!((oracle - 1.0).abs() < 0.02, "reference moment {oracle}");
    let mut medians = Vec::new();
    for (idx, (n, reps)) in [(10_000, 200), (100_000, 200), (1_000_000, 100)]
        .into_iter()
        .enumerate()
    {
        let scheme = nearest_coarse_scheme(n, 1.0 / 2000.0, (n as f64).powf(-0.25)).unwrap();
        let mut errs = Vec::with_capacity(reps as usize);
        for rep in 0..reps {
            let mut path_rng = rng(0xc0_0000 + ((idx as u64) << 12) + rep);
            let path = reflected_scalar_vol_path(0.0, 1.0, 10_000, &mut path_rng);
            let spec = SimulationSpec::new(n, 0x3_0000 + (idx as u64 * 1000) + rep, path).unwrap();
            let obs = sample_observations(&spec).unwrap();
            let blocks = coarse_blocks_of(&obs, &scheme);
            let triples = blocks.len() / 3;
            let nv2 = nv_hat(&blocks[..3 * triples], 2, MatrixNorm::Spectral).unwrap();
            errs.push((nv2 - oracle).abs());
        }
        medians.push(quantile(&errs, 0.5));
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "median errors not improving: {medians:?}"
    );
}

#[test]
fn standardized_first_variation_is_close_to_normal() {
    let n = 1_000_000;
    let scheme = CoarseScheme::new(n, 1.0 / 25.0).unwrap();
    let m = scheme.triples as f64;
    assert_eq!(scheme.triples, 8);
    let reps = 500;
    let center = (2.0 / std::f64::consts::PI).sqrt();
    let sd = ((1.0 - 2.0 / std::f64::consts::PI) / m).sqrt();
    let mut zs = Vec::with_capacity(reps as usize);
    for rep in 0..reps {
        let mut path_rng = rng(0x4a_0000 + rep);
        let path = reflected_scalar_vol_path(1.0, 1.0, 10_000, &mut path_rng);
        let spec = SimulationSpec::new(n, 0x4_0000 + rep, path).unwrap();
        let obs = sample_observations(&spec).unwrap();
        let blocks = coarse_blocks_of(&obs, &scheme);
        let triples = blocks.len() / 3;
        let nv1 = nv_hat(&blocks[..3 * triples], 1, MatrixNorm::Spectral).unwrap();
        zs.push((nv1 - center) / sd);
    }
    let q05 = quantile(&zs, 0.05);
    let q95 = quantile(&zs, 0.95);
    assert!((q05 + 1.645).abs() <= 0.35, "5% quantile {q05}");
    assert!((q95 - 1.645).abs() <= 0.35, "95% quantile {q95}");
}

#[test]
fn variations_obey_the_exact_scaling_and_rotation_laws() {
    let mut cell_rng = rng(0x77aa);
    let cells: Vec<SymMatrix> = (0..64)
        .map(|_| common::random_psd(&mut cell_rng, 2, 2, 0.7))
        .collect();
    let path = CovariancePath::piecewise_constant(cells).unwrap();
    let n = 20_000;
    let spec = SimulationSpec::new(n, 880, path).unwrap();
    let obs = sample_observations(&spec).unwrap();
    let scheme = CoarseScheme::new(n, 0.02).unwrap();
    let blocks = coarse_blocks_of(&obs, &scheme);
    let doubled = ObservationSet::from_values(
        2,
        obs.values().iter().map(|v| 2.0 * v).collect(),
        Provenance::Derived { operation: "scale".into() },
    )
    .unwrap();
    let blocks2 = coarse_blocks_of(&doubled, &scheme);
    let trimmed = &blocks[..48];
    let trimmed2 = &blocks2[..48];
    for p in [1u32, 2, 4] {
        let base = nv_hat(trimmed, p, MatrixNorm::Spectral).unwrap();
        let scaled = nv_hat(trimmed2, p, MatrixNorm::Spectral).unwrap();
        assert_eq!(scaled, 4f64.powi(p as i32) * base, "NV scaling at p = {p}");
        assert!(base >= 0.0);
    }
    for p in [1u32, 2] {
        let base = bnv_hat(trimmed, p, MatrixNorm::Spectral).unwrap();
        let scaled = bnv_hat(trimmed2, p, MatrixNorm::Spectral).unwrap();
        assert_eq!(scaled, 16f64.powi(p as i32) * base, "BNV scaling at p = {p}");
    }

    // orthogonal conjugation of the observations leaves the spectral-norm
    // variations unchanged
    let seed_sym = common::random_symmetric(&mut rng(0x5150), 2, 1.0);
    let v = sym_eigen(&seed_sym);
    let basis: Vec<Vec<f64>> = (0..2).map(|a| v.eigenvector(a)).collect();
    let rotated_values: Vec<f64> = obs
        .values()
        .chunks(2)
        .flat_map(|row| {
            basis
                .iter()
                .map(|e| e[0] * row[0] + e[1] * row[1])
                .collect::<Vec<f64>>()
        })
        .collect();
    let rotated = ObservationSet::from_values(
        2,
        rotated_values,
        Provenance::Derived { operation: "rotate".into() },
    )
    .unwrap();
    let blocks_rot = coarse_blocks_of(&rotated, &scheme);
    for p in [1u32, 2] {
        let base = nv_hat(trimmed, p, MatrixNorm::Spectral).unwrap();
        let rot = nv_hat(&blocks_rot[..48], p, MatrixNorm::Spectral).unwrap();
        assert!(
            (base - rot).abs() <= 1e-10 * base.max(1e-12),
            "rotation changed NV^{p}: {base} vs {rot}"
        );
    }
}

#[test]
fn calibration_pipeline_is_deterministic_and_annotated() {
    let b0 = vec![vec![1.0, 0.0]];
    let n = 20_000;
    let fine = BlockingScheme::new(n, 0.004).unwrap();
    let coarse = CoarseScheme::new(n, 0.02).unwrap();
    let run = || {
        let path = CovariancePath::wishart_path(2, 1, &b0, 4_096, 31).unwrap();
        let spec = SimulationSpec::new(n, 55_000, path).unwrap();
        let obs = sample_observations(&spec).unwrap();
        let blocks_fine = block_covariances(&obs, &fine).unwrap();
        let blocks_coarse = coarse_blocks_of(&obs, &coarse);
        let gap = spot_gap_estimate(&blocks_fine, 1).unwrap();
        let with_gap = datadriven_kappa(
            &blocks_fine,
            &blocks_coarse,
            0.05,
            CalibrationMode::Gap,
            Some(gap),
        )
        .unwrap();
        let without = datadriven_kappa(
            &blocks_fine,
            &blocks_coarse,
            0.05,
            CalibrationMode::NoGap,
            None,
        )
        .unwrap();
        (with_gap, without)
    };
    let (gap_a, nogap_a) = run();
    let (gap_b, nogap_b) = run();
    assert_eq!(gap_a.kappa.to_bits(), gap_b.kappa.to_bits());
    assert_eq!(nogap_a.kappa.to_bits(), nogap_b.kappa.to_bits());
    assert!(gap_a.kappa > 0.0 && nogap_a.kappa > 0.0);
    assert_eq!(gap_a.estimates.p, 2);
    assert_eq!(nogap_a.estimates.p, 1);
    let relation = gap_a.relation.unwrap();
    assert!(relation.separated, "0.004 against 0.02 is separated");
    assert!((relation.ratio - 0.2).abs() < 1e-12);
    // identical grid lengths are refused: the coarse grid must be coarser
    let flat = CovariancePath::constant(SymMatrix::identity(2)).unwrap();
    let flat_obs =
        sample_observations(&SimulationSpec::new(n, 1, flat).unwrap()).unwrap();
    let same_grid = coarse_blocks_of(&flat_obs, &coarse);
    assert!(
        datadriven_kappa(&same_grid, &same_grid, 0.05, CalibrationMode::NoGap, None).is_err()
    );
}

#[test]
fn reference_moments_match_closed_forms() {
    let gamma = 2.0;
    let scalar = vec![SymMatrix::diag(&[gamma]).unwrap()];
    let second = rho_p_oracle(&scalar, 2, MatrixNorm::Spectral, 100_000, 0xa1).unwrap();
    assert!(
        (second - gamma * gamma).abs() <= 3.0 * gamma * gamma * 2f64.sqrt() / 316.0,
        "second moment {second}"
    );
    let unit = vec![SymMatrix::diag(&[1.0]).unwrap()];
    let first = rho_p_oracle(&unit, 1, MatrixNorm::Spectral, 100_000, 0xa2).unwrap();
    assert!((first - (2.0 / std::f64::consts::PI).sqrt()).abs() <= 0.01, "first moment {first}");
    // two orthogonal diagonal directions: ||Z1 E11 + Z2 E22|| = max(|Z1|, |Z2|),
    // whose mean is 2/sqrt(pi)
    let pair = vec![
        SymMatrix::from_fn(2, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 }).unwrap(),
        SymMatrix::from_fn(2, |i, j| if i == 1 && j == 1 { 1.0 } else { 0.0 }).unwrap(),
    ];
    let max_moment = rho_p_oracle(&pair, 1, MatrixNorm::Spectral, 100_000, 0xa3).unwrap();
    assert!(
        (max_moment - 2.0 / std::f64::consts::PI.sqrt()).abs() <= 0.012,
        "max moment {max_moment}"
    );
}
