//! Volatility-of-volatility calibration from second differences of
//! blockwise realized covariances on a coarse grid.
//!
//! A coarse block length h' partitions the sample into K' = 1/h' blocks.
//! The second difference D_m = Sigma_hat^{(m+2)h'} - 2 Sigma_hat^{(m+1)h'}
//! + Sigma_hat^{mh'} filters out the level of the covariance path and keeps
//! its martingale moves, weighted by a tent kernel w with ||w||_{L^2}^2 = h'.
//! Normed p-variations NV_hat^{(p)} average ||D_{3k}||^p over disjoint
//! triples, bipower variants BNV_hat^{(p)} average products over disjoint
//! sextets, and the two combine into data-driven critical values for the
//! rank test without any knowledge of the regularity radius L.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::realized::{BlockSpectrum, BlockingScheme};
use crate::specmat::{spectral_norm, SymMatrix};
use crate::{Error, Result};

/// Norm applied to second differences. The spectral norm is the default;
/// the Frobenius variant exists for sensitivity studies only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum MatrixNorm {
    #[default]
    Spectral,
    Frobenius,
}

impl MatrixNorm {
    pub fn of(self, m: &SymMatrix) -> f64 {
        match self {
            MatrixNorm::Spectral => spectral_norm(m),
            MatrixNorm::Frobenius => m.frobenius_norm(),
        }
    }
}

/// A coarse blocking of [0, 1] for vol-of-vol estimation: h' = 1/K' with
/// K' | n, together with how many disjoint triples and sextets of blocks
/// it provides.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoarseScheme {
    pub n: usize,
    pub h_prime: f64,
    /// number of coarse blocks K' = 1 / h'
    pub coarse_blocks: usize,
    /// observations per coarse block, n h'
    pub per_block: usize,
    /// disjoint block triples available for NV_hat
    pub triples: usize,
    /// disjoint block sextets available for BNV_hat
    pub sextets: usize,
    /// true when no block is left over by the triple grouping
    pub divisible_by_3: bool,
    /// true when no block is left over by the sextet grouping
    pub divisible_by_6: bool,
}

impl CoarseScheme {
    pub fn new(n: usize, h_prime: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("coarse scheme needs n >= 1"));
        }
        if !(h_prime > 0.0 && h_prime <= 1.0) {
            return Err(Error::input("coarse block length must lie in (0, 1]"));
        }
        let k_real = 1.0 / h_prime;
        let coarse_blocks = k_real.round() as usize;
        if coarse_blocks == 0 || (k_real - coarse_blocks as f64).abs() > 1e-9 * k_real {
            return Err(Error::input("coarse block length must be a reciprocal integer"));
        }
        if n % coarse_blocks != 0 {
            return Err(Error::input(format!(
                "coarse block count {coarse_blocks} must divide n = {n}"
            )));
        }
        if coarse_blocks < 6 {
            return Err(Error::input(
                "need at least 6 coarse blocks for one triple and one sextet",
            ));
        }
        Ok(Self {
            n,
            h_prime,
            coarse_blocks,
            per_block: n / coarse_blocks,
            triples: coarse_blocks / 3,
            sextets: coarse_blocks / 6,
            divisible_by_3: coarse_blocks % 3 == 0,
            divisible_by_6: coarse_blocks % 6 == 0,
        })
    }

    /// The blocking that produces this scheme's realized covariances.
    pub fn blocking(&self) -> Result<BlockingScheme> {
        BlockingScheme::from_block_count(self.n, self.coarse_blocks)
    }

    /// Fraction of coarse blocks entering the triple grouping.
    pub fn triple_coverage(&self) -> f64 {
        3.0 * self.triples as f64 / self.coarse_blocks as f64
    }

    /// Fraction of coarse blocks entering the sextet grouping.
    pub fn sextet_coverage(&self) -> f64 {
        6.0 * self.sextets as f64 / self.coarse_blocks as f64
    }

    /// Scale-separation diagnostics against a fine block length h.
    pub fn relation_to(&self, h: f64) -> Result<SchemeRelation> {
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::input("fine block length must lie in (0, 1]"));
        }
        let n = self.n as f64;
        Ok(SchemeRelation {
            h,
            h_prime: self.h_prime,
            ratio: h / self.h_prime,
            separated: 2.0 * h <= self.h_prime,
            coarse_growth: Some(self.h_prime * n.cbrt()),
            signal_obs: Some(n * h * self.h_prime),
        })
    }
}

/// Diagnostics for the scale separation between the fine test grid and the
/// coarse calibration grid. The calibration is designed for h well below h'
/// with h' n^{1/3} and n h h' both large; the fields quantify how far a
/// concrete configuration is from that regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SchemeRelation {
    pub h: f64,
    pub h_prime: f64,
    /// h / h'
    pub ratio: f64,
    /// whether h' is at least twice the fine block length
    pub separated: bool,
    /// h' n^{1/3}, wants to be large; None when n is unknown
    pub coarse_growth: Option<f64>,
    /// n h h', wants to be large; None when n is unknown
    pub signal_obs: Option<f64>,
}

fn relation_from_lengths(h: f64, h_prime: f64) -> SchemeRelation {
    SchemeRelation {
        h,
        h_prime,
        ratio: h / h_prime,
        separated: 2.0 * h <= h_prime,
        coarse_growth: None,
        signal_obs: None,
    }
}

/// All coarse schemes compatible with n observations and a fine block
/// length h: divisors K' of n with 6 <= K' < 1/h, coarsest first.
pub fn valid_coarse_grids(n: usize, h: f64) -> Result<Vec<CoarseScheme>> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::input("fine block length must lie in (0, 1)"));
    }
    let mut out = Vec::new();
    let mut divisors = Vec::new();
    let mut q = 1usize;
    while q * q <= n {
        if n % q == 0 {
            divisors.push(q);
            divisors.push(n / q);
        }
        q += 1;
    }
    divisors.sort_unstable();
    divisors.dedup();
    for k in divisors {
        let h_prime = 1.0 / k as f64;
        if k >= 6 && h_prime > h {
            out.push(CoarseScheme::new(n, h_prime)?);
        }
    }
    Ok(out)
}

/// The coarse scheme balancing triple count against the coarse-grid noise:
/// maximise min(K'/3, 1/(K' h)) over valid grids, preferring the larger K'
/// on ties.
pub fn default_coarse_scheme(n: usize, h: f64) -> Result<CoarseScheme> {
    let grids = valid_coarse_grids(n, h)?;
    grids
        .into_iter()
        .map(|g| {
            let k = g.coarse_blocks as f64;
            ((k / 3.0).min(1.0 / (k * h)), g)
        })
        .max_by(|(sa, ga), (sb, gb)| {
            sa.partial_cmp(sb)
                .unwrap()
                .then(ga.coarse_blocks.cmp(&gb.coarse_blocks))
        })
        .map(|(_, g)| g)
        .ok_or_else(|| Error::input("no valid coarse grid between the fine grid and [0, 1]"))
}

/// The valid coarse scheme whose h' is log-nearest to a target length,
/// preferring the coarser grid on ties.
pub fn nearest_coarse_scheme(n: usize, h: f64, target_h_prime: f64) -> Result<CoarseScheme> {
    if !(target_h_prime > 0.0 && target_h_prime < 1.0) {
        return Err(Error::input("target coarse length must lie in (0, 1)"));
    }
    let grids = valid_coarse_grids(n, h)?;
    grids
        .into_iter()
        .min_by(|a, b| {
            let da = (a.h_prime / target_h_prime).ln().abs();
            let db = (b.h_prime / target_h_prime).ln().abs();
            match da.partial_cmp(&db).unwrap() {
                std::cmp::Ordering::Equal => a.coarse_blocks.cmp(&b.coarse_blocks),
                other => other,
            }
        })
        .ok_or_else(|| Error::input("no valid coarse grid between the fine grid and [0, 1]"))
}

fn validate_coarse_blocks(blocks: &[BlockSpectrum]) -> Result<f64> {
    if blocks.len() < 3 {
        return Err(Error::input("second differences need at least 3 coarse blocks"));
    }
    let h_prime = blocks[0].h;
    let dim = blocks[0].dim();
    let k0 = blocks[0].k;
    for (i, b) in blocks.iter().enumerate() {
        if (b.h - h_prime).abs() > 1e-12 * h_prime || b.dim() != dim {
            return Err(Error::input(
                "coarse blocks must share one block length and dimension",
            ));
        }
        if b.k != k0 + i {
            return Err(Error::input("coarse blocks must be contiguous and in order"));
        }
    }
    Ok(h_prime)
}

/// Second differences D_m = Sigma_hat_{m+2} - 2 Sigma_hat_{m+1} + Sigma_hat_m
/// for m = 0 .. len-3.
pub fn second_differences(blocks: &[BlockSpectrum]) -> Result<Vec<SymMatrix>> {
    validate_coarse_blocks(blocks)?;
    Ok((0..blocks.len() - 2)
        .map(|m| {
            blocks[m + 2]
                .sigma_hat
                .sub(&blocks[m + 1].sigma_hat.scale(2.0))
                .add(&blocks[m].sigma_hat)
        })
        .collect())
}

fn power(x: f64, p: u32) -> f64 {
    match p {
        1 => x,
        2 => x * x,
        4 => (x * x) * (x * x),
        _ => x.powi(p as i32),
    }
}

/// Normed p-variation (1/M) sum_k (||D_{3k}|| / sqrt(h'))^p over the M
/// disjoint triples of coarse blocks. The block count must be a multiple
/// of 3; p is 1, 2, or 4.
pub fn nv_hat(blocks: &[BlockSpectrum], p: u32, norm: MatrixNorm) -> Result<f64> {
    if !matches!(p, 1 | 2 | 4) {
        return Err(Error::input("normed variation power must be 1, 2, or 4"));
    }
    let h_prime = validate_coarse_blocks(blocks)?;
    if blocks.len() % 3 != 0 {
        return Err(Error::input(format!(
            "normed variation needs a block count divisible by 3, got {}",
            blocks.len()
        )));
    }
    let m = blocks.len() / 3;
    let diffs = second_differences(blocks)?;
    let scale = h_prime.sqrt();
    let sum: f64 = (0..m).map(|k| power(norm.of(&diffs[3 * k]) / scale, p)).sum();
    Ok(sum / m as f64)
}

/// Bipower normed p-variation (1/M6) sum_k (||D_{6k}|| ||D_{6k+3}|| / h')^p
/// over the M6 disjoint sextets. The two factors in each product live on
/// disjoint block triples, so a burst in the covariance path enters at most
/// one of them. The block count must be a multiple of 6; p is 1 or 2.
pub fn bnv_hat(blocks: &[BlockSpectrum], p: u32, norm: MatrixNorm) -> Result<f64> {
    if !matches!(p, 1 | 2) {
        return Err(Error::input("bipower variation power must be 1 or 2"));
    }
    let h_prime = validate_coarse_blocks(blocks)?;
    if blocks.len() % 6 != 0 {
        return Err(Error::input(format!(
            "bipower variation needs a block count divisible by 6, got {}",
            blocks.len()
        )));
    }
    let m6 = blocks.len() / 6;
    let diffs = second_differences(blocks)?;
    let sum: f64 = (0..m6)
        .map(|k| power(norm.of(&diffs[6 * k]) * norm.of(&diffs[6 * k + 3]) / h_prime, p))
        .sum();
    Ok(sum / m6 as f64)
}

/// The p-variation family feeding a data-driven critical value: NV_hat^{(p)},
/// NV_hat^{(2p)}, BNV_hat^{(p)}, and the variance proxy they combine into.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolOfVolEstimates {
    /// base power: 1 for the general critical value, 2 for the gap one
    pub p: u32,
    pub nv_p: f64,
    pub nv_2p: f64,
    pub bnv_p: f64,
    /// 3 h' (nv_2p - bnv_p); may be negative in finite samples
    pub variance_hat: f64,
    pub h_prime: f64,
    /// triples used by the normed variations
    pub triples: usize,
    /// sextets used by the bipower variation
    pub sextets: usize,
    pub norm: MatrixNorm,
}

/// Compute the estimate family on a coarse block sequence, using the first
/// 3*floor(len/3) blocks for the normed variations and the first
/// 6*floor(len/6) for the bipower one.
pub fn estimate_vol_of_vol(
    blocks: &[BlockSpectrum],
    p: u32,
    norm: MatrixNorm,
) -> Result<VolOfVolEstimates> {
    if !matches!(p, 1 | 2) {
        return Err(Error::input("calibration power must be 1 or 2"));
    }
    let h_prime = validate_coarse_blocks(blocks)?;
    let triples = blocks.len() / 3;
    let sextets = blocks.len() / 6;
    if sextets == 0 {
        return Err(Error::input("calibration needs at least 6 coarse blocks"));
    }
    let nv_blocks = &blocks[..3 * triples];
    let bnv_blocks = &blocks[..6 * sextets];
    let nv_p = nv_hat(nv_blocks, p, norm)?;
    let nv_2p = nv_hat(nv_blocks, 2 * p, norm)?;
    let bnv_p = bnv_hat(bnv_blocks, p, norm)?;
    Ok(VolOfVolEstimates {
        p,
        nv_p,
        nv_2p,
        bnv_p,
        variance_hat: 3.0 * h_prime * (nv_2p - bnv_p),
        h_prime,
        triples,
        sextets,
        norm,
    })
}

/// Which critical-value shape the calibration feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CalibrationMode {
    NoGap,
    Gap,
}

/// A calibrated critical value together with everything that entered it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibratedKappa {
    pub kappa: f64,
    pub mode: CalibrationMode,
    /// fine block length the critical value is for
    pub h: f64,
    pub alpha: f64,
    /// the 1-alpha standard normal quantile used
    pub quantile: f64,
    /// spectral-gap estimate entering the gap mode
    pub gap_estimate: Option<f64>,
    /// true when the variance proxy was negative and floored at zero
    pub variance_floored: bool,
    pub estimates: VolOfVolEstimates,
    pub relation: Option<SchemeRelation>,
}

/// Turn an estimate family into a critical value for fine block length h:
/// kappa = (8/15) sqrt(h) (NV^(1) + sqrt(3h'(NV^(2) - BNV^(1))) q_{1-a})
/// without a gap (p = 1), and
/// kappa = h/(3 gap) (NV^(2) + sqrt(3h'(NV^(4) - BNV^(2))) q_{1-a})
/// with one (p = 2). A negative variance proxy is floored at zero and
/// flagged.
pub fn kappa_from_estimates(
    estimates: &VolOfVolEstimates,
    h: f64,
    alpha: f64,
    mode: CalibrationMode,
    gap_estimate: Option<f64>,
) -> Result<CalibratedKappa> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::input("fine block length must lie in (0, 1]"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::input("level alpha must lie in (0, 1)"));
    }
    let scale = match (mode, gap_estimate) {
        (CalibrationMode::NoGap, None) => {
            if estimates.p != 1 {
                return Err(Error::input("the general critical value calibrates from p = 1"));
            }
            8.0 / 15.0 * h.sqrt()
        }
        (CalibrationMode::NoGap, Some(_)) => {
            return Err(Error::input("a gap estimate is only used in gap mode"));
        }
        (CalibrationMode::Gap, Some(gap)) => {
            if estimates.p != 2 {
                return Err(Error::input("the gap critical value calibrates from p = 2"));
            }
            if !(gap > 0.0 && gap.is_finite()) {
                return Err(Error::input("gap estimate must be positive"));
            }
            h / (3.0 * gap)
        }
        (CalibrationMode::Gap, None) => {
            return Err(Error::input("gap mode needs a spectral-gap estimate"));
        }
    };
    let quantile = normal_quantile(1.0 - alpha)?;
    let variance_floored = estimates.variance_hat < 0.0;
    let variance = estimates.variance_hat.max(0.0);
    let kappa = scale * (estimates.nv_p + variance.sqrt() * quantile);
    Ok(CalibratedKappa {
        kappa,
        mode,
        h,
        alpha,
        quantile,
        gap_estimate,
        variance_floored,
        estimates: *estimates,
        relation: None,
    })
}

/// Full calibration: estimate the p-variation family on the coarse blocks
/// and build the critical value for the fine blocks' length. The fine
/// blocks contribute their block length and the scale-separation
/// diagnostics; a gap estimate (for example the smallest r-th block
/// eigenvalue) must be supplied in gap mode.
pub fn datadriven_kappa(
    blocks_fine: &[BlockSpectrum],
    blocks_coarse: &[BlockSpectrum],
    alpha: f64,
    mode: CalibrationMode,
    gap_estimate: Option<f64>,
) -> Result<CalibratedKappa> {
    if blocks_fine.is_empty() {
        return Err(Error::input("calibration needs fine blocks"));
    }
    let h = blocks_fine[0].h;
    let h_prime = validate_coarse_blocks(blocks_coarse)?;
    if h_prime <= h {
        return Err(Error::input(
            "coarse blocks must be longer than the fine blocks they calibrate",
        ));
    }
    let p = match mode {
        CalibrationMode::NoGap => 1,
        CalibrationMode::Gap => 2,
    };
    let estimates = estimate_vol_of_vol(blocks_coarse, p, MatrixNorm::Spectral)?;
    let mut out = kappa_from_estimates(&estimates, h, alpha, mode, gap_estimate)?;
    out.relation = Some(relation_from_lengths(h, h_prime));
    Ok(out)
}

/// Monte Carlo reference for rho_p(Gamma) = E ||Gamma Z||^p with Z standard
/// normal. The map is given by its images of the coordinate basis, so
/// Gamma Z = sum_i Z_i basis[i].
pub fn rho_p_oracle(
    basis: &[SymMatrix],
    p: u32,
    norm: MatrixNorm,
    mc_n: usize,
    seed: u64,
) -> Result<f64> {
    if basis.is_empty() {
        return Err(Error::input("the map needs at least one basis image"));
    }
    if mc_n == 0 {
        return Err(Error::input("Monte Carlo reference needs mc_n >= 1"));
    }
    if p == 0 || p > 8 {
        return Err(Error::input("moment order must lie in 1..=8"));
    }
    let dim = basis[0].dim();
    if basis.iter().any(|b| b.dim() != dim) {
        return Err(Error::input("basis images must share one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..mc_n {
        let mut image = SymMatrix::zeros(dim);
        for b in basis {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            image = image.add(&b.scale(z));
        }
        sum += power(norm.of(&image), p).abs();
    }
    Ok(sum / mc_n as f64)
}

/// The weight that the second difference of block averages applies to the
/// moves of the underlying path: for a block start at 0,
/// D = int w(s) dSigma(s) with w supported on [0, 3h']. The value is the
/// normalized overlap difference
/// w(s) = (|[0,h'] cap [s-2h', s-h']| - |[0,h'] cap [s-h', s]|) / h',
/// a tent through (0, 0), (h', -1), (2h', 1), (3h', 0).
pub fn second_difference_weight(s: f64, h_prime: f64) -> f64 {
    let overlap = |lo: f64, hi: f64| -> f64 { (hi.min(h_prime) - lo.max(0.0)).max(0.0) };
    (overlap(s - 2.0 * h_prime, s - h_prime) - overlap(s - h_prime, s)) / h_prime
}

/// Standard normal distribution function, accurate to full double
/// precision: a Taylor series for the error function in the bulk and a
/// continued fraction for its complement in the tails.
pub fn normal_cdf(x: f64) -> f64 {
    let t = x * std::f64::consts::FRAC_1_SQRT_2;
    if x <= 0.0 {
        0.5 * erfc_pos(-t)
    } else {
        1.0 - 0.5 * erfc_pos(t)
    }
}

fn erf_series(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = 0.0;
    let mut k = 0usize;
    loop {
        let contrib = term / (2 * k + 1) as f64;
        sum += contrib;
        if contrib.abs() <= sum.abs() * 1e-18 {
            break;
        }
        k += 1;
        term *= -z2 / k as f64;
    }
    sum * std::f64::consts::FRAC_2_SQRT_PI
}

fn erfc_pos(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    if z <= 3.0 {
        // the alternating series loses at most ~1e-14 absolute here, and the
        // continued fraction is only rapid beyond this point
        1.0 - erf_series(z)
    } else {
        // erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
        // evaluated by the modified Lentz recursion
        let tiny = 1e-300;
        let mut f = tiny;
        let mut c = f;
        let mut d = 0.0f64;
        let mut k = 1usize;
        loop {
            let a = if k == 1 { 1.0 } else { (k - 1) as f64 / 2.0 };
            d = z + a * d;
            if d == 0.0 {
                d = tiny;
            }
            c = z + a / c;
            if c == 0.0 {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 || k > 500 {
                break;
            }
            k += 1;
        }
        (-z * z).exp() * f / std::f64::consts::PI.sqrt()
    }
}

/// Standard normal quantile, accurate to better than 1e-12: a rational
/// initial guess refined by two Halley steps on the distribution function.
pub fn normal_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::input("quantile probability must lie in (0, 1)"));
    }
    if prob > 0.5 {
        return Ok(-quantile_lower(1.0 - prob));
    }
    Ok(quantile_lower(prob))
}

fn quantile_lower(p: f64) -> f64 {
    let mut x = rational_quantile_guess(p);
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    x
}

fn rational_quantile_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}
