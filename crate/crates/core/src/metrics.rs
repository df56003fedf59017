//! Analytic disentanglement scores for the linear-Gaussian model.
//!
//! Everything is driven by the squared-correlation matrix `S` (m×s) and the
//! pairwise mutual informations `I_ij = -½ log(1 - S_ij)`. Ties in the
//! top-two selection go to the lower latent index.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::gaussian::{
    gaussian_mutual_information, joint_with_sigma_y, observation_covariance,
    pairwise_mi_from_correlation, GenerativeConfig, LatentFactorMoments, ModelParams,
};
use crate::spd::SpdMatrix;
use crate::spectral::spectral_norm;
use crate::Matrix;

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-3;
/// Pairwise MI weights below this count as zero in the matching.
pub const MATCHING_WEIGHT_FLOOR: f64 = 1e-15;
/// Partition enumeration refuses more than this many assignments.
pub const PARTITION_LIMIT: u128 = 10_000_000;
/// Partition I_m above matching I_m by more than this is a discrepancy.
pub const MODE_DISCREPANCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImMode {
    /// One-to-one latent/factor assignment (Hungarian).
    Matching,
    /// Every factor goes to exactly one latent; a latent may hold several.
    Partition,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricFlag {
    /// Factor excluded from MIG because its entropy is below the floor.
    MigEntropyFloor { factor: usize },
    /// MIG undefined: every factor was excluded.
    MigUndefined,
    /// Joint MI needed eigenvalue clamping.
    JointMiDegenerate,
    /// Power iteration for ‖B‖₂ hit its cap.
    SpectralNormUnconverged,
}

impl fmt::Display for MetricFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricFlag::MigEntropyFloor { factor } => write!(f, "mig_entropy_floor:{factor}"),
            MetricFlag::MigUndefined => f.write_str("mig_undefined"),
            MetricFlag::JointMiDegenerate => f.write_str("joint_mi_degenerate"),
            MetricFlag::SpectralNormUnconverged => f.write_str("spectral_norm_unconverged"),
        }
    }
}

impl Serialize for MetricFlag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// All scores for one parameter set. Serializes to a flat JSON object; the
/// `S` matrix is left out (see [`write_s_matrix_csv`]).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub sap: f64,
    pub mig: Option<f64>,
    pub im: f64,
    pub joint_mi: f64,
    pub spec_norm_b: f64,
    #[serde(skip)]
    pub s_matrix: Matrix,
    /// Latent matched to each factor, `null` when unmatched.
    pub im_assignment: Vec<Option<usize>>,
    pub flags: Vec<MetricFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImScore {
    pub nats: f64,
    /// Latent assigned to each factor.
    pub assignment: Vec<Option<usize>>,
}

fn check_correlation(s: &Matrix) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Domain("empty correlation matrix".into()));
    }
    if let Some(v) = s.iter().find(|&&v| !(0.0..1.0).contains(&v)) {
        return Err(Error::Domain(format!("squared correlation {v} outside [0, 1)")));
    }
    Ok(())
}

/// `(best, second)` values of a column, first maximum wins ties.
fn top_two(col: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for v in col {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    (best, if second.is_finite() { second } else { 0.0 })
}

/// SAP: mean over factors of the gap between the two largest `S_ij`.
pub fn sap_score(s: &Matrix) -> Result<f64> {
    check_correlation(s)?;
    let total: f64 = s
        .column_iter()
        .map(|c| {
            let (a, b) = top_two(c.iter().copied());
            a - b
        })
        .sum();
    Ok(total / s.ncols() as f64)
}

/// Differential entropy `½ log(2πe σ_j²)` of each Gaussian factor, nats.
pub fn factor_entropies(cfg: &GenerativeConfig) -> Vec<f64> {
    cfg.sigma_v_diag()
        .iter()
        .map(|&v| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln())
        .collect()
}

fn mig_terms(s: &Matrix, entropies: &[f64]) -> Result<Vec<f64>> {
    check_correlation(s)?;
    if entropies.len() != s.ncols() {
        return Err(Error::Dimension(format!(
            "{} entropies for {} factors",
            entropies.len(),
            s.ncols()
        )));
    }
    let mi = pairwise_mi_from_correlation(s)?;
    Ok(mi
        .column_iter()
        .map(|c| {
            let (a, b) = top_two(c.iter().copied());
            a - b
        })
        .collect())
}

/// MIG with a hard error when any factor entropy is at or below
/// [`DEFAULT_ENTROPY_FLOOR`].
pub fn mig_score(s: &Matrix, entropies: &[f64]) -> Result<f64> {
    mig_score_with_floor(s, entropies, DEFAULT_ENTROPY_FLOOR)
}

pub fn mig_score_with_floor(s: &Matrix, entropies: &[f64], floor: f64) -> Result<f64> {
    let gaps = mig_terms(s, entropies)?;
    if let Some(j) = entropies.iter().position(|&h| !(h > floor)) {
        return Err(Error::EntropyFloor {
            factor: j,
            entropy: entropies[j],
            floor,
        });
    }
    let total: f64 = gaps.iter().zip(entropies).map(|(g, h)| g / h).sum();
    Ok(total / gaps.len() as f64)
}

/// Harness-mode MIG: factors below the floor are skipped and reported; the
/// average runs over the remaining factors (`None` if none remain).
pub fn mig_score_lenient(s: &Matrix, entropies: &[f64], floor: f64) -> Result<(Option<f64>, Vec<usize>)> {
    let gaps = mig_terms(s, entropies)?;
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut used = 0usize;
    for (j, (g, &h)) in gaps.iter().zip(entropies).enumerate() {
        if h > floor {
            total += g / h;
            used += 1;
        } else {
            excluded.push(j);
        }
    }
    Ok(((used > 0).then(|| total / used as f64), excluded))
}

pub fn im_score(cfg: &GenerativeConfig, params: &ModelParams, mode: ImMode) -> Result<ImScore> {
    let moments = LatentFactorMoments::new(cfg, params)?;
    match mode {
        ImMode::Matching => im_matching(&moments),
        ImMode::Partition => im_partition(&moments),
    }
}

fn im_matching(moments: &LatentFactorMoments) -> Result<ImScore> {
    let s = moments.correlation();
    let weights = pairwise_mi_from_correlation(&s)?.map(|w| if w < MATCHING_WEIGHT_FLOOR { 0.0 } else { w });
    let matching = max_weight_matching(&weights)?;
    let mut assignment = vec![None; s.ncols()];
    for &(latent, factor) in &matching.pairs {
        assignment[factor] = Some(latent);
    }
    Ok(ImScore {
        nats: matching.total,
        assignment,
    })
}

/// Exhaustive search over all `m^s` factor-to-latent maps, scoring each latent
/// by the Gaussian MI with its whole factor subset.
fn im_partition(moments: &LatentFactorMoments) -> Result<ImScore> {
    let (m, s) = moments.cross.shape();
    let count = (m as u128).checked_pow(s as u32).unwrap_or(u128::MAX);
    if count > PARTITION_LIMIT {
        return Err(Error::TooLarge(count));
    }
    let mut memo: HashMap<(usize, u64), f64> = HashMap::new();
    let mut subset_mi = |k: usize, mask: u64| -> Result<f64> {
        if mask == 0 {
            return Ok(0.0);
        }
        if let Some(&v) = memo.get(&(k, mask)) {
            return Ok(v);
        }
        let subset: Vec<usize> = (0..s).filter(|j| mask >> j & 1 == 1).collect();
        let v = moments.subset_mi(k, &subset)?;
        memo.insert((k, mask), v);
        Ok(v)
    };

    let mut current = vec![0usize; s];
    let mut best = f64::NEG_INFINITY;
    let mut best_assign = current.clone();
    let mut masks = vec![0u64; m];
    loop {
        masks.iter_mut().for_each(|x| *x = 0);
        for (j, &k) in current.iter().enumerate() {
            masks[k] |= 1 << j;
        }
        let mut total = 0.0;
        for (k, &mask) in masks.iter().enumerate() {
            total += subset_mi(k, mask)?;
        }
        if total > best {
            best = total;
            best_assign.copy_from_slice(&current);
        }
        // Odometer increment, last factor fastest.
        let mut pos = s;
        loop {
            if pos == 0 {
                let assignment = if best > 0.0 {
                    best_assign.into_iter().map(Some).collect()
                } else {
                    vec![None; s]
                };
                return Ok(ImScore {
                    nats: best.max(0.0),
                    assignment,
                });
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < m {
                break;
            }
            current[pos] = 0;
        }
    }
}

/// Matching vs partition I_m on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImComparison {
    pub matching: f64,
    pub partition: f64,
    /// Partition exceeds matching by more than [`MODE_DISCREPANCY_TOL`].
    pub discrepancy: bool,
}

pub fn compare_im_modes(cfg: &GenerativeConfig, params: &ModelParams) -> Result<ImComparison> {
    let moments = LatentFactorMoments::new(cfg, params)?;
    let matching = im_matching(&moments)?.nats;
    let partition = im_partition(&moments)?.nats;
    Ok(ImComparison {
        matching,
        partition,
        discrepancy: partition > matching + MODE_DISCREPANCY_TOL,
    })
}

pub fn evaluate_all(cfg: &GenerativeConfig, params: &ModelParams) -> Result<MetricReport> {
    evaluate_with_sigma_y(cfg, &observation_covariance(cfg), params)
}

/// [`evaluate_all`] with a precomputed `Σ_Y`.
pub fn evaluate_with_sigma_y(
    cfg: &GenerativeConfig,
    sigma_y: &SpdMatrix,
    params: &ModelParams,
) -> Result<MetricReport> {
    let moments = LatentFactorMoments::new(cfg, params)?;
    let s_matrix = moments.correlation();
    let mut flags = Vec::new();

    let sap = sap_score(&s_matrix)?;
    let (mig, excluded) = mig_score_lenient(&s_matrix, &factor_entropies(cfg), DEFAULT_ENTROPY_FLOOR)?;
    flags.extend(excluded.into_iter().map(|factor| MetricFlag::MigEntropyFloor { factor }));
    if mig.is_none() {
        flags.push(MetricFlag::MigUndefined);
    }
    let im = im_matching(&moments)?;
    let joint = gaussian_mutual_information(&joint_with_sigma_y(cfg, sigma_y, params)?)?;
    if joint.degenerate {
        flags.push(MetricFlag::JointMiDegenerate);
    }
    let norm_b = spectral_norm(&params.b);
    if !norm_b.converged {
        flags.push(MetricFlag::SpectralNormUnconverged);
    }
    Ok(MetricReport {
        sap,
        mig,
        im: im.nats,
        joint_mi: joint.nats,
        spec_norm_b: norm_b.value,
        s_matrix,
        im_assignment: im.assignment,
        flags,
    })
}

/// `S` as CSV: one row per latent, one column per factor.
pub fn write_s_matrix_csv<W: Write>(s: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["latent".to_string()];
    header.extend((0..s.ncols()).map(|j| format!("factor_{j}")));
    w.write_record(&header)?;
    for (i, row) in s.row_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
