//! Generative model, covariance algebra and Gaussian information quantities.
//!
//! Factors `V ~ N(0, Σ_V)` with diagonal `Σ_V` are mixed into observations
//! `Y = ΓV + Z̃`, `Z̃ ~ N(0, σ² I)`. The encoder produces `X = BY + W` and the
//! decoder `Ŷ = AX + Z`. Everything the metrics need is a function of the
//! joint covariance of `(X, V)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::{cholesky_lower, SpdMatrix, PIVOT_TOL};
use crate::Matrix;

/// Eigenvalues of a joint covariance below this are clamped (and flagged)
/// before the log-determinant.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Eigenvalues below this are treated as a genuinely indefinite matrix.
pub const EIGEN_NEGATIVE_TOL: f64 = -1e-10;

/// The linear-Gaussian data-generating process plus the latent width `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GenerativeConfigDoc", into = "GenerativeConfigDoc")]
pub struct GenerativeConfig {
    m: usize,
    gamma: Matrix,
    sigma_v_diag: Vec<f64>,
    sigma_sq: f64,
}

/// JSON layout: `gamma` is row-major (n rows of s entries).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerativeConfigDoc {
    n: usize,
    m: usize,
    s: usize,
    gamma: Vec<Vec<f64>>,
    sigma_v_diag: Vec<f64>,
    sigma_sq: f64,
}

impl TryFrom<GenerativeConfigDoc> for GenerativeConfig {
    type Error = Error;

    fn try_from(doc: GenerativeConfigDoc) -> Result<Self> {
        if doc.gamma.len() != doc.n {
            return Err(Error::Dimension(format!(
                "gamma has {} rows, n = {}",
                doc.gamma.len(),
                doc.n
            )));
        }
        if let Some((i, row)) = doc.gamma.iter().enumerate().find(|(_, r)| r.len() != doc.s) {
            return Err(Error::Dimension(format!(
                "gamma row {i} has {} entries, s = {}",
                row.len(),
                doc.s
            )));
        }
        let gamma = DMatrix::from_fn(doc.n, doc.s, |i, j| doc.gamma[i][j]);
        GenerativeConfig::new(doc.m, gamma, doc.sigma_v_diag, doc.sigma_sq)
    }
}

impl From<GenerativeConfig> for GenerativeConfigDoc {
    fn from(cfg: GenerativeConfig) -> Self {
        let gamma = cfg
            .gamma
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        GenerativeConfigDoc {
            n: cfg.n(),
            m: cfg.m,
            s: cfg.s(),
            gamma,
            sigma_v_diag: cfg.sigma_v_diag,
            sigma_sq: cfg.sigma_sq,
        }
    }
}

impl GenerativeConfig {
    pub fn new(m: usize, gamma: Matrix, sigma_v_diag: Vec<f64>, sigma_sq: f64) -> Result<Self> {
        let (n, s) = gamma.shape();
        if n == 0 || s == 0 || m == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (n={n}, m={m}, s={s})"
            )));
        }
        if sigma_v_diag.len() != s {
            return Err(Error::Dimension(format!(
                "sigma_v_diag has {} entries, s = {s}",
                sigma_v_diag.len()
            )));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("gamma has non-finite entries".into()));
        }
        if let Some(j) = sigma_v_diag.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "factor variance {j} must be positive, got {}",
                sigma_v_diag[j]
            )));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::Config(format!(
                "observation noise variance must be positive, got {sigma_sq}"
            )));
        }
        if let Some(j) = (0..s).find(|&j| gamma.column(j).iter().all(|&v| v == 0.0)) {
            return Err(Error::Config(format!(
                "mixing column {j} is zero; factor {j} never reaches the observations"
            )));
        }
        Ok(Self {
            m,
            gamma,
            sigma_v_diag,
            sigma_sq,
        })
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn s(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn sigma_v_diag(&self) -> &[f64] {
        &self.sigma_v_diag
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn sigma_v(&self) -> SpdMatrix {
        SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_column_slice(
            &self.sigma_v_diag,
        )))
        .expect("factor variances are validated positive")
    }

    /// `Γ Σ_V`.
    pub fn gamma_sigma_v(&self) -> Matrix {
        let mut g = self.gamma.clone();
        for (j, mut col) in g.column_iter_mut().enumerate() {
            col *= self.sigma_v_diag[j];
        }
        g
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Decoder gain `A` (n×m), encoder gain `B` (m×n), decoder noise `Σ_Z` and
/// encoder noise `Σ_W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma_z: SpdMatrix,
    pub sigma_w: SpdMatrix,
}

impl ModelParams {
    pub fn new(a: Matrix, b: Matrix, sigma_z: SpdMatrix, sigma_w: SpdMatrix) -> Result<Self> {
        let p = Self {
            a,
            b,
            sigma_z,
            sigma_w,
        };
        let (n, m) = p.a.shape();
        p.check_dims(n, m)?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        let ok = self.a.shape() == (n, m)
            && self.b.shape() == (m, n)
            && self.sigma_z.dim() == n
            && self.sigma_w.dim() == m;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "expected A {n}x{m}, B {m}x{n}, Σ_Z {n}x{n}, Σ_W {m}x{m}; got A {:?}, B {:?}, Σ_Z {}, Σ_W {}",
                self.a.shape(),
                self.b.shape(),
                self.sigma_z.dim(),
                self.sigma_w.dim()
            )))
        }
    }

    pub fn check_against(&self, cfg: &GenerativeConfig) -> Result<()> {
        self.check_dims(cfg.n(), cfg.m())
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Blocks of the covariance of `(X, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    pub sigma_x: SpdMatrix,
    /// `Σ_XV = B Γ Σ_V`
    pub cross: Matrix,
    pub sigma_v: SpdMatrix,
}

impl JointCovariance {
    pub fn new(sigma_x: SpdMatrix, cross: Matrix, sigma_v: SpdMatrix) -> Result<Self> {
        if cross.shape() != (sigma_x.dim(), sigma_v.dim()) {
            return Err(Error::Dimension(format!(
                "cross block {:?} does not match {}x{}",
                cross.shape(),
                sigma_x.dim(),
                sigma_v.dim()
            )));
        }
        Ok(Self {
            sigma_x,
            cross,
            sigma_v,
        })
    }

    /// The full `(m+s)×(m+s)` block matrix.
    pub fn assembled(&self) -> Matrix {
        let (m, s) = self.cross.shape();
        let mut full = DMatrix::zeros(m + s, m + s);
        full.view_mut((0, 0), (m, m)).copy_from(self.sigma_x.matrix());
        full.view_mut((0, m), (m, s)).copy_from(&self.cross);
        full.view_mut((m, 0), (s, m)).copy_from(&self.cross.transpose());
        full.view_mut((m, m), (s, s)).copy_from(self.sigma_v.matrix());
        full
    }
}

/// A mutual information value in nats. `degenerate` marks a joint covariance
/// whose smallest eigenvalues had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualInformation {
    pub nats: f64,
    pub degenerate: bool,
}

/// `Σ_Y = Γ Σ_V Γᵀ + σ² Iₙ`.
pub fn observation_covariance(cfg: &GenerativeConfig) -> SpdMatrix {
    let mut sy = cfg.gamma_sigma_v() * cfg.gamma().transpose();
    for i in 0..cfg.n() {
        sy[(i, i)] += cfg.sigma_sq();
    }
    SpdMatrix::symmetrized(sy).expect("σ² > 0 makes Σ_Y positive definite")
}

pub fn joint_latent_factor_covariance(
    cfg: &GenerativeConfig,
    params: &ModelParams,
) -> Result<JointCovariance> {
    joint_with_sigma_y(cfg, &observation_covariance(cfg), params)
}

/// Same as [`joint_latent_factor_covariance`] with a precomputed `Σ_Y`.
pub fn joint_with_sigma_y(
    cfg: &GenerativeConfig,
    sigma_y: &SpdMatrix,
    params: &ModelParams,
) -> Result<JointCovariance> {
    params.check_against(cfg)?;
    let b = &params.b;
    let sigma_x = b * sigma_y.matrix() * b.transpose() + params.sigma_w.matrix();
    let sigma_x = SpdMatrix::symmetrized(sigma_x)?;
    let cross = b * cfg.gamma_sigma_v();
    JointCovariance::new(sigma_x, cross, cfg.sigma_v())
}

/// `I(X;V) = ½ log[det Σ_X det Σ_V / det Σ_(X,V)]`, all log-determinants
/// taken from Cholesky factors.
pub fn gaussian_mutual_information(joint: &JointCovariance) -> Result<MutualInformation> {
    if joint.cross.iter().all(|&v| v == 0.0) {
        return Ok(MutualInformation {
            nats: 0.0,
            degenerate: false,
        });
    }
    let full = joint.assembled();
    let dim = full.nrows();
    let floor = PIVOT_TOL * full.trace() / dim as f64;
    let (log_det_joint, degenerate) = match cholesky_lower(&full, floor) {
        Ok(l) => (2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>(), false),
        Err(_) => {
            let eig = SymmetricEigen::new(full);
            let min = eig.eigenvalues.min();
            if min < EIGEN_NEGATIVE_TOL {
                return Err(Error::Degenerate(format!(
                    "joint covariance has eigenvalue {min:.3e}"
                )));
            }
            let ld = eig
                .eigenvalues
                .iter()
                .map(|&e| e.max(EIGEN_CLAMP).ln())
                .sum::<f64>();
            (ld, true)
        }
    };
    let nats = 0.5 * (joint.sigma_x.log_det() + joint.sigma_v.log_det() - log_det_joint);
    Ok(MutualInformation {
        nats: nats.max(0.0),
        degenerate,
    })
}

/// Per-latent variances and latent-factor cross-covariances, the only
/// moments the pairwise and subset quantities need.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactorMoments {
    /// `diag(B Σ_Y Bᵀ + Σ_W)`
    pub latent_var: Vec<f64>,
    /// `B Γ Σ_V`
    pub cross: Matrix,
    pub factor_var: Vec<f64>,
}

impl LatentFactorMoments {
    pub fn new(cfg: &GenerativeConfig, params: &ModelParams) -> Result<Self> {
        params.check_against(cfg)?;
        let b = &params.b;
        // (B Σ_Y Bᵀ)_ii = Σ_j (BΓ)_ij² σ_j² + σ² ‖B_i‖²
        let bg = b * cfg.gamma();
        let sv = cfg.sigma_v_diag();
        let latent_var: Vec<f64> = (0..cfg.m())
            .map(|i| {
                let signal: f64 = (0..cfg.s()).map(|j| bg[(i, j)].powi(2) * sv[j]).sum();
                let noise = cfg.sigma_sq() * b.row(i).norm_squared();
                signal + noise + params.sigma_w.matrix()[(i, i)]
            })
            .collect();
        if let Some(i) = latent_var.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Degenerate(format!("latent {i} has zero variance")));
        }
        let mut cross = bg;
        for (j, mut col) in cross.column_iter_mut().enumerate() {
            col *= sv[j];
        }
        Ok(Self {
            latent_var,
            cross,
            factor_var: sv.to_vec(),
        })
    }

    /// Squared correlations `S_ij`.
    pub fn correlation(&self) -> Matrix {
        DMatrix::from_fn(self.cross.nrows(), self.cross.ncols(), |i, j| {
            self.cross[(i, j)].powi(2) / (self.latent_var[i] * self.factor_var[j])
        })
    }

    /// `I(X_k; V_𝒱)` from the determinant formula on the `(1+|𝒱|)`-dim joint.
    pub fn subset_mi(&self, k: usize, subset: &[usize]) -> Result<f64> {
        let (m, s) = self.cross.shape();
        if k >= m {
            return Err(Error::Domain(format!("latent index {k} out of range 0..{m}")));
        }
        for (pos, &j) in subset.iter().enumerate() {
            if j >= s {
                return Err(Error::Domain(format!("factor index {j} out of range 0..{s}")));
            }
            if subset[..pos].contains(&j) {
                return Err(Error::Domain(format!("factor index {j} repeated")));
            }
        }
        if subset.is_empty() {
            return Ok(0.0);
        }
        let sigma_x = SpdMatrix::new(DMatrix::from_element(1, 1, self.latent_var[k]))?;
        let cross = DMatrix::from_fn(1, subset.len(), |_, c| self.cross[(k, subset[c])]);
        let sigma_v = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_iterator(
            subset.len(),
            subset.iter().map(|&j| self.factor_var[j]),
        )))?;
        let joint = JointCovariance::new(sigma_x, cross, sigma_v)?;
        Ok(gaussian_mutual_information(&joint)?.nats)
    }
}

/// `S_ij = (BΓΣ_V)²_ij / [(BΣ_YBᵀ + Σ_W)_ii (Σ_V)_jj]`.
pub fn pairwise_correlation_matrix(cfg: &GenerativeConfig, params: &ModelParams) -> Result<Matrix> {
    Ok(LatentFactorMoments::new(cfg, params)?.correlation())
}

/// `I(X_i; V_j) = -½ log(1 - S_ij)`, elementwise.
pub fn pairwise_mi_from_correlation(s: &Matrix) -> Result<Matrix> {
    if let Some(v) = s.iter().find(|&&v| !(0.0..1.0).contains(&v)) {
        return Err(Error::Domain(format!(
            "squared correlation {v} outside [0, 1)"
        )));
    }
    Ok(s.map(|v| -0.5 * (-v).ln_1p()))
}

/// `I(X_k; V_𝒱)` for a factor subset; zero for the empty subset.
pub fn subset_mutual_information(
    cfg: &GenerativeConfig,
    params: &ModelParams,
    k: usize,
    subset: &[usize],
) -> Result<f64> {
    LatentFactorMoments::new(cfg, params)?.subset_mi(k, subset)
}
