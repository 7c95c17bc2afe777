//! State-space models `u_{j+1} = Psi(u_j) + xi_j`, `y_{j+1} = h(u_{j+1}) + eta_{j+1}`,
//! synthetic truth/data generation and numerical checks of the standing assumptions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{mat_in, mat_out, vec_in, vec_out, F17};
use crate::linalg::{cholesky_lower, min_eigenvalue, op_norm};
use crate::measures::GaussianMeasure;
use crate::rng::{NoiseRole, NoiseStream};

/// Bounded smooth perturbations with sup-norm 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `sin(x)`, Lipschitz 1
    Sine,
    /// `tanh(x)`, Lipschitz 1
    Tanh,
    /// `exp(-x^2/2)`, Lipschitz `exp(-1/2)`
    Bump,
}

impl Perturbation {
    pub const ALL: [Perturbation; 3] = [Perturbation::Sine, Perturbation::Tanh, Perturbation::Bump];

    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Perturbation::Sine => x.sin(),
            Perturbation::Tanh => x.tanh(),
            Perturbation::Bump => (-0.5 * x * x).exp(),
        }
    }

    pub fn sup_norm(self) -> f64 {
        1.0
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Perturbation::Sine | Perturbation::Tanh => 1.0,
            Perturbation::Bump => (-0.5f64).exp(),
        }
    }

    /// Vector version `R^{d_in} -> R^{d_out}`: component `k` is `p(x_{k mod d_in}) / sqrt(d_out)`,
    /// which keeps the Euclidean sup-norm at most 1 and the Lipschitz constant at most `lipschitz()`.
    pub fn apply(self, x: &DVector<f64>, d_out: usize) -> DVector<f64> {
        let scale = 1.0 / (d_out as f64).sqrt();
        DVector::from_iterator(d_out, (0..d_out).map(|k| scale * self.scalar(x[k % x.len()])))
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Perturbation::Sine => "sine",
            Perturbation::Tanh => "tanh",
            Perturbation::Bump => "bump",
        })
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Perturbation::Sine),
            "tanh" => Ok(Perturbation::Tanh),
            "bump" => Ok(Perturbation::Bump),
            _ => Err(Error::Usage(format!("unknown perturbation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Affine,
    AffinePlusBounded,
}

/// `u -> M u + b + eps * p(u)` with declared growth and Lipschitz constants.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldSpec {
    kind: FieldKind,
    matrix: DMatrix<f64>,
    offset: DVector<f64>,
    epsilon: f64,
    perturbation: Option<Perturbation>,
    growth: f64,
    lipschitz: f64,
}

impl VectorFieldSpec {
    /// Affine field; declares `kappa = max(||M||, |b|)` and `ell = ||M||`.
    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let norm = op_norm(&matrix);
        let growth = norm.max(offset.norm());
        Self::build(FieldKind::Affine, matrix, offset, 0.0, None, growth, norm)
    }

    /// Affine field plus `epsilon` times a catalog perturbation; declares
    /// `kappa = max(||M||, |b| + eps)` and `ell = ||M|| + eps * ell_p`.
    pub fn affine_plus_bounded(
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
        epsilon: f64,
        perturbation: Perturbation,
    ) -> Result<Self> {
        let norm = op_norm(&matrix);
        let growth = norm.max(offset.norm() + epsilon);
        let lipschitz = norm + epsilon * perturbation.lipschitz();
        Self::build(
            FieldKind::AffinePlusBounded,
            matrix,
            offset,
            epsilon,
            Some(perturbation),
            growth,
            lipschitz,
        )
    }

    pub fn scalar_affine(slope: f64, offset: f64) -> Self {
        Self::affine(
            DMatrix::from_element(1, 1, slope),
            DVector::from_element(1, offset),
        )
        .expect("finite scalar coefficients")
    }

    fn build(
        kind: FieldKind,
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
        epsilon: f64,
        perturbation: Option<Perturbation>,
        growth: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if matrix.nrows() != offset.len() {
            return Err(Error::Dimension {
                expected: matrix.nrows(),
                actual: offset.len(),
            });
        }
        if matrix.iter().chain(offset.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Config("field coefficients must be finite".into()));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!("perturbation amplitude must be >= 0, got {epsilon}")));
        }
        match (kind, perturbation) {
            (FieldKind::Affine, None) if epsilon == 0.0 => {}
            (FieldKind::AffinePlusBounded, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "affine fields carry no perturbation; affine_plus_bounded fields need one".into(),
                ))
            }
        }
        Ok(Self {
            kind,
            matrix,
            offset,
            epsilon,
            perturbation,
            growth,
            lipschitz,
        })
    }

    /// Override the declared constants.
    pub fn with_declared_constants(mut self, growth: f64, lipschitz: f64) -> Self {
        self.growth = growth;
        self.lipschitz = lipschitz;
        self
    }

    /// Same field with a different perturbation amplitude (declared constants recomputed).
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        match self.perturbation {
            Some(p) => Self::affine_plus_bounded(self.matrix.clone(), self.offset.clone(), epsilon, p),
            None if epsilon == 0.0 => Ok(self.clone()),
            None => Err(Error::Usage("affine field has no perturbation to scale".into())),
        }
    }

    /// The affine base `u -> M u + b`.
    pub fn affine_base(&self) -> Self {
        Self::affine(self.matrix.clone(), self.offset.clone()).expect("validated coefficients")
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn is_affine(&self) -> bool {
        self.kind == FieldKind::Affine
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn perturbation(&self) -> Option<Perturbation> {
        self.perturbation
    }

    /// Declared `kappa` with `|f(u)| <= kappa (1 + |u|)`.
    pub fn growth(&self) -> f64 {
        self.growth
    }

    /// Declared Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }

    /// Evaluate without a dimension check.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.matrix * u + &self.offset;
        if let Some(p) = self.perturbation {
            if self.epsilon != 0.0 {
                out += p.apply(u, self.dim_out()) * self.epsilon;
            }
        }
        out
    }

    pub fn affine_part(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.matrix * u + &self.offset
    }

    pub fn eval_field(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim_in() {
            return Err(Error::Dimension {
                expected: self.dim_in(),
                actual: u.len(),
            });
        }
        Ok(self.apply(u))
    }
}

/// `eval_field(field, u)`
pub fn eval_field(field: &VectorFieldSpec, u: &DVector<f64>) -> Result<DVector<f64>> {
    field.eval_field(u)
}

/// Raw model parameters. No invariants are enforced here; see [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct ModelSpec {
    pub dim_u: usize,
    pub dim_y: usize,
    pub dynamics: VectorFieldSpec,
    pub observation: VectorFieldSpec,
    pub sigma: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub c0: DMatrix<f64>,
}

impl ModelSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Scalar model `u' = m u + b + xi`, `y = h u + w + eta`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar_affine(m: f64, b: f64, h: f64, w: f64, sigma: f64, gamma: f64, m0: f64, c0: f64) -> Self {
        Self {
            dim_u: 1,
            dim_y: 1,
            dynamics: VectorFieldSpec::scalar_affine(m, b),
            observation: VectorFieldSpec::scalar_affine(h, w),
            sigma: DMatrix::from_element(1, 1, sigma),
            gamma: DMatrix::from_element(1, 1, gamma),
            m0: DVector::from_element(1, m0),
            c0: DMatrix::from_element(1, 1, c0),
        }
    }
}

/// A validated model with Cholesky factors of `Sigma`, `Gamma` and `C0` computed once.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    mu0: GaussianMeasure,
    chol_sigma: DMatrix<f64>,
    chol_gamma: DMatrix<f64>,
    chol_c0: DMatrix<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let (du, dy) = (spec.dim_u, spec.dim_y);
        if du == 0 || dy == 0 {
            return Err(Error::Config("state and observation dimensions must be positive".into()));
        }
        let shape = |what: &str, r: usize, c: usize, er: usize, ec: usize| -> Result<()> {
            if r != er || c != ec {
                return Err(Error::Config(format!("{what} has shape {r}x{c}, expected {er}x{ec}")));
            }
            Ok(())
        };
        shape("dynamics matrix", spec.dynamics.dim_out(), spec.dynamics.dim_in(), du, du)?;
        shape("observation matrix", spec.observation.dim_out(), spec.observation.dim_in(), dy, du)?;
        shape("Sigma", spec.sigma.nrows(), spec.sigma.ncols(), du, du)?;
        shape("Gamma", spec.gamma.nrows(), spec.gamma.ncols(), dy, dy)?;
        shape("C0", spec.c0.nrows(), spec.c0.ncols(), du, du)?;
        shape("m0", spec.m0.len(), 1, du, 1)?;
        let chol_sigma = cholesky_lower(&spec.sigma, "Sigma")?;
        let chol_gamma = cholesky_lower(&spec.gamma, "Gamma")?;
        let mu0 = GaussianMeasure::new(spec.m0.clone(), spec.c0.clone())
            .map_err(|e| Error::Config(format!("initial measure: {e}")))?;
        let chol_c0 = mu0.chol_lower();
        Ok(Self {
            spec,
            mu0,
            chol_sigma,
            chol_gamma,
            chol_c0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim_u(&self) -> usize {
        self.spec.dim_u
    }

    pub fn dim_y(&self) -> usize {
        self.spec.dim_y
    }

    pub fn dynamics(&self) -> &VectorFieldSpec {
        &self.spec.dynamics
    }

    pub fn observation(&self) -> &VectorFieldSpec {
        &self.spec.observation
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.spec.sigma
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.spec.gamma
    }

    pub fn mu0(&self) -> &GaussianMeasure {
        &self.mu0
    }

    pub fn chol_sigma(&self) -> &DMatrix<f64> {
        &self.chol_sigma
    }

    pub fn chol_gamma(&self) -> &DMatrix<f64> {
        &self.chol_gamma
    }

    pub fn chol_c0(&self) -> &DMatrix<f64> {
        &self.chol_c0
    }

    /// Smallest eigenvalue of `Sigma`.
    pub fn sigma_min(&self) -> f64 {
        min_eigenvalue(&self.spec.sigma)
    }

    /// Smallest eigenvalue of `Gamma`.
    pub fn gamma_min(&self) -> f64 {
        min_eigenvalue(&self.spec.gamma)
    }

    /// Both fields declared affine.
    pub fn is_affine(&self) -> bool {
        self.spec.dynamics.is_affine() && self.spec.observation.is_affine()
    }

    pub fn psi(&self, u: &DVector<f64>) -> DVector<f64> {
        self.spec.dynamics.apply(u)
    }

    pub fn h(&self, u: &DVector<f64>) -> DVector<f64> {
        self.spec.observation.apply(u)
    }

    /// Same noise and prior with other fields.
    pub fn with_fields(&self, dynamics: VectorFieldSpec, observation: VectorFieldSpec) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.dynamics = dynamics;
        spec.observation = observation;
        Self::new(spec)
    }
}

/// Truth trajectory `u_0..u_J` and data `y_1..y_J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DataDoc", into = "DataDoc")]
pub struct DataRecord {
    seed: u64,
    truth: Vec<DVector<f64>>,
    observations: Vec<DVector<f64>>,
}

impl DataRecord {
    pub fn new(seed: u64, truth: Vec<DVector<f64>>, observations: Vec<DVector<f64>>) -> Result<Self> {
        if truth.len() != observations.len() + 1 {
            return Err(Error::Config(format!(
                "{} truth states for {} observations",
                truth.len(),
                observations.len()
            )));
        }
        if truth
            .iter()
            .chain(observations.iter())
            .flat_map(|v| v.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Config("data must be finite".into()));
        }
        Ok(Self {
            seed,
            truth,
            observations,
        })
    }

    /// Data without a meaningful truth trajectory (truth set to zeros).
    pub fn from_observations(dim_u: usize, observations: Vec<DVector<f64>>) -> Result<Self> {
        let truth = vec![DVector::zeros(dim_u); observations.len() + 1];
        Self::new(0, truth, observations)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of assimilation steps `J`.
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    pub fn truth(&self) -> &[DVector<f64>] {
        &self.truth
    }

    /// `y_1..y_J`; index `j` holds `y_{j+1}`.
    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    /// Datum assimilated at step `j -> j+1`.
    pub fn observation(&self, j: usize) -> &DVector<f64> {
        &self.observations[j]
    }

    /// `max_j |y_j|`.
    pub fn kappa_y(&self) -> f64 {
        self.observations.iter().map(|y| y.norm()).fold(0.0, f64::max)
    }

    /// Keep the first `steps` observations.
    pub fn truncated(&self, steps: usize) -> Self {
        let steps = steps.min(self.steps());
        Self {
            seed: self.seed,
            truth: self.truth[..=steps].to_vec(),
            observations: self.observations[..steps].to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Simulate `u_0 ~ mu0`, `u_{j+1} = Psi(u_j) + xi_j`, `y_{j+1} = h(u_{j+1}) + eta_{j+1}`.
pub fn simulate_truth(model: &Model, steps: usize, seed: u64) -> DataRecord {
    let stream = NoiseStream::new(seed, 0);
    let mut u = model.mu0().mean() + stream.correlated_normal(0, 0, NoiseRole::TruthInit, model.chol_c0());
    let mut truth = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    truth.push(u.clone());
    for j in 0..steps {
        let xi = stream.correlated_normal(0, j as u64, NoiseRole::TruthDynamics, model.chol_sigma());
        u = model.psi(&u) + xi;
        let eta = stream.correlated_normal(0, j as u64 + 1, NoiseRole::TruthObservation, model.chol_gamma());
        observations.push(model.h(&u) + eta);
        truth.push(u.clone());
    }
    DataRecord {
        seed,
        truth,
        observations,
    }
}

/// Which standing assumption a check covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionKind {
    /// `Sigma >= sigma I`, `Gamma >= gamma I` with positive `sigma`, `gamma`.
    CovariancesPositiveDefinite,
    /// `|Psi(u)| <= kappa_Psi (1 + |u|)`
    DynamicsGrowth,
    /// `|h(u)| <= kappa_h (1 + |u|)`
    ObservationGrowth,
    /// `|h(u) - h(v)| <= ell_h |u - v|`
    ObservationLipschitz,
    /// `|Psi(u) - Psi(v)| <= ell_Psi |u - v|`
    DynamicsLipschitz,
    /// `sup |Psi - Psi_0| <= eps`
    DynamicsEpsilonBall,
    /// `sup |h - h_0| <= eps`
    ObservationEpsilonBall,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub kind: AssumptionKind,
    pub passed: bool,
    /// Tightest constant seen on the probe set (smallest eigenvalue for the covariance check).
    pub measured: f64,
    /// Declared constant the measurement is compared with.
    pub declared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub probe_size: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, kind: AssumptionKind) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.kind == kind)
    }
}

/// Measure the tightest growth/Lipschitz constants over `probe` and compare with the declared ones.
pub fn validate_assumptions(spec: &ModelSpec, probe: &[DVector<f64>]) -> Result<AssumptionReport> {
    if probe.is_empty() {
        return Err(Error::Usage("assumption checks need a nonempty probe set".into()));
    }
    if let Some(p) = probe.iter().find(|p| p.len() != spec.dim_u) {
        return Err(Error::Dimension {
            expected: spec.dim_u,
            actual: p.len(),
        });
    }
    let tol = |declared: f64| 1e-12 * (1.0 + declared.abs());
    let mut checks = Vec::new();

    let sig = min_eigenvalue(&spec.sigma);
    let gam = min_eigenvalue(&spec.gamma);
    let symmetric = crate::linalg::asymmetry(&spec.sigma) <= 1e-12 && crate::linalg::asymmetry(&spec.gamma) <= 1e-12;
    checks.push(AssumptionCheck {
        kind: AssumptionKind::CovariancesPositiveDefinite,
        passed: symmetric && sig > 0.0 && gam > 0.0,
        measured: sig.min(gam),
        declared: 0.0,
    });

    for (field, growth_kind, lip_kind, ball_kind) in [
        (
            &spec.dynamics,
            AssumptionKind::DynamicsGrowth,
            AssumptionKind::DynamicsLipschitz,
            AssumptionKind::DynamicsEpsilonBall,
        ),
        (
            &spec.observation,
            AssumptionKind::ObservationGrowth,
            AssumptionKind::ObservationLipschitz,
            AssumptionKind::ObservationEpsilonBall,
        ),
    ] {
        let values: Vec<DVector<f64>> = probe.iter().map(|u| field.apply(u)).collect();
        let growth = probe
            .iter()
            .zip(&values)
            .map(|(u, f)| f.norm() / (1.0 + u.norm()))
            .fold(0.0, f64::max);
        checks.push(AssumptionCheck {
            kind: growth_kind,
            passed: growth <= field.growth() + tol(field.growth()),
            measured: growth,
            declared: field.growth(),
        });
        let mut lip = 0.0_f64;
        for a in 0..probe.len() {
            for b in (a + 1)..probe.len() {
                let du = (&probe[a] - &probe[b]).norm();
                if du > 0.0 {
                    lip = lip.max((&values[a] - &values[b]).norm() / du);
                }
            }
        }
        checks.push(AssumptionCheck {
            kind: lip_kind,
            passed: lip <= field.lipschitz() + tol(field.lipschitz()),
            measured: lip,
            declared: field.lipschitz(),
        });
        if field.kind() == FieldKind::AffinePlusBounded {
            let dev = probe
                .iter()
                .zip(&values)
                .map(|(u, f)| (f - field.affine_part(u)).norm())
                .fold(0.0, f64::max);
            checks.push(AssumptionCheck {
                kind: ball_kind,
                passed: dev <= field.epsilon() + tol(field.epsilon()),
                measured: dev,
                declared: field.epsilon(),
            });
        }
    }
    Ok(AssumptionReport {
        probe_size: probe.len(),
        checks,
    })
}

/// Regular probe set: `per_axis` points per coordinate on `[-radius, radius]^d`.
pub fn box_probe(dim: usize, radius: f64, per_axis: usize) -> Vec<DVector<f64>> {
    let per_axis = per_axis.max(2);
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut flat| {
            DVector::from_iterator(
                dim,
                (0..dim).map(|_| {
                    let k = flat % per_axis;
                    flat /= per_axis;
                    -radius + 2.0 * radius * k as f64 / (per_axis - 1) as f64
                }),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FieldDoc {
    kind: FieldKind,
    matrix: Vec<Vec<F17>>,
    offset: Vec<F17>,
    #[serde(default = "zero17")]
    epsilon: F17,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation: Option<Perturbation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    growth: Option<F17>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lipschitz: Option<F17>,
}

fn zero17() -> F17 {
    F17(0.0)
}

impl From<&VectorFieldSpec> for FieldDoc {
    fn from(f: &VectorFieldSpec) -> Self {
        Self {
            kind: f.kind,
            matrix: mat_out(&f.matrix),
            offset: vec_out(&f.offset),
            epsilon: F17(f.epsilon),
            perturbation: f.perturbation,
            growth: Some(F17(f.growth)),
            lipschitz: Some(F17(f.lipschitz)),
        }
    }
}

impl FieldDoc {
    fn into_field(self, what: &str) -> std::result::Result<VectorFieldSpec, String> {
        let matrix = mat_in(&self.matrix, what)?;
        let offset = vec_in(&self.offset);
        let field = match self.kind {
            FieldKind::Affine => {
                if self.epsilon.0 != 0.0 || self.perturbation.is_some() {
                    return Err(format!("{what}: affine field cannot carry a perturbation"));
                }
                VectorFieldSpec::affine(matrix, offset)
            }
            FieldKind::AffinePlusBounded => {
                let p = self
                    .perturbation
                    .ok_or_else(|| format!("{what}: affine_plus_bounded needs `perturbation`"))?;
                VectorFieldSpec::affine_plus_bounded(matrix, offset, self.epsilon.0, p)
            }
        }
        .map_err(|e| format!("{what}: {e}"))?;
        let growth = self.growth.map_or(field.growth, |g| g.0);
        let lipschitz = self.lipschitz.map_or(field.lipschitz, |l| l.0);
        Ok(field.with_declared_constants(growth, lipschitz))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    dim_u: usize,
    dim_y: usize,
    dynamics: FieldDoc,
    observation: FieldDoc,
    sigma: Vec<Vec<F17>>,
    gamma: Vec<Vec<F17>>,
    m0: Vec<F17>,
    c0: Vec<Vec<F17>>,
}

impl From<ModelSpec> for ModelDoc {
    fn from(m: ModelSpec) -> Self {
        Self {
            dim_u: m.dim_u,
            dim_y: m.dim_y,
            dynamics: (&m.dynamics).into(),
            observation: (&m.observation).into(),
            sigma: mat_out(&m.sigma),
            gamma: mat_out(&m.gamma),
            m0: vec_out(&m.m0),
            c0: mat_out(&m.c0),
        }
    }
}

impl TryFrom<ModelDoc> for ModelSpec {
    type Error = String;

    fn try_from(d: ModelDoc) -> std::result::Result<Self, String> {
        Ok(Self {
            dim_u: d.dim_u,
            dim_y: d.dim_y,
            dynamics: d.dynamics.into_field("dynamics")?,
            observation: d.observation.into_field("observation")?,
            sigma: mat_in(&d.sigma, "sigma")?,
            gamma: mat_in(&d.gamma, "gamma")?,
            m0: vec_in(&d.m0),
            c0: mat_in(&d.c0, "c0")?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataDoc {
    seed: u64,
    steps: usize,
    dim_u: usize,
    dim_y: usize,
    kappa_y: F17,
    truth: Vec<Vec<F17>>,
    observations: Vec<Vec<F17>>,
}

impl From<DataRecord> for DataDoc {
    fn from(r: DataRecord) -> Self {
        Self {
            seed: r.seed,
            steps: r.steps(),
            dim_u: r.truth[0].len(),
            dim_y: r.observations.first().map_or(0, |y| y.len()),
            kappa_y: F17(r.kappa_y()),
            truth: r.truth.iter().map(vec_out).collect(),
            observations: r.observations.iter().map(vec_out).collect(),
        }
    }
}

impl TryFrom<DataDoc> for DataRecord {
    type Error = String;

    fn try_from(d: DataDoc) -> std::result::Result<Self, String> {
        let truth: Vec<DVector<f64>> = d.truth.iter().map(|v| vec_in(v)).collect();
        let observations: Vec<DVector<f64>> = d.observations.iter().map(|v| vec_in(v)).collect();
        if observations.len() != d.steps {
            return Err(format!("{} observations for {} steps", observations.len(), d.steps));
        }
        if truth.iter().any(|u| u.len() != d.dim_u) || observations.iter().any(|y| y.len() != d.dim_y) {
            return Err("state or observation length disagrees with declared dimensions".into());
        }
        let record = DataRecord::new(d.seed, truth, observations).map_err(|e| e.to_string())?;
        if record.kappa_y() != d.kappa_y.0 {
            return Err(format!(
                "kappa_y {} does not equal the realized maximum {}",
                d.kappa_y.0,
                record.kappa_y()
            ));
        }
        Ok(record)
    }
}
