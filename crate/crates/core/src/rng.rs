//! Counter-based noise streams.
//!
//! Every Gaussian draw is addressed by `(seed, replicate, particle, step, role)`.
//! The address is packed into a ChaCha key, so a draw never depends on how many
//! other draws were made before it. Interacting particles and their mean-field
//! replicas can therefore consume identical noise, and replicates can run on any
//! number of threads without changing a single bit of output.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a draw is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum NoiseRole {
    /// Initial ensemble draw from the prior.
    Init = 0,
    /// Dynamics noise xi for a filter particle.
    Dynamics = 1,
    /// Perturbed-observation noise eta for a filter particle.
    Observation = 2,
    TruthInit = 3,
    TruthDynamics = 4,
    TruthObservation = 5,
    /// Resampling inside statistical procedures (bootstrap).
    Bootstrap = 6,
    /// Parameters of randomly generated test instances.
    Instance = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    replicate: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, replicate: u64) -> Self {
        Self { seed, replicate }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicate(&self) -> u64 {
        self.replicate
    }

    /// Generator for one address. Pure in all of its arguments.
    pub fn rng(&self, particle: u64, step: u64, role: NoiseRole) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replicate.to_le_bytes());
        key[16..24].copy_from_slice(&particle.to_le_bytes());
        key[24..28].copy_from_slice(&(step as u32).to_le_bytes());
        key[28..32].copy_from_slice(&(role as u32).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    pub fn standard_normal(&self, particle: u64, step: u64, role: NoiseRole, dim: usize) -> DVector<f64> {
        let mut rng = self.rng(particle, step, role);
        DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)))
    }

    /// Draw `L z` with `z ~ N(0, I)`, i.e. a sample of `N(0, L L^T)`.
    pub fn correlated_normal(
        &self,
        particle: u64,
        step: u64,
        role: NoiseRole,
        chol_lower: &DMatrix<f64>,
    ) -> DVector<f64> {
        let z = self.standard_normal(particle, step, role, chol_lower.nrows());
        chol_lower * z
    }
}
