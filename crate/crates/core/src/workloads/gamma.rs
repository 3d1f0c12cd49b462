use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::ConfigError;

/// Mean allocation size of the malloc workloads, 3.3 MiB.
pub const MEAN_ALLOC_BYTES: f64 = 3.3 * (1u64 << 20) as f64;

/// Allocation sizes drawn from a Gamma distribution with a fixed mean and
/// a configurable shape, rounded up to whole pages.
#[derive(Debug, Clone, Copy)]
pub struct AllocSizes {
    dist: Gamma<f64>,
    page_size: u64,
}

impl AllocSizes {
    pub fn new(shape: f64, page_size: u64) -> Result<Self, ConfigError> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(ConfigError::Scenario(format!("gamma shape must be positive, got {shape}")));
        }
        let dist = Gamma::new(shape, MEAN_ALLOC_BYTES / shape)
            .map_err(|e| ConfigError::Scenario(format!("gamma distribution: {e}")))?;
        Ok(Self { dist, page_size })
    }

    /// Default shape of 2, so the scale is 1.65 MiB.
    pub fn standard(page_size: u64) -> Self {
        Self::new(2.0, page_size).expect("valid default")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let bytes = self.dist.sample(rng).ceil() as u64;
        bytes.max(1).div_ceil(self.page_size) * self.page_size
    }
}

/// One page-rounded allocation size.
pub fn gamma_alloc_size<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    AllocSizes::standard(4096).sample(rng)
}
