//! Spatial building blocks: sites, correlation kernels, Gaussian
//! factorizations, multivariate normal densities, observation families and
//! conditional prediction at unmonitored sites.

mod factor;
mod kernel;
mod mvn;
mod obs;
mod predict;
mod sites;

pub use factor::{GaussianFactorization, RangeFactor};
pub(crate) use factor::{backward_in_place, cholesky_lower, forward_in_place};
pub use kernel::{build_correlation, build_cross_correlation, CorrelationKernel, KernelKind};
pub use mvn::{mvn_logpdf, mvn_sample, LN_2PI};
pub use obs::{obs_loglik, Family, ObsBatch, ObservationModel};
pub use predict::{predict_unmonitored, ConditionalPrediction, Kriging, MarginalKriging};
pub use sites::SiteSet;
