//! Exact Gaussian path samplers on finite grids.
//!
//! Each sampler exposes two faces: a batch `sample_*` function producing an
//! ensemble, and a latent map (standard normal vector to path) that the
//! splitting estimator perturbs directly.

mod circulant;
mod ensemble;
mod factor;
mod localized;
mod torus;

pub use circulant::{sample_fbm14, FbmCirculant};
pub use ensemble::{PathEnsemble, Provenance, SpaceTimeEnsemble};
pub use factor::{
    sample_brownian, sample_gaussian_path, FactorMethod, FactorReport, GaussianFactor,
};
pub use localized::{
    localized_covariance, sample_localized, var_h_minus_hn, LocalizedField, LocalizedSpec,
};
pub use torus::{coupled_h_conditional, coupled_h_from_f_t, sample_z_torus, ZTorusSampler};

use rayon::prelude::*;

use crate::rng::RngStream;

/// Fill `count` rows of width `width`, row `i` drawn from stream `base.child(i)`.
///
/// Rows are independent of scheduling, so any thread count yields the same data.
pub(crate) fn fill_rows<F>(data: &mut [f64], width: usize, base: RngStream, make_row: F)
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, &mut [f64]) + Sync,
{
    if width == 0 {
        return;
    }
    data.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
        let mut rng = base.child(i as u64).rng();
        make_row(&mut rng, row);
    });
}
