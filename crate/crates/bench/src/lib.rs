//! Fixtures shared by the throughput benchmarks.

use shelab::smallball::{Kernel, ProcessSpec, SmallBallQuery, SplittingConfig};
use shelab::spde::{InitialCondition, Scheme, Sigma, SpdeConfig};

pub fn spde_config(m: usize, scheme: Scheme) -> SpdeConfig {
    SpdeConfig {
        m,
        dt: 1e-5,
        horizon: 1e-3,
        sigma: Sigma::Cos,
        u0: InitialCondition::SinPi {
            amplitude: 1.0,
            k: 1,
        },
        scheme,
    }
}

/// A Brownian small-ball query with a handful of splitting levels.
pub fn small_query(points: usize) -> SmallBallQuery {
    SmallBallQuery::new(ProcessSpec::Bm, 0.5, [0.0, 1.0], points).expect("valid query")
}

pub fn light_splitting(kernel: Kernel) -> SplittingConfig {
    SplittingConfig {
        particles: 100,
        rejuvenation_sweeps: 2,
        repetitions: 10,
        kernel,
        ..SplittingConfig::default()
    }
}
