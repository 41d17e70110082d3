//! Dense tensors, kernels and reverse-mode differentiation.

pub mod exec;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use exec::{Eager, Exec, ScanOperands, UnaryOp};
pub use kernels::{ConvGeom, ConvTGeom};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Real, Tensor};

/// Environment variable selecting the intra-op thread count.
pub const THREADS_ENV: &str = "SEPM_THREADS";

/// Configures the global intra-op pool. An explicit count wins over
/// `SEPM_THREADS`; with neither, rayon's default applies. Returns the
/// thread count in effect. Only the first call can change the pool.
pub fn init_threads(explicit: Option<usize>) -> usize {
    let requested = explicit.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    if let Some(n) = requested {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already initialized; keeping {} threads", rayon::current_num_threads());
        }
    }
    rayon::current_num_threads()
}
