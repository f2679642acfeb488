//! Optional data parallelism.
//!
//! Compiled with the `parallel` feature (the default), batch maps and large
//! matrix kernels run on the rayon pool. Without it everything is sequential.
//! Parallel and sequential paths produce bit-identical results: work is split
//! only across independent rows/samples, never across a reduction, so the
//! floating-point evaluation order of every output element is fixed.
//!
//! `VIFI_PARALLELISM=0` (or `set_parallelism(false)`) disables the parallel
//! path at runtime, which the benches use to compare both backends in one
//! process.

use std::sync::atomic::{AtomicU8, Ordering};

pub const ENV_PARALLELISM: &str = "VIFI_PARALLELISM";

// 0 = unset (consult env once), 1 = off, 2 = on
static PARALLELISM: AtomicU8 = AtomicU8::new(0);

/// Force the parallel path on or off, overriding the environment.
pub fn set_parallelism(enabled: bool) {
    PARALLELISM.store(if enabled { 2 } else { 1 }, Ordering::SeqCst);
}

/// Whether the parallel path is active. Always false without the feature.
pub fn parallelism_enabled() -> bool {
    if cfg!(not(feature = "parallel")) {
        return false;
    }
    match PARALLELISM.load(Ordering::SeqCst) {
        1 => false,
        2 => true,
        _ => match std::env::var(ENV_PARALLELISM) {
            Ok(v) => !matches!(v.as_str(), "0" | "false" | "off"),
            Err(_) => true,
        },
    }
}

/// Map over samples, in parallel when enabled. Output order always matches
/// input order.
#[cfg(feature = "parallel")]
pub fn map_samples<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    use rayon::prelude::*;
    if parallelism_enabled() && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_samples<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Fallible variant of [`map_samples`]; returns the first error in input order.
#[cfg(feature = "parallel")]
pub fn try_map_samples<T, U, E, F>(items: &[T], f: F) -> std::result::Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> std::result::Result<U, E> + Sync,
{
    use rayon::prelude::*;
    if parallelism_enabled() && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_samples<T, U, E, F>(items: &[T], f: F) -> std::result::Result<Vec<U>, E>
where
    F: Fn(&T) -> std::result::Result<U, E>,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..100).collect();
        let ys = map_samples(&xs, |x| x * 2);
        assert_eq!(ys, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn override_toggles_dispatch() {
        set_parallelism(false);
        assert!(!parallelism_enabled());
        set_parallelism(true);
        assert_eq!(parallelism_enabled(), cfg!(feature = "parallel"));
    }
}
