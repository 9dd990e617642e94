//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool when the caller asks for it; otherwise it runs in order on
//! the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, stopping at the first error. Output order matches
/// input order in both modes.
pub fn try_map<T, R, E, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}
