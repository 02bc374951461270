use attnalign_core::Executor;
use rayon::prelude::*;

/// Runs items on the rayon pool. `collect` keeps input order, so the
/// results are the same as [`attnalign_core::Sequential`]'s.
#[derive(Clone, Copy, Debug, Default)]
pub struct Rayon;

impl Executor for Rayon {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        items.into_par_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attnalign_core::Sequential;

    #[test]
    fn order_matches_sequential() {
        let items: Vec<u64> = (0..1000).collect();
        let f = |x: u64| x.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(7);
        assert_eq!(Rayon.map(items.clone(), f), Sequential.map(items, f));
    }
}
