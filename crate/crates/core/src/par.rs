//! Order-preserving batch map, parallel when the `parallel` feature is on.
//!
//! Results are collected in input order in both modes, so callers see
//! identical output regardless of the feature; only wall-clock time differs.
//! [`seq_map`] is the always-sequential path, kept public so the bench suite
//! can compare the two on the same workload.

/// Maps `f` over `items` on the rayon pool (or sequentially without the
/// `parallel` feature), preserving input order.
#[cfg(feature = "parallel")]
pub fn batch_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn batch_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    seq_map(items, f)
}

/// Always-sequential map with the same signature as [`batch_map`].
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let doubled = batch_map(&items, |x| x * 2);
        assert_eq!(doubled, seq_map(&items, |x| x * 2));
        assert_eq!(doubled[999], 1998);
    }
}
