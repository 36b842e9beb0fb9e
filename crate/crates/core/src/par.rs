//! Execution strategy for the data-parallel inner loops.
//!
//! Every loop routed through here is a pure per-item map; reductions over its
//! output are always done sequentially by the caller in a fixed order, so
//! results are bitwise identical for any worker count and for either mode.

/// Whether per-item work runs on the rayon pool or on the calling thread.
///
/// `Parallel` silently degrades to sequential when the crate is built
/// without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Below this many items the rayon split overhead dominates.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_LEN: usize = 4;

pub fn for_each_mut<T, F>(exec: Exec, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && items.len() >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, item)| f(i, item));
        return;
    }
    let _ = exec;
    items.iter_mut().enumerate().for_each(|(i, item)| f(i, item));
}

pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && items.len() >= MIN_PARALLEL_LEN {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Fallible variant of [`map`]; the first error in index order wins.
pub fn try_map<T, U, E, F>(exec: Exec, items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<U, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let a = map(Exec::Parallel, &xs, |i, x| x.sin() + i as f64);
        let b = map(Exec::Sequential, &xs, |i, x| x.sin() + i as f64);
        assert_eq!(a, b);

        let mut ys = xs.clone();
        for_each_mut(Exec::Parallel, &mut ys, |i, y| *y *= i as f64);
        let mut zs = xs;
        for_each_mut(Exec::Sequential, &mut zs, |i, z| *z *= i as f64);
        assert_eq!(ys, zs);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4, 5, 6];
        let r: Result<Vec<i32>, usize> = try_map(Exec::Parallel, &xs, |i, &x| if x % 2 == 0 { Err(i) } else { Ok(x) });
        assert_eq!(r, Err(1));
    }
}
