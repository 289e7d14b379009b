//! Order-preserving map over independent jobs.
//!
//! Every job derives its own seed, so results do not depend on scheduling and
//! the two modes produce identical output.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Execution {
    /// Whether jobs will actually run on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `f(0), f(1), ..., f(n-1)` in index order. On failure, returns the error of
/// the lowest failing index.
pub fn try_map<R, F>(exec: Execution, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    let results: Vec<Result<R>> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(&f).collect()
        }
        _ => (0..n).map(&f).collect(),
    };
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn modes_agree() {
        let f = |i: usize| Ok(i * i);
        let a = try_map(Execution::Sequential, 100, f).unwrap();
        let b = try_map(Execution::Parallel, 100, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn first_error_wins() {
        let f = |i: usize| {
            if i % 10 == 3 {
                Err(Error::Argument(format!("{i}")))
            } else {
                Ok(i)
            }
        };
        for exec in [Execution::Sequential, Execution::Parallel] {
            match try_map(exec, 50, f) {
                Err(Error::Argument(m)) => assert_eq!(m, "3"),
                other => panic!("{other:?}"),
            }
        }
    }
}
