use std::sync::Arc;

use crate::error::Result;
use crate::graph::Var;
use crate::layers::INIT_STD;
use crate::params::{join, Init, Module, ParamSpec, Session};
use crate::scalar::Scalar;

/// Table row for every ordered token pair of an `m x m` window, row-major
/// over `[m^2, m^2]`. Rows enumerate displacements `(dy, dx)` as
/// `(dy + m - 1) * (2m - 1) + (dx + m - 1)`.
pub fn relative_position_index(m: usize) -> Vec<u32> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            index.push((dy * side + dx) as u32);
        }
    }
    index
}

/// Learnable relative position bias: a `[(2M-1)^2, heads]` table gathered
/// into a `[heads, M^2, M^2]` score offset.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub name: String,
    pub window: usize,
    pub heads: usize,
    index: Arc<Vec<u32>>,
}

impl RelativePositionBias {
    pub fn new(name: impl Into<String>, window: usize, heads: usize) -> Self {
        Self {
            name: name.into(),
            window,
            heads,
            index: Arc::new(relative_position_index(window)),
        }
    }

    pub fn table_name(&self) -> String {
        join(&self.name, "table")
    }

    pub fn index(&self) -> &[u32] {
        &self.index
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>) -> Result<Var> {
        let table = s.param(&self.table_name())?;
        let n = self.window * self.window;
        let pairs = s
            .graph
            .gather_rows(table, self.heads, self.index.clone(), &[n, n, self.heads])?;
        s.graph.permute(pairs, &[2, 0, 1])
    }
}

impl Module for RelativePositionBias {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let side = 2 * self.window - 1;
        out.push(ParamSpec {
            name: self.table_name(),
            shape: vec![side * side, self.heads],
            init: Init::TruncNormal { std: INIT_STD },
            trainable: true,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_matches_direct_displacement() {
        for m in 1..=7 {
            let side = 2 * m as i64 - 1;
            let idx = relative_position_index(m);
            let n = m * m;
            for i in 0..n {
                for j in 0..n {
                    let dy = (i / m) as i64 - (j / m) as i64;
                    let dx = (i % m) as i64 - (j % m) as i64;
                    let want = (dy + m as i64 - 1) * side + dx + m as i64 - 1;
                    let got = idx[i * n + j] as i64;
                    assert_eq!(got, want);
                    assert!(got >= 0 && got < side * side);
                }
            }
        }
    }

    #[test]
    fn negated_displacement_reflects_table_row() {
        let m = 4;
        let idx = relative_position_index(m);
        let last = ((2 * m - 1) * (2 * m - 1) - 1) as u32;
        let n = m * m;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(idx[i * n + j] + idx[j * n + i], last);
            }
        }
    }
}
