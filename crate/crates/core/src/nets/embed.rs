use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::Tensor;

/// Class condition of one sample; `Null` is the dropped-condition token used by guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Class(u32),
    Null,
}

impl Cond {
    pub fn class(self) -> Option<u32> {
        match self {
            Cond::Class(c) => Some(c),
            Cond::Null => None,
        }
    }
}

pub fn classes(ids: &[u32]) -> Vec<Cond> {
    ids.iter().map(|&c| Cond::Class(c)).collect()
}

/// Sinusoidal features `[sin(ω_k t), cos(ω_k t)]` with `ω_k = π·2^(k/5)`.
pub fn time_embedding(ts: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("time embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| std::f64::consts::PI * (k as f64 / 5.0).exp2())
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for &w in &freqs {
            data.push((w * t).sin());
        }
        for &w in &freqs {
            data.push((w * t).cos());
        }
    }
    Tensor::matrix(ts.len(), dim, data)
}

/// One-hot rows of width `n_classes + 1`; the last column is the null token.
pub fn one_hot(conds: &[Cond], n_classes: usize) -> Result<Tensor> {
    let width = n_classes + 1;
    let mut data = vec![0.0; conds.len() * width];
    for (row, c) in conds.iter().enumerate() {
        let col = match *c {
            Cond::Class(id) if (id as usize) < n_classes => id as usize,
            Cond::Class(id) => {
                return Err(invalid(format!("unknown class id {id} (have {n_classes} classes)")));
            }
            Cond::Null => n_classes,
        };
        data[row * width + col] = 1.0;
    }
    Tensor::matrix(conds.len(), width, data)
}
