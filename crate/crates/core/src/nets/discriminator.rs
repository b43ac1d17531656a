use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{add_linear, uniform_init, DenoiserNet, Linear};
use super::embed::{one_hot, time_embedding, Cond};
use crate::error::{invalid, Result};
use crate::grad::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub hidden: Vec<usize>,
    /// Number of teacher hidden layers whose activations feed the head.
    pub feature_depth: usize,
    pub use_cond: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            feature_depth: 2,
            use_cond: true,
        }
    }
}

/// MLP head scoring re-noised samples from frozen teacher activations, the time
/// embedding and (optionally) its own class embedding. Outputs one unbounded
/// score per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    time_dim: usize,
    n_classes: usize,
    cond_table: Option<ParamId>,
    layers: Vec<Linear>,
}

impl Discriminator {
    fn input_dim(config: &DiscConfig, teacher: &DenoiserNet) -> Result<usize> {
        let tc = teacher.config();
        if config.feature_depth == 0 || config.feature_depth > tc.hidden.len() {
            return Err(invalid(format!(
                "feature depth {} outside 1..={}",
                config.feature_depth,
                tc.hidden.len()
            )));
        }
        let feats: usize = tc.hidden[..config.feature_depth].iter().sum();
        Ok(feats + tc.time_dim + if config.use_cond { tc.cond_dim } else { 0 })
    }

    fn dims(config: &DiscConfig, teacher: &DenoiserNet) -> Result<Vec<(usize, usize)>> {
        let mut prev = Self::input_dim(config, teacher)?;
        let mut dims = Vec::new();
        for &h in &config.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        Ok(dims)
    }

    /// New head with a zeroed output layer.
    pub fn new<R: Rng + ?Sized>(
        config: DiscConfig,
        teacher: &DenoiserNet,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let tc = teacher.config();
        let dims = Self::dims(&config, teacher)?;
        let cond_table = if config.use_cond {
            let t = uniform_init(rng, tc.cond_dim, tc.n_classes + 1, 1.0);
            Some(store.add(format!("{prefix}.cond"), t, true)?)
        } else {
            None
        };
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| add_linear(store, &format!("{prefix}.l{i}"), d, i == last, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            time_dim: tc.time_dim,
            n_classes: tc.n_classes,
            config,
            cond_table,
            layers,
        })
    }

    pub fn bind(config: DiscConfig, teacher: &DenoiserNet, store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| store.find(&name).ok_or_else(|| invalid(format!("missing parameter {name}")));
        let dims = Self::dims(&config, teacher)?;
        let mut layers = Vec::with_capacity(dims.len());
        for (i, (fi, fo)) in dims.into_iter().enumerate() {
            let l = Linear {
                w: find(format!("{prefix}.l{i}.w"))?,
                b: find(format!("{prefix}.l{i}.b"))?,
            };
            if store.value(l.w).shape() != [fo, fi] {
                return Err(invalid(format!("{prefix}.l{i}: shape does not match config")));
            }
            layers.push(l);
        }
        let tc = teacher.config();
        Ok(Self {
            cond_table: if config.use_cond { Some(find(format!("{prefix}.cond"))?) } else { None },
            time_dim: tc.time_dim,
            n_classes: tc.n_classes,
            config,
            layers,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.cond_table.into_iter().collect();
        for l in &self.layers {
            ids.extend([l.w, l.b]);
        }
        ids
    }

    /// Frozen teacher activations the head reads; never tracks teacher weights.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        teacher: &DenoiserNet,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
    ) -> Result<Vec<Var>> {
        teacher.features_tape(tape, store, z, ts, conds, self.config.feature_depth)
    }

    /// Scores of shape `(n, 1)` from precomputed features. The head's own weights
    /// are tracked when `track` is set.
    pub fn head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: &[Var],
        ts: &[f64],
        conds: &[Cond],
        track: bool,
    ) -> Result<Var> {
        if feats.len() != self.config.feature_depth {
            return Err(invalid(format!(
                "head expects {} feature blocks, got {}",
                self.config.feature_depth,
                feats.len()
            )));
        }
        let mut parts = feats.to_vec();
        parts.push(tape.constant(time_embedding(ts, self.time_dim)?));
        if let Some(table) = self.cond_table {
            let hot = tape.constant(one_hot(conds, self.n_classes)?);
            let table = tape.param(store, table, track);
            parts.push(tape.affine(hot, table, None)?);
        }
        let mut h = tape.concat(&parts)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.param(store, l.w, track);
            let b = tape.param(store, l.b, track);
            h = tape.affine(h, w, Some(b))?;
            if i != last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Scores of shape `(n, 1)`. Teacher weights always enter as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        teacher: &DenoiserNet,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
        track: bool,
    ) -> Result<Var> {
        let feats = self.features(tape, store, teacher, z, ts, conds)?;
        self.head(tape, store, &feats, ts, conds, track)
    }

    pub fn forward(&self, store: &ParamStore, teacher: &DenoiserNet, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.forward_tape(&mut tape, store, teacher, zv, ts, conds, false)?;
        Ok(tape.value(out).clone())
    }
}
