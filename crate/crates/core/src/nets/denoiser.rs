use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::embed::{one_hot, time_embedding, Cond};
use crate::error::{invalid, Error, Result};
use crate::grad::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::schedule::{NoiseSchedule, ALPHA_FLOOR};

/// Shape of a conditional ε-prediction MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    pub n_classes: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl NetConfig {
    pub fn new(data_dim: usize, n_classes: usize, hidden: Vec<usize>) -> Self {
        Self {
            data_dim,
            n_classes,
            hidden,
            time_dim: 64,
            cond_dim: 16,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// `(in, out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Low-rank delta `scale · B · A` on one affine layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

pub(crate) fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::raw(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Adds a `(in → out)` layer with the usual `±1/√in` uniform init.
pub(crate) fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    (fan_in, fan_out): (usize, usize),
    zero: bool,
    rng: &mut R,
) -> Result<Linear> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let (w, b) = if zero {
        (Tensor::zeros(&[fan_out, fan_in]), Tensor::zeros(&[fan_out]))
    } else {
        let w = uniform_init(rng, fan_out, fan_in, bound);
        let b = uniform_init(rng, 1, fan_out, bound).reshape(vec![fan_out])?;
        (w, b)
    };
    Ok(Linear {
        w: store.add(format!("{name}.w"), w, true)?,
        b: store.add(format!("{name}.b"), b, true)?,
    })
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub eps: Var,
    /// Post-activation outputs of the hidden layers, in order.
    pub hidden: Vec<Var>,
}

/// Conditional ε-prediction network: `[z ; time embedding ; class embedding] → MLP(SiLU) → ε̂`.
///
/// A student built by [`DenoiserNet::attach_lora`] shares the base layers of its
/// teacher (frozen) and adds trainable low-rank adapters plus its own class table.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    config: NetConfig,
    prefix: String,
    cond_table: ParamId,
    layers: Vec<Linear>,
    adapters: Vec<Adapter>,
    rank: Option<usize>,
}

impl DenoiserNet {
    /// Fresh network with a zero-initialised output layer.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Self::build(config, store, prefix, rng, true)
    }

    pub fn build<R: Rng + ?Sized>(
        config: NetConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
        zero_output: bool,
    ) -> Result<Self> {
        if config.data_dim == 0 || config.n_classes == 0 || config.hidden.is_empty() {
            return Err(invalid("network needs a data dimension, classes and at least one hidden layer"));
        }
        let table = uniform_init(rng, config.cond_dim, config.n_classes + 1, 1.0);
        let cond_table = store.add(format!("{prefix}.cond"), table, true)?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| add_linear(store, &format!("{prefix}.l{i}"), d, zero_output && i == last, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            cond_table,
            layers,
            adapters: Vec::new(),
            rank: None,
        })
    }

    /// Re-binds a plain network whose parameters already exist in `store`.
    pub fn bind(config: NetConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let find = |name: String| store.find(&name).ok_or_else(|| invalid(format!("missing parameter {name}")));
        let layers = (0..config.hidden.len() + 1)
            .map(|i| {
                Ok(Linear {
                    w: find(format!("{prefix}.l{i}.w"))?,
                    b: find(format!("{prefix}.l{i}.b"))?,
                })
            })
            .collect::<Result<_>>()?;
        let net = Self {
            cond_table: find(format!("{prefix}.cond"))?,
            config,
            prefix: prefix.to_string(),
            layers,
            adapters: Vec::new(),
            rank: None,
        };
        net.check_shapes(store)?;
        Ok(net)
    }

    /// Re-binds a student stored under `prefix` on top of `base`.
    pub fn bind_student(base: &DenoiserNet, store: &ParamStore, prefix: &str, rank: usize) -> Result<Self> {
        let find = |name: String| store.find(&name).ok_or_else(|| invalid(format!("missing parameter {name}")));
        let adapters = (0..base.layers.len())
            .map(|i| {
                Ok(Adapter {
                    a: find(format!("{prefix}.l{i}.lora_a"))?,
                    b: find(format!("{prefix}.l{i}.lora_b"))?,
                    scale: lora_scale(rank),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (ad, (fi, fo)) in adapters.iter().zip(base.config.layer_dims()) {
            let r = layer_rank(rank, fi, fo);
            if store.value(ad.a).shape() != [r, fi] || store.value(ad.b).shape() != [fo, r] {
                return Err(invalid(format!("{}: adapter shape does not match rank {rank}", store.name(ad.a))));
            }
        }
        let net = Self {
            config: base.config.clone(),
            prefix: prefix.to_string(),
            cond_table: find(format!("{prefix}.cond"))?,
            layers: base.layers.clone(),
            adapters,
            rank: Some(rank),
        };
        net.check_shapes(store)?;
        Ok(net)
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        for (l, (fi, fo)) in self.layers.iter().zip(self.config.layer_dims()) {
            if store.value(l.w).shape() != [fo, fi] || store.value(l.b).shape() != [fo] {
                return Err(invalid(format!("{}: layer shape does not match config", store.name(l.w))));
            }
        }
        if store.value(self.cond_table).shape() != [self.config.cond_dim, self.config.n_classes + 1] {
            return Err(invalid("class table shape does not match config"));
        }
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn cond_table(&self) -> ParamId {
        self.cond_table
    }

    /// Adapter rank for students, `None` for plain networks.
    pub fn rank(&self) -> Option<usize> {
        self.rank
    }

    /// Every parameter the forward pass reads.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cond_table];
        for l in &self.layers {
            ids.extend([l.w, l.b]);
        }
        for a in &self.adapters {
            ids.extend([a.a, a.b]);
        }
        ids
    }

    pub fn trainable_params(&self, store: &ParamStore) -> Vec<ParamId> {
        self.params().into_iter().filter(|&id| store.is_trainable(id)).collect()
    }

    /// Student sharing this network's layers as frozen base weights, with rank-`rank`
    /// adapters (`B = 0`) and a trainable copy of the class table. Layers narrower
    /// than `rank` (the data-sized input and output ends) get a full-rank adapter.
    pub fn attach_lora<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = self.config.layer_dims();
        let max_rank = self.config.hidden.iter().copied().min().unwrap_or(0);
        if rank == 0 || rank > max_rank {
            return Err(invalid(format!("LoRA rank {rank} must lie in [1, {max_rank}]")));
        }
        for id in self.params() {
            store.set_trainable(id, false);
        }
        let table = store.value(self.cond_table).clone();
        let cond_table = store.add(format!("{prefix}.cond"), table, true)?;
        let mut adapters = Vec::with_capacity(dims.len());
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let r = layer_rank(rank, fan_in, fan_out);
            let a = uniform_init(rng, r, fan_in, 1.0 / (fan_in as f64).sqrt());
            adapters.push(Adapter {
                a: store.add(format!("{prefix}.l{i}.lora_a"), a, true)?,
                b: store.add(format!("{prefix}.l{i}.lora_b"), Tensor::zeros(&[fan_out, r]), true)?,
                scale: lora_scale(rank),
            });
        }
        Ok(Self {
            config: self.config.clone(),
            prefix: prefix.to_string(),
            cond_table,
            layers: self.layers.clone(),
            adapters,
            rank: Some(rank),
        })
    }

    /// Plain network whose weights are `W + s·B·A`, written under `prefix`.
    pub fn merged(&self, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let table = store.value(self.cond_table).clone();
        let cond_table = store.add(format!("{prefix}.cond"), table, false)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut w = store.value(l.w).clone();
            if let Some(ad) = self.adapters.get(i) {
                let delta = store.value(ad.b).matmul(store.value(ad.a))?;
                for (wv, d) in w.data_mut().iter_mut().zip(delta.data()) {
                    *wv += ad.scale * d;
                }
            }
            let bias = store.value(l.b).clone();
            layers.push(Linear {
                w: store.add(format!("{prefix}.l{i}.w"), w, false)?,
                b: store.add(format!("{prefix}.l{i}.b"), bias, false)?,
            });
        }
        Ok(Self {
            config: self.config.clone(),
            prefix: prefix.to_string(),
            cond_table,
            layers,
            adapters: Vec::new(),
            rank: None,
        })
    }

    fn input(&self, tape: &mut Tape, store: &ParamStore, z: Var, ts: &[f64], conds: &[Cond], track: bool) -> Result<Var> {
        let n = tape.value(z).rows();
        if ts.len() != n || conds.len() != n || tape.value(z).cols() != self.config.data_dim {
            return Err(Error::Shape {
                op: "denoiser input",
                detail: format!(
                    "z {:?}, {} timesteps, {} conditions, data dim {}",
                    tape.value(z).shape(),
                    ts.len(),
                    conds.len(),
                    self.config.data_dim
                ),
            });
        }
        if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
        }
        let temb = tape.constant(time_embedding(ts, self.config.time_dim)?);
        let hot = tape.constant(one_hot(conds, self.config.n_classes)?);
        let table = tape.param(store, self.cond_table, track);
        let cemb = tape.affine(hot, table, None)?;
        tape.concat(&[z, temb, cemb])
    }

    fn layer(&self, tape: &mut Tape, store: &ParamStore, i: usize, h: Var, track: bool) -> Result<Var> {
        let l = self.layers[i];
        let w = tape.param(store, l.w, track);
        let b = tape.param(store, l.b, track);
        let mut out = tape.affine(h, w, Some(b))?;
        if let Some(ad) = self.adapters.get(i) {
            let a = tape.param(store, ad.a, track);
            let bb = tape.param(store, ad.b, track);
            let low = tape.affine(h, a, None)?;
            let up = tape.affine(low, bb, None)?;
            let up = tape.scale(up, ad.scale)?;
            out = tape.add(out, up)?;
        }
        Ok(out)
    }

    /// Records the full network on `tape`. Parameters are tracked only when `track`
    /// is set and they are trainable in `store`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
        track: bool,
    ) -> Result<Forward> {
        self.run(tape, store, z, ts, conds, track, self.layers.len())
    }

    /// Records only the first `depth` hidden layers.
    pub fn features_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
        depth: usize,
    ) -> Result<Vec<Var>> {
        let depth = depth.min(self.layers.len() - 1);
        Ok(self.run(tape, store, z, ts, conds, false, depth)?.hidden)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
        track: bool,
        n_layers: usize,
    ) -> Result<Forward> {
        let mut h = self.input(tape, store, z, ts, conds, track)?;
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        for i in 0..n_layers {
            let pre = self.layer(tape, store, i, h, track)?;
            if i == last {
                return Ok(Forward { eps: pre, hidden });
            }
            h = tape.silu(pre)?;
            hidden.push(h);
        }
        Ok(Forward { eps: h, hidden })
    }

    /// ε̂(z, t, c) without recording gradients.
    pub fn forward(&self, store: &ParamStore, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.forward_tape(&mut tape, store, zv, ts, conds, false)?;
        Ok(tape.value(out.eps).clone())
    }

    /// Clean-sample prediction `f(z, t) = (z − σ ε̂)/α`. Both the network and the
    /// conversion read `t` clamped to `1 − clamp`, where `α` would otherwise vanish.
    #[allow(clippy::too_many_arguments)]
    pub fn x0_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sched: &NoiseSchedule,
        z: Var,
        ts: &[f64],
        conds: &[Cond],
        track: bool,
    ) -> Result<Var> {
        if let Some(&t) = ts.iter().find(|&&t| t <= 0.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, 1]" });
        }
        let tcs: Vec<f64> = ts.iter().map(|&t| sched.x0_time(t)).collect();
        let out = self.forward_tape(tape, store, z, &tcs, conds, track)?;
        let d = self.config.data_dim;
        let mut inv_a = Vec::with_capacity(ts.len() * d);
        let mut s_over_a = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            let tc = sched.x0_time(t);
            let a = sched.alpha(tc);
            if a < ALPHA_FLOOR {
                return Err(Error::Singular { t, what: "alpha(t) ~ 0 in student prediction" });
            }
            let s = sched.sigma(tc);
            inv_a.extend(std::iter::repeat_n(1.0 / a, d));
            s_over_a.extend(std::iter::repeat_n(s / a, d));
        }
        let n = ts.len();
        let ca = tape.constant(Tensor::raw(vec![n, d], inv_a));
        let cs = tape.constant(Tensor::raw(vec![n, d], s_over_a));
        let zs = tape.mul(z, ca)?;
        let es = tape.mul(out.eps, cs)?;
        tape.sub(zs, es)
    }

    /// Clean-sample prediction without recording gradients.
    pub fn x0(&self, store: &ParamStore, sched: &NoiseSchedule, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x0 = self.x0_tape(&mut tape, store, sched, zv, ts, conds, false)?;
        Ok(tape.value(x0).clone())
    }
}

/// Rank actually used on an `(in → out)` layer.
pub fn layer_rank(rank: usize, fan_in: usize, fan_out: usize) -> usize {
    rank.min(fan_in).min(fan_out)
}

/// Adapter scale `s` in `W + s·B·A`.
pub fn lora_scale(_rank: usize) -> f64 {
    1.0
}
