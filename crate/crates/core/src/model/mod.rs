//! The EffLoc network: overlapping patch embedding, three stages of sandwich
//! blocks around grouped cascaded attention, and an MLP pose regressor.

mod attention;
mod config;
mod params;
#[cfg(test)]
mod tests;

pub use attention::{linear, sga_attention, AttentionVars, HeadVars};
pub use config::{parse_kv, ModelConfig, NAMED_CONFIGS};
pub use params::{module_of, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffLocModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Batch-normalization running moments; not trained.
    pub buffers: ParamStore<T>,
    pub mode: Mode,
}

/// Tape handles of every parameter, parallel to [`EffLocModel::params`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Batch statistics observed by one normalization layer in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Per-forward mutable state: dropout randomness and pending running-moment
/// updates.
#[derive(Clone, Debug)]
pub struct ForwardState<T> {
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T> ForwardState<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }
}

fn truncated_normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::lit(z * INIT_STD);
        }
    })
}

struct Init<'a, T> {
    params: ParamStore<T>,
    buffers: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<()> {
        let t = truncated_normal(shape, self.rng);
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: String, n: usize) -> Result<()> {
        self.params.insert(name, Tensor::zeros(&[n]))
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.weight(format!("{p}.weight"), &[cout, cin, k, k])
    }

    fn depthwise(&mut self, p: &str, c: usize, k: usize) -> Result<()> {
        self.weight(format!("{p}.weight"), &[c, 1, k, k])
    }

    fn pointwise(&mut self, p: &str, cin: usize, cout: usize) -> Result<()> {
        self.weight(format!("{p}.weight"), &[cout, cin, 1, 1])?;
        self.zeros(format!("{p}.bias"), cout)
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) -> Result<()> {
        self.weight(format!("{p}.weight"), &[din, dout])?;
        self.zeros(format!("{p}.bias"), dout)
    }

    fn norm(&mut self, p: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{p}.weight"), Tensor::ones(&[c]))?;
        self.zeros(format!("{p}.bias"), c)
    }

    fn batch_norm(&mut self, p: &str, c: usize) -> Result<()> {
        self.norm(p, c)?;
        self.buffers.insert(format!("{p}.running_mean"), Tensor::zeros(&[c]))?;
        self.buffers.insert(format!("{p}.running_var"), Tensor::ones(&[c]))
    }
}

/// Prefix of the `k`-th token-interaction + FFN pair of a block, before
/// (`side = "pre"`) or after (`"post"`) the attention layer.
fn pair_prefix(block: &str, side: &str, k: usize) -> String {
    format!("{block}.{side}.{k}")
}

impl<T: Scalar> EffLocModel<T> {
    /// Builds and initializes a model. Parameters are created in forward order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            rng: &mut rng,
        };
        let cfg = &config;

        let mut cin = 3;
        for (i, c) in cfg.stem_channels().into_iter().enumerate() {
            init.conv(&format!("stem.{i}.conv"), cin, c, 3)?;
            init.batch_norm(&format!("stem.{i}.bn"), c)?;
            cin = c;
        }
        for s in 0..3 {
            let c = cfg.widths[s];
            if s > 0 {
                init.conv(&format!("stages.{s}.down.conv"), cfg.widths[s - 1], c, 3)?;
                init.batch_norm(&format!("stages.{s}.down.bn"), c)?;
            }
            let (cs, v, qk) = (cfg.head_split(s), cfg.v_dim(s), cfg.qk_dim[s]);
            for b in 0..cfg.depths[s] {
                let block = format!("stages.{s}.blocks.{b}");
                for side in ["pre", "post"] {
                    if side == "post" {
                        init.norm(&format!("{block}.attn.norm"), c)?;
                        for j in 0..cfg.heads[s] {
                            let h = format!("{block}.attn.heads.{j}");
                            init.linear(&format!("{h}.q"), cs, qk)?;
                            init.weight(format!("{h}.k.weight"), &[cs, qk])?;
                            init.linear(&format!("{h}.v"), cs, v)?;
                        }
                        init.linear(&format!("{block}.attn.proj"), v * cfg.heads[s], c)?;
                    }
                    for k in 0..cfg.ffn_count {
                        let p = pair_prefix(&block, side, k);
                        init.depthwise(&format!("{p}.dw.conv"), c, cfg.dw_kernel)?;
                        init.batch_norm(&format!("{p}.dw.bn"), c)?;
                        init.batch_norm(&format!("{p}.ffn.bn"), c)?;
                        init.pointwise(&format!("{p}.ffn.fc1"), c, c * cfg.ffn_expansion)?;
                        init.pointwise(&format!("{p}.ffn.fc2"), c * cfg.ffn_expansion, c)?;
                    }
                }
            }
        }
        let mut din = cfg.widths[2];
        for (i, &h) in cfg.regressor_hidden.iter().enumerate() {
            init.linear(&format!("head.fc{i}"), din, h)?;
            din = h;
        }
        init.linear("head.out", din, 6)?;

        let (params, buffers) = (init.params, init.buffers);
        Ok(Self {
            config,
            params,
            buffers,
            mode: Mode::Train,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of all bound parameters after a backward pass (zeros where
    /// none reached).
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        bound
            .vars
            .iter()
            .zip(self.params.iter())
            .map(|(v, (_, t))| match tape.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.numel()],
            })
            .collect()
    }

    /// Forward pass on images `[B, 3, R, R]`, giving `[B, 6]`: position then
    /// log-quaternion.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
        state: &mut ForwardState<T>,
    ) -> Result<Var> {
        let r = self.config.input_resolution;
        let s = tape.shape(images);
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::dim(format!(
                "model '{}' expects images [B,3,{r},{r}], got {s:?}",
                self.config.name
            )));
        }
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract("bound variables do not match the model".into()));
        }
        let mut f = Fwd {
            m: self,
            tape,
            vars: &bound.vars,
            state,
        };
        f.run(images)
    }

    /// Patch embedding only: `[B, 3, R, R]` to `[B, D₁, R/f, R/f]`.
    pub fn forward_embed(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
        state: &mut ForwardState<T>,
    ) -> Result<Var> {
        if self.config.input_resolution % self.config.embed_downsample_factor != 0 {
            return Err(Error::Config("resolution not divisible by the embedding factor".into()));
        }
        Fwd {
            m: self,
            tape,
            vars: &bound.vars,
            state,
        }
        .embed(images)
    }

    /// A single sandwich block of stage `s`; shape preserving.
    pub fn forward_block(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        stage: usize,
        block: usize,
        state: &mut ForwardState<T>,
    ) -> Result<Var> {
        Fwd {
            m: self,
            tape,
            vars: &bound.vars,
            state,
        }
        .block(x, stage, block)
    }

    /// Eval-style prediction on a batch without recording gradients for the
    /// parameters. Uses the model's current mode.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mut st = ForwardState::new(0);
        let y = self.forward(&mut tape, &bound, x, &mut st)?;
        Ok(tape.value(y).clone())
    }

    /// Folds batch statistics from a training forward into the running moments.
    pub fn commit_bn(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            let unbias = if u.count > 1 {
                T::lit(u.count as f64 / (u.count - 1) as f64)
            } else {
                T::one()
            };
            let mean = self
                .buffers
                .get_mut(&format!("{}.running_mean", u.prefix))
                .ok_or_else(|| Error::Contract(format!("no running moments for '{}'", u.prefix)))?;
            for (r, &b) in mean.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            let var = self
                .buffers
                .get_mut(&format!("{}.running_var", u.prefix))
                .ok_or_else(|| Error::Contract(format!("no running moments for '{}'", u.prefix)))?;
            for (r, &b) in var.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
        Ok(())
    }
}

struct Fwd<'a, T> {
    m: &'a EffLocModel<T>,
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    state: &'a mut ForwardState<T>,
}

impl<T: Scalar> Fwd<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.m
            .params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let eps = T::lit(NORM_EPS);
        let y = match self.m.mode {
            Mode::Train => {
                let (mean, var) = self.tape.channel_moments(x);
                let s = self.tape.shape(x);
                let count = s[0] * s[2..].iter().product::<usize>();
                let y = self.tape.channel_normalize(x, &mean, &var, eps, true)?;
                self.state.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                    count,
                });
                y
            }
            Mode::Eval => {
                let mean = self.m.buffers.require(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = self.m.buffers.require(&format!("{prefix}.running_var"))?.data().to_vec();
                self.tape.channel_normalize(x, &mean, &var, eps, false)?
            }
        };
        let (g, b) = (self.p(&format!("{prefix}.weight"))?, self.p(&format!("{prefix}.bias"))?);
        self.tape.channel_affine(y, g, b, 1)
    }

    fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.conv.weight"))?;
        let y = self.tape.conv2d(x, w, stride, 1)?;
        self.batch_norm(y, &format!("{prefix}.bn"))
    }

    fn pointwise(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.conv2d(x, w, 1, 0)?;
        self.tape.bias_add(y, b, 1)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        linear(self.tape, x, w, b)
    }

    /// Depthwise token interaction followed by the FFN, each residual.
    fn pair(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.dw.conv.weight"))?;
        let pad = self.m.config.dw_kernel / 2;
        let y = self.tape.depthwise_conv2d(x, w, 1, pad)?;
        let y = self.batch_norm(y, &format!("{prefix}.dw.bn"))?;
        let x = self.tape.add(x, y)?;

        let y = self.batch_norm(x, &format!("{prefix}.ffn.bn"))?;
        let y = self.pointwise(y, &format!("{prefix}.ffn.fc1"))?;
        let y = self.tape.gelu(y)?;
        let y = self.pointwise(y, &format!("{prefix}.ffn.fc2"))?;
        self.tape.add(x, y)
    }

    fn attention(&mut self, x: Var, prefix: &str, heads: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = self.tape.reshape(x, &[b, c, h * w])?;
        let t = self.tape.permute(t, &[0, 2, 1])?;
        let g = self.p(&format!("{prefix}.norm.weight"))?;
        let beta = self.p(&format!("{prefix}.norm.bias"))?;
        let t = self.tape.layer_norm(t, g, beta, T::lit(NORM_EPS))?;
        let mut hv = Vec::with_capacity(heads);
        for j in 0..heads {
            let hp = format!("{prefix}.heads.{j}");
            hv.push(HeadVars {
                q_w: self.p(&format!("{hp}.q.weight"))?,
                q_b: self.p(&format!("{hp}.q.bias"))?,
                k_w: self.p(&format!("{hp}.k.weight"))?,
                v_w: self.p(&format!("{hp}.v.weight"))?,
                v_b: self.p(&format!("{hp}.v.bias"))?,
            });
        }
        let av = AttentionVars {
            heads: hv,
            proj_w: self.p(&format!("{prefix}.proj.weight"))?,
            proj_b: self.p(&format!("{prefix}.proj.bias"))?,
        };
        let y = sga_attention(self.tape, t, &av, self.m.config.literal_outer_softmax, T::zero())?;
        let y = self.tape.permute(y, &[0, 2, 1])?;
        let y = self.tape.reshape(y, &[b, c, h, w])?;
        self.tape.add(x, y)
    }

    fn embed(&mut self, images: Var) -> Result<Var> {
        let n_stem = self.m.config.stem_depth();
        let mut x = images;
        for i in 0..n_stem {
            x = self.conv_bn(x, &format!("stem.{i}"), 2)?;
            if i + 1 < n_stem {
                x = self.tape.gelu(x)?;
            }
        }
        Ok(x)
    }

    fn block(&mut self, mut x: Var, s: usize, b: usize) -> Result<Var> {
        let (n, heads) = (self.m.config.ffn_count, self.m.config.heads[s]);
        let block = format!("stages.{s}.blocks.{b}");
        for k in 0..n {
            x = self.pair(x, &pair_prefix(&block, "pre", k))?;
        }
        x = self.attention(x, &format!("{block}.attn"), heads)?;
        for k in 0..n {
            x = self.pair(x, &pair_prefix(&block, "post", k))?;
        }
        Ok(x)
    }

    fn run(&mut self, images: Var) -> Result<Var> {
        let mut x = self.embed(images)?;
        let cfg = &self.m.config;
        for s in 0..3 {
            if s > 0 {
                x = self.conv_bn(x, &format!("stages.{s}.down"), 2)?;
            }
            for b in 0..cfg.depths[s] {
                x = self.block(x, s, b)?;
            }
        }
        let mut y = self.tape.global_avg_pool(x)?;
        let training = self.m.mode == Mode::Train;
        let p = T::lit(cfg.dropout_p);
        for i in 0..cfg.regressor_hidden.len() {
            y = self.linear(y, &format!("head.fc{i}"))?;
            y = self.tape.gelu(y)?;
            y = self.tape.dropout(y, p, training, &mut self.state.rng)?;
        }
        self.linear(y, "head.out")
    }
}
