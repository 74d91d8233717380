//! Compact convolution–attention classifier.
//!
//! ```text
//! x [B, C, T]
//!   -> temporal conv (per electrode)  -> Split-BN
//!   -> spatial conv (all electrodes)  -> Split-BN -> GELU
//!   -> average pooling -> dropout -> linear token projection
//!   -> + sinusoidal positions
//!   -> L × pre-norm encoder block (multi-head self-attention, GELU FFN)
//!   -> mean over tokens -> linear head -> logits [B, n_classes]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::splitbn::SplitBatchNorm;
use crate::Domain;

/// How the pooled front-end features become attention tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenLayout {
    /// One token per pooled time step.
    PerTimeStep,
    /// Pooled features averaged into a single token before attention.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    /// Linear → GELU → dropout → linear, with the given hidden width.
    TwoLayer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of each attention head's query/key/value projection.
    pub head_dim: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub temporal_kernel: usize,
    pub n_temporal_filters: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub n_classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    pub positional_encoding: bool,
    pub token_layout: TokenLayout,
    pub head: HeadKind,
    /// One BN buffer set for both domains.
    pub shared_bn: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_channels: 5,
            n_samples: 141,
            d_model: 40,
            n_heads: 10,
            head_dim: 40,
            n_layers: 3,
            ffn_mult: 4,
            dropout: 0.1,
            temporal_kernel: 25,
            n_temporal_filters: 40,
            pool_window: 75,
            pool_stride: 15,
            n_classes: 2,
            bn_momentum: crate::splitbn::DEFAULT_MOMENTUM,
            bn_eps: crate::splitbn::DEFAULT_EPS,
            ln_eps: 1e-5,
            positional_encoding: true,
            token_layout: TokenLayout::PerTimeStep,
            head: HeadKind::Linear,
            shared_bn: false,
        }
    }
}

impl BackboneConfig {
    /// Length after the valid temporal convolution.
    pub fn conv_len(&self) -> Option<usize> {
        self.n_samples.checked_sub(self.temporal_kernel).map(|d| d + 1)
    }

    /// Pooled time steps fed to the encoder (before any single-token collapse).
    pub fn pooled_len(&self) -> Option<usize> {
        let conv = self.conv_len()?;
        if self.pool_stride == 0 {
            return None;
        }
        conv.checked_sub(self.pool_window).map(|d| d / self.pool_stride + 1)
    }

    pub fn token_count(&self) -> Option<usize> {
        match self.token_layout {
            TokenLayout::PerTimeStep => self.pooled_len(),
            TokenLayout::Single => self.pooled_len().map(|_| 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim == 0 || self.n_channels == 0 || self.n_classes < 2 || self.ffn_mult == 0 {
            return fail("head_dim, n_channels, ffn_mult must be positive and n_classes >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.pool_window == 0 || self.temporal_kernel == 0 {
            return fail("pool_window and temporal_kernel must be positive".into());
        }
        match self.pooled_len() {
            Some(t) if t >= 1 => Ok(()),
            _ => fail(format!(
                "no tokens left: n_samples {} -> conv length {:?} with kernel {}, pool window {} stride {}",
                self.n_samples,
                self.conv_len(),
                self.temporal_kernel,
                self.pool_window,
                self.pool_stride
            )),
        }
    }

    /// `key = value` lines, parsed back by [`BackboneConfig::from_manifest`].
    pub fn manifest(&self) -> String {
        let head = match self.head {
            HeadKind::Linear => "linear".to_string(),
            HeadKind::TwoLayer(h) => format!("two_layer:{h}"),
        };
        let layout = match self.token_layout {
            TokenLayout::PerTimeStep => "per_time_step",
            TokenLayout::Single => "single",
        };
        format!(
            "n_channels = {}\nn_samples = {}\nd_model = {}\nn_heads = {}\nhead_dim = {}\nn_layers = {}\n\
             ffn_mult = {}\ndropout = {:?}\ntemporal_kernel = {}\nn_temporal_filters = {}\npool_window = {}\n\
             pool_stride = {}\nn_classes = {}\nbn_momentum = {:?}\nbn_eps = {:?}\nln_eps = {:?}\n\
             positional_encoding = {}\ntoken_layout = {}\nhead = {}\nshared_bn = {}\n",
            self.n_channels,
            self.n_samples,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.n_layers,
            self.ffn_mult,
            self.dropout,
            self.temporal_kernel,
            self.n_temporal_filters,
            self.pool_window,
            self.pool_stride,
            self.n_classes,
            self.bn_momentum,
            self.bn_eps,
            self.ln_eps,
            self.positional_encoding,
            layout,
            head,
            self.shared_bn
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line without '=': {line}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "n_channels" => self.n_channels = num(key, value)?,
            "n_samples" => self.n_samples = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "temporal_kernel" => self.temporal_kernel = num(key, value)?,
            "n_temporal_filters" => self.n_temporal_filters = num(key, value)?,
            "pool_window" => self.pool_window = num(key, value)?,
            "pool_stride" => self.pool_stride = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "bn_eps" => self.bn_eps = num(key, value)?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "positional_encoding" => self.positional_encoding = num(key, value)?,
            "shared_bn" => self.shared_bn = num(key, value)?,
            "token_layout" => {
                self.token_layout = match value {
                    "per_time_step" => TokenLayout::PerTimeStep,
                    "single" => TokenLayout::Single,
                    _ => return Err(Error::Config(format!("token_layout: unknown '{value}'"))),
                }
            }
            "head" => {
                self.head = match value.split_once(':') {
                    None if value == "linear" => HeadKind::Linear,
                    Some(("two_layer", h)) => HeadKind::TwoLayer(num(key, h)?),
                    _ => return Err(Error::Config(format!("head: unknown '{value}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown backbone key '{key}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct EncoderIdx {
    ln1: Dense,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    ln2: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    temporal: Dense,
    spatial: Dense,
    proj: Dense,
    layers: Vec<EncoderIdx>,
    head: Vec<Dense>,
}

/// Trainable leaves of one graph, in [`Model::named_parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Leaves created elsewhere (e.g. by a gradient checker), in
    /// [`Model::named_parameters`] order.
    pub fn from_vars(model: &Model, vars: Vec<Var>) -> Result<Self> {
        let expected = model.named_parameters().len();
        if vars.len() != expected {
            return Err(Error::invalid("bound_params", format!("{} leaves, model has {expected}", vars.len())));
        }
        Ok(Self { vars })
    }
}

const BN_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    pub bn_temporal: SplitBatchNorm,
    pub bn_spatial: SplitBatchNorm,
    names: Vec<String>,
    weights: Vec<Tensor>,
}

/// Sinusoidal position table `[tokens, d]`.
pub fn positional_encoding(tokens: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; tokens * d];
    for pos in 0..tokens {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![tokens, d], data).expect("table shape")
}

impl Model {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut weights = Vec::new();
        let mut add = |name: String, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            names.push(name);
            weights.push(Tensor::new(shape.to_vec(), data).expect("init shape"));
        };
        let c = &config;
        let f = c.n_temporal_filters;
        let d = c.d_model;
        let inner = c.n_heads * c.head_dim;
        let hidden = c.ffn_mult * d;

        add("temporal.weight".into(), &[f, 1, c.temporal_kernel], c.temporal_kernel, &mut rng);
        add("temporal.bias".into(), &[f], c.temporal_kernel, &mut rng);
        add("spatial.weight".into(), &[f, c.n_channels * f, 1], c.n_channels * f, &mut rng);
        add("spatial.bias".into(), &[f], c.n_channels * f, &mut rng);
        add("proj.weight".into(), &[f, d], f, &mut rng);
        add("proj.bias".into(), &[d], f, &mut rng);
        for l in 0..c.n_layers {
            for (name, shape, fan) in [
                ("q", [d, inner], d),
                ("k", [d, inner], d),
                ("v", [d, inner], d),
                ("out", [inner, d], inner),
                ("ff1", [d, hidden], d),
                ("ff2", [hidden, d], hidden),
            ] {
                add(format!("layer{l}.{name}.weight"), &shape, fan, &mut rng);
                add(format!("layer{l}.{name}.bias"), &[shape[1]], fan, &mut rng);
            }
        }
        match c.head {
            HeadKind::Linear => {
                add("head.weight".into(), &[d, c.n_classes], d, &mut rng);
                add("head.bias".into(), &[c.n_classes], d, &mut rng);
            }
            HeadKind::TwoLayer(h) => {
                add("head.hidden.weight".into(), &[d, h], d, &mut rng);
                add("head.hidden.bias".into(), &[h], d, &mut rng);
                add("head.weight".into(), &[h, c.n_classes], h, &mut rng);
                add("head.bias".into(), &[c.n_classes], h, &mut rng);
            }
        }
        // LayerNorm affine parameters: gamma = 1, beta = 0
        for l in 0..c.n_layers {
            for ln in ["ln1", "ln2"] {
                names.push(format!("layer{l}.{ln}.weight"));
                weights.push(Tensor::full(&[d], 1.0));
                names.push(format!("layer{l}.{ln}.bias"));
                weights.push(Tensor::zeros(&[d]));
            }
        }

        let bn = |features| {
            if c.shared_bn {
                SplitBatchNorm::new_shared(features, c.bn_momentum, c.bn_eps)
            } else {
                SplitBatchNorm::new(features, c.bn_momentum, c.bn_eps)
            }
        };
        Ok(Self {
            bn_temporal: bn(f),
            bn_spatial: bn(f),
            config,
            names,
            weights,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn layout(&self) -> Layout {
        let idx = |name: &str| {
            self.names
                .iter()
                .position(|n| n == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };
        let dense = |p: &str| Dense {
            w: idx(&format!("{p}.weight")),
            b: idx(&format!("{p}.bias")),
        };
        let layers = (0..self.config.n_layers)
            .map(|l| EncoderIdx {
                ln1: dense(&format!("layer{l}.ln1")),
                q: dense(&format!("layer{l}.q")),
                k: dense(&format!("layer{l}.k")),
                v: dense(&format!("layer{l}.v")),
                out: dense(&format!("layer{l}.out")),
                ln2: dense(&format!("layer{l}.ln2")),
                ff1: dense(&format!("layer{l}.ff1")),
                ff2: dense(&format!("layer{l}.ff2")),
            })
            .collect();
        let head = match self.config.head {
            HeadKind::Linear => vec![dense("head")],
            HeadKind::TwoLayer(_) => vec![dense("head.hidden"), dense("head")],
        };
        Layout {
            temporal: dense("temporal"),
            spatial: dense("spatial"),
            proj: dense("proj"),
            layers,
            head,
        }
    }

    /// Trainable parameters: the BN affine pairs first, then all other weights.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("bn_temporal.weight".to_string(), &self.bn_temporal.gamma),
            ("bn_temporal.bias".to_string(), &self.bn_temporal.beta),
            ("bn_spatial.weight".to_string(), &self.bn_spatial.gamma),
            ("bn_spatial.bias".to_string(), &self.bn_spatial.beta),
        ];
        out.extend(self.names.iter().cloned().zip(self.weights.iter()));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.bn_temporal.gamma,
            &mut self.bn_temporal.beta,
            &mut self.bn_spatial.gamma,
            &mut self.bn_spatial.beta,
        ];
        out.extend(self.weights.iter_mut());
        out
    }

    /// Replaces the trainable tensor called `name`; the shape must match.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match name {
            "bn_temporal.weight" => &mut self.bn_temporal.gamma,
            "bn_temporal.bias" => &mut self.bn_temporal.beta,
            "bn_spatial.weight" => &mut self.bn_spatial.gamma,
            "bn_spatial.bias" => &mut self.bn_spatial.beta,
            _ => {
                let i = self
                    .names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::invalid("set_parameter", format!("no parameter named {name}")))?;
                &mut self.weights[i]
            }
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Selects the BN buffers read (and, in training, updated) by later forwards.
    pub fn use_domain(&mut self, d: Domain) {
        self.bn_temporal.use_domain(d);
        self.bn_spatial.use_domain(d);
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .named_parameters()
                .into_iter()
                .map(|(_, t)| g.param(t.clone()))
                .collect(),
        }
    }

    fn dense(&self, g: &mut Graph, p: &BoundParams, d: Dense, x: Var) -> Result<Var> {
        let w = p.vars[BN_PARAMS + d.w];
        let b = p.vars[BN_PARAMS + d.b];
        let y = g.matmul(x, w)?;
        let last = g.shape(y).len() - 1;
        g.add_broadcast(y, b, last)
    }

    /// Logits `[B, n_classes]` for a batch `x` of shape `[B, n_channels, n_samples]`.
    ///
    /// The caller selects the BN domain with [`Model::use_domain`] beforehand.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = self.config.clone();
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != c.n_channels || shape[2] != c.n_samples {
            return Err(Error::shape("forward", &shape, &[0, c.n_channels, c.n_samples]));
        }
        let batch = shape[0];
        let lay = self.layout();
        let f = c.n_temporal_filters;
        let d = c.d_model;
        let pv = |i: usize| p.vars[BN_PARAMS + i];

        // temporal convolution, one electrode at a time
        let h = g.reshape(x, &[batch * c.n_channels, 1, c.n_samples])?;
        let h = g.conv1d_valid(h, pv(lay.temporal.w), 1)?;
        let h = g.add_broadcast(h, pv(lay.temporal.b), 1)?;
        let h = match mode {
            Mode::Train => self.bn_temporal.forward_train(g, h, p.vars[0], p.vars[1])?,
            Mode::Eval => self.bn_temporal.forward_eval(g, h, p.vars[0], p.vars[1])?,
        };
        let conv_len = g.shape(h)[2];
        // spatial convolution over (electrode, filter) pairs
        let h = g.reshape(h, &[batch, c.n_channels * f, conv_len])?;
        let h = g.conv1d_valid(h, pv(lay.spatial.w), 1)?;
        let h = g.add_broadcast(h, pv(lay.spatial.b), 1)?;
        let h = match mode {
            Mode::Train => self.bn_spatial.forward_train(g, h, p.vars[2], p.vars[3])?,
            Mode::Eval => self.bn_spatial.forward_eval(g, h, p.vars[2], p.vars[3])?,
        };
        let h = g.gelu_exact(h);
        let h = g.avg_pool1d(h, c.pool_window, c.pool_stride)?;
        let h = g.dropout(h, c.dropout, rng, mode)?;
        let mut tokens = g.transpose(h, 1, 2)?; // [B, T, F]
        if c.token_layout == TokenLayout::Single {
            let pooled = g.mean_axis(tokens, 1)?;
            tokens = g.reshape(pooled, &[batch, 1, f])?;
        }
        let n_tok = g.shape(tokens)[1];
        let mut z = self.dense(g, p, lay.proj, tokens)?; // [B, T, D]
        if c.positional_encoding {
            let pe = positional_encoding(n_tok, d);
            let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.data().iter().copied()).collect();
            let pe = g.constant(Tensor::new(vec![batch, n_tok, d], tiled)?);
            z = g.add(z, pe)?;
        }

        for layer in &lay.layers {
            z = self.encoder_block(g, p, layer, z, batch, n_tok, mode, rng)?;
        }

        let pooled = g.mean_axis(z, 1)?; // [B, D]
        let mut out = pooled;
        for (i, dense) in lay.head.iter().enumerate() {
            out = self.dense(g, p, *dense, out)?;
            if i + 1 < lay.head.len() {
                out = g.gelu_exact(out);
                out = g.dropout(out, c.dropout, rng, mode)?;
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn encoder_block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        l: &EncoderIdx,
        z: Var,
        batch: usize,
        n_tok: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let (heads, hd) = (c.n_heads, c.head_dim);
        let pv = |i: usize| p.vars[BN_PARAMS + i];

        let a = g.layer_norm(z, pv(l.ln1.w), pv(l.ln1.b), c.ln_eps)?;
        let split_heads = |g: &mut Graph, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[batch, n_tok, heads, hd])?;
            let t = g.transpose(t, 1, 2)?;
            g.reshape(t, &[batch * heads, n_tok, hd])
        };
        let q = self.dense(g, p, l.q, a)?;
        let q = split_heads(g, q)?;
        let k = self.dense(g, p, l.k, a)?;
        let k = split_heads(g, k)?;
        let v = self.dense(g, p, l.v, a)?;
        let v = split_heads(g, v)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = g.softmax_lastdim(scores)?;
        let attn = g.dropout(attn, c.dropout, rng, mode)?;
        let ctx = g.matmul(attn, v)?; // [B*H, T, hd]
        let ctx = g.reshape(ctx, &[batch, heads, n_tok, hd])?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[batch, n_tok, heads * hd])?;
        let o = self.dense(g, p, l.out, ctx)?;
        let o = g.dropout(o, c.dropout, rng, mode)?;
        let z = g.add(z, o)?;

        let b = g.layer_norm(z, pv(l.ln2.w), pv(l.ln2.b), c.ln_eps)?;
        let b = self.dense(g, p, l.ff1, b)?;
        let b = g.gelu_exact(b);
        let b = g.dropout(b, c.dropout, rng, mode)?;
        let b = self.dense(g, p, l.ff2, b)?;
        let b = g.dropout(b, c.dropout, rng, mode)?;
        g.add(z, b)
    }

    /// Eval-mode logits for a batch held in a plain tensor.
    pub fn predict(&mut self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xv = g.constant(x.clone());
        self.use_domain(domain);
        // eval mode never draws random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &p, xv, Mode::Eval, &mut rng)?;
        Ok(g.value(out).clone())
    }
}
