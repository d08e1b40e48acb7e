//! The paired encoder/decoder network.
//!
//! Layout per side `s ∈ {q, a}`:
//! - `enc_s.gru.*`: GRU over token embeddings
//! - `enc_s.attn.w1 [d_a, d_h]`, `enc_s.attn.w2 [r, d_a]`: multi-hop attention
//! - `enc_s.head.*`: `r·d_h → d_z` mean and log-variance heads
//! - `dec_s.*`: decoder that *generates* side `s` text (VAE variants only)
//!
//! One embedding table is shared by all four networks. Sequences inside the
//! graph are time-major: row `t·B + b` is step `t` of sequence `b`.

use crate::data::batch::TokenBatch;
use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Var};

use super::config::{ModelConfig, Variant};
use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Question,
    Answer,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Question => "q",
            Side::Answer => "a",
        }
    }

    fn idx(self) -> usize {
        match self {
            Side::Question => 0,
            Side::Answer => 1,
        }
    }
}

enum Init {
    Uniform(usize),
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn gru_specs(prefix: &str, d_in: usize, d_h: usize, out: &mut Vec<ParamSpec>) {
    for gate in ["z", "r", "h"] {
        out.push(ParamSpec {
            name: format!("{prefix}.w_{gate}"),
            shape: vec![d_h, d_in],
            init: Init::Uniform(d_in),
        });
        out.push(ParamSpec {
            name: format!("{prefix}.u_{gate}"),
            shape: vec![d_h, d_h],
            init: Init::Uniform(d_h),
        });
        out.push(ParamSpec {
            name: format!("{prefix}.b_{gate}"),
            shape: vec![d_h],
            init: Init::Zeros,
        });
    }
}

fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = vec![ParamSpec {
        name: "embedding".into(),
        shape: vec![c.vocab_size, c.embed_dim],
        init: Init::Uniform(c.embed_dim),
    }];
    let pooled = c.attention_hops * c.hidden_dim;
    for side in [Side::Question, Side::Answer] {
        let p = format!("enc_{}", side.tag());
        gru_specs(&format!("{p}.gru"), c.embed_dim, c.hidden_dim, &mut s);
        s.push(ParamSpec {
            name: format!("{p}.attn.w1"),
            shape: vec![c.attention_dim, c.hidden_dim],
            init: Init::Uniform(c.hidden_dim),
        });
        s.push(ParamSpec {
            name: format!("{p}.attn.w2"),
            shape: vec![c.attention_hops, c.attention_dim],
            init: Init::Uniform(c.attention_dim),
        });
        let mut heads = vec!["mu"];
        if c.variant.has_decoders() {
            heads.push("logvar");
        }
        for h in heads {
            s.push(ParamSpec {
                name: format!("{p}.head.w_{h}"),
                shape: vec![c.latent_dim, pooled],
                init: Init::Uniform(pooled),
            });
            s.push(ParamSpec {
                name: format!("{p}.head.b_{h}"),
                shape: vec![c.latent_dim],
                init: Init::Zeros,
            });
        }
    }
    if c.variant.has_decoders() {
        for side in [Side::Question, Side::Answer] {
            let p = format!("dec_{}", side.tag());
            s.push(ParamSpec {
                name: format!("{p}.init.w"),
                shape: vec![c.hidden_dim, c.latent_dim],
                init: Init::Uniform(c.latent_dim),
            });
            s.push(ParamSpec {
                name: format!("{p}.init.b"),
                shape: vec![c.hidden_dim],
                init: Init::Zeros,
            });
            gru_specs(&format!("{p}.gru"), c.embed_dim + c.latent_dim, c.hidden_dim, &mut s);
            s.push(ParamSpec {
                name: format!("{p}.out.w"),
                shape: vec![c.vocab_size, c.hidden_dim],
                init: Init::Uniform(c.hidden_dim),
            });
            s.push(ParamSpec {
                name: format!("{p}.out.b"),
                shape: vec![c.vocab_size],
                init: Init::Zeros,
            });
        }
    }
    s
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w: [usize; 3],
    u: [usize; 3],
    b: [usize; 3],
}

#[derive(Clone, Copy, Debug)]
struct EncoderIds {
    gru: GruIds,
    w1: usize,
    w2: usize,
    w_mu: usize,
    b_mu: usize,
    logvar: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct DecoderIds {
    w_init: usize,
    b_init: usize,
    gru: GruIds,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    enc: [EncoderIds; 2],
    dec: Option<[DecoderIds; 2]>,
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> usize {
    store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn gru_ids<T: Real>(store: &ParamStore<T>, prefix: &str) -> GruIds {
    let id = |k: &str, g: &str| lookup(store, &format!("{prefix}.{k}_{g}"));
    GruIds {
        w: ["z", "r", "h"].map(|g| id("w", g)),
        u: ["z", "r", "h"].map(|g| id("u", g)),
        b: ["z", "r", "h"].map(|g| id("b", g)),
    }
}

impl Layout {
    fn resolve<T: Real>(c: &ModelConfig, store: &ParamStore<T>) -> Self {
        let enc = [Side::Question, Side::Answer].map(|side| {
            let p = format!("enc_{}", side.tag());
            EncoderIds {
                gru: gru_ids(store, &format!("{p}.gru")),
                w1: lookup(store, &format!("{p}.attn.w1")),
                w2: lookup(store, &format!("{p}.attn.w2")),
                w_mu: lookup(store, &format!("{p}.head.w_mu")),
                b_mu: lookup(store, &format!("{p}.head.b_mu")),
                logvar: c.variant.has_decoders().then(|| {
                    (
                        lookup(store, &format!("{p}.head.w_logvar")),
                        lookup(store, &format!("{p}.head.b_logvar")),
                    )
                }),
            }
        });
        let dec = c.variant.has_decoders().then(|| {
            [Side::Question, Side::Answer].map(|side| {
                let p = format!("dec_{}", side.tag());
                DecoderIds {
                    w_init: lookup(store, &format!("{p}.init.w")),
                    b_init: lookup(store, &format!("{p}.init.b")),
                    gru: gru_ids(store, &format!("{p}.gru")),
                    w_out: lookup(store, &format!("{p}.out.w")),
                    b_out: lookup(store, &format!("{p}.out.b")),
                }
            })
        });
        Layout {
            embedding: lookup(store, "embedding"),
            enc,
            dec,
        }
    }
}

/// Gaussian posterior `N(mu, diag(exp(log_var)))`. Dual encoders carry no variance.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_var: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub gaussian: LatentGaussian,
    /// `[B, r·d_h]` concatenated attention hops.
    pub pooled: Var,
    /// `[T, B, r]` attention weights over time.
    pub attention: Var,
}

/// GRU weights bound into a graph. `w_*: [d_h, d_in]`, `u_*: [d_h, d_h]`, `b_*: [d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// Gate update given precomputed input projections `x·W_gᵀ + b_g`.
fn gru_cell<T: Real>(g: &mut Graph<T>, xz: Var, xr: Var, xh: Var, h: Var, w: &GruVars) -> Result<Var> {
    let hz = g.linear(h, w.u_z, None)?;
    let z_pre = g.add(xz, hz)?;
    let z = g.sigmoid(z_pre);
    let hr = g.linear(h, w.u_r, None)?;
    let r_pre = g.add(xr, hr)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let hh = g.linear(rh, w.u_h, None)?;
    let cand_pre = g.add(xh, hh)?;
    let cand = g.tanh(cand_pre);
    // (1 − z)⊙h + z⊙h̃ written as h + z⊙(h̃ − h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// One GRU step: `x [B, d_in]`, `h_prev [B, d_h]` → `h [B, d_h]`.
pub fn gru_step<T: Real>(g: &mut Graph<T>, x: Var, h_prev: Var, w: &GruVars) -> Result<Var> {
    let xz = g.linear(x, w.w_z, Some(w.b_z))?;
    let xr = g.linear(x, w.w_r, Some(w.b_r))?;
    let xh = g.linear(x, w.w_h, Some(w.b_h))?;
    gru_cell(g, xz, xr, xh, h_prev, w)
}

/// Runs a GRU over time-major inputs `x_all [T·B, d_in]`; returns every hidden state.
pub fn gru_sequence<T: Real>(
    g: &mut Graph<T>,
    x_all: Var,
    h0: Var,
    steps: usize,
    w: &GruVars,
) -> Result<Vec<Var>> {
    let b = g.shape(h0)[0];
    let xz_all = g.linear(x_all, w.w_z, Some(w.b_z))?;
    let xr_all = g.linear(x_all, w.w_r, Some(w.b_r))?;
    let xh_all = g.linear(x_all, w.w_h, Some(w.b_h))?;
    let mut h = h0;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let xz = g.slice_rows(xz_all, t * b, b)?;
        let xr = g.slice_rows(xr_all, t * b, b)?;
        let xh = g.slice_rows(xh_all, t * b, b)?;
        h = gru_cell(g, xz, xr, xh, h, w)?;
        out.push(h);
    }
    Ok(out)
}

/// Cosine matching probabilities `clamp((1 + cos)/2, 1e-7, 1 − 1e-7)` for
/// every question row against every answer row.
pub fn match_probability<T: Real>(g: &mut Graph<T>, z_q: Var, z_a: Var) -> Result<Var> {
    let floor = T::from_f64_lossy(1e-8);
    let qn = g.l2_normalize_rows(z_q, floor)?;
    let an = g.l2_normalize_rows(z_a, floor)?;
    let cos = g.matmul_t(qn, false, an, true)?;
    let half = T::from_f64_lossy(0.5);
    let scaled = g.scale(cos, half);
    let p = g.add_scalar(scaled, half);
    let eps = T::from_f64_lossy(1e-7);
    Ok(g.clamp(p, eps, T::one() - eps))
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; parameter init streams derive from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        for spec in param_specs(&config) {
            match spec.init {
                Init::Uniform(fan_in) => params.insert_uniform(&spec.name, &spec.shape, fan_in, seed),
                Init::Zeros => params.insert_zeros(&spec.name, &spec.shape),
            };
        }
        let layout = Layout::resolve(&config, &params);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters, checking names, order and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        let layout = Layout::resolve(&config, &params);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn session(&self) -> Session<'_, T> {
        Session {
            graph: Graph::new(),
            model: self,
            bound: vec![None; self.params.len()],
        }
    }

    /// Session over an existing graph in which parameter `i` is already bound
    /// as `vars[i]`. Used to differentiate with respect to external leaves.
    pub fn session_with(&self, graph: Graph<T>, vars: &[Var]) -> Result<Session<'_, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "session_with",
                left: vec![self.params.len()],
                right: vec![vars.len()],
            });
        }
        Ok(Session {
            graph,
            model: self,
            bound: vars.iter().copied().map(Some).collect(),
        })
    }
}

/// One forward (and optionally backward) pass over a model.
pub struct Session<'m, T: Real> {
    pub graph: Graph<T>,
    model: &'m Model<T>,
    bound: Vec<Option<Var>>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.graph.param(id, self.model.params.get(id));
        self.bound[id] = Some(v);
        v
    }

    /// Gradients accumulated on bound parameters, keyed by parameter id.
    pub fn into_param_grads(self) -> Vec<(usize, Vec<T>)> {
        self.graph.param_grads().map(|(id, g)| (id, g.to_vec())).collect()
    }

    /// Binds a parameter by name.
    pub fn param_by_name(&mut self, name: &str) -> Option<Var> {
        self.model.params.id(name).map(|id| self.param(id))
    }

    fn gru(&mut self, ids: GruIds) -> GruVars {
        let [w_z, w_r, w_h] = ids.w.map(|i| self.param(i));
        let [u_z, u_r, u_h] = ids.u.map(|i| self.param(i));
        let [b_z, b_r, b_h] = ids.b.map(|i| self.param(i));
        GruVars {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    fn decoder(&self) -> Result<[DecoderIds; 2]> {
        self.model
            .layout
            .dec
            .ok_or_else(|| Error::Config("dual_encoders models have no decoders".into()))
    }

    /// Embeds, runs the side's GRU, pools with masked multi-hop attention and
    /// projects to the latent Gaussian.
    pub fn encode(&mut self, tokens: &TokenBatch, side: Side) -> Result<Encoded> {
        let (b, t_len) = (tokens.batch, tokens.len);
        if b == 0 || t_len == 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![b, t_len],
                right: vec![],
            });
        }
        if let Some(row) = (0..b).find(|&r| !tokens.mask[r * t_len]) {
            return Err(Error::AllPaddingRow(row));
        }
        let c = &self.model.config;
        let (d_h, hops) = (c.hidden_dim, c.attention_hops);
        let ids = self.model.layout.enc[side.idx()];
        let table = self.param(self.model.layout.embedding);
        let x_all = self.graph.gather(table, &tokens.time_major_ids())?;
        let h0 = self.graph.constant(&[b, d_h], vec![T::zero(); b * d_h]);
        let gru = self.gru(ids.gru);
        let states = gru_sequence(&mut self.graph, x_all, h0, t_len, &gru)?;
        let h_all = self.graph.concat_rows(&states)?;
        let w1 = self.param(ids.w1);
        let w2 = self.param(ids.w2);
        let g = &mut self.graph;
        let u_pre = g.linear(h_all, w1, None)?;
        let u = g.tanh(u_pre);
        let logits = g.linear(u, w2, None)?;
        let logits = g.reshape(logits, &[t_len, b, hops])?;
        let mask: Vec<bool> = tokens
            .time_major_mask()
            .into_iter()
            .flat_map(|m| std::iter::repeat_n(m, hops))
            .collect();
        let attention = g.softmax(logits, 0, Some(&mask))?;
        let values = g.reshape(h_all, &[t_len, b, d_h])?;
        let pooled = g.pool_over_time(attention, values)?;

        let (w_mu, b_mu) = (self.param(ids.w_mu), self.param(ids.b_mu));
        let mu = self.graph.linear(pooled, w_mu, Some(b_mu))?;
        let log_var = match ids.logvar {
            Some((w, bias)) => {
                let (w, bias) = (self.param(w), self.param(bias));
                Some(self.graph.linear(pooled, w, Some(bias))?)
            }
            None => None,
        };
        Ok(Encoded {
            gaussian: LatentGaussian { mu, log_var },
            pooled,
            attention,
        })
    }

    /// Train mode: `z = mu + exp(log_var/2)⊙noise`. Eval mode, or a Gaussian
    /// without variance: `z = mu`.
    pub fn reparameterize(&mut self, gaussian: &LatentGaussian, noise: Option<&[T]>, train: bool) -> Result<Var> {
        let (Some(log_var), Some(noise), true) = (gaussian.log_var, noise, train) else {
            return Ok(gaussian.mu);
        };
        let shape = self.graph.shape(gaussian.mu).to_vec();
        if noise.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reparameterize",
                left: shape,
                right: vec![noise.len()],
            });
        }
        let g = &mut self.graph;
        let eps = g.constant(&shape, noise.to_vec());
        let half = g.scale(log_var, T::from_f64_lossy(0.5));
        let sigma = g.exp(half);
        let spread = g.mul(sigma, eps)?;
        g.add(gaussian.mu, spread)
    }

    /// Teacher-forced decoding of `target` (the text on `side`) from `z`.
    /// Returns time-major logits `[T·B, V]`.
    pub fn decode(&mut self, z: Var, target: &TokenBatch, side: Side) -> Result<Var> {
        let ids = self.decoder()?[side.idx()];
        let (b, t_len) = (target.batch, target.len);
        if self.graph.shape(z)[0] != b {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: self.graph.shape(z).to_vec(),
                right: vec![b, t_len],
            });
        }
        let table = self.param(self.model.layout.embedding);
        let (w_init, b_init) = (self.param(ids.w_init), self.param(ids.b_init));
        let gru = self.gru(ids.gru);
        let (w_out, b_out) = (self.param(ids.w_out), self.param(ids.b_out));
        let g = &mut self.graph;
        let emb = g.gather(table, &target.decoder_inputs_time_major())?;
        let z_rep = g.concat_rows(&vec![z; t_len])?;
        let x_all = g.concat_cols(&[emb, z_rep])?;
        let h0_pre = g.linear(z, w_init, Some(b_init))?;
        let h0 = g.tanh(h0_pre);
        let states = gru_sequence(g, x_all, h0, t_len, &gru)?;
        let h_all = g.concat_rows(&states)?;
        g.linear(h_all, w_out, Some(b_out))
    }

    /// Greedy decoding from `z [B, d_z]` with the decoder for `side`; each
    /// sequence stops at EOS (included) or after `max_len` tokens.
    pub fn greedy_decode(&mut self, z: Var, side: Side, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let ids = self.decoder()?[side.idx()];
        let b = self.graph.shape(z)[0];
        let table = self.param(self.model.layout.embedding);
        let (w_init, b_init) = (self.param(ids.w_init), self.param(ids.b_init));
        let gru = self.gru(ids.gru);
        let (w_out, b_out) = (self.param(ids.w_out), self.param(ids.b_out));
        let v = self.model.config.vocab_size;
        let g = &mut self.graph;
        let h0_pre = g.linear(z, w_init, Some(b_init))?;
        let mut h = g.tanh(h0_pre);
        let mut prev = vec![BOS; b];
        let mut out = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            let emb = g.gather(table, &prev)?;
            let x = g.concat_cols(&[emb, z])?;
            h = gru_step(g, x, h, &gru)?;
            let logits = g.linear(h, w_out, Some(b_out))?;
            for (r, row) in g.value(logits).chunks(v).enumerate() {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                    .0;
                prev[r] = best;
                if !done[r] {
                    out[r].push(best);
                    done[r] = best == EOS;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn match_probability(&mut self, z_q: Var, z_a: Var) -> Result<Var> {
        match_probability(&mut self.graph, z_q, z_a)
    }

    /// Which decoder reconstructs which text under the configured variant:
    /// returns the latent side feeding the decoder that generates `target`.
    pub fn source_for(&self, target: Side) -> Side {
        match (self.model.config.variant, target) {
            (Variant::CrossVae, Side::Question) => Side::Answer,
            (Variant::CrossVae, Side::Answer) => Side::Question,
            (_, s) => s,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};

    use super::*;
    

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            hidden_dim: 8,
            latent_dim: 4,
            attention_hops: 2,
            attention_dim: 6,
            variant,
            max_len: 8,
        }
    }

    fn consts(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
        g.constant(shape, data.to_vec())
    }

    fn gru_vars(g: &mut Graph<f64>, w: &[Vec<f64>; 9], d_in: usize, d_h: usize) -> GruVars {
        let shapes = [[d_h, d_in], [d_h, d_h], [d_h, 1]];
        let v: Vec<Var> = w
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = shapes[i % 3];
                if s[1] == 1 {
                    consts(g, &[d_h], d)
                } else {
                    consts(g, &s, d)
                }
            })
            .collect();
        GruVars {
            w_z: v[0],
            u_z: v[1],
            b_z: v[2],
            w_r: v[3],
            u_r: v[4],
            b_r: v[5],
            w_h: v[6],
            u_h: v[7],
            b_h: v[8],
        }
    }

    #[test]
    fn gru_with_zero_weights_halves_state() {
        let mut g = Graph::<f64>::new();
        let zeros = |n: usize| vec![0.0; n];
        let w = [zeros(6), zeros(4), zeros(2), zeros(6), zeros(4), zeros(2), zeros(6), zeros(4), zeros(2)];
        let vars = gru_vars(&mut g, &w, 3, 2);
        let x = consts(&mut g, &[1, 3], &[0.3, -2.0, 5.0]);
        let h = consts(&mut g, &[1, 2], &[0.8, -0.4]);
        let out = gru_step(&mut g, x, h, &vars).unwrap();
        assert_eq!(g.value(out), &[0.4, -0.2]);
        let h0 = consts(&mut g, &[1, 2], &[0.0, 0.0]);
        let out = gru_step(&mut g, x, h0, &vars).unwrap();
        assert_eq!(g.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn gru_matches_straight_line_formulas() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (b, d_in, d_h) = (2, 3, 3);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-1.0..1.0)).collect() };
        let w: [Vec<f64>; 9] = std::array::from_fn(|i| match i % 3 {
            0 => draw(d_h * d_in),
            1 => draw(d_h * d_h),
            _ => draw(d_h),
        });
        let x = draw(b * d_in);
        let h = draw(b * d_h);
        let mut g = Graph::<f64>::new();
        let vars = gru_vars(&mut g, &w, d_in, d_h);
        let xv = consts(&mut g, &[b, d_in], &x);
        let hv = consts(&mut g, &[b, d_h], &h);
        let got = gru_step(&mut g, xv, hv, &vars).unwrap();

        // Oracle: explicit loops over the four gate formulas.
        let mv = |m: &[f64], v: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            (0..rows).map(|i| (0..cols).map(|j| m[i * cols + j] * v[j]).sum()).collect()
        };
        for row in 0..b {
            let xr = &x[row * d_in..(row + 1) * d_in];
            let hr = &h[row * d_h..(row + 1) * d_h];
            let (wzx, uzh) = (mv(&w[0], xr, d_h, d_in), mv(&w[1], hr, d_h, d_h));
            let (wrx, urh) = (mv(&w[3], xr, d_h, d_in), mv(&w[4], hr, d_h, d_h));
            let z: Vec<f64> = (0..d_h).map(|i| sigmoid(wzx[i] + uzh[i] + w[2][i])).collect();
            let rg: Vec<f64> = (0..d_h).map(|i| sigmoid(wrx[i] + urh[i] + w[5][i])).collect();
            let rh: Vec<f64> = (0..d_h).map(|i| rg[i] * hr[i]).collect();
            let (whx, uhrh) = (mv(&w[6], xr, d_h, d_in), mv(&w[7], &rh, d_h, d_h));
            for i in 0..d_h {
                let cand = (whx[i] + uhrh[i] + w[8][i]).tanh();
                let expect = (1.0 - z[i]) * hr[i] + z[i] * cand;
                assert!((g.value(got)[row * d_h + i] - expect).abs() < 1e-12);
            }
        }
    }

    fn batch(rows: &[Vec<usize>]) -> TokenBatch {
        TokenBatch::from_sequences(rows)
    }

    #[test]
    fn single_step_attention_is_one() {
        let model = Model::<f64>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let mut s = model.session();
        let enc = s.encode(&batch(&[vec![2], vec![2]]), Side::Question).unwrap();
        assert!(s.graph.value(enc.attention).iter().all(|&a| a == 1.0));
    }

    #[test]
    fn identical_rows_encode_identically() {
        let model = Model::<f32>::new(tiny_config(Variant::CrossVae), 2).unwrap();
        let mut s = model.session();
        let enc = s.encode(&batch(&[vec![5, 6, 7, 2], vec![5, 6, 7, 2]]), Side::Answer).unwrap();
        let mu = s.graph.value(enc.gaussian.mu);
        assert_eq!(mu[..4], mu[4..]);
        let lv = s.graph.value(enc.gaussian.log_var.unwrap());
        assert_eq!(lv[..4], lv[4..]);
    }

    #[test]
    fn padding_positions_do_not_matter() {
        let model = Model::<f32>::new(tiny_config(Variant::DualVae), 3).unwrap();
        let short = vec![9, 4, 2];
        let long = vec![5, 6, 7, 8, 10, 2];
        let base = batch(&[short.clone(), long.clone()]);
        let mut perturbed = base.clone();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for t in short.len()..perturbed.len {
            perturbed.ids[t] = r.random_range(0..20);
        }
        let run = |tb: &TokenBatch| {
            let mut s = model.session();
            let e = s.encode(tb, Side::Question).unwrap();
            let att = s.graph.value(e.attention).to_vec();
            (
                s.graph.value(e.gaussian.mu).to_vec(),
                s.graph.value(e.gaussian.log_var.unwrap()).to_vec(),
                att,
            )
        };
        let (mu_a, lv_a, att) = run(&base);
        let (mu_b, lv_b, _) = run(&perturbed);
        assert_eq!(mu_a, mu_b);
        assert_eq!(lv_a, lv_b);
        // att is [T, B, r]; row 0 is masked beyond step 3.
        let (b, hops) = (2, 2);
        for k in 0..hops {
            for row in 0..b {
                let total: f32 = (0..base.len).map(|t| att[(t * b + row) * hops + k]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
            for t in short.len()..base.len {
                assert_eq!(att[(t * b) * hops + k], 0.0);
            }
        }
    }

    #[test]
    fn all_padding_row_is_rejected() {
        let model = Model::<f32>::new(tiny_config(Variant::CrossVae), 3).unwrap();
        let mut tb = batch(&[vec![4, 2], vec![4, 2]]);
        tb.mask[tb.len] = false;
        tb.ids[tb.len] = 0;
        tb.mask[tb.len + 1] = false;
        tb.ids[tb.len + 1] = 0;
        assert!(matches!(model.session().encode(&tb, Side::Question), Err(Error::AllPaddingRow(1))));
    }

    #[test]
    fn reparameterize_cases() {
        let model = Model::<f64>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let mut s = model.session();
        let mu = s.graph.constant(&[1, 2], vec![0.0, 0.0]);
        let lv = s.graph.constant(&[1, 2], vec![0.0, 0.0]);
        let gauss = LatentGaussian {
            mu,
            log_var: Some(lv),
        };
        let z = s.reparameterize(&gauss, Some(&[0.3, -1.2]), true).unwrap();
        assert_eq!(s.graph.value(z), &[0.3, -1.2]);
        let z = s.reparameterize(&gauss, Some(&[0.3, -1.2]), false).unwrap();
        assert_eq!(z, mu);
        let mu2 = s.graph.constant(&[1, 2], vec![1.5, -0.5]);
        let g2 = LatentGaussian { mu: mu2, log_var: Some(lv) };
        let z = s.reparameterize(&g2, Some(&[0.0, 0.0]), true).unwrap();
        assert_eq!(s.graph.value(z), &[1.5, -0.5]);
    }

    #[test]
    fn zero_decoder_gives_uniform_logits() {
        let mut model = Model::<f64>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let names: Vec<String> = model.params().names().iter().filter(|n| n.starts_with("dec_")).cloned().collect();
        for n in names {
            let len = model.params().by_name(&n).unwrap().len();
            model.params_mut().set(&n, &vec![0.0; len]).unwrap();
        }
        let mut s = model.session();
        let z = s.graph.constant(&[2, 4], vec![0.0; 8]);
        let target = batch(&[vec![5, 6, 2], vec![7, 2]]);
        let logits = s.decode(z, &target, Side::Answer).unwrap();
        assert!(s.graph.value(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_decoder_inputs_give_identical_logits() {
        let model = Model::<f32>::new(tiny_config(Variant::CrossVae), 6).unwrap();
        let mut s = model.session();
        let z = s.graph.constant(&[2, 4], vec![0.1, -0.2, 0.3, 0.4, 0.1, -0.2, 0.3, 0.4]);
        let target = batch(&[vec![5, 6, 2], vec![5, 6, 2]]);
        let logits = s.decode(z, &target, Side::Question).unwrap();
        let v = s.graph.value(logits);
        // Time-major rows: (t, b) at t·2 + b.
        for t in 0..3 {
            assert_eq!(v[(t * 2) * 20..(t * 2 + 1) * 20], v[(t * 2 + 1) * 20..(t * 2 + 2) * 20]);
        }
    }

    #[test]
    fn matcher_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(&[1, 3], vec![1.0, 2.0, 2.0]);
        let a = g.constant(&[3, 3], vec![2.0, 1.0, 2.0, 3.0, 6.0, 6.0, 2.0, -1.0, 0.0]);
        let p = match_probability(&mut g, q, a).unwrap();
        let v = g.value(p);
        assert!((v[0] - 17.0 / 18.0).abs() < 1e-6);
        assert_eq!(v[1], 1.0 - 1e-7);
        assert!((v[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matcher_argmax_ignores_scale() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let c: f64 = r.random_range(0.01..100.0);
            let argmax = |q: &[f64]| {
                let mut g = Graph::<f64>::new();
                let qv = g.constant(&[1, 4], q.to_vec());
                let av = g.constant(&[3, 4], a.clone());
                let p = match_probability(&mut g, qv, av).unwrap();
                let v = g.value(p).to_vec();
                (0..3).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap()
            };
            let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
            assert_eq!(argmax(&q), argmax(&scaled));
        }
    }

    #[test]
    fn cross_and_dual_share_shapes() {
        let cross = Model::<f32>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let dual = Model::<f32>::new(tiny_config(Variant::DualVae), 1).unwrap();
        let shapes = |m: &Model<f32>| {
            m.params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(shapes(&cross), shapes(&dual));
        assert_eq!(cross.params(), dual.params());
        let enc = Model::<f32>::new(tiny_config(Variant::DualEncoders), 1).unwrap();
        assert!(enc.params().names().iter().all(|n| !n.starts_with("dec_") && !n.contains("logvar")));
        assert_eq!(enc.params().by_name("embedding"), cross.params().by_name("embedding"));
    }

    #[test]
    fn encoders_and_decoders_are_disjoint() {
        let m = Model::<f32>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        for prefix in ["enc_q.", "enc_a.", "dec_q.", "dec_a."] {
            assert!(m.params().names().iter().any(|n| n.starts_with(prefix)));
        }
        let l = &m.layout;
        let enc_ids: Vec<usize> = l.enc.iter().flat_map(|e| e.gru.w.into_iter().chain([e.w1, e.w2])).collect();
        let dec_ids: Vec<usize> = l.dec.unwrap().iter().flat_map(|d| d.gru.w.into_iter().chain([d.w_out])).collect();
        assert!(enc_ids.iter().all(|i| !dec_ids.contains(i)));
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let m = Model::<f32>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let params = m.params().clone();
        assert!(Model::from_params(tiny_config(Variant::DualEncoders), params.clone()).is_err());
        let mut bigger = tiny_config(Variant::CrossVae);
        bigger.hidden_dim = 9;
        assert!(Model::from_params(bigger, params).is_err());
    }

    #[test]
    fn greedy_decode_stops_at_eos() {
        let mut model = Model::<f32>::new(tiny_config(Variant::CrossVae), 1).unwrap();
        let len = model.params().by_name("dec_a.out.b").unwrap().len();
        let mut bias = vec![0.0f32; len];
        bias[EOS] = 100.0;
        model.params_mut().set("dec_a.out.b", &bias).unwrap();
        let mut s = model.session();
        let z = s.graph.constant(&[2, 4], vec![0.0; 8]);
        let out = s.greedy_decode(z, Side::Answer, 10).unwrap();
        assert_eq!(out, vec![vec![EOS], vec![EOS]]);
    }
}
