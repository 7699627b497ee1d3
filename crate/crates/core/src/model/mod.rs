//! The one-block transformer.
//!
//! A sample `X ∈ R^{L×C}` becomes `L` tokens of width `C + 2K + 1` (channel
//! values plus Fourier position features). A learned latent array `M × d`
//! reads the tokens through one cross-attention block, is refined by
//! `self_per_cross` latent self-attention blocks, and is mean-pooled into a
//! linear classification head.
//!
//! Every attention and feed-forward sub-layer is pre-normalised and wrapped in
//! a residual connection; a final norm precedes pooling. Feed-forward layers
//! are gated: `down(value(x) ⊙ gelu(gate(x)))` with hidden width
//! `ff_mult · d`.

mod config;
pub mod encoding;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

pub use config::{preset, Ablation, ModelConfig, PRESET_NAMES, TABLE1, TABLE2, TABLE3, TABLE4};
pub use encoding::{fourier_encode, frequency_bands, positional_features, tokenize, TokenMatrix};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const LATENT_INIT_STD: f64 = 0.02;

/// Latent array, `M × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentState(pub Var);

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    value: Linear,
    gate: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct CrossBlock {
    norm_latents: Norm,
    norm_tokens: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct SelfBlock {
    norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    latents: ParamId,
    cross: CrossBlock,
    blocks: Vec<SelfBlock>,
    final_norm: Norm,
    head: Linear,
}

/// Weights of one attention layer bound on a tape. Projections are
/// `in × (heads·head_dim)`; `out` maps back to the query width.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub out: Var,
    pub out_bias: Option<Var>,
    pub heads: usize,
    pub head_dim: usize,
}

/// Multi-head scaled dot-product attention: per head
/// `softmax(Q Kᵀ / √d_h) V`, heads concatenated and projected back to the
/// query width. Dropout acts on the attention probabilities.
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    w: &AttentionVars,
    q_in: Var,
    kv_in: Var,
    dropout: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let q = tape.matmul(q_in, w.q)?;
    let k = tape.matmul(kv_in, w.k)?;
    let v = tape.matmul(kv_in, w.v)?;
    let inner = w.heads * w.head_dim;
    if tape.shape(q)[1] != inner || tape.shape(v)[1] != inner {
        return Err(Error::shape("attention", tape.shape(q), &[w.heads, w.head_dim]));
    }
    let scale = T::of(1.0 / (w.head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            let s = h * w.head_dim;
            (
                tape.slice_last(q, s, w.head_dim)?,
                tape.slice_last(k, s, w.head_dim)?,
                tape.slice_last(v, s, w.head_dim)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        let probs = tape.dropout(probs, dropout, ctx.training, &mut ctx.rng)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last(&heads)?
    };
    let y = tape.matmul(merged, w.out)?;
    match w.out_bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Per-pass state: whether dropout is active and where its masks come from.
pub struct ForwardCtx {
    pub training: bool,
    pub rng: Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: rng::stream(0, Stream::Dropout),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: rng::stream(seed, Stream::Dropout),
        }
    }
}

/// Registers parameters with their initial values. Creation order fixes both
/// the enumeration order and the RNG draw order.
struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut Rng,
}

impl<T: Real> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = Tensor::from_fn([fan_in, fan_out], |_| T::of(dist.sample(self.rng)));
        let weight = self.params.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = Tensor::from_fn([fan_out], |_| T::of(dist.sample(self.rng)));
            Some(self.params.add(format!("{name}.bias"), b)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.params.add(format!("{name}.gain"), Tensor::full([d], T::one()))?,
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros([d]))?,
        })
    }

    fn attention(&mut self, name: &str, q_dim: usize, kv_dim: usize, heads: usize, head_dim: usize) -> Result<Attention> {
        let inner = heads * head_dim;
        Ok(Attention {
            q: self.linear(&format!("{name}.q_proj"), q_dim, inner, false)?,
            k: self.linear(&format!("{name}.k_proj"), kv_dim, inner, false)?,
            v: self.linear(&format!("{name}.v_proj"), kv_dim, inner, false)?,
            out: self.linear(&format!("{name}.out_proj"), inner, q_dim, true)?,
            heads,
            head_dim,
        })
    }

    fn feed_forward(&mut self, name: &str, d: usize, mult: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            value: self.linear(&format!("{name}.value"), d, d * mult, true)?,
            gate: self.linear(&format!("{name}.gate"), d, d * mult, true)?,
            down: self.linear(&format!("{name}.down"), d * mult, d, true)?,
        })
    }

    fn latents(&mut self, m: usize, d: usize) -> Result<ParamId> {
        // truncated normal: resample outside ±2σ
        let normal = Normal::new(0.0, LATENT_INIT_STD).expect("valid std");
        let limit = 2.0 * LATENT_INIT_STD;
        let t = Tensor::from_fn([m, d], |_| loop {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= limit {
                break T::of(v);
            }
        });
        self.params.add("latents", t)
    }
}

/// The model: configuration, parameters and cached positional features.
#[derive(Clone, Debug)]
pub struct OneBt<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
    positional: Tensor<T>,
}

impl<T: Real> OneBt<T> {
    /// Initialises a model deterministically from `seed`.
    ///
    /// Latents are drawn from a normal(0, 0.02) truncated at ±2σ; every
    /// projection weight and bias is uniform in ±1/√fan_in; norms start at
    /// gain 1, bias 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let d = cfg.latent_dim;
        let c_tok = cfg.token_dim();

        let latents = b.latents(cfg.num_latents, d)?;
        let cross = CrossBlock {
            norm_latents: b.norm("cross.norm_latents", d)?,
            norm_tokens: b.norm("cross.norm_tokens", c_tok)?,
            attn: b.attention("cross.attn", d, c_tok, cfg.cross_heads, cfg.cross_head_dim)?,
            ff_norm: b.norm("cross.ff_norm", d)?,
            ff: b.feed_forward("cross.ff", d, cfg.ff_mult)?,
        };
        let mut blocks = Vec::with_capacity(cfg.self_per_cross);
        for i in 0..cfg.self_per_cross {
            let p = format!("self.{i}");
            blocks.push(SelfBlock {
                norm: b.norm(&format!("{p}.norm"), d)?,
                attn: b.attention(&format!("{p}.attn"), d, d, cfg.self_heads, cfg.self_head_dim)?,
                ff_norm: b.norm(&format!("{p}.ff_norm"), d)?,
                ff: b.feed_forward(&format!("{p}.ff"), d, cfg.ff_mult)?,
            });
        }
        let final_norm = b.norm("final_norm", d)?;
        let head = b.linear("head", d, cfg.num_classes, true)?;

        let params = b.params;
        let positional = positional_features(&cfg)?;
        Ok(Self {
            cfg,
            params,
            layout: Layout {
                latents,
                cross,
                blocks,
                final_norm,
                head,
            },
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Number of scalar parameters, by runtime enumeration.
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Real>(&self) -> OneBt<U> {
        OneBt {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            positional: self.positional.cast(),
        }
    }

    /// Builds the token matrix for one sample.
    pub fn tokenize(&self, x: &Tensor<T>) -> Result<TokenMatrix<T>> {
        encoding::tokenize_with(x, &self.positional, &self.cfg)
    }

    /// Binds all parameters onto `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        tape.bind(&self.params)
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[l.weight])?;
        match l.bias {
            Some(b) => tape.add(y, vars[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, vars: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[n.gain], vars[n.bias], T::of(LAYER_NORM_EPS))
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        a: Attention,
        q_in: Var,
        kv_in: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let w = AttentionVars {
            q: vars[a.q.weight],
            k: vars[a.k.weight],
            v: vars[a.v.weight],
            out: vars[a.out.weight],
            out_bias: a.out.bias.map(|b| vars[b]),
            heads: a.heads,
            head_dim: a.head_dim,
        };
        attention(tape, &w, q_in, kv_in, self.cfg.attn_dropout, ctx)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, vars: &[Var], f: FeedForward, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let value = self.linear(tape, vars, f.value, x)?;
        let gate = self.linear(tape, vars, f.gate, x)?;
        let gate = tape.gelu(gate);
        let hidden = tape.mul(value, gate)?;
        let hidden = tape.dropout(hidden, self.cfg.ff_dropout, ctx.training, &mut ctx.rng)?;
        self.linear(tape, vars, f.down, hidden)
    }

    /// The learned latent array as a graph value.
    pub fn initial_latents(&self, vars: &[Var]) -> LatentState {
        LatentState(vars[self.layout.latents])
    }

    /// `latents + Attn(norm(latents), norm(tokens))`, then a residual
    /// feed-forward.
    pub fn cross_attend_block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        latents: LatentState,
        tokens: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<LatentState> {
        let blk = self.layout.cross;
        let want = [self.cfg.seq_len, self.cfg.token_dim()];
        if tape.shape(tokens) != want {
            return Err(Error::shape("cross_attend_block", tape.shape(tokens), &want));
        }
        let lat = latents.0;
        let q = self.norm(tape, vars, blk.norm_latents, lat)?;
        let kv = self.norm(tape, vars, blk.norm_tokens, tokens)?;
        let a = self.attention(tape, vars, blk.attn, q, kv, ctx)?;
        let lat = tape.add(lat, a)?;
        let h = self.norm(tape, vars, blk.ff_norm, lat)?;
        let f = self.feed_forward(tape, vars, blk.ff, h, ctx)?;
        Ok(LatentState(tape.add(lat, f)?))
    }

    /// Self-attention block `index`: `latents + Attn(norm(L), norm(L), norm(L))`
    /// followed by a residual feed-forward.
    pub fn self_attend_block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        index: usize,
        latents: LatentState,
        ctx: &mut ForwardCtx,
    ) -> Result<LatentState> {
        let blk = *self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::Index(format!("self-attention block {index}")))?;
        let lat = latents.0;
        let h = self.norm(tape, vars, blk.norm, lat)?;
        let a = self.attention(tape, vars, blk.attn, h, h, ctx)?;
        let lat = tape.add(lat, a)?;
        let h = self.norm(tape, vars, blk.ff_norm, lat)?;
        let f = self.feed_forward(tape, vars, blk.ff, h, ctx)?;
        Ok(LatentState(tape.add(lat, f)?))
    }

    /// Final norm, mean over latent rows, linear head. Returns `1 × classes`.
    pub fn classify(&self, tape: &mut Tape<T>, vars: &[Var], latents: LatentState) -> Result<Var> {
        let z = self.norm(tape, vars, self.layout.final_norm, latents.0)?;
        let pooled = tape.mean_axis(z, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.cfg.latent_dim])?;
        self.linear(tape, vars, self.layout.head, pooled)
    }

    /// Full pass for one sample on an existing tape; returns `1 × classes`.
    pub fn logits_var(&self, tape: &mut Tape<T>, vars: &[Var], x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Var> {
        let tokens = self.tokenize(x)?;
        let tokens = tape.constant(tokens.values);
        let mut lat = self.initial_latents(vars);
        lat = self.cross_attend_block(tape, vars, lat, tokens, ctx)?;
        for i in 0..self.cfg.self_per_cross {
            lat = self.self_attend_block(tape, vars, i, lat, ctx)?;
        }
        self.classify(tape, vars, lat)
    }

    /// Batched pass; returns `b × classes`.
    pub fn logits_batch(&self, tape: &mut Tape<T>, vars: &[Var], xs: &[&Tensor<T>], ctx: &mut ForwardCtx) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = xs
            .iter()
            .map(|x| self.logits_var(tape, vars, x, ctx))
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat_rows(&rows)
        }
    }

    /// Eval-mode logits for one sample.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let out = self.logits_var(&mut tape, &vars, x, &mut ctx)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Eval-mode logits for a batch, `b × classes`.
    pub fn forward_batch(&self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let out = self.logits_batch(&mut tape, &vars, xs, &mut ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted class index for one sample.
    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        let logits = self.forward(x)?;
        Ok(argmax(&logits))
    }

    /// Parameters as constants: inference never needs their gradients.
    fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect()
    }

    /// Deterministic dropout seed for a training step; exposed so callers can
    /// reproduce a step exactly.
    pub fn step_ctx(seed: u64, step: u64) -> ForwardCtx {
        ForwardCtx::train(rng::derive_seed(seed, step))
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Fills every tensor of `params` whose name ends with one of `suffixes`.
pub fn fill_params<T: Real>(params: &mut ParamSet<T>, suffixes: &[&str], value: T) {
    for p in params.iter_mut() {
        if suffixes.iter().any(|s| p.name.ends_with(s)) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// Random `L × C` input for tests and smoke runs.
pub fn random_input<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn([cfg.seq_len, cfg.input_channels], |_| T::of(rng.gen_range(-1.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = OneBt::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let b = OneBt::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = OneBt::<f32>::new(ModelConfig::tiny(), 6).unwrap();
        assert_ne!(
            a.params().by_name("latents").unwrap().tensor,
            c.params().by_name("latents").unwrap().tensor
        );
    }

    #[test]
    fn latents_truncated_at_two_sigma() {
        let m = OneBt::<f64>::new(ModelConfig::default(), 1).unwrap();
        let lat = &m.params().by_name("latents").unwrap().tensor;
        assert!(lat.data().iter().all(|v| v.abs() <= 0.04));
        let std = (lat.data().iter().map(|v| v * v).sum::<f64>() / lat.numel() as f64).sqrt();
        assert!(std > 0.01 && std < 0.02, "{std}");
    }

    #[test]
    fn projection_init_bounds() {
        let m = OneBt::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        for p in m.params().iter() {
            if p.name.ends_with("k_proj.weight") {
                let bound = 1.0 / (m.config().token_dim() as f64).sqrt();
                assert!(p.tensor.data().iter().all(|v| v.abs() <= bound));
            }
            if p.name.ends_with(".gain") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn parameter_names_unique_and_ordered() {
        let m = OneBt::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names[0], "latents");
        assert_eq!(names.last().unwrap(), "head.bias");
        assert!(names.contains(&"cross.attn.q_proj.weight".to_string()));
        assert!(!names.contains(&"cross.attn.q_proj.bias".to_string()));
    }

    #[test]
    fn output_has_num_classes() {
        let cfg = ModelConfig::tiny();
        let m = OneBt::<f32>::new(cfg.clone(), 0).unwrap();
        let x = random_input(&cfg, &mut rng::stream(1, Stream::Synthetic));
        assert_eq!(m.forward(&x).unwrap().len(), 2);
    }

    #[test]
    fn argmax_picks_first_max() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[3.0f64]), 0);
    }
}
