//! Refinement network with analytic backward passes.
//!
//! Data flow for one proposal:
//!
//! ```text
//! raw_p ──embed──▶ tokens_p ──flatten·fc·relu──▶ f_p ─────────────┐
//! raw_h ──embed──▶ tokens_h ──attn(q += g(x_t))──▶ mean ──TT(t)──▶ h_t
//!                                                                  │
//!                                 f_p + h_t ──▶ reg MLP ─▶ x̂₀ (7)  │
//!                                           └─▶ cls MLP ─▶ ĉ       ◀┘
//! ```
//!
//! Activations are row-major `rows × width` slices. Every `forward` returns a
//! cache that the matching `backward` consumes; backward passes accumulate
//! parameter gradients into a detached [`Gradients`] buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::NormalizedResidual7;
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{add_assign, matmul, matmul_a_bt, matmul_at_b_acc, TensorD};

/// Per-cell raw RoI features: log point count and mean offset (3).
pub const RAW_FEATURES: usize = 4;
/// Residual width.
pub const RESIDUAL_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HamConfig {
    /// Feature width `d`.
    pub d: usize,
    pub heads: usize,
    /// RoI grid cells per box.
    pub tokens: usize,
    /// Width of the sinusoidal timestep embedding fed to the scale/shift MLP.
    pub time_width: usize,
}

impl Default for HamConfig {
    fn default() -> Self {
        HamConfig {
            d: 32,
            heads: 8,
            tokens: 27,
            time_width: 32,
        }
    }
}

impl HamConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("time_width", self.time_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("ham.{key} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "ham.d ({}) must be divisible by ham.heads ({})",
                self.d, self.heads
            )));
        }
        if self.time_width % 2 != 0 {
            return Err(Error::Config("ham.time_width must be even".into()));
        }
        Ok(())
    }

    pub fn g_hidden(&self) -> usize {
        self.d
    }

    pub fn s_hidden(&self) -> usize {
        4 * self.d
    }
}

/// Network architecture plus the module toggles used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub ham: HamConfig,
    pub enable_ham: bool,
    pub enable_tt: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            ham: HamConfig::default(),
            enable_ham: true,
            enable_tt: true,
        }
    }
}

fn shape_err(layer: &str, detail: String) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        detail,
    }
}

/// Affine layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = ps.register(
            &format!("{name}.weight"),
            ParamStore::uniform_init(&[inp, out], inp, rng),
        )?;
        let bias = ps.register(&format!("{name}.bias"), TensorD::zeros(&[out]))?;
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            inp,
            out,
        })
    }

    /// Resolves an already registered layer by name prefix.
    pub fn lookup(ps: &ParamStore, name: &str) -> Result<Self> {
        let weight = ps.id(&format!("{name}.weight"))?;
        let bias = ps.id(&format!("{name}.bias"))?;
        let shape = ps.value(weight).shape();
        if shape.len() != 2 || ps.value(bias).shape() != [shape[1]] {
            return Err(shape_err(name, format!("weight {shape:?} incompatible with bias")));
        }
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            inp: shape[0],
            out: shape[1],
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.inp {
            return Err(shape_err(
                &self.name,
                format!(
                    "expected {rows}×{} input, got {} values",
                    self.inp,
                    x.len()
                ),
            ));
        }
        let mut y = matmul(x, ps.value(self.weight).data(), rows, self.inp, self.out);
        let b = ps.value(self.bias).data();
        for row in y.chunks_mut(self.out) {
            add_assign(row, b);
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Gradients,
        x: &[f64],
        dy: &[f64],
        rows: usize,
    ) -> Vec<f64> {
        self.backward_params(grads, x, dy, rows);
        matmul_a_bt(dy, ps.value(self.weight).data(), rows, self.out, self.inp)
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, grads: &mut Gradients, x: &[f64], dy: &[f64], rows: usize) {
        matmul_at_b_acc(grads.slot(self.weight), x, dy, rows, self.inp, self.out);
        let gb = grads.slot(self.bias);
        for row in dy.chunks(self.out) {
            add_assign(gb, row);
        }
    }
}

/// Two-layer perceptron: affine → ReLU → affine.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    rows: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{prefix}.fc1"), inp, hidden, rng)?,
            fc2: Linear::new(ps, &format!("{prefix}.fc2"), hidden, out, rng)?,
        })
    }

    pub fn lookup(ps: &ParamStore, prefix: &str) -> Result<Self> {
        let fc1 = Linear::lookup(ps, &format!("{prefix}.fc1"))?;
        let fc2 = Linear::lookup(ps, &format!("{prefix}.fc2"))?;
        if fc1.out != fc2.inp {
            return Err(shape_err(
                prefix,
                format!("hidden widths differ: {} vs {}", fc1.out, fc2.inp),
            ));
        }
        Ok(Mlp { fc1, fc2 })
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64], rows: usize) -> Result<(Vec<f64>, MlpCache)> {
        let mut hidden = self.fc1.forward(ps, x, rows)?;
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let y = self.fc2.forward(ps, &hidden, rows)?;
        Ok((
            y,
            MlpCache {
                rows,
                input: x.to_vec(),
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Gradients,
        cache: &MlpCache,
        dy: &[f64],
    ) -> Vec<f64> {
        let mut dh = self.fc2.backward(ps, grads, &cache.hidden, dy, cache.rows);
        for (g, &h) in dh.iter_mut().zip(&cache.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.fc1.backward(ps, grads, &cache.input, &dh, cache.rows)
    }
}

/// Forward pass of the MLP registered under `prefix`.
pub fn mlp_forward(ps: &ParamStore, x: &TensorD, prefix: &str) -> Result<(TensorD, MlpCache)> {
    let mlp = Mlp::lookup(ps, prefix)?;
    let rows = if x.shape().len() == 1 { 1 } else { x.shape()[0] };
    let (y, cache) = mlp.forward(ps, x.data(), rows)?;
    Ok((TensorD::from_vec(&[rows, mlp.fc2.out], y)?, cache))
}

/// Backward pass matching [`mlp_forward`]; returns the input gradient.
pub fn mlp_backward(
    ps: &ParamStore,
    grads: &mut Gradients,
    prefix: &str,
    cache: &MlpCache,
    dy: &TensorD,
) -> Result<TensorD> {
    let mlp = Mlp::lookup(ps, prefix)?;
    let dx = mlp.backward(ps, grads, cache, dy.data());
    TensorD::from_vec(&[cache.rows, mlp.fc1.inp], dx)
}

/// Sinusoidal timestep features: `sin(t·ω_k)` then `cos(t·ω_k)` with
/// `ω_k = 10000^(−2k/width)`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = 10000f64.powf(-(2.0 * k as f64) / width as f64);
        let (s, c) = (t as f64 * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}

/// Multi-head scaled dot-product self-attention with an additive query bias.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    n: usize,
    x: Vec<f64>,
    xq: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × n` row-stochastic weights.
    pub probs: Vec<f64>,
    o: Vec<f64>,
}

impl SelfAttention {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        Ok(SelfAttention {
            q: Linear::new(ps, &format!("{prefix}.q"), d, d, rng)?,
            k: Linear::new(ps, &format!("{prefix}.k"), d, d, rng)?,
            v: Linear::new(ps, &format!("{prefix}.v"), d, d, rng)?,
            o: Linear::new(ps, &format!("{prefix}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    /// `x` is `n × d`; `q_bias` (width `d`) is added to every query token.
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &[f64],
        n: usize,
        q_bias: &[f64],
    ) -> Result<(Vec<f64>, AttentionCache)> {
        let d = self.d;
        if q_bias.len() != d {
            return Err(shape_err(
                "attention.q_bias",
                format!("expected width {d}, got {}", q_bias.len()),
            ));
        }
        if x.len() != n * d {
            return Err(shape_err(
                "attention",
                format!("expected {n}×{d} tokens, got {} values", x.len()),
            ));
        }
        let mut xq = x.to_vec();
        for row in xq.chunks_mut(d) {
            add_assign(row, q_bias);
        }
        let q = self.q.forward(ps, &xq, n)?;
        let k = self.k.forward(ps, x, n)?;
        let v = self.v.forward(ps, x, n)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; self.heads * n * n];
        let mut o = vec![0.0; n * d];
        for h in 0..self.heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let pij = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (a, b) in oi.iter_mut().zip(vj) {
                        *a += pij * b;
                    }
                }
            }
        }
        let y = self.o.forward(ps, &o, n)?;
        Ok((
            y,
            AttentionCache {
                n,
                x: x.to_vec(),
                xq,
                q,
                k,
                v,
                probs,
                o,
            },
        ))
    }

    /// Returns `(dx, dq_bias)`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Gradients,
        cache: &AttentionCache,
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let n = cache.n;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_o = self.o.backward(ps, grads, &cache.o, dy, n);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..self.heads {
            let off = h * dh;
            let p = &cache.probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let doi = &d_o[i * d + off..i * d + off + dh];
                let prow = &p[i * n..(i + 1) * n];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &cache.v[j * d + off..j * d + off + dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * prow[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (a, b) in dvj.iter_mut().zip(doi) {
                        *a += prow[j] * b;
                    }
                }
                for j in 0..n {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                        dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                    }
                }
            }
        }
        let dxq = self.q.backward(ps, grads, &cache.xq, &dq, n);
        let mut dx = self.k.backward(ps, grads, &cache.x, &dk, n);
        add_assign(&mut dx, &self.v.backward(ps, grads, &cache.x, &dv, n));
        add_assign(&mut dx, &dxq);
        let mut dbias = vec![0.0; d];
        for row in dxq.chunks(d) {
            add_assign(&mut dbias, row);
        }
        (dx, dbias)
    }
}

/// Timestep-conditioned elementwise scale and shift.
#[derive(Debug, Clone)]
pub struct TemporalTransform {
    pub mlp: Mlp,
    pub time_width: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct TtCache {
    mlp: MlpCache,
    input: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl TtCache {
    pub fn scale_norm(&self) -> f64 {
        self.scale.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TemporalTransform {
    /// `[scale; shift] = s(time_embedding(t))`, `out = scale ⊙ a + shift`.
    pub fn forward(&self, ps: &ParamStore, a: &[f64], t: usize) -> Result<(Vec<f64>, TtCache)> {
        let (scale, shift, mlp) = self.factors(ps, t)?;
        if a.len() != self.d {
            return Err(shape_err(
                "temporal",
                format!("expected width {}, got {}", self.d, a.len()),
            ));
        }
        let out = a
            .iter()
            .zip(&scale)
            .zip(&shift)
            .map(|((x, w), b)| w * x + b)
            .collect();
        Ok((
            out,
            TtCache {
                mlp,
                input: a.to_vec(),
                scale,
                shift,
            },
        ))
    }

    fn factors(&self, ps: &ParamStore, t: usize) -> Result<(Vec<f64>, Vec<f64>, MlpCache)> {
        let emb = time_embedding(t, self.time_width);
        let (ws, cache) = self.mlp.forward(ps, &emb, 1)?;
        let (scale, shift) = ws.split_at(self.d);
        Ok((scale.to_vec(), shift.to_vec(), cache))
    }

    /// Euclidean norm of the scale factor at timestep `t`.
    pub fn scale_norm(&self, ps: &ParamStore, t: usize) -> Result<f64> {
        let (scale, _, _) = self.factors(ps, t)?;
        Ok(scale.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Gradients,
        cache: &TtCache,
        dout: &[f64],
    ) -> Vec<f64> {
        let mut dws = vec![0.0; 2 * self.d];
        for i in 0..self.d {
            dws[i] = dout[i] * cache.input[i];
            dws[self.d + i] = dout[i];
        }
        self.mlp.backward(ps, grads, &cache.mlp, &dws);
        dout.iter().zip(&cache.scale).map(|(g, w)| g * w).collect()
    }
}

/// Inputs for one proposal/hypothesis pair.
#[derive(Debug, Clone)]
pub struct NetInput<'a> {
    /// `tokens × RAW_FEATURES` raw RoI features of the proposal.
    pub raw_proposal: &'a [f64],
    /// `tokens × RAW_FEATURES` raw RoI features of the hypothesis.
    pub raw_hypothesis: &'a [f64],
    pub x_t: NormalizedResidual7,
    pub t: usize,
    /// Proposal yaw. The network works in the proposal's own frame: the
    /// `(dx, dy)` pair of `x_t` is rotated into it and that of `x̂₀` back out.
    pub yaw: f64,
}

/// Rotates the `(dx, dy)` pair of a residual by `angle`.
pub fn rotate_xy(v: &[f64; 7], angle: f64) -> [f64; 7] {
    let (s, c) = angle.sin_cos();
    let mut out = *v;
    out[0] = c * v[0] - s * v[1];
    out[1] = s * v[0] + c * v[1];
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOutput {
    pub x0_hat: NormalizedResidual7,
    pub logit: f64,
    pub c_hat: f64,
    /// Norm of the temporal scale factor, `None` when the transform is off.
    pub tt_scale_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct HamCache {
    g: MlpCache,
    attn: AttentionCache,
    tt: Option<TtCache>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    reg: MlpCache,
    cls: MlpCache,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    raw_p: Vec<f64>,
    tokens_p: Vec<f64>,
    fp_pre: Vec<f64>,
    raw_h: Vec<f64>,
    yaw: f64,
    ham: Option<HamCache>,
    head: HeadCache,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The full refinement network and its parameters.
#[derive(Debug, Clone)]
pub struct RefineNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub roi_embed: Linear,
    pub roi_pos: ParamId,
    pub proposal_fc: Linear,
    pub g: Mlp,
    pub attn: SelfAttention,
    pub tt: TemporalTransform,
    pub reg: Mlp,
    pub cls: Mlp,
}

impl RefineNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.ham.validate()?;
        let h = cfg.ham;
        let d = h.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let roi_embed = Linear::new(&mut ps, "roi.embed", RAW_FEATURES, d, &mut rng)?;
        let roi_pos = ps.register("roi.pos", TensorD::zeros(&[h.tokens, d]))?;
        let proposal_fc = Linear::new(&mut ps, "proposal.fc", h.tokens * d, d, &mut rng)?;
        let g = Mlp::new(&mut ps, "ham.g", RESIDUAL_DIM, h.g_hidden(), d, &mut rng)?;
        let attn = SelfAttention::new(&mut ps, "ham.attn", d, h.heads, &mut rng)?;
        let s = Mlp::new(&mut ps, "ham.s", h.time_width, h.s_hidden(), 2 * d, &mut rng)?;
        // start the scale/shift MLP at the identity transform
        ps.value_mut(s.fc2.weight).fill(0.0);
        ps.value_mut(s.fc2.bias).data_mut()[..d].fill(1.0);
        let reg = Mlp::new(&mut ps, "head.reg", d, d, RESIDUAL_DIM, &mut rng)?;
        let cls = Mlp::new(&mut ps, "head.cls", d, d, 1, &mut rng)?;
        Ok(RefineNet {
            cfg,
            params: ps,
            roi_embed,
            roi_pos,
            proposal_fc,
            g,
            attn,
            tt: TemporalTransform {
                mlp: s,
                time_width: h.time_width,
                d,
            },
            reg,
            cls,
        })
    }

    /// Rebuilds a network around an existing parameter store.
    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        let mut net = RefineNet::new(cfg, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in net.params.iter() {
            let other = params.get(name)?;
            if other.shape() != value.shape() || params.id(name)? != id {
                return Err(Error::Format(format!("parameter `{name}` layout mismatch")));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn d(&self) -> usize {
        self.cfg.ham.d
    }

    pub fn tokens(&self) -> usize {
        self.cfg.ham.tokens
    }

    /// Learned per-token affine map from raw RoI features to `tokens × d`.
    pub fn embed_tokens(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let n = self.tokens();
        let mut tok = self.roi_embed.forward(&self.params, raw, n)?;
        add_assign(&mut tok, self.params.value(self.roi_pos).data());
        Ok(tok)
    }

    fn embed_backward(&self, grads: &mut Gradients, raw: &[f64], dtok: &[f64]) {
        add_assign(grads.slot(self.roi_pos), dtok);
        self.roi_embed.backward_params(grads, raw, dtok, self.tokens());
    }

    /// Residual embedding `g(x_t)`, width `d`.
    pub fn embed_residual(&self, x_t: &NormalizedResidual7) -> Result<(Vec<f64>, MlpCache)> {
        self.g.forward(&self.params, x_t.as_array(), 1)
    }

    pub fn temporal_transform(&self, a: &[f64], t: usize) -> Result<(Vec<f64>, TtCache)> {
        self.tt.forward(&self.params, a, t)
    }

    /// Hypothesis attention: attention over hypothesis tokens with the
    /// residual embedding on the queries, token mean, then the temporal
    /// transform when enabled.
    pub fn ham_forward(
        &self,
        tokens_h: &[f64],
        x_t: &NormalizedResidual7,
        t: usize,
    ) -> Result<(Vec<f64>, HamCache)> {
        let n = self.tokens();
        let d = self.d();
        let (q_bias, g) = self.embed_residual(x_t)?;
        let (y, attn) = self.attn.forward(&self.params, tokens_h, n, &q_bias)?;
        let mut a = vec![0.0; d];
        for row in y.chunks(d) {
            add_assign(&mut a, row);
        }
        a.iter_mut().for_each(|v| *v /= n as f64);
        let (h, tt) = if self.cfg.enable_tt {
            let (h, c) = self.temporal_transform(&a, t)?;
            (h, Some(c))
        } else {
            (a, None)
        };
        Ok((h, HamCache { g, attn, tt }))
    }

    /// Returns the gradient with respect to the hypothesis tokens.
    fn ham_backward(&self, grads: &mut Gradients, cache: &HamCache, dh: &[f64]) -> Vec<f64> {
        let n = self.tokens();
        let da = match &cache.tt {
            Some(tt) => self.tt.backward(&self.params, grads, tt, dh),
            None => dh.to_vec(),
        };
        let row: Vec<f64> = da.iter().map(|v| v / n as f64).collect();
        let dy: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
        let (dx, dbias) = self.attn.backward(&self.params, grads, &cache.attn, &dy);
        self.g.backward(&self.params, grads, &cache.g, &dbias);
        dx
    }

    /// Regression and classification branches on `f_p + h_t`.
    pub fn detection_head(&self, f_p: &[f64], h_t: &[f64]) -> Result<(NetOutput, HeadCache)> {
        if f_p.len() != self.d() || h_t.len() != self.d() {
            return Err(shape_err(
                "head",
                format!("expected width {}, got {} and {}", self.d(), f_p.len(), h_t.len()),
            ));
        }
        let z: Vec<f64> = f_p.iter().zip(h_t).map(|(a, b)| a + b).collect();
        let (x0, reg) = self.reg.forward(&self.params, &z, 1)?;
        let (logit, cls) = self.cls.forward(&self.params, &z, 1)?;
        let logit = logit[0];
        Ok((
            NetOutput {
                x0_hat: NormalizedResidual7(std::array::from_fn(|i| x0[i])),
                logit,
                c_hat: logistic(logit),
                tt_scale_norm: None,
            },
            HeadCache { reg, cls },
        ))
    }

    /// Proposal feature `relu(flatten(tokens)·W + b)`.
    fn proposal_feature(&self, tokens_p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pre = self.proposal_fc.forward(&self.params, tokens_p, 1)?;
        let f = pre.iter().map(|v| v.max(0.0)).collect();
        Ok((f, pre))
    }

    pub fn forward(&self, input: &NetInput<'_>) -> Result<(NetOutput, ForwardCache)> {
        let tokens_p = self.embed_tokens(input.raw_proposal)?;
        let (f_p, fp_pre) = self.proposal_feature(&tokens_p)?;
        let (h_t, ham) = if self.cfg.enable_ham {
            let tokens_h = self.embed_tokens(input.raw_hypothesis)?;
            let x_local = NormalizedResidual7(rotate_xy(input.x_t.as_array(), -input.yaw));
            let (h, c) = self.ham_forward(&tokens_h, &x_local, input.t)?;
            (h, Some(c))
        } else {
            (vec![0.0; self.d()], None)
        };
        let (mut out, head) = self.detection_head(&f_p, &h_t)?;
        out.x0_hat = NormalizedResidual7(rotate_xy(out.x0_hat.as_array(), input.yaw));
        out.tt_scale_norm = ham.as_ref().and_then(|c| c.tt.as_ref().map(TtCache::scale_norm));
        Ok((
            out,
            ForwardCache {
                raw_p: input.raw_proposal.to_vec(),
                tokens_p,
                fp_pre,
                raw_h: if ham.is_some() {
                    input.raw_hypothesis.to_vec()
                } else {
                    Vec::new()
                },
                yaw: input.yaw,
                ham,
                head,
            },
        ))
    }

    /// Backpropagates `∂L/∂x̂₀` and `∂L/∂logit` into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_x0: &[f64; 7],
        d_logit: f64,
        grads: &mut Gradients,
    ) {
        let ps = &self.params;
        let d_local = rotate_xy(d_x0, -cache.yaw);
        let mut dz = self.reg.backward(ps, grads, &cache.head.reg, &d_local);
        add_assign(&mut dz, &self.cls.backward(ps, grads, &cache.head.cls, &[d_logit]));

        let dpre: Vec<f64> = dz
            .iter()
            .zip(&cache.fp_pre)
            .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
            .collect();
        let dtok_p = self
            .proposal_fc
            .backward(ps, grads, &cache.tokens_p, &dpre, 1);
        self.embed_backward(grads, &cache.raw_p, &dtok_p);

        if let Some(ham) = &cache.ham {
            let dtok_h = self.ham_backward(grads, ham, &dz);
            self.embed_backward(grads, &cache.raw_h, &dtok_h);
        }
    }

    /// Norm of the temporal scale factor at `t`.
    pub fn tt_scale_norm(&self, t: usize) -> Result<f64> {
        self.tt.scale_norm(&self.params, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn small_cfg() -> NetConfig {
        NetConfig {
            ham: HamConfig {
                d: 8,
                heads: 2,
                tokens: 5,
                time_width: 6,
            },
            enable_ham: true,
            enable_tt: true,
        }
    }

    /// Randomises every parameter, including the zero-initialised ones, so
    /// that gradient checks exercise every path.
    fn randomized(cfg: NetConfig, seed: u64) -> RefineNet {
        let mut net = RefineNet::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let ids: Vec<ParamId> = net.params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for v in net.params.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
        net
    }

    fn scalar_objective(out: &NetOutput, wx: &[f64; 7], wl: f64) -> f64 {
        out.x0_hat.0.iter().zip(wx).map(|(a, b)| a * b).sum::<f64>() + wl * out.logit
    }

    #[test]
    fn linear_shape_error_names_layer() {
        let net = RefineNet::new(small_cfg(), 1).unwrap();
        let err = net.g.forward(&net.params, &[0.0; 6], 1).unwrap_err();
        assert!(err.to_string().contains("ham.g.fc1"), "{err}");
    }

    #[test]
    fn mlp_zero_weights_give_zero() {
        let mut net = RefineNet::new(small_cfg(), 1).unwrap();
        for name in ["head.reg.fc1.weight", "head.reg.fc2.weight"] {
            net.params.get_mut(name).unwrap().fill(0.0);
        }
        let x = TensorD::from_vec(&[1, 8], vec![0.3; 8]).unwrap();
        let (y, _) = mlp_forward(&net.params, &x, "head.reg").unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_path() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut ps, "m", 3, 3, 3, &mut rng).unwrap();
        for l in [&mlp.fc1, &mlp.fc2] {
            let w = ps.value_mut(l.weight).data_mut();
            w.fill(0.0);
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let (y, _) = mlp.forward(&ps, &[0.5, 1.5, 2.0], 1).unwrap();
        assert_eq!(y, vec![0.5, 1.5, 2.0]);
    }

    #[test]
    fn mlp_gradient_matches_fd() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::new(&mut ps, "m", 4, 6, 3, &mut rng).unwrap();
        let x = TensorD::from_vec(&[2, 4], rand_vec(&mut rng, 8)).unwrap();
        let w = rand_vec(&mut rng, 6);
        let f = |ps: &ParamStore, x: &TensorD| -> f64 {
            let (y, _) = mlp_forward(ps, x, "m").unwrap();
            y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = mlp_forward(&ps, &x, "m").unwrap();
        let mut g = ps.zeros_like_grads();
        let dy = TensorD::from_vec(&[2, 3], w.clone()).unwrap();
        let dx = mlp_backward(&ps, &mut g, "m", &cache, &dy).unwrap();
        let h = 1e-5;
        let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for j in 0..ps.value(id).len() {
                let mut p = ps.clone();
                p.value_mut(id).data_mut()[j] += h;
                let up = f(&p, &x);
                p.value_mut(id).data_mut()[j] -= 2.0 * h;
                let dn = f(&p, &x);
                let fd = (up - dn) / (2.0 * h);
                assert!(rel_err(fd, g.get(id).data()[j]) < 1e-4);
            }
        }
        for j in 0..8 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let up = f(&ps, &xp);
            xp.data_mut()[j] -= 2.0 * h;
            let dn = f(&ps, &xp);
            assert!(rel_err((up - dn) / (2.0 * h), dx.data()[j]) < 1e-4);
        }
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0, 32);
        assert!(e0[..16].iter().all(|&v| v == 0.0));
        assert!(e0[16..].iter().all(|&v| v == 1.0));
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t, 32)).collect();
        for t in 0..all.len() {
            let norm = all[t].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 4.0).abs() < 1e-9);
        }
        let mut sorted: Vec<&Vec<f64>> = all.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(sorted.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let net = randomized(
            NetConfig {
                ham: HamConfig {
                    tokens: 1,
                    ..small_cfg().ham
                },
                ..small_cfg()
            },
            5,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_vec(&mut rng, 8);
        let qb = rand_vec(&mut rng, 8);
        let (y, cache) = net.attn.forward(&net.params, &x, 1, &qb).unwrap();
        assert_eq!(cache.probs, vec![1.0; 2]);
        let v = net.attn.v.forward(&net.params, &x, 1).unwrap();
        let expect = net.attn.o.forward(&net.params, &v, 1).unwrap();
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_tokens_uniform() {
        let net = randomized(small_cfg(), 6);
        let row: Vec<f64> = vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.0, 0.5, 0.7];
        let x: Vec<f64> = (0..5).flat_map(|_| row.iter().copied()).collect();
        let (_, cache) = net.attn.forward(&net.params, &x, 5, &[0.2; 8]).unwrap();
        for p in &cache.probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let net = randomized(small_cfg(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 40);
        let qb = rand_vec(&mut rng, 8);
        let (_, cache) = net.attn.forward(&net.params, &x, 5, &qb).unwrap();
        for row in cache.probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradient_matches_fd() {
        let net = randomized(small_cfg(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, 40);
        let qb = rand_vec(&mut rng, 8);
        let w = rand_vec(&mut rng, 40);
        let f = |ps: &ParamStore, x: &[f64], qb: &[f64]| -> f64 {
            let (y, _) = net.attn.forward(ps, x, 5, qb).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.attn.forward(&net.params, &x, 5, &qb).unwrap();
        let mut g = net.params.zeros_like_grads();
        let (dx, dqb) = net.attn.backward(&net.params, &mut g, &cache, &w);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in [&net.attn.q, &net.attn.k, &net.attn.v, &net.attn.o] {
            for id in [l.weight, l.bias] {
                for j in 0..net.params.value(id).len() {
                    let mut p = net.params.clone();
                    p.value_mut(id).data_mut()[j] += h;
                    let up = f(&p, &x, &qb);
                    p.value_mut(id).data_mut()[j] -= 2.0 * h;
                    let dn = f(&p, &x, &qb);
                    worst = worst.max(rel_err((up - dn) / (2.0 * h), g.get(id).data()[j]));
                }
            }
        }
        for j in 0..40 {
            let mut xp = x.clone();
            xp[j] += h;
            let up = f(&net.params, &xp, &qb);
            xp[j] -= 2.0 * h;
            let dn = f(&net.params, &xp, &qb);
            worst = worst.max(rel_err((up - dn) / (2.0 * h), dx[j]));
        }
        for j in 0..8 {
            let mut qp = qb.clone();
            qp[j] += h;
            let up = f(&net.params, &x, &qp);
            qp[j] -= 2.0 * h;
            let dn = f(&net.params, &x, &qp);
            worst = worst.max(rel_err((up - dn) / (2.0 * h), dqb[j]));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn temporal_forced_identity_and_constant() {
        let mut net = randomized(small_cfg(), 10);
        let s = net.tt.mlp.fc2.clone();
        net.params.value_mut(s.weight).fill(0.0);
        let bias = net.params.value_mut(s.bias).data_mut();
        bias[..8].fill(1.0);
        bias[8..].fill(0.0);
        let a = vec![0.3, -0.1, 0.2, 0.8, -0.9, 0.0, 1.5, 2.0];
        let (h, c) = net.temporal_transform(&a, 437).unwrap();
        assert_eq!(h, a);
        assert!((c.scale_norm() - 8f64.sqrt()).abs() < 1e-12);

        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let bias = net.params.value_mut(s.bias).data_mut();
        bias[..8].fill(0.0);
        bias[8..].copy_from_slice(&b);
        let (h1, _) = net.temporal_transform(&a, 3).unwrap();
        let (h2, _) = net.temporal_transform(&[9.0; 8], 3).unwrap();
        assert_eq!(h1, b);
        assert_eq!(h2, b);
    }

    #[test]
    fn temporal_gradient_matches_fd() {
        let net = randomized(small_cfg(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_vec(&mut rng, 8);
        let w = rand_vec(&mut rng, 8);
        let t = 321;
        let f = |ps: &ParamStore, a: &[f64]| -> f64 {
            let (h, _) = net.tt.forward(ps, a, t).unwrap();
            h.iter().zip(&w).map(|(x, y)| x * y).sum()
        };
        let (_, cache) = net.tt.forward(&net.params, &a, t).unwrap();
        let mut g = net.params.zeros_like_grads();
        let da = net.tt.backward(&net.params, &mut g, &cache, &w);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in [&net.tt.mlp.fc1, &net.tt.mlp.fc2] {
            for id in [l.weight, l.bias] {
                for j in 0..net.params.value(id).len() {
                    let mut p = net.params.clone();
                    p.value_mut(id).data_mut()[j] += h;
                    let up = f(&p, &a);
                    p.value_mut(id).data_mut()[j] -= 2.0 * h;
                    let dn = f(&p, &a);
                    worst = worst.max(rel_err((up - dn) / (2.0 * h), g.get(id).data()[j]));
                }
            }
        }
        for j in 0..8 {
            let mut ap = a.clone();
            ap[j] += h;
            let up = f(&net.params, &ap);
            ap[j] -= 2.0 * h;
            let dn = f(&net.params, &ap);
            worst = worst.max(rel_err((up - dn) / (2.0 * h), da[j]));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn detection_head_defaults() {
        let mut net = randomized(small_cfg(), 12);
        for n in ["head.cls.fc1.bias", "head.cls.fc2.bias"] {
            net.params.get_mut(n).unwrap().fill(0.0);
        }
        let (out, _) = net.detection_head(&[0.0; 8], &[0.0; 8]).unwrap();
        assert_eq!(out.c_hat, 0.5);

        net.params.get_mut("head.reg.fc2.weight").unwrap().fill(0.0);
        let bias: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        net.params
            .get_mut("head.reg.fc2.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let (out, _) = net.detection_head(&[0.4; 8], &[-0.1; 8]).unwrap();
        assert_eq!(out.x0_hat.0.to_vec(), bias);
    }

    #[test]
    fn ham_zero_attention_yields_shift() {
        let mut net = randomized(small_cfg(), 13);
        for n in ["ham.attn.o.weight", "ham.attn.o.bias"] {
            net.params.get_mut(n).unwrap().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tok = rand_vec(&mut rng, 40);
        let x_t = NormalizedResidual7([0.1, 0.2, -0.3, 0.0, 0.5, -0.6, 0.7]);
        let (h, cache) = net.ham_forward(&tok, &x_t, 77).unwrap();
        let shift = &cache.tt.as_ref().unwrap().shift;
        for (a, b) in h.iter().zip(shift) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ham_reduces_to_mean_attention() {
        let mut net = randomized(small_cfg(), 14);
        for n in ["ham.g.fc2.weight", "ham.g.fc2.bias", "ham.s.fc2.weight"] {
            net.params.get_mut(n).unwrap().fill(0.0);
        }
        let b = net.params.get_mut("ham.s.fc2.bias").unwrap().data_mut();
        b[..8].fill(1.0);
        b[8..].fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tok = rand_vec(&mut rng, 40);
        let x_t = NormalizedResidual7([0.4; 7]);
        let (h, _) = net.ham_forward(&tok, &x_t, 500).unwrap();
        let (y, _) = net.attn.forward(&net.params, &tok, 5, &[0.0; 8]).unwrap();
        for c in 0..8 {
            let mean = (0..5).map(|r| y[r * 8 + c]).sum::<f64>() / 5.0;
            assert!((h[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn ham_residual_enters_only_via_query() {
        let net = randomized(small_cfg(), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tok = rand_vec(&mut rng, 40);
        let xa = NormalizedResidual7([0.1; 7]);
        let xb = NormalizedResidual7([-0.3; 7]);
        let (ha, ca) = net.ham_forward(&tok, &xa, 250).unwrap();
        let (hb, cb) = net.ham_forward(&tok, &xb, 250).unwrap();
        assert_ne!(ha, hb);
        // same keys, values and temporal factors; only the queries moved
        assert_eq!(ca.attn.k, cb.attn.k);
        assert_eq!(ca.attn.v, cb.attn.v);
        assert_eq!(ca.tt.as_ref().unwrap().scale, cb.tt.as_ref().unwrap().scale);
        assert_ne!(ca.attn.q, cb.attn.q);
        // and the same queries reproduce the same output
        let (y, _) = net
            .attn
            .forward(&net.params, &tok, 5, &net.embed_residual(&xb).unwrap().0)
            .unwrap();
        let (yb, _) = net.attn.forward(&net.params, &tok, 5, &cb.g_output(&net)).unwrap();
        assert_eq!(y, yb);
    }

    impl HamCache {
        fn g_output(&self, net: &RefineNet) -> Vec<f64> {
            net.g.fc2.forward(&net.params, &self.g.hidden, 1).unwrap()
        }
    }

    fn full_gradient_check(cfg: NetConfig, seed: u64) -> f64 {
        let net = randomized(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = cfg.ham.tokens * RAW_FEATURES;
        let raw_p = rand_vec(&mut rng, n);
        let raw_h = rand_vec(&mut rng, n);
        let x_t = NormalizedResidual7(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let wx: [f64; 7] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let wl = 0.7;
        let input = NetInput {
            raw_proposal: &raw_p,
            raw_hypothesis: &raw_h,
            x_t,
            t: 640,
            yaw: 0.7,
        };
        let f = |ps: &ParamStore| -> f64 {
            let mut m = net.clone();
            m.params = ps.clone();
            scalar_objective(&m.forward(&input).unwrap().0, &wx, wl)
        };
        let (_, cache) = net.forward(&input).unwrap();
        let mut g = net.params.zeros_like_grads();
        net.backward(&cache, &wx, wl, &mut g);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (id, _, value) in net.params.iter() {
            // sample a handful of scalars per parameter
            let len = value.len();
            for k in 0..len.min(6) {
                let j = (k * 7919 + 13) % len;
                let mut p = net.params.clone();
                p.value_mut(id).data_mut()[j] += h;
                let up = f(&p);
                p.value_mut(id).data_mut()[j] -= 2.0 * h;
                let dn = f(&p);
                worst = worst.max(rel_err((up - dn) / (2.0 * h), g.get(id).data()[j]));
            }
        }
        worst
    }

    #[test]
    fn network_gradient_matches_fd() {
        for (i, (ham, tt)) in [(true, true), (true, false), (false, false)].iter().enumerate() {
            let cfg = NetConfig {
                enable_ham: *ham,
                enable_tt: *tt,
                ..small_cfg()
            };
            let worst = full_gradient_check(cfg, 20 + i as u64);
            assert!(worst < 1e-4, "ham={ham} tt={tt}: {worst}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = RefineNet::new(small_cfg(), 42).unwrap();
        let b = RefineNet::new(small_cfg(), 42).unwrap();
        assert_eq!(a.params, b.params);
        let raw = vec![0.25; 20];
        let input = NetInput {
            raw_proposal: &raw,
            raw_hypothesis: &raw,
            x_t: NormalizedResidual7([0.1; 7]),
            t: 10,
            yaw: 0.0,
        };
        assert_eq!(a.forward(&input).unwrap().0, b.forward(&input).unwrap().0);
    }

    #[test]
    fn tt_starts_as_identity() {
        let net = RefineNet::new(small_cfg(), 1).unwrap();
        let n1 = net.tt_scale_norm(1).unwrap();
        let n2 = net.tt_scale_norm(1000).unwrap();
        assert_eq!(n1, n2);
        assert!((n1 - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn embed_residual_gradient_and_linearity() {
        let net = randomized(small_cfg(), 30);
        let x = NormalizedResidual7([0.2, -0.1, 0.05, 0.3, -0.4, 0.1, 0.0]);
        let (y, cache) = net.embed_residual(&x).unwrap();
        assert_eq!(y.len(), 8);
        let w = [0.3, -0.2, 0.5, 0.1, 0.9, -0.7, 0.4, 0.2];
        let mut g = net.params.zeros_like_grads();
        let dx = net.g.backward(&net.params, &mut g, &cache, &w);
        let h = 1e-5;
        for i in 0..7 {
            let mut up = x;
            up[i] += h;
            let mut dn = x;
            dn[i] -= h;
            let fu: f64 = net.embed_residual(&up).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum();
            let fdn: f64 = net.embed_residual(&dn).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!(rel_err((fu - fdn) / (2.0 * h), dx[i]) < 1e-4);
        }
        // first layer is affine: its pre-activation moves linearly with x
        let l1 = |x: &NormalizedResidual7| net.g.fc1.forward(&net.params, x.as_array(), 1).unwrap();
        let base = l1(&NormalizedResidual7::ZERO);
        let one = l1(&NormalizedResidual7([0.01; 7]));
        let two = l1(&NormalizedResidual7([0.02; 7]));
        for k in 0..8 {
            assert!(((two[k] - base[k]) - 2.0 * (one[k] - base[k])).abs() < 1e-12);
        }
    }
}
