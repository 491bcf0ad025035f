//! The two attention mechanisms and the encoder sublayers around them.
//!
//! `Interaction` layers compute per-head logits J = QKᵀ, then mix them across
//! heads with a learnable H×H matrix plus a residual: Ĵ(k) = Σ_m P[k][m]·J(m)
//! + J(k). `Masked` layers are plain multi-head attention under a causal mask
//! (no mixing), and `Vanilla` is plain multi-head attention. All three share
//! the same post-attention path: concat heads, output projection, then two
//! post-norm residual sublayers (attention, feed-forward).
//!
//! Logits are left unscaled until softmax time, and causal/padding masks are
//! applied at softmax time via a boolean sentinel rather than writing -inf
//! into tensors, so head mixing operates on finite raw logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{BoolMask, Scalar, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("layer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Vanilla,
    Interaction,
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Execution context for a forward pass: mode plus the RNG that feeds
/// dropout. Eval mode never consumes randomness.
pub struct RunCtx {
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl RunCtx {
    pub fn eval() -> RunCtx {
        RunCtx {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> RunCtx {
        RunCtx {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Weights of one encoder layer. `p_lambda` is present exactly on
/// interaction layers.
#[derive(Debug)]
pub struct AttentionLayerParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub p_lambda: Option<Tensor<T>>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

pub const WEIGHT_STD: f64 = 0.02;

pub(crate) fn gaussian<T: Scalar>(
    rng: &mut ChaCha8Rng,
    n: usize,
    std: f64,
) -> Vec<T> {
    let normal = Normal::new(0.0f64, std).expect("std must be positive");
    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
}

impl<T: Scalar> AttentionLayerParams<T> {
    /// Fresh layer: projection and FFN weights are Gaussian(0, 0.02), biases
    /// zero, layer-norm gains one. When `interaction` is set, `p_lambda` is
    /// Gaussian with standard deviation `p_lambda_std` (0.1/sqrt(d_emb)).
    pub fn init(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        interaction: bool,
        p_lambda_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttentionLayerParams<T>, AttentionError> {
        if d_model == 0 || n_heads == 0 || d_model % n_heads != 0 {
            return Err(AttentionError::Config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        let w = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Tensor::param(gaussian(rng, rows * cols, WEIGHT_STD), &[rows, cols]).unwrap()
        };
        let zeros1 = |n: usize| Tensor::param(vec![T::zero(); n], &[n]).unwrap();
        let ones1 = |n: usize| Tensor::param(vec![T::one(); n], &[n]).unwrap();
        Ok(AttentionLayerParams {
            w_q: w(rng, d_model, d_model),
            w_k: w(rng, d_model, d_model),
            w_v: w(rng, d_model, d_model),
            w_out: w(rng, d_model, d_model),
            b_out: zeros1(d_model),
            p_lambda: if interaction {
                Some(
                    Tensor::param(gaussian(rng, n_heads * n_heads, p_lambda_std), &[
                        n_heads, n_heads,
                    ])
                    .unwrap(),
                )
            } else {
                None
            },
            ln1_gamma: ones1(d_model),
            ln1_beta: zeros1(d_model),
            ln2_gamma: ones1(d_model),
            ln2_beta: zeros1(d_model),
            ffn_w1: w(rng, d_model, d_ff),
            ffn_b1: zeros1(d_ff),
            ffn_w2: w(rng, d_ff, d_model),
            ffn_b2: zeros1(d_model),
            n_heads,
            d_model,
            d_ff,
        })
    }

    /// Structural copy that shares every weight except `p_lambda`, which is
    /// dropped. Used by the interaction-collapse equivalence checks.
    pub fn without_interaction(&self) -> AttentionLayerParams<T> {
        AttentionLayerParams {
            w_q: self.w_q.clone(),
            w_k: self.w_k.clone(),
            w_v: self.w_v.clone(),
            w_out: self.w_out.clone(),
            b_out: self.b_out.clone(),
            p_lambda: None,
            ln1_gamma: self.ln1_gamma.clone(),
            ln1_beta: self.ln1_beta.clone(),
            ln2_gamma: self.ln2_gamma.clone(),
            ln2_beta: self.ln2_beta.clone(),
            ffn_w1: self.ffn_w1.clone(),
            ffn_b1: self.ffn_b1.clone(),
            ffn_w2: self.ffn_w2.clone(),
            ffn_b2: self.ffn_b2.clone(),
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn collect_named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        let mut push = |name: &str, t: &Tensor<T>| {
            out.push((format!("{prefix}.{name}"), t.clone()));
        };
        push("w_q", &self.w_q);
        push("w_k", &self.w_k);
        push("w_v", &self.w_v);
        push("w_out", &self.w_out);
        push("b_out", &self.b_out);
        if let Some(p) = &self.p_lambda {
            push("p_lambda", p);
        }
        push("ln1_gamma", &self.ln1_gamma);
        push("ln1_beta", &self.ln1_beta);
        push("ln2_gamma", &self.ln2_gamma);
        push("ln2_beta", &self.ln2_beta);
        push("ffn_w1", &self.ffn_w1);
        push("ffn_b1", &self.ffn_b1);
        push("ffn_w2", &self.ffn_w2);
        push("ffn_b2", &self.ffn_b2);
    }
}

/// Per-head Q/K/V reshaped to (b·h, n, head_dim).
#[derive(Debug)]
pub struct HeadProjections<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub b: usize,
    pub n: usize,
}

/// Detached copies of one layer's attention internals (first batch element),
/// each shaped (h, n, n).
#[derive(Debug)]
pub struct AttentionTrace<T: Scalar> {
    pub j: Tensor<T>,
    pub j_hat: Tensor<T>,
    pub probs: Tensor<T>,
}

fn batch0_heads<T: Scalar>(t: &Tensor<T>, h: usize, n: usize) -> Tensor<T> {
    let data = t.data()[..h * n * n].to_vec();
    Tensor::new(data, &[h, n, n]).unwrap()
}

/// Projects `x` (b, n, d_model) into per-head Q/K/V and raw logits
/// J = QKᵀ, shaped (b·h, n, n). Scaling is deferred to [`attend`].
pub fn head_logits<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
) -> Result<(HeadProjections<T>, Tensor<T>), AttentionError> {
    if x.ndim() != 3 || x.shape()[2] != params.d_model {
        return Err(AttentionError::Config(format!(
            "expected (b, n, {}) input, got {:?}",
            params.d_model,
            x.shape()
        )));
    }
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = params.n_heads;
    let hd = params.head_dim();
    let flat = x.reshape(&[b * n, d])?;
    let split = |w: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
        flat.matmul(w)?
            .reshape(&[b, n, h, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, n, hd])
    };
    let q = split(&params.w_q)?;
    let k = split(&params.w_k)?;
    let v = split(&params.w_v)?;
    let kt = k.permute(&[0, 2, 1])?;
    let j = q.matmul(&kt)?;
    Ok((HeadProjections { q, k, v, b, n }, j))
}

/// Mixes logits across heads: Ĵ(k) = Σ_m P[k][m]·J(m) + J(k), applied at
/// every (i, j) logit position. `j` is (b·h, n, n), `p_lambda` is (h, h).
pub fn head_interaction<T: Scalar>(
    j: &Tensor<T>,
    p_lambda: &Tensor<T>,
) -> Result<Tensor<T>, AttentionError> {
    if p_lambda.ndim() != 2 || p_lambda.shape()[0] != p_lambda.shape()[1] {
        return Err(AttentionError::Config(format!(
            "p_lambda must be square, got {:?}",
            p_lambda.shape()
        )));
    }
    let h = p_lambda.shape()[0];
    if j.ndim() != 3 || j.shape()[0] % h != 0 || j.shape()[1] != j.shape()[2] {
        return Err(AttentionError::Config(format!(
            "logits {:?} incompatible with {h} heads",
            j.shape()
        )));
    }
    let b = j.shape()[0] / h;
    let n = j.shape()[1];
    let l = n * n;
    // (b·h,n,n) -> (b·l, h): one row per logit position, heads as columns.
    let z = j
        .reshape(&[b, h, l])?
        .permute(&[0, 2, 1])?
        .reshape(&[b * l, h])?;
    // Z·Pᵀ gives Σ_m P[k][m]·J(m) in column k.
    let mixed = z
        .matmul(&p_lambda.permute(&[1, 0])?)?
        .reshape(&[b, l, h])?
        .permute(&[0, 2, 1])?
        .reshape(&[b * h, n, n])?;
    Ok(mixed.add(j)?)
}

/// Builds the combined causal/padding exclusion mask for logits shaped
/// (b·h, n, n). Returns None when nothing is excluded.
fn build_mask(
    b: usize,
    h: usize,
    n: usize,
    causal: bool,
    pad: Option<&[bool]>,
) -> Result<Option<BoolMask>, TensorError> {
    let pad = pad.filter(|p| p.iter().any(|&x| x));
    match (causal, pad) {
        (false, None) => Ok(None),
        (true, None) => {
            let mut data = vec![false; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    data[i * n + j] = true;
                }
            }
            Ok(Some(BoolMask::new(vec![n, n], data)?))
        }
        (causal, Some(pad)) => {
            debug_assert_eq!(pad.len(), b * n);
            let mut data = vec![false; b * h * n * n];
            for bi in 0..b {
                for hi in 0..h {
                    let base = (bi * h + hi) * n * n;
                    for i in 0..n {
                        for j in 0..n {
                            data[base + i * n + j] = (causal && j > i) || pad[bi * n + j];
                        }
                    }
                }
            }
            Ok(Some(BoolMask::new(vec![b * h, n, n], data)?))
        }
    }
}

/// Softmax(J / sqrt(d_model/H)) with excluded positions dropped, then the
/// weighted sum over V. Returns the per-head context (b·h, n, head_dim) and
/// the attention probabilities (pre-dropout, for tracing).
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    logits: &Tensor<T>,
    v: &Tensor<T>,
    d_model: usize,
    h: usize,
    causal: bool,
    pad: Option<&[bool]>,
    dropout_rate: f64,
    ctx: &mut RunCtx,
) -> Result<(Tensor<T>, Tensor<T>), AttentionError> {
    let (bh, n) = (logits.shape()[0], logits.shape()[1]);
    let b = bh / h;
    let scale = T::from_f64(1.0 / (d_model as f64 / h as f64).sqrt());
    let mask = build_mask(b, h, n, causal, pad)?;
    let probs = logits.scale(scale).softmax_last_axis(mask.as_ref())?;
    let kept = if ctx.is_train() && dropout_rate > 0.0 {
        probs.dropout(dropout_rate, ctx.rng())
    } else {
        probs.clone()
    };
    let out = kept.matmul(v)?;
    Ok((out, probs))
}

/// One full encoder layer: attention of the given kind, output projection,
/// then post-norm residual sublayers y1 = LN(x + attn), y2 = LN(y1 + FFN(y1)).
pub fn encoder_layer<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionLayerParams<T>,
    kind: LayerKind,
    pad: Option<&[bool]>,
    dropout_rate: f64,
    ctx: &mut RunCtx,
    want_trace: bool,
) -> Result<(Tensor<T>, Option<AttentionTrace<T>>), AttentionError> {
    match kind {
        LayerKind::Interaction if params.p_lambda.is_none() => {
            return Err(AttentionError::Config(
                "interaction layer requires p_lambda".into(),
            ));
        }
        LayerKind::Masked if params.p_lambda.is_some() => {
            return Err(AttentionError::Config(
                "masked layer must not carry p_lambda".into(),
            ));
        }
        _ => {}
    }
    let (proj, j) = head_logits(x, params)?;
    let (b, n) = (proj.b, proj.n);
    let h = params.n_heads;
    let j_hat = match kind {
        LayerKind::Interaction => head_interaction(&j, params.p_lambda.as_ref().unwrap())?,
        _ => j.clone(),
    };
    let (heads, probs) = attend(
        &j_hat,
        &proj.v,
        params.d_model,
        h,
        kind == LayerKind::Masked,
        pad,
        dropout_rate,
        ctx,
    )?;
    let trace = want_trace.then(|| AttentionTrace {
        j: batch0_heads(&j, h, n),
        j_hat: batch0_heads(&j_hat, h, n),
        probs: batch0_heads(&probs, h, n),
    });

    // Concat heads and project (Eq. 6's W and B).
    let d = params.d_model;
    let merged = heads
        .reshape(&[b, h, n, params.head_dim()])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * n, d])?;
    let attn_out = merged.matmul(&params.w_out)?.add(&params.b_out)?;
    let attn_out = attn_out.reshape(&[b, n, d])?;

    let y1 = x
        .add(&attn_out)?
        .layer_norm(&params.ln1_gamma, &params.ln1_beta, LN_EPS)?;

    let ffn = y1
        .reshape(&[b * n, d])?
        .matmul(&params.ffn_w1)?
        .add(&params.ffn_b1)?
        .gelu()
        .matmul(&params.ffn_w2)?
        .add(&params.ffn_b2)?
        .reshape(&[b, n, d])?;
    let ffn = if ctx.is_train() && dropout_rate > 0.0 {
        ffn.dropout(dropout_rate, ctx.rng())
    } else {
        ffn
    };

    let y2 = y1
        .add(&ffn)?
        .layer_norm(&params.ln2_gamma, &params.ln2_beta, LN_EPS)?;
    Ok((y2, trace))
}
