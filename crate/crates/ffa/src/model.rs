//! The full network: shared embedding, parallel interaction (ISA) and masked
//! (MSA) encoder stacks, feature-axis fusion, one fusion encoder layer, and a
//! token-level classifier. Also the training loss (cross-entropy with
//! optional R-Drop) and tag prediction with window stitching.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    encoder_layer, gaussian, AttentionError, AttentionLayerParams, AttentionTrace, LayerKind,
    RunCtx,
};
use crate::config::{ConfigError, ModelConfig};
use crate::data::{self, Batch, DataError, Label, Vocabulary, IGNORE_INDEX};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("sequence length {n} exceeds max_len {max_len}")]
    SequenceTooLong { n: usize, max_len: usize },
}

/// Detached per-stream internals captured during a forward pass of the first
/// batch element.
#[derive(Debug)]
pub struct ModelTrace<T: Scalar> {
    pub isa: Vec<AttentionTrace<T>>,
    pub msa: Vec<AttentionTrace<T>>,
    pub fusion: Option<AttentionTrace<T>>,
    /// ISA stream output rows (n, d_emb).
    pub c_i: Option<Tensor<T>>,
    /// MSA stream output rows (n, d_emb).
    pub c_m: Option<Tensor<T>>,
}

impl<T: Scalar> ModelTrace<T> {
    fn empty() -> Self {
        ModelTrace {
            isa: Vec::new(),
            msa: Vec::new(),
            fusion: None,
            c_i: None,
            c_m: None,
        }
    }
}

/// Parameter container for the two-stream network.
#[derive(Debug)]
pub struct FfaModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub token_embedding: Tensor<T>,
    /// Fixed sinusoidal table (max_len, d_emb); not trained.
    pub pos_encoding: Tensor<T>,
    pub isa_layers: Vec<AttentionLayerParams<T>>,
    pub msa_layers: Vec<AttentionLayerParams<T>>,
    pub fusion_layer: Option<AttentionLayerParams<T>>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
}

fn sinusoidal_positions<T: Scalar>(max_len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(data, &[max_len, d]).unwrap()
}

impl<T: Scalar> FfaModel<T> {
    /// Builds a freshly initialized model. Deterministic under `cfg.seed`:
    /// weights are Gaussian(0, 0.02), interaction matrices Gaussian with
    /// standard deviation 0.1/sqrt(d_emb), biases zero.
    pub fn init(cfg: &ModelConfig) -> Result<FfaModel<T>, ModelError> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(ModelError::Config(ConfigError::Invalid(
                "vocab_size must be set (build a vocabulary first)".into(),
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let token_embedding = Tensor::param(
            gaussian(&mut rng, cfg.vocab_size * cfg.d_emb, 0.02),
            &[cfg.vocab_size, cfg.d_emb],
        )?;
        let p_std = 0.1 / (cfg.d_emb as f64).sqrt();
        let mut isa_layers = Vec::with_capacity(cfg.n_isa_layers);
        for _ in 0..cfg.n_isa_layers {
            isa_layers.push(AttentionLayerParams::init(
                cfg.d_emb,
                cfg.n_heads,
                cfg.d_ff,
                cfg.use_interaction,
                p_std,
                &mut rng,
            )?);
        }
        let mut msa_layers = Vec::with_capacity(cfg.n_msa_layers);
        for _ in 0..cfg.n_msa_layers {
            msa_layers.push(AttentionLayerParams::init(
                cfg.d_emb,
                cfg.n_heads,
                cfg.d_ff,
                false,
                p_std,
                &mut rng,
            )?);
        }
        let fused = cfg.fused_width();
        let fusion_layer = if cfg.use_fusion {
            Some(AttentionLayerParams::init(
                fused,
                cfg.fusion_heads,
                cfg.fusion_d_ff,
                false,
                p_std,
                &mut rng,
            )?)
        } else {
            None
        };
        let classifier_w = Tensor::param(
            gaussian(&mut rng, fused * cfg.num_labels, 0.02),
            &[fused, cfg.num_labels],
        )?;
        let classifier_b = Tensor::param(vec![T::zero(); cfg.num_labels], &[cfg.num_labels])?;
        Ok(FfaModel {
            cfg: cfg.clone(),
            token_embedding,
            pos_encoding: sinusoidal_positions(cfg.max_len, cfg.d_emb),
            isa_layers,
            msa_layers,
            fusion_layer,
            classifier_w,
            classifier_b,
        })
    }

    /// Trainable parameters in a fixed order, names stable across runs.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("token_embedding".to_string(), self.token_embedding.clone()));
        for (i, layer) in self.isa_layers.iter().enumerate() {
            layer.collect_named(&format!("isa.{i}"), &mut out);
        }
        for (i, layer) in self.msa_layers.iter().enumerate() {
            layer.collect_named(&format!("msa.{i}"), &mut out);
        }
        if let Some(fusion) = &self.fusion_layer {
            fusion.collect_named("fusion", &mut out);
        }
        out.push(("classifier_w".to_string(), self.classifier_w.clone()));
        out.push(("classifier_b".to_string(), self.classifier_b.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Rebuilds a model from named tensors (checkpoint loading). Every
    /// parameter plus `pos_encoding` must be present with matching shape.
    pub fn from_named(
        cfg: &ModelConfig,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<FfaModel<T>, ModelError> {
        let model = FfaModel::init(cfg)?;
        let mut expected: Vec<(String, Tensor<T>)> = model.named_parameters();
        expected.push(("pos_encoding".to_string(), model.pos_encoding.clone()));
        if tensors.len() != expected.len() {
            return Err(ModelError::Config(ConfigError::Invalid(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                expected.len()
            ))));
        }
        for (name, target) in &expected {
            let (_, source) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| {
                    ModelError::Config(ConfigError::Invalid(format!(
                        "checkpoint missing tensor {name}"
                    )))
                })?;
            if source.shape() != target.shape() {
                return Err(ModelError::Config(ConfigError::Invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    source.shape(),
                    target.shape()
                ))));
            }
            target.data_mut().copy_from_slice(&source.data());
        }
        Ok(model)
    }

    fn run_stack(
        &self,
        layers: &[AttentionLayerParams<T>],
        x: &Tensor<T>,
        masked: bool,
        pad: Option<&[bool]>,
        ctx: &mut RunCtx,
        traces: Option<&mut Vec<AttentionTrace<T>>>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut h = x.clone();
        let want = traces.is_some();
        let mut collected = Vec::new();
        for layer in layers {
            let kind = if masked {
                LayerKind::Masked
            } else if layer.p_lambda.is_some() {
                LayerKind::Interaction
            } else {
                LayerKind::Vanilla
            };
            let (next, trace) =
                encoder_layer(&h, layer, kind, pad, self.cfg.dropout, ctx, want)?;
            if let Some(t) = trace {
                collected.push(t);
            }
            h = next;
        }
        if let Some(out) = traces {
            *out = collected;
        }
        Ok(h)
    }

    /// Full forward pass to logits (b, n, num_labels).
    pub fn forward(
        &self,
        batch: &Batch,
        ctx: &mut RunCtx,
        mut trace: Option<&mut ModelTrace<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        let (b, n) = (batch.b, batch.n);
        if n > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                n,
                max_len: self.cfg.max_len,
            });
        }
        if let Some(t) = trace.as_deref_mut() {
            *t = ModelTrace::empty();
        }
        let d = self.cfg.d_emb;
        let embedded = self
            .token_embedding
            .gather_rows(&batch.tokens)?
            .reshape(&[b, n, d])?;
        let positions = {
            let data = self.pos_encoding.data()[..n * d].to_vec();
            Tensor::new(data, &[n, d])?
        };
        let x = embedded.add(&positions)?;
        let pad = if batch.has_padding() {
            Some(batch.pad.as_slice())
        } else {
            None
        };

        let c_i = if self.isa_layers.is_empty() {
            None
        } else {
            let traces = trace.as_deref_mut().map(|t| &mut t.isa);
            Some(self.run_stack(&self.isa_layers, &x, false, pad, ctx, traces)?)
        };
        let c_m = if self.msa_layers.is_empty() {
            None
        } else {
            let traces = trace.as_deref_mut().map(|t| &mut t.msa);
            Some(self.run_stack(&self.msa_layers, &x, true, pad, ctx, traces)?)
        };
        if let Some(t) = trace.as_deref_mut() {
            let slice0 = |s: &Tensor<T>| {
                Tensor::new(s.data()[..n * d].to_vec(), &[n, d]).unwrap()
            };
            t.c_i = c_i.as_ref().map(&slice0);
            t.c_m = c_m.as_ref().map(&slice0);
        }

        let fused = match (c_i, c_m) {
            (Some(i), Some(m)) => i.concat_last_axis(&m)?,
            (Some(i), None) => i,
            (None, Some(m)) => m,
            (None, None) => unreachable!("config guarantees at least one stream"),
        };
        let fused_w = self.cfg.fused_width();
        let h = match &self.fusion_layer {
            Some(layer) => {
                let want = trace.is_some();
                let (out, ft) = encoder_layer(
                    &fused,
                    layer,
                    LayerKind::Vanilla,
                    pad,
                    self.cfg.dropout,
                    ctx,
                    want,
                )?;
                if let Some(t) = trace.as_deref_mut() {
                    t.fusion = ft;
                }
                out
            }
            None => fused,
        };
        let logits = h
            .reshape(&[b * n, fused_w])?
            .matmul(&self.classifier_w)?
            .add(&self.classifier_b)?
            .reshape(&[b, n, self.cfg.num_labels])?;
        Ok(logits)
    }

    /// Training loss. With `rdrop_alpha > 0`, runs two stochastic forward
    /// passes p and q and returns
    /// `(CE(p)+CE(q))/2 + alpha * (KL(p||q)+KL(q||p))/2`,
    /// all terms averaged over non-ignored tokens. Zero alpha is plain
    /// cross-entropy from a single pass.
    pub fn loss(&self, batch: &Batch, ctx: &mut RunCtx) -> Result<Tensor<T>, ModelError> {
        let k = self.cfg.num_labels;
        let flat = batch.b * batch.n;
        let logits1 = self.forward(batch, ctx, None)?.reshape(&[flat, k])?;
        let ce1 = logits1.cross_entropy(&batch.labels, IGNORE_INDEX)?;
        let alpha = self.cfg.rdrop_alpha;
        if alpha == 0.0 {
            return Ok(ce1);
        }
        let logits2 = self.forward(batch, ctx, None)?.reshape(&[flat, k])?;
        let ce2 = logits2.cross_entropy(&batch.labels, IGNORE_INDEX)?;
        let ce = ce1.add(&ce2)?.scale(T::from_f64(0.5));

        let kept: Vec<T> = batch
            .labels
            .iter()
            .map(|&l| if l == IGNORE_INDEX { T::zero() } else { T::one() })
            .collect();
        let count = kept.iter().filter(|&&w| w != T::zero()).count();
        let weights = Tensor::new(kept, &[flat])?;
        let lp = logits1.log_softmax_last_axis()?;
        let lq = logits2.log_softmax_last_axis()?;
        let kl = |a: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
            // KL(p||q) per row = Σ p (log p − log q), then the masked mean.
            let rows = a.exp().mul(&a.sub(b)?)?.sum_last_axis()?;
            Ok(rows
                .mul(&weights)?
                .sum_all()
                .scale(T::from_f64(1.0 / count as f64)))
        };
        let sym = kl(&lp, &lq)?.add(&kl(&lq, &lp)?)?.scale(T::from_f64(0.5));
        Ok(ce.add(&sym.scale(T::from_f64(alpha)))?)
    }

    /// Argmax tag per token; ties break toward the lowest label index.
    /// Inputs longer than `max_len` are cut into half-overlapping windows and
    /// stitched back by centrality.
    pub fn predict_tags(
        &self,
        vocab: &Vocabulary,
        tokens: &[String],
    ) -> Result<Vec<Label>, ModelError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let seq = data::LabeledSequence::new(tokens.to_vec(), vec![Label::O; tokens.len()])?;
        let sequences = vec![seq];
        let mut preds = self.predict_sequences(vocab, &sequences)?;
        Ok(preds.pop().unwrap())
    }

    /// Batched prediction over whole sequences, windowing and stitching each.
    pub fn predict_sequences(
        &self,
        vocab: &Vocabulary,
        sequences: &[data::LabeledSequence],
    ) -> Result<Vec<Vec<Label>>, ModelError> {
        let max_len = self.cfg.max_len;
        let stride = (max_len / 2).max(1);
        let windows = data::window_sequences(sequences, vocab, max_len, stride)?;
        // Predict per window, batched.
        let mut window_preds: Vec<Vec<Label>> = Vec::with_capacity(windows.len());
        let mut ctx = RunCtx::eval();
        for chunk in windows.chunks(self.cfg.batch_size.max(1)) {
            let refs: Vec<&data::Window> = chunk.iter().collect();
            let batch = data::collate(&refs)?;
            let logits = self.forward(&batch, &mut ctx, None)?;
            let v = logits.to_vec();
            let k = self.cfg.num_labels;
            for (wi, w) in chunk.iter().enumerate() {
                let mut labels = Vec::with_capacity(w.len);
                for pos in 0..w.len {
                    let row = &v[(wi * batch.n + pos) * k..(wi * batch.n + pos + 1) * k];
                    labels.push(Label::from_id(argmax_lowest(row)).unwrap());
                }
                window_preds.push(labels);
            }
        }
        // Stitch back per sequence.
        let mut out = Vec::with_capacity(sequences.len());
        for (seq_id, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let mut seq_windows = Vec::new();
            let mut seq_preds = Vec::new();
            for (w, p) in windows.iter().zip(&window_preds) {
                if w.seq_id == seq_id {
                    seq_windows.push(w);
                    seq_preds.push(p);
                }
            }
            let picks = data::stitch_picks(&seq_windows, seq.len())?;
            let labels = picks
                .into_iter()
                .map(|(wi, inside)| seq_preds[wi][inside])
                .collect();
            out.push(labels);
        }
        Ok(out)
    }
}

/// Index of the largest value; earliest wins on ties.
pub fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
