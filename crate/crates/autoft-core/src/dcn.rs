//! Deep & Cross Network backbone with hand-derived backward passes.
//!
//! A parameter bank ([`DcnParams`]) holds per-field embedding tables, a
//! stack of cross layers `x^(l+1) = x^(0) (x^(l)T w) + b + x^(l)`, a ReLU
//! MLP, and a sigmoid prediction layer. The plain-DNN backbone variant
//! omits the cross stack and predicts from the MLP output alone.
//!
//! Backward passes are derived per layer rather than via an autodiff
//! graph; the finite-difference suite in the tests certifies them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::EncodedInstance;
use crate::numerics::{dot, matvec, matvec_t, sigmoid, DenseMatrix, SeededRng};

/// Predictions are clamped into `[YHAT_EPS, 1 - YHAT_EPS]` before logs.
pub const YHAT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Cross network and deep network in parallel (the default).
    Dcn,
    /// Deep network only; the prediction layer sees just `h^(L_d)`.
    Dnn,
}

/// Architecture hyperparameters of one parameter bank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Embedding size `k`, shared across fields.
    pub embed_dim: usize,
    /// Number of cross layers `L_c` (ignored for the DNN backbone).
    pub cross_layers: usize,
    /// Output widths of the deep layers.
    pub deep_layers: Vec<usize>,
    pub backbone: Backbone,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Parameter("embed_dim must be positive".into()));
        }
        if self.deep_layers.contains(&0) {
            return Err(Error::Parameter("deep layer widths must be positive".into()));
        }
        Ok(())
    }

    fn effective_cross_layers(&self) -> usize {
        match self.backbone {
            Backbone::Dcn => self.cross_layers,
            Backbone::Dnn => 0,
        }
    }
}

/// Per-field embedding matrices `V_i` of shape `n_i x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tables: Vec<DenseMatrix>,
    embed_dim: usize,
}

impl EmbeddingTable {
    /// Assembles a table set from per-field matrices; every matrix must
    /// have `embed_dim` columns.
    pub fn from_tables(tables: Vec<DenseMatrix>, embed_dim: usize) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::Parameter("embedding needs at least one field".into()));
        }
        for (i, t) in tables.iter().enumerate() {
            if t.cols() != embed_dim {
                return Err(Error::shape(
                    format!("embedding field {i}"),
                    t.shape(),
                    (t.rows(), embed_dim),
                ));
            }
        }
        Ok(Self { tables, embed_dim })
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn field(&self, i: usize) -> &DenseMatrix {
        &self.tables[i]
    }

    pub fn field_mut(&mut self, i: usize) -> &mut DenseMatrix {
        &mut self.tables[i]
    }

    /// Mean of the embedding rows selected by one field's active indices.
    /// A one-hot field degenerates to a single row; multi-hot duplicates
    /// are kept, so repeated features weight the mean.
    pub fn lookup_field(&self, field: usize, active: &[u32]) -> Result<Vec<f64>> {
        let table = &self.tables[field];
        if active.is_empty() {
            return Err(Error::Internal(format!("field {field} has no active indices")));
        }
        let mut out = vec![0.0; self.embed_dim];
        for &idx in active {
            let idx = idx as usize;
            if idx >= table.rows() {
                return Err(Error::Internal(format!(
                    "index {idx} out of range for field {field} (n = {})",
                    table.rows()
                )));
            }
            for (o, &v) in out.iter_mut().zip(table.row(idx)) {
                *o += v;
            }
        }
        let scale = 1.0 / active.len() as f64;
        for o in &mut out {
            *o *= scale;
        }
        Ok(out)
    }

    /// Concatenation `[x_1, ..., x_m]` of all field embeddings.
    pub fn lookup(&self, inst: &EncodedInstance) -> Result<Vec<f64>> {
        if inst.fields.len() != self.tables.len() {
            return Err(Error::Internal(format!(
                "instance has {} fields, embedding has {}",
                inst.fields.len(),
                self.tables.len()
            )));
        }
        let mut out = Vec::with_capacity(self.tables.len() * self.embed_dim);
        for (i, active) in inst.fields.iter().enumerate() {
            out.extend(self.lookup_field(i, active)?);
        }
        Ok(out)
    }
}

/// Cross-layer weights and biases, each a length-`d` vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

/// Deep-layer weight matrices (`out_l x in_l`) and bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

/// Prediction weights over `[x^(L_c), h^(L_d)]` plus a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionParams {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Which role a parameter matrix plays; decides L2 scope and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
}

/// One complete parameter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct DcnParams {
    pub arch: ArchConfig,
    pub embedding: EmbeddingTable,
    pub cross: CrossParams,
    pub deep: DeepParams,
    pub prediction: PredictionParams,
}

/// Gradients share the bank layout exactly.
pub type DcnGradients = DcnParams;

impl DcnParams {
    /// Fresh bank. Embeddings are uniform in `[-1/sqrt(k), 1/sqrt(k)]`,
    /// cross/deep/prediction weights uniform in
    /// `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, biases zero. Draw order is
    /// fixed (embeddings by field, then cross, deep, prediction) so a seed
    /// fully determines the bank.
    pub fn init(arch: &ArchConfig, vocab_sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        if vocab_sizes.is_empty() {
            return Err(Error::Parameter("need at least one field".into()));
        }
        let k = arch.embed_dim;
        let d = vocab_sizes.len() * k;
        let embed_bound = 1.0 / (k as f64).sqrt();
        let tables = vocab_sizes
            .iter()
            .map(|&n| {
                let values = (0..n * k).map(|_| rng.uniform(-embed_bound, embed_bound)).collect();
                DenseMatrix::from_values(n, k, values)
            })
            .collect::<Result<_>>()?;
        let embedding = EmbeddingTable {
            tables,
            embed_dim: k,
        };

        let n_cross = arch.effective_cross_layers();
        let cross_bound = (6.0 / d as f64).sqrt();
        let mut cross = CrossParams {
            weights: Vec::with_capacity(n_cross),
            biases: Vec::with_capacity(n_cross),
        };
        for _ in 0..n_cross {
            let w = (0..d).map(|_| rng.uniform(-cross_bound, cross_bound)).collect();
            cross.weights.push(DenseMatrix::column(w));
            cross.biases.push(DenseMatrix::column(vec![0.0; d]));
        }

        let mut deep = DeepParams {
            weights: Vec::with_capacity(arch.deep_layers.len()),
            biases: Vec::with_capacity(arch.deep_layers.len()),
        };
        let mut fan_in = d;
        for &out in &arch.deep_layers {
            let bound = (6.0 / fan_in as f64).sqrt();
            let values = (0..out * fan_in).map(|_| rng.uniform(-bound, bound)).collect();
            deep.weights.push(DenseMatrix::from_values(out, fan_in, values)?);
            deep.biases.push(DenseMatrix::column(vec![0.0; out]));
            fan_in = out;
        }

        let pred_len = prediction_input_len(arch, d);
        let bound = (6.0 / pred_len as f64).sqrt();
        let w = (0..pred_len).map(|_| rng.uniform(-bound, bound)).collect();
        let prediction = PredictionParams {
            weight: DenseMatrix::column(w),
            bias: DenseMatrix::column(vec![0.0]),
        };

        Ok(Self {
            arch: arch.clone(),
            embedding,
            cross,
            deep,
            prediction,
        })
    }

    /// Assembles a bank from its parts, validating every shape against the
    /// architecture (used by the checkpoint loader).
    pub fn from_parts(
        arch: ArchConfig,
        embedding: EmbeddingTable,
        cross: CrossParams,
        deep: DeepParams,
        prediction: PredictionParams,
    ) -> Result<Self> {
        arch.validate()?;
        if embedding.embed_dim != arch.embed_dim {
            return Err(Error::Parameter(format!(
                "embedding dim {} does not match architecture k = {}",
                embedding.embed_dim, arch.embed_dim
            )));
        }
        let d = embedding.num_fields() * arch.embed_dim;
        let n_cross = arch.effective_cross_layers();
        if cross.weights.len() != n_cross || cross.biases.len() != n_cross {
            return Err(Error::Parameter(format!(
                "expected {n_cross} cross layers, got {} weights / {} biases",
                cross.weights.len(),
                cross.biases.len()
            )));
        }
        for (l, (w, b)) in cross.weights.iter().zip(&cross.biases).enumerate() {
            if w.shape() != (d, 1) || b.shape() != (d, 1) {
                return Err(Error::shape(format!("cross layer {l}"), w.shape(), (d, 1)));
            }
        }
        if deep.weights.len() != arch.deep_layers.len() || deep.biases.len() != arch.deep_layers.len() {
            return Err(Error::Parameter(format!(
                "expected {} deep layers, got {} weights / {} biases",
                arch.deep_layers.len(),
                deep.weights.len(),
                deep.biases.len()
            )));
        }
        let mut fan_in = d;
        for (l, (&out, (w, b))) in arch
            .deep_layers
            .iter()
            .zip(deep.weights.iter().zip(&deep.biases))
            .enumerate()
        {
            if w.shape() != (out, fan_in) || b.shape() != (out, 1) {
                return Err(Error::shape(format!("deep layer {l}"), w.shape(), (out, fan_in)));
            }
            fan_in = out;
        }
        let pred_len = prediction_input_len(&arch, d);
        if prediction.weight.shape() != (pred_len, 1) || prediction.bias.shape() != (1, 1) {
            return Err(Error::shape("prediction", prediction.weight.shape(), (pred_len, 1)));
        }
        Ok(Self {
            arch,
            embedding,
            cross,
            deep,
            prediction,
        })
    }

    /// Concatenated embedding width `d = m * k`.
    pub fn input_dim(&self) -> usize {
        self.embedding.num_fields() * self.embedding.embed_dim
    }

    /// Same layout, all values zero. Gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, m| {
            for v in m.as_mut_slice() {
                *v = 0.0;
            }
        });
        z
    }

    /// Visits every parameter matrix with a stable name and kind. The
    /// visit order is the canonical parameter order used by checkpoints,
    /// optimizer buffers, flattening and hashing.
    pub fn visit(&self, f: &mut impl FnMut(&str, ParamKind, &DenseMatrix)) {
        for (i, t) in self.embedding.tables.iter().enumerate() {
            f(&format!("embed.{i}"), ParamKind::Embedding, t);
        }
        for (l, w) in self.cross.weights.iter().enumerate() {
            f(&format!("cross.w.{l}"), ParamKind::Weight, w);
        }
        for (l, b) in self.cross.biases.iter().enumerate() {
            f(&format!("cross.b.{l}"), ParamKind::Bias, b);
        }
        for (l, w) in self.deep.weights.iter().enumerate() {
            f(&format!("deep.w.{l}"), ParamKind::Weight, w);
        }
        for (l, b) in self.deep.biases.iter().enumerate() {
            f(&format!("deep.b.{l}"), ParamKind::Bias, b);
        }
        f("pred.w", ParamKind::Weight, &self.prediction.weight);
        f("pred.b", ParamKind::Bias, &self.prediction.bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, ParamKind, &mut DenseMatrix)) {
        for (i, t) in self.embedding.tables.iter_mut().enumerate() {
            f(&format!("embed.{i}"), ParamKind::Embedding, t);
        }
        for (l, w) in self.cross.weights.iter_mut().enumerate() {
            f(&format!("cross.w.{l}"), ParamKind::Weight, w);
        }
        for (l, b) in self.cross.biases.iter_mut().enumerate() {
            f(&format!("cross.b.{l}"), ParamKind::Bias, b);
        }
        for (l, w) in self.deep.weights.iter_mut().enumerate() {
            f(&format!("deep.w.{l}"), ParamKind::Weight, w);
        }
        for (l, b) in self.deep.biases.iter_mut().enumerate() {
            f(&format!("deep.b.{l}"), ParamKind::Bias, b);
        }
        f("pred.w", ParamKind::Weight, &mut self.prediction.weight);
        f("pred.b", ParamKind::Bias, &mut self.prediction.bias);
    }

    /// Mutable references to every matrix in canonical order.
    pub fn matrices_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        out.extend(self.embedding.tables.iter_mut());
        out.extend(self.cross.weights.iter_mut());
        out.extend(self.cross.biases.iter_mut());
        out.extend(self.deep.weights.iter_mut());
        out.extend(self.deep.biases.iter_mut());
        out.push(&mut self.prediction.weight);
        out.push(&mut self.prediction.bias);
        out
    }

    pub fn matrices(&self) -> Vec<&DenseMatrix> {
        let mut out: Vec<&DenseMatrix> = Vec::new();
        out.extend(self.embedding.tables.iter());
        out.extend(self.cross.weights.iter());
        out.extend(self.cross.biases.iter());
        out.extend(self.deep.weights.iter());
        out.extend(self.deep.biases.iter());
        out.push(&self.prediction.weight);
        out.push(&self.prediction.bias);
        out
    }

    /// `self += factor * other`, matrix by matrix.
    pub fn accumulate(&mut self, other: &DcnParams, factor: f64) {
        for (dst, src) in self.matrices_mut().into_iter().zip(other.matrices()) {
            debug_assert_eq!(dst.shape(), src.shape());
            for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += factor * s;
            }
        }
    }

    /// Sum of squares over the L2-regularized parameter set: weight
    /// matrices/vectors always, embedding tables only when opted in,
    /// biases never.
    pub fn l2_norm_sq(&self, include_embeddings: bool) -> f64 {
        let mut sum = 0.0;
        self.visit(&mut |_, kind, m| {
            let include = match kind {
                ParamKind::Weight => true,
                ParamKind::Embedding => include_embeddings,
                ParamKind::Bias => false,
            };
            if include {
                sum += m.iter().map(|v| v * v).sum::<f64>();
            }
        });
        sum
    }

    /// Adds `2 * lambda * w` to the gradients of the L2-regularized set.
    pub fn add_l2_gradient(&self, grads: &mut DcnParams, lambda: f64, include_embeddings: bool) {
        if lambda == 0.0 {
            return;
        }
        let sources = self.matrices();
        let mut kinds = Vec::with_capacity(sources.len());
        self.visit(&mut |_, kind, _| kinds.push(kind));
        for ((dst, src), kind) in grads.matrices_mut().into_iter().zip(sources).zip(kinds) {
            let include = match kind {
                ParamKind::Weight => true,
                ParamKind::Embedding => include_embeddings,
                ParamKind::Bias => false,
            };
            if include {
                for (g, &w) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *g += 2.0 * lambda * w;
                }
            }
        }
    }

    /// Total scalar parameter count.
    pub fn flat_len(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for m in self.matrices() {
            out.extend_from_slice(m.as_slice());
        }
    }

    pub fn read_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// SHA-256 over the raw parameter bytes in canonical order; the
    /// freezing contract is asserted by comparing these hashes.
    pub fn byte_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, _, m| {
            hasher.update(name.as_bytes());
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        });
        let mut hex = String::new();
        for b in hasher.finalize() {
            use std::fmt::Write;
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

fn prediction_input_len(arch: &ArchConfig, d: usize) -> usize {
    let deep_out = arch.deep_layers.last().copied().unwrap_or(d);
    match arch.backbone {
        Backbone::Dcn => d + deep_out,
        Backbone::Dnn => deep_out,
    }
}

/// One cross layer: `x^(l+1) = x0 * <xl, w> + b + xl`.
pub fn cross_layer_forward(x0: &[f64], xl: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = x0.len();
    if xl.len() != d || w.len() != d || b.len() != d {
        return Err(Error::shape(
            "cross_layer_forward",
            (d, 1),
            (xl.len().max(w.len()).max(b.len()), 1),
        ));
    }
    let s = dot(xl, w);
    Ok(x0
        .iter()
        .zip(xl)
        .zip(b)
        .map(|((&x0i, &xli), &bi)| x0i * s + bi + xli)
        .collect())
}

/// One deep layer: `ReLU(w h + b)`.
pub fn deep_layer_forward(h: &[f64], w: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != h.len() || w.rows() != b.len() {
        return Err(Error::shape("deep_layer_forward", w.shape(), (h.len(), b.len())));
    }
    let mut z = matvec(w, h);
    for (zi, &bi) in z.iter_mut().zip(b) {
        *zi = (*zi + bi).max(0.0);
    }
    Ok(z)
}

/// Prediction `sigmoid(<w_o, [x_cross, h_deep]> + b_o)`. `x_cross` is
/// absent exactly when the backbone is DNN.
pub fn predict(x_cross: Option<&[f64]>, h_deep: &[f64], p: &PredictionParams) -> Result<f64> {
    let total = x_cross.map_or(0, <[f64]>::len) + h_deep.len();
    if total != p.weight.rows() {
        return Err(Error::shape("predict", (p.weight.rows(), 1), (total, 1)));
    }
    let w = p.weight.as_slice();
    let mut z = p.bias.as_slice()[0];
    let mut offset = 0;
    if let Some(xc) = x_cross {
        z += dot(xc, &w[..xc.len()]);
        offset = xc.len();
    }
    z += dot(h_deep, &w[offset..]);
    Ok(sigmoid(z))
}

/// Cross-entropy of the clamped prediction plus the L2 term.
pub fn loss(y: u8, yhat: f64, lambda: f64, params: &DcnParams, l2_include_embeddings: bool) -> f64 {
    cross_entropy(y, yhat) + lambda * params.l2_norm_sq(l2_include_embeddings)
}

/// `-y log(yhat) - (1-y) log(1-yhat)` with yhat clamped away from {0,1}.
pub fn cross_entropy(y: u8, yhat: f64) -> f64 {
    let p = yhat.clamp(YHAT_EPS, 1.0 - YHAT_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Cached activations of one forward pass; everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Embedding concatenation `x^(0)` (also `h^(0)`).
    pub x0: Vec<f64>,
    /// Cross activations `x^(0) ..= x^(L_c)`; just `[x0]` for DNN.
    pub cross_x: Vec<Vec<f64>>,
    /// Deep activations `h^(0) ..= h^(L_d)` (post-ReLU).
    pub deep_h: Vec<Vec<f64>>,
    /// Deep pre-activations `w h + b` per layer.
    pub deep_pre: Vec<Vec<f64>>,
    pub logit: f64,
    pub yhat: f64,
}

/// Full forward pass for one instance.
pub fn forward(inst: &EncodedInstance, params: &DcnParams) -> Result<(f64, ForwardTape)> {
    let x0 = params.embedding.lookup(inst)?;
    let mut cross_x = vec![x0.clone()];
    if params.arch.backbone == Backbone::Dcn {
        for l in 0..params.cross.weights.len() {
            let next = cross_layer_forward(
                &x0,
                &cross_x[l],
                params.cross.weights[l].as_slice(),
                params.cross.biases[l].as_slice(),
            )?;
            cross_x.push(next);
        }
    }

    let mut deep_h = vec![x0.clone()];
    let mut deep_pre = Vec::with_capacity(params.deep.weights.len());
    for l in 0..params.deep.weights.len() {
        let w = &params.deep.weights[l];
        let b = params.deep.biases[l].as_slice();
        if w.cols() != deep_h[l].len() || w.rows() != b.len() {
            return Err(Error::shape("forward deep layer", w.shape(), (deep_h[l].len(), b.len())));
        }
        let mut z = matvec(w, &deep_h[l]);
        for (zi, &bi) in z.iter_mut().zip(b) {
            *zi += bi;
        }
        deep_h.push(z.iter().map(|&v| v.max(0.0)).collect());
        deep_pre.push(z);
    }

    let h_out = deep_h.last().unwrap();
    let x_cross = match params.arch.backbone {
        Backbone::Dcn => Some(cross_x.last().unwrap().as_slice()),
        Backbone::Dnn => None,
    };
    let yhat = predict(x_cross, h_out, &params.prediction)?;
    let logit = {
        let w = params.prediction.weight.as_slice();
        let mut z = params.prediction.bias.as_slice()[0];
        let mut offset = 0;
        if let Some(xc) = x_cross {
            z += dot(xc, &w[..xc.len()]);
            offset = xc.len();
        }
        z + dot(h_out, &w[offset..])
    };
    Ok((
        yhat,
        ForwardTape {
            x0,
            cross_x,
            deep_h,
            deep_pre,
            logit,
            yhat,
        },
    ))
}

/// Backward through the prediction layer given `dL/dlogit`. Returns the
/// gradients flowing into the cross output and the deep output.
fn prediction_backward(
    params: &DcnParams,
    tape: &ForwardTape,
    dlogit: f64,
    grads: &mut DcnGradients,
) -> (Vec<f64>, Vec<f64>) {
    let h_out = tape.deep_h.last().unwrap();
    let w = params.prediction.weight.as_slice();
    let gw = grads.prediction.weight.as_mut_slice();
    let (cross_len, offset) = match params.arch.backbone {
        Backbone::Dcn => (tape.x0.len(), tape.x0.len()),
        Backbone::Dnn => (0, 0),
    };
    let mut g_cross = vec![0.0; cross_len];
    if params.arch.backbone == Backbone::Dcn {
        let xc = tape.cross_x.last().unwrap();
        for i in 0..cross_len {
            gw[i] += dlogit * xc[i];
            g_cross[i] = dlogit * w[i];
        }
    }
    let mut g_deep = vec![0.0; h_out.len()];
    for i in 0..h_out.len() {
        gw[offset + i] += dlogit * h_out[i];
        g_deep[i] = dlogit * w[offset + i];
    }
    grads.prediction.bias.as_mut_slice()[0] += dlogit;
    (g_cross, g_deep)
}

/// Backward through the deep stack. Consumes `dL/dh^(L_d)` and returns
/// `dL/dh^(0)` (the embedding gradient through the deep branch).
fn deep_backward(
    params: &DcnParams,
    tape: &ForwardTape,
    mut g: Vec<f64>,
    grads: &mut DcnGradients,
) -> Vec<f64> {
    for l in (0..params.deep.weights.len()).rev() {
        let pre = &tape.deep_pre[l];
        let h_in = &tape.deep_h[l];
        // ReLU mask
        let gz: Vec<f64> = g
            .iter()
            .zip(pre)
            .map(|(&gi, &zi)| if zi > 0.0 { gi } else { 0.0 })
            .collect();
        let w = &params.deep.weights[l];
        let gw = &mut grads.deep.weights[l];
        for (r, &gzr) in gz.iter().enumerate() {
            let row = gw.row_mut(r);
            for (c, &hc) in h_in.iter().enumerate() {
                row[c] += gzr * hc;
            }
        }
        for (gb, &gzr) in grads.deep.biases[l].as_mut_slice().iter_mut().zip(&gz) {
            *gb += gzr;
        }
        g = matvec_t(w, &gz);
    }
    g
}

/// Backward through the cross stack. Consumes `dL/dx^(L_c)` and returns
/// the total gradient on `x^(0)`, accounting for both the residual chain
/// and the direct `x^(0)` factor in every layer.
fn cross_backward(
    params: &DcnParams,
    tape: &ForwardTape,
    mut g: Vec<f64>,
    grads: &mut DcnGradients,
) -> Vec<f64> {
    let x0 = &tape.x0;
    let mut g_x0 = vec![0.0; x0.len()];
    for l in (0..params.cross.weights.len()).rev() {
        let xl = &tape.cross_x[l];
        let w = params.cross.weights[l].as_slice();
        let s = dot(xl, w);
        let g_dot_x0 = dot(&g, x0);
        // d(x0 * s)/dx0 = s I
        for (gx, &gi) in g_x0.iter_mut().zip(&g) {
            *gx += s * gi;
        }
        // bias gradient is g itself
        for (gb, &gi) in grads.cross.biases[l].as_mut_slice().iter_mut().zip(&g) {
            *gb += gi;
        }
        // dL/dw = (g . x0) xl
        for (gw, &xli) in grads.cross.weights[l].as_mut_slice().iter_mut().zip(xl) {
            *gw += g_dot_x0 * xli;
        }
        // dL/dxl = g (residual) + (g . x0) w (through the scalar product)
        let mut g_next = g;
        for (gn, &wi) in g_next.iter_mut().zip(w) {
            *gn += g_dot_x0 * wi;
        }
        g = g_next;
    }
    for (gx, gi) in g_x0.iter_mut().zip(g) {
        *gx += gi;
    }
    g_x0
}

/// Scatters the gradient on the embedding concatenation back into the
/// per-field tables, dividing by the active-index count per the mean rule.
fn embedding_backward(
    inst: &EncodedInstance,
    embed_dim: usize,
    g_x0: &[f64],
    grads: &mut DcnGradients,
) {
    for (i, active) in inst.fields.iter().enumerate() {
        let slice = &g_x0[i * embed_dim..(i + 1) * embed_dim];
        let scale = 1.0 / active.len() as f64;
        let table = &mut grads.embedding.tables[i];
        for &idx in active {
            let row = table.row_mut(idx as usize);
            for (r, &gi) in row.iter_mut().zip(slice) {
                *r += scale * gi;
            }
        }
    }
}

/// Exact gradients of [`loss`] with respect to every parameter.
pub fn backward(
    inst: &EncodedInstance,
    params: &DcnParams,
    tape: &ForwardTape,
    y: u8,
    lambda: f64,
    l2_include_embeddings: bool,
) -> DcnGradients {
    let mut grads = params.zeros_like();
    let dlogit = tape.yhat - f64::from(y);
    let (g_cross, g_deep) = prediction_backward(params, tape, dlogit, &mut grads);
    let g_deep_in = deep_backward(params, tape, g_deep, &mut grads);
    let mut g_x0 = match params.arch.backbone {
        Backbone::Dcn => cross_backward(params, tape, g_cross, &mut grads),
        Backbone::Dnn => vec![0.0; tape.x0.len()],
    };
    for (gx, gd) in g_x0.iter_mut().zip(g_deep_in) {
        *gx += gd;
    }
    embedding_backward(inst, params.embedding.embed_dim, &g_x0, &mut grads);
    params.add_l2_gradient(&mut grads, lambda, l2_include_embeddings);
    grads
}
