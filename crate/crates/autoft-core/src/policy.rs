//! Routing policies and the straight-through estimator.
//!
//! AutoFT holds two parameter banks: a frozen pre-trained source bank and a
//! trainable target bank initialized from it. Three small policy networks
//! choose, per instance, which bank serves each embedding field, each cross
//! layer and each deep layer. Decisions are binary; category 0 means
//! "pretrained" and category 1 means "finetuned". A route bit of 1 selects
//! the pretrained parameters, matching the mixing rule
//! `out = p * F_src(in) + (1 - p) * F_tgt(in)`.
//!
//! Training samples hard decisions with the Gumbel-max trick and
//! backpropagates through the temperature-`tau` softmax relaxation
//! (straight-through). Inference takes the argmax of the raw logits with
//! no noise, so serving is deterministic.

use crate::dcn::{
    cross_layer_forward, cross_entropy, DcnGradients, DcnParams, EmbeddingTable, ParamKind,
};
use crate::error::{Error, Result};
use crate::features::EncodedInstance;
use crate::numerics::{
    dot, log_softmax, matvec, matvec_t, sample_gumbel, sigmoid, DenseMatrix, SeededRng,
};

/// One two-layer policy network emitting two logits per decision unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    /// Hidden layer, `hidden x input`.
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    /// Output layer, `(2 * decision_count) x hidden`.
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
    pub decision_count: usize,
}

impl PolicyNetwork {
    /// Small-scale init: He-uniform weights, zero biases except a +0.5
    /// bias on every "pretrained" logit so early routing mildly prefers
    /// the frozen bank.
    pub fn init(input_dim: usize, hidden: usize, decision_count: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || decision_count == 0 {
            return Err(Error::Parameter(format!(
                "policy network dims must be positive (input {input_dim}, hidden {hidden}, decisions {decision_count})"
            )));
        }
        let bound1 = (6.0 / input_dim as f64).sqrt();
        let w1 = DenseMatrix::from_values(
            hidden,
            input_dim,
            (0..hidden * input_dim).map(|_| rng.uniform(-bound1, bound1)).collect(),
        )?;
        let out = 2 * decision_count;
        let bound2 = (6.0 / hidden as f64).sqrt();
        let w2 = DenseMatrix::from_values(
            out,
            hidden,
            (0..out * hidden).map(|_| rng.uniform(-bound2, bound2)).collect(),
        )?;
        let mut b2 = vec![0.0; out];
        for j in 0..decision_count {
            b2[2 * j] = 0.5;
        }
        Ok(Self {
            w1,
            b1: DenseMatrix::column(vec![0.0; hidden]),
            w2,
            b2: DenseMatrix::column(b2),
            decision_count,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Both fully-connected layers apply ReLU, so the logits handed to the
    /// Gumbel machinery are `relu(W2 relu(W1 x + b1) + b2)`.
    fn eval_logits(&self, input: &[f64]) -> Result<PolicyNetTape> {
        if input.len() != self.w1.cols() {
            return Err(Error::shape("policy input", self.w1.shape(), (input.len(), 1)));
        }
        let mut h_pre = matvec(&self.w1, input);
        for (z, &b) in h_pre.iter_mut().zip(self.b1.as_slice()) {
            *z += b;
        }
        let h: Vec<f64> = h_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut u = matvec(&self.w2, &h);
        for (z, &b) in u.iter_mut().zip(self.b2.as_slice()) {
            *z += b;
        }
        let logits = u.iter().map(|&v| v.max(0.0)).collect();
        Ok(PolicyNetTape {
            input: input.to_vec(),
            h_pre,
            h,
            u,
            logits,
        })
    }
}

/// Activations of one policy-network evaluation.
#[derive(Debug, Clone)]
pub struct PolicyNetTape {
    input: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
    /// Pre-activation of the output layer (before the outer ReLU).
    u: Vec<f64>,
    /// Final logits, two per decision.
    pub logits: Vec<f64>,
}

/// One routing decision with everything the backward pass needs.
#[derive(Debug, Clone, Copy)]
pub struct Decision {
    /// 1 selects the pretrained bank, 0 the finetuned bank.
    pub pretrained_bit: u8,
    /// Mixing coefficient used in the forward value path (the hard bit, or
    /// the relaxation `Y_0` in soft mode).
    pub p_mix: f64,
    /// Softmax relaxation `(Y_pretrained, Y_finetuned)` at temperature tau.
    pub y_soft: [f64; 2],
    /// Log of the categorical probabilities `alpha` for the pair.
    pub log_alpha: [f64; 2],
}

impl Decision {
    fn forced(bit: u8) -> Self {
        let p = f64::from(bit);
        Self {
            pretrained_bit: bit,
            p_mix: p,
            y_soft: [p, 1.0 - p],
            log_alpha: [0.0, 0.0],
        }
    }
}

/// Gumbel-max sample over one 2-category pair: perturbs each log
/// probability with independent Gumbel noise and returns the argmax
/// category. Ties resolve to category 0.
pub fn gumbel_argmax_pair(log_alpha: [f64; 2], rng: &mut SeededRng) -> (usize, [f64; 2]) {
    let g = [sample_gumbel(rng), sample_gumbel(rng)];
    let s0 = log_alpha[0] + g[0];
    let s1 = log_alpha[1] + g[1];
    (usize::from(s1 > s0), g)
}

/// One Gumbel-Softmax draw over a pair: the hard argmax category plus the
/// temperature-`tau` softmax relaxation `Y` computed from the same noise.
pub fn gumbel_softmax_pair(log_alpha: [f64; 2], tau: f64, rng: &mut SeededRng) -> (usize, [f64; 2]) {
    let (category, g) = gumbel_argmax_pair(log_alpha, rng);
    let v0 = (log_alpha[0] + g[0]) / tau;
    let v1 = (log_alpha[1] + g[1]) / tau;
    let y0 = sigmoid(v0 - v1);
    (category, [y0, 1.0 - y0])
}

/// How routing decisions are produced during a forward pass.
pub enum RouteMode<'a> {
    /// Training: Gumbel-perturbed hard argmax in the value path, softmax
    /// relaxation retained for the backward pass (straight-through).
    SampleHard { tau: f64, rng: &'a mut SeededRng },
    /// Training oracle: the relaxation itself is the mixing coefficient.
    /// The gradients of this forward are exactly what the
    /// straight-through backward computes, which makes it finite-
    /// difference checkable.
    SampleSoft { tau: f64, rng: &'a mut SeededRng },
    /// Serving: argmax of the raw logits, no sampling.
    Infer,
    /// Externally pinned route bits (1 = pretrained).
    Forced(&'a RouteBits),
}

impl RouteMode<'_> {
    fn tau(&self) -> Result<Option<f64>> {
        match self {
            RouteMode::SampleHard { tau, .. } | RouteMode::SampleSoft { tau, .. } => {
                if !tau.is_finite() || *tau <= 0.0 {
                    return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
                }
                Ok(Some(*tau))
            }
            _ => Ok(None),
        }
    }
}

/// Plain route bits for forced routing, 1 = pretrained.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteBits {
    pub embed: Vec<u8>,
    pub cross: Vec<u8>,
    pub deep: Vec<u8>,
}

impl RouteBits {
    pub fn zeros(m: usize, cross_layers: usize, deep_layers: usize) -> Self {
        Self {
            embed: vec![0; m],
            cross: vec![0; cross_layers],
            deep: vec![0; deep_layers],
        }
    }
}

/// The full set of decisions one instance took.
#[derive(Debug, Clone)]
pub struct RouteDecision {
    pub embed: Vec<Decision>,
    pub cross: Vec<Decision>,
    pub deep: Vec<Decision>,
}

impl RouteDecision {
    pub fn bits(&self) -> RouteBits {
        RouteBits {
            embed: self.embed.iter().map(|d| d.pretrained_bit).collect(),
            cross: self.cross.iter().map(|d| d.pretrained_bit).collect(),
            deep: self.deep.iter().map(|d| d.pretrained_bit).collect(),
        }
    }
}

/// Which policy networks exist. Ablations disable components; a disabled
/// component always routes to the finetuned bank (bit 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyComponents {
    pub embed: bool,
    pub cross: bool,
    pub deep: bool,
}

impl PolicyComponents {
    pub fn all() -> Self {
        Self {
            embed: true,
            cross: true,
            deep: true,
        }
    }
}

/// The three policy networks. `None` means the component is ablated (or
/// structurally absent, e.g. no cross layers) and is never evaluated,
/// trained, or regularized.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub embed: Option<PolicyNetwork>,
    pub cross: Option<PolicyNetwork>,
    pub deep: Option<PolicyNetwork>,
}

impl PolicySet {
    pub fn visit(&self, f: &mut impl FnMut(&str, ParamKind, &DenseMatrix)) {
        for (name, net) in [("embed", &self.embed), ("cross", &self.cross), ("deep", &self.deep)] {
            if let Some(net) = net {
                f(&format!("policy.{name}.w1"), ParamKind::Weight, &net.w1);
                f(&format!("policy.{name}.b1"), ParamKind::Bias, &net.b1);
                f(&format!("policy.{name}.w2"), ParamKind::Weight, &net.w2);
                f(&format!("policy.{name}.b2"), ParamKind::Bias, &net.b2);
            }
        }
    }

    pub fn matrices(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for net in [&self.embed, &self.cross, &self.deep].into_iter().flatten() {
            out.extend([&net.w1, &net.b1, &net.w2, &net.b2]);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        for net in [&mut self.embed, &mut self.cross, &mut self.deep]
            .into_iter()
            .flatten()
        {
            out.push(&mut net.w1);
            out.push(&mut net.b1);
            out.push(&mut net.w2);
            out.push(&mut net.b2);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let zero_net = |net: &Option<PolicyNetwork>| {
            net.as_ref().map(|n| PolicyNetwork {
                w1: n.w1.zeros_like(),
                b1: n.b1.zeros_like(),
                w2: n.w2.zeros_like(),
                b2: n.b2.zeros_like(),
                decision_count: n.decision_count,
            })
        };
        Self {
            embed: zero_net(&self.embed),
            cross: zero_net(&self.cross),
            deep: zero_net(&self.deep),
        }
    }

    pub fn accumulate(&mut self, other: &PolicySet, factor: f64) {
        for (dst, src) in self.matrices_mut().into_iter().zip(other.matrices()) {
            debug_assert_eq!(dst.shape(), src.shape());
            for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += factor * s;
            }
        }
    }

    /// Sum of squares over policy weight matrices (biases excluded).
    pub fn l2_norm_sq(&self) -> f64 {
        let mut sum = 0.0;
        self.visit(&mut |_, kind, m| {
            if kind == ParamKind::Weight {
                sum += m.iter().map(|v| v * v).sum::<f64>();
            }
        });
        sum
    }

    /// Adds `2 * lambda * w` to the gradients of the policy weights.
    pub fn add_l2_gradient(&self, grads: &mut PolicySet, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        let mut kinds = Vec::new();
        self.visit(&mut |_, kind, _| kinds.push(kind));
        for ((dst, src), kind) in grads.matrices_mut().into_iter().zip(self.matrices()).zip(kinds) {
            if kind == ParamKind::Weight {
                for (g, &w) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *g += 2.0 * lambda * w;
                }
            }
        }
    }
}

/// Frozen source bank, trainable target bank, trainable policies. The
/// prediction layer is taken from the target bank only and therefore is
/// always fine-tuned.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoftModel {
    pub source: DcnParams,
    pub target: DcnParams,
    pub policies: PolicySet,
}

impl AutoftModel {
    /// Builds the composite model from a pre-trained bank: the source bank
    /// is the checkpoint verbatim, the target bank starts as a copy, and
    /// the enabled policy networks are freshly initialized (draw order:
    /// embed, cross, deep).
    pub fn from_pretrained(
        pretrained: DcnParams,
        policy_hidden: usize,
        components: PolicyComponents,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = pretrained.input_dim();
        let m = pretrained.embedding.num_fields();
        let n_cross = pretrained.cross.weights.len();
        let n_deep = pretrained.deep.weights.len();
        let embed = components
            .embed
            .then(|| PolicyNetwork::init(d, policy_hidden, m, rng))
            .transpose()?;
        let cross = (components.cross && n_cross > 0)
            .then(|| PolicyNetwork::init(d, policy_hidden, n_cross, rng))
            .transpose()?;
        let deep = (components.deep && n_deep > 0)
            .then(|| PolicyNetwork::init(d, policy_hidden, n_deep, rng))
            .transpose()?;
        Ok(Self {
            source: pretrained.clone(),
            target: pretrained,
            policies: PolicySet { embed, cross, deep },
        })
    }

    pub fn components(&self) -> PolicyComponents {
        PolicyComponents {
            embed: self.policies.embed.is_some(),
            cross: self.policies.cross.is_some(),
            deep: self.policies.deep.is_some(),
        }
    }

    fn check_banks(&self) -> Result<()> {
        if self.source.arch != self.target.arch {
            return Err(Error::Internal("source and target banks have different architectures".into()));
        }
        Ok(())
    }
}

/// Gradients of one AutoFT step: the frozen source bank has no buffer at
/// all, which is the freezing contract in structural form.
#[derive(Debug, Clone)]
pub struct AutoftGradients {
    pub target: DcnGradients,
    pub policies: PolicySet,
}

impl AutoftGradients {
    pub fn zeros_like(model: &AutoftModel) -> Self {
        Self {
            target: model.target.zeros_like(),
            policies: model.policies.zeros_like(),
        }
    }

    pub fn accumulate(&mut self, other: &AutoftGradients, factor: f64) {
        self.target.accumulate(&other.target, factor);
        self.policies.accumulate(&other.policies, factor);
    }
}

/// Everything the straight-through backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct AutoftTape {
    pub route: RouteDecision,
    pub tau: f64,
    x_src: Vec<f64>,
    x_tgt: Vec<f64>,
    x_mixed: Vec<f64>,
    embed_net: Option<PolicyNetTape>,
    cross_net: Option<PolicyNetTape>,
    deep_net: Option<PolicyNetTape>,
    /// Routed cross activations, length `L_c + 1`.
    cross_x: Vec<Vec<f64>>,
    cross_src_out: Vec<Vec<f64>>,
    cross_tgt_out: Vec<Vec<f64>>,
    /// Routed deep activations, length `L_d + 1`.
    deep_h: Vec<Vec<f64>>,
    deep_src_pre: Vec<Vec<f64>>,
    deep_tgt_pre: Vec<Vec<f64>>,
    deep_src_out: Vec<Vec<f64>>,
    deep_tgt_out: Vec<Vec<f64>>,
    pub logit: f64,
    pub yhat: f64,
}

/// Field-wise embedding mix: per field `i`,
/// `x_i = p_e[i] * lookup(src) + (1 - p_e[i]) * lookup(tgt)`.
pub fn mix_field_embeddings(
    p_e: &[f64],
    src: &EmbeddingTable,
    tgt: &EmbeddingTable,
    inst: &EncodedInstance,
) -> Result<Vec<f64>> {
    if p_e.len() != src.num_fields() || src.num_fields() != tgt.num_fields() {
        return Err(Error::shape(
            "mix_field_embeddings",
            (p_e.len(), 1),
            (src.num_fields(), tgt.num_fields()),
        ));
    }
    let x_src = src.lookup(inst)?;
    let x_tgt = tgt.lookup(inst)?;
    Ok(mix_fields_from_lookups(p_e, &x_src, &x_tgt, src.embed_dim()))
}

fn mix_fields_from_lookups(p_e: &[f64], x_src: &[f64], x_tgt: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x_src.len()];
    for (i, &p) in p_e.iter().enumerate() {
        for j in i * k..(i + 1) * k {
            out[j] = p * x_src[j] + (1.0 - p) * x_tgt[j];
        }
    }
    out
}

/// Routed cross layer (both branches consume the same routed input):
/// `p * F_src(x0, xl) + (1 - p) * F_tgt(x0, xl)`.
pub fn routed_cross_forward(
    x0_hat: &[f64],
    xl_hat: &[f64],
    p: f64,
    src_w: &[f64],
    src_b: &[f64],
    tgt_w: &[f64],
    tgt_b: &[f64],
) -> Result<Vec<f64>> {
    let a = cross_layer_forward(x0_hat, xl_hat, src_w, src_b)?;
    let b = cross_layer_forward(x0_hat, xl_hat, tgt_w, tgt_b)?;
    Ok(a.iter().zip(&b).map(|(&ai, &bi)| p * ai + (1.0 - p) * bi).collect())
}

/// Routed deep layer: `p * ReLU(w_src h + b_src) + (1 - p) * ReLU(w_tgt h + b_tgt)`.
pub fn routed_deep_forward(
    hl_hat: &[f64],
    p: f64,
    src_w: &DenseMatrix,
    src_b: &[f64],
    tgt_w: &DenseMatrix,
    tgt_b: &[f64],
) -> Result<Vec<f64>> {
    let a = crate::dcn::deep_layer_forward(hl_hat, src_w, src_b)?;
    let b = crate::dcn::deep_layer_forward(hl_hat, tgt_w, tgt_b)?;
    Ok(a.iter().zip(&b).map(|(&ai, &bi)| p * ai + (1.0 - p) * bi).collect())
}

struct PolicyEvalOutcome {
    decisions: Vec<Decision>,
    tape: Option<PolicyNetTape>,
}

/// Runs one policy network (or produces forced bits) for `count` decisions.
fn eval_policy(
    net: &Option<PolicyNetwork>,
    input: &[f64],
    count: usize,
    mode: &mut RouteMode<'_>,
    forced_bits: Option<&[u8]>,
) -> Result<PolicyEvalOutcome> {
    // Disabled component: always fine-tuned, no network evaluation.
    let Some(net) = net else {
        return Ok(PolicyEvalOutcome {
            decisions: vec![Decision::forced(0); count],
            tape: None,
        });
    };
    if net.decision_count != count {
        return Err(Error::Internal(format!(
            "policy expects {} decisions, component has {count}",
            net.decision_count
        )));
    }
    if let Some(bits) = forced_bits {
        if bits.len() != count {
            return Err(Error::shape("forced route bits", (bits.len(), 1), (count, 1)));
        }
        return Ok(PolicyEvalOutcome {
            decisions: bits.iter().map(|&b| Decision::forced(b)).collect(),
            tape: None,
        });
    }

    let tape = net.eval_logits(input)?;
    let mut decisions = Vec::with_capacity(count);
    for j in 0..count {
        let pair = [tape.logits[2 * j], tape.logits[2 * j + 1]];
        let la = log_softmax(&pair);
        let log_alpha = [la[0], la[1]];
        match mode {
            RouteMode::Infer => {
                // deterministic argmax of the raw logits; ties go to
                // category 0 (pretrained)
                let bit = u8::from(pair[0] >= pair[1]);
                decisions.push(Decision {
                    pretrained_bit: bit,
                    p_mix: f64::from(bit),
                    y_soft: [f64::from(bit), 1.0 - f64::from(bit)],
                    log_alpha,
                });
            }
            RouteMode::SampleHard { tau, rng } | RouteMode::SampleSoft { tau, rng } => {
                let (category, y) = gumbel_softmax_pair(log_alpha, *tau, rng);
                let y0 = y[0];
                let bit = u8::from(category == 0);
                let soft_value = matches!(mode, RouteMode::SampleSoft { .. });
                decisions.push(Decision {
                    pretrained_bit: bit,
                    p_mix: if soft_value { y0 } else { f64::from(bit) },
                    y_soft: [y0, 1.0 - y0],
                    log_alpha,
                });
            }
            RouteMode::Forced(_) => unreachable!("forced bits handled above"),
        }
    }
    Ok(PolicyEvalOutcome {
        decisions,
        tape: Some(tape),
    })
}

/// Full AutoFT forward pass for one instance.
///
/// The embed policy reads the source-bank embedding `x_src`; the cross and
/// deep policies read the mixed embedding. Both branch outputs of every
/// routed layer are cached so the straight-through backward can weight
/// them by the relaxation.
pub fn autoft_forward(
    inst: &EncodedInstance,
    model: &AutoftModel,
    mut mode: RouteMode<'_>,
) -> Result<(f64, AutoftTape)> {
    model.check_banks()?;
    let tau = mode.tau()?.unwrap_or(1.0);
    let k = model.source.embedding.embed_dim();
    let m = model.source.embedding.num_fields();

    let x_src = model.source.embedding.lookup(inst)?;
    let x_tgt = model.target.embedding.lookup(inst)?;

    let forced = match &mode {
        RouteMode::Forced(bits) => Some((*bits).clone()),
        _ => None,
    };

    let embed_eval = eval_policy(
        &model.policies.embed,
        &x_src,
        m,
        &mut mode,
        forced.as_ref().map(|b| b.embed.as_slice()),
    )?;
    let p_e: Vec<f64> = embed_eval.decisions.iter().map(|d| d.p_mix).collect();
    let x_mixed = mix_fields_from_lookups(&p_e, &x_src, &x_tgt, k);

    let n_cross = model.source.cross.weights.len();
    let cross_eval = eval_policy(
        &model.policies.cross,
        &x_mixed,
        n_cross,
        &mut mode,
        forced.as_ref().map(|b| b.cross.as_slice()),
    )?;
    let n_deep = model.source.deep.weights.len();
    let deep_eval = eval_policy(
        &model.policies.deep,
        &x_mixed,
        n_deep,
        &mut mode,
        forced.as_ref().map(|b| b.deep.as_slice()),
    )?;

    // routed cross stack; both branches share x_mixed as x^(0)
    let mut cross_x = vec![x_mixed.clone()];
    let mut cross_src_out = Vec::with_capacity(n_cross);
    let mut cross_tgt_out = Vec::with_capacity(n_cross);
    if model.source.arch.backbone == crate::dcn::Backbone::Dcn {
        for l in 0..n_cross {
            let a = cross_layer_forward(
                &x_mixed,
                &cross_x[l],
                model.source.cross.weights[l].as_slice(),
                model.source.cross.biases[l].as_slice(),
            )?;
            let b = cross_layer_forward(
                &x_mixed,
                &cross_x[l],
                model.target.cross.weights[l].as_slice(),
                model.target.cross.biases[l].as_slice(),
            )?;
            let p = cross_eval.decisions[l].p_mix;
            cross_x.push(a.iter().zip(&b).map(|(&ai, &bi)| p * ai + (1.0 - p) * bi).collect());
            cross_src_out.push(a);
            cross_tgt_out.push(b);
        }
    }

    // routed deep stack
    let mut deep_h = vec![x_mixed.clone()];
    let mut deep_src_pre = Vec::with_capacity(n_deep);
    let mut deep_tgt_pre = Vec::with_capacity(n_deep);
    let mut deep_src_out = Vec::with_capacity(n_deep);
    let mut deep_tgt_out = Vec::with_capacity(n_deep);
    for l in 0..n_deep {
        let h_in = &deep_h[l];
        let mut za = matvec(&model.source.deep.weights[l], h_in);
        for (z, &b) in za.iter_mut().zip(model.source.deep.biases[l].as_slice()) {
            *z += b;
        }
        let mut zb = matvec(&model.target.deep.weights[l], h_in);
        for (z, &b) in zb.iter_mut().zip(model.target.deep.biases[l].as_slice()) {
            *z += b;
        }
        let a: Vec<f64> = za.iter().map(|&v| v.max(0.0)).collect();
        let b: Vec<f64> = zb.iter().map(|&v| v.max(0.0)).collect();
        let p = deep_eval.decisions[l].p_mix;
        deep_h.push(a.iter().zip(&b).map(|(&ai, &bi)| p * ai + (1.0 - p) * bi).collect());
        deep_src_pre.push(za);
        deep_tgt_pre.push(zb);
        deep_src_out.push(a);
        deep_tgt_out.push(b);
    }

    // prediction always comes from the target bank
    let h_out = deep_h.last().unwrap();
    let x_cross = match model.source.arch.backbone {
        crate::dcn::Backbone::Dcn => Some(cross_x.last().unwrap().as_slice()),
        crate::dcn::Backbone::Dnn => None,
    };
    let w = model.target.prediction.weight.as_slice();
    let expected = x_cross.map_or(0, <[f64]>::len) + h_out.len();
    if expected != w.len() {
        return Err(Error::shape("autoft prediction", (w.len(), 1), (expected, 1)));
    }
    let mut logit = model.target.prediction.bias.as_slice()[0];
    let mut offset = 0;
    if let Some(xc) = x_cross {
        logit += dot(xc, &w[..xc.len()]);
        offset = xc.len();
    }
    logit += dot(h_out, &w[offset..]);
    let yhat = sigmoid(logit);

    Ok((
        yhat,
        AutoftTape {
            route: RouteDecision {
                embed: embed_eval.decisions,
                cross: cross_eval.decisions,
                deep: deep_eval.decisions,
            },
            tau,
            x_src,
            x_tgt,
            x_mixed,
            embed_net: embed_eval.tape,
            cross_net: cross_eval.tape,
            deep_net: deep_eval.tape,
            cross_x,
            cross_src_out,
            cross_tgt_out,
            deep_h,
            deep_src_pre,
            deep_tgt_pre,
            deep_src_out,
            deep_tgt_out,
            logit,
            yhat,
        },
    ))
}

/// Training loss of the composite model: cross-entropy plus the L2 term
/// over the trainable parameters (target-bank weights, optionally
/// embeddings and policy weights).
pub fn autoft_loss(
    y: u8,
    yhat: f64,
    lambda: f64,
    model: &AutoftModel,
    l2_include_embeddings: bool,
    l2_include_policies: bool,
) -> f64 {
    let mut reg = model.target.l2_norm_sq(l2_include_embeddings);
    if l2_include_policies {
        reg += model.policies.l2_norm_sq();
    }
    cross_entropy(y, yhat) + lambda * reg
}

/// Backward through one policy network given `dL/dp` per decision, where
/// `p` is treated as the relaxation `Y_pretrained` (Jacobian of the
/// temperature softmax, then log-softmax, then the two ReLU FC layers).
/// Returns the gradient with respect to the network input.
fn policy_backward(
    net: &PolicyNetwork,
    tape: &PolicyNetTape,
    decisions: &[Decision],
    dp: &[f64],
    tau: f64,
    grads: &mut PolicyNetwork,
) -> Vec<f64> {
    let count = net.decision_count;
    debug_assert_eq!(dp.len(), count);
    // gradient on the output-layer pre-activation u (before the outer ReLU)
    let mut du = vec![0.0; 2 * count];
    for j in 0..count {
        let d = &decisions[j];
        let y0 = d.y_soft[0];
        let y1 = d.y_soft[1];
        // dY0/dv = (y0 y1, -y0 y1); dv/dlog_alpha = 1/tau
        let dv = dp[j] * y0 * y1 / tau;
        let dlog_alpha = [dv, -dv];
        // log-softmax Jacobian: dL/dl_k = dlog_alpha_k - alpha_k * sum(dlog_alpha)
        let alpha = [d.log_alpha[0].exp(), d.log_alpha[1].exp()];
        let total = dlog_alpha[0] + dlog_alpha[1];
        for c in 0..2 {
            let dl = dlog_alpha[c] - alpha[c] * total;
            // outer ReLU mask
            du[2 * j + c] = if tape.u[2 * j + c] > 0.0 { dl } else { 0.0 };
        }
    }
    // output layer
    for (r, &dur) in du.iter().enumerate() {
        let row = grads.w2.row_mut(r);
        for (c, &hc) in tape.h.iter().enumerate() {
            row[c] += dur * hc;
        }
    }
    for (gb, &dur) in grads.b2.as_mut_slice().iter_mut().zip(&du) {
        *gb += dur;
    }
    let dh = matvec_t(&net.w2, &du);
    let dh_pre: Vec<f64> = dh
        .iter()
        .zip(&tape.h_pre)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    for (r, &gz) in dh_pre.iter().enumerate() {
        let row = grads.w1.row_mut(r);
        for (c, &xc) in tape.input.iter().enumerate() {
            row[c] += gz * xc;
        }
    }
    for (gb, &gz) in grads.b1.as_mut_slice().iter_mut().zip(&dh_pre) {
        *gb += gz;
    }
    matvec_t(&net.w1, &dh_pre)
}

/// Straight-through backward pass.
///
/// The forward used hard decisions in the value path; here every mixing
/// coefficient is treated as the relaxation `Y`, so gradients flow into
/// the policy logits through the softmax Jacobian at temperature tau and
/// into the target bank through both branches weighted by `(1 - Y)`.
/// Source-bank gradients are never materialized: the returned container
/// has no slot for them, which enforces the freezing contract by shape.
///
/// On a tape produced by [`RouteMode::SampleSoft`] this computes the exact
/// gradient of the soft forward, which is what the finite-difference
/// acceptance check certifies.
pub fn straight_through_backward(
    inst: &EncodedInstance,
    model: &AutoftModel,
    tape: &AutoftTape,
    y: u8,
    lambda: f64,
    l2_include_embeddings: bool,
    l2_include_policies: bool,
) -> Result<AutoftGradients> {
    let mut grads = AutoftGradients::zeros_like(model);
    let k = model.source.embedding.embed_dim();
    let dlogit = tape.yhat - f64::from(y);

    // prediction layer (target bank)
    let h_out = tape.deep_h.last().unwrap();
    let w = model.target.prediction.weight.as_slice();
    let is_dcn = model.source.arch.backbone == crate::dcn::Backbone::Dcn;
    let d = tape.x_mixed.len();
    let (mut g_cross, offset) = if is_dcn {
        let xc = tape.cross_x.last().unwrap();
        let gw = grads.target.prediction.weight.as_mut_slice();
        let mut g = vec![0.0; d];
        for i in 0..d {
            gw[i] += dlogit * xc[i];
            g[i] = dlogit * w[i];
        }
        (g, d)
    } else {
        (vec![0.0; d], 0)
    };
    {
        let gw = grads.target.prediction.weight.as_mut_slice();
        for (i, &hi) in h_out.iter().enumerate() {
            gw[offset + i] += dlogit * hi;
        }
        grads.target.prediction.bias.as_mut_slice()[0] += dlogit;
    }
    let mut g_deep: Vec<f64> = h_out
        .iter()
        .enumerate()
        .map(|(i, _)| dlogit * w[offset + i])
        .collect();

    // deep stack backward
    let n_deep = model.source.deep.weights.len();
    let mut dp_deep = vec![0.0; n_deep];
    for l in (0..n_deep).rev() {
        let dec = &tape.route.deep[l];
        let p = dec.y_soft[0];
        let a = &tape.deep_src_out[l];
        let b = &tape.deep_tgt_out[l];
        dp_deep[l] = g_deep.iter().zip(a.iter().zip(b)).map(|(&g, (&ai, &bi))| g * (ai - bi)).sum();
        let h_in = &tape.deep_h[l];
        // source branch: parameters frozen, but the input path still flows
        let gza: Vec<f64> = g_deep
            .iter()
            .zip(&tape.deep_src_pre[l])
            .map(|(&g, &z)| if z > 0.0 { p * g } else { 0.0 })
            .collect();
        // target branch
        let gzb: Vec<f64> = g_deep
            .iter()
            .zip(&tape.deep_tgt_pre[l])
            .map(|(&g, &z)| if z > 0.0 { (1.0 - p) * g } else { 0.0 })
            .collect();
        let gw = &mut grads.target.deep.weights[l];
        for (r, &gz) in gzb.iter().enumerate() {
            let row = gw.row_mut(r);
            for (c, &hc) in h_in.iter().enumerate() {
                row[c] += gz * hc;
            }
        }
        for (gb, &gz) in grads.target.deep.biases[l].as_mut_slice().iter_mut().zip(&gzb) {
            *gb += gz;
        }
        let mut g_in = matvec_t(&model.source.deep.weights[l], &gza);
        let g_in_t = matvec_t(&model.target.deep.weights[l], &gzb);
        for (gi, &gt) in g_in.iter_mut().zip(&g_in_t) {
            *gi += gt;
        }
        g_deep = g_in;
    }

    // cross stack backward
    let n_cross = if is_dcn { model.source.cross.weights.len() } else { 0 };
    let mut dp_cross = vec![0.0; n_cross];
    let x0 = &tape.x_mixed;
    let mut g_x0_accum = vec![0.0; d];
    for l in (0..n_cross).rev() {
        let dec = &tape.route.cross[l];
        let p = dec.y_soft[0];
        let a = &tape.cross_src_out[l];
        let b = &tape.cross_tgt_out[l];
        dp_cross[l] = g_cross.iter().zip(a.iter().zip(b)).map(|(&g, (&ai, &bi))| g * (ai - bi)).sum();
        let xl = &tape.cross_x[l];
        let ws = model.source.cross.weights[l].as_slice();
        let wt = model.target.cross.weights[l].as_slice();
        let s_src = dot(xl, ws);
        let s_tgt = dot(xl, wt);
        // split the incoming gradient between the branches
        // ga = p * g, gb = (1-p) * g
        let ga_dot_x0 = p * dot(&g_cross, x0);
        let gb_dot_x0 = (1.0 - p) * dot(&g_cross, x0);
        // target-bank parameter gradients
        for ((gw, &xli), &gi) in grads.target.cross.weights[l]
            .as_mut_slice()
            .iter_mut()
            .zip(xl)
            .zip(g_cross.iter())
        {
            let _ = gi;
            *gw += gb_dot_x0 * xli;
        }
        for (gb, &gi) in grads.target.cross.biases[l].as_mut_slice().iter_mut().zip(&g_cross) {
            *gb += (1.0 - p) * gi;
        }
        // direct x0 term from both branches
        for (gx, &gi) in g_x0_accum.iter_mut().zip(&g_cross) {
            *gx += (p * s_src + (1.0 - p) * s_tgt) * gi;
        }
        // gradient to x^(l): residual (both branches sum to g) plus the
        // scalar-product terms of each branch
        let mut g_next = g_cross;
        for i in 0..d {
            g_next[i] += ga_dot_x0 * ws[i] + gb_dot_x0 * wt[i];
        }
        g_cross = g_next;
    }

    // total gradient on the mixed embedding
    let mut g_xhat = vec![0.0; d];
    for i in 0..d {
        g_xhat[i] = g_deep[i] + if is_dcn { g_cross[i] + g_x0_accum[i] } else { 0.0 };
    }

    // cross/deep policies read the mixed embedding: their input gradients
    // flow back into it (and their parameter gradients are taken here)
    if let (Some(net), Some(net_tape)) = (&model.policies.cross, &tape.cross_net) {
        let g_in = policy_backward(
            net,
            net_tape,
            &tape.route.cross,
            &dp_cross,
            tape.tau,
            grads.policies.cross.as_mut().unwrap(),
        );
        for (gx, gi) in g_xhat.iter_mut().zip(g_in) {
            *gx += gi;
        }
    }
    if let (Some(net), Some(net_tape)) = (&model.policies.deep, &tape.deep_net) {
        let g_in = policy_backward(
            net,
            net_tape,
            &tape.route.deep,
            &dp_deep,
            tape.tau,
            grads.policies.deep.as_mut().unwrap(),
        );
        for (gx, gi) in g_xhat.iter_mut().zip(g_in) {
            *gx += gi;
        }
    }

    // field mixing backward: dL/dp_e[i] = <g_i, x_src_i - x_tgt_i>,
    // target embedding rows get (1 - Y) * g_i via the mean rule
    let m = model.source.embedding.num_fields();
    let mut dp_embed = vec![0.0; m];
    for (i, dec) in tape.route.embed.iter().enumerate() {
        let p = dec.y_soft[0];
        let slice = i * k..(i + 1) * k;
        let gi = &g_xhat[slice.clone()];
        dp_embed[i] = gi
            .iter()
            .zip(tape.x_src[slice.clone()].iter().zip(&tape.x_tgt[slice.clone()]))
            .map(|(&g, (&s, &t))| g * (s - t))
            .sum();
        let active = &inst.fields[i];
        let scale = (1.0 - p) / active.len() as f64;
        let table = grads.target.embedding.field_mut(i);
        for &idx in active {
            let row = table.row_mut(idx as usize);
            for (r, &g) in row.iter_mut().zip(gi) {
                *r += scale * g;
            }
        }
    }

    // embed policy reads the frozen source embedding; its input gradient
    // would flow into frozen parameters only and is discarded
    if let (Some(net), Some(net_tape)) = (&model.policies.embed, &tape.embed_net) {
        let _ = policy_backward(
            net,
            net_tape,
            &tape.route.embed,
            &dp_embed,
            tape.tau,
            grads.policies.embed.as_mut().unwrap(),
        );
    }

    model
        .target
        .add_l2_gradient(&mut grads.target, lambda, l2_include_embeddings);
    if l2_include_policies {
        model.policies.add_l2_gradient(&mut grads.policies, lambda);
    }
    Ok(grads)
}
