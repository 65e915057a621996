//! The two gated building blocks: the PT-block (soft-gated mixture of the
//! four message-passing experts with an adaptive initial residual) and the
//! enhanced FFN (one of three GLU experts selected by a straight-through
//! Gumbel-Softmax hard gate, with its own adaptive residual). Both end in
//! layer normalization.

use rand::Rng;

use crate::autodiff::{ActKind, Tape, Tensor};
use crate::error::{Error, Result};
use crate::experts::{apply_expert, Expert, ExpertKind};
use crate::graph::{Graph, PropKind};
use crate::init::glorot;
use crate::matrix::Matrix;
use crate::Prng;

pub const LN_EPS: f64 = 1e-5;

/// Two-layer gate producing per-node mixture weights over the four experts.
#[derive(Clone, Debug)]
pub struct SoftGate {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl SoftGate {
    pub fn new(dim: usize, gate_hidden: usize, rng: &mut impl Rng) -> Self {
        SoftGate {
            w1: Tensor::parameter(glorot(dim, gate_hidden, rng)),
            w2: Tensor::parameter(glorot(gate_hidden, 4, rng)),
        }
    }
}

/// Per-node allocation weights: softmax(relu(h·W1)·W2), shape |V| x 4.
pub fn soft_gate(tape: &Tape, gate: &SoftGate, h: &Tensor) -> Result<Tensor> {
    let hidden = tape.matmul(h, &gate.w1)?;
    let hidden = tape.activation(&hidden, ActKind::Relu);
    let logits = tape.matmul(&hidden, &gate.w2)?;
    Ok(tape.softmax_rows(&logits))
}

/// One message-passing block: gate, four experts, adaptive initial residual
/// weight (stored pre-sigmoid), layer norm.
#[derive(Clone, Debug)]
pub struct PtBlock {
    pub gate: SoftGate,
    pub experts: [Expert; 4],
    pub alpha_raw: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl PtBlock {
    pub fn new(dim: usize, gate_hidden: usize, rng: &mut impl Rng) -> Self {
        PtBlock {
            gate: SoftGate::new(dim, gate_hidden, rng),
            experts: ExpertKind::ALL.map(|kind| Expert::new(kind, dim, rng)),
            // sigmoid(0) = 0.5
            alpha_raw: Tensor::parameter(Matrix::zeros(1, 1)),
            ln_gain: Tensor::parameter(Matrix::filled(1, dim, 1.0)),
            ln_bias: Tensor::parameter(Matrix::zeros(1, dim)),
        }
    }
}

/// Forward-pass switches shared by the blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockOpts {
    pub training: bool,
    pub dropout: f64,
    /// Bypass the soft gate and route everything through one expert.
    pub force_expert: Option<ExpertKind>,
    /// Drop the adaptive residual: the block output is LN of the mixture.
    pub ablate_residual: bool,
}

impl BlockOpts {
    pub fn eval() -> Self {
        BlockOpts {
            training: false,
            dropout: 0.0,
            force_expert: None,
            ablate_residual: false,
        }
    }
}

/// Output of one PT-block step, with the gate weights that produced it.
pub struct BlockOut {
    pub h: Tensor,
    /// Per-node expert weights actually used (one-hot under a forced gate).
    pub gate_weights: Matrix,
}

/// H  ←  LN( α·H0 + (1−α)·Σᵢ wᵢ ⊙ Expertᵢ(H) ), with per-node gate columns
/// broadcast over features. Dropout hits each expert output in training.
#[allow(clippy::too_many_arguments)]
pub fn pt_block_forward(
    tape: &Tape,
    block: &PtBlock,
    kind: &PropKind,
    g: &Graph,
    h_prev: &Tensor,
    h0: &Tensor,
    opts: &BlockOpts,
    rng: &mut Prng,
) -> Result<BlockOut> {
    if h_prev.shape() != h0.shape() {
        return Err(Error::dimension(
            "pt_block_forward",
            format!("h_prev {:?} vs h0 {:?}", h_prev.shape(), h0.shape()),
        ));
    }
    let n = h_prev.rows();
    let (mixed, gate_weights) = if let Some(forced) = opts.force_expert {
        let expert = block
            .experts
            .iter()
            .find(|e| e.kind == forced)
            .expect("all four expert kinds present");
        let mut out = apply_expert(tape, expert, kind, g, h_prev)?;
        if opts.training && opts.dropout > 0.0 {
            out = tape.dropout(&out, opts.dropout, rng)?;
        }
        let mut one_hot = Matrix::zeros(n, 4);
        let col = ExpertKind::ALL.iter().position(|&k| k == forced).unwrap();
        for i in 0..n {
            one_hot.set(i, col, 1.0);
        }
        (out, one_hot)
    } else {
        let weights = soft_gate(tape, &block.gate, h_prev)?;
        let mut mixed: Option<Tensor> = None;
        for (i, expert) in block.experts.iter().enumerate() {
            let mut out = apply_expert(tape, expert, kind, g, h_prev)?;
            if opts.training && opts.dropout > 0.0 {
                out = tape.dropout(&out, opts.dropout, rng)?;
            }
            let w_col = tape.take_column(&weights, i)?;
            let scaled = tape.scale_rows(&out, &w_col)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(&acc, &scaled)?,
                None => scaled,
            });
        }
        (mixed.unwrap(), weights.value_clone())
    };

    let pre_ln = if opts.ablate_residual {
        mixed
    } else {
        let alpha = tape.activation(&block.alpha_raw, ActKind::Sigmoid);
        let one_minus = tape.affine_const(&alpha, -1.0, 1.0);
        let residual = tape.scale_scalar(h0, &alpha)?;
        let scaled_mix = tape.scale_scalar(&mixed, &one_minus)?;
        tape.add(&residual, &scaled_mix)?
    };
    let h = tape.layernorm_rows(&pre_ln, &block.ln_gain, &block.ln_bias, LN_EPS)?;
    Ok(BlockOut { h, gate_weights })
}

/// Gated-linear-unit activation families for the enhanced FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GluKind {
    SwishGlu,
    Geglu,
    Reglu,
}

impl GluKind {
    pub const ALL: [GluKind; 3] = [GluKind::SwishGlu, GluKind::Geglu, GluKind::Reglu];

    fn activation(self) -> ActKind {
        match self {
            GluKind::SwishGlu => ActKind::Swish,
            GluKind::Geglu => ActKind::Gelu,
            GluKind::Reglu => ActKind::Relu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GluKind::SwishGlu => "swishglu",
            GluKind::Geglu => "geglu",
            GluKind::Reglu => "reglu",
        }
    }
}

/// (σ(h·W3) ⊗ h·W4)·W5 with square, bias-free weights.
#[derive(Clone, Debug)]
pub struct GluExpert {
    pub kind: GluKind,
    pub w3: Tensor,
    pub w4: Tensor,
    pub w5: Tensor,
}

impl GluExpert {
    pub fn new(kind: GluKind, dim: usize, rng: &mut impl Rng) -> Self {
        GluExpert {
            kind,
            w3: Tensor::parameter(glorot(dim, dim, rng)),
            w4: Tensor::parameter(glorot(dim, dim, rng)),
            w5: Tensor::parameter(glorot(dim, dim, rng)),
        }
    }
}

pub fn glu_expert(tape: &Tape, expert: &GluExpert, h: &Tensor) -> Result<Tensor> {
    let gate = tape.matmul(h, &expert.w3)?;
    let gate = tape.activation(&gate, expert.kind.activation());
    let value = tape.matmul(h, &expert.w4)?;
    let gated = tape.mul(&gate, &value)?;
    tape.matmul(&gated, &expert.w5)
}

/// Feed-forward block: mean-pooled hard gate over three GLU experts,
/// adaptive residual (pre-sigmoid weight), layer norm, Gumbel temperature.
#[derive(Clone, Debug)]
pub struct EnhancedFfn {
    pub gate_weight: Tensor,
    pub experts: [GluExpert; 3],
    pub beta_raw: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub temperature: f64,
}

impl EnhancedFfn {
    pub fn new(dim: usize, temperature: f64, rng: &mut impl Rng) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        EnhancedFfn {
            gate_weight: Tensor::parameter(glorot(dim, 3, rng)),
            experts: GluKind::ALL.map(|kind| GluExpert::new(kind, dim, rng)),
            beta_raw: Tensor::parameter(Matrix::zeros(1, 1)),
            ln_gain: Tensor::parameter(Matrix::filled(1, dim, 1.0)),
            ln_bias: Tensor::parameter(Matrix::zeros(1, dim)),
            temperature,
        }
    }
}

/// How the hard gate's selection enters the forward value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// One-hot forward, gradients through the relaxed softmax
    /// (straight-through); the production path.
    Hard,
    /// The relaxed softmax itself mixes all experts; fully differentiable,
    /// used to verify gradients.
    Soft,
}

/// Hard-gate outcome: the selected expert and the 1x3 carrier the selection
/// gradient flows through.
pub struct HardGateOut {
    pub index: usize,
    pub carrier: Tensor,
}

/// Mean-pool nodes, score the three experts, and select one. Training mode
/// perturbs the logits with Gumbel(0,1) noise and exposes straight-through
/// gradients; evaluation mode is a deterministic argmax with no sampling.
pub fn hard_gate(
    tape: &Tape,
    ffn: &EnhancedFfn,
    h: &Tensor,
    rng: &mut Prng,
    training: bool,
    mode: GateMode,
) -> Result<HardGateOut> {
    let pooled = tape.mean_rows(h);
    let logits = tape.matmul(&pooled, &ffn.gate_weight)?;
    let perturbed = if training {
        let noise = Matrix::from_vec(1, 3, (0..3).map(|_| gumbel(rng)).collect());
        tape.add(&logits, &Tensor::constant(noise))?
    } else {
        logits
    };
    let index = argmax(perturbed.value().row(0));
    let soft = tape.softmax_rows(&tape.affine_const(&perturbed, 1.0 / ffn.temperature, 0.0));
    let carrier = match mode {
        GateMode::Hard => {
            let mut one_hot = Matrix::zeros(1, 3);
            one_hot.set(0, index, 1.0);
            tape.straight_through(&soft, one_hot)?
        }
        GateMode::Soft => soft,
    };
    Ok(HardGateOut { index, carrier })
}

/// Standard Gumbel(0,1) draw.
fn gumbel(rng: &mut Prng) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
    -(-u.ln()).ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Output of the enhanced FFN with the gate decision that produced it.
pub struct FfnOut {
    pub z: Tensor,
    pub expert_index: usize,
    /// Forward value of the selection carrier (exactly one-hot in hard mode).
    pub selection: Matrix,
}

/// Z ← LN( β·H0 + (1−β)·GLU_j(H) ) where j comes from the hard gate.
pub fn ffn_forward(
    tape: &Tape,
    ffn: &EnhancedFfn,
    h: &Tensor,
    h0: &Tensor,
    opts: &BlockOpts,
    mode: GateMode,
    rng: &mut Prng,
) -> Result<FfnOut> {
    if h.shape() != h0.shape() {
        return Err(Error::dimension(
            "ffn_forward",
            format!("h {:?} vs h0 {:?}", h.shape(), h0.shape()),
        ));
    }
    let gate = hard_gate(tape, ffn, h, rng, opts.training, mode)?;
    let selection = gate.carrier.value_clone();
    let encoded = match mode {
        GateMode::Hard => {
            let out = glu_expert(tape, &ffn.experts[gate.index], h)?;
            let weight = tape.take_entry(&gate.carrier, 0, gate.index)?;
            tape.scale_scalar(&out, &weight)?
        }
        GateMode::Soft => {
            let mut acc: Option<Tensor> = None;
            for (j, expert) in ffn.experts.iter().enumerate() {
                let out = glu_expert(tape, expert, h)?;
                let weight = tape.take_entry(&gate.carrier, 0, j)?;
                let scaled = tape.scale_scalar(&out, &weight)?;
                acc = Some(match acc {
                    Some(a) => tape.add(&a, &scaled)?,
                    None => scaled,
                });
            }
            acc.unwrap()
        }
    };
    let pre_ln = if opts.ablate_residual {
        encoded
    } else {
        let beta = tape.activation(&ffn.beta_raw, ActKind::Sigmoid);
        let one_minus = tape.affine_const(&beta, -1.0, 1.0);
        let residual = tape.scale_scalar(h0, &beta)?;
        let scaled = tape.scale_scalar(&encoded, &one_minus)?;
        tape.add(&residual, &scaled)?
    };
    let z = tape.layernorm_rows(&pre_ln, &ffn.ln_gain, &ffn.ln_bias, LN_EPS)?;
    Ok(FfnOut {
        z,
        expert_index: gate.index,
        selection,
    })
}
