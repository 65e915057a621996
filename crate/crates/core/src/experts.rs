//! The four message-passing experts {PP, PT, TP, TT}: compositions of the
//! propagation primitive P and a learned per-node transformation T, applied
//! left to right in the order the name reads.

use rand::Rng;

use crate::autodiff::{ActKind, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{propagate, Graph, PropKind};
use crate::init::glorot;

/// Learned transformation T: relu(h·W + b) with a square weight.
#[derive(Clone, Debug)]
pub struct TransformOp {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TransformOp {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        TransformOp {
            weight: Tensor::parameter(glorot(dim, dim, rng)),
            bias: Tensor::parameter(crate::matrix::Matrix::zeros(1, dim)),
        }
    }

    pub fn apply(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        let lin = tape.matmul(h, &self.weight)?;
        let lin = tape.add_row(&lin, &self.bias)?;
        Ok(tape.activation(&lin, ActKind::Relu))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    PP,
    PT,
    TP,
    TT,
}

impl ExpertKind {
    /// Fixed mixing order within a block.
    pub const ALL: [ExpertKind; 4] = [ExpertKind::PP, ExpertKind::PT, ExpertKind::TP, ExpertKind::TT];

    /// Number of transformation steps in the name.
    pub fn num_transforms(self) -> usize {
        match self {
            ExpertKind::PP => 0,
            ExpertKind::PT | ExpertKind::TP => 1,
            ExpertKind::TT => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::PP => "pp",
            ExpertKind::PT => "pt",
            ExpertKind::TP => "tp",
            ExpertKind::TT => "tt",
        }
    }

    pub fn parse(s: &str) -> Option<ExpertKind> {
        match s.to_ascii_lowercase().as_str() {
            "pp" => Some(ExpertKind::PP),
            "pt" => Some(ExpertKind::PT),
            "tp" => Some(ExpertKind::TP),
            "tt" => Some(ExpertKind::TT),
            _ => None,
        }
    }
}

/// One expert: its kind plus as many transformation parameter sets as the
/// name has T letters (PP none, PT/TP one, TT two). Parameters are never
/// shared across experts or blocks.
#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    pub t_ops: Vec<TransformOp>,
}

impl Expert {
    pub fn new(kind: ExpertKind, dim: usize, rng: &mut impl Rng) -> Self {
        let t_ops = (0..kind.num_transforms())
            .map(|_| TransformOp::new(dim, rng))
            .collect();
        Expert { kind, t_ops }
    }
}

/// Apply the expert's primitives in name order; output shape matches `h`.
pub fn apply_expert(
    tape: &Tape,
    expert: &Expert,
    kind: &PropKind,
    g: &Graph,
    h: &Tensor,
) -> Result<Tensor> {
    if expert.t_ops.len() != expert.kind.num_transforms() {
        return Err(Error::contract(
            "apply_expert",
            format!(
                "{} transform ops for kind {:?}",
                expert.t_ops.len(),
                expert.kind
            ),
        ));
    }
    match expert.kind {
        ExpertKind::PP => {
            let once = propagate(tape, kind, g, h)?;
            propagate(tape, kind, g, &once)
        }
        ExpertKind::PT => {
            let p = propagate(tape, kind, g, h)?;
            expert.t_ops[0].apply(tape, &p)
        }
        ExpertKind::TP => {
            let t = expert.t_ops[0].apply(tape, h)?;
            propagate(tape, kind, g, &t)
        }
        ExpertKind::TT => {
            let t1 = expert.t_ops[0].apply(tape, h)?;
            expert.t_ops[1].apply(tape, &t1)
        }
    }
}
