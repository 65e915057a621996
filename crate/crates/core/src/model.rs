//! Full model assembly: initial embedding, L stacked PT-blocks sharing one
//! initial-residual source, the enhanced FFN, and the prediction head, plus
//! the checkpoint container.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::autodiff::{ActKind, Tape, Tensor};
use crate::blocks::{
    ffn_forward, pt_block_forward, BlockOpts, EnhancedFfn, GateMode, PtBlock,
};
use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::graph::{GatAttention, Graph, PropKind};
use crate::init::glorot;
use crate::matrix::Matrix;
use crate::Prng;

/// Propagation operator selection for configs and CLI flags; the runtime
/// [`PropKind`] carries the attention parameters when GAT-like is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropChoice {
    GcnLike,
    SageLike,
    GatLike,
}

impl PropChoice {
    pub fn name(self) -> &'static str {
        match self {
            PropChoice::GcnLike => "gcn",
            PropChoice::SageLike => "sage",
            PropChoice::GatLike => "gat",
        }
    }

    pub fn parse(s: &str) -> Option<PropChoice> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" | "gcn-like" => Some(PropChoice::GcnLike),
            "sage" | "sage-like" => Some(PropChoice::SageLike),
            "gat" | "gat-like" => Some(PropChoice::GatLike),
            _ => None,
        }
    }
}

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug)]
pub struct GnnMoeConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub prop: PropChoice,
    pub gat_slope: f64,
    pub dropout: f64,
    pub tau: f64,
    pub gate_hidden: usize,
    pub ablate_ffn: bool,
    pub ablate_residual: bool,
    pub force_expert: Option<ExpertKind>,
}

impl GnnMoeConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        GnnMoeConfig {
            input_dim,
            num_classes,
            hidden_dim: 64,
            num_blocks: 2,
            prop: PropChoice::GcnLike,
            gat_slope: 0.2,
            dropout: 0.1,
            tau: 1.0,
            gate_hidden: 16,
            ablate_ffn: false,
            ablate_residual: false,
            force_expert: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::contract("config", "num_blocks must be >= 1"));
        }
        if self.hidden_dim < 1 || self.input_dim < 1 || self.num_classes < 1 {
            return Err(Error::contract("config", "dimensions must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("config", "dropout must be in [0,1)"));
        }
        if self.tau <= 0.0 {
            return Err(Error::contract("config", "tau must be positive"));
        }
        Ok(())
    }
}

/// The assembled model; all trainable state lives in the tensors returned by
/// [`GnnMoeModel::parameters`].
pub struct GnnMoeModel {
    pub config: GnnMoeConfig,
    pub w0: Tensor,
    pub b0: Tensor,
    pub prop_kind: PropKind,
    pub blocks: Vec<PtBlock>,
    pub ffn: EnhancedFfn,
    pub w6: Tensor,
}

/// Gate activity captured during one forward pass.
#[derive(Default)]
pub struct ForwardTrace {
    /// Per-block per-node expert weights.
    pub soft_gates: Vec<Matrix>,
    /// FFN expert index and selection carrier value, unless the FFN was
    /// ablated away.
    pub ffn_selection: Option<(usize, Matrix)>,
}

pub struct ForwardOut {
    pub logits: Tensor,
    pub trace: ForwardTrace,
}

impl GnnMoeModel {
    pub fn new(config: GnnMoeConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let w0 = Tensor::parameter(glorot(config.input_dim, d, rng));
        let b0 = Tensor::parameter(Matrix::zeros(1, d));
        let prop_kind = match config.prop {
            PropChoice::GcnLike => PropKind::GcnLike,
            PropChoice::SageLike => PropKind::SageLike,
            PropChoice::GatLike => {
                PropKind::GatLike(GatAttention::new(d, config.gat_slope, rng))
            }
        };
        let blocks = (0..config.num_blocks)
            .map(|_| PtBlock::new(d, config.gate_hidden, rng))
            .collect();
        let ffn = EnhancedFfn::new(d, config.tau, rng);
        let w6 = Tensor::parameter(glorot(d, config.num_classes, rng));
        Ok(GnnMoeModel {
            config,
            w0,
            b0,
            prop_kind,
            blocks,
            ffn,
            w6,
        })
    }

    /// Logits for every node; softmax is deferred to the loss.
    pub fn forward(
        &self,
        tape: &Tape,
        g: &Graph,
        rng: &mut Prng,
        training: bool,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(tape, g, rng, training, GateMode::Hard)?.logits)
    }

    /// Forward pass that also reports gate activity; `mode` selects how the
    /// FFN's discrete choice enters the value path.
    pub fn forward_traced(
        &self,
        tape: &Tape,
        g: &Graph,
        rng: &mut Prng,
        training: bool,
        mode: GateMode,
    ) -> Result<ForwardOut> {
        if g.feature_dim() != self.config.input_dim {
            return Err(Error::dimension(
                "forward",
                format!(
                    "graph features {} vs configured input_dim {}",
                    g.feature_dim(),
                    self.config.input_dim
                ),
            ));
        }
        let mut trace = ForwardTrace::default();
        let opts = BlockOpts {
            training,
            dropout: self.config.dropout,
            force_expert: self.config.force_expert,
            ablate_residual: self.config.ablate_residual,
        };

        let mut x = Tensor::constant(g.features().clone());
        if training && self.config.dropout > 0.0 {
            x = tape.dropout(&x, self.config.dropout, rng)?;
        }
        let embedded = tape.add_row(&tape.matmul(&x, &self.w0)?, &self.b0)?;
        let h0 = tape.activation(&embedded, ActKind::Relu);

        let mut h = h0.clone();
        for block in &self.blocks {
            let out = pt_block_forward(tape, block, &self.prop_kind, g, &h, &h0, &opts, rng)?;
            trace.soft_gates.push(out.gate_weights);
            h = out.h;
        }

        let z = if self.config.ablate_ffn {
            h
        } else {
            let out = ffn_forward(tape, &self.ffn, &h, &h0, &opts, mode, rng)?;
            trace.ffn_selection = Some((out.expert_index, out.selection));
            out.z
        };
        let logits = tape.matmul(&z, &self.w6)?;
        Ok(ForwardOut { logits, trace })
    }

    /// Named parameters in a stable order (the checkpoint and optimizer
    /// order).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = vec![
            ("w0".to_string(), self.w0.clone()),
            ("b0".to_string(), self.b0.clone()),
        ];
        if let PropKind::GatLike(att) = &self.prop_kind {
            params.push(("gat.a_src".to_string(), att.a_src.clone()));
            params.push(("gat.a_dst".to_string(), att.a_dst.clone()));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let p = format!("block{l}");
            params.push((format!("{p}.gate.w1"), block.gate.w1.clone()));
            params.push((format!("{p}.gate.w2"), block.gate.w2.clone()));
            for expert in &block.experts {
                for (t, op) in expert.t_ops.iter().enumerate() {
                    let e = expert.kind.name();
                    params.push((format!("{p}.{e}.t{t}.weight"), op.weight.clone()));
                    params.push((format!("{p}.{e}.t{t}.bias"), op.bias.clone()));
                }
            }
            params.push((format!("{p}.alpha"), block.alpha_raw.clone()));
            params.push((format!("{p}.ln.gain"), block.ln_gain.clone()));
            params.push((format!("{p}.ln.bias"), block.ln_bias.clone()));
        }
        for expert in &self.ffn.experts {
            let e = expert.kind.name();
            params.push((format!("ffn.{e}.w3"), expert.w3.clone()));
            params.push((format!("ffn.{e}.w4"), expert.w4.clone()));
            params.push((format!("ffn.{e}.w5"), expert.w5.clone()));
        }
        params.push(("ffn.gate".to_string(), self.ffn.gate_weight.clone()));
        params.push(("ffn.beta".to_string(), self.ffn.beta_raw.clone()));
        params.push(("ffn.ln.gain".to_string(), self.ffn.ln_gain.clone()));
        params.push(("ffn.ln.bias".to_string(), self.ffn.ln_bias.clone()));
        params.push(("w6".to_string(), self.w6.clone()));
        params
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}

/// Mean over the masked nodes of the negative log-likelihood of the true
/// class. Multiplying by the mask size recovers the trace-sum form.
pub fn cross_entropy_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    mask: &[usize],
) -> Result<Tensor> {
    tape.masked_cross_entropy(logits, &Rc::new(labels.to_vec()), &Rc::new(mask.to_vec()))
}

/// Per-node argmax; ties resolve to the lowest class index.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// --- checkpoint container -------------------------------------------------
//
// Two files per checkpoint: `<stem>.bin` holds the concatenated matrices as
// little-endian f64, `<stem>.manifest` lists one `name rows cols offset`
// line per matrix in parameter order.

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    let mut manifest = stem.as_os_str().to_owned();
    manifest.push(".manifest");
    (PathBuf::from(bin), PathBuf::from(manifest))
}

pub fn save_checkpoint(model: &GnnMoeModel, stem: &Path) -> Result<()> {
    let (bin_path, manifest_path) = checkpoint_paths(stem);
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in model.parameters() {
        let value = tensor.value_clone();
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            name,
            value.rows(),
            value.cols(),
            blob.len()
        ));
        for &x in value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::File::create(&bin_path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(|e| Error::io(&bin_path, e))?;
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load matrices into an existing model, validating names and shapes against
/// its configuration-derived parameter list.
pub fn load_checkpoint(model: &GnnMoeModel, stem: &Path) -> Result<()> {
    let (bin_path, manifest_path) = checkpoint_paths(stem);
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut blob = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(&bin_path, e))?;

    let params = model.parameters();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != params.len() {
        return Err(Error::contract(
            "load_checkpoint",
            format!("{} entries for {} parameters", lines.len(), params.len()),
        ));
    }
    for (line_no, (line, (name, tensor))) in lines.iter().zip(&params).enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |detail: String| Error::Parse {
            file: manifest_path.clone(),
            line: line_no + 1,
            detail,
        };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        }
        if fields[0] != name {
            return Err(parse_err(format!(
                "parameter name {} does not match expected {}",
                fields[0], name
            )));
        }
        let rows: usize = fields[1].parse().map_err(|_| parse_err("bad rows".into()))?;
        let cols: usize = fields[2].parse().map_err(|_| parse_err("bad cols".into()))?;
        let offset: usize = fields[3]
            .parse()
            .map_err(|_| parse_err("bad offset".into()))?;
        if (rows, cols) != tensor.shape() {
            return Err(Error::dimension(
                "load_checkpoint",
                format!(
                    "{name}: stored {rows}x{cols}, model expects {:?}",
                    tensor.shape()
                ),
            ));
        }
        let bytes = rows * cols * 8;
        if offset + bytes > blob.len() {
            return Err(parse_err(format!("{name}: offset {offset} out of range")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in blob[offset..offset + bytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensor.assign(&Matrix::from_vec(rows, cols, data));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small_graph(rng: &mut Prng) -> Graph {
        let n = 10;
        let features = glorot(n, 5, rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(features, labels, 3, &edges, true).unwrap()
    }

    #[test]
    fn forward_output_shape() {
        let mut rng = seeded_rng(0);
        let g = small_graph(&mut rng);
        let cfg = GnnMoeConfig {
            hidden_dim: 8,
            ..GnnMoeConfig::new(5, 3)
        };
        let model = GnnMoeModel::new(cfg, &mut rng).unwrap();
        let tape = Tape::inference();
        let logits = model.forward(&tape, &g, &mut rng, false).unwrap();
        assert_eq!(logits.shape(), (10, 3));
    }

    #[test]
    fn forward_feature_mismatch_errors() {
        let mut rng = seeded_rng(0);
        let g = small_graph(&mut rng);
        let model = GnnMoeModel::new(GnnMoeConfig::new(7, 3), &mut rng).unwrap();
        let tape = Tape::inference();
        assert!(model.forward(&tape, &g, &mut rng, false).is_err());
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut rng = seeded_rng(1);
        let g = small_graph(&mut rng);
        let cfg = GnnMoeConfig {
            hidden_dim: 8,
            dropout: 0.5,
            ..GnnMoeConfig::new(5, 3)
        };
        let model = GnnMoeModel::new(cfg, &mut rng).unwrap();
        let run = |seed| {
            let mut r = seeded_rng(seed);
            let tape = Tape::inference();
            model.forward(&tape, &g, &mut r, false).unwrap().value_clone()
        };
        assert_eq!(run(10), run(99));
    }

    #[test]
    fn loss_uniform_logits_is_ln_c() {
        let tape = Tape::new();
        let logits = Tensor::parameter(Matrix::zeros(6, 4));
        let labels = vec![0, 1, 2, 3, 0, 1];
        let mask: Vec<usize> = (0..6).collect();
        let loss = cross_entropy_loss(&tape, &logits, &labels, &mask).unwrap();
        assert!((loss.item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_saturated_correct_is_tiny() {
        let tape = Tape::new();
        let labels = vec![0, 1];
        let mut logits = Matrix::zeros(2, 2);
        logits.set(0, 0, 1e3);
        logits.set(1, 1, 1e3);
        let loss =
            cross_entropy_loss(&tape, &Tensor::parameter(logits), &labels, &[0, 1]).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn loss_empty_mask_errors() {
        let tape = Tape::new();
        let logits = Tensor::parameter(Matrix::zeros(2, 2));
        assert!(cross_entropy_loss(&tape, &logits, &[0, 1], &[]).is_err());
    }

    #[test]
    fn predict_tie_breaks_low_and_matches_softmax_argmax() {
        let logits = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![-1.0, 3.0, 2.0],
            vec![5.0, 5.0, 6.0],
        ]);
        assert_eq!(predict(&logits), vec![0, 1, 2]);
        let softmaxed = crate::autodiff::softmax_rows_value(&logits);
        assert_eq!(predict(&softmaxed), predict(&logits));
    }

    #[test]
    fn ablate_ffn_leaves_ffn_parameters_gradient_free() {
        let mut rng = seeded_rng(2);
        let g = small_graph(&mut rng);
        let cfg = GnnMoeConfig {
            hidden_dim: 8,
            dropout: 0.0,
            ablate_ffn: true,
            ..GnnMoeConfig::new(5, 3)
        };
        let model = GnnMoeModel::new(cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let logits = model.forward(&tape, &g, &mut rng, true).unwrap();
        let mask: Vec<usize> = (0..10).collect();
        let loss = cross_entropy_loss(&tape, &logits, g.labels(), &mask).unwrap();
        tape.backward(&loss).unwrap();
        for (name, p) in model.parameters() {
            let has_grad = p.grad_clone().is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
            if name.starts_with("ffn.") {
                assert!(!has_grad, "{name} should be gradient-free");
            }
        }
        // the rest of the network still learns
        assert!(model.w0.grad_clone().is_some());
    }

    #[test]
    fn ablate_residual_leaves_alpha_beta_gradient_free() {
        let mut rng = seeded_rng(3);
        let g = small_graph(&mut rng);
        let cfg = GnnMoeConfig {
            hidden_dim: 8,
            dropout: 0.0,
            ablate_residual: true,
            ..GnnMoeConfig::new(5, 3)
        };
        let model = GnnMoeModel::new(cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let logits = model.forward(&tape, &g, &mut rng, true).unwrap();
        let mask: Vec<usize> = (0..10).collect();
        let loss = cross_entropy_loss(&tape, &logits, g.labels(), &mask).unwrap();
        tape.backward(&loss).unwrap();
        for (name, p) in model.parameters() {
            if name.ends_with(".alpha") || name == "ffn.beta" {
                assert!(p.grad_clone().is_none(), "{name} should be gradient-free");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let mut rng = seeded_rng(4);
        let g = small_graph(&mut rng);
        let cfg = GnnMoeConfig {
            hidden_dim: 8,
            dropout: 0.0,
            ..GnnMoeConfig::new(5, 3)
        };
        let model = GnnMoeModel::new(cfg.clone(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&model, &stem).unwrap();

        let mut rng2 = seeded_rng(999);
        let restored = GnnMoeModel::new(cfg.clone(), &mut rng2).unwrap();
        load_checkpoint(&restored, &stem).unwrap();
        let tape = Tape::inference();
        let a = model.forward(&tape, &g, &mut rng, false).unwrap().value_clone();
        let b = restored.forward(&tape, &g, &mut rng, false).unwrap().value_clone();
        assert_eq!(a, b);

        let bigger = GnnMoeConfig {
            hidden_dim: 16,
            ..cfg
        };
        let mismatched = GnnMoeModel::new(bigger, &mut rng2).unwrap();
        assert!(load_checkpoint(&mismatched, &stem).is_err());
    }
}
