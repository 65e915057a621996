//! Re-implementation oracles: every numeric path is recomputed here from
//! plain loops and compared against the library's composed result.

use gnnmoe::autodiff::{Tape, Tensor};
use gnnmoe::blocks::{
    ffn_forward, hard_gate, pt_block_forward, BlockOpts, EnhancedFfn, GateMode, GluKind, PtBlock,
    LN_EPS,
};
use gnnmoe::experts::ExpertKind;
use gnnmoe::graph::{Graph, PropKind};
use gnnmoe::init::glorot;
use gnnmoe::matrix::Matrix;
use gnnmoe::model::{cross_entropy_loss, GnnMoeConfig, GnnMoeModel, PropChoice};
use gnnmoe::seeded_rng;
use rand::Rng;

fn random_graph(n: usize, classes: usize, dim: usize, extra_edges: usize, seed: u64) -> Graph {
    let mut rng = seeded_rng(seed);
    let features = glorot(n, dim, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    for _ in 0..extra_edges {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v {
            edges.push((u.min(v), u.max(v)));
        }
    }
    Graph::new(features, labels, classes, &edges, true).unwrap()
}

/// Dense normalization recomputed with nested loops.
fn dense_normalized(g: &Graph, symmetric: bool) -> Vec<Vec<f64>> {
    let n = g.num_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for (u, v) in g.edges_once() {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != 0.0 {
                out[i][j] = if symmetric {
                    a[i][j] / (deg[i].sqrt() * deg[j].sqrt())
                } else {
                    a[i][j] / deg[i]
                };
            }
        }
    }
    out
}

fn max_entry_diff(dense: &[Vec<f64>], sparse: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in dense.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            worst = worst.max((x - sparse.get(i, j)).abs());
        }
    }
    worst
}

#[test]
fn gcn_normalization_matches_dense_oracle() {
    let g = random_graph(30, 3, 4, 40, 1);
    let oracle = dense_normalized(&g, true);
    let sparse = g.normalize_gcn().to_dense();
    assert!(max_entry_diff(&oracle, &sparse) < 1e-12);
    // symmetric for undirected input
    assert!(sparse.max_abs_diff(&sparse.transpose()) < 1e-15);
}

#[test]
fn sage_normalization_matches_dense_oracle() {
    let g = random_graph(30, 3, 4, 40, 2);
    let oracle = dense_normalized(&g, false);
    let sparse = g.normalize_sage().to_dense();
    assert!(max_entry_diff(&oracle, &sparse) < 1e-12);
    for i in 0..30 {
        let sum: f64 = sparse.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

// plain-loop helpers the oracles below are built from

fn mat(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; cols]; rows]
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = mat(a.len(), b[0].len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            for j in 0..b[0].len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn relu_rows(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| r.iter().map(|&x| x.max(0.0)).collect())
        .collect()
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = r.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn layernorm_oracle(a: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, &x)| (x - mean) * istd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Eq. 3-4 recomputed step by step from the block's own weights.
#[test]
fn pt_block_matches_step_by_step_oracle() {
    let g = random_graph(10, 2, 3, 8, 3);
    let dim = 6;
    let mut rng = seeded_rng(4);
    let block = PtBlock::new(dim, 5, &mut rng);
    let h_prev_m = glorot(10, dim, &mut rng);
    let h0_m = glorot(10, dim, &mut rng);

    let tape = Tape::new();
    let out = pt_block_forward(
        &tape,
        &block,
        &PropKind::GcnLike,
        &g,
        &Tensor::constant(h_prev_m.clone()),
        &Tensor::constant(h0_m.clone()),
        &BlockOpts::eval(),
        &mut rng,
    )
    .unwrap();

    // oracle: gate weights
    let h_prev = to_rows(&h_prev_m);
    let h0 = to_rows(&h0_m);
    let w1 = to_rows(&block.gate.w1.value_clone());
    let w2 = to_rows(&block.gate.w2.value_clone());
    let gate: Vec<Vec<f64>> = mm(&relu_rows(&mm(&h_prev, &w1)), &w2)
        .iter()
        .map(|r| softmax_row(r))
        .collect();

    // oracle: experts over the dense normalized adjacency
    let s = dense_normalized(&g, true);
    let prop = |h: &[Vec<f64>]| mm(&s, h);
    let transform = |h: &[Vec<f64>], t: &gnnmoe::experts::TransformOp| {
        let w = to_rows(&t.weight.value_clone());
        let b = t.bias.value_clone();
        let lin = mm(h, &w);
        relu_rows(
            &lin.iter()
                .map(|r| r.iter().enumerate().map(|(j, &x)| x + b.get(0, j)).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
    };
    let expert_outs: Vec<Vec<Vec<f64>>> = block
        .experts
        .iter()
        .map(|e| match e.kind {
            ExpertKind::PP => prop(&prop(&h_prev)),
            ExpertKind::PT => transform(&prop(&h_prev), &e.t_ops[0]),
            ExpertKind::TP => prop(&transform(&h_prev, &e.t_ops[0])),
            ExpertKind::TT => transform(&transform(&h_prev, &e.t_ops[0]), &e.t_ops[1]),
        })
        .collect();

    // oracle: per-node mixture, adaptive initial residual, layer norm
    let alpha = sigmoid(block.alpha_raw.item());
    let mut pre = mat(10, dim);
    for i in 0..10 {
        for j in 0..dim {
            let mixed: f64 = (0..4).map(|e| gate[i][e] * expert_outs[e][i][j]).sum();
            pre[i][j] = alpha * h0[i][j] + (1.0 - alpha) * mixed;
        }
    }
    let gain = block.ln_gain.value_clone();
    let bias = block.ln_bias.value_clone();
    let expect = layernorm_oracle(&pre, gain.row(0), bias.row(0));

    assert!(out.h.value().max_abs_diff(&from_rows(&expect)) < 1e-10);
    assert!(out.gate_weights.max_abs_diff(&from_rows(&gate)) < 1e-12);
}

/// Eq. 5-6 recomputed from the same weights and an identically seeded
/// Gumbel stream.
#[test]
fn ffn_matches_independent_oracle() {
    let dim = 5;
    let mut rng = seeded_rng(7);
    let ffn = EnhancedFfn::new(dim, 0.7, &mut rng);
    let h_m = glorot(9, dim, &mut rng);
    let h0_m = glorot(9, dim, &mut rng);

    let mut fwd_rng = seeded_rng(99);
    let tape = Tape::new();
    let out = ffn_forward(
        &tape,
        &ffn,
        &Tensor::constant(h_m.clone()),
        &Tensor::constant(h0_m.clone()),
        &BlockOpts {
            training: true,
            dropout: 0.0,
            force_expert: None,
            ablate_residual: false,
        },
        GateMode::Hard,
        &mut fwd_rng,
    )
    .unwrap();

    // oracle: identical rng state, Gumbel(0,1) = -ln(-ln u)
    let mut oracle_rng = seeded_rng(99);
    let h = to_rows(&h_m);
    let h0 = to_rows(&h0_m);
    let pooled: Vec<f64> = (0..dim)
        .map(|j| h.iter().map(|r| r[j]).sum::<f64>() / h.len() as f64)
        .collect();
    let w = to_rows(&ffn.gate_weight.value_clone());
    let logits: Vec<f64> = (0..3)
        .map(|j| (0..dim).map(|k| pooled[k] * w[k][j]).sum())
        .collect();
    let noisy: Vec<f64> = logits
        .iter()
        .map(|&l| {
            let u: f64 = oracle_rng.gen();
            l - (-u.ln()).ln()
        })
        .collect();
    let j_star = (0..3)
        .max_by(|&a, &b| noisy[a].partial_cmp(&noisy[b]).unwrap())
        .unwrap();
    assert_eq!(out.expert_index, j_star);

    let expert = &ffn.experts[j_star];
    let w3 = to_rows(&expert.w3.value_clone());
    let w4 = to_rows(&expert.w4.value_clone());
    let w5 = to_rows(&expert.w5.value_clone());
    let act = |x: f64| match expert.kind {
        GluKind::SwishGlu => x * sigmoid(x),
        GluKind::Geglu => {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        GluKind::Reglu => x.max(0.0),
    };
    let gate_path: Vec<Vec<f64>> = mm(&h, &w3)
        .iter()
        .map(|r| r.iter().map(|&x| act(x)).collect())
        .collect();
    let value_path = mm(&h, &w4);
    let gated: Vec<Vec<f64>> = gate_path
        .iter()
        .zip(&value_path)
        .map(|(g, v)| g.iter().zip(v).map(|(&a, &b)| a * b).collect())
        .collect();
    let encoded = mm(&gated, &w5);

    let beta = sigmoid(ffn.beta_raw.item());
    let pre: Vec<Vec<f64>> = (0..9)
        .map(|i| {
            (0..dim)
                .map(|j| beta * h0[i][j] + (1.0 - beta) * encoded[i][j])
                .collect()
        })
        .collect();
    let gain = ffn.ln_gain.value_clone();
    let bias = ffn.ln_bias.value_clone();
    let expect = layernorm_oracle(&pre, gain.row(0), bias.row(0));
    assert!(out.z.value().max_abs_diff(&from_rows(&expect)) < 1e-10);
}

/// Empirical hard-gate frequencies against an independent Gumbel-argmax
/// simulation and the closed-form softmax probabilities.
#[test]
fn hard_gate_frequencies_match_gumbel_argmax_oracle() {
    let logits = [1.0, 0.0, -1.0];
    // closed form: softmax(logits)
    let closed = softmax_row(&logits);
    assert!((closed[0] - 0.665).abs() < 5e-4);
    assert!((closed[1] - 0.245).abs() < 5e-4);
    assert!((closed[2] - 0.090).abs() < 5e-4);

    // implementation frequencies: hidden width 1 and unit h makes the
    // gate-weight row the logits
    let mut rng = seeded_rng(11);
    let mut ffn = EnhancedFfn::new(1, 1.0, &mut rng);
    ffn.gate_weight = Tensor::parameter(Matrix::from_vec(1, 3, logits.to_vec()));
    let h = Tensor::constant(Matrix::filled(2, 1, 1.0));
    let draws = 100_000;
    let mut counts = [0usize; 3];
    let mut gate_rng = seeded_rng(12);
    for _ in 0..draws {
        let tape = Tape::inference();
        let out = hard_gate(&tape, &ffn, &h, &mut gate_rng, true, GateMode::Hard).unwrap();
        counts[out.index] += 1;
    }

    // oracle: direct simulation with an independent rng
    let mut oracle_rng = seeded_rng(13);
    let mut oracle_counts = [0usize; 3];
    for _ in 0..draws {
        let noisy: Vec<f64> = logits
            .iter()
            .map(|&l| {
                let u: f64 = oracle_rng.gen();
                l - (-u.ln()).ln()
            })
            .collect();
        let j = (0..3)
            .max_by(|&a, &b| noisy[a].partial_cmp(&noisy[b]).unwrap())
            .unwrap();
        oracle_counts[j] += 1;
    }

    for j in 0..3 {
        let f_impl = counts[j] as f64 / draws as f64;
        let f_oracle = oracle_counts[j] as f64 / draws as f64;
        assert!(
            (f_impl - closed[j]).abs() < 0.01,
            "impl freq {f_impl} vs closed {}",
            closed[j]
        );
        assert!(
            (f_oracle - closed[j]).abs() < 0.01,
            "oracle freq {f_oracle} vs closed {}",
            closed[j]
        );
    }
}

/// Scalar-loop loss oracle plus the trace-sum identity.
#[test]
fn loss_matches_scalar_loop_and_trace_form() {
    let n = 10;
    let c = 3;
    let mut rng = seeded_rng(21);
    let logits_m = glorot(n, c, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mask: Vec<usize> = vec![0, 2, 3, 5, 8, 9];

    let tape = Tape::new();
    let loss = cross_entropy_loss(&tape, &Tensor::constant(logits_m.clone()), &labels, &mask)
        .unwrap()
        .item();

    // scalar loop: -(1/N) sum log p_true
    let mut total = 0.0;
    for &i in &mask {
        let p = softmax_row(logits_m.row(i));
        total += -p[labels[i]].ln();
    }
    let oracle = total / mask.len() as f64;
    assert!((loss - oracle).abs() < 1e-12);

    // trace form: -trace(Yᵀ · log Ŷ) over the masked rows equals N·loss
    let mut trace = 0.0;
    for &i in &mask {
        let p = softmax_row(logits_m.row(i));
        for (class, &pc) in p.iter().enumerate() {
            let y = if labels[i] == class { 1.0 } else { 0.0 };
            trace += y * pc.ln();
        }
    }
    assert!((loss - (-trace / mask.len() as f64)).abs() < 1e-12);
}

/// Deep stacks of pure propagation lose row separation; the model output is
/// matched against a dense power-iteration oracle and the separation must
/// shrink monotonically with depth.
#[test]
fn oversmoothing_matches_power_iteration_oracle() {
    let g = random_graph(16, 2, 4, 20, 31);
    let s = dense_normalized(&g, true);

    let max_pair_distance = |rows: &[Vec<f64>]| {
        let mut worst: f64 = 0.0;
        for a in 0..rows.len() {
            for b in (a + 1)..rows.len() {
                let d: f64 = rows[a]
                    .iter()
                    .zip(&rows[b])
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
        }
        worst
    };

    let mut distances = Vec::new();
    for depth in [1usize, 2, 4, 8, 16, 32] {
        let config = GnnMoeConfig {
            hidden_dim: 6,
            num_blocks: depth,
            dropout: 0.0,
            ablate_ffn: true,
            ablate_residual: true,
            force_expert: Some(ExpertKind::PP),
            prop: PropChoice::GcnLike,
            ..GnnMoeConfig::new(4, 2)
        };
        let mut rng = seeded_rng(32);
        let model = GnnMoeModel::new(config, &mut rng).unwrap();
        let tape = Tape::inference();
        let logits = model.forward(&tape, &g, &mut rng, false).unwrap();

        // oracle: H0 then `depth` rounds of (S·S·h, layer norm)
        let x = to_rows(g.features());
        let w0 = to_rows(&model.w0.value_clone());
        let b0 = model.b0.value_clone();
        let mut h = relu_rows(
            &mm(&x, &w0)
                .iter()
                .map(|r| r.iter().enumerate().map(|(j, &v)| v + b0.get(0, j)).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        for block in &model.blocks {
            h = mm(&s, &mm(&s, &h));
            let gain = block.ln_gain.value_clone();
            let bias = block.ln_bias.value_clone();
            h = layernorm_oracle(&h, gain.row(0), bias.row(0));
        }
        let w6 = to_rows(&model.w6.value_clone());
        let expect = mm(&h, &w6);
        assert!(
            logits.value().max_abs_diff(&from_rows(&expect)) < 1e-10,
            "depth {depth}"
        );
        distances.push(max_pair_distance(&h));
    }
    for w in distances.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "distances not shrinking: {distances:?}");
    }
    assert!(
        distances.last().unwrap() < &1e-2,
        "rows not near-constant at depth 32: {distances:?}"
    );
}

/// The expert order contract: each expert equals the manual composition of
/// its primitives, bitwise.
#[test]
fn expert_composition_is_bitwise_exact() {
    let g = random_graph(10, 2, 3, 10, 41);
    let dim = 4;
    let mut rng = seeded_rng(42);
    let h = Tensor::constant(glorot(10, dim, &mut rng));
    let kind = PropKind::GcnLike;
    for expert_kind in ExpertKind::ALL {
        let expert = gnnmoe::experts::Expert::new(expert_kind, dim, &mut rng);
        let tape = Tape::new();
        let composed = gnnmoe::experts::apply_expert(&tape, &expert, &kind, &g, &h).unwrap();
        let manual = match expert_kind {
            ExpertKind::PP => {
                let p = gnnmoe::graph::propagate(&tape, &kind, &g, &h).unwrap();
                gnnmoe::graph::propagate(&tape, &kind, &g, &p).unwrap()
            }
            ExpertKind::PT => {
                let p = gnnmoe::graph::propagate(&tape, &kind, &g, &h).unwrap();
                expert.t_ops[0].apply(&tape, &p).unwrap()
            }
            ExpertKind::TP => {
                let t = expert.t_ops[0].apply(&tape, &h).unwrap();
                gnnmoe::graph::propagate(&tape, &kind, &g, &t).unwrap()
            }
            ExpertKind::TT => {
                let t = expert.t_ops[0].apply(&tape, &h).unwrap();
                expert.t_ops[1].apply(&tape, &t).unwrap()
            }
        };
        assert_eq!(
            composed.value_clone(),
            manual.value_clone(),
            "{expert_kind:?}"
        );
    }
}

/// PT output equals an independent two-step oracle on a random graph.
#[test]
fn pt_expert_matches_two_step_oracle() {
    let g = random_graph(10, 2, 3, 12, 51);
    let dim = 4;
    let mut rng = seeded_rng(52);
    let expert = gnnmoe::experts::Expert::new(ExpertKind::PT, dim, &mut rng);
    let h_m = glorot(10, dim, &mut rng);
    let tape = Tape::new();
    let out = gnnmoe::experts::apply_expert(
        &tape,
        &expert,
        &PropKind::GcnLike,
        &g,
        &Tensor::constant(h_m.clone()),
    )
    .unwrap();

    let s = dense_normalized(&g, true);
    let propagated = mm(&s, &to_rows(&h_m));
    let w = to_rows(&expert.t_ops[0].weight.value_clone());
    let b = expert.t_ops[0].bias.value_clone();
    let expect = relu_rows(
        &mm(&propagated, &w)
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, &x)| x + b.get(0, j)).collect())
            .collect::<Vec<Vec<f64>>>(),
    );
    assert!(out.value().max_abs_diff(&from_rows(&expect)) < 1e-12);
}
