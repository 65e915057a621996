//! Training harness: stratified splits, AdamW with decoupled weight decay,
//! full-batch epochs with early stopping on validation accuracy, and
//! multi-seed aggregation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::model::{cross_entropy_loss, predict, GnnMoeConfig, GnnMoeModel};
use crate::{seeded_rng, Prng};

/// What early stopping watches. Accuracy is the reporting metric; loss-based
/// stopping is available as an option.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monitor {
    ValAccuracy,
    ValLoss,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub split_fractions: (f64, f64, f64),
    pub seeds: Vec<u64>,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 500,
            patience: 100,
            split_fractions: (0.48, 0.32, 0.20),
            seeds: (0..10).collect(),
            monitor: Monitor::ValAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split_fractions;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::contract(
                "train_config",
                format!("split fractions ({a}, {b}, {c}) must be positive and sum to 1"),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::contract(
                "train_config",
                "patience must not exceed max_epochs",
            ));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::contract("train_config", "bad lr/weight_decay"));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract("train_config", "need at least one seed"));
        }
        Ok(())
    }
}

/// Disjoint node sets covering the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: within each class, nodes are shuffled by `seed` and cut
/// at the fraction boundaries.
pub fn make_splits(g: &Graph, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (f_train, f_val, f_test) = fractions;
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::contract("make_splits", "fractions must sum to 1"));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes()];
    for (node, &label) in g.labels().iter().enumerate() {
        per_class[label].push(node);
    }
    let mut rng = Prng::seed_from_u64(seed);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, nodes) in per_class.iter_mut().enumerate() {
        if nodes.len() < 3 {
            return Err(Error::contract(
                "make_splits",
                format!("class {class} has {} nodes, cannot stratify", nodes.len()),
            ));
        }
        nodes.shuffle(&mut rng);
        let n = nodes.len();
        let cut_train = (f_train * n as f64).floor() as usize;
        let cut_val = ((f_train + f_val) * n as f64).floor() as usize;
        splits.train.extend(&nodes[..cut_train]);
        splits.val.extend(&nodes[cut_train..cut_val]);
        splits.test.extend(&nodes[cut_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// AdamW with decoupled decay: parameters shrink by `lr * wd` before the
/// bias-corrected Adam step, so a zero gradient still decays.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    moments: Vec<(Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], lr: f64, weight_decay: f64) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| {
                let (r, c) = p.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            })
            .collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor)]) {
        assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((_, param), (m, v)) in params.iter().zip(&mut self.moments) {
            param.update(|value, grad| {
                if self.weight_decay > 0.0 {
                    for x in value.data_mut() {
                        *x -= self.lr * self.weight_decay * *x;
                    }
                }
                let Some(grad) = grad else { return };
                for i in 0..value.data().len() {
                    let g = grad.data()[i];
                    let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                    let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
    }
}

/// One self-delimiting history record per epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub elapsed_ms: f64,
}

impl EpochRecord {
    /// The structured log-line form: `epoch=3 train_loss=... val_acc=... elapsed_ms=...`
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={} val_acc={} elapsed_ms={}",
            self.epoch, self.train_loss, self.val_acc, self.elapsed_ms
        )
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Fraction of masked nodes predicted correctly.
pub fn evaluate(model: &GnnMoeModel, g: &Graph, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::contract("evaluate", "empty mask"));
    }
    let tape = Tape::inference();
    // rng is untouched in evaluation mode
    let mut rng = seeded_rng(0);
    let logits = model.forward(&tape, g, &mut rng, false)?;
    let pred = predict(&logits.value());
    Ok(accuracy(&pred, g.labels(), mask))
}

pub fn accuracy(pred: &[usize], labels: &[usize], mask: &[usize]) -> f64 {
    let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    hits as f64 / mask.len() as f64
}

fn val_loss(model: &GnnMoeModel, g: &Graph, mask: &[usize]) -> Result<f64> {
    let tape = Tape::inference();
    let mut rng = seeded_rng(0);
    let logits = model.forward(&tape, g, &mut rng, false)?;
    Ok(cross_entropy_loss(&tape, &logits, g.labels(), mask)?.item())
}

/// Full-batch training with early stopping. The model is left holding the
/// parameters of the epoch with the best validation score (first occurrence
/// on ties), and the per-epoch history is returned.
pub fn train_one(
    model: &GnnMoeModel,
    g: &Graph,
    splits: &Splits,
    cfg: &TrainConfig,
    rng: &mut Prng,
) -> Result<TrainReport> {
    cfg.validate()?;
    let params = model.parameters();
    let mut optimizer = AdamW::new(&params, cfg.lr, cfg.weight_decay);
    let mut history = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_val_acc = 0.0;
    let mut best_epoch = 0;
    let mut best_snapshot: Vec<Matrix> = params.iter().map(|(_, p)| p.value_clone()).collect();
    let mut since_improvement = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        let tape = Tape::new();
        let logits = model.forward(&tape, g, rng, true)?;
        let loss = cross_entropy_loss(&tape, &logits, g.labels(), &splits.train)?;
        let train_loss = loss.item();
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("train loss {train_loss}"),
            });
        }
        model.zero_grads();
        tape.backward(&loss)?;
        optimizer.step(&params);

        let val_acc = evaluate(model, g, &splits.val)?;
        let score = match cfg.monitor {
            Monitor::ValAccuracy => val_acc,
            Monitor::ValLoss => -val_loss(model, g, &splits.val)?,
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if score > best_score {
            best_score = score;
            best_val_acc = val_acc;
            best_epoch = epoch;
            best_snapshot = params.iter().map(|(_, p)| p.value_clone()).collect();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }

    for ((_, p), snap) in params.iter().zip(&best_snapshot) {
        p.assign(snap);
    }
    Ok(TrainReport {
        best_val_acc,
        best_epoch,
        epochs_run: history.len(),
        history,
    })
}

/// One seed's end-to-end result.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub test_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_ms: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub runs: Vec<SeedRun>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
}

/// Sample (n-1) statistics; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Hook invoked with the trained model before it is dropped, e.g. to write
/// a checkpoint. Runs on the worker thread that trained the seed.
pub type SeedHook<'a> = &'a (dyn Fn(u64, &GnnMoeModel) -> Result<()> + Sync);

fn run_single_seed(
    g: &Graph,
    model_cfg: &GnnMoeConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    hook: Option<SeedHook>,
) -> Result<SeedRun> {
    let start = Instant::now();
    let splits = make_splits(g, train_cfg.split_fractions, seed)?;
    let mut rng = seeded_rng(seed);
    let model = GnnMoeModel::new(model_cfg.clone(), &mut rng)?;
    let report = train_one(&model, g, &splits, train_cfg, &mut rng)?;
    let test_acc = evaluate(&model, g, &splits.test)?;
    if let Some(hook) = hook {
        hook(seed, &model)?;
    }
    Ok(SeedRun {
        seed,
        test_acc,
        best_val_acc: report.best_val_acc,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        history: report.history,
    })
}

/// For each seed: regenerate splits, reinitialize, train, and test; report
/// mean ± sample standard deviation of test accuracy.
pub fn run_seeds(g: &Graph, model_cfg: &GnnMoeConfig, train_cfg: &TrainConfig) -> Result<Summary> {
    run_seeds_jobs(g, model_cfg, train_cfg, 1)
}

/// Seeds are independent jobs; with `jobs > 1` they run on worker threads
/// and results are merged in seed order once all jobs finish.
pub fn run_seeds_jobs(
    g: &Graph,
    model_cfg: &GnnMoeConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
) -> Result<Summary> {
    run_seeds_hooked(g, model_cfg, train_cfg, jobs, None)
}

pub fn run_seeds_hooked(
    g: &Graph,
    model_cfg: &GnnMoeConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
    hook: Option<SeedHook>,
) -> Result<Summary> {
    train_cfg.validate()?;
    let seeds = &train_cfg.seeds;
    let mut runs: Vec<Result<SeedRun>> = Vec::with_capacity(seeds.len());
    if jobs <= 1 || seeds.len() <= 1 {
        for &seed in seeds {
            runs.push(run_single_seed(g, model_cfg, train_cfg, seed, hook));
        }
    } else {
        let mut slots: Vec<Option<Result<SeedRun>>> = (0..seeds.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (chunk_idx, chunk) in seeds.chunks(seeds.len().div_ceil(jobs)).enumerate() {
                let offset = chunk_idx * seeds.len().div_ceil(jobs);
                handles.push(scope.spawn(move || {
                    let results: Vec<(usize, Result<SeedRun>)> = chunk
                        .iter()
                        .enumerate()
                        .map(|(i, &seed)| {
                            (offset + i, run_single_seed(g, model_cfg, train_cfg, seed, hook))
                        })
                        .collect();
                    results
                }));
            }
            for handle in handles {
                for (idx, result) in handle.join().expect("seed worker panicked") {
                    slots[idx] = Some(result);
                }
            }
        });
        runs.extend(slots.into_iter().map(|s| s.expect("all seeds ran")));
    }
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
    let (mean_test_acc, std_test_acc) = mean_std(&accs);
    Ok(Summary {
        runs,
        mean_test_acc,
        std_test_acc,
    })
}
