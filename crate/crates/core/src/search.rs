//! Alternating first-order bilevel search.
//!
//! Each step first moves the network weights θ by SGD on a training batch
//! with the architecture logits α held fixed, then moves α by Adam on a
//! validation batch with θ held fixed. The inner argmin over θ is never
//! solved; the current θ stands in for it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::{stratified_halves, Sample};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer, Sgd};
use crate::params::{mix_seed, ParamStore};
use crate::supernet::{MixedBody, Supernet};
use crate::tensor::Tensor;

/// Anything with a binary class label.
pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for Sample {
    fn label(&self) -> usize {
        self.label
    }
}

/// A model with weights θ and architecture parameters α.
pub trait BilevelModel {
    type Sample;

    /// Scalar loss minimised over θ.
    fn train_loss(&self, tape: &mut Tape, theta: &ParamStore, alpha: &ParamStore, batch: &[&Self::Sample])
        -> Result<Var>;

    /// Scalar loss minimised over α. Same as the training loss unless the
    /// model says otherwise.
    fn val_loss(&self, tape: &mut Tape, theta: &ParamStore, alpha: &ParamStore, batch: &[&Self::Sample]) -> Result<Var> {
        self.train_loss(tape, theta, alpha, batch)
    }
}

/// Stacks samples into `[B, 1, D, H, W]` PET and CT batches plus labels.
pub fn stack_batch(batch: &[&Sample]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let pets: Vec<&Tensor> = batch.iter().map(|s| &s.pet).collect();
    let cts: Vec<&Tensor> = batch.iter().map(|s| &s.ct).collect();
    Ok((Tensor::stack0(&pets)?, Tensor::stack0(&cts)?, batch.iter().map(|s| s.label).collect()))
}

/// Cross-entropy of the supernet on paired studies.
pub struct SupernetObjective<'a> {
    pub net: &'a Supernet,
}

impl BilevelModel for SupernetObjective<'_> {
    type Sample = Sample;

    fn train_loss(&self, tape: &mut Tape, theta: &ParamStore, alpha: &ParamStore, batch: &[&Sample]) -> Result<Var> {
        let (pet, ct, labels) = stack_batch(batch)?;
        let (p, c) = (tape.constant(pet), tape.constant(ct));
        let body = MixedBody::from_store(alpha, self.net.config().num_nodes);
        let logits = self.net.wiring().forward(tape, theta, &body, p, c)?;
        tape.softmax_cross_entropy(logits, &labels)
    }
}

fn default_epochs() -> usize {
    200
}
fn default_snapshot_every() -> usize {
    10
}
fn default_batch() -> usize {
    1
}
fn default_theta_lr() -> f64 {
    1e-4
}
fn default_alpha_lr() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Write an α checkpoint every this many epochs (0 disables).
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_theta_lr")]
    pub theta_lr: f64,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            snapshot_every: default_snapshot_every(),
            batch_size: default_batch(),
            theta_lr: default_theta_lr(),
            alpha_lr: default_alpha_lr(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("search epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("search batch_size must be at least 1".into()));
        }
        for (name, lr) in [("theta_lr", self.theta_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Architecture logits recorded at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub alpha: ParamStore,
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub epoch: usize,
    theta_opt: Sgd,
    alpha_opt: Adam,
    pub best: Option<Snapshot>,
}

impl SearchState {
    pub fn new(theta_lr: f64, alpha_lr: f64) -> Self {
        Self {
            epoch: 0,
            theta_opt: Sgd::new(theta_lr),
            alpha_opt: Adam::new(alpha_lr),
            best: None,
        }
    }

    /// Keeps `alpha` if `val_loss` beats the best so far. Returns whether it did.
    pub fn offer(&mut self, epoch: usize, val_loss: f64, alpha: &ParamStore) -> bool {
        if self.best.as_ref().is_some_and(|b| b.val_loss <= val_loss) {
            return false;
        }
        let mut alpha = alpha.clone();
        alpha.zero_grads();
        self.best = Some(Snapshot { epoch, val_loss, alpha });
        true
    }
}

/// Losses measured before each half-step's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

/// One θ update followed by one α update.
pub fn search_step<M: BilevelModel>(
    model: &M,
    theta: &mut ParamStore,
    alpha: &mut ParamStore,
    train: &[&M::Sample],
    val: &[&M::Sample],
    state: &mut SearchState,
) -> Result<StepLosses> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("search step needs non-empty training and validation batches".into()));
    }
    theta.zero_grads();
    alpha.zero_grads();

    let mut tape = Tape::new();
    tape.freeze_store(alpha);
    let loss = model.train_loss(&mut tape, theta, alpha, train)?;
    let train_loss = tape.value(loss).item();
    tape.backward(loss)?;
    theta.accumulate_grads(&tape)?;
    state.theta_opt.step(theta)?;

    let mut tape = Tape::new();
    tape.freeze_store(theta);
    let loss = model.val_loss(&mut tape, theta, alpha, val)?;
    let val_loss = tape.value(loss).item();
    tape.backward(loss)?;
    alpha.accumulate_grads(&tape)?;
    state.alpha_opt.step(alpha)?;

    Ok(StepLosses {
        train: train_loss,
        val: val_loss,
    })
}

/// One row of the search log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation loss seen by the α steps of this epoch.
    pub val_loss: f64,
    /// This epoch's α became the best snapshot.
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub log: Vec<EpochLog>,
    pub best: Snapshot,
}

/// Splits `data` 50/50 by label into θ and α halves and runs `cfg.epochs`
/// epochs of [`search_step`]. The α half is cycled when it is shorter.
/// `on_epoch` sees each log row and the α values at the end of its epoch.
pub fn run_search<M>(
    model: &M,
    theta: &mut ParamStore,
    alpha: &mut ParamStore,
    data: &[M::Sample],
    cfg: &SearchConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<SearchOutcome>
where
    M: BilevelModel,
    M::Sample: Labeled,
{
    cfg.validate()?;
    let labels: Vec<usize> = data.iter().map(Labeled::label).collect();
    if data.len() < 4 {
        return Err(Error::Data(format!("search needs at least 4 studies, got {}", data.len())));
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data("search data contains a single class".into()));
    }
    let (mut train_idx, mut val_idx) = stratified_halves(&labels, mix_seed(seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut state = SearchState::new(cfg.theta_lr, cfg.alpha_lr);
    let bs = cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        train_idx.shuffle(&mut rng);
        val_idx.shuffle(&mut rng);
        let (mut tsum, mut vsum, mut steps) = (0.0, 0.0, 0usize);
        for (s, chunk) in train_idx.chunks(bs).enumerate() {
            let train: Vec<&M::Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let val: Vec<&M::Sample> = (0..bs)
                .map(|j| &data[val_idx[(s * bs + j) % val_idx.len()]])
                .collect();
            let l = search_step(model, theta, alpha, &train, &val, &mut state)?;
            tsum += l.train;
            vsum += l.val;
            steps += 1;
        }
        let (train_loss, val_loss) = (tsum / steps as f64, vsum / steps as f64);
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::NonFinite("search loss"));
        }
        let best = state.offer(epoch, val_loss, alpha);
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            best,
        };
        on_epoch(&row, alpha)?;
        log.push(row);
    }
    Ok(SearchOutcome {
        log,
        best: state.best.expect("at least one epoch ran"),
    })
}

pub fn search_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,best_flag\n");
    for r in log {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.best as u8).unwrap();
    }
    s
}

pub fn write_search_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, search_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_generate;
    use crate::search_space::AlphaTable;
    use crate::supernet::{ModalityMode, SupernetConfig};

    /// L_train = (θ − 1)², L_val = (θ − α)².
    struct Toy;

    impl Labeled for usize {
        fn label(&self) -> usize {
            *self
        }
    }

    fn sq_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d = tape.sub(a, b)?;
        let d2 = tape.mul(d, d)?;
        Ok(tape.sum(d2))
    }

    impl BilevelModel for Toy {
        type Sample = usize;

        fn train_loss(&self, tape: &mut Tape, theta: &ParamStore, _: &ParamStore, _: &[&usize]) -> Result<Var> {
            let t = tape.param(theta, "theta")?;
            let one = tape.constant(Tensor::scalar(1.0));
            sq_diff(tape, t, one)
        }

        fn val_loss(&self, tape: &mut Tape, theta: &ParamStore, alpha: &ParamStore, _: &[&usize]) -> Result<Var> {
            let t = tape.param(theta, "theta")?;
            let a = tape.param(alpha, "alpha")?;
            sq_diff(tape, t, a)
        }
    }

    fn scalar_store(name: &str, v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert(name, Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn toy_instance_converges() {
        let (mut theta, mut alpha) = (scalar_store("theta", -2.0), scalar_store("alpha", 3.0));
        let mut state = SearchState::new(1e-2, 1e-2);
        let mut steps = 0;
        while steps < 5000 {
            search_step(&Toy, &mut theta, &mut alpha, &[&0], &[&1], &mut state).unwrap();
            steps += 1;
            let (t, a) = (theta.get("theta").unwrap().item(), alpha.get("alpha").unwrap().item());
            if (t - 1.0).abs() < 1e-3 && (a - 1.0).abs() < 1e-3 {
                break;
            }
        }
        assert!(steps < 5000, "θ = {:?}, α = {:?}", theta.get("theta"), alpha.get("alpha"));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (mut theta, mut alpha) = (scalar_store("theta", 0.0), scalar_store("alpha", 0.0));
        let mut state = SearchState::new(1e-2, 1e-2);
        assert!(search_step(&Toy, &mut theta, &mut alpha, &[], &[&1], &mut state).is_err());
        assert!(search_step(&Toy, &mut theta, &mut alpha, &[&0], &[], &mut state).is_err());
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let (mut theta, mut alpha) = (scalar_store("theta", 1.0), scalar_store("alpha", 1.0));
        let mut state = SearchState::new(1e-2, 1e-2);
        for _ in 0..10 {
            search_step(&Toy, &mut theta, &mut alpha, &[&0], &[&1], &mut state).unwrap();
        }
        assert_eq!(theta.get("theta").unwrap().item(), 1.0);
        assert_eq!(alpha.get("alpha").unwrap().item(), 1.0);
    }

    fn tiny() -> SupernetConfig {
        SupernetConfig {
            input_dims: [8, 8, 8],
            stem_channels: 2,
            num_nodes: 2,
            num_reduction_cells: 2,
            num_classes: 2,
            modality_mode: ModalityMode::PetCt,
            seed: 0,
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<Sample> {
        synth_generate(n, [8, 8, 8], 0.1, seed)
            .unwrap()
            .studies
            .iter()
            .map(Sample::from_study)
            .collect()
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let (net, theta0, alpha0) = Supernet::build(&tiny(), 1).unwrap();
        let data = tiny_data(4, 2);
        let model = SupernetObjective { net: &net };
        let mut state = SearchState::new(0.05, 0.05);

        // θ half: α unchanged.
        let (mut theta, mut alpha) = (theta0.clone(), alpha0.store().clone());
        let mut tape = Tape::new();
        tape.freeze_store(&alpha);
        let loss = model.train_loss(&mut tape, &theta, &alpha, &[&data[0]]).unwrap();
        tape.backward(loss).unwrap();
        theta.accumulate_grads(&tape).unwrap();
        alpha.accumulate_grads(&tape).unwrap();
        assert!(alpha.iter().all(|(_, t)| t.grad().is_none()));

        // Full step: both move, the partition holds on values.
        search_step(&model, &mut theta, &mut alpha, &[&data[0]], &[&data[1]], &mut state).unwrap();
        assert_ne!(theta.to_bytes(), theta0.to_bytes());
        assert_ne!(alpha.to_bytes(), alpha0.store().to_bytes());
        let mut tape = Tape::new();
        tape.freeze_store(&theta);
        let loss = model.val_loss(&mut tape, &theta, &alpha, &[&data[1]]).unwrap();
        tape.backward(loss).unwrap();
        let mut probe = theta.clone();
        probe.accumulate_grads(&tape).unwrap();
        assert!(probe.iter().all(|(_, t)| t.grad().is_none()));
    }

    fn val_loss(model: &SupernetObjective, theta: &ParamStore, alpha: &ParamStore, s: &Sample) -> f64 {
        let mut tape = Tape::new();
        let l = model.val_loss(&mut tape, theta, alpha, &[s]).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn alpha_gradient_is_a_descent_direction() {
        let (net, theta, alpha) = Supernet::build(&tiny(), 3).unwrap();
        let data = tiny_data(2, 4);
        let model = SupernetObjective { net: &net };
        let mut alpha = alpha.store().clone();
        let mut r = crate::testutil::rng(5);
        for (_, t) in alpha.iter_mut() {
            let v = crate::testutil::rand_tensor(&mut r, &[10]);
            t.data_mut().copy_from_slice(v.data());
        }
        let l0 = val_loss(&model, &theta, &alpha, &data[1]);
        let mut tape = Tape::new();
        tape.freeze_store(&theta);
        let loss = model.val_loss(&mut tape, &theta, &alpha, &[&data[1]]).unwrap();
        tape.backward(loss).unwrap();
        alpha.accumulate_grads(&tape).unwrap();

        let mut lr = 1.0;
        let decreased = (0..40).any(|_| {
            let mut trial = alpha.clone();
            Sgd::new(lr).step(&mut trial).unwrap();
            lr *= 0.5;
            val_loss(&model, &theta, &trial, &data[1]) < l0
        });
        assert!(decreased);
    }

    #[test]
    fn run_search_bookkeeping_and_determinism() {
        let data = tiny_data(8, 6);
        let cfg = SearchConfig {
            epochs: 5,
            theta_lr: 1e-2,
            alpha_lr: 5e-3,
            ..SearchConfig::default()
        };
        let run = || {
            let (net, mut theta, alpha) = Supernet::build(&tiny(), 7).unwrap();
            let mut alpha = alpha.store().clone();
            let mut seen = 0;
            let out = run_search(&SupernetObjective { net: &net }, &mut theta, &mut alpha, &data, &cfg, 8, |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, 5);
            out
        };
        let out = run();
        assert_eq!(out.log.len(), 5);
        assert!(out.log.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        let argmin = out.log.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
        assert_eq!(out.best.epoch, argmin.epoch);
        assert_eq!(out.best.val_loss, argmin.val_loss);
        let flagged: Vec<f64> = out.log.iter().filter(|r| r.best).map(|r| r.val_loss).collect();
        assert!(flagged.windows(2).all(|w| w[1] < w[0]));
        AlphaTable::from_store(out.best.alpha.clone(), 2).unwrap();

        let again = run();
        assert_eq!(search_log_csv(&out.log), search_log_csv(&again.log));
        assert_eq!(out.best.alpha.to_bytes(), again.best.alpha.to_bytes());
    }

    #[test]
    fn run_search_rejects_bad_data() {
        let (net, mut theta, alpha) = Supernet::build(&tiny(), 7).unwrap();
        let mut alpha = alpha.store().clone();
        let mut data = tiny_data(8, 6);
        for s in &mut data {
            s.label = 0;
        }
        let model = SupernetObjective { net: &net };
        let cfg = SearchConfig::default();
        let err = run_search(&model, &mut theta, &mut alpha, &data, &cfg, 0, |_, _| Ok(())).unwrap_err();
        assert!(err.to_string().contains("single class"));
        let err = run_search(&model, &mut theta, &mut alpha, &data[..2], &cfg, 0, |_, _| Ok(())).unwrap_err();
        assert!(err.to_string().contains("at least 4"));
    }

    #[test]
    fn log_csv_layout() {
        let log = [EpochLog {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            best: true,
        }];
        assert_eq!(search_log_csv(&log), "epoch,train_loss,val_loss,best_flag\n1,0.5,0.25,1\n");
    }
}
