//! Discrete architectures: derivation from α, serialization, the derived
//! fixed network and its retraining.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::nas_ops::{apply_op, op_param_specs, OpKind, OpParams};
use crate::optim::{Adam, Optimizer};
use crate::params::{ParamSpec, ParamStore};
use crate::search::stack_batch;
use crate::search_space::{alpha_softmax, AlphaTable, CellSpec, CellType, Edge};
use crate::supernet::{CellBody, SupernetConfig, TraceEntry, Wiring};

/// Incoming edges kept per node.
pub const EDGES_PER_NODE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChosenEdge {
    pub from: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeMeta {
    pub nodes: usize,
    pub alpha_hash: String,
    pub seed: u64,
}

/// Two chosen `(source, op)` pairs per node, per cell type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Genotype {
    pub normal: Vec<[ChosenEdge; EDGES_PER_NODE]>,
    pub reduce: Vec<[ChosenEdge; EDGES_PER_NODE]>,
    pub meta: GenotypeMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenotype {
    normal: Vec<Vec<ChosenEdge>>,
    reduce: Vec<Vec<ChosenEdge>>,
    meta: GenotypeMeta,
}

impl Genotype {
    pub fn cell(&self, cell_type: CellType) -> &[[ChosenEdge; EDGES_PER_NODE]] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.meta.nodes
    }

    fn check_cell(cell_type: CellType, nodes: &[Vec<ChosenEdge>], m: usize) -> Result<Vec<[ChosenEdge; EDGES_PER_NODE]>> {
        if nodes.len() != m {
            return Err(Error::Genotype(format!(
                "{cell_type} cell lists {} nodes, meta says {m}",
                nodes.len()
            )));
        }
        nodes
            .iter()
            .enumerate()
            .map(|(j, edges)| {
                let bad = |why: String| Error::Genotype(format!("{cell_type} cell, node {j}: {why}"));
                let pair: [ChosenEdge; EDGES_PER_NODE] = edges
                    .as_slice()
                    .try_into()
                    .map_err(|_| bad(format!("expected {EDGES_PER_NODE} edges, found {}", edges.len())))?;
                for e in &pair {
                    if e.from >= j + 2 {
                        return Err(bad(format!("source {} does not precede the node", e.from)));
                    }
                    if e.op == OpKind::Zero {
                        return Err(bad("the zero operation cannot be chosen".into()));
                    }
                }
                if pair[0].from == pair[1].from {
                    return Err(bad(format!("source {} chosen twice", pair[0].from)));
                }
                Ok(pair)
            })
            .collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.meta.nodes;
        if m == 0 {
            return Err(Error::Genotype("genotype has no nodes".into()));
        }
        for ct in CellType::ALL {
            let nodes: Vec<Vec<ChosenEdge>> = self.cell(ct).iter().map(|p| p.to_vec()).collect();
            Self::check_cell(ct, &nodes, m)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGenotype = serde_json::from_str(text).map_err(|e| Error::Genotype(e.to_string()))?;
        let m = raw.meta.nodes;
        if m == 0 {
            return Err(Error::Genotype("genotype has no nodes".into()));
        }
        Ok(Self {
            normal: Self::check_cell(CellType::Normal, &raw.normal, m)?,
            reduce: Self::check_cell(CellType::Reduce, &raw.reduce, m)?,
            meta: raw.meta,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Genotype(format!("{}: {e}", path.display())))
    }

    /// One `digraph` per cell type; nodes `input0`, `input1`, `n0..`, `out`.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        for ct in CellType::ALL {
            let vertex = |i: usize| match i {
                0 | 1 => format!("input{i}"),
                _ => format!("n{}", i - 2),
            };
            writeln!(s, "digraph {ct} {{").unwrap();
            writeln!(s, "  rankdir=LR;").unwrap();
            for (j, pair) in self.cell(ct).iter().enumerate() {
                for e in pair {
                    writeln!(s, "  {} -> n{j} [label=\"{}\"];", vertex(e.from), e.op).unwrap();
                }
            }
            for j in 0..self.meta.nodes {
                writeln!(s, "  n{j} -> out;").unwrap();
            }
            writeln!(s, "}}").unwrap();
        }
        s
    }
}

/// Score of an edge and its best operation: the largest softmax weight over
/// the non-zero candidates, ties to the lower op index.
pub fn edge_choice(alpha: &AlphaTable, cell_type: CellType, edge: Edge) -> (f64, OpKind) {
    let w = alpha_softmax(alpha, cell_type, edge);
    let mut best = (f64::NEG_INFINITY, OpKind::Skip);
    for op in OpKind::ALL {
        if op != OpKind::Zero && w.weight(op) > best.0 {
            best = (w.weight(op), op);
        }
    }
    best
}

/// Keeps the two best-scoring incoming edges per node (ties to the lower
/// source), listed in ascending source order.
pub fn derive_genotype(alpha: &AlphaTable, seed: u64) -> Genotype {
    let m = alpha.num_nodes();
    let derive_cell = |ct: CellType| -> Vec<[ChosenEdge; EDGES_PER_NODE]> {
        let spec = CellSpec { cell_type: ct, num_nodes: m };
        (0..m)
            .map(|j| {
                let mut scored: Vec<(f64, ChosenEdge)> = spec
                    .incoming(j)
                    .map(|e| {
                        let (score, op) = edge_choice(alpha, ct, e);
                        (score, ChosenEdge { from: e.from, op })
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.from.cmp(&b.1.from)));
                let mut pair = [scored[0].1, scored[1].1];
                pair.sort_by_key(|e| e.from);
                pair
            })
            .collect()
    };
    Genotype {
        normal: derive_cell(CellType::Normal),
        reduce: derive_cell(CellType::Reduce),
        meta: GenotypeMeta {
            nodes: m,
            alpha_hash: alpha.content_hash(),
            seed,
        },
    }
}

/// Cells that run only the genotype's chosen operations.
#[derive(Clone, Copy)]
pub struct FixedBody<'a> {
    pub genotype: &'a Genotype,
}

impl CellBody for FixedBody<'_> {
    fn num_nodes(&self) -> usize {
        self.genotype.num_nodes()
    }

    fn param_specs(&self, cell_type: CellType, prefix: &str, channels: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (j, pair) in self.genotype.cell(cell_type).iter().enumerate() {
            for e in pair {
                let p = format!("{prefix}/{}", Edge::new(e.from, j + 2).name());
                specs.extend(op_param_specs(&p, e.op, channels));
            }
        }
        specs
    }

    fn forward(
        &self,
        tape: &mut Tape,
        theta: &ParamStore,
        cell_type: CellType,
        prefix: &str,
        in0: Var,
        in1: Var,
    ) -> Result<Var> {
        if tape.shape(in0) != tape.shape(in1) {
            return Err(Error::ShapeMismatch {
                op: "cell_forward",
                left: tape.shape(in0).to_vec(),
                right: tape.shape(in1).to_vec(),
            });
        }
        let channels = tape.shape(in0)[1];
        let mut states = vec![in0, in1];
        for (j, pair) in self.genotype.cell(cell_type).iter().enumerate() {
            let mut acc: Option<Var> = None;
            for e in pair {
                let p = format!("{prefix}/{}", Edge::new(e.from, j + 2).name());
                let params = OpParams::bind(tape, theta, &p, e.op, channels)?;
                let y = apply_op(tape, e.op, states[e.from], &params)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => tape.add(a, y)?,
                });
            }
            states.push(acc.expect("two edges per node"));
        }
        tape.concat_channels(&states[2..])
    }
}

/// A genotype instantiated on the supernet's wiring.
#[derive(Debug, Clone)]
pub struct DerivedNet {
    wiring: Wiring,
    genotype: Genotype,
}

impl DerivedNet {
    /// The network plus freshly initialised weights.
    pub fn build(genotype: &Genotype, config: &SupernetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        genotype.validate()?;
        if genotype.num_nodes() != config.num_nodes {
            return Err(Error::Genotype(format!(
                "genotype has {} nodes per cell, configuration has {}",
                genotype.num_nodes(),
                config.num_nodes
            )));
        }
        let net = Self {
            wiring: Wiring::new(config)?,
            genotype: genotype.clone(),
        };
        let theta = net.wiring.init_params(&net.body(), seed)?;
        Ok((net, theta))
    }

    fn body(&self) -> FixedBody<'_> {
        FixedBody {
            genotype: &self.genotype,
        }
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn forward(&self, tape: &mut Tape, theta: &ParamStore, pet: Var, ct: Var) -> Result<Var> {
        self.wiring.forward(tape, theta, &self.body(), pet, ct)
    }

    pub fn forward_traced(&self, tape: &mut Tape, theta: &ParamStore, pet: Var, ct: Var, trace: &mut Vec<TraceEntry>) -> Result<Var> {
        self.wiring.forward_traced(tape, theta, &self.body(), pet, ct, Some(trace))
    }

    pub fn count_parameters(&self) -> usize {
        self.wiring.count_parameters(&self.body()).expect("node count checked at build")
    }

    pub fn loss(&self, tape: &mut Tape, theta: &ParamStore, batch: &[&Sample]) -> Result<(Var, Var)> {
        let (pet, ct, labels) = stack_batch(batch)?;
        let (p, c) = (tape.constant(pet), tape.constant(ct));
        let logits = self.forward(tape, theta, p, c)?;
        Ok((tape.softmax_cross_entropy(logits, &labels)?, logits))
    }

    /// Probability of class 1 for each sample.
    pub fn predict(&self, theta: &ParamStore, samples: &[Sample]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                tape.freeze_store(theta);
                let (p, c) = (tape.constant(s.pet.clone()), tape.constant(s.ct.clone()));
                let logits = self.forward(&mut tape, theta, p, c)?;
                let probs = crate::autodiff::softmax(tape.value(logits).data());
                Ok(probs[1])
            })
            .collect()
    }
}

fn default_retrain_epochs() -> usize {
    200
}
fn default_retrain_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    #[serde(default = "default_retrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_retrain_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_retrain_epochs(),
            lr: default_retrain_lr(),
            batch_size: default_batch(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("retrain batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("retrain lr must be a positive number, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLog {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of samples classified correctly before their update.
    pub accuracy: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the end of the epoch with the lowest training loss (the
    /// initial weights when no epoch ran).
    pub params: ParamStore,
    pub best_epoch: usize,
    pub log: Vec<TrainLog>,
}

/// Adam on cross-entropy over shuffled batches, keeping the best epoch.
pub fn train_derived(net: &DerivedNet, theta: ParamStore, train: &[Sample], cfg: &RetrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !(train.iter().any(|s| s.label == 0) && train.iter().any(|s| s.label == 1)) {
        return Err(Error::Data("retraining data contains a single class".into()));
    }
    let mut theta = theta;
    let mut best = (f64::INFINITY, 0usize, theta.clone());
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let (loss, logits) = net.loss(&mut tape, &theta, &batch)?;
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            let z = tape.value(logits).data();
            let k = z.len() / batch.len();
            for (b, s) in batch.iter().enumerate() {
                let row = &z[b * k..(b + 1) * k];
                let pred = (0..k).max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i))).unwrap();
                correct += (pred == s.label) as usize;
            }
            tape.backward(loss)?;
            theta.accumulate_grads(&tape)?;
            opt.step(&mut theta)?;
        }
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("retraining loss"));
        }
        let improved = loss < best.0;
        if improved {
            best = (loss, epoch, theta.clone());
        }
        log.push(TrainLog {
            epoch,
            loss,
            accuracy: correct as f64 / train.len() as f64,
            best: improved,
        });
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        log,
    })
}

pub fn train_log_csv(log: &[TrainLog]) -> String {
    let mut s = String::from("epoch,train_loss,train_accuracy,best_flag\n");
    for r in log {
        writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.accuracy, r.best as u8).unwrap();
    }
    s
}

#[cfg(test)]
mod tests;
