//! Continuous cell representation.
//!
//! A cell is a DAG with two inputs and `M` ordered intermediate nodes.
//! Vertices are numbered globally: `0` and `1` are the inputs, node `j` is
//! vertex `j + 2`. Every earlier vertex feeds every node through a mixed
//! edge whose output is the softmax(α)-weighted sum of all candidate
//! operations; a node is the sum of its incoming edges, and the cell output
//! concatenates all `M` nodes along the channel axis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::nas_ops::{apply_op, op_param_specs, OpKind, OpParams};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const ALL: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CellType::Normal),
            "reduce" => Ok(CellType::Reduce),
            _ => Err(Error::Config(format!("unknown cell type `{s}`"))),
        }
    }
}

/// Directed edge between two cell vertices (`to` is always a node vertex).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl Edge {
    pub fn new(from: usize, to: usize) -> Self {
        debug_assert!(from < to && to >= 2);
        Self { from, to }
    }

    /// Index of the target node among the intermediate nodes.
    pub fn node(self) -> usize {
        self.to - 2
    }

    pub fn name(self) -> String {
        format!("edge_{}_{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub cell_type: CellType,
    pub num_nodes: usize,
}

impl CellSpec {
    pub fn new(cell_type: CellType, num_nodes: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Config("a cell needs at least one intermediate node".into()));
        }
        Ok(Self { cell_type, num_nodes })
    }

    /// Incoming edges of node `j`, by source vertex.
    pub fn incoming(&self, node: usize) -> impl Iterator<Item = Edge> {
        (0..node + 2).map(move |from| Edge::new(from, node + 2))
    }

    /// All edges, grouped by target node.
    pub fn edges(&self) -> Vec<Edge> {
        (0..self.num_nodes).flat_map(|j| self.incoming(j)).collect()
    }

    pub fn num_edges(&self) -> usize {
        self.num_nodes * (self.num_nodes + 3) / 2
    }
}

/// Softmax of one edge's logits: the mixing weight of every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedWeights(pub Vec<f64>);

impl MixedWeights {
    pub fn weight(&self, op: OpKind) -> f64 {
        self.0[op.index()]
    }
}

/// Architecture logits, one vector over [`OpKind::ALL`] per edge per cell
/// type. All cells of a type share their table.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaTable {
    num_nodes: usize,
    store: ParamStore,
}

impl AlphaTable {
    /// Uniform mixture: every logit zero.
    pub fn zeros(num_nodes: usize) -> Result<Self> {
        let mut store = ParamStore::new(0);
        for cell_type in CellType::ALL {
            for edge in CellSpec::new(cell_type, num_nodes)?.edges() {
                store.insert(&Self::param_name(cell_type, edge), Tensor::zeros(vec![OpKind::COUNT])?)?;
            }
        }
        Ok(Self { num_nodes, store })
    }

    /// Wraps a loaded store after checking it holds exactly the expected
    /// entries.
    pub fn from_store(store: ParamStore, num_nodes: usize) -> Result<Self> {
        let want = Self::zeros(num_nodes)?;
        let names_match = want.store.names().eq(store.names());
        let shapes_ok = store.iter().all(|(_, t)| t.shape() == [OpKind::COUNT] && t.all_finite());
        if !names_match || !shapes_ok {
            return Err(Error::Config(format!(
                "architecture snapshot does not describe {num_nodes}-node cells"
            )));
        }
        Ok(Self { num_nodes, store })
    }

    pub fn param_name(cell_type: CellType, edge: Edge) -> String {
        format!("alpha/{cell_type}/{}", edge.name())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn spec(&self, cell_type: CellType) -> CellSpec {
        CellSpec {
            cell_type,
            num_nodes: self.num_nodes,
        }
    }

    pub fn logits(&self, cell_type: CellType, edge: Edge) -> &[f64] {
        self.store
            .get(&Self::param_name(cell_type, edge))
            .expect("edge belongs to this table")
            .data()
    }

    pub fn set_logits(&mut self, cell_type: CellType, edge: Edge, logits: &[f64]) -> Result<()> {
        let name = Self::param_name(cell_type, edge);
        let t = self.store.get_mut(&name).ok_or(Error::UnknownParameter(name))?;
        if logits.len() != OpKind::COUNT {
            return Err(Error::ShapeMismatch {
                op: "set_logits",
                left: vec![OpKind::COUNT],
                right: vec![logits.len()],
            });
        }
        t.data_mut().copy_from_slice(logits);
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(path: impl AsRef<Path>, num_nodes: usize) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?, num_nodes)
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }
}

pub fn alpha_softmax(alpha: &AlphaTable, cell_type: CellType, edge: Edge) -> MixedWeights {
    MixedWeights(autodiff::softmax(alpha.logits(cell_type, edge)))
}

/// `sum_k weights[k] * op_k(x)` over the candidate list `ops`. `weights` is
/// a tape vector aligned with `ops`. The zero candidate contributes nothing
/// and is not evaluated.
pub fn mixed_op_forward(tape: &mut Tape, x: Var, weights: Var, ops: &[OpKind], params: &[OpParams]) -> Result<Var> {
    if tape.shape(weights) != [ops.len()] || params.len() != ops.len() {
        return Err(Error::ShapeMismatch {
            op: "mixed_op_forward",
            left: vec![ops.len()],
            right: tape.shape(weights).to_vec(),
        });
    }
    let mut terms = Vec::with_capacity(ops.len());
    for (k, (&op, p)) in ops.iter().zip(params).enumerate() {
        if op != OpKind::Zero {
            terms.push((k, apply_op(tape, op, x, p)?));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::zeros(tape.shape(x).to_vec())?));
    }
    tape.weighted_sum(weights, &terms)
}

/// Parameter declarations of every candidate on every edge of a mixed cell,
/// under `<prefix>/edge_<i>_<j>/<op>/...`.
pub fn mixed_cell_param_specs(spec: &CellSpec, prefix: &str, channels: usize) -> Vec<ParamSpec> {
    spec.edges()
        .into_iter()
        .flat_map(|edge| {
            let p = format!("{prefix}/{}", edge.name());
            OpKind::ALL.into_iter().flat_map(move |op| op_param_specs(&p, op, channels))
        })
        .collect()
}

/// Everything a mixed cell reads: its wiring, the shared logits, and the
/// store and prefix holding this cell's operation weights.
#[derive(Clone, Copy)]
pub struct MixedCellCtx<'a> {
    pub spec: &'a CellSpec,
    /// Architecture logits, as held by [`AlphaTable::store`].
    pub alpha: &'a ParamStore,
    pub theta: &'a ParamStore,
    pub prefix: &'a str,
}

impl MixedCellCtx<'_> {
    fn edge_forward(&self, tape: &mut Tape, edge: Edge, x: Var) -> Result<Var> {
        let logits = tape.param(self.alpha, &AlphaTable::param_name(self.spec.cell_type, edge))?;
        let weights = tape.softmax(logits);
        let channels = tape.shape(x)[1];
        let prefix = format!("{}/{}", self.prefix, edge.name());
        let params = OpKind::ALL
            .iter()
            .map(|&op| OpParams::bind(tape, self.theta, &prefix, op, channels))
            .collect::<Result<Vec<_>>>()?;
        mixed_op_forward(tape, x, weights, &OpKind::ALL, &params)
    }
}

/// Node `j` as the sum of mixed edges from every earlier vertex.
/// `preds[i]` is the output of vertex `i`.
pub fn node_forward(tape: &mut Tape, ctx: &MixedCellCtx<'_>, node: usize, preds: &[Var]) -> Result<Var> {
    if preds.len() < node + 2 {
        return Err(Error::Config(format!(
            "node {node} needs {} predecessors, {} computed",
            node + 2,
            preds.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for edge in ctx.spec.incoming(node) {
        let y = ctx.edge_forward(tape, edge, preds[edge.from])?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("every node has at least two incoming edges"))
}

/// Runs all nodes and concatenates them: `[B, C, ...] -> [B, M * C, ...]`.
pub fn cell_forward(tape: &mut Tape, ctx: &MixedCellCtx<'_>, in0: Var, in1: Var) -> Result<Var> {
    if tape.shape(in0) != tape.shape(in1) {
        return Err(Error::ShapeMismatch {
            op: "cell_forward",
            left: tape.shape(in0).to_vec(),
            right: tape.shape(in1).to_vec(),
        });
    }
    let mut states = vec![in0, in1];
    for node in 0..ctx.spec.num_nodes {
        let n = node_forward(tape, ctx, node, &states)?;
        states.push(n);
    }
    tape.concat_channels(&states[2..])
}
