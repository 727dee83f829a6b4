//! Macro wiring of the PET/CT network.
//!
//! ```text
//! pet ─ stem/pet ─ pre0 ┐
//!                       ├ normal_0 ─ n ┬──────────── pre0 ┐
//! ct  ─ stem/ct  ─ pre1 ┘              │                  ├ reduce_1 ─ r1 ─ ... ─ reduce_R ─ head
//! pet + ct ─ stem/sum ─────────────────┼──────────── pre1 ┘
//!                                      └─ (pre1 of reduce_2)
//! ```
//!
//! Cell `reduce_k` reads the two previous cell outputs (the sum stem stands in
//! for the missing one at `k = 1`). Each cell input passes through a 1×1×1
//! conv and normalization down to the cell's node width; in reduction cells
//! that projection is strided to land on the cell's output resolution, so
//! every searched operation stays stride 1.
//!
//! The wiring is shared by the searchable supernet and by derived fixed
//! networks; the two differ only in their [`CellBody`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::nas_ops::NORM_EPS;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::search_space::{cell_forward, mixed_cell_param_specs, AlphaTable, CellSpec, CellType, MixedCellCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    PetCt,
    PetOnly,
    CtOnly,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::PetCt, ModalityMode::PetOnly, ModalityMode::CtOnly];

    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::PetCt => "pet_ct",
            ModalityMode::PetOnly => "pet_only",
            ModalityMode::CtOnly => "ct_only",
        }
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality mode `{s}` (expected pet_ct, pet_only or ct_only)")))
    }
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetConfig {
    pub input_dims: [usize; 3],
    pub stem_channels: usize,
    pub num_nodes: usize,
    pub num_reduction_cells: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub modality_mode: ModalityMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SupernetConfig {
    /// Full-scale input with 4-node cells and three reductions.
    fn default() -> Self {
        Self {
            input_dims: [112, 112, 144],
            stem_channels: 16,
            num_nodes: 4,
            num_reduction_cells: 3,
            num_classes: 2,
            modality_mode: ModalityMode::PetCt,
            seed: 0,
        }
    }
}

impl SupernetConfig {
    /// 16³ input, 8 stem channels, 4 nodes, 2 reductions.
    pub fn desk() -> Self {
        Self {
            input_dims: [16, 16, 16],
            stem_channels: 8,
            num_reduction_cells: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be at least 1".into()));
        }
        if c.num_reduction_cells == 0 {
            return Err(Error::Config("num_reduction_cells must be at least 1".into()));
        }
        if c.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if c.stem_channels == 0 || !c.stem_channels.is_multiple_of(c.num_nodes) {
            return Err(Error::Config(format!(
                "stem_channels ({}) must be a positive multiple of num_nodes ({}) so every cell splits its width evenly across nodes",
                c.stem_channels, c.num_nodes
            )));
        }
        let step = 1usize
            .checked_shl(c.num_reduction_cells as u32)
            .filter(|s| *s > 0 && c.num_reduction_cells < 32)
            .ok_or_else(|| Error::Config("too many reduction cells".into()))?;
        if let Some(d) = c.input_dims.iter().find(|&&d| d == 0 || d % step != 0) {
            return Err(Error::Config(format!(
                "input dimension {d} is not divisible by 2^{} = {step}; every reduction halves each axis",
                c.num_reduction_cells
            )));
        }
        Ok(())
    }

    /// Channel width after stage `k` (0 = normal cell).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.stem_channels << k
    }

    pub fn stage_dims(&self, k: usize) -> [usize; 3] {
        self.input_dims.map(|d| d >> k)
    }
}

/// Interior of a cell: the part that differs between the supernet and a
/// derived network.
pub trait CellBody {
    fn num_nodes(&self) -> usize;

    /// Learnable tensors of one cell whose nodes are `channels` wide.
    fn param_specs(&self, cell_type: CellType, prefix: &str, channels: usize) -> Vec<ParamSpec>;

    /// `[B, C, ...]` twice to `[B, M * C, ...]`.
    fn forward(&self, tape: &mut Tape, theta: &ParamStore, cell_type: CellType, prefix: &str, in0: Var, in1: Var)
        -> Result<Var>;
}

/// Every edge carries the full softmax(α) mixture.
#[derive(Clone, Copy)]
pub struct MixedBody<'a> {
    alpha: &'a ParamStore,
    num_nodes: usize,
}

impl<'a> MixedBody<'a> {
    pub fn new(alpha: &'a AlphaTable) -> Self {
        Self::from_store(alpha.store(), alpha.num_nodes())
    }

    /// Reads logits from a bare store laid out like [`AlphaTable::store`].
    pub fn from_store(alpha: &'a ParamStore, num_nodes: usize) -> Self {
        Self { alpha, num_nodes }
    }

    fn spec(&self, cell_type: CellType) -> CellSpec {
        CellSpec {
            cell_type,
            num_nodes: self.num_nodes,
        }
    }
}

impl CellBody for MixedBody<'_> {
    fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    fn param_specs(&self, cell_type: CellType, prefix: &str, channels: usize) -> Vec<ParamSpec> {
        mixed_cell_param_specs(&self.spec(cell_type), prefix, channels)
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
        let spec = self.spec(cell_type);
        let ctx = MixedCellCtx {
            spec: &spec,
            alpha: self.alpha,
            theta,
            prefix,
        };
        cell_forward(tape, &ctx, in0, in1)
    }
}

/// One recorded stage of a forward pass: its name, channels and spatial dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: String,
    pub channels: usize,
    pub dims: [usize; 3],
}

impl TraceEntry {
    fn of(stage: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            stage: stage.into(),
            channels: shape[1],
            dims: [shape[2], shape[3], shape[4]],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projection {
    in_channels: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct CellSite {
    cell_type: CellType,
    name: String,
    inputs: [Projection; 2],
    node_channels: usize,
}

/// The stem/cell/head skeleton for one configuration.
#[derive(Debug, Clone)]
pub struct Wiring {
    config: SupernetConfig,
    cells: Vec<CellSite>,
}

const STEM_KERNEL: usize = 3;
const HEAD_KERNEL: usize = 3;
const HEAD_BLOCKS: usize = 2;

fn conv_norm_specs(prefix: &str, weight: Vec<usize>) -> Vec<ParamSpec> {
    let c = weight[0];
    vec![
        ParamSpec::new(format!("{prefix}/weight"), weight, Init::FanInUniform),
        ParamSpec::new(format!("{prefix}/gamma"), vec![c], Init::Ones),
        ParamSpec::new(format!("{prefix}/beta"), vec![c], Init::Zeros),
    ]
}

/// conv (bias-free) followed by normalization, parameters under `prefix`.
fn conv_norm(tape: &mut Tape, theta: &ParamStore, prefix: &str, x: Var, geom: ConvGeom) -> Result<Var> {
    let w = tape.param(theta, &format!("{prefix}/weight"))?;
    let gamma = tape.param(theta, &format!("{prefix}/gamma"))?;
    let beta = tape.param(theta, &format!("{prefix}/beta"))?;
    let y = tape.conv3d(x, w, geom)?;
    tape.normalize3d(y, gamma, beta, NORM_EPS)
}

impl Wiring {
    pub fn new(config: &SupernetConfig) -> Result<Self> {
        config.validate()?;
        let m = config.num_nodes;
        let c0 = config.stem_channels;
        let mut cells = vec![CellSite {
            cell_type: CellType::Normal,
            name: "normal_0".into(),
            inputs: [Projection { in_channels: c0, stride: 1 }; 2],
            node_channels: c0 / m,
        }];
        for k in 1..=config.num_reduction_cells {
            // in1 is the sum stem for k = 1, else the output of stage k - 2.
            let (in1_channels, in1_stride) = if k == 1 { (c0, 2) } else { (config.stage_channels(k - 2), 4) };
            cells.push(CellSite {
                cell_type: CellType::Reduce,
                name: format!("reduce_{k}"),
                inputs: [
                    Projection {
                        in_channels: config.stage_channels(k - 1),
                        stride: 2,
                    },
                    Projection {
                        in_channels: in1_channels,
                        stride: in1_stride,
                    },
                ],
                node_channels: config.stage_channels(k) / m,
            });
        }
        Ok(Self {
            config: config.clone(),
            cells,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    /// Names of all cells in forward order.
    pub fn cell_names(&self) -> impl Iterator<Item = &str> {
        self.cells.iter().map(|c| c.name.as_str())
    }

    pub fn param_specs(&self, body: &dyn CellBody) -> Result<Vec<ParamSpec>> {
        if body.num_nodes() != self.config.num_nodes {
            return Err(Error::Config(format!(
                "cells have {} nodes but the configuration asks for {}",
                body.num_nodes(),
                self.config.num_nodes
            )));
        }
        let c0 = self.config.stem_channels;
        let mut specs = Vec::new();
        for stem in ["pet", "ct", "sum"] {
            let k = STEM_KERNEL;
            specs.extend(conv_norm_specs(&format!("stem/{stem}"), vec![c0, 1, k, k, k]));
        }
        for cell in &self.cells {
            let prefix = format!("cell/{}", cell.name);
            for (i, p) in cell.inputs.iter().enumerate() {
                specs.extend(conv_norm_specs(
                    &format!("{prefix}/pre{i}"),
                    vec![cell.node_channels, p.in_channels, 1, 1, 1],
                ));
            }
            specs.extend(body.param_specs(cell.cell_type, &prefix, cell.node_channels));
        }
        let cr = self.config.stage_channels(self.config.num_reduction_cells);
        for b in 0..HEAD_BLOCKS {
            let k = HEAD_KERNEL;
            specs.extend(conv_norm_specs(&format!("head/conv{b}"), vec![cr, cr, k, k, k]));
        }
        specs.push(ParamSpec::new("head/fc/weight", vec![self.config.num_classes, cr], Init::FanInUniform));
        specs.push(ParamSpec::new("head/fc/bias", vec![self.config.num_classes], Init::Zeros));
        Ok(specs)
    }

    /// Exact learnable scalar count, computed from declarations alone.
    pub fn count_parameters(&self, body: &dyn CellBody) -> Result<usize> {
        Ok(self.param_specs(body)?.iter().map(ParamSpec::numel).sum())
    }

    pub fn init_params(&self, body: &dyn CellBody, seed: u64) -> Result<ParamStore> {
        ParamStore::from_specs(&self.param_specs(body)?, seed)
    }

    /// Stage shapes derived from the configuration alone, in forward order.
    pub fn shape_trace(&self) -> Vec<TraceEntry> {
        let cfg = &self.config;
        let c0 = cfg.stem_channels;
        let mut t = Vec::new();
        for stem in ["stem/pet", "stem/ct", "stem/sum"] {
            t.push(TraceEntry {
                stage: stem.into(),
                channels: c0,
                dims: cfg.input_dims,
            });
        }
        for (k, cell) in self.cells.iter().enumerate() {
            t.push(TraceEntry {
                stage: format!("cell/{}", cell.name),
                channels: cell.node_channels * cfg.num_nodes,
                dims: cfg.stage_dims(k),
            });
        }
        let r = cfg.num_reduction_cells;
        for b in 0..HEAD_BLOCKS {
            t.push(TraceEntry {
                stage: format!("head/conv{b}"),
                channels: cfg.stage_channels(r),
                dims: cfg.stage_dims(r),
            });
        }
        t
    }

    fn check_input(&self, tape: &Tape, v: Var, what: &'static str) -> Result<()> {
        let s = tape.shape(v);
        let d = self.config.input_dims;
        if s.len() != 5 || s[1] != 1 || s[2..] != d {
            return Err(Error::ShapeMismatch {
                op: what,
                left: vec![0, 1, d[0], d[1], d[2]],
                right: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `[B, classes]` for a batch of paired volumes `[B, 1, D, H, W]`.
    pub fn forward(&self, tape: &mut Tape, theta: &ParamStore, body: &dyn CellBody, pet: Var, ct: Var) -> Result<Var> {
        self.forward_traced(tape, theta, body, pet, ct, None)
    }

    /// [`Self::forward`], recording the shape of every stage it passes.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        theta: &ParamStore,
        body: &dyn CellBody,
        pet: Var,
        ct: Var,
        mut trace: Option<&mut Vec<TraceEntry>>,
    ) -> Result<Var> {
        self.check_input(tape, pet, "pet input")?;
        self.check_input(tape, ct, "ct input")?;
        if tape.shape(pet) != tape.shape(ct) {
            return Err(Error::ShapeMismatch {
                op: "paired input",
                left: tape.shape(pet).to_vec(),
                right: tape.shape(ct).to_vec(),
            });
        }
        let (pet, ct) = match self.config.modality_mode {
            ModalityMode::PetCt => (pet, ct),
            ModalityMode::PetOnly => (pet, pet),
            ModalityMode::CtOnly => (ct, ct),
        };
        let mut record = |tape: &Tape, stage: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceEntry::of(stage, tape.shape(v)));
            }
        };

        let stem_geom = ConvGeom::same(STEM_KERNEL, 1);
        let s_pet = conv_norm(tape, theta, "stem/pet", pet, stem_geom)?;
        record(tape, "stem/pet", s_pet);
        let s_ct = conv_norm(tape, theta, "stem/ct", ct, stem_geom)?;
        record(tape, "stem/ct", s_ct);
        let sum = tape.add(pet, ct)?;
        let s_sum = conv_norm(tape, theta, "stem/sum", sum, stem_geom)?;
        record(tape, "stem/sum", s_sum);

        // (prev, prev_prev) feeding the next cell.
        let mut inputs = [s_pet, s_ct];
        let mut prev_prev = s_sum;
        for cell in &self.cells {
            let prefix = format!("cell/{}", cell.name);
            let mut pre = [inputs[0]; 2];
            for (i, (p, x)) in cell.inputs.iter().zip(inputs).enumerate() {
                pre[i] = conv_norm(tape, theta, &format!("{prefix}/pre{i}"), x, ConvGeom::strided(p.stride))?;
            }
            let out = body.forward(tape, theta, cell.cell_type, &prefix, pre[0], pre[1])?;
            record(tape, &prefix, out);
            inputs = [out, prev_prev];
            prev_prev = out;
        }

        let mut x = inputs[0];
        for b in 0..HEAD_BLOCKS {
            let name = format!("head/conv{b}");
            let y = conv_norm(tape, theta, &name, x, ConvGeom::same(HEAD_KERNEL, 1))?;
            x = tape.relu(y);
            record(tape, &name, x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(theta, "head/fc/weight")?;
        let bias = tape.param(theta, "head/fc/bias")?;
        tape.linear(pooled, w, bias)
    }
}

/// The searchable network: [`Wiring`] with mixed cells.
#[derive(Debug, Clone)]
pub struct Supernet {
    wiring: Wiring,
}

impl Supernet {
    /// Wiring plus freshly initialised weights θ and uniform logits α.
    pub fn build(config: &SupernetConfig, seed: u64) -> Result<(Self, ParamStore, AlphaTable)> {
        let wiring = Wiring::new(config)?;
        let alpha = AlphaTable::zeros(config.num_nodes)?;
        let theta = wiring.init_params(&MixedBody::new(&alpha), seed)?;
        Ok((Self { wiring }, theta, alpha))
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn config(&self) -> &SupernetConfig {
        self.wiring.config()
    }

    pub fn forward(&self, tape: &mut Tape, theta: &ParamStore, alpha: &AlphaTable, pet: Var, ct: Var) -> Result<Var> {
        self.wiring.forward(tape, theta, &MixedBody::new(alpha), pet, ct)
    }

    pub fn count_parameters(&self, alpha: &AlphaTable) -> Result<usize> {
        self.wiring.count_parameters(&MixedBody::new(alpha))
    }
}
