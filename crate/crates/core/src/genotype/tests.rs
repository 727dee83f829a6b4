use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::datasets::synth_generate;
use crate::supernet::{ModalityMode, Supernet};
use crate::tensor::Tensor;
use crate::testutil::rng;

fn random_alpha(m: usize, seed: u64) -> AlphaTable {
    let mut a = AlphaTable::zeros(m).unwrap();
    let mut r = rng(seed);
    for ct in CellType::ALL {
        for e in a.spec(ct).edges() {
            let l: Vec<f64> = (0..OpKind::COUNT).map(|_| r.random_range(-3.0..3.0)).collect();
            a.set_logits(ct, e, &l).unwrap();
        }
    }
    a
}

/// Picks the pair of sources and non-zero ops retaining the most softmax
/// mass, by exhaustive enumeration.
fn brute_force(alpha: &AlphaTable, ct: CellType, node: usize) -> [ChosenEdge; 2] {
    let w = |from: usize| alpha_softmax(alpha, ct, Edge::new(from, node + 2));
    let ops: Vec<OpKind> = OpKind::ALL.into_iter().filter(|&o| o != OpKind::Zero).collect();
    let mut best = (f64::NEG_INFINITY, None);
    for i in 0..node + 2 {
        for k in i + 1..node + 2 {
            let (wi, wk) = (w(i), w(k));
            for &oi in &ops {
                for &ok in &ops {
                    let mass = wi.weight(oi) + wk.weight(ok);
                    if mass > best.0 {
                        best = (mass, Some([ChosenEdge { from: i, op: oi }, ChosenEdge { from: k, op: ok }]));
                    }
                }
            }
        }
    }
    best.1.unwrap()
}

#[test]
fn matches_brute_force() {
    for seed in 0..200 {
        let m = 1 + (seed as usize % 4);
        let a = random_alpha(m, seed);
        let g = derive_genotype(&a, seed);
        for ct in CellType::ALL {
            for j in 0..m {
                assert_eq!(g.cell(ct)[j], brute_force(&a, ct, j), "seed {seed} {ct} node {j}");
            }
        }
    }
}

#[test]
fn dominant_logits_are_selected() {
    let mut a = AlphaTable::zeros(3).unwrap();
    for ct in CellType::ALL {
        for j in 0..3 {
            // sources 0 and j+1 carry a strong preference, zero dominates elsewhere
            for from in 0..j + 2 {
                let mut l = vec![0.0; OpKind::COUNT];
                if from == 0 {
                    l[OpKind::SepConv3.index()] = 4.0;
                } else if from == j + 1 {
                    l[OpKind::MaxPool3.index()] = 5.0;
                } else {
                    l[OpKind::Zero.index()] = 9.0;
                }
                a.set_logits(ct, Edge::new(from, j + 2), &l).unwrap();
            }
        }
    }
    let g = derive_genotype(&a, 0);
    for j in 0..3 {
        let want = [
            ChosenEdge { from: 0, op: OpKind::SepConv3 },
            ChosenEdge { from: j + 1, op: OpKind::MaxPool3 },
        ];
        assert_eq!(g.normal[j], want);
        assert_eq!(g.reduce[j], want);
    }
}

#[test]
fn ties_prefer_lower_source_and_op() {
    let g = derive_genotype(&AlphaTable::zeros(2).unwrap(), 0);
    for ct in CellType::ALL {
        for pair in g.cell(ct) {
            assert_eq!(pair.map(|e| (e.from, e.op)), [(0, OpKind::Conv3), (1, OpKind::Conv3)]);
        }
    }
}

proptest! {
    #[test]
    fn invariant_under_per_edge_shift(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let a = random_alpha(3, seed);
        let mut b = a.clone();
        for ct in CellType::ALL {
            for e in a.spec(ct).edges() {
                let l: Vec<f64> = a.logits(ct, e).iter().map(|x| x + shift * (e.from as f64 + 1.0)).collect();
                b.set_logits(ct, e, &l).unwrap();
            }
        }
        let (ga, gb) = (derive_genotype(&a, 0), derive_genotype(&b, 0));
        prop_assert_eq!(ga.normal, gb.normal);
        prop_assert_eq!(ga.reduce, gb.reduce);
    }

    #[test]
    fn structural_invariants(seed in 0u64..1000, m in 1usize..6) {
        let g = derive_genotype(&random_alpha(m, seed), seed);
        prop_assert!(g.validate().is_ok());
        for ct in CellType::ALL {
            for (j, pair) in g.cell(ct).iter().enumerate() {
                prop_assert!(pair[0].from < pair[1].from && pair[1].from < j + 2);
                prop_assert!(pair.iter().all(|e| e.op != OpKind::Zero));
            }
        }
        prop_assert_eq!(Genotype::from_json(&g.to_json()).unwrap(), g);
    }
}

#[test]
fn json_layout() {
    let g = derive_genotype(&random_alpha(2, 7), 42);
    let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
    assert_eq!(v["meta"]["nodes"], 2);
    assert_eq!(v["meta"]["seed"], 42);
    assert_eq!(v["meta"]["alpha_hash"], random_alpha(2, 7).content_hash());
    assert_eq!(v["normal"].as_array().unwrap().len(), 2);
    assert!(v["reduce"][1][0]["op"].is_string());
}

#[test]
fn malformed_json_names_the_node() {
    let g = derive_genotype(&random_alpha(2, 3), 0);
    let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
    v["reduce"][1].as_array_mut().unwrap().push(serde_json::json!({"from": 0, "op": "skip"}));
    let err = Genotype::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("reduce cell, node 1") && err.contains("found 3"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
    v["normal"][0][1]["from"] = 2.into();
    let err = Genotype::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("normal cell, node 0") && err.contains("source 2"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
    v["normal"][1][0]["op"] = "zero".into();
    let err = Genotype::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("normal cell, node 1") && err.contains("zero"), "{err}");

    assert!(Genotype::from_json(r#"{"normal":[],"reduce":[]}"#).is_err());
}

#[test]
fn dot_edge_counts() {
    let m = 4;
    let dot = derive_genotype(&random_alpha(m, 11), 0).to_dot();
    let graphs: Vec<&str> = dot.split("digraph ").filter(|s| !s.is_empty()).collect();
    assert_eq!(graphs.len(), 2);
    for body in graphs {
        assert_eq!(body.matches("[label=").count(), 2 * m);
        assert_eq!(body.matches("-> out;").count(), m);
    }
    assert!(dot.contains("input0 ->") || dot.contains("input1 ->"));
}

fn uniform_genotype(m: usize, op: OpKind) -> Genotype {
    let pair = |j: usize| [ChosenEdge { from: 0, op }, ChosenEdge { from: j + 1, op }];
    Genotype {
        normal: (0..m).map(pair).collect(),
        reduce: (0..m).map(pair).collect(),
        meta: GenotypeMeta {
            nodes: m,
            alpha_hash: String::new(),
            seed: 0,
        },
    }
}

fn tiny() -> SupernetConfig {
    SupernetConfig {
        input_dims: [8, 8, 8],
        stem_channels: 4,
        num_nodes: 2,
        num_reduction_cells: 2,
        num_classes: 2,
        modality_mode: ModalityMode::PetCt,
        seed: 0,
    }
}

#[test]
fn derived_net_is_smaller_and_shaped_like_the_supernet() {
    let cfg = SupernetConfig::desk();
    let (sn, _, alpha) = Supernet::build(&cfg, 0).unwrap();
    let full = sn.count_parameters(&alpha).unwrap();
    let g = derive_genotype(&random_alpha(cfg.num_nodes, 5), 0);
    let (net, theta) = DerivedNet::build(&g, &cfg, 0).unwrap();
    assert!(net.count_parameters() < full);
    assert_eq!(theta.num_scalars(), net.count_parameters());

    let [x, y, z] = cfg.input_dims;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(vec![1, 1, x, y, z]).unwrap());
    let c = tape.constant(Tensor::zeros(vec![1, 1, x, y, z]).unwrap());
    let mut trace = Vec::new();
    let out = net.forward_traced(&mut tape, &theta, p, c, &mut trace).unwrap();
    assert_eq!(tape.shape(out), [1, 2]);
    assert_eq!(trace, sn.wiring().shape_trace());
}

#[test]
fn parameter_count_follows_op_choice() {
    let cfg = tiny();
    let count = |op| DerivedNet::build(&uniform_genotype(2, op), &cfg, 0).unwrap().0.count_parameters();
    let skip = count(OpKind::Skip);
    assert_eq!(skip, count(OpKind::MaxPool3));
    assert!(skip < count(OpKind::SepConv3));
    assert!(count(OpKind::SepConv3) < count(OpKind::Conv3));
    assert!(count(OpKind::Conv3) < count(OpKind::Conv5));
}

#[test]
fn build_rejects_node_mismatch() {
    let err = DerivedNet::build(&uniform_genotype(3, OpKind::Skip), &tiny(), 0).unwrap_err();
    assert!(err.to_string().contains("3 nodes"));
}

fn separable_samples(n: usize, seed: u64) -> Vec<Sample> {
    // the label is the PET blob indicator alone
    let set = synth_generate(n, [8, 8, 8], 0.05, seed).unwrap();
    set.studies
        .iter()
        .zip(&set.truth)
        .map(|(s, t)| {
            let mut s = Sample::from_study(s);
            s.label = t.b_pet as usize;
            s
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let (net, theta) = DerivedNet::build(&uniform_genotype(2, OpKind::Conv3), &tiny(), 1).unwrap();
    let data = separable_samples(4, 0);
    let cfg = RetrainConfig { epochs: 0, ..Default::default() };
    let out = train_derived(&net, theta.clone(), &data, &cfg, 0).unwrap();
    assert_eq!(out.params, theta);
    assert_eq!(out.best_epoch, 0);
    assert!(out.log.is_empty());
}

#[test]
fn fits_a_separable_set() {
    let (net, theta) = DerivedNet::build(&uniform_genotype(2, OpKind::Conv3), &tiny(), 1).unwrap();
    let data = separable_samples(8, 2);
    let cfg = RetrainConfig { epochs: 30, lr: 1e-2, batch_size: 1 };
    let out = train_derived(&net, theta, &data, &cfg, 0).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.loss < out.log[0].loss);
    let probs = net.predict(&out.params, &data).unwrap();
    let acc = probs.iter().zip(&data).filter(|(p, s)| (**p > 0.5) == (s.label == 1)).count();
    assert_eq!(acc, data.len(), "probs {probs:?}");
    let best = out.log.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).unwrap();
    assert_eq!(best.epoch, out.best_epoch);
    assert_eq!(out.log.iter().rfind(|r| r.best).unwrap().epoch, out.best_epoch);
}

#[test]
fn training_is_deterministic() {
    let (net, theta) = DerivedNet::build(&uniform_genotype(2, OpKind::AvgPool3), &tiny(), 3).unwrap();
    let data = separable_samples(4, 4);
    let cfg = RetrainConfig { epochs: 2, ..Default::default() };
    let a = train_derived(&net, theta.clone(), &data, &cfg, 9).unwrap();
    let b = train_derived(&net, theta, &data, &cfg, 9).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert!(train_log_csv(&a.log).starts_with("epoch,train_loss,train_accuracy,best_flag\n1,"));
}

#[test]
fn single_class_rejected() {
    let (net, theta) = DerivedNet::build(&uniform_genotype(2, OpKind::Skip), &tiny(), 0).unwrap();
    let data: Vec<Sample> = separable_samples(4, 0).into_iter().filter(|s| s.label == 1).collect();
    assert!(train_derived(&net, theta, &data, &RetrainConfig::default(), 0).is_err());
}
