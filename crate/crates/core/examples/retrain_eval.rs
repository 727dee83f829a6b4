//! Retrains a fixed genotype from scratch and scores a held-out split.

use mmnas::datasets::{synth_generate, Sample};
use mmnas::genotype::{train_derived, ChosenEdge, DerivedNet, Genotype, GenotypeMeta, RetrainConfig};
use mmnas::metrics::{evaluate, ScoredCase, DEFAULT_THRESHOLD};
use mmnas::nas_ops::OpKind;
use mmnas::supernet::SupernetConfig;

fn main() -> mmnas::Result<()> {
    let node = |a: OpKind, b: OpKind| [ChosenEdge { from: 0, op: a }, ChosenEdge { from: 1, op: b }];
    let genotype = Genotype {
        normal: vec![node(OpKind::Conv3, OpKind::Conv3), node(OpKind::SepConv3, OpKind::Skip)],
        reduce: vec![node(OpKind::MaxPool3, OpKind::Conv3), node(OpKind::AvgPool3, OpKind::DilConv3)],
        meta: GenotypeMeta {
            nodes: 2,
            alpha_hash: String::new(),
            seed: 0,
        },
    };
    genotype.validate()?;

    let set = synth_generate(60, [8, 8, 8], 0.1, 5)?;
    let data: Vec<Sample> = set.studies.iter().map(Sample::from_study).collect();
    let (train, test) = data.split_at(40);
    let cfg = SupernetConfig {
        input_dims: [8, 8, 8],
        stem_channels: 4,
        num_nodes: 2,
        num_reduction_cells: 2,
        ..SupernetConfig::default()
    };
    let (net, theta) = DerivedNet::build(&genotype, &cfg, 1)?;
    let retrain = RetrainConfig {
        epochs: 10,
        lr: 1e-2,
        batch_size: 1,
    };
    let outcome = train_derived(&net, theta, train, &retrain, 2)?;
    for row in &outcome.log {
        println!("epoch {:2}: loss {:.4} accuracy {:.3}", row.epoch, row.loss, row.accuracy);
    }

    let probs = net.predict(&outcome.params, test)?;
    let cases = test
        .iter()
        .zip(probs)
        .map(|(s, p)| ScoredCase::new(s.id.clone(), s.label, p))
        .collect::<mmnas::Result<Vec<_>>>()?;
    let report = evaluate(&cases, DEFAULT_THRESHOLD)?;
    println!("held out: acc {:.3} auc {:.3}", report.metrics.acc, report.auc);
    Ok(())
}
