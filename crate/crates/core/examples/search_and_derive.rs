//! Searches a small supernet on synthetic studies and prints the derived
//! genotype as JSON and Graphviz.

use mmnas::cli::{search_and_derive, StageSeeds};
use mmnas::datasets::{synth_generate, Sample};
use mmnas::search::SearchConfig;
use mmnas::supernet::SupernetConfig;

fn main() -> mmnas::Result<()> {
    let set = synth_generate(24, [8, 8, 8], 0.1, 3)?;
    let data: Vec<Sample> = set.studies.iter().map(Sample::from_study).collect();
    let net_cfg = SupernetConfig {
        input_dims: [8, 8, 8],
        stem_channels: 4,
        num_nodes: 2,
        num_reduction_cells: 2,
        ..SupernetConfig::default()
    };
    let search = SearchConfig {
        epochs: 3,
        ..SearchConfig::default()
    };

    let r = search_and_derive(&net_cfg, &search, &data, StageSeeds::new(3, 0), |log, _| {
        println!("epoch {}: train {:.4} val {:.4}{}", log.epoch, log.train_loss, log.val_loss, if log.best { " *" } else { "" });
        Ok(())
    })?;
    println!("best α from epoch {}", r.outcome.best.epoch);
    println!("{}", r.genotype.to_json());
    println!("{}", r.genotype.to_dot());
    Ok(())
}
