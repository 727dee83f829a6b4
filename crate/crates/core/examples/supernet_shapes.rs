//! Prints the stage shapes and parameter counts of the supernet and of a
//! network derived from it, for the desk and full-size configurations.

use mmnas::genotype::{derive_genotype, DerivedNet};
use mmnas::supernet::{Supernet, SupernetConfig};

fn main() -> mmnas::Result<()> {
    for (name, cfg) in [("desk", SupernetConfig::desk()), ("full", SupernetConfig::default())] {
        let (net, _, alpha) = Supernet::build(&cfg, 0)?;
        println!("{name}: input {:?}, {} stem channels, {} nodes", cfg.input_dims, cfg.stem_channels, cfg.num_nodes);
        for t in net.wiring().shape_trace() {
            println!("  {:24} {:4} x {:?}", t.stage, t.channels, t.dims);
        }
        let (derived, _) = DerivedNet::build(&derive_genotype(&alpha, 0), &cfg, 0)?;
        println!(
            "  parameters: supernet {}, derived {}",
            net.count_parameters(&alpha)?,
            derived.count_parameters()
        );
    }
    Ok(())
}
