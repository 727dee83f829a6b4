//! Writes a small synthetic PET/CT dataset and reports what was planted.
//!
//! `cargo run --example gen_data -- [out_dir]`

use mmnas::datasets::{synth_generate, write_dataset};

fn main() -> mmnas::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic".into());
    let set = synth_generate(40, [16, 16, 16], 0.1, 1)?;
    let manifest = write_dataset(&out, &set)?;

    let positives = set.truth.iter().filter(|t| t.label == 1).count();
    println!("{} studies, {positives} positive", set.studies.len());
    for (study, t) in set.studies.iter().zip(&set.truth).take(6) {
        println!("  {}: pet blob {:5} ct blob {:5} -> label {}", study.id, t.b_pet, t.b_ct, t.label);
    }
    println!("manifest: {}", manifest.display());
    Ok(())
}
