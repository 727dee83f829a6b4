//! Full cross-validation over the three modality modes on a small
//! synthetic set, through the same entry point as `mmnas cv`.

use mmnas::cli::{cmd_cv, cmd_gen_data, CvArgs, GenDataArgs};
use mmnas::supernet::ModalityMode;
use std::path::PathBuf;

fn main() -> mmnas::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cv_example".into()));
    let manifest = cmd_gen_data(&GenDataArgs {
        n: 60,
        dims: [16, 16, 16],
        noise: 0.1,
        seed: 1,
        out: Some(out.join("data")),
    })?;
    let summary = cmd_cv(&CvArgs {
        config: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/fusion_desk.json"),
        manifest: Some(manifest),
        k: Some(3),
        seed: Some(1),
        modes: ModalityMode::ALL.to_vec(),
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        shared_genotype: false,
        out: Some(out.join("cv")),
    })?;
    for m in &summary.modes {
        println!("{:8} pooled AUC {:.3} accuracy {:.3}", m.mode.name(), m.report.auc, m.report.metrics.acc);
    }
    println!("artifacts under {}", summary.out.display());
    Ok(())
}
