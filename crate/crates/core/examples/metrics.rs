use mmnas::metrics::{binary_metrics, evaluate, roc_csv, ConfusionCounts, ScoredCase};

fn main() -> mmnas::Result<()> {
    let m = binary_metrics(ConfusionCounts::new(22, 2, 21, 3))?;
    println!("acc {:.3} sen {:.3} spe {:.3} pre {:.3} f1 {:.3}", m.acc, m.sen, m.spe, m.pre, m.f1);

    let scored = [(1, 0.9), (1, 0.7), (0, 0.7), (1, 0.4), (0, 0.3), (0, 0.1)];
    let cases = scored
        .iter()
        .enumerate()
        .map(|(i, &(label, score))| ScoredCase::new(format!("case{i}"), label, score))
        .collect::<mmnas::Result<Vec<_>>>()?;
    let report = evaluate(&cases, 0.5)?;
    println!("AUC {:.4} (the tie at 0.7 counts half)", report.auc);
    print!("{}", roc_csv(&report.roc));
    Ok(())
}
