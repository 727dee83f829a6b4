//! Alternating first-order updates on a scalar problem whose solution is
//! θ = α = 1: θ descends (θ - 1)², then α descends (θ - α)².

use mmnas::search::{search_step, BilevelModel, SearchState};
use mmnas::{ParamStore, Result, Tape, Tensor, Var};

struct Toy;

fn sq_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.sum(d2))
}

impl BilevelModel for Toy {
    type Sample = ();

    fn train_loss(&self, tape: &mut Tape, theta: &ParamStore, _: &ParamStore, _: &[&()]) -> Result<Var> {
        let t = tape.param(theta, "theta")?;
        let one = tape.constant(Tensor::scalar(1.0));
        sq_diff(tape, t, one)
    }

    fn val_loss(&self, tape: &mut Tape, theta: &ParamStore, alpha: &ParamStore, _: &[&()]) -> Result<Var> {
        let t = tape.param(theta, "theta")?;
        let a = tape.param(alpha, "alpha")?;
        sq_diff(tape, t, a)
    }
}

fn main() -> Result<()> {
    let mut theta = ParamStore::new(0);
    theta.insert("theta", Tensor::scalar(-2.0))?;
    let mut alpha = ParamStore::new(0);
    alpha.insert("alpha", Tensor::scalar(3.0))?;
    let mut state = SearchState::new(1e-2, 1e-2);

    for step in 1..=5000 {
        let l = search_step(&Toy, &mut theta, &mut alpha, &[&()], &[&()], &mut state)?;
        let (t, a) = (theta.get("theta").unwrap().item(), alpha.get("alpha").unwrap().item());
        if step % 100 == 0 {
            println!("step {step:4}: θ {t:.5} α {a:.5} L_train {:.2e} L_val {:.2e}", l.train, l.val);
        }
        if (t - 1.0).abs() < 1e-3 && (a - 1.0).abs() < 1e-3 {
            println!("converged after {step} steps");
            break;
        }
    }
    Ok(())
}
