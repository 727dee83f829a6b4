//! Compares reverse-mode gradients with central differences for every
//! candidate operation of a cell edge.

use mmnas::gradcheck;
use mmnas::nas_ops::{apply_op, op_param_specs, OpKind, OpParams};
use mmnas::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> mmnas::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let channels = 2;
    let shape = [1, channels, 6, 6, 6];
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let probe = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let coords: Vec<(usize, usize)> = (0..8).map(|_| (0, rng.random_range(0..n))).collect();

    for kind in OpKind::ALL {
        let store = ParamStore::from_specs(&op_param_specs("edge", kind, channels), 1)?;
        let report = gradcheck::check(std::slice::from_ref(&x), Some(&coords), 1e-5, |tape, v| {
            let p = OpParams::bind(tape, &store, "edge", kind, channels)?;
            let y = apply_op(tape, kind, v[0], &p)?;
            let r = tape.constant(probe.clone());
            let m = tape.mul(y, r)?;
            Ok(tape.sum(m))
        })?;
        println!("{:10} max relative error {:.2e}", kind.to_string(), report.max_rel_err());
    }
    Ok(())
}
