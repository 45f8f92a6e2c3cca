//! `exp(−ξ|x − y|^p)` is positive definite for p ≤ 2 and not for p > 2:
//! random searches find an indefinite Gram matrix only in the second case.

use simnet::kernel::{find_non_psd_witness, gram_report};

fn main() -> simnet::Result<()> {
    for p in [1.0, 2.0, 3.0, 4.0] {
        match find_non_psd_witness(p, 1.0, 1000, 11)? {
            Some(points) => {
                let r = gram_report(&points, |a, b| (-(a - b).abs().powf(p)).exp())?;
                println!("p = {p}: indefinite on {points:.3?}, min eigenvalue {:.3e}", r.min_eigenvalue);
            }
            None => println!("p = {p}: no witness in 1000 trials"),
        }
    }
    Ok(())
}
