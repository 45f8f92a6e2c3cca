//! MEX sweeps from min through mean to max as ξ runs from −∞ to +∞, and a
//! MEX of block MEXes equals the flat MEX when blocks have equal size.

use simnet::mex::{mex, mex_grad, MexMode};

fn main() -> simnet::Result<()> {
    let c = [0.5, -1.0, 2.0, 0.0];
    println!("values {c:?}");
    for xi in [-100.0, -1.0, 1e-9, 1.0, 100.0] {
        println!("  MEX_{xi:<6} = {:+.6}", mex(&c, xi)?);
    }
    println!("  min {:+.6} mean {:+.6} max {:+.6}", MexMode::Min.eval(&c), MexMode::Mean.eval(&c), MexMode::Max.eval(&c));

    let (weights, d_xi) = mex_grad(&c, 1.0)?;
    println!("softmax weights at xi=1: {weights:.4?}, d/dxi {d_xi:+.6}");

    let blocks = [mex(&c[..2], 0.7)?, mex(&c[2..], 0.7)?];
    println!("collapse: {:+.12} vs {:+.12}", mex(&blocks, 0.7)?, mex(&c, 0.7)?);
    Ok(())
}
