//! ReLU, max pooling and average pooling written as MEX layers with hard
//! modes, and how close finite ξ gets.

use simnet::mex::{mex_layer_forward, MexMode};
use simnet::network::{realize_avgpool, realize_maxpool, realize_relu};
use simnet::tensor::Tensor;

fn main() -> simnet::Result<()> {
    let x = Tensor::from_fn(&[4, 4, 1], |i| (i as f64 - 7.5) / 3.0)?;
    let relu = realize_relu(x.shape())?;
    println!("relu       {:+.3?}", mex_layer_forward(&x, &relu)?.data());
    println!("relu xi=50 {:+.3?}", mex_layer_forward(&x, &relu.with_mode(MexMode::Soft(50.0)))?.data());

    let max = realize_maxpool([4, 4, 1], (2, 2), 2)?;
    let avg = realize_avgpool([4, 4, 1], (2, 2), 2)?;
    println!("max pool   {:+.3?}", mex_layer_forward(&x, &max)?.data());
    println!("max xi=1e4 {:+.6?}", mex_layer_forward(&x, &max.with_mode(MexMode::Soft(1e4)))?.data());
    println!("avg pool   {:+.3?}", mex_layer_forward(&x, &avg)?.data());
    println!("avg xi=1e-4 {:+.6?}", mex_layer_forward(&x, &avg.with_mode(MexMode::Soft(1e-4)))?.data());
    Ok(())
}
