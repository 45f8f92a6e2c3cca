//! A one-hidden-layer MEX network equals a kernel machine: its scores are
//! `ln Σ_l α_rl K(x, z_l) / ξ` up to a constant, with `α_rl = e^{ξ b_rl}`.

use simnet::kernel::{mlp_kernel_form, KernelSpec};
use simnet::mex::MexMode;
use simnet::network::MlpNet;
use simnet::similarity::{SimilarityForm, SimilarityParams};
use simnet::tensor::Tensor;

fn main() -> simnet::Result<()> {
    let xi = 0.8;
    let z = Tensor::new(vec![3, 2], vec![0.0, 1.0, -1.0, 0.0, 1.0, -1.0])?;
    let b = Tensor::new(vec![2, 3], vec![0.2, -0.3, 0.0, -0.5, 0.4, 0.1])?;
    let x = [0.3, -0.2];
    for (name, form, p, spec) in [
        ("linear / exponential", SimilarityForm::Linear, 1.0, KernelSpec::exponential(xi)?),
        ("l1 / Laplacian", SimilarityForm::Lp, 1.0, KernelSpec::generalized_gaussian(xi, 1.0)?),
        ("l2 / Gaussian", SimilarityForm::Lp, 2.0, KernelSpec::generalized_gaussian(xi, 2.0)?),
    ] {
        let net = MlpNet::new(SimilarityParams::unweighted(form, z.clone(), p)?, b.clone(), MexMode::Soft(xi))?;
        let kernel = mlp_kernel_form(&x, &net.similarity.templates, &net.offset_rows(), &spec)?;
        println!("{name:>22}: network {:+.12?}", net.scores(&x)?);
        println!("{:>22}  kernel  {kernel:+.12?}", "");
    }
    Ok(())
}
