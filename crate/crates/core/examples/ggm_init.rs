//! Fits a generalized Gaussian mixture to planted data and maps it onto a
//! similarity layer whose score plus offset is the log-joint density.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simnet::ggm::{fit_ggm, ggm_log_joint, mixture_to_similarity_params, BetaMode, GGMixture, GgmConfig};
use simnet::tensor::Tensor;

fn main() -> simnet::Result<()> {
    let truth = GGMixture::new(
        vec![0.4, 0.6],
        Tensor::new(vec![2, 3], vec![-2.0, 0.0, 1.0, 2.0, 1.0, -1.0])?,
        Tensor::new(vec![2, 3], vec![0.5, 0.8, 0.6, 0.7, 0.5, 0.9])?,
        vec![1.5, 1.5],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<f64> = (0..5000)
        .map(|_| truth.sample(&mut rng, None).map(|s| s.0))
        .collect::<simnet::Result<Vec<_>>>()?
        .concat();
    // one shared shape, so a single similarity order carries every component
    let config = GgmConfig {
        beta: BetaMode::Fixed(1.5),
        ..GgmConfig::default()
    };
    let fit = fit_ggm(&Tensor::new(vec![5000, 3], rows)?, 2, &config)?;
    let m = &fit.mixture;
    println!("EM: {} iterations, final log-likelihood {:.3}", fit.log_likelihood.len() - 1, fit.log_likelihood.last().unwrap());
    println!("priors {:.3?}, shapes {:.3?}", m.priors, m.shapes);
    for l in 0..2 {
        println!("mean {l}: {:+.3?}", m.means.row(l));
    }

    let params = mixture_to_similarity_params(m, None)?;
    let x = [0.5, 0.5, 0.0];
    for l in 0..2 {
        println!(
            "component {l}: similarity + offset {:+.12}, log-joint {:+.12}",
            params.score(&x, l) + m.log_constant(l),
            ggm_log_joint(&x, m, l)?
        );
    }
    Ok(())
}
