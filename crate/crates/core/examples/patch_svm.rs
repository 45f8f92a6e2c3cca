//! With unweighted similarity and ξ₁ = ξ₂, the patch-labeling network is a
//! patch-based kernel SVM: `P·n·e^{ξ·out_r}` equals the SVM score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simnet::verify::random_collapsible_net;

fn main() -> simnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (net, xi) = random_collapsible_net(&mut rng)?;
    let svm = net.to_patch_svm()?;
    let len: usize = net.geometry.input_shape().iter().product();
    let image: Vec<f64> = (0..len).map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.5).collect();

    let out = net.forward(&image)?;
    let instance = net.patch_instance(&image)?;
    let scale = (net.geometry.num_patches() * net.num_templates()) as f64;
    println!("xi = {xi:.3}, {} patches, {} templates", net.geometry.num_patches(), net.num_templates());
    for (r, (o, s)) in out.iter().zip(svm.scores(&instance)?).enumerate() {
        println!("class {r}: network {:.12e}  svm {s:.12e}", scale * (xi * o).exp());
    }
    for s in svm.double_sum_scores(&instance)? {
        println!("double sum {s:.12e}");
    }
    println!("predictions: network {} svm {}", net.predict(&image)?, svm.classify(&instance)?);
    Ok(())
}
