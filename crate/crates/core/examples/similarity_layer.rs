//! Similarity layer over all patches of a small image: linear, l1 and
//! weighted l2 forms, plus the gradient with respect to the templates.

use simnet::similarity::{similarity_backward, similarity_forward, GradRequest, SimilarityForm, SimilarityParams};
use simnet::tensor::{extract_patches, Tensor};

fn main() -> simnet::Result<()> {
    let image = Tensor::from_fn(&[5, 5, 1], |i| ((i * 7) % 11) as f64 / 10.0)?;
    let patches = extract_patches(&image, 3, 3, 1)?;
    let z = Tensor::from_fn(&[2, 9], |i| if i < 9 { 0.5 } else { (i % 3) as f64 / 2.0 })?;

    for (name, params) in [
        ("linear", SimilarityParams::unweighted(SimilarityForm::Linear, z.clone(), 1.0)?),
        ("l1", SimilarityParams::unweighted(SimilarityForm::Lp, z.clone(), 1.0)?),
        ("weighted l2", SimilarityParams::weighted(SimilarityForm::Lp, z.clone(), Tensor::filled(&[2, 9], 0.3)?, 2.0)?),
    ] {
        let s = similarity_forward(&patches, &params)?;
        println!("{name:>12}: output {:?}, top-left {:+.4?}", s.shape(), &s.data()[..2]);
    }

    let params = SimilarityParams::unweighted(SimilarityForm::Lp, z, 2.0)?;
    let upstream = Tensor::filled(&[3, 3, 2], 1.0)?;
    let g = similarity_backward(&patches, &params, &upstream, GradRequest::default())?;
    println!("d/dz of the summed l2 similarity, template 0: {:+.3?}", g.d_templates.row(0));
    Ok(())
}
