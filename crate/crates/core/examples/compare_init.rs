//! Trains the patch-labeling network twice on the same data, once from the
//! mixture initialization and once from random templates, and prints both
//! test accuracies.
//!
//! Uses CIFAR-10 when `data.dir` points at the binary batches, the
//! synthetic image set otherwise. Extra arguments are `key=value`
//! overrides, e.g. `train.epochs=5`.

use simnet::config::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let config = RunConfig::load(None, &overrides)?;
    let report = simnet::pipeline::compare_initializations(&config, |method, r| {
        eprintln!(
            "{method:?} epoch {:>3} loss {:.4} train_acc {:.3} ({:.1} s)",
            r.epoch, r.loss, r.train_acc, r.seconds
        );
    })?;
    println!(
        "data {:?}: {} train / {} test images",
        report.source, report.train_images, report.test_images
    );
    for run in [&report.ggm, &report.random] {
        println!(
            "{:?}: test {:.3} train {:.3} (init {:.1} s, train {:.1} s)",
            run.method, run.test_accuracy, run.train_accuracy, run.init_seconds, run.train_seconds
        );
    }
    println!("total {:.1} s", report.seconds);
    Ok(())
}
