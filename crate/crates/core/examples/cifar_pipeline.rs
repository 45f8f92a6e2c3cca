//! File-based pipeline: prepare a cache, initialize, train and evaluate,
//! as the command-line tool does. Pass a CIFAR-10 binary directory as the
//! first argument; without one the synthetic image set is used.

use simnet::config::{DataSource, RunConfig};
use simnet::pipeline::{cmd_eval, cmd_init, cmd_prepare, cmd_train};

fn main() -> simnet::Result<()> {
    let mut config = RunConfig::default();
    match std::env::args().nth(1) {
        Some(dir) => {
            config.data.source = DataSource::Cifar10;
            config.data.dir = Some(dir.into());
            config.data.train_per_class = Some(50);
            config.data.test_per_class = Some(20);
        }
        None => {
            config.data.source = DataSource::Synthetic;
            config.data.synthetic_train = 500;
            config.data.synthetic_test = 200;
        }
    }
    config.data.zca_patches = 20_000;
    config.model.templates = 12;
    config.init.patches = 4000;
    config.train.epochs = 3;

    let work = std::env::temp_dir().join("simnet-pipeline");
    let cache = work.join("cache");
    let data = cmd_prepare(&config, &cache)?;
    println!("prepared {:?}: {} train, {} test", data.source, data.train.len(), data.test.len());
    cmd_init(&cache, &config, work.join("init.bin"))?;
    cmd_train(work.join("init.bin"), &cache, &config, work.join("model.bin"), work.join("history.csv"), |r| {
        println!("epoch {} loss {:.5}", r.epoch, r.loss)
    })?;
    let report = cmd_eval(work.join("model.bin"), &cache, false, None, Some(&work.join("confusion.csv")))?;
    println!("test accuracy {:.3}; files in {}", report.accuracy, work.display());
    Ok(())
}
