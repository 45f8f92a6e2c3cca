//! Short training run on the synthetic image set with per-epoch progress
//! and a finite-difference check of the initial gradients.

use simnet::config::{DataSource, RunConfig};
use simnet::pipeline::{evaluate_report, init_network, prepare_data};
use simnet::trainer::{grad_check, train_with, GradCheckConfig};

fn main() -> simnet::Result<()> {
    let mut config = RunConfig::default();
    config.data.source = DataSource::Synthetic;
    config.data.synthetic_train = 600;
    config.data.synthetic_test = 200;
    config.data.zca_patches = 20_000;
    config.model.templates = 16;
    config.init.patches = 5000;
    config.train.epochs = 5;
    config.train.batch_size = 32;

    let data = prepare_data(&config)?;
    let (mut net, _) = init_network(&data, &config)?;
    let check = grad_check(&net, data.train.image(0), data.train.labels[0], &GradCheckConfig::default())?;
    println!("gradient check: max relative error {:.2e}", check.max_rel_err());

    let history = train_with(&mut net, &data.train, Some(&data.test), &config.sgd(), |r| {
        println!("epoch {} loss {:.5} train {:.3} test {:.3?}", r.epoch, r.loss, r.train_acc, r.val_acc);
    })?;
    let report = evaluate_report(&net, &data.test)?;
    println!("final test accuracy {:.3} after {} epochs", report.accuracy, history.records.len());
    Ok(())
}
