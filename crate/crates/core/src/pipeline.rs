//! End-to-end steps behind the command-line tool: dataset preparation,
//! initialization, training, evaluation and the decision-region raster.
//! Each `cmd_*` function reads and writes files; the functions they wrap
//! work on in-memory values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, InitMethod, RunConfig, Stream};
use crate::data::{
    cifar_available, load_cifar10, synthetic_image_dataset, zca_fit, CifarSplit, LabeledImageSet, WhiteningTransform,
};
use crate::error::{Result, SimNetError};
use crate::ggm::{fit_ggm, fit_location_priors, GGMixture, LocationPriors};
use crate::network::{pool_map, PatchLabelingNet};
use crate::tensor::{PatchGeometry, Tensor};
use crate::trainer::{evaluate, train_with, EpochRecord, TrainHistory};
use crate::verify::two_template_raster;

pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const WHITENING_FILE: &str = "whitening.bin";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CACHE_FILE: &str = "cache.json";

/// Normalized images of both splits and the whitening fitted on training
/// patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub source: DataSource,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub whitening: WhiteningTransform,
    /// Patch size the whitening was fitted for.
    pub patch: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    source: DataSource,
    patch: [usize; 2],
    image_shape: [usize; 3],
    num_classes: usize,
    train: usize,
    test: usize,
}

fn resolve_source(config: &RunConfig) -> Result<DataSource> {
    let data = &config.data;
    let present = |dir: &Path| cifar_available(dir, CifarSplit::Train) && cifar_available(dir, CifarSplit::Test);
    match (data.source, &data.dir) {
        (DataSource::Synthetic, _) => Ok(DataSource::Synthetic),
        (DataSource::Cifar10, None) => Err(SimNetError::Config("data.source is cifar10 but data.dir is unset".into())),
        (DataSource::Cifar10, Some(dir)) if !dir.is_dir() => Err(SimNetError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 directory not found"),
        )),
        (DataSource::Cifar10, Some(_)) => Ok(DataSource::Cifar10),
        (DataSource::Auto, Some(dir)) if present(dir) => Ok(DataSource::Cifar10),
        (DataSource::Auto, _) => Ok(DataSource::Synthetic),
    }
}

/// Samples `count` patches uniformly over images and positions.
fn sample_patches(
    set: &LabeledImageSet,
    geometry: &PatchGeometry,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let d = geometry.patch_dim();
    let mut rows = vec![0.0; count * d];
    let mut positions = Vec::with_capacity(count);
    for row in rows.chunks_exact_mut(d) {
        let img = rng.gen_range(0..set.len());
        let pos = rng.gen_range(0..geometry.num_patches());
        geometry.copy_patch(set.image(img), pos / geometry.grid_w(), pos % geometry.grid_w(), row);
        positions.push(pos);
    }
    (rows, positions)
}

/// Loads (or synthesizes) both splits, normalizes every image and fits
/// the patch whitening on training patches only.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let data = &config.data;
    let source = resolve_source(config)?;
    let seed = config.seed_for(Stream::Data);
    let (train, test) = match source {
        DataSource::Cifar10 => {
            let dir = data.dir.as_deref().expect("resolved with a directory");
            (
                load_cifar10(dir, CifarSplit::Train, data.train_per_class, seed)?,
                load_cifar10(dir, CifarSplit::Test, data.test_per_class, seed.wrapping_add(1))?,
            )
        }
        _ => (
            synthetic_image_dataset(&data.synthetic, data.synthetic_train, seed)?,
            synthetic_image_dataset(&data.synthetic, data.synthetic_test, seed.wrapping_add(1))?,
        ),
    };
    if train.is_empty() {
        return Err(SimNetError::Argument("training split is empty".into()));
    }
    let train = train.normalized(data.contrast_reg);
    let test = test.normalized(data.contrast_reg);
    let patch = config.model.patch;
    let geometry = PatchGeometry::new(train.image_shape(), patch[0], patch[1], config.model.stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed_for(Stream::Whitening));
    let (rows, _) = sample_patches(&train, &geometry, data.zca_patches, &mut rng);
    let whitening = zca_fit(&Tensor::new(vec![data.zca_patches, geometry.patch_dim()], rows)?, data.zca_epsilon)?;
    Ok(PreparedData {
        source,
        train,
        test,
        whitening,
        patch,
    })
}

impl PreparedData {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| SimNetError::io(dir, e))?;
        self.train.save(dir.join(TRAIN_FILE))?;
        self.test.save(dir.join(TEST_FILE))?;
        self.whitening.save(dir.join(WHITENING_FILE))?;
        let manifest = CacheManifest {
            source: self.source,
            patch: self.patch,
            image_shape: self.train.image_shape(),
            num_classes: self.train.num_classes,
            train: self.train.len(),
            test: self.test.len(),
        };
        write_file(&dir.join(CACHE_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        let mut csv = String::from("split,images");
        for c in 0..self.train.num_classes {
            csv.push_str(&format!(",class_{c}"));
        }
        csv.push('\n');
        for (name, set) in [("train", &self.train), ("test", &self.test)] {
            csv.push_str(&format!("{name},{}", set.len()));
            for count in set.class_counts() {
                csv.push_str(&format!(",{count}"));
            }
            csv.push('\n');
        }
        write_file(&dir.join(SUMMARY_FILE), csv.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CACHE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| SimNetError::io(&path, e))?;
        let manifest: CacheManifest =
            serde_json::from_str(&text).map_err(|e| SimNetError::format(&path, e.to_string()))?;
        let train = LabeledImageSet::load(dir.join(TRAIN_FILE))?;
        let test = LabeledImageSet::load(dir.join(TEST_FILE))?;
        let whitening = WhiteningTransform::load(dir.join(WHITENING_FILE))?;
        if train.len() != manifest.train || test.len() != manifest.test {
            return Err(SimNetError::format(&path, "image counts disagree with the stored splits"));
        }
        Ok(PreparedData {
            source: manifest.source,
            train,
            test,
            whitening,
            patch: manifest.patch,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SimNetError::io(path, e))
}

pub fn cmd_prepare(config: &RunConfig, out_dir: impl AsRef<Path>) -> Result<PreparedData> {
    let prepared = prepare_data(config)?;
    prepared.save(out_dir)?;
    Ok(prepared)
}

/// Fitted mixture and location priors behind a GGM initialization.
#[derive(Debug, Clone)]
pub struct MixtureInit {
    pub mixture: GGMixture,
    pub priors: LocationPriors,
    pub log_likelihood: Vec<f64>,
}

/// Builds the untrained network described by `config` for `data`.
pub fn init_network(data: &PreparedData, config: &RunConfig) -> Result<(PatchLabelingNet, Option<MixtureInit>)> {
    if data.patch != config.model.patch {
        return Err(SimNetError::Config(format!(
            "cache whitening was fitted for {:?} patches, model uses {:?}",
            data.patch, config.model.patch
        )));
    }
    let spec = config.model.net_spec(data.train.image_shape(), data.train.num_classes);
    let geometry = spec.geometry()?;
    match config.init.method {
        InitMethod::Random => {
            let net = PatchLabelingNet::random(&spec, config.seed_for(Stream::Init))?
                .with_whitening(data.whitening.clone())?;
            Ok((net, None))
        }
        InitMethod::Ggm => {
            let count = config.init.patches;
            if spec.templates > count {
                return Err(SimNetError::Argument(format!(
                    "{} mixture components need at least as many patches, got {count}",
                    spec.templates
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed_for(Stream::Init));
            let (mut rows, positions) = sample_patches(&data.train, &geometry, count, &mut rng);
            data.whitening.apply_rows(&mut rows);
            let d = geometry.patch_dim();
            let fit = fit_ggm(&Tensor::new(vec![count, d], rows.clone())?, spec.templates, &config.ggm())?;

            let [lh, lw] = spec.pool_lattice;
            let pools = pool_map((geometry.grid_h(), geometry.grid_w()), (lh, lw));
            let mut groups = vec![Vec::new(); lh * lw];
            for (row, &pos) in rows.chunks_exact(d).zip(&positions) {
                groups[pools[pos]].extend_from_slice(row);
            }
            let location = fit_location_priors(
                &groups,
                (lh, lw),
                &fit.mixture,
                config.init.location_iters,
                config.init.location_tol,
            )?;
            let net = PatchLabelingNet::from_mixture(&spec, &fit.mixture, Some(&location.priors))?
                .with_whitening(data.whitening.clone())?;
            Ok((
                net,
                Some(MixtureInit {
                    mixture: fit.mixture,
                    priors: location.priors,
                    log_likelihood: fit.log_likelihood,
                }),
            ))
        }
    }
}

/// Mixture file written next to a GGM-initialized model.
pub fn mixture_path(model: &Path) -> PathBuf {
    model.with_extension("mixture.bin")
}

pub fn cmd_init(cache: impl AsRef<Path>, config: &RunConfig, out: impl AsRef<Path>) -> Result<PatchLabelingNet> {
    let data = PreparedData::load(cache)?;
    let (net, mixture) = init_network(&data, config)?;
    net.save(out.as_ref())?;
    if let Some(m) = mixture {
        m.mixture.save(mixture_path(out.as_ref()))?;
    }
    Ok(net)
}

pub fn cmd_train(
    model: impl AsRef<Path>,
    cache: impl AsRef<Path>,
    config: &RunConfig,
    out: impl AsRef<Path>,
    history_csv: impl AsRef<Path>,
    on_epoch: impl FnMut(&EpochRecord) + Send,
) -> Result<TrainHistory> {
    let mut net = PatchLabelingNet::load(model)?;
    let data = PreparedData::load(cache)?;
    let history = train_with(&mut net, &data.train, Some(&data.test), &config.sgd(), on_epoch)?;
    net.save(out)?;
    let path = history_csv.as_ref();
    let mut file = fs::File::create(path).map_err(|e| SimNetError::io(path, e))?;
    history.write_csv(&mut file).map_err(|e| SimNetError::io(path, e))?;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn write_confusion_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let k = self.confusion.len();
        let header: Vec<String> = (0..k).map(|c| format!("pred_{c}")).collect();
        writeln!(w, "true,{}", header.join(","))?;
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{t},{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn evaluate_report(net: &PatchLabelingNet, set: &LabeledImageSet) -> Result<EvalReport> {
    let (accuracy, mean_loss) = evaluate(net, set)?;
    let k = net.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    for i in 0..set.len() {
        confusion[set.labels[i]][net.predict(set.image(i))?] += 1;
    }
    Ok(EvalReport {
        images: set.len(),
        accuracy,
        mean_loss,
        confusion,
    })
}

/// Evaluates on the test split (or the training split) and writes the
/// JSON report and the confusion matrix CSV when paths are given.
pub fn cmd_eval(
    model: impl AsRef<Path>,
    cache: impl AsRef<Path>,
    use_train: bool,
    json_out: Option<&Path>,
    confusion_csv: Option<&Path>,
) -> Result<EvalReport> {
    let net = PatchLabelingNet::load(model)?;
    let data = PreparedData::load(cache)?;
    let set = if use_train { &data.train } else { &data.test };
    let report = evaluate_report(&net, set)?;
    if let Some(path) = json_out {
        write_file(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    if let Some(path) = confusion_csv {
        let mut file = fs::File::create(path).map_err(|e| SimNetError::io(path, e))?;
        report.write_confusion_csv(&mut file).map_err(|e| SimNetError::io(path, e))?;
    }
    Ok(report)
}

/// Writes the two-template weighted `l_1` decision regions as `x,y,label`.
pub fn cmd_raster(heavy: f64, resolution: (usize, usize), out: impl AsRef<Path>) -> Result<()> {
    let raster = two_template_raster(heavy, resolution)?;
    let path = out.as_ref();
    let mut file = fs::File::create(path).map_err(|e| SimNetError::io(path, e))?;
    raster.write_csv(&mut file).map_err(|e| SimNetError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub method: InitMethod,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub init_seconds: f64,
    pub train_seconds: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub source: DataSource,
    pub train_images: usize,
    pub test_images: usize,
    pub ggm: RunOutcome,
    pub random: RunOutcome,
    pub seconds: f64,
}

/// Prepares the data once, then initializes and trains the network twice
/// under the same config, once from the mixture and once at random.
pub fn compare_initializations(
    config: &RunConfig,
    mut on_epoch: impl FnMut(InitMethod, &EpochRecord) + Send,
) -> Result<Comparison> {
    let start = Instant::now();
    let data = prepare_data(config)?;
    let mut run = |method: InitMethod| -> Result<RunOutcome> {
        let mut cfg = config.clone();
        cfg.init.method = method;
        let t0 = Instant::now();
        let (mut net, _) = init_network(&data, &cfg)?;
        let init_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let history = train_with(&mut net, &data.train, None, &cfg.sgd(), |r| on_epoch(method, r))?;
        let train_seconds = t1.elapsed().as_secs_f64();
        Ok(RunOutcome {
            method,
            test_accuracy: evaluate(&net, &data.test)?.0,
            train_accuracy: evaluate(&net, &data.train)?.0,
            init_seconds,
            train_seconds,
            history,
        })
    };
    let ggm = run(InitMethod::Ggm)?;
    let random = run(InitMethod::Random)?;
    Ok(Comparison {
        source: data.source,
        train_images: data.train.len(),
        test_images: data.test.len(),
        ggm,
        random,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticImageConfig;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.source = DataSource::Synthetic;
        c.data.synthetic = SyntheticImageConfig {
            side: 8,
            classes: 3,
            motif_side: 3,
            shift: 1,
            ..SyntheticImageConfig::default()
        };
        c.data.synthetic_train = 30;
        c.data.synthetic_test = 12;
        c.data.zca_patches = 400;
        c.model.templates = 4;
        c.model.patch = [3, 3];
        c.init.patches = 300;
        c.train.epochs = 2;
        c.train.batch_size = 8;
        c
    }

    #[test]
    fn prepare_init_train_eval_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let cache = dir.path().join("cache");
        let prepared = cmd_prepare(&config, &cache).unwrap();
        assert_eq!(PreparedData::load(&cache).unwrap(), prepared);
        let summary = fs::read_to_string(cache.join(SUMMARY_FILE)).unwrap();
        assert!(summary.starts_with("split,images,class_0,class_1,class_2\ntrain,30,"));

        let model = dir.path().join("model.bin");
        cmd_init(&cache, &config, &model).unwrap();
        assert!(mixture_path(&model).exists());
        let trained = dir.path().join("trained.bin");
        let csv = dir.path().join("history.csv");
        let history = cmd_train(&model, &cache, &config, &trained, &csv, |_| {}).unwrap();
        assert_eq!(history.records.len(), 2);
        let again = dir.path().join("again.csv");
        cmd_train(&model, &cache, &config, dir.path().join("t2.bin"), &again, |_| {}).unwrap();
        let strip = |p: &Path| -> Vec<String> {
            // the seconds column is wall time
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        assert_eq!(strip(&csv), strip(&again));

        let report = cmd_eval(&trained, &cache, false, None, Some(&dir.path().join("cm.csv"))).unwrap();
        assert_eq!(report.images, 12);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 12);
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny();
        config.train.learning_rate = 0.0;
        let cache = dir.path().join("cache");
        cmd_prepare(&config, &cache).unwrap();
        let model = dir.path().join("model.bin");
        let before = cmd_init(&cache, &config, &model).unwrap();
        let out = dir.path().join("out.bin");
        cmd_train(&model, &cache, &config, &out, dir.path().join("h.csv"), |_| {}).unwrap();
        assert_eq!(PatchLabelingNet::load(&out).unwrap(), before);
    }

    #[test]
    fn random_init_is_standard_normal() {
        let mut config = tiny();
        config.init.method = InitMethod::Random;
        config.model.templates = 4;
        config.model.patch = [6, 6];
        config.data.synthetic.side = 16;
        config.data.synthetic.motif_side = 6;
        let data = prepare_data(&config).unwrap();
        let moments = |z: &[f64]| {
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            (mean, z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64)
        };
        let mut pooled = Vec::new();
        let mut within = 0;
        for seed in 0..20 {
            config.seed = seed;
            let (net, mixture) = init_network(&data, &config).unwrap();
            assert!(mixture.is_none());
            let z = net.similarity.templates.data();
            assert_eq!(z.len(), 108 * 4);
            let (mean, var) = moments(z);
            // the sample variance has standard deviation ~0.07 at 432 draws
            within += usize::from(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
            pooled.extend_from_slice(z);
            assert!(net.similarity.log_weights.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
            assert!(net.offsets.data().iter().all(|&b| b == 0.0));
        }
        assert!(within >= 16, "{within}/20 seeds within 10%");
        let (mean, var) = moments(&pooled);
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.03, "pooled mean {mean} var {var}");
    }

    #[test]
    fn ggm_init_satisfies_the_log_joint_identity() {
        let config = tiny();
        let data = prepare_data(&config).unwrap();
        let (net, init) = init_network(&data, &config).unwrap();
        let init = init.unwrap();
        let x = data.whitening.apply(&vec![0.1; 27]);
        let s = net.similarity.scores(&x);
        for l in 0..4 {
            let lambda = init.priors.at(0, 0)[l];
            let joint = crate::ggm::ggm_log_joint(&x, &init.mixture, l).unwrap() - init.mixture.priors[l].ln()
                + lambda.ln();
            let got = s[l] + net.offsets.get(&[0, l, 0, 0]).unwrap();
            assert!((got - joint).abs() < 1e-12 * joint.abs().max(1.0), "{got} vs {joint}");
        }
    }

    #[test]
    fn too_many_components_is_an_argument_error() {
        let mut config = tiny();
        config.init.patches = 3;
        let data = prepare_data(&config).unwrap();
        assert!(matches!(init_network(&data, &config), Err(SimNetError::Argument(_))));
    }

    #[test]
    fn missing_cifar_directory_is_an_io_error() {
        let mut config = tiny();
        config.data.source = DataSource::Cifar10;
        config.data.dir = Some(PathBuf::from("/nonexistent/cifar"));
        assert!(matches!(prepare_data(&config), Err(SimNetError::Io { .. })));
        config.data.source = DataSource::Auto;
        assert_eq!(prepare_data(&config).unwrap().source, DataSource::Synthetic);
    }

    #[test]
    fn raster_csv_has_one_row_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r.csv");
        cmd_raster(3.0, (5, 4), &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().next(), Some("x,y,label"));
        assert_eq!(text.lines().count(), 21);
    }
}
