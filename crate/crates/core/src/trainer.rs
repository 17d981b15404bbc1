//! Training loop: batching, loss assembly, Adam updates, validation and
//! best-checkpoint selection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::{Gradients, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_bool, parse_kv, parse_value};
use crate::dataset::{ImageRecord, PatchQuad, Polarity};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{
    batch_objective, saliency_significance, ImageTerms, LossWeights, Objective, Rect,
};
use crate::network::{forward_image, init_params, record_forward, NetworkConfig, QuadBatch};
use crate::optim::{adam_step, AdamState};
use crate::params::ParameterSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patches_per_image: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Draw fresh patch origins every epoch.
    pub resample: bool,
    pub polarity: Polarity,
    pub loss: LossWeights,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            patches_per_image: 32,
            max_epochs: 1000,
            learning_rate: 1e-4,
            seed: 0,
            resample: true,
            polarity: Polarity::Mos,
            loss: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for the rank loss".into(),
            ));
        }
        if self.patches_per_image == 0 {
            return Err(Error::Config("patches_per_image must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        self.network.validate()
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patches_per_image" => self.patches_per_image = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "resample" => self.resample = parse_bool(key, value)?,
            "polarity" => self.polarity = value.parse()?,
            "alpha" => self.loss.alpha = parse_value(key, value)?,
            "beta" => self.loss.beta = parse_value(key, value)?,
            "gamma" => self.loss.gamma = parse_value(key, value)?,
            "rank_epsilon" => self.loss.epsilon = parse_value(key, value)?,
            "preset" => self.network = NetworkConfig::preset(value)?,
            _ => return self.network.apply(key, value),
        }
        Ok(true)
    }

    /// Parses training and network keys from one config text.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Quads and targets of one image inside a training batch.
#[derive(Clone, Debug)]
pub struct StepItem {
    pub quads: Vec<PatchQuad>,
    pub significance: Vec<f64>,
    pub truth: f64,
}

impl StepItem {
    pub fn sample(record: &ImageRecord, n: usize, patch: usize, seed: u64) -> Result<Self> {
        let quads = record.source.sample(n, patch, seed)?;
        let rects: Vec<Rect> = quads
            .iter()
            .map(|q| Rect::square(q.origin, patch))
            .collect();
        Ok(Self {
            significance: saliency_significance(&record.saliency, &rects)?,
            quads,
            truth: record.score,
        })
    }
}

fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn check_finite(obj: &Objective) -> Result<()> {
    for (name, v) in [
        ("L_mae", obj.mae),
        ("L_rank", obj.rank),
        ("L_sal", obj.sal),
        ("L_tot", obj.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                detail: format!(
                    "L_mae={} L_rank={} L_sal={} L_tot={} scores={:?}",
                    obj.mae, obj.rank, obj.sal, obj.total, obj.scores
                ),
            });
        }
    }
    Ok(())
}

/// Loss of one batch and the gradient of the total loss w.r.t. every
/// parameter (one vector per parameter, in parameter order).
pub fn batch_gradients<T: Scalar>(
    cfg: &NetworkConfig,
    lw: &LossWeights,
    params: &ParameterSet<T>,
    items: &[StepItem],
    exec: Exec,
) -> Result<(Objective, Vec<Vec<T>>)> {
    let recorded = exec.try_map(items, |_, item| {
        let quads: Vec<&PatchQuad> = item.quads.iter().collect();
        let batch = QuadBatch::<T>::from_quads(&quads)?;
        let mut tape = Tape::with_params(params, true);
        let vars = record_forward(&mut tape, cfg, &batch)?;
        Ok::<_, Error>((tape, vars))
    })?;
    let terms: Vec<ImageTerms> = recorded
        .iter()
        .zip(items)
        .map(|((tape, v), item)| ImageTerms {
            weights: as_f64(tape.value(v.w)),
            qualities: as_f64(tape.value(v.q)),
            significance: item.significance.clone(),
            truth: item.truth,
        })
        .collect();
    let obj = batch_objective(&terms, lw)?;
    check_finite(&obj)?;
    let grads: Vec<Gradients<T>> = exec.try_map(&recorded, |k, (tape, v)| {
        let seed = |g: &[f64]| Tensor::new(&[g.len(), 1], g.iter().map(|&x| T::of(x)).collect());
        let dw = seed(&obj.d_weights[k])?;
        let dq = seed(&obj.d_qualities[k])?;
        tape.backward(&[(v.w, &dw), (v.q, &dq)])
    })?;
    drop(recorded);
    let mut acc: Vec<Vec<T>> = params
        .iter()
        .map(|(_, t)| vec![T::zero(); t.len()])
        .collect();
    for g in &grads {
        g.add_params_into(&mut acc);
    }
    Ok((obj, acc))
}

/// One optimizer step on a batch; returns the loss components before the update.
pub fn train_step(
    cfg: &TrainConfig,
    params: &mut ParameterSet,
    adam: &mut AdamState,
    items: &[StepItem],
    exec: Exec,
) -> Result<Objective> {
    let (obj, grads) = batch_gradients(&cfg.network, &cfg.loss, params, items, exec)?;
    params.clear_grads();
    for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(&grads) {
        params.accumulate_grad(id, g)?;
    }
    adam_step(params, adam)?;
    Ok(obj)
}

/// Predicted score of every record from exhaustive tiling.
pub fn predict_scores(
    cfg: &NetworkConfig,
    params: &ParameterSet,
    records: &[&ImageRecord],
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.try_map(records, |_, r| {
        let quads = r.source.tile(cfg.patch_size)?;
        Ok(forward_image(cfg, params, &quads, Exec::Sequential)?.score)
    })
}

/// Mean `|S - s|` over `records` using exhaustive tiling.
pub fn validate(
    cfg: &NetworkConfig,
    params: &ParameterSet,
    records: &[&ImageRecord],
    exec: Exec,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let preds = predict_scores(cfg, params, records, exec)?;
    let v = preds
        .iter()
        .zip(records)
        .map(|(p, r)| (p - r.score).abs())
        .sum::<f64>()
        / records.len() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            component: "validation loss".into(),
            detail: format!("predictions {preds:?}"),
        });
    }
    Ok(v)
}

/// Image batches for `epoch`: a seeded shuffle cut into `batch_size` groups.
/// A trailing group too small to form a rank pair is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[epoch, 0]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub const LOG_HEADER: &str = "step,L_mae,L_rank,L_sal,L_tot";

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub exec: Exec,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_val: f64,
    pub epochs: u64,
    pub steps: u64,
}

/// Trains on `train`, validating on `val` (or on `train` when `val` is empty),
/// writing `best.ckpt`, `last.ckpt` and `train_log.csv` into the output directory.
pub fn fit(
    cfg: &TrainConfig,
    train: &[&ImageRecord],
    val: &[&ImageRecord],
    opts: &FitOptions,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Invalid(format!(
            "training split has {} images; at least two are needed",
            train.len()
        )));
    }
    let val = if val.is_empty() { train } else { val };
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let best_path = dir.join("best.ckpt");
    let last_path = dir.join("last.ckpt");
    let log_path = dir.join("train_log.csv");

    let mut ck = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load_for(p, &cfg.network)?;
            if ck.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint seed {} differs from configured seed {}",
                    ck.seed, cfg.seed
                )));
            }
            ck
        }
        None => Checkpoint::new(
            cfg.network.clone(),
            init_params(&cfg.network, cfg.seed)?,
            cfg.seed,
        ),
    };
    let mut adam = ck
        .adam
        .take()
        .unwrap_or_else(|| AdamState::new(&ck.params, cfg.learning_rate));
    adam.lr = cfg.learning_rate;

    let mut log = if opts.resume.is_some() && log_path.exists() {
        truncate_log(&log_path, ck.step)?;
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
        f
    };

    if opts.resume.is_none() {
        ck.adam = Some(adam.clone());
        ck.save(&best_path)?;
        ck.save(&last_path)?;
    }

    let patch = cfg.network.patch_size;
    while (ck.epoch as usize) < cfg.max_epochs {
        let epoch = ck.epoch;
        let sample_epoch = if cfg.resample { epoch } else { 0 };
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let items = opts.exec.try_map(&batch, |_, &i| {
                let seed = rng::derive_seed(cfg.seed, &[sample_epoch, 1, i as u64]);
                StepItem::sample(train[i], cfg.patches_per_image, patch, seed)
            })?;
            let obj = train_step(cfg, &mut ck.params, &mut adam, &items, opts.exec)?;
            ck.step += 1;
            writeln!(
                log,
                "{},{},{},{},{}",
                ck.step, obj.mae, obj.rank, obj.sal, obj.total
            )
            .map_err(|e| Error::io(&log_path, e))?;
        }
        ck.epoch += 1;
        let v = validate(&cfg.network, &ck.params, val, opts.exec)?;
        ck.adam = Some(adam.clone());
        if v < ck.best_val {
            ck.best_val = v;
            ck.save(&best_path)?;
        }
        ck.save(&last_path)?;
        if opts.progress {
            eprintln!(
                "epoch {} step {} val {:.4} best {:.4}",
                ck.epoch, ck.step, v, ck.best_val
            );
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(FitReport {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
        best_val: ck.best_val,
        epochs: ck.epoch,
        steps: ck.step,
    })
}

/// Keeps the header and the first `steps` rows.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<&str> = text.lines().take(steps as usize + 1).collect();
    fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::io(path, e))
}
