//! Training loop, evaluation and the metrics report.

mod optim;

pub use optim::{AdamW, AdamWConfig, Schedule};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_split, LoadedBag, Manifest, Split};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::heads::LossWeights;
use crate::metrics::{corpus_bleu4, strip_specials};
use crate::model::{ModelConfig, PathM3};
use crate::tensor::{Graph, ParamStore};

/// Mixed into the run seed so that shuffling and initialisation draw from
/// different streams.
const SHUFFLE_STREAM: u64 = 0x5eed_5u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub adamw: AdamWConfig,
    pub alpha: f64,
    pub seed: u64,
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_c: f64,
    pub loss_g: f64,
    pub loss_overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_c: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_overall: Option<f64>,
    pub accuracy: Option<f64>,
    pub bleu4: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Selected on image-and-text validation accuracy.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    /// Selected on image-only validation accuracy.
    pub best_epoch_image_only: Option<usize>,
    pub best_val_accuracy_image_only: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_c,loss_g,loss_overall,accuracy,bleu4,wall_s";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.split,
                cell(r.loss_c),
                cell(r.loss_g),
                cell(r.loss_overall),
                cell(r.accuracy),
                cell(r.bleu4),
                r.wall_s
            );
        }
        out
    }

    /// Writes `metrics.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub mode: FusionMode,
    pub n: usize,
    pub accuracy: f64,
    pub loss_c: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_overall: Option<f64>,
    pub bleu4: Option<f64>,
    /// `(bag_id, predicted class, label)`
    pub predictions: Vec<(String, usize, usize)>,
    /// `(bag_id, decoded tokens)` when captions were requested.
    pub captions: Vec<(String, Vec<u32>)>,
}

impl Evaluation {
    pub fn row(&self, epoch: usize, split: &str, wall_s: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            split: split.into(),
            loss_c: self.loss_c,
            loss_g: self.loss_g,
            loss_overall: self.loss_overall,
            accuracy: Some(self.accuracy),
            bleu4: self.bleu4,
            wall_s,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub mode: FusionMode,
    pub alpha: f64,
    /// Also compute mean L_C, L_G and L_overall.
    pub losses: bool,
    pub captions: bool,
    pub max_decode_len: usize,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Accuracy under `opts.mode`, optionally mean losses and greedy captions
/// scored with corpus BLEU@4 against each bag's reference caption.
pub fn evaluate(model: &PathM3, store: &ParamStore, bags: &[LoadedBag], opts: EvalOptions) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::EmptySplit("evaluation split".into()));
    }
    let weights = LossWeights::new(opts.alpha)?;
    let mut correct = 0usize;
    let (mut lc, mut lg, mut lo) = (0.0, 0.0, 0.0);
    let mut predictions = Vec::with_capacity(bags.len());
    let mut captions = Vec::new();
    for bag in bags {
        let r = &bag.record;
        let probs = model.predict(store, &bag.features, &r.caption, opts.mode)?;
        let pred = argmax(&probs);
        correct += usize::from(pred == r.label);
        predictions.push((r.bag_id.clone(), pred, r.label));

        if opts.losses {
            let mut g = Graph::new();
            let losses = model.bag_losses(&mut g, store, &bag.features, &r.caption, r.label, weights)?;
            lc += g.scalar(losses.l_c);
            lg += g.scalar(losses.l_g);
            lo += g.scalar(losses.overall);
        }

        if opts.captions {
            captions.push((r.bag_id.clone(), model.caption(store, &bag.features, opts.max_decode_len)?));
        }
    }
    let n = bags.len() as f64;
    let bleu4 = if opts.captions {
        let segments: Vec<(Vec<u32>, Vec<Vec<u32>>)> = captions
            .iter()
            .zip(bags)
            .map(|((_, hyp), bag)| (strip_specials(hyp), vec![strip_specials(&bag.record.caption)]))
            .collect();
        Some(corpus_bleu4(&segments)?)
    } else {
        None
    };
    Ok(Evaluation {
        mode: opts.mode,
        n: bags.len(),
        accuracy: correct as f64 / n,
        loss_c: opts.losses.then_some(lc / n),
        loss_g: opts.losses.then_some(lg / n),
        loss_overall: opts.losses.then_some(lo / n),
        bleu4,
        predictions,
        captions,
    })
}

/// Best checkpoint under one inference modality.
#[derive(Debug, Clone)]
pub struct Selected {
    pub store: ParamStore,
    pub epoch: usize,
    pub val_accuracy: f64,
}

impl Selected {
    /// Ties go to the later epoch.
    fn offer(slot: &mut Option<Selected>, epoch: usize, acc: f64, store: &ParamStore) {
        if slot.as_ref().is_none_or(|s| acc >= s.val_accuracy) {
            *slot = Some(Selected {
                store: store.clone(),
                epoch,
                val_accuracy: acc,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected on image-and-text validation accuracy.
    pub best: Selected,
    /// Selected on image-only validation accuracy.
    pub best_image_only: Selected,
    pub last: ParamStore,
    pub steps: Vec<StepRecord>,
    pub report: MetricsReport,
}

/// Trains with per-bag forward passes and batch-averaged gradients.
///
/// `hook` sees each step's record and the accumulated gradients just before
/// the optimizer update.
pub fn train_with_hook<H>(
    model: &PathM3,
    mut store: ParamStore,
    train_bags: &[LoadedBag],
    val_bags: &[LoadedBag],
    cfg: &TrainConfig,
    mut hook: H,
) -> Result<TrainOutcome>
where
    H: FnMut(&StepRecord, &ParamStore),
{
    if train_bags.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_bags.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::RangeError {
            key: "batch_size".into(),
            detail: "must be at least 1".into(),
        });
    }
    let weights = LossWeights::new(cfg.alpha)?;
    let per_epoch = cfg.steps_per_epoch(train_bags.len());
    let total = per_epoch * cfg.epochs;
    let schedule = Schedule::new(cfg.lr, cfg.warmup_lr, cfg.warmup_steps.min(total), total)?;
    let mut opt = AdamW::new(&store, cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let eval_opts = EvalOptions {
        mode: FusionMode::ImageAndText,
        alpha: cfg.alpha,
        losses: false,
        captions: false,
        max_decode_len: cfg.max_decode_len,
    };

    let start = Instant::now();
    let mut steps = Vec::with_capacity(total);
    let mut report = MetricsReport::default();
    let mut best: Option<Selected> = None;
    let mut best_io: Option<Selected> = None;
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ec, mut eg, mut eo) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let inv = 1.0 / batch.len() as f64;
            let (mut bc, mut bg, mut bo) = (0.0, 0.0, 0.0);
            for &i in batch {
                let bag = &train_bags[i];
                let r = &bag.record;
                let diverged = |e: Error| match e {
                    Error::NonFinite { op } => Error::DivergedLoss {
                        epoch,
                        step,
                        bag_id: r.bag_id.clone(),
                        detail: format!("non-finite value in {op}"),
                    },
                    other => other,
                };
                let mut g = Graph::new();
                let losses = model
                    .bag_losses(&mut g, &store, &bag.features, &r.caption, r.label, weights)
                    .map_err(diverged)?;
                let scaled = g.scale(losses.overall, inv).map_err(diverged)?;
                g.backward_params(scaled, &mut store)?;
                bc += g.scalar(losses.l_c) * inv;
                bg += g.scalar(losses.l_g) * inv;
                bo += g.scalar(losses.overall) * inv;
            }
            let lr = schedule.lr_at(step)?;
            let rec = StepRecord {
                epoch,
                step,
                lr,
                loss_c: bc,
                loss_g: bg,
                loss_overall: bo,
            };
            hook(&rec, &store);
            opt.step(&mut store, lr)?;
            steps.push(rec);
            ec += bc * batch.len() as f64;
            eg += bg * batch.len() as f64;
            eo += bo * batch.len() as f64;
            step += 1;
        }
        let n = train_bags.len() as f64;
        report.rows.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss_c: Some(ec / n),
            loss_g: Some(eg / n),
            loss_overall: Some(eo / n),
            accuracy: None,
            bleu4: None,
            wall_s: start.elapsed().as_secs_f64(),
        });
        let val = evaluate(model, &store, val_bags, eval_opts)?;
        report.rows.push(val.row(epoch, "val", start.elapsed().as_secs_f64()));
        Selected::offer(&mut best, epoch, val.accuracy, &store);
        let val_io = evaluate(
            model,
            &store,
            val_bags,
            EvalOptions {
                mode: FusionMode::ImageOnly,
                ..eval_opts
            },
        )?;
        report.rows.push(val_io.row(epoch, "val_image_only", start.elapsed().as_secs_f64()));
        Selected::offer(&mut best_io, epoch, val_io.accuracy, &store);
    }
    let fallback = || Selected {
        store: store.clone(),
        epoch: 0,
        val_accuracy: f64::NAN,
    };
    let best = best.unwrap_or_else(fallback);
    let best_image_only = best_io.unwrap_or_else(fallback);
    report.best_epoch = Some(best.epoch);
    report.best_val_accuracy = Some(best.val_accuracy).filter(|v| v.is_finite());
    report.best_epoch_image_only = Some(best_image_only.epoch);
    report.best_val_accuracy_image_only = Some(best_image_only.val_accuracy).filter(|v| v.is_finite());
    Ok(TrainOutcome {
        best,
        best_image_only,
        last: store,
        steps,
        report,
    })
}

pub fn train(
    model: &PathM3,
    store: ParamStore,
    train_bags: &[LoadedBag],
    val_bags: &[LoadedBag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_hook(model, store, train_bags, val_bags, cfg, |_, _| {})
}

/// Everything produced by one seeded run on a split manifest.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: PathM3,
    pub outcome: TrainOutcome,
    pub test_image_and_text: Evaluation,
    pub test_image_only: Evaluation,
}

impl Experiment {
    /// Training report plus the two test rows, tagged `test_image_and_text`
    /// (which carries BLEU@4) and `test_image_only`. Each test row's
    /// epoch is the one its checkpoint was selected at.
    pub fn report(&self) -> MetricsReport {
        let mut r = self.outcome.report.clone();
        let wall = r.rows.last().map_or(0.0, |x| x.wall_s);
        r.rows.push(self.test_image_and_text.row(self.outcome.best.epoch, "test_image_and_text", wall));
        r.rows.push(self.test_image_only.row(self.outcome.best_image_only.epoch, "test_image_only", wall));
        r
    }
}

/// Builds the model, trains on `train`, selects on `val`, and evaluates on
/// `test` in both inference modes, each with the checkpoint selected under
/// that mode. Captions and BLEU@4 come from the main best-val checkpoint:
/// image-only accuracy tends to peak before captioning has converged.
pub fn run_experiment(model_cfg: &ModelConfig, cfg: &TrainConfig, manifest: &Manifest, root: &Path) -> Result<Experiment> {
    let train_bags = load_split(manifest, root, Split::Train)?;
    let val_bags = load_split(manifest, root, Split::Val)?;
    let test_bags = load_split(manifest, root, Split::Test)?;
    let (model, store) = PathM3::new(model_cfg, cfg.seed)?;
    let outcome = train(&model, store, &train_bags, &val_bags, cfg)?;
    let opts = |mode, captions| EvalOptions {
        mode,
        alpha: cfg.alpha,
        losses: true,
        captions,
        max_decode_len: cfg.max_decode_len,
    };
    let test_image_and_text = evaluate(&model, &outcome.best.store, &test_bags, opts(FusionMode::ImageAndText, true))?;
    let test_image_only = evaluate(&model, &outcome.best_image_only.store, &test_bags, opts(FusionMode::ImageOnly, false))?;
    Ok(Experiment {
        model,
        outcome,
        test_image_and_text,
        test_image_only,
    })
}
