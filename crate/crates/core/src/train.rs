//! Minibatch SGD training loop and model-against-dataset evaluation.
//!
//! The loop itself stays filesystem-free: callers receive the parameter store
//! through a per-epoch callback and decide what to persist. With a fixed seed
//! the whole schedule (shuffles, flips, updates) is reproducible bit for bit.

use crate::data::{transition_mask, MattingSample};
use crate::losses::{total_loss, LossBreakdown, LossWeights, TotalLossInputs};
use crate::metrics::{score_matte, EvalRecord, EvalReport};
use crate::model::{forward, infer, ModelConfig};
use crate::nn::{collect_grads, sgd_step, Binder, ParamStore, SgdConfig};
use crate::tape::Tape;
use crate::tensor::Tensor4;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Everything a training run depends on besides the dataset itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub weights: LossWeights,
    /// Seeds parameter init and the shuffle/augmentation stream.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Half-width of the transition band supervising the detail branch.
    pub band_radius: usize,
    /// Random horizontal mirroring of whole samples.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            sgd: SgdConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            epochs: 30,
            batch_size: 4,
            band_radius: 3,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sgd.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.band_radius == 0 {
            return Err(Error::InvalidArgument("band radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss components averaged over one epoch's iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_s: f64,
    pub l_d: f64,
    pub l_alpha: f64,
    pub total: f64,
}

/// Training log as CSV, one row per epoch. Values keep full round-trip
/// precision so reruns diff clean.
pub fn log_to_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,l_s,l_d,l_alpha,total\n");
    for row in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.epoch, row.l_s, row.l_d, row.l_alpha, row.total
        )
        .unwrap();
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<EpochStats>,
    /// Pre-update total loss of every iteration, in order.
    pub iteration_totals: Vec<f64>,
}

/// Stack one field across the batch, mirroring flagged samples.
fn stacked(
    samples: &[&MattingSample],
    flips: &[bool],
    field: impl Fn(&MattingSample) -> &Tensor4,
) -> Result<Tensor4> {
    let parts: Vec<Tensor4> = samples
        .iter()
        .zip(flips)
        .map(|(s, &fl)| {
            let t = field(s);
            if fl {
                t.flip_w()
            } else {
                t.clone()
            }
        })
        .collect();
    Tensor4::stack_batch(&parts)
}

/// Forward, loss, backward, parameter update for one batch.
fn train_step(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    samples: &[&MattingSample],
    flips: &[bool],
    epoch: usize,
) -> Result<LossBreakdown> {
    let image = stacked(samples, flips, |s| &s.image)?;
    let alpha_g = stacked(samples, flips, |s| &s.alpha)?;
    let m_d = transition_mask(&alpha_g, cfg.band_radius)?;
    // The compositional term needs both plates for every batch member; any
    // sample without them drops the term for the whole batch.
    let has_plates = samples.iter().all(|s| s.fg.is_some() && s.bg.is_some());
    let (fg, bg) = if has_plates {
        (
            Some(stacked(samples, flips, |s| s.fg.as_ref().unwrap())?),
            Some(stacked(samples, flips, |s| s.bg.as_ref().unwrap())?),
        )
    } else {
        (None, None)
    };

    let mut tape = Tape::new();
    let mut b = Binder::new(store, &mut tape);
    let x = b.tape().leaf(image.clone());
    let out = forward(&mut b, x, &cfg.model)?;
    let bindings = b.into_bindings();
    let (loss_id, stats) = total_loss(
        &mut tape,
        &TotalLossInputs {
            s_po: out.s_po,
            d_p: out.d_p,
            alpha_p: out.alpha_p,
            alpha_g: &alpha_g,
            m_d: &m_d,
            image: &image,
            fg: fg.as_ref(),
            bg: bg.as_ref(),
        },
        &cfg.weights,
    )?;
    let grads = tape.backward(loss_id)?;
    let named = collect_grads(&bindings, &grads)?;
    sgd_step(store, &named, &cfg.sgd, epoch)?;
    Ok(stats)
}

/// Run the full schedule over `samples`. `on_epoch` fires after each epoch
/// with the current parameters, so callers can checkpoint at milestones.
pub fn train(
    samples: &[MattingSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &mut ParamStore, &EpochStats) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut store = ParamStore::new(cfg.seed);
    // Separate stream from parameter init, so reordering layers in the model
    // cannot disturb the data schedule.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iteration_totals = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (
            LossBreakdown {
                l_s: 0.0,
                l_d: 0.0,
                l_alpha: 0.0,
                l_c: 0.0,
                total: 0.0,
            },
            0usize,
        );
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MattingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| cfg.hflip && rng.random_bool(0.5))
                .collect();
            let stats = train_step(&mut store, cfg, &batch, &flips, epoch)?;
            sum.l_s += stats.l_s;
            sum.l_d += stats.l_d;
            sum.l_alpha += stats.l_alpha;
            sum.l_c += stats.l_c;
            sum.total += stats.total;
            iteration_totals.push(stats.total);
            batches += 1;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            l_s: sum.l_s / n,
            l_d: sum.l_d / n,
            l_alpha: sum.l_alpha / n,
            total: sum.total / n,
        };
        on_epoch(epoch, &mut store, &stats)?;
        log.push(stats);
    }
    Ok(TrainOutcome {
        store,
        log,
        iteration_totals,
    })
}

/// Predict a matte for every sample and score it against the ground truth.
pub fn evaluate_model(
    store: &mut ParamStore,
    model: &ModelConfig,
    samples: &[(String, MattingSample)],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for (id, sample) in samples {
        let pred = infer(store, &sample.image, model)?;
        rows.push(EvalRecord {
            id: id.clone(),
            scores: score_matte(&pred, &sample.alpha)?,
        });
    }
    EvalReport::new(rows)
}
