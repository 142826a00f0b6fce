//! Training loop: epochs of time-ordered batches, memory reset at every
//! epoch start, Adam on all trainable parameters.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{bounding_box, Config, SceneSample};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::hebbian::HebbianMemory;
use crate::model::{pose_loss, Mode, NeuroLoc};
use crate::tensor::{AdamConfig, AdamState, Graph, Matrix};

/// One row of the loss log: means over the epoch's batches (weighted by
/// batch size) and the loss weights after the epoch's last step. Disabled
/// grid terms are logged as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pos_term: f64,
    pub rot_term: f64,
    pub grid_term: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NeuroLoc,
    pub log: Vec<LossRecord>,
    pub steps: usize,
}

/// Grid over the bounding box of the training positions.
pub fn training_grid(config: &Config, train: &[SceneSample]) -> Result<GridSpec> {
    let (lo, hi) = bounding_box(train).ok_or_else(|| Error::Contract("empty training split".into()))?;
    GridSpec::build(lo, hi, config.grids)
}

pub fn train(config: &Config, train: &[SceneSample]) -> Result<TrainOutcome> {
    train_with(config, train, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    config: &Config,
    train: &[SceneSample],
    mut on_epoch: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut samples = train.to_vec();
    samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let grid = training_grid(config, &samples)?;
    let mut model = NeuroLoc::new(config, Some(grid))?;

    let trainable: Vec<usize> = (0..model.params.len()).filter(|&i| model.params[i].trainable).collect();
    let decay: Vec<bool> = trainable.iter().map(|&i| model.params[i].decay).collect();
    let initial: Vec<Matrix> = trainable.iter().map(|&i| model.params[i].value.clone()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &initial,
    );
    drop(initial);

    let mut memory = HebbianMemory::new(config.feature_dim, config.memory_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let max_steps = config.steps.unwrap_or(usize::MAX);
    let mut steps = 0usize;
    let mut log = Vec::new();

    for epoch in 0..config.epochs {
        if steps >= max_steps {
            break;
        }
        memory.reset();
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for batch in samples.chunks(config.batch) {
            if steps >= max_steps {
                break;
            }
            let mut g = Graph::new();
            let h = model.bind(&mut g, true)?;
            let rows: Vec<f64> = batch.iter().flat_map(|s| s.features.iter().copied()).collect();
            let input = g.constant(Matrix::from_vec(batch.len(), config.input_dim, rows).map_err(|_| {
                Error::shape(
                    "training features",
                    (batch.len(), batch[0].features.len()),
                    (batch.len(), config.input_dim),
                )
            })?);
            let stamps: Vec<f64> = batch.iter().map(|s| s.timestamp).collect();
            let targets = model.targets(batch)?;
            let at_epoch = |e: Error| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch} (step {steps})")),
                other => other,
            };
            let out = model
                .forward(
                    &mut g,
                    &h,
                    input,
                    &stamps,
                    Mode::Train {
                        memory: &mut memory,
                        rng: &mut rng,
                    },
                )
                .map_err(at_epoch)?;
            let parts = pose_loss(&mut g, &out, &targets, h.alpha, h.beta, h.gamma).map_err(at_epoch)?;
            let terms = [
                g.value(parts.total).item(),
                g.value(parts.position).item(),
                g.value(parts.rotation).item(),
                parts.grid.map_or(0.0, |v| g.value(v).item()),
            ];
            if terms.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} (step {steps})")));
            }
            let grads = g.backward(parts.total)?;
            let grads: Vec<Matrix> = trainable.iter().map(|&i| grads.wrt(h.vars[i])).collect();
            let mut values: Vec<Matrix> = trainable
                .iter()
                .map(|&i| std::mem::replace(&mut model.params[i].value, Matrix::zeros(0, 0)))
                .collect();
            let stepped = adam.step(&mut values, &grads, &decay);
            for (&i, v) in trainable.iter().zip(values) {
                model.params[i].value = v;
            }
            stepped.map_err(at_epoch)?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t * batch.len() as f64;
            }
            seen += batch.len();
            steps += 1;
        }
        if seen == 0 {
            break;
        }
        let n = seen as f64;
        let weight = |name: &str| model.param(name).map_or(0.0, |p| p.value.item());
        let record = LossRecord {
            epoch,
            loss: sums[0] / n,
            pos_term: sums[1] / n,
            rot_term: sums[2] / n,
            grid_term: sums[3] / n,
            alpha: weight("loss.alpha"),
            beta: weight("loss.beta"),
            gamma: weight("loss.gamma"),
        };
        on_epoch(&record);
        log.push(record);
    }

    model.rebuild_memory(&samples)?;
    Ok(TrainOutcome { model, log, steps })
}

/// Writes the loss log as CSV with header
/// `epoch,loss,pos_term,rot_term,grid_term,alpha,beta,gamma`.
pub fn write_loss_log<W: Write>(writer: W, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in log {
        w.serialize(r)
            .map_err(|e| Error::Checkpoint(format!("loss log: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("loss log", e))
}
