//! Full-batch gradient descent with momentum over per-slide tapes.
//!
//! Each slide's forward/backward runs on its own tape and gradients are
//! accumulated at weight `1/B`, which is arithmetically the full-batch
//! gradient of the mean loss while keeping peak memory at one slide's graph.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::cohort::CohortSlide;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::HmkgParams;
use crate::survival::{assign_bin, discretize_time, nll_surv_loss_on_tape, TimeBinning};

/// Seeded uniform init on (-a, a) with a = 1/sqrt(fan_in); fan_in is the row
/// count, matching x W layout.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub binning: Option<TimeBinning>,
}

struct Sgd {
    velocity: Vec<Array2<f64>>,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(shapes: &[(usize, usize)], config: &RunConfig) -> Self {
        Sgd {
            velocity: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        }
    }

    fn step(&mut self, tensors: &mut [(String, &mut Array2<f64>)], grads: &[Array2<f64>]) {
        for (i, (_, tensor)) in tensors.iter_mut().enumerate() {
            let update = &grads[i] + &(&**tensor * self.weight_decay);
            self.velocity[i] = &self.velocity[i] * self.momentum + &update;
            **tensor = &**tensor - &(&self.velocity[i] * self.learning_rate);
        }
    }
}

/// Slides sorted by id with bin-assigned records; training is therefore
/// independent of manifest order.
fn prepared(cohort: &[CohortSlide], t_bins: usize) -> Result<(Vec<CohortSlide>, TimeBinning)> {
    if cohort.is_empty() {
        return Err(Error::Domain("cannot train on an empty cohort".to_string()));
    }
    let mut slides = cohort.to_vec();
    slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let records: Vec<_> = slides.iter().map(|s| s.record.clone()).collect();
    let binning = discretize_time(&records, t_bins)?;
    for slide in &mut slides {
        slide.record.bin = Some(assign_bin(slide.record.time, &binning));
    }
    Ok((slides, binning))
}

/// Fit the model on the given slides; deterministic for a fixed config.
pub fn train(config: &RunConfig, cohort: &[CohortSlide]) -> Result<(HmkgParams, TrainLog)> {
    config.validate()?;
    let (slides, binning) = prepared(cohort, config.dims.t_bins)?;
    let mut params = HmkgParams::init(&config.model_spec())?;
    let shapes: Vec<(usize, usize)> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| (t.nrows(), t.ncols()))
        .collect();
    let mut optimizer = Sgd::new(&shapes, config);
    let batch_weight = 1.0 / slides.len() as f64;
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(config.epochs),
        binning: Some(binning),
    };

    for epoch in 0..config.epochs {
        let mut grads: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        let mut loss_sum = 0.0;
        for slide in &slides {
            let mut tape = Tape::new();
            let vars = params.insert(&mut tape, true);
            let logits = params.forward_logits(&mut tape, &slide.bag, &vars)?;
            let loss =
                nll_surv_loss_on_tape(&mut tape, logits, &slide.record, config.censor_alpha)?;
            loss_sum += tape.value(loss)[[0, 0]];
            tape.backward(loss)?;
            for (i, var) in vars.var_list().iter().enumerate() {
                // A parameter off the loss path (the local readout under
                // set-mode fusion) has zero gradient; leave its slot as is.
                if let Some(grad) = tape.grad(*var) {
                    grads[i].scaled_add(batch_weight, grad);
                }
            }
        }
        let mean_loss = loss_sum * batch_weight;
        if !mean_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("training loss became {mean_loss}"),
            });
        }
        optimizer.step(&mut params.named_tensors_mut(), &grads);
        log.epoch_losses.push(mean_loss);
    }
    Ok((params, log))
}

/// Flat-average baseline: mean of all high-mag features through a linear
/// hazard head. Deliberately blind to geometry and hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolParams {
    /// `[d_high x t_bins]`
    pub w: Array2<f64>,
    /// `[1 x t_bins]`
    pub b: Array2<f64>,
}

impl MeanPoolParams {
    pub fn risk(&self, bag: &crate::features::FeatureBag) -> f64 {
        let n = bag.f_high.nrows() as f64;
        let mean = bag.f_high.sum_axis(ndarray::Axis(0)) / n;
        let logits: Vec<f64> = (0..self.w.ncols())
            .map(|t| mean.dot(&self.w.column(t)) + self.b[[0, t]])
            .collect();
        crate::survival::HazardOutput::from_logits(&logits).risk
    }
}

/// Train the mean-pooling baseline with the same loss and optimizer.
pub fn train_meanpool(
    config: &RunConfig,
    cohort: &[CohortSlide],
) -> Result<(MeanPoolParams, TrainLog)> {
    config.validate()?;
    let (slides, binning) = prepared(cohort, config.dims.t_bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::hashing::stable_hash64(
        config.seed,
        "meanpool-init",
    ));
    let mut params = MeanPoolParams {
        w: init_matrix(&mut rng, config.dims.d_high, config.dims.t_bins),
        b: Array2::zeros((1, config.dims.t_bins)),
    };
    let shapes = [params.w.dim(), params.b.dim()];
    let mut optimizer = Sgd::new(&shapes, config);
    let batch_weight = 1.0 / slides.len() as f64;
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(config.epochs),
        binning: Some(binning),
    };

    for epoch in 0..config.epochs {
        let mut grads = [
            Array2::zeros(params.w.dim()),
            Array2::zeros(params.b.dim()),
        ];
        let mut loss_sum = 0.0;
        for slide in &slides {
            let mut tape = Tape::new();
            let w = tape.leaf(params.w.clone(), true);
            let b = tape.leaf(params.b.clone(), true);
            let f_high = tape.leaf(slide.bag.f_high.clone(), false);
            let mean = tape.mean_rows(f_high)?;
            let scores = tape.matmul(mean, w)?;
            let logits = tape.add(scores, b)?;
            let loss =
                nll_surv_loss_on_tape(&mut tape, logits, &slide.record, config.censor_alpha)?;
            loss_sum += tape.value(loss)[[0, 0]];
            tape.backward(loss)?;
            grads[0].scaled_add(batch_weight, tape.grad(w).expect("trainable"));
            grads[1].scaled_add(batch_weight, tape.grad(b).expect("trainable"));
        }
        let mean_loss = loss_sum * batch_weight;
        if !mean_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("training loss became {mean_loss}"),
            });
        }
        let mut tensors = [
            ("w".to_string(), &mut params.w),
            ("b".to_string(), &mut params.b),
        ];
        optimizer.step(&mut tensors, &grads);
        log.epoch_losses.push(mean_loss);
    }
    Ok((params, log))
}
