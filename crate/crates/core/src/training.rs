//! Training procedures: replay-based continual learning, fine-tuning and
//! joint training, all evaluated into a [`RunReport`].

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffer::{CbrsBuffer, DualStageBuffer, ReplayMemory, ReservoirBuffer, StoredSample};
use crate::config::{BufferChoice, Method, RunConfig};
use crate::dataset::RawDataset;
use crate::domains::{make_domain_sequence, DomainDataset, DomainSplit};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, measure_timing, AccuracyMatrix, LossEntry, RunReport, Timing};
use crate::model::{forward_on_tape, Model, ModelSpec, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::tensor::{OptimizerState, Tape, Tensor};

/// Per-class loss weights of one combined batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights {
    pub weights: Vec<f64>,
}

impl BatchWeights {
    pub fn uniform(classes: usize) -> Self {
        BatchWeights {
            weights: vec![1.0; classes],
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.weights.iter().map(|&w| w as f32).collect()
    }
}

/// `W_i = n * C / n_i`; classes absent from the batch get 0.
pub fn compute_class_weights(labels: &[usize], classes: usize) -> Result<BatchWeights> {
    if labels.is_empty() {
        return Err(Error::invariant("class weights of an empty batch"));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::invariant(format!("label {l} with {classes} classes")));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let weights = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n * classes as f64 / c as f64 })
        .collect();
    Ok(BatchWeights { weights })
}

/// Replay draw size for a new batch of `batch` samples: `round(ratio * batch)`.
pub fn replay_size(ratio: f64, batch: usize) -> usize {
    (ratio * batch as f64).round() as usize
}

/// What happened inside the training loop, in order.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    /// A replay draw of `requested` samples returned `returned`
    /// (`None` = empty memory).
    ReplayDrawn {
        requested: usize,
        returned: Option<usize>,
    },
    /// One optimizer step on `new_samples + replayed` examples.
    Step {
        new_samples: usize,
        replayed: usize,
        loss: f64,
    },
    /// New-batch samples handed to the memory.
    BufferAdd { domain_id: u8, samples: Vec<StoredSample> },
    EpochEnd { domain_id: Option<u8>, epoch: usize, mean_loss: f64 },
}

/// Hook for instrumentation; sees the memory after each event.
pub trait TrainObserver {
    fn on_event(&mut self, event: &TrainEvent, memory: Option<&dyn ReplayMemory>);
}

/// Ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_event(&mut self, _: &TrainEvent, _: Option<&dyn ReplayMemory>) {}
}

/// Records every event.
#[derive(Default)]
pub struct EventLog {
    pub events: Vec<TrainEvent>,
}

impl TrainObserver for EventLog {
    fn on_event(&mut self, event: &TrainEvent, _: Option<&dyn ReplayMemory>) {
        self.events.push(event.clone());
    }
}

/// Independent seeds for model init, shuffling and the memory.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_memory(cfg: &RunConfig) -> Option<Box<dyn ReplayMemory + Send>> {
    let seed = derive_seed(cfg.seed, 2);
    match cfg.buffer_kind() {
        BufferChoice::Dual => Some(Box::new(DualStageBuffer::with_policy(
            cfg.buffer_size / NUM_CLASSES,
            NUM_CLASSES,
            seed,
            cfg.replacement,
        ))),
        BufferChoice::Reservoir => Some(Box::new(ReservoirBuffer::new(cfg.buffer_size, seed))),
        BufferChoice::Cbrs => Some(Box::new(CbrsBuffer::new(cfg.buffer_size, NUM_CLASSES, seed))),
        BufferChoice::None | BufferChoice::Auto => None,
    }
}

/// `[N,1,28,28]` batch and labels.
fn stack(samples: &[&StoredSample]) -> (Tensor<f32>, Vec<usize>) {
    let mut data = Vec::with_capacity(samples.len() * IMAGE_PIXELS);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    let t = Tensor::new(vec![samples.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("image size");
    (t, samples.iter().map(|s| s.label as usize).collect())
}

/// Mutable state of one run: model, optimizer, memory and shuffle RNG.
pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    optimizer: OptimizerState,
    memory: Option<Box<dyn ReplayMemory + Send>>,
    rng: ChaCha8Rng,
    loss_log: Vec<LossEntry>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(ModelSpec::new(cfg.architecture), derive_seed(cfg.seed, 1));
        let optimizer = OptimizerState::new(cfg.optimizer, cfg.learning_rate as f32, model.parameters());
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            optimizer,
            memory: build_memory(cfg),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3)),
            loss_log: Vec::new(),
        })
    }

    /// Replaces the replay memory, e.g. with an instrumented double.
    pub fn with_memory(mut self, memory: Option<Box<dyn ReplayMemory + Send>>) -> Self {
        self.memory = memory;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn memory(&self) -> Option<&dyn ReplayMemory> {
        self.memory.as_deref().map(|m| m as &dyn ReplayMemory)
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn loss_log(&self) -> &[LossEntry] {
        &self.loss_log
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn step(&mut self, batch: &[&StoredSample]) -> Result<f64> {
        let (images, labels) = stack(batch);
        let weights = if self.cfg.uses_weighted_loss() {
            compute_class_weights(&labels, NUM_CLASSES)?
        } else {
            BatchWeights::uniform(NUM_CLASSES)
        };
        let mut tape = Tape::<f32>::new();
        let params = self.model.record_parameters(&mut tape, true);
        let x = tape.leaf(images);
        let logits = forward_on_tape(self.model.spec(), &mut tape, &params, x)?;
        let loss = tape.weighted_softmax_cross_entropy(logits, &labels, &weights.as_f32())?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss became {value}")));
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|&p| tape.take_grad(p).expect("parameters are grad leaves"))
            .collect();
        self.optimizer.step(self.model.parameters_mut(), &grads)?;
        Ok(value)
    }

    /// Epoch loop over one domain's training split, with replay around each step.
    pub fn train_domain(&mut self, domain: &DomainDataset, observer: &mut dyn TrainObserver) -> Result<()> {
        if self.cfg.reset_optimizer_per_domain {
            self.optimizer.reset();
        }
        let id = domain.id();
        let split = &domain.train;
        let mut order: Vec<usize> = (0..split.len()).collect();
        for epoch in 1..=self.cfg.epochs_per_domain {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let new: Vec<StoredSample> = chunk
                    .iter()
                    .map(|&i| StoredSample::new(Arc::clone(&split.images[i]), split.labels[i], id, i as u64))
                    .collect();
                let replay = match self.memory.as_mut() {
                    Some(mem) => {
                        let requested = replay_size(self.cfg.replay_ratio, new.len());
                        let drawn = if requested > 0 { mem.get_sample(requested) } else { None };
                        observer.on_event(
                            &TrainEvent::ReplayDrawn {
                                requested,
                                returned: drawn.as_ref().map(Vec::len),
                            },
                            Some(mem.as_ref()),
                        );
                        drawn.unwrap_or_default()
                    }
                    None => Vec::new(),
                };
                let combined: Vec<&StoredSample> = new.iter().chain(replay.iter()).collect();
                let loss = self.step(&combined)?;
                observer.on_event(
                    &TrainEvent::Step {
                        new_samples: new.len(),
                        replayed: replay.len(),
                        loss,
                    },
                    self.memory(),
                );
                if let Some(mem) = self.memory.as_mut() {
                    mem.add_batch(&new);
                    observer.on_event(
                        &TrainEvent::BufferAdd {
                            domain_id: id,
                            samples: new,
                        },
                        Some(mem.as_ref()),
                    );
                }
                total += loss;
                steps += 1;
            }
            let mean_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
            self.loss_log.push(LossEntry {
                epoch,
                domain_id: Some(id),
                mean_loss,
            });
            observer.on_event(
                &TrainEvent::EpochEnd {
                    domain_id: Some(id),
                    epoch,
                    mean_loss,
                },
                self.memory(),
            );
        }
        Ok(())
    }

    /// Single phase over the shuffled union of every domain's training split.
    pub fn train_joint(&mut self, domains: &[DomainDataset], observer: &mut dyn TrainObserver) -> Result<()> {
        let pool: Vec<StoredSample> = domains
            .iter()
            .flat_map(|d| {
                (0..d.train.len())
                    .map(move |i| StoredSample::new(Arc::clone(&d.train.images[i]), d.train.labels[i], d.id(), i as u64))
            })
            .collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        for epoch in 1..=self.cfg.epochs_per_domain {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&StoredSample> = chunk.iter().map(|&i| &pool[i]).collect();
                let loss = self.step(&batch)?;
                observer.on_event(
                    &TrainEvent::Step {
                        new_samples: batch.len(),
                        replayed: 0,
                        loss,
                    },
                    None,
                );
                total += loss;
                steps += 1;
            }
            let mean_loss = if steps == 0 { 0.0 } else { total / steps as f64 };
            self.loss_log.push(LossEntry {
                epoch,
                domain_id: None,
                mean_loss,
            });
            observer.on_event(
                &TrainEvent::EpochEnd {
                    domain_id: None,
                    epoch,
                    mean_loss,
                },
                None,
            );
        }
        Ok(())
    }

    /// Test accuracy (%) of the current model on `split`.
    pub fn evaluate(&self, split: &DomainSplit) -> Result<f64> {
        evaluate(&self.model, split, self.cfg.eval_batch_size)
    }
}

/// Test accuracy (%) of `model` on `split`, in batches of `batch_size`.
pub fn evaluate(model: &Model, split: &DomainSplit, batch_size: usize) -> Result<f64> {
    let mut predictions = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(split.len());
        let mut data = Vec::with_capacity((end - start) * IMAGE_PIXELS);
        for img in &split.images[start..end] {
            data.extend_from_slice(img);
        }
        let x = Tensor::new(vec![end - start, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
        predictions.extend(model.predict(&x)?.labels);
    }
    accuracy(&predictions, &split.labels)
}

/// Report plus the trained model.
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
}

fn domain_names(domains: &[DomainDataset]) -> Vec<String> {
    domains.iter().map(|d| d.name().to_string()).collect()
}

fn finish(
    cfg: &RunConfig,
    trainer: Trainer,
    matrix: AccuracyMatrix,
    timing: Timing,
) -> Result<RunOutcome> {
    let spec = trainer.model().spec().clone();
    let buffer_memory_bytes = trainer.memory().map_or(0, |m| m.memory_bytes());
    let loss_log = trainer.loss_log().to_vec();
    let model = trainer.into_model();
    let parameter_count = model.count_parameters();
    let mut report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        matrix,
        average_accuracy: 0.0,
        average_forgetting: 0.0,
        average_forgetting_excluding_last: 0.0,
        parameter_count,
        model_size_bytes: 4 * parameter_count as u64,
        peak_memory_bytes: spec.memory_bytes(),
        flops: spec.count_flops(),
        buffer_memory_bytes,
        loss_log,
        warnings: spec.warnings(),
        timing: Some(timing),
    };
    report.summarize()?;
    Ok(RunOutcome { report, model })
}

/// Sequential training over `domains`, evaluating every seen domain after each.
/// Replay and loss follow the configuration; without a memory this is fine-tuning.
pub fn run_continual_on(
    cfg: &RunConfig,
    domains: &[DomainDataset],
    observer: &mut dyn TrainObserver,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut matrix = AccuracyMatrix::new(domain_names(domains));
    let mut timing = Timing::default();
    for (t, domain) in domains.iter().enumerate() {
        let (res, secs) = measure_timing(|| trainer.train_domain(domain, observer));
        res?;
        timing.train_seconds.push(secs);
        let (row, secs) = measure_timing(|| {
            domains[..=t]
                .iter()
                .map(|d| trainer.evaluate(&d.test))
                .collect::<Result<Vec<f64>>>()
        });
        let row = row?;
        timing.inference_seconds.push(secs);
        log::info!(
            "{} seed {}: after {} accuracies {:?}",
            cfg.method,
            cfg.seed,
            domain.name(),
            row
        );
        matrix.push_row(row)?;
    }
    finish(cfg, trainer, matrix, timing)
}

/// Sequential training with no memory and the unweighted loss unless overridden.
pub fn run_finetune_on(
    cfg: &RunConfig,
    domains: &[DomainDataset],
    observer: &mut dyn TrainObserver,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg)?.with_memory(None);
    let mut matrix = AccuracyMatrix::new(domain_names(domains));
    let mut timing = Timing::default();
    for (t, domain) in domains.iter().enumerate() {
        let (res, secs) = measure_timing(|| trainer.train_domain(domain, observer));
        res?;
        timing.train_seconds.push(secs);
        let (row, secs) = measure_timing(|| {
            domains[..=t]
                .iter()
                .map(|d| trainer.evaluate(&d.test))
                .collect::<Result<Vec<f64>>>()
        });
        timing.inference_seconds.push(secs);
        matrix.push_row(row?)?;
    }
    finish(cfg, trainer, matrix, timing)
}

/// One phase on the union of all domains, then one evaluation row.
pub fn run_joint_on(
    cfg: &RunConfig,
    domains: &[DomainDataset],
    observer: &mut dyn TrainObserver,
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(cfg)?.with_memory(None);
    let mut timing = Timing::default();
    let (res, secs) = measure_timing(|| trainer.train_joint(domains, observer));
    res?;
    timing.train_seconds.push(secs);
    let (row, secs) = measure_timing(|| {
        domains
            .iter()
            .map(|d| trainer.evaluate(&d.test))
            .collect::<Result<Vec<f64>>>()
    });
    timing.inference_seconds.push(secs);
    let matrix = AccuracyMatrix::from_rows(domain_names(domains), vec![row?])?;
    finish(cfg, trainer, matrix, timing)
}

/// Dispatches on `cfg.method`.
pub fn run_on(cfg: &RunConfig, domains: &[DomainDataset], observer: &mut dyn TrainObserver) -> Result<RunOutcome> {
    match cfg.method {
        Method::Joint => run_joint_on(cfg, domains, observer),
        Method::Finetune => run_finetune_on(cfg, domains, observer),
        Method::PneumonetFull | Method::Er | Method::Cbrs => run_continual_on(cfg, domains, observer),
    }
}

/// The five-domain benchmark for `cfg`, with training splits capped at
/// `max_train_per_domain` when it is non-zero.
pub fn build_domains(raw: &RawDataset, cfg: &RunConfig) -> Vec<DomainDataset> {
    let mut domains = make_domain_sequence(raw, &cfg.transforms, cfg.domain_seed, cfg.merge_val);
    if cfg.max_train_per_domain > 0 {
        for d in &mut domains {
            d.train.truncate(cfg.max_train_per_domain);
        }
    }
    domains
}

/// Loads `cfg.data`, builds the domains and runs `cfg.method`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let raw = RawDataset::load(&cfg.data)?;
    run_on(cfg, &build_domains(&raw, cfg), &mut NoObserver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{DomainKind, DomainSpec, TransformParams};

    #[test]
    fn class_weight_examples() {
        let mut labels = vec![0usize; 8];
        labels.extend([1, 1]);
        assert_eq!(compute_class_weights(&labels, 2).unwrap().weights, vec![2.5, 10.0]);
        let balanced: Vec<usize> = (0..32).map(|i| i % 2).collect();
        assert_eq!(compute_class_weights(&balanced, 2).unwrap().weights, vec![4.0, 4.0]);
        assert_eq!(compute_class_weights(&[0; 8], 2).unwrap().weights, vec![2.0, 0.0]);
        assert!(compute_class_weights(&[], 2).is_err());
        assert!(compute_class_weights(&[2], 2).is_err());
    }

    #[test]
    fn replay_size_rounds() {
        assert_eq!(replay_size(1.0, 32), 32);
        assert_eq!(replay_size(0.5, 32), 16);
        assert_eq!(replay_size(1.5, 5), 8);
        assert_eq!(replay_size(0.0, 32), 0);
    }

    fn toy_domains(n: usize) -> Vec<DomainDataset> {
        DomainKind::SEQUENCE[..2]
            .iter()
            .map(|&kind| {
                let split = |salt: usize| DomainSplit {
                    images: (0..n)
                        .map(|i| {
                            let v = if i % 2 == 1 { 0.8 } else { 0.2 };
                            let px: Vec<f32> = (0..IMAGE_PIXELS)
                                .map(|p| v + 0.01 * ((p + i + salt) % 5) as f32)
                                .collect();
                            Arc::from(px)
                        })
                        .collect(),
                    labels: (0..n).map(|i| (i % 2) as u8).collect(),
                };
                DomainDataset {
                    spec: DomainSpec::new(kind, TransformParams::default()),
                    train: split(0),
                    test: split(1),
                }
            })
            .collect()
    }

    fn small_cfg() -> RunConfig {
        RunConfig::default()
            .with_overrides(&["epochs_per_domain=2", "batch_size=8", "buffer_size=40"])
            .unwrap()
    }

    #[test]
    fn first_batch_has_no_replay_then_equal_sizes() {
        let mut log = EventLog::default();
        run_on(&small_cfg(), &toy_domains(20), &mut log).unwrap();
        let steps: Vec<(usize, usize)> = log
            .events
            .iter()
            .filter_map(|e| match e {
                TrainEvent::Step { new_samples, replayed, .. } => Some((*new_samples, *replayed)),
                _ => None,
            })
            .collect();
        assert_eq!(steps[0], (8, 0));
        assert_eq!(steps[1], (8, 8));
        // last partial batch of an epoch is kept
        assert_eq!(steps[2].0, 4);
        assert_eq!(steps.len(), 2 * 2 * 3);
    }

    #[test]
    fn joint_and_finetune_shapes() {
        let domains = toy_domains(16);
        let joint = run_on(&small_cfg().with_overrides(&["method=joint"]).unwrap(), &domains, &mut NoObserver).unwrap();
        assert_eq!(joint.report.matrix.rows.len(), 1);
        assert_eq!(joint.report.average_forgetting, 0.0);
        let ft = run_on(&small_cfg().with_overrides(&["method=finetune"]).unwrap(), &domains, &mut NoObserver).unwrap();
        assert_eq!(ft.report.buffer_memory_bytes, 0);
        assert_eq!(ft.report.matrix.rows.len(), 2);
        assert_eq!(ft.report.loss_log.len(), 4);
    }

    #[test]
    fn same_seed_same_report() {
        let domains = toy_domains(12);
        let a = run_on(&small_cfg(), &domains, &mut NoObserver).unwrap().report;
        let b = run_on(&small_cfg(), &domains, &mut NoObserver).unwrap().report;
        assert_eq!(a.deterministic_json(), b.deterministic_json());
    }
}
