//! Seeded training loop, evaluation and multi-seed experiments.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::{augment_batch, rotate_image, DataError, Example, ShiftedShapes, UnlabeledSet, NUM_ROTATIONS};
use crate::losses::{
    consistency_loss, entropy_loss, main_loss, pretext_loss, total_loss, LossBreakdown, LossError, LossParts,
    LossWeights,
};
use crate::network::{stack_images, ArchSpec, MultiHeadNet, NetError};

/// Seed of the rotations used when measuring pretext accuracy.
const EVAL_ROTATION_SEED: u64 = 0x5eed_0a7e;
const EVAL_CHUNK: usize = 200;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("evaluation example {0} has no label")]
    UnlabeledEval(usize),
    #[error("{params} parameters but {grads} gradients")]
    GradCount { params: usize, grads: usize },
}

impl TrainError {
    /// True for failures caused by NaN or infinite values.
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Tensor(e) | TrainError::Loss(LossError::Tensor(e)) | TrainError::Net(NetError::Tensor(e)) => {
                matches!(e, TensorError::NonFinite { .. })
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_source: usize,
    pub batch_size_target: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: usize,
    /// Abort on the first NaN or infinity.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size_source: 64,
            batch_size_target: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 1,
            strict: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size_source == 0 || self.batch_size_target == 0 || self.eval_every == 0 {
            return bad("epochs, batch sizes and eval_every must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        self.weights.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub seed: u64,
    pub loss_main: f64,
    pub loss_pretext: f64,
    pub loss_consistency: f64,
    pub loss_entropy: f64,
    pub loss_total: f64,
    pub target_accuracy: f64,
    pub pretext_accuracy: f64,
    pub wall_time_s: f64,
}

// ----- optimizer ---------------------------------------------------------

/// SGD with heavy-ball momentum: `v = momentum * v + g; p = p - lr * v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, momentum: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::GradCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != g.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_update",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

// ----- one step ----------------------------------------------------------

/// Target images paired with their rotations.
#[derive(Clone, Debug)]
pub struct TargetPairs<'a> {
    pub originals: Vec<&'a Tensor>,
    pub rotated: Vec<Tensor>,
    pub rot_labels: Vec<u8>,
}

/// Draws one rotation per target image. Rejects labeled target examples.
pub fn augment_targets<'a, R: Rng + ?Sized>(target: &'a [Example], rng: &mut R) -> Result<TargetPairs<'a>, TrainError> {
    UnlabeledSet::from_examples(target)?;
    let aug = augment_batch(target, rng)?;
    let (rotated, rot_labels) = aug
        .rotated
        .into_iter()
        .map(|e| (e.image, e.rot_label.expect("augment_batch sets rotation labels")))
        .unzip();
    Ok(TargetPairs {
        originals: target.iter().map(|e| &e.image).collect(),
        rotated,
        rot_labels,
    })
}

/// Builds the full objective for one mini-batch and returns its value
/// breakdown together with the gradient of every parameter.
///
/// The encoder runs once over `[source; target originals; target
/// rotations]` and the outputs are split by row.
pub fn compute_gradients(
    net: &MultiHeadNet,
    source: &[Example],
    pairs: &TargetPairs<'_>,
    weights: &LossWeights,
    strict: bool,
) -> Result<(LossBreakdown, Vec<Tensor>), TrainError> {
    let labels = source
        .iter()
        .map(|e| e.label.ok_or(TrainError::Config("source example without label".into())))
        .collect::<Result<Vec<_>, _>>()?;
    let (ns, nt) = (source.len(), pairs.originals.len());
    if ns == 0 || nt == 0 || pairs.rotated.len() != nt {
        return Err(LossError::EmptyBatch.into());
    }
    let mut tape = Tape::new();
    tape.set_strict(strict);
    let bound = net.bind(&mut tape, true);

    let images: Vec<&Tensor> = source
        .iter()
        .map(|e| &e.image)
        .chain(pairs.originals.iter().copied())
        .chain(pairs.rotated.iter())
        .collect();
    let x = tape.constant(stack_images(&images)?);
    let feats = net.encode(&mut tape, &bound, x)?;
    let logits = net.main_logits(&mut tape, &bound, feats)?;
    let src_logits = tape.slice_rows(logits, 0, ns)?;
    let orig_logits = tape.slice_rows(logits, ns, nt)?;
    let rot_logits = tape.slice_rows(logits, ns + nt, nt)?;
    let rot_feats = tape.slice_rows(feats, ns + nt, nt)?;
    let rot_pred = net.pretext_logits(&mut tape, &bound, rot_feats)?;

    let parts = LossParts {
        main: main_loss(&mut tape, src_logits, &labels)?,
        pretext: pretext_loss(&mut tape, rot_pred, &pairs.rot_labels)?,
        consistency: consistency_loss(&mut tape, orig_logits, rot_logits)?,
        entropy: entropy_loss(&mut tape, orig_logits)?,
    };
    let (total, breakdown) = total_loss(&mut tape, &parts, weights)?;
    if !breakdown.l_total.is_finite() {
        return Err(TensorError::NonFinite { op: "total_loss" }.into());
    }
    tape.backward(total)?;
    let grads = bound.vars.iter().map(|&v: &Var| tape.grad_or_zeros(v)).collect();
    Ok((breakdown, grads))
}

/// Augments the target batch, computes the objective and applies one
/// optimizer update to all parameters.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut MultiHeadNet,
    opt: &mut Sgd,
    source: &[Example],
    target: &[Example],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown, TrainError> {
    let pairs = augment_targets(target, rng)?;
    let (breakdown, grads) = compute_gradients(net, source, &pairs, &config.weights, config.strict)?;
    let mut params: Vec<&mut Tensor> = net.params_mut().iter_mut().map(|p| &mut p.value).collect();
    opt.step(&mut params, &grads, config.learning_rate, config.momentum)?;
    Ok(breakdown)
}

// ----- evaluation --------------------------------------------------------

/// Main-head accuracy on `examples` and rotation accuracy on rotated
/// copies. Rotations come from a fixed seed, so repeated calls agree.
pub fn evaluate(net: &MultiHeadNet, examples: &[Example]) -> Result<(f64, f64), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    if let Some(i) = examples.iter().position(|e| e.label.is_none()) {
        return Err(TrainError::UnlabeledEval(i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_ROTATION_SEED);
    let (mut main_hits, mut rot_hits) = (0usize, 0usize);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let turns: Vec<u8> = chunk.iter().map(|_| rng.gen_range(0..NUM_ROTATIONS as u8)).collect();
        let rotated = chunk
            .iter()
            .zip(&turns)
            .map(|(e, &t)| rotate_image(&e.image, t))
            .collect::<Result<Vec<_>, _>>()?;
        let images: Vec<&Tensor> = chunk.iter().map(|e| &e.image).chain(rotated.iter()).collect();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(stack_images(&images)?);
        let feats = net.encode(&mut tape, &bound, x)?;
        let orig = tape.slice_rows(feats, 0, chunk.len())?;
        let rot = tape.slice_rows(feats, chunk.len(), chunk.len())?;
        let main = net.main_logits(&mut tape, &bound, orig)?;
        let pre = net.pretext_logits(&mut tape, &bound, rot)?;
        main_hits += argmax_rows(tape.value(main))
            .zip(chunk)
            .filter(|(p, e)| Some(*p) == e.label)
            .count();
        rot_hits += argmax_rows(tape.value(pre))
            .zip(&turns)
            .filter(|(p, &t)| *p == t as usize)
            .count();
    }
    let n = examples.len() as f64;
    Ok((main_hits as f64 / n, rot_hits as f64 / n))
}

fn argmax_rows(t: &Tensor) -> impl Iterator<Item = usize> + '_ {
    let cols = t.shape()[1];
    t.data().chunks_exact(cols).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    })
}

// ----- full runs ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub net: MultiHeadNet,
}

impl RunResult {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("every run records its last epoch")
    }
}

/// Independent random streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains one network from scratch on `data.source` and the unlabeled
/// `data.target`, measuring on `data.target_eval` every `eval_every`
/// epochs and after the last one.
pub fn train_run(config: &TrainConfig, data: &ShiftedShapes) -> Result<RunResult, TrainError> {
    config.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(TrainError::Config("source and target sets must be non-empty".into()));
    }
    let n_classes = data
        .source
        .iter()
        .chain(&data.target_eval)
        .filter_map(|e| e.label)
        .max()
        .map_or(0, |m| m + 1);
    let image_size = data.source[0].image.shape()[1];
    let mut net = MultiHeadNet::init(config.seed, ArchSpec::with_classes(n_classes, image_size))?;
    let mut opt = Sgd::new();
    let mut source_rng = stream(config.seed, 1);
    let mut target_rng = stream(config.seed, 2);
    let mut aug_rng = stream(config.seed, 3);

    let mut source_order: Vec<usize> = (0..data.source.len()).collect();
    let mut target_order: Vec<usize> = (0..data.target.len()).collect();
    target_order.shuffle(&mut target_rng);
    let mut target_cursor = 0;

    let start = Instant::now();
    let mut records = Vec::new();
    for epoch in 1..=config.epochs {
        source_order.shuffle(&mut source_rng);
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for (step, idx) in source_order.chunks(config.batch_size_source).enumerate() {
            let source: Vec<Example> = idx.iter().map(|&i| data.source[i].clone()).collect();
            let mut target = Vec::with_capacity(config.batch_size_target);
            while target.len() < config.batch_size_target {
                if target_cursor == target_order.len() {
                    target_order.shuffle(&mut target_rng);
                    target_cursor = 0;
                }
                target.push(data.target[target_order[target_cursor]].clone());
                target_cursor += 1;
            }
            let b = train_step(&mut net, &mut opt, &source, &target, config, &mut aug_rng).map_err(|e| {
                if e.is_numerical() {
                    TrainError::NonFinite { epoch, step }
                } else {
                    e
                }
            })?;
            for (s, v) in sums.iter_mut().zip([b.l_main, b.l_pretext, b.l_consistency, b.l_entropy, b.l_total]) {
                *s += v;
            }
            steps += 1;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let (target_accuracy, pretext_accuracy) = evaluate(&net, &data.target_eval)?;
            let m = |i: usize| sums[i] / steps as f64;
            records.push(MetricsRecord {
                epoch,
                seed: config.seed,
                loss_main: m(0),
                loss_pretext: m(1),
                loss_consistency: m(2),
                loss_entropy: m(3),
                loss_total: m(4),
                target_accuracy,
                pretext_accuracy,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(RunResult {
        seed: config.seed,
        records,
        net,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    /// One run per seed, ordered by seed.
    pub runs: Vec<RunResult>,
    pub target_accuracy: MeanStd,
    pub pretext_accuracy: MeanStd,
}

/// Runs `n_seeds` trainings with seeds `config.seed + i`, at most `jobs`
/// at a time.
pub fn run_experiment(config: &TrainConfig, data: &ShiftedShapes, n_seeds: usize, jobs: usize) -> Result<ExperimentSummary, TrainError> {
    if n_seeds == 0 {
        return Err(TrainError::Config("need at least one seed".into()));
    }
    config.validate()?;
    let configs: Vec<TrainConfig> = (0..n_seeds as u64)
        .map(|i| TrainConfig {
            seed: config.seed.wrapping_add(i),
            ..config.clone()
        })
        .collect();
    let runs = run_parallel(&configs, data, jobs)?;
    summarize(runs)
}

/// Trains every config, at most `jobs` concurrently; results keep the
/// input order.
pub fn run_parallel(configs: &[TrainConfig], data: &ShiftedShapes, jobs: usize) -> Result<Vec<RunResult>, TrainError> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    if jobs == 1 {
        return configs.iter().map(|c| train_run(c, data)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(|c| train_run(c, data)).collect())
}

pub fn summarize(runs: Vec<RunResult>) -> Result<ExperimentSummary, TrainError> {
    if runs.is_empty() {
        return Err(TrainError::Config("no runs to summarize".into()));
    }
    let finals = |f: fn(&MetricsRecord) -> f64| runs.iter().map(|r| f(r.final_record())).collect::<Vec<_>>();
    let target_accuracy = MeanStd::of(&finals(|r| r.target_accuracy));
    let pretext_accuracy = MeanStd::of(&finals(|r| r.pretext_accuracy));
    Ok(ExperimentSummary {
        runs,
        target_accuracy,
        pretext_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shifted_shapes, DatasetSpec, Domain, DomainShift};

    fn tiny_data(seed: u64) -> ShiftedShapes {
        generate_shifted_shapes(&DatasetSpec {
            n_source: 40,
            n_target: 40,
            n_classes: 4,
            image_size: 16,
            domain_shift: DomainShift::from_level(0.6),
            seed,
        })
        .unwrap()
    }

    fn tiny_net(seed: u64) -> MultiHeadNet {
        MultiHeadNet::init(
            seed,
            ArchSpec {
                conv_channels: vec![4, 6],
                feature_dim: 12,
                ..ArchSpec::with_classes(4, 16)
            },
        )
        .unwrap()
    }

    #[test]
    fn sgd_without_momentum_is_plain_gradient_step() {
        let mut p = Tensor::from_slice(&[1.0, -2.0, 0.5]);
        let g = Tensor::from_slice(&[0.5, 0.25, -1.0]);
        let mut opt = Sgd::new();
        opt.step(&mut [&mut p], &[g.clone()], 0.1, 0.0).unwrap();
        let want: Vec<f64> = [1.0, -2.0, 0.5].iter().zip(g.data()).map(|(a, b)| a - 0.1 * b).collect();
        assert_eq!(p.data(), &want[..]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let g = Tensor::from_slice(&[1.0, -3.0]);
        let mut p = Tensor::from_slice(&[0.0, 0.0]);
        let mut opt = Sgd::new();
        for _ in 0..2 {
            opt.step(&mut [&mut p], &[g.clone()], 1.0, 0.9).unwrap();
        }
        assert_eq!(p.data(), &[-2.9, 8.7]);
    }

    #[test]
    fn sgd_zero_gradient_and_shape_errors() {
        let mut p = Tensor::from_slice(&[0.3, 0.4]);
        let mut opt = Sgd::new();
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])], 0.5, 0.9).unwrap();
        assert_eq!(p.data(), &[0.3, 0.4]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.5, 0.9).is_err());
        assert!(opt.step(&mut [&mut p], &[], 0.5, 0.9).is_err());
    }

    fn batches(data: &ShiftedShapes) -> (Vec<Example>, Vec<Example>) {
        (data.source[..8].to_vec(), data.target[..8].to_vec())
    }

    #[test]
    fn zero_weights_leave_pretext_head_without_gradient() {
        let data = tiny_data(0);
        let net = tiny_net(1);
        let (s, t) = batches(&data);
        let pairs = augment_targets(&t, &mut stream(0, 3)).unwrap();
        let (_, grads) = compute_gradients(&net, &s, &pairs, &LossWeights::ZERO, true).unwrap();
        for (p, g) in net.params().iter().zip(&grads) {
            if p.name.starts_with("pretext") {
                assert!(g.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_weights_match_source_only_gradients() {
        let data = tiny_data(1);
        let net = tiny_net(2);
        let (s, t) = batches(&data);
        let pairs = augment_targets(&t, &mut stream(0, 3)).unwrap();
        let (b, with_target) = compute_gradients(&net, &s, &pairs, &LossWeights::ZERO, true).unwrap();

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let imgs: Vec<&Tensor> = s.iter().map(|e| &e.image).collect();
        let x = tape.constant(stack_images(&imgs).unwrap());
        let f = net.encode(&mut tape, &bound, x).unwrap();
        let z = net.main_logits(&mut tape, &bound, f).unwrap();
        let labels: Vec<usize> = s.iter().map(|e| e.label.unwrap()).collect();
        let l = main_loss(&mut tape, z, &labels).unwrap();
        assert_eq!(tape.item(l), b.l_main);
        tape.backward(l).unwrap();
        for (v, g) in bound.vars.iter().zip(&with_target) {
            let want = tape.grad_or_zeros(*v);
            for (a, b) in want.data().iter().zip(g.data()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn labeled_target_batch_is_rejected() {
        let data = tiny_data(0);
        let mut net = tiny_net(0);
        let mut opt = Sgd::new();
        let leak = data.target_eval[..4].to_vec();
        let err = train_step(&mut net, &mut opt, &data.source[..4], &leak, &TrainConfig::default(), &mut stream(0, 0));
        assert!(matches!(err, Err(TrainError::Data(DataError::LabelLeak { index: 0 }))));
    }

    #[test]
    fn step_is_deterministic() {
        let data = tiny_data(2);
        let (s, t) = batches(&data);
        let config = TrainConfig::default();
        let run = || {
            let mut net = tiny_net(5);
            let mut opt = Sgd::new();
            train_step(&mut net, &mut opt, &s, &t, &config, &mut stream(9, 3)).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_step_descends_for_most_seeds() {
        let data = tiny_data(3);
        let (s, t) = batches(&data);
        let config = TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut decreased = 0;
        for seed in 0..20 {
            let mut net = tiny_net(100 + seed);
            let rng = stream(seed, 3);
            // Replaying the RNG re-draws the same rotations for the check.
            let pairs = augment_targets(&t, &mut rng.clone()).unwrap();
            let (before, _) = compute_gradients(&net, &s, &pairs, &config.weights, true).unwrap();
            train_step(&mut net, &mut Sgd::new(), &s, &t, &config, &mut rng.clone()).unwrap();
            let (after, _) = compute_gradients(&net, &s, &pairs, &config.weights, true).unwrap();
            decreased += usize::from(after.l_total < before.l_total);
        }
        assert!(decreased >= 18, "{decreased}/20");
    }

    #[test]
    fn evaluation_is_pure_and_near_chance_untrained() {
        let data = generate_shifted_shapes(&DatasetSpec {
            n_source: 5,
            n_target: 2000,
            n_classes: 5,
            image_size: 16,
            domain_shift: DomainShift::from_level(0.6),
            seed: 4,
        })
        .unwrap();
        let mut accs = Vec::new();
        let mut rots = Vec::new();
        for seed in 0..6 {
            let net = MultiHeadNet::init(seed, ArchSpec::with_classes(5, 16)).unwrap();
            let first = evaluate(&net, &data.target_eval).unwrap();
            assert_eq!(first, evaluate(&net, &data.target_eval).unwrap());
            accs.push(first.0);
            rots.push(first.1);
        }
        // A single untrained net may favour one class; averaged over
        // initializations the accuracy sits at chance.
        let acc = MeanStd::of(&accs).mean;
        let rot = MeanStd::of(&rots).mean;
        assert!((acc - 0.2).abs() < 0.05, "{accs:?}");
        assert!((rot - 0.25).abs() < 0.05, "{rots:?}");
        assert!(matches!(evaluate(&tiny_net(0), &[]), Err(TrainError::EmptyEval)));
        assert!(matches!(evaluate(&tiny_net(0), &data.target[..1]), Err(TrainError::UnlabeledEval(0))));
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size_source: 16,
            batch_size_target: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_reproducible_and_records_monotone() {
        let data = tiny_data(5);
        let a = train_run(&quick_config(), &data).unwrap();
        let b = train_run(&quick_config(), &data).unwrap();
        assert_eq!(a.net, b.net);
        let strip = |r: &RunResult| r.records.iter().map(|m| MetricsRecord { wall_time_s: 0.0, ..m.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
        for r in &a.records {
            assert!(r.wall_time_s >= 0.0);
            assert!((0.0..=1.0).contains(&r.target_accuracy) && (0.0..=1.0).contains(&r.pretext_accuracy));
        }
    }

    #[test]
    fn target_labels_cannot_reach_training() {
        // The training split is label-free by construction; attaching
        // the true labels to a copy is rejected rather than used.
        let data = tiny_data(6);
        assert!(data.target.iter().all(|e| e.label.is_none() && e.domain == Domain::Target));
        let mut leaked = data.clone();
        leaked.target = data.target_eval.clone();
        assert!(matches!(
            train_run(&quick_config(), &leaked),
            Err(TrainError::Data(DataError::LabelLeak { .. }))
        ));
        // Changing evaluation labels changes no training quantity.
        let mut relabeled = data.clone();
        for e in &mut relabeled.target_eval {
            e.label = Some((e.label.unwrap() + 1) % 4);
        }
        let a = train_run(&quick_config(), &data).unwrap();
        let b = train_run(&quick_config(), &relabeled).unwrap();
        assert_eq!(a.net, b.net);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.loss_total, y.loss_total);
        }
    }

    #[test]
    fn experiment_summary_statistics() {
        let data = tiny_data(7);
        let one = run_experiment(&quick_config(), &data, 1, 1).unwrap();
        assert_eq!(one.target_accuracy.std, 0.0);

        let three = run_experiment(&quick_config(), &data, 3, 2).unwrap();
        let seeds: Vec<u64> = three.runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2]);
        let finals: Vec<f64> = three.runs.iter().map(|r| r.final_record().target_accuracy).collect();
        let mean = (finals[0] + finals[1] + finals[2]) / 3.0;
        assert!((three.target_accuracy.mean - mean).abs() < 1e-12);

        let serial = run_experiment(&quick_config(), &data, 3, 1).unwrap();
        for (a, b) in three.runs.iter().zip(&serial.runs) {
            assert_eq!(a.net, b.net);
        }
        assert!(run_experiment(&quick_config(), &data, 0, 1).is_err());
    }

    #[test]
    fn mean_std_definition() {
        let s = MeanStd::of(&[1.0, 2.0, 4.0]);
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        let var = ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0;
        assert!((s.std - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { eval_every: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }
}
