//! Stage-I adversarial training of a conditional generator under channel
//! penalization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, BCE_EPS};
use crate::costmodel::{mac_factors, uniform_factors, CostVector};
use crate::dataio::{stack_batch, PairedSample, Report};
use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, INIT_STD};
use crate::optim::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
use crate::penalize::{
    calibrate_alpha, channel_importance, penalized_layer_ids, penalty_on_tape, FactorSource, PenalizationConfig,
};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_L1: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub lambda_l1: f64,
    /// `None` trains without penalization.
    pub penal: Option<PenalizationConfig>,
    pub halve_discriminator: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            lambda_l1: DEFAULT_LAMBDA_L1,
            penal: Some(PenalizationConfig::default()),
            halve_discriminator: true,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda_l1 > 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!("lambda_l1 must be positive, got {}", self.lambda_l1)));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if let Some(p) = &self.penal {
            p.validate()?;
        }
        Ok(())
    }
}

/// Loss components of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GanBatchLoss {
    pub gan_g: f64,
    pub gan_d: f64,
    pub l1: f64,
    pub penal: f64,
    pub total_g: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: GanBatchLoss,
    pub alpha: f64,
    pub near_zero_fraction: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 9] =
    ["epoch", "step", "gan_g", "gan_d", "l1", "penal", "total_g", "near_zero_fraction", "alpha"];

pub fn train_log_report(rows: &[LogRow]) -> Report {
    let mut r = Report::new(&TRAIN_LOG_HEADER);
    for row in rows {
        let l = &row.loss;
        r.push(vec![
            row.epoch.to_string(),
            row.step.to_string(),
            l.gan_g.to_string(),
            l.gan_d.to_string(),
            l.l1.to_string(),
            l.penal.to_string(),
            l.total_g.to_string(),
            row.near_zero_fraction.to_string(),
            row.alpha.to_string(),
        ]);
    }
    r
}

/// State handed to the per-epoch hook.
pub struct EpochState<'a> {
    pub epoch: usize,
    pub generator: &'a NetworkGraph,
    pub discriminator: &'a NetworkGraph,
    pub g_opt: &'a AdamState,
    pub d_opt: &'a AdamState,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub generator: NetworkGraph,
    pub discriminator: NetworkGraph,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    /// Calibrated (or configured) coefficient; 0 without penalization.
    pub alpha: f64,
    pub factors: Option<CostVector>,
    pub log: Vec<LogRow>,
}

/// (g_loss, d_loss) with the non-saturating generator loss −mean log D(G(x))
/// and the halved discriminator loss.
pub fn gan_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(f64, f64)> {
    for (name, t) in [("d_real", d_real), ("d_fake", d_fake)] {
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("{name} value {bad} outside [0, 1]")));
        }
    }
    let clamp = |v: f32| (v as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
    let mean =
        |t: &Tensor, f: &dyn Fn(f64) -> f64| t.data().iter().map(|&v| f(clamp(v))).sum::<f64>() / t.numel() as f64;
    let log_real = mean(d_real, &|p| p.ln());
    let log_not_fake = mean(d_fake, &|p| (1.0 - p).ln());
    let g = -mean(d_fake, &|p| p.ln());
    Ok((g, -0.5 * (log_real + log_not_fake)))
}

/// Fraction of prunable-layer channels whose gamma is below
/// `rel_threshold` × the largest gamma of their layer.
pub fn near_zero_fraction(graph: &NetworkGraph, rel_threshold: f64) -> f64 {
    let mut total = 0usize;
    let mut small = 0usize;
    for id in penalized_layer_ids(graph) {
        let imp = channel_importance(graph, id).expect("prunable layers exist");
        let max = imp.gamma.iter().copied().fold(0.0, f64::max);
        total += imp.gamma.len();
        small += imp.gamma.iter().filter(|&&g| g < rel_threshold * max).count();
    }
    if total == 0 {
        0.0
    } else {
        small as f64 / total as f64
    }
}

pub fn init_weights(graph: &mut NetworkGraph, rng: &mut ChaCha8Rng) {
    graph.init_normal(rng, INIT_STD);
}

/// Generator and discriminator initialized from one seeded stream, generator first.
pub fn init_pair(generator: &mut NetworkGraph, discriminator: &mut NetworkGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_weights(generator, &mut rng);
    init_weights(discriminator, &mut rng);
}

pub(crate) fn first_non_finite(tensors: &[(&str, &Tensor)]) -> Result<()> {
    for (name, t) in tensors {
        t.check_finite(name)?;
    }
    Ok(())
}

pub(crate) fn check_loss(step: usize, parts: &[(&str, f64)], tensors: &[(&str, &Tensor)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    first_non_finite(tensors).map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
    let (name, v) = parts.iter().find(|(_, v)| !v.is_finite()).expect("some part is non-finite");
    Err(Error::NonFinite(format!("step {step}: loss term {name} = {v}")))
}

/// Moves tape gradients into the graph's weights and takes one Adam step.
pub(crate) fn update(
    graph: &mut NetworkGraph,
    tape: &mut Tape,
    params: &[Var],
    opt: &mut AdamState,
    step: usize,
    what: &str,
) -> Result<()> {
    for (i, &p) in params.iter().enumerate() {
        let grad = tape.take_grad(p).unwrap_or_else(|| vec![0.0; graph.weights()[i].numel()]);
        if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step}: gradient of {what} layer {} at index {j}",
                graph.layers()[i].id
            )));
        }
        graph.weights_mut()[i].set_grad(grad)?;
    }
    adam_step(graph.weights_mut(), opt)?;
    for w in graph.weights_mut() {
        w.clear_grad();
    }
    Ok(())
}

/// One discriminator update on (condition, real) vs (condition, fake). Returns the loss.
pub(crate) fn discriminator_step(
    d: &mut NetworkGraph,
    d_opt: &mut AdamState,
    cond: &Tensor,
    real: &Tensor,
    fake: &Tensor,
    halve: bool,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = d.register(&mut tape, true);
    let x = tape.constant(cond.clone());
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let real_in = tape.concat_channels(&[x, r])?;
    let fake_in = tape.concat_channels(&[x, f])?;
    let d_real = d.forward_on(&mut tape, real_in, &params)?;
    let d_fake = d.forward_on(&mut tape, fake_in, &params)?;
    let ones = tape.constant(Tensor::full(tape.value(d_real).shape(), 1.0));
    let zeros = tape.constant(Tensor::zeros(tape.value(d_fake).shape()));
    let lr = tape.bce_loss(d_real, ones)?;
    let lf = tape.bce_loss(d_fake, zeros)?;
    let scale = if halve { 0.5 } else { 1.0 };
    let loss = tape.weighted_sum(&[(lr, scale), (lf, scale)])?;
    let value = tape.scalar(loss);
    check_loss(
        step,
        &[("gan_d", value)],
        &[("discriminator real score", tape.value(d_real)), ("discriminator fake score", tape.value(d_fake))],
    )?;
    tape.backward(loss)?;
    update(d, &mut tape, &params, d_opt, step, "discriminator")?;
    Ok(value)
}

/// −mean log D(cond, fake) with the discriminator frozen on `tape`.
pub(crate) fn adversarial_term(tape: &mut Tape, d: &NetworkGraph, cond: Var, fake: Var) -> Result<Var> {
    let d_params = d.register(tape, false);
    let input = tape.concat_channels(&[cond, fake])?;
    let score = d.forward_on(tape, input, &d_params)?;
    let ones = tape.constant(Tensor::full(tape.value(score).shape(), 1.0));
    tape.bce_loss(score, ones)
}

pub(crate) fn check_dataset(dataset: &[PairedSample], generator: &NetworkGraph) -> Result<usize> {
    let first = dataset.first().ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let (_, c, h, w) = first.mask.dims4()?;
    if h != w {
        return Err(Error::Config(format!("samples must be square, got {h}x{w}")));
    }
    if c != generator.input_channels() {
        return Err(Error::Config(format!(
            "samples have {c} mask channels, generator takes {}",
            generator.input_channels()
        )));
    }
    if let Some(i) =
        dataset.iter().position(|s| s.mask.shape() != first.mask.shape() || s.image.shape() != first.mask.shape())
    {
        return Err(Error::Config(format!("sample {i} differs in shape from sample 0")));
    }
    Ok(h)
}

pub(crate) fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Stage-I training with cost factors derived from the configuration
/// (MAC or uniform) and no epoch hook.
pub fn stage1_train(
    generator: NetworkGraph,
    discriminator: NetworkGraph,
    dataset: &[PairedSample],
    config: &TrainConfig,
) -> Result<Stage1Output> {
    stage1_train_with(generator, discriminator, dataset, config, None, &mut |_| Ok(()))
}

/// Stage-I training. `factors` overrides the configured factor source, which
/// is required for latency factors. `on_epoch` runs after every epoch.
pub fn stage1_train_with(
    mut generator: NetworkGraph,
    mut discriminator: NetworkGraph,
    dataset: &[PairedSample],
    config: &TrainConfig,
    factors: Option<CostVector>,
    on_epoch: &mut dyn FnMut(&EpochState) -> Result<()>,
) -> Result<Stage1Output> {
    config.validate()?;
    let size = check_dataset(dataset, &generator)?;
    if discriminator.input_channels() != 2 * generator.input_channels() {
        return Err(Error::Config(format!(
            "discriminator takes {} channels, expected condition + image = {}",
            discriminator.input_channels(),
            2 * generator.input_channels()
        )));
    }
    let factors = match (&config.penal, factors) {
        (None, _) => None,
        (Some(_), Some(f)) => Some(f),
        (Some(p), None) => Some(match p.layer_factor_source {
            FactorSource::Mac => mac_factors(&generator, size)?,
            FactorSource::Uniform => uniform_factors(&generator),
            FactorSource::Latency => {
                return Err(Error::Config("latency factors must be profiled and passed in explicitly".into()))
            }
        }),
    };
    let mut alpha = match &config.penal {
        None => Some(0.0),
        Some(p) => p.alpha,
    };
    let mut g_opt = AdamState::for_params(generator.weights(), config.learning_rate);
    let mut d_opt = AdamState::for_params(discriminator.weights(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        for batch in epoch_batches(&mut rng, dataset.len(), config.batch_size) {
            step += 1;
            let (cond, real) = stack_batch(dataset, &batch)?;

            // Generator forward, kept on its tape for the generator update.
            let mut tape = Tape::new();
            let g_params = generator.register(&mut tape, true);
            let x = tape.constant(cond.clone());
            let y = tape.constant(real.clone());
            let fake = generator.forward_on(&mut tape, x, &g_params)?;
            first_non_finite(&[("generator output", tape.value(fake))])
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;

            let fake_value = tape.value(fake).clone();
            let gan_d = discriminator_step(
                &mut discriminator,
                &mut d_opt,
                &cond,
                &real,
                &fake_value,
                config.halve_discriminator,
                step,
            )?;

            let gan_g = adversarial_term(&mut tape, &discriminator, x, fake)?;
            let l1 = tape.l1_loss(fake, y)?;
            let mut terms = vec![(gan_g, 1.0), (l1, config.lambda_l1)];
            let mut penal_value = 0.0;
            if let (Some(p), Some(f)) = (&config.penal, &factors) {
                let penal = penalty_on_tape(&generator, &mut tape, &g_params, f, p.strategy)?;
                penal_value = tape.scalar(penal);
                let a = match alpha {
                    Some(a) => a,
                    None => {
                        let a =
                            calibrate_alpha(penal_value, config.lambda_l1 * tape.scalar(l1), p.target_ratio, p.regime)?;
                        alpha = Some(a);
                        a
                    }
                };
                terms.push((penal, a));
            }
            let total = tape.weighted_sum(&terms)?;
            let loss = GanBatchLoss {
                gan_g: tape.scalar(gan_g),
                gan_d,
                l1: tape.scalar(l1),
                penal: penal_value,
                total_g: tape.scalar(total),
            };
            check_loss(
                step,
                &[("gan_g", loss.gan_g), ("l1", loss.l1), ("penal", loss.penal), ("total_g", loss.total_g)],
                &[("generator output", tape.value(fake))],
            )?;
            tape.backward(total)?;
            update(&mut generator, &mut tape, &g_params, &mut g_opt, step, "generator")?;
            log.push(LogRow {
                epoch,
                step,
                loss,
                alpha: alpha.unwrap_or(0.0),
                near_zero_fraction: near_zero_fraction(&generator, 0.01),
            });
        }
        on_epoch(&EpochState {
            epoch,
            generator: &generator,
            discriminator: &discriminator,
            g_opt: &g_opt,
            d_opt: &d_opt,
            alpha: alpha.unwrap_or(0.0),
        })?;
    }
    Ok(Stage1Output { generator, discriminator, g_opt, d_opt, alpha: alpha.unwrap_or(0.0), factors, log })
}

/// Mean l1 between generator outputs and targets over `samples`.
pub fn heldout_l1(generator: &NetworkGraph, samples: &[PairedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("held-out set is empty".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let out = generator.forward(&s.mask)?;
        let sum: f64 = out.data().iter().zip(s.image.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        total += sum / out.numel() as f64;
    }
    Ok(total / samples.len() as f64)
}
