//! Stage-II fine-tuning of a pruned student against the frozen condensed teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::dataio::{stack_batch, PairedSample, Report};
use crate::error::{Error, Result};
use crate::netgraph::NetworkGraph;
use crate::optim::{AdamState, DEFAULT_LEARNING_RATE};
use crate::trainer::{
    adversarial_term, check_dataset, check_loss, discriminator_step, epoch_batches, first_non_finite, update,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub weight_gt_l1: f64,
    pub weight_teacher_l1: f64,
    pub weight_gan: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub halve_discriminator: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            weight_gt_l1: 100.0,
            weight_teacher_l1: 100.0,
            weight_gan: 1.0,
            epochs: 1,
            batch_size: 1,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            halve_discriminator: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("weight_gt_l1", self.weight_gt_l1),
            ("weight_teacher_l1", self.weight_teacher_l1),
            ("weight_gan", self.weight_gan),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        if self.weight_gt_l1 + self.weight_teacher_l1 + self.weight_gan <= 0.0 {
            return Err(Error::Config("at least one distillation weight must be positive".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillLoss {
    pub gan_g: f64,
    pub gan_d: f64,
    pub l1: f64,
    pub teacher_l1: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: DistillLoss,
}

pub const DISTILL_LOG_HEADER: [&str; 7] = ["epoch", "step", "gan_g", "gan_d", "l1", "teacher_l1", "total"];

pub fn distill_log_report(rows: &[DistillRow]) -> Report {
    let mut r = Report::new(&DISTILL_LOG_HEADER);
    for row in rows {
        let l = &row.loss;
        r.push(vec![
            row.epoch.to_string(),
            row.step.to_string(),
            l.gan_g.to_string(),
            l.gan_d.to_string(),
            l.l1.to_string(),
            l.teacher_l1.to_string(),
            l.total.to_string(),
        ]);
    }
    r
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub student: NetworkGraph,
    pub discriminator: NetworkGraph,
    pub student_opt: AdamState,
    pub log: Vec<DistillRow>,
}

/// Errors unless `student` matches `teacher` in everything but hidden channel counts.
pub fn check_student(student: &NetworkGraph, teacher: &NetworkGraph) -> Result<()> {
    if !student.same_topology(teacher) {
        return Err(Error::Config("student and teacher differ in topology beyond channel counts".into()));
    }
    let (s, t) = (student.output_layer_id()?, teacher.output_layer_id()?);
    let (so, to) = (student.layer(s).expect("exists").out_ch, teacher.layer(t).expect("exists").out_ch);
    if so != to {
        return Err(Error::Config(format!("student emits {so} channels, teacher {to}")));
    }
    for (a, b) in student.layers().iter().zip(teacher.layers()) {
        if a.out_ch > b.out_ch {
            return Err(Error::Config(format!(
                "student layer {} has {} channels, more than the teacher's {}",
                a.id, a.out_ch, b.out_ch
            )));
        }
    }
    Ok(())
}

pub fn stage2_finetune(
    student: NetworkGraph,
    teacher: &NetworkGraph,
    discriminator: NetworkGraph,
    dataset: &[PairedSample],
    config: &DistillConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    check_student(&student, teacher)?;
    check_dataset(dataset, &student)?;
    let mut student = student;
    let mut discriminator = discriminator;
    let mut s_opt = AdamState::for_params(student.weights(), config.learning_rate);
    let mut d_opt = AdamState::for_params(discriminator.weights(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for batch in epoch_batches(&mut rng, dataset.len(), config.batch_size) {
            step += 1;
            let (cond, real) = stack_batch(dataset, &batch)?;
            let teacher_out = teacher.forward(&cond)?;

            let mut tape = Tape::new();
            let params = student.register(&mut tape, true);
            let x = tape.constant(cond.clone());
            let y = tape.constant(real.clone());
            let t = tape.constant(teacher_out);
            let out = student.forward_on(&mut tape, x, &params)?;
            first_non_finite(&[("student output", tape.value(out)), ("teacher output", tape.value(t))])
                .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;

            let mut loss = DistillLoss::default();
            let mut terms = Vec::new();
            if config.weight_gan > 0.0 {
                let fake = tape.value(out).clone();
                loss.gan_d = discriminator_step(
                    &mut discriminator,
                    &mut d_opt,
                    &cond,
                    &real,
                    &fake,
                    config.halve_discriminator,
                    step,
                )?;
                let g = adversarial_term(&mut tape, &discriminator, x, out)?;
                loss.gan_g = tape.scalar(g);
                terms.push((g, config.weight_gan));
            }
            let gt = tape.l1_loss(out, y)?;
            let tl = tape.l1_loss(out, t)?;
            loss.l1 = tape.scalar(gt);
            loss.teacher_l1 = tape.scalar(tl);
            terms.push((gt, config.weight_gt_l1));
            terms.push((tl, config.weight_teacher_l1));
            let total = tape.weighted_sum(&terms)?;
            loss.total = tape.scalar(total);
            check_loss(
                step,
                &[("gan_g", loss.gan_g), ("l1", loss.l1), ("teacher_l1", loss.teacher_l1), ("total", loss.total)],
                &[("student output", tape.value(out))],
            )?;
            tape.backward(total)?;
            update(&mut student, &mut tape, &params, &mut s_opt, step, "student")?;
            log.push(DistillRow { epoch, step, loss });
        }
    }
    Ok(Stage2Output { student, discriminator, student_opt: s_opt, log })
}
