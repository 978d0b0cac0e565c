//! Two-phase SGD training of the toy model: normal training up to the fine-tune start, then
//! progressive instance balancing until the final iteration.

use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OpisError, Result};
use crate::rng::{stream, Purpose};
use crate::sampler::{Hyperparams, Phase, ScheduleState};

use super::model::{accumulate_param_grads, forward, ToyModel};
use super::pipeline::{build_supervision, scene_logit_grads, scene_loss, Method, SupervisionContext};
use super::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning-rate multiplier applied from the fine-tune start on.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fine-tuning starts at `round(finetune_fraction * iterations)`.
    pub finetune_fraction: f64,
    pub num_branches: usize,
    pub init_std: f64,
    pub hyper: Hyperparams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            method: Method::Opis,
            iterations: 4000,
            batch_size: 2,
            base_lr: 0.1,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            finetune_fraction: 0.78,
            num_branches: 3,
            init_std: 0.01,
            hyper: Hyperparams::default(),
        }
    }
}

impl TrainConfig {
    pub fn finetune_start(&self) -> usize {
        (self.finetune_fraction * self.iterations as f64).round() as usize
    }

    pub fn final_iteration(&self) -> usize {
        self.iterations.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.iterations < 2 || self.batch_size == 0 || self.num_branches == 0 {
            return invalid("iterations >= 2, batch_size >= 1 and num_branches >= 1 required");
        }
        if self.finetune_start() >= self.final_iteration() {
            return invalid(format!(
                "fine-tune start {} must precede the final iteration {}",
                self.finetune_start(),
                self.final_iteration()
            ));
        }
        let positive = [self.base_lr, self.lr_decay, self.init_std];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return invalid("base_lr, lr_decay and init_std must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return invalid("momentum must lie in [0, 1) and weight_decay be >= 0");
        }
        Ok(())
    }

    pub fn schedule(&self, iteration: usize) -> ScheduleState {
        ScheduleState {
            iteration,
            finetune_start: self.finetune_start(),
            final_iteration: self.final_iteration(),
            hyper: self.hyper,
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration >= self.finetune_start() {
            self.base_lr * self.lr_decay
        } else {
            self.base_lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub phase: Phase,
    pub progress: Option<f64>,
    pub mu: Option<f64>,
    pub zeta_mean: f64,
    pub loss_midn: f64,
    pub loss_ref: Vec<f64>,
    pub pos_count: usize,
    pub neg_count_before: usize,
    pub neg_count_after: usize,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<IterationLog>,
    /// Branch supervisions that went through instance balancing.
    pub pib_invocations: usize,
    /// Branch supervisions whose positives were reweighted.
    pub pir_invocations: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn csv_header(num_branches: usize) -> String {
        let mut cols = vec!["iteration", "phase", "T", "mu", "zeta_mean", "loss_midn"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend((1..=num_branches).map(|k| format!("loss_ref_{k}")));
        cols.extend(["pos_count", "neg_count_before", "neg_count_after"].map(String::from));
        cols.join(",")
    }

    /// Deterministic per-iteration log. Wall-clock times go to [`TrainLog::write_timing_csv`].
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = self.rows.first().map_or(0, |r| r.loss_ref.len());
        writeln!(w, "{}", Self::csv_header(k))?;
        for r in &self.rows {
            let refs: Vec<String> = r.loss_ref.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.phase.as_str(),
                opt(r.progress),
                opt(r.mu),
                r.zeta_mean,
                r.loss_midn,
                refs.join(","),
                r.pos_count,
                r.neg_count_before,
                r.neg_count_after
            )?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,wallclock_ms")?;
        for r in &self.rows {
            writeln!(w, "{},{:.3}", r.iteration, r.wallclock_ms)?;
        }
        Ok(())
    }
}

/// Scene index visited at batch slot `slot` of iteration `iteration`: epochs are independent
/// seeded permutations of the dataset.
struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    fn scene_at(&mut self, position: usize) -> usize {
        let epoch = position / self.len;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut stream(self.seed, Purpose::BatchOrder, &[epoch as u64]));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().unwrap().1[position % self.len]
    }
}

pub fn train(config: &TrainConfig, dataset: &[Scene]) -> Result<(ToyModel, TrainLog)> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| OpisError::InvalidInput("empty dataset".into()))?;
    let (num_classes, dim) = (first.label.num_classes(), first.features.ncols());
    let mut model = ToyModel::init(num_classes, dim, config.num_branches, config.init_std, config.seed)?;
    let mut velocity = model.zeros_like();
    let mut order = BatchOrder { seed: config.seed, len: dataset.len(), epoch: None };
    let mut log = TrainLog::default();
    let start = Instant::now();

    for iteration in 0..config.iterations {
        let schedule = config.schedule(iteration);
        let ctx = SupervisionContext { method: config.method, schedule, seed: config.seed };
        let mut grad = model.zeros_like();
        let scale = 1.0 / config.batch_size as f64;
        let mut row = IterationLog {
            iteration,
            phase: schedule.phase(),
            progress: schedule.progress()?,
            mu: schedule.ratio()?.filter(|_| config.method.uses_pib()),
            zeta_mean: 0.0,
            loss_midn: 0.0,
            loss_ref: vec![0.0; config.num_branches],
            pos_count: 0,
            neg_count_before: 0,
            neg_count_after: 0,
            wallclock_ms: 0.0,
        };

        let (mut zeta_sum, mut zeta_count) = (0.0, 0usize);
        for slot in 0..config.batch_size {
            let scene = &dataset[order.scene_at(iteration * config.batch_size + slot)];
            if scene.label.present().next().is_none() {
                continue;
            }
            // parameters are finite here, so a failing forward pass means overflowing logits
            let scores = forward(&model, scene).map_err(|e| OpisError::Numerical {
                iteration,
                detail: format!("scene {}: {e}", scene.id),
            })?;
            let sup = build_supervision(scene, &scores, &ctx)?;
            let loss = scene_loss(scene, &scores, &sup)?;
            if !loss.total.is_finite() {
                return Err(OpisError::Numerical {
                    iteration,
                    detail: format!(
                        "scene {} loss midn={} refinement={:?}; image scores {:?}",
                        scene.id, loss.midn, loss.refinement, scores.image_scores
                    ),
                });
            }
            let logit_grads = scene_logit_grads(scene, &scores, &sup)?;
            accumulate_param_grads(&mut grad, &logit_grads, scene, scale);

            row.loss_midn += scale * loss.midn;
            for (acc, l) in row.loss_ref.iter_mut().zip(&loss.refinement) {
                *acc += scale * l;
            }
            for b in &sup {
                zeta_sum += b.zeta;
                zeta_count += 1;
                row.pos_count += b.targets.count(|t| t.selected && matches!(t.status, crate::Status::Positive(_)));
                row.neg_count_before += b.negatives_before;
                row.neg_count_after += b.targets.count(|t| t.selected && t.status == crate::Status::Negative);
                log.pib_invocations += b.pib_applied as usize;
                log.pir_invocations += b.pir_applied as usize;
            }
        }

        row.zeta_mean = if zeta_count > 0 { zeta_sum / zeta_count as f64 } else { 1.0 };

        // weight decay on weights only, then momentum SGD
        for (g, p) in grad.heads_mut().zip(model.heads()) {
            g.weight.scaled_add(config.weight_decay, &p.weight);
        }
        velocity.scale(config.momentum);
        velocity.scaled_add(config.learning_rate(iteration), &grad);
        model.scaled_add(-1.0, &velocity);
        if !model.is_finite() {
            return Err(OpisError::Numerical {
                iteration,
                detail: "non-finite parameters after update".into(),
            });
        }
        row.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
        log.rows.push(row);
    }
    Ok((model, log))
}
