//! Training loops: supervised, logit distillation into an auxiliary model,
//! and student distillation under every scheduler mode.

use crate::curriculum::{SchedulerMode, WEIGHT_DECAY_FACTOR};
use crate::data::{batches, epoch_rng, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kl_distill_loss, mse_feature_loss, pkt_loss};
use crate::nn::{make_auxiliary, Model, ModelSpec};
use crate::prune::{filter_l1_scores, prune, select_channels, ChannelSelection, KernelView};
use crate::tensor::{Tape, Tensor, Var};

use super::config::{DistillConfig, TargetRule, TaskLoss, TaskMode};
use super::optim::Optimizer;
use super::record::{EpochRecord, RunMetrics};

/// Stream offset separating flip decisions from batch order.
const FLIP_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A trained model with its log and final optimizer state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: RunMetrics,
    pub optimizer: Optimizer,
    /// Per-layer channel selections used for intermediate targets.
    pub selections: Vec<ChannelSelection>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Feature MSE on one layer; only layers up to it are updated.
    Layer(usize),
    /// Final-layer objective over all parameters.
    Final,
    /// Weighted sum of every intermediate MSE plus the final objective.
    Joint { weight: f64 },
}

struct EpochPlan {
    phase: Phase,
    subtask: usize,
    label: String,
}

type Objective<'a> =
    dyn FnMut(&mut Tape, &mut Model, Var, &Tensor, &[usize], Phase) -> Result<Option<(Var, Vec<(usize, Var)>)>> + 'a;

/// Runs `config.epochs` epochs of seeded minibatch training. Gradients of
/// `config.accumulation` consecutive batches are averaged into one optimizer
/// step; a partial group at the end of an epoch is stepped as well.
fn fit(
    model: &mut Model,
    dataset: &Dataset,
    config: &DistillConfig,
    plan: &dyn Fn(usize) -> Result<EpochPlan>,
    objective: &mut Objective<'_>,
) -> Result<(RunMetrics, Optimizer)> {
    let nparams = model.params().len();
    let mut optimizer = Optimizer::new(&config.optimizer, nparams);
    let mut metrics = RunMetrics::default();
    for epoch in 1..=config.epochs {
        let EpochPlan { phase, subtask, label } = plan(epoch)?;
        let lr = config.optimizer.lr_at(epoch);
        let mut flip_rng = config.flip.then(|| epoch_rng(config.seed ^ FLIP_STREAM_SALT, epoch));
        let mut acc: Vec<Option<Vec<f32>>> = vec![None; nparams];
        let mut pending = 0usize;
        let mut loss_sum = 0.0f64;
        let mut counted = 0usize;
        let flush = |acc: &mut Vec<Option<Vec<f32>>>, pending: &mut usize, model: &mut Model, opt: &mut Optimizer| {
            if *pending == 0 {
                return;
            }
            let scale = 1.0 / *pending as f32;
            for g in acc.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(model.params_mut(), acc, lr);
            acc.iter_mut().for_each(|g| *g = None);
            *pending = 0;
        };
        for batch in batches(dataset.len(), config.batch_size, config.seed, epoch) {
            let (images, labels) = dataset.batch(&batch, flip_rng.as_mut())?;
            let mut tape = Tape::new();
            let x = tape.constant(images.clone());
            let Some((loss, params)) = objective(&mut tape, model, x, &images, &labels, phase)? else {
                continue;
            };
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("{label} loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            for (index, var) in params {
                if let Some(g) = tape.take_grad(var) {
                    if !g.all_finite() {
                        return Err(Error::NonFinite(format!("{label} gradient at epoch {epoch}")));
                    }
                    match &mut acc[index] {
                        Some(sum) => sum.iter_mut().zip(g.data()).for_each(|(s, v)| *s += v),
                        slot => *slot = Some(g.into_data()),
                    }
                }
            }
            pending += 1;
            loss_sum += value;
            counted += 1;
            if pending == config.accumulation {
                flush(&mut acc, &mut pending, model, &mut optimizer);
            }
        }
        flush(&mut acc, &mut pending, model, &mut optimizer);
        metrics.push(EpochRecord {
            epoch,
            subtask,
            loss_kind: label,
            loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            lr,
            metric_name: None,
            metric_value: None,
        });
    }
    Ok((metrics, optimizer))
}

fn check_input(reference: &ModelSpec, student: &ModelSpec, dataset: &Dataset) -> Result<()> {
    let [c, h, w] = dataset.image_shape();
    for spec in [reference, student] {
        let i = spec.input;
        if [i.channels, i.height, i.width] != [c, h, w] {
            return Err(Error::Config(format!(
                "model `{}` expects {}x{}x{} inputs but the dataset holds {c}x{h}x{w}",
                spec.name, i.channels, i.height, i.width
            )));
        }
        if spec.num_classes < dataset.classes() {
            return Err(Error::Config(format!(
                "model `{}` has {} outputs for {} classes",
                spec.name,
                spec.num_classes,
                dataset.classes()
            )));
        }
    }
    Ok(())
}

/// Trains `spec` from scratch with cross-entropy.
pub fn train_supervised(spec: ModelSpec, dataset: &Dataset, config: &DistillConfig) -> Result<TrainOutcome> {
    config.validate(None)?;
    check_input(&spec, &spec, dataset)?;
    let mut model = Model::build(spec, config.seed)?;
    let plan = |_epoch: usize| {
        Ok(EpochPlan {
            phase: Phase::Final,
            subtask: 0,
            label: "ce".into(),
        })
    };
    let mut objective = |tape: &mut Tape, m: &mut Model, x: Var, _: &Tensor, labels: &[usize], _: Phase| {
        let out = m.forward(tape, x, None)?;
        let loss = cross_entropy(tape, out.logits.expect("full pass"), labels)?;
        Ok(Some((loss, out.params)))
    };
    let (metrics, optimizer) = fit(&mut model, dataset, config, &plan, &mut objective)?;
    Ok(TrainOutcome {
        model,
        metrics,
        optimizer,
        selections: Vec::new(),
    })
}

/// Eval-mode outputs of a frozen model.
struct ReferenceOutputs {
    features: Vec<Tensor>,
    logits: Option<Tensor>,
}

fn reference_outputs(model: &Model, images: &Tensor, until: Option<usize>) -> Result<ReferenceOutputs> {
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let out = model.forward_eval(&mut tape, x, until)?;
    Ok(ReferenceOutputs {
        features: out.features.iter().map(|v| tape.value(v).clone()).collect(),
        logits: out.logits.map(|v| tape.value(v).clone()),
    })
}

fn flat(t: &Tensor) -> Result<Tensor> {
    let n = t.dim(0);
    t.clone().reshape(vec![n, t.len() / n])
}

/// Trains `aux_spec` from the frozen `teacher` with cross-entropy plus
/// temperature-scaled KL on the logits.
pub fn distill_auxiliary(teacher: &Model, aux_spec: ModelSpec, dataset: &Dataset, config: &DistillConfig) -> Result<TrainOutcome> {
    config.validate(None)?;
    check_input(teacher.spec(), &aux_spec, dataset)?;
    if teacher.spec().num_classes != aux_spec.num_classes {
        return Err(Error::Alignment {
            layer: None,
            msg: "teacher and auxiliary class counts differ".into(),
        });
    }
    let mut model = Model::build(aux_spec, config.seed)?;
    let temperature = config.kd_temperature as f32;
    let plan = |_epoch: usize| {
        Ok(EpochPlan {
            phase: Phase::Final,
            subtask: 0,
            label: "kl+ce".into(),
        })
    };
    let mut objective = |tape: &mut Tape, m: &mut Model, x: Var, images: &Tensor, labels: &[usize], _: Phase| {
        let target = reference_outputs(teacher, images, None)?.logits.expect("full pass");
        let out = m.forward(tape, x, None)?;
        let logits = out.logits.expect("full pass");
        let u = tape.constant(target);
        let kl = kl_distill_loss(tape, u, logits, temperature)?;
        let ce = cross_entropy(tape, logits, labels)?;
        Ok(Some((tape.add(kl, ce)?, out.params)))
    };
    let (metrics, optimizer) = fit(&mut model, dataset, config, &plan, &mut objective)?;
    Ok(TrainOutcome {
        model,
        metrics,
        optimizer,
        selections: Vec::new(),
    })
}

/// Builds the auxiliary architecture for `student_spec` at pruning rate `q`
/// and distills `teacher` into it. Width integrality is checked before any
/// training.
pub fn build_and_distill_auxiliary(
    teacher: &Model,
    student_spec: &ModelSpec,
    q: f64,
    dataset: &Dataset,
    config: &DistillConfig,
) -> Result<TrainOutcome> {
    let aux_spec = make_auxiliary(student_spec, q)?;
    distill_auxiliary(teacher, aux_spec, dataset, config)
}

/// Channel selections mapping the reference's intermediate layers onto the
/// student's widths.
pub fn intermediate_selections(
    reference: &Model,
    student: &ModelSpec,
    rule: TargetRule,
    q: f64,
) -> Result<Vec<ChannelSelection>> {
    let layers = student.feature_layers();
    if reference.spec().feature_layers() != layers {
        return Err(Error::Alignment {
            layer: None,
            msg: format!(
                "reference has {} feature layers, student has {layers}",
                reference.spec().feature_layers()
            ),
        });
    }
    let ref_shapes = reference.spec().feature_shapes()?;
    let stu_shapes = student.feature_shapes()?;
    let mut out = Vec::with_capacity(layers.saturating_sub(1));
    for l in 1..layers {
        let (r, s) = (ref_shapes[l - 1], stu_shapes[l - 1]);
        if r[1..] != s[1..] {
            return Err(Error::Alignment {
                layer: Some(l),
                msg: format!("reference map is {}x{}, student map is {}x{}", r[1], r[2], s[1], s[2]),
            });
        }
        if s[0] > r[0] {
            return Err(Error::Alignment {
                layer: Some(l),
                msg: format!("student width {} exceeds reference width {}", s[0], r[0]),
            });
        }
        let kernel = KernelView::new(reference.layer_weight(l).expect("feature layer weight"))?;
        let drop = r[0] - s[0];
        let sel = match rule {
            TargetRule::L1Pruned => {
                let p = (q * r[0] as f64).round() as usize;
                if p != drop {
                    return Err(Error::Alignment {
                        layer: Some(l),
                        msg: format!(
                            "pruning rate {q} drops {p} of {} channels but the student needs {} kept",
                            r[0], s[0]
                        ),
                    });
                }
                prune(&kernel, p, l)?
            }
            TargetRule::Leading => ChannelSelection {
                layer: l,
                kept: (0..s[0]).collect(),
                scores: filter_l1_scores(&kernel),
            },
        };
        out.push(sel);
    }
    Ok(out)
}

/// Builds a student from `student_spec` (seeded by `config.seed`) and
/// distills the frozen `reference` into it.
pub fn distill_student(reference: &Model, student_spec: ModelSpec, dataset: &Dataset, config: &DistillConfig) -> Result<TrainOutcome> {
    let student = Model::build(student_spec, config.seed)?;
    distill_into(reference, student, dataset, config)
}

/// Distills the frozen `reference` into an existing `student`.
///
/// With intermediate targets, curriculum sub-task `i < L` minimizes the
/// layer-`i` MSE against the reference's selected channels and updates only
/// layers `1..=i`; the last sub-task minimizes the task loss (plus
/// cross-entropy in classification mode) over all parameters.
pub fn distill_into(reference: &Model, mut student: Model, dataset: &Dataset, config: &DistillConfig) -> Result<TrainOutcome> {
    let layers = student.spec().feature_layers();
    config.validate(Some(layers))?;
    check_input(reference.spec(), student.spec(), dataset)?;
    let rule = config.method.target_rule();
    let task = config.method.task_loss(config.task_loss);
    if task == Some(TaskLoss::Okd) && reference.spec().num_classes != student.spec().num_classes {
        return Err(Error::Alignment {
            layer: None,
            msg: "logit distillation needs equal class counts".into(),
        });
    }
    if task == Some(TaskLoss::Pkt) && layers == 0 {
        return Err(Error::Spec("student has no penultimate layer for the task loss".into()));
    }
    let selections = match rule {
        Some(rule) => intermediate_selections(reference, student.spec(), rule, config.q)?,
        None => Vec::new(),
    };
    let schedule = match (rule, config.scheduler) {
        (Some(_), SchedulerMode::Curriculum) => Some(config.schedule(layers)?),
        _ => None,
    };
    let with_ce = config.mode == TaskMode::Classification || task.is_none();
    let final_label = match (task, with_ce) {
        (Some(TaskLoss::Pkt), false) => "pkt".to_string(),
        (Some(TaskLoss::Okd), false) => "kl".to_string(),
        (Some(TaskLoss::Pkt), true) => "pkt+ce".to_string(),
        (Some(TaskLoss::Okd), true) => "kl+ce".to_string(),
        (None, _) => "ce".to_string(),
    };
    let plan = |epoch: usize| -> Result<EpochPlan> {
        if rule.is_none() {
            return Ok(EpochPlan {
                phase: Phase::Final,
                subtask: 0,
                label: final_label.clone(),
            });
        }
        Ok(match config.scheduler {
            SchedulerMode::Curriculum => {
                let i = schedule.as_ref().expect("curriculum schedule").active_subtask(epoch)?;
                if i < layers {
                    EpochPlan {
                        phase: Phase::Layer(i),
                        subtask: i,
                        label: format!("mse{i}"),
                    }
                } else {
                    EpochPlan {
                        phase: Phase::Final,
                        subtask: i,
                        label: final_label.clone(),
                    }
                }
            }
            SchedulerMode::WeightDecay => EpochPlan {
                phase: Phase::Joint {
                    weight: WEIGHT_DECAY_FACTOR.powi(epoch as i32 - 1),
                },
                subtask: 0,
                label: format!("mse-wd+{final_label}"),
            },
            SchedulerMode::None => EpochPlan {
                phase: Phase::Joint { weight: 1.0 },
                subtask: 0,
                label: format!("mse-all+{final_label}"),
            },
        })
    };
    let temperature = config.kd_temperature as f32;
    let mut objective = |tape: &mut Tape, m: &mut Model, x: Var, images: &Tensor, labels: &[usize], phase: Phase| {
        if let Phase::Layer(i) = phase {
            let r = reference_outputs(reference, images, Some(i))?;
            let target = select_channels(&r.features[i - 1], &selections[i - 1])?;
            let out = m.forward(tape, x, Some(i))?;
            let t = tape.constant(target);
            let loss = mse_feature_loss(tape, t, out.features.get(i).expect("layer captured"))?;
            return Ok(Some((loss, out.params)));
        }
        if task == Some(TaskLoss::Pkt) && labels.len() < 2 {
            return Ok(None);
        }
        let joint = match phase {
            Phase::Joint { weight } => Some(weight),
            _ => None,
        };
        let r = if task.is_some() || joint.is_some() {
            Some(reference_outputs(reference, images, None)?)
        } else {
            None
        };
        let out = m.forward(tape, x, None)?;
        let mut terms = Vec::new();
        if let (Some(weight), Some(r)) = (joint, &r) {
            for (sel, (feat, var)) in selections.iter().zip(r.features.iter().zip(out.features.iter())) {
                let t = tape.constant(select_channels(feat, sel)?);
                let mse = mse_feature_loss(tape, t, var)?;
                terms.push(tape.scale(mse, weight as f32));
            }
        }
        match (task, &r) {
            (Some(TaskLoss::Pkt), Some(r)) => {
                let ft = tape.constant(flat(r.features.last().expect("penultimate"))?);
                let penult = out.features.last().expect("penultimate");
                let fs = if tape.shape(penult).len() > 2 { tape.flatten(penult) } else { penult };
                terms.push(pkt_loss(tape, ft, fs)?);
            }
            (Some(TaskLoss::Okd), Some(r)) => {
                let u = tape.constant(r.logits.clone().expect("full pass"));
                terms.push(kl_distill_loss(tape, u, out.logits.expect("full pass"), temperature)?);
            }
            _ => {}
        }
        if with_ce {
            terms.push(cross_entropy(tape, out.logits.expect("full pass"), labels)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(Some((loss, out.params)))
    };
    let (metrics, optimizer) = fit(&mut student, dataset, config, &plan, &mut objective)?;
    Ok(TrainOutcome {
        model: student,
        metrics,
        optimizer,
        selections,
    })
}
