//! The staged training loop: micro-batches, gradient accumulation, AdamW
//! updates restricted to each stage's trainable set, and metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::evaluate;
use crate::encoder::{mask_for_mlm, mlm_loss, BoundModel, EncoderConfig, ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::mcqa::{assemble, task_loss, Exemplar, ForwardOptions, Transcript};
use crate::numerics::{Grads, Graph, ParamId, Var};
use crate::rng::Stream;
use crate::training::optim::AdamW;
use crate::training::plan::{PretrainTarget, Stage, StageConfig, TrainPlan, Variant};
use crate::tsaatt::{pretrain_loss, AcousticFrames, TsaattVars};

/// Model weights plus the stage history that produced them.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub completed: Vec<Stage>,
    /// Optimizer updates taken across all stages.
    pub step: u64,
    pub variant: Variant,
    pub transcript: Transcript,
}

impl TrainState {
    pub fn new(config: &EncoderConfig, variant: Variant, transcript: Transcript, seed: u64) -> Result<Self> {
        Ok(TrainState {
            params: ModelParams::init(config, Stream::new(seed).derive("init"))?,
            completed: Vec::new(),
            step: 0,
            variant,
            transcript,
        })
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    /// Stages run at most once, in the fixed order. Acoustic pretraining
    /// needs trained token embeddings, finetuning needs the warm-up, and
    /// the text-only variant has no acoustic stage.
    pub fn check_can_run(&self, stage: Stage) -> Result<()> {
        if let Some(last) = self.completed.last() {
            if *last >= stage {
                return Err(Error::StageOrder(format!(
                    "{stage} cannot run after {last} (order is mlm, tsaatt, warmup, finetune)"
                )));
            }
        }
        match stage {
            Stage::Tsaatt if self.variant == Variant::Vanilla => {
                Err(Error::StageOrder("the vanilla variant has no tsaatt stage".into()))
            }
            Stage::Tsaatt if !self.has_completed(Stage::Mlm) => Err(Error::StageOrder(
                "tsaatt pretraining needs trained token embeddings: run mlm first".into(),
            )),
            Stage::Finetune if !self.has_completed(Stage::Warmup) => {
                Err(Error::StageOrder("finetune requires a completed warmup".into()))
            }
            _ => Ok(()),
        }
    }

    /// Forward options for the task stages and for evaluation after them.
    pub fn forward_options(&self, stage: Stage) -> ForwardOptions {
        let acoustics = stage == Stage::Finetune && self.variant == Variant::Aebert;
        ForwardOptions {
            transcript: self.transcript,
            acoustics,
        }
    }

    /// Options a finished model is evaluated with.
    pub fn eval_options(&self, transcript: Transcript) -> ForwardOptions {
        let acoustics = self.variant == Variant::Aebert && self.has_completed(Stage::Finetune);
        ForwardOptions { transcript, acoustics }
    }

    pub fn trainable(&self, stage: Stage) -> Vec<ParamId> {
        let groups: &[ParamGroup] = match (stage, self.variant) {
            (Stage::Mlm, _) => &[ParamGroup::Embeddings, ParamGroup::Encoder, ParamGroup::MlmHead],
            (Stage::Tsaatt, _) => &[ParamGroup::Acoustic],
            (Stage::Warmup, _) | (Stage::Finetune, Variant::Vanilla) => {
                &[ParamGroup::Embeddings, ParamGroup::Encoder, ParamGroup::ScoreHead]
            }
            (Stage::Finetune, Variant::Aebert) => &[
                ParamGroup::Embeddings,
                ParamGroup::Encoder,
                ParamGroup::ScoreHead,
                ParamGroup::Acoustic,
            ],
        };
        self.params
            .store
            .ids()
            .filter(|id| groups.contains(&self.params.group(*id)))
            .collect()
    }
}

/// One line of a metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    /// Loss of one micro-batch. `step` counts micro-batches within the
    /// stage; `update` is the number of optimizer updates applied so far.
    Step {
        stage: Stage,
        epoch: usize,
        step: u64,
        update: u64,
        loss: f64,
    },
    Epoch {
        stage: Stage,
        epoch: usize,
        train_loss: f64,
        dev_accuracy: Option<f64>,
    },
}

/// Mean loss of the first `n` micro-steps of `stage`.
pub fn first_steps_mean(log: &[MetricRecord], stage: Stage, n: usize) -> Option<f64> {
    let losses: Vec<f64> = log
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Step { stage: s, loss, .. } if *s == stage => Some(*loss),
            _ => None,
        })
        .take(n)
        .collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn epoch_losses(log: &[MetricRecord], stage: Stage) -> Vec<f64> {
    log.iter()
        .filter_map(|r| match r {
            MetricRecord::Epoch { stage: s, train_loss, .. } if *s == stage => Some(*train_loss),
            _ => None,
        })
        .collect()
}

pub fn final_dev_accuracy(log: &[MetricRecord]) -> Option<f64> {
    log.iter().rev().find_map(|r| match r {
        MetricRecord::Epoch { dev_accuracy, .. } => *dev_accuracy,
        _ => None,
    })
}

pub struct StageData<'a> {
    pub train: &'a [Exemplar],
    /// Evaluated after every epoch of the task stages; may be empty.
    pub dev: &'a [Exemplar],
}

/// Accuracy of `params` on `exemplars`.
pub fn accuracy_of(params: &ModelParams, exemplars: &[Exemplar], opts: ForwardOptions) -> Result<f64> {
    Ok(evaluate(exemplars, |pqc| params.predict(pqc, opts))?.accuracy)
}

/// Runs one stage to completion and returns its metrics.
pub fn run_stage(
    state: &mut TrainState,
    stage: Stage,
    data: &StageData,
    plan: &TrainPlan,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    state.check_can_run(stage)?;
    plan.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput(format!("{stage}: empty training set")));
    }
    let cfg = *plan.stage(stage);
    let root = Stream::new(seed).derive(stage.name());
    let trainable = state.trainable(stage);
    let opts = state.forward_options(stage);
    let vocab = state.params.config().vocab_size;
    let max_len = state.params.config().max_len;
    let dropout = if stage == Stage::Tsaatt { 0.0 } else { state.params.config().dropout };
    let target = plan.pretrain_target;

    let mask_stream = root.derive("mask");
    let loss_fn = |g: &mut Graph, m: &BoundModel, batch: &[&Exemplar], step: u64| -> Result<Var> {
        let mut parts = Vec::with_capacity(batch.len());
        match stage {
            Stage::Mlm => {
                for (i, ex) in batch.iter().enumerate() {
                    let input = assemble(&ex.pqc, ex.answer, plan.mlm_transcript, max_len)?;
                    let mut rng = mask_stream.index(step).index(i as u64).rng();
                    let seq = mask_for_mlm(&input.token_ids, &input.segment_ids, vocab, &mut rng)?;
                    parts.push(mlm_loss(g, m, &seq)?);
                }
            }
            Stage::Tsaatt => return tsaatt_batch_loss(g, m, batch, target),
            Stage::Warmup | Stage::Finetune => {
                for ex in batch {
                    parts.push(task_loss(g, m, ex, opts)?);
                }
            }
        }
        g.mean(&parts)
    };
    let eval_dev = matches!(stage, Stage::Warmup | Stage::Finetune) && !data.dev.is_empty();

    let log = train_loop(state, stage, &cfg, plan, data, &trainable, root, dropout, loss_fn, |p| {
        if eval_dev {
            accuracy_of(p, data.dev, opts).map(Some)
        } else {
            Ok(None)
        }
    })?;
    state.completed.push(stage);
    Ok(log)
}

fn tsaatt_batch_loss(g: &mut Graph, m: &BoundModel, batch: &[&Exemplar], target: PretrainTarget) -> Result<Var> {
    let mut frames: Vec<&AcousticFrames> = Vec::new();
    let mut ids: Vec<Option<usize>> = Vec::new();
    for ex in batch {
        let p = &ex.pqc;
        for f in std::iter::once(&p.passage).chain(std::iter::once(&p.question)).chain(&p.choices) {
            frames.extend(f.frames.iter());
            let t = match target {
                PretrainTarget::True => &f.true_ids,
                PretrainTarget::Asr => &f.asr_ids,
            };
            ids.extend(t.iter().map(|&t| Some(t)));
        }
    }
    let vars = TsaattVars::from_bound(&m.layout.tsaatt, &m.bound);
    let targets = g.gather_rows(m.var(m.layout.emb.token), &ids)?;
    pretrain_loss(g, &vars, &frames, targets)
}

#[allow(clippy::too_many_arguments)]
fn train_loop<L, E>(
    state: &mut TrainState,
    stage: Stage,
    cfg: &StageConfig,
    plan: &TrainPlan,
    data: &StageData,
    trainable: &[ParamId],
    root: Stream,
    dropout: f64,
    loss_fn: L,
    eval: E,
) -> Result<Vec<MetricRecord>>
where
    L: Fn(&mut Graph, &BoundModel, &[&Exemplar], u64) -> Result<Var>,
    E: Fn(&ModelParams) -> Result<Option<f64>>,
{
    let mut is_trainable = vec![false; state.params.store.len()];
    for id in trainable {
        is_trainable[id.0] = true;
    }
    let mut opt = AdamW::new(plan.optimizer, &state.params.store);
    let mut grads = Grads::new(&state.params.store);
    let mut log = Vec::new();
    let mut micro: u64 = 0;
    let mut updates: u64 = 0;
    let order_stream = root.derive("order");
    let dropout_stream = root.derive("dropout");

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut order_stream.index(epoch as u64).rng());
        let mut pending = 0usize;
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let last = batches.len() - 1;
        for (b, chunk) in batches.into_iter().enumerate() {
            let batch: Vec<&Exemplar> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut g = if dropout > 0.0 {
                Graph::training(dropout_stream.index(micro), dropout)
            } else {
                Graph::new()
            };
            let m = state.params.bind(&mut g, |id| is_trainable[id.0]);
            let loss = loss_fn(&mut g, &m, &batch, micro)?;
            g.check_finite(loss, &format!("{stage} loss at micro-step {micro}"))?;
            let value = g.value(loss).item();
            g.backward(loss)?;
            m.bound.accumulate_grads(&g, &mut grads);
            drop(g);
            pending += 1;
            epoch_loss += value;
            epoch_batches += 1;
            if pending == cfg.accumulation || b == last {
                grads.scale(1.0 / pending as f64);
                opt.step(&mut state.params.store, &grads, trainable, cfg.lr)?;
                grads.clear();
                pending = 0;
                updates += 1;
                state.step += 1;
            }
            log.push(MetricRecord::Step {
                stage,
                epoch,
                step: micro,
                update: updates,
                loss: value,
            });
            micro += 1;
        }
        log.push(MetricRecord::Epoch {
            stage,
            epoch,
            train_loss: epoch_loss / epoch_batches as f64,
            dev_accuracy: eval(&state.params)?,
        });
    }
    Ok(log)
}
