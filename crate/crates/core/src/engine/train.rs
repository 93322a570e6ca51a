use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGroup, Tape};
use crate::error::{Error, Result};
use crate::metrics::{batch_scores, EvalRecord, Split};
use crate::models::predict_mask;
use crate::scalar::Real;
use crate::synthdata::{Checkpoint, DataSplits, Dataset};

use super::adamw::AdamW;
use super::losses::segmentation_loss;
use super::trilevel::{stage1_update, stage2_update, stage3_hypergrad, synth_batch, Batch, HyperInputs, Params};
use super::{Mode, Networks, TrainConfig};

/// Largest number of pairs pushed through a network at once during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub dice: f64,
    pub jaccard: f64,
    pub loss: f64,
}

/// Mean per-pair Dice and Jaccard of the segmenter's predictions, and the
/// mean pixel cross-entropy.
pub fn evaluate<T: Real>(nets: &Networks, s: &ParamGroup<T>, data: &Dataset<T>) -> Result<Evaluation> {
    let n = data.len();
    let (mut dice, mut jaccard, mut loss) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let (images, masks) = data.batch(&idx)?;
        let tape = Tape::new();
        let sv = tape.bind(s);
        let logits = nets.seg.forward(&sv, tape.leaf(images.clone()))?;
        let pred = predict_mask(&logits.value())?;
        let (d, j) = batch_scores(&pred, &masks)?;
        let l = segmentation_loss(nets, &tape, &sv, tape.leaf(images), &masks)?.value().item().as_f64();
        dice += d * len as f64;
        jaccard += j * len as f64;
        loss += l * len as f64;
        start += len;
    }
    let n = n as f64;
    Ok(Evaluation { dice: dice / n, jaccard: jaccard / n, loss: loss / n })
}

/// Cycles through a dataset in seeded shuffled passes.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Sampler {
    fn new(n: usize, batch: usize) -> Self {
        Self { order: (0..n).collect(), pos: n, batch }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.order.len();
        if self.batch >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == n {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn to_batch<T: Real>(data: &Dataset<T>, idx: &[usize]) -> Result<Batch<T>> {
    let (images, masks) = data.batch(idx)?;
    Ok(Batch { images, masks })
}

/// Parameters at the best validation Dice seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub params: Params<T>,
    pub iter: usize,
    pub dice: f64,
}

/// Everything the loop carries between iterations.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: Params<T>,
    pub outer: AdamW<T>,
    pub iter: usize,
    pub best: Option<Snapshot<T>>,
    pub loss_g: f64,
    pub loss_d: f64,
}

impl<T: Real> TrainState<T> {
    /// Seeded initialization of all four groups, in the order G and A, H, S.
    pub fn init(nets: &Networks, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params: Params<T> = nets.init(&mut rng);
        let outer = AdamW::for_architecture(params.a.numel(), cfg.eta_a);
        Self { params, outer, iter: 0, best: None, loss_g: f64::NAN, loss_d: f64::NAN }
    }

    fn observe(&mut self, dice: f64) {
        if self.best.as_ref().is_none_or(|b| dice > b.dice) {
            self.best = Some(Snapshot { params: self.params.clone(), iter: self.iter, dice });
        }
    }
}

/// Diagnostics of one genseg iteration.
#[derive(Debug, Clone)]
pub struct IterationReport<T> {
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_seg: f64,
    pub val_loss: f64,
    pub hypergrad: Vec<T>,
}

/// One full genseg iteration: stage 1, synthesis, stage 2, hypergradient,
/// architecture step, then G, H, S advance to their one-step updates.
pub fn genseg_iteration<T: Real>(
    nets: &Networks,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    real: &Batch<T>,
    val: &Batch<T>,
    rng: &mut ChaCha8Rng,
) -> Result<IterationReport<T>> {
    let p = &state.params;
    let st1 = stage1_update(nets, cfg, p, real)?;
    let synth = synth_batch(nets, &st1.g, &p.a, &real.masks, &cfg.augment, rng)?;
    let (s_prime, loss_seg) = stage2_update(nets, &p.s, Some(&synth), Some(real), cfg.gamma, cfg.eta_s)?;
    let inputs = HyperInputs { params: p, g_prime: &st1.g, real, synth_masks: &synth.masks };
    let hyper = stage3_hypergrad(nets, cfg, inputs, &s_prime, val)?;
    let a = state.outer.step(&p.a, &hyper.grad)?;
    state.params = Params { g: st1.g, h: st1.h, s: s_prime, a };
    state.loss_g = st1.loss_g;
    state.loss_d = st1.loss_d;
    Ok(IterationReport { loss_g: st1.loss_g, loss_d: st1.loss_d, loss_seg, val_loss: hyper.val_loss, hypergrad: hyper.grad })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub records: Vec<EvalRecord>,
}

impl<T: Real> TrainOutcome<T> {
    /// Best-validation parameters, or the initialization when no
    /// evaluation happened.
    pub fn best_params(&self) -> &Params<T> {
        self.state.best.as_ref().map_or(&self.state.params, |b| &b.params)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, params: &Params<T>) -> Checkpoint<T> {
        Checkpoint {
            config: cfg.resolved(),
            g: params.g.clone(),
            h: params.h.clone(),
            s: params.s.clone(),
            a: params.a.clone(),
        }
    }
}

/// Runs `cfg.iters` iterations of the configured mode. Validation is
/// scored after every pass over the training set and after the last
/// iteration; the best-Dice parameters are kept. When a test split exists
/// the best parameters are scored on it last.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &DataSplits<T>,
    on_record: &mut dyn FnMut(&EvalRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (h, w) = data.train.extent();
    if h != cfg.img_size || w != cfg.img_size || data.val.extent() != (h, w) {
        return Err(Error::Config(format!(
            "data extent {h}x{w} (val {:?}) does not match img_size {}",
            data.val.extent(),
            cfg.img_size
        )));
    }
    let nets = Networks::new(cfg.model_config())?;
    let mut state = TrainState::init(&nets, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let n_train = data.train.len();
    let batch = cfg.batch_for(n_train);
    let epoch = n_train.div_ceil(batch);
    let mut train_sampler = Sampler::new(n_train, batch);
    let mut val_sampler = Sampler::new(data.val.len(), if data.val.len() <= 32 { data.val.len() } else { batch });
    let gan_iters = if cfg.mode == Mode::Separate { cfg.iters / 2 } else { 0 };

    let mut records = Vec::new();
    let mut emit = |rec: EvalRecord, records: &mut Vec<EvalRecord>| {
        on_record(&rec);
        records.push(rec);
    };

    for it in 0..cfg.iters {
        let real = to_batch(&data.train, &train_sampler.next(&mut rng))?;
        match cfg.mode {
            Mode::GenSeg => {
                let val = to_batch(&data.val, &val_sampler.next(&mut rng))?;
                genseg_iteration(&nets, cfg, &mut state, &real, &val, &mut rng)?;
            }
            Mode::Separate if it < gan_iters => {
                let st1 = stage1_update(&nets, cfg, &state.params, &real)?;
                state.params.g = st1.g;
                state.params.h = st1.h;
                state.loss_g = st1.loss_g;
                state.loss_d = st1.loss_d;
            }
            Mode::Separate => {
                let p = &state.params;
                let synth = synth_batch(&nets, &p.g, &p.a, &real.masks, &cfg.augment, &mut rng)?;
                state.params.s = stage2_update(&nets, &p.s, Some(&synth), Some(&real), cfg.gamma, cfg.eta_s)?.0;
            }
            Mode::Baseline => {
                state.params.s = stage2_update(&nets, &state.params.s, None, Some(&real), 1.0, cfg.eta_s)?.0;
            }
        }
        state.iter = it + 1;
        if state.iter % epoch == 0 || state.iter == cfg.iters {
            let ev = evaluate(&nets, &state.params.s, &data.val)?;
            state.observe(ev.dice);
            let rec = EvalRecord {
                iter: state.iter,
                split: Split::Val,
                dice: ev.dice,
                jaccard: ev.jaccard,
                loss_seg: ev.loss,
                loss_g: state.loss_g,
                loss_d: state.loss_d,
            };
            emit(rec, &mut records);
        }
    }

    if let (Some(test), Some(best)) = (&data.test, &state.best) {
        let ev = evaluate(&nets, &best.params.s, test)?;
        let rec = EvalRecord {
            iter: best.iter,
            split: Split::Test,
            dice: ev.dice,
            jaccard: ev.jaccard,
            loss_seg: ev.loss,
            loss_g: state.loss_g,
            loss_d: state.loss_d,
        };
        emit(rec, &mut records);
    }
    Ok(TrainOutcome { state, records })
}
