//! Sync pretraining and the alternating discriminator / generator loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::diffcore::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::histmatch::loss_un2;
use crate::lossstack::{
    lsgan_discriminator_loss, lsgan_generator_loss, perception_loss, sync_loss, sync_score, total_loss, LossParts,
};
use crate::nn::{Bound, ParamSet};
use crate::synthdata::{make_sample, mouth_crop, Dataset, FrameSample, Sequence, MASK_ROW, SIZE};
use crate::uncertainty::{error_map, loss_un1, predicted_error_loss, uncert_forward, ErrorMap};

use super::adam::Adam;
use super::eval::{evaluate, EvalSet, Metrics};
use super::model::ModelBundle;

/// Minimum frame offset of a misaligned sync pair.
pub const MIN_SYNC_OFFSET: usize = 3;
const SYNC_BATCH: usize = 32;
const SYNC_HELDOUT_PAIRS: usize = 512;
const SYNC_CALIBRATION_PAIRS: usize = 1024;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn grads_for(grads: &Gradients, bound: &Bound, params: &ParamSet) -> Vec<Tensor> {
    bound.vars().iter().zip(params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect()
}

fn norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
}

fn finite(g: &Graph, v: Var, term: &str) -> Result<f64> {
    let x = g.item(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerics { term: term.into() })
    }
}

/// A sync training or evaluation pair: window of frame `t` with the crop of frame `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncPair {
    pub t: usize,
    pub u: usize,
}

impl SyncPair {
    pub fn aligned(&self) -> bool {
        self.t == self.u
    }
}

/// Aligned pair with probability ½, otherwise a pair at least [`MIN_SYNC_OFFSET`] frames apart.
pub fn draw_sync_pair(len: usize, rng: &mut impl Rng) -> SyncPair {
    let t = rng.gen_range(0..len);
    if rng.gen_bool(0.5) {
        return SyncPair { t, u: t };
    }
    loop {
        let u = rng.gen_range(0..len);
        if u.abs_diff(t) >= MIN_SYNC_OFFSET {
            return SyncPair { t, u };
        }
    }
}

fn pair_score(g: &Graph, bundle: &ModelBundle, p: &Bound, seq: &Sequence, pair: SyncPair) -> Result<Var> {
    let window = g.constant(seq.window(pair.t));
    let crop = g.constant(mouth_crop(&seq.frames[pair.u]));
    sync_score(g, &bundle.sync, p, window, crop)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncReport {
    /// Held-out accuracy of the untrained net at threshold ½.
    pub initial_accuracy: f64,
    /// Decision threshold on the score, fitted on training-identity pairs.
    pub threshold: f64,
    /// Held-out accuracy at `threshold`.
    pub accuracy: f64,
    /// Fraction of held-out frames whose aligned score beats a misaligned one.
    pub aligned_wins: f64,
    pub final_loss: f64,
}

/// Threshold maximising accuracy of `score > threshold ⇔ aligned`; midpoints
/// between consecutive sorted scores are the candidates.
pub fn best_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut correct = sorted.iter().filter(|s| s.1).count() as i64;
    let mut best = (correct, sorted.first().map_or(0.5, |s| s.0 - 1e-9));
    for (i, &(score, aligned)) in sorted.iter().enumerate() {
        correct += if aligned { -1 } else { 1 };
        let next = sorted.get(i + 1).map_or(score + 1e-9, |s| s.0);
        if correct > best.0 && next > score {
            best = (correct, 0.5 * (score + next));
        }
    }
    best.1
}

fn mismatched_pair(len: usize, t: usize, rng: &mut impl Rng) -> SyncPair {
    loop {
        let u = rng.gen_range(0..len);
        if u.abs_diff(t) >= MIN_SYNC_OFFSET {
            return SyncPair { t, u };
        }
    }
}

/// Held-out classification accuracy (score > `threshold` means aligned) and aligned-vs-misaligned win rate.
pub fn sync_accuracy(bundle: &ModelBundle, seq: &Sequence, seed: u64, threshold: f64) -> Result<(f64, f64)> {
    let mut rng = stream_rng(seed, 7);
    let mut correct = 0;
    let mut wins = 0;
    for _ in 0..SYNC_HELDOUT_PAIRS {
        let g = Graph::new();
        let p = bundle.sync_params.bind(&g, false);
        let pair = draw_sync_pair(seq.len(), &mut rng);
        let s = g.item(pair_score(&g, bundle, &p, seq, pair)?)?;
        if (s > threshold) == pair.aligned() {
            correct += 1;
        }
        let mis = mismatched_pair(seq.len(), pair.t, &mut rng);
        let aligned = g.item(pair_score(&g, bundle, &p, seq, SyncPair { t: pair.t, u: pair.t })?)?;
        if aligned > g.item(pair_score(&g, bundle, &p, seq, mis)?)? {
            wins += 1;
        }
    }
    let n = SYNC_HELDOUT_PAIRS as f64;
    Ok((correct as f64 / n, wins as f64 / n))
}

fn calibrate(bundle: &ModelBundle, data: &Dataset, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 5);
    let mut scored = Vec::with_capacity(SYNC_CALIBRATION_PAIRS);
    for _ in 0..SYNC_CALIBRATION_PAIRS {
        let g = Graph::new();
        let p = bundle.sync_params.bind(&g, false);
        let seq = &data.train[rng.gen_range(0..data.train.len())];
        let pair = draw_sync_pair(seq.len(), &mut rng);
        scored.push((g.item(pair_score(&g, bundle, &p, seq, pair)?)?, pair.aligned()));
    }
    Ok(best_threshold(&scored))
}

/// Train the sync network with binary cross-entropy on aligned / misaligned pairs
/// from the training identities, fit the decision threshold on fresh training
/// pairs, then measure it on the held-out identity.
pub fn pretrain_sync(bundle: &mut ModelBundle, data: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<SyncReport> {
    if steps == 0 {
        return Err(Error::config("train.sync_pretrain_steps", "must be at least 1"));
    }
    let (initial_accuracy, _) = sync_accuracy(bundle, &data.test, seed, 0.5)?;
    let mut rng = stream_rng(seed, 3);
    let mut opt = Adam::new(lr, bundle.sync_params.tensors());
    let mut final_loss = f64::NAN;
    for _ in 0..steps {
        let g = Graph::new();
        let p = bundle.sync_params.bind(&g, true);
        let mut total = g.scalar(0.0);
        for _ in 0..SYNC_BATCH {
            let seq = &data.train[rng.gen_range(0..data.train.len())];
            let pair = draw_sync_pair(seq.len(), &mut rng);
            let s = g.clamp(pair_score(&g, bundle, &p, seq, pair)?, 1e-6, 1.0 - 1e-6);
            let nll = if pair.aligned() { g.log(s)? } else { g.log(g.shift(g.neg(s), 1.0))? };
            total = g.sub(total, nll)?;
        }
        let loss = g.scale(total, 1.0 / SYNC_BATCH as f64);
        final_loss = finite(&g, loss, "sync_pretrain")?;
        let grads = g.backward(loss)?;
        let gs = grads_for(&grads, &p, &bundle.sync_params);
        opt.step(bundle.sync_params.tensors_mut(), &gs)?;
    }
    let threshold = calibrate(bundle, data, seed)?;
    let (accuracy, aligned_wins) = sync_accuracy(bundle, &data.test, seed, threshold)?;
    Ok(SyncReport { initial_accuracy, threshold, accuracy, aligned_wins, final_loss })
}

/// Loss values and gradient norms of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub parts: Vec<(&'static str, f64)>,
    pub total: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_unc: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    opt_gen: Adam,
    opt_disc: Adam,
    opt_unc: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, bundle: ModelBundle) -> Result<Self> {
        cfg.validate()?;
        let opt_gen = Adam::new(cfg.lr, bundle.gen_params.tensors());
        let opt_disc = Adam::new(cfg.lr, bundle.disc_params.tensors());
        let opt_unc = Adam::new(cfg.uncertainty_lr, bundle.unc_params.tensors());
        let rng = stream_rng(cfg.seed, 2);
        Ok(Trainer { cfg, bundle, opt_gen, opt_disc, opt_unc, rng, step: 0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// `batch` random training samples: identity and frame uniform.
    pub fn sample_batch(&mut self, data: &Dataset) -> Result<Vec<FrameSample>> {
        (0..self.cfg.batch)
            .map(|_| {
                let seq = &data.train[self.rng.gen_range(0..data.train.len())];
                let t = self.rng.gen_range(0..seq.len());
                make_sample(seq, t, &mut self.rng)
            })
            .collect()
    }

    fn discriminator_step(&mut self, batch: &[FrameSample], fakes: &[Tensor]) -> Result<f64> {
        let g = Graph::new();
        let p = self.bundle.disc_params.bind(&g, true);
        let d = &self.bundle.discriminator;
        let reals: Vec<Var> = batch.iter().map(|s| g.constant(s.truth.clone())).collect();
        let fakes: Vec<Var> = fakes.iter().map(|f| g.constant(f.clone())).collect();
        let loss = lsgan_discriminator_loss(&g, d.scores(&g, &p, &reals)?, d.scores(&g, &p, &fakes)?)?;
        let value = finite(&g, loss, "disc")?;
        let grads = g.backward(loss)?;
        let gs = grads_for(&grads, &p, &self.bundle.disc_params);
        self.opt_disc.step(self.bundle.disc_params.tensors_mut(), &gs)?;
        Ok(value)
    }

    /// One discriminator update followed by one generator + uncertainty update.
    pub fn train_step(&mut self, batch: &[FrameSample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::config("train.batch", "empty batch"));
        }
        let cfg = self.cfg.clone();
        let b = &self.bundle;
        let g = Graph::new();
        let gp = b.gen_params.bind(&g, true);
        let up = b.unc_params.bind(&g, true);
        let fakes: Vec<Var> = batch.iter().map(|s| b.generator.forward(&g, &gp, s.into())).collect::<Result<_>>()?;
        let mut stats = Vec::new();

        if cfg.enable_adversarial {
            let fake_values: Vec<Tensor> = fakes.iter().map(|&f| (*g.value(f)).clone()).collect();
            stats.push(("disc", self.discriminator_step(batch, &fake_values)?));
        }
        let b = &self.bundle;
        let inv_n = 1.0 / batch.len() as f64;
        let mut parts = LossParts::default();

        if cfg.enable_adversarial {
            let dp = b.disc_params.bind(&g, false);
            let l = lsgan_generator_loss(&g, b.discriminator.scores(&g, &dp, &fakes)?);
            stats.push(("ad_g", finite(&g, l, "ad_g")?));
            parts.ad_g = Some(l);
        }
        if cfg.enable_pe {
            let mut sum = g.scalar(0.0);
            for (&f, s) in fakes.iter().zip(batch) {
                sum = g.add(sum, perception_loss(&g, f, &s.truth, &b.features)?)?;
            }
            let l = g.scale(sum, inv_n);
            stats.push(("pe", finite(&g, l, "pe")?));
            parts.pe = Some(l);
        }
        if cfg.enable_sync {
            let sp = b.sync_params.bind(&g, false);
            let scores: Vec<Var> = fakes
                .iter()
                .zip(batch)
                .map(|(&f, s)| {
                    let crop = g.slice(f, 1, MASK_ROW, SIZE - MASK_ROW)?;
                    let window = g.constant(s.signal_window.clone());
                    g.reshape(sync_score(&g, &b.sync, &sp, window, crop)?, &[1])
                })
                .collect::<Result<_>>()?;
            let l = sync_loss(&g, g.concat(&scores, 0)?);
            stats.push(("sync", finite(&g, l, "sync")?));
            parts.sync = Some(l);
        }

        let use_unc = cfg.uncertainty_enabled() || cfg.enable_error_head;
        let mut extra = None;
        if use_unc {
            let mut eps = Vec::with_capacity(batch.len());
            let mut taus = Vec::with_capacity(batch.len());
            let mut hats = Vec::with_capacity(batch.len());
            for (&f, s) in fakes.iter().zip(batch) {
                let truth = g.constant(s.truth.clone());
                eps.push(error_map(&g, f, truth)?);
                // The uncertainty net sees the generated image as data; the generator
                // is reached through the error map only.
                let out = uncert_forward(&g, &b.uncertainty, &up, g.detach(f), g.constant(s.source.clone()))?;
                let n = g.value(out.log_uncertainty).len();
                taus.push(g.reshape(out.log_uncertainty, &[n])?);
                hats.push(g.reshape(out.predicted_error, &[n])?);
            }
            let eps = ErrorMap::pool(&g, &eps)?;
            let tau = g.concat(&taus, 0)?;
            let mut un = None;
            if cfg.enable_un1 {
                let l = loss_un1(&g, eps, tau)?;
                stats.push(("un1", finite(&g, l, "un1")?));
                un = Some(l);
            }
            if cfg.enable_un2 {
                let l = loss_un2(&g, eps, g.exp(tau), &cfg.hist)?;
                stats.push(("un2", finite(&g, l, "un2")?));
                un = Some(match un {
                    Some(u) => g.add(u, l)?,
                    None => l,
                });
            }
            parts.un = un;
            if cfg.enable_error_head {
                let l = predicted_error_loss(&g, g.concat(&hats, 0)?, eps)?;
                stats.push(("error_head", finite(&g, l, "error_head")?));
                extra = Some(g.scale(l, cfg.error_head_weight));
            }
        }

        let mut total = total_loss(&g, &parts, &cfg.weights)?;
        if let Some(e) = extra {
            total = g.add(total, e)?;
        }
        let total_value = finite(&g, total, "total")?;
        self.step += 1;
        if !g.requires_grad(total) {
            return Ok(StepStats { step: self.step, parts: stats, total: total_value, grad_norm_gen: 0.0, grad_norm_unc: 0.0 });
        }
        let grads = g.backward(total)?;
        let gen_grads = grads_for(&grads, &gp, &b.gen_params);
        let unc_grads = grads_for(&grads, &up, &b.unc_params);
        let (grad_norm_gen, grad_norm_unc) = (norm(&gen_grads), norm(&unc_grads));
        if !grad_norm_gen.is_finite() || !grad_norm_unc.is_finite() {
            return Err(Error::Numerics { term: "gradients".into() });
        }
        self.opt_gen.step(self.bundle.gen_params.tensors_mut(), &gen_grads)?;
        if use_unc {
            self.opt_unc.step(self.bundle.unc_params.tensors_mut(), &unc_grads)?;
        }
        Ok(StepStats { step: self.step, parts: stats, total: total_value, grad_norm_gen, grad_norm_unc })
    }
}

/// Progress notifications from [`run`].
#[derive(Debug)]
pub enum Event<'a> {
    SyncPretrained(&'a SyncReport),
    Step(&'a StepStats),
    Eval(&'a Metrics),
}

#[derive(Debug)]
pub struct RunResult {
    pub bundle: ModelBundle,
    pub history: Vec<Metrics>,
    pub sync: Option<SyncReport>,
}

/// Seed of the fixed reference draws used by held-out evaluation.
pub fn eval_seed(data_seed: u64) -> u64 {
    data_seed ^ 0xe7a1
}

/// Pretrain sync (if enabled), then train, evaluating on the held-out identity
/// at step 0 and every `eval_every` steps.
pub fn run(cfg: &RunConfig, data: &Dataset, threads: usize, mut observe: impl FnMut(Event<'_>)) -> Result<RunResult> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut bundle = ModelBundle::new(tc.seed);
    let sync = if tc.enable_sync {
        let report = pretrain_sync(&mut bundle, data, tc.sync_pretrain_steps, tc.sync_lr, tc.seed)?;
        observe(Event::SyncPretrained(&report));
        Some(report)
    } else {
        None
    };
    let eval_set = EvalSet::new(&data.test, eval_seed(cfg.data.seed))?;
    let with_unc = tc.uncertainty_enabled();
    let mut trainer = Trainer::new(tc.clone(), bundle)?;
    let mut history = Vec::new();
    let first = evaluate(0, &trainer.bundle, &eval_set, &tc.hist, with_unc, threads)?;
    observe(Event::Eval(&first));
    history.push(first);
    for step in 1..=tc.steps {
        let batch = trainer.sample_batch(data)?;
        let stats = trainer.train_step(&batch)?;
        observe(Event::Step(&stats));
        if step % tc.eval_every == 0 {
            let m = evaluate(step, &trainer.bundle, &eval_set, &tc.hist, with_unc, threads)?;
            observe(Event::Eval(&m));
            history.push(m);
        }
    }
    Ok(RunResult { bundle: trainer.bundle, history, sync })
}
