//! Conditional WGAN with R1 regularization: losses, the training loop,
//! synthetic emission and the inherent-privacy delta estimate.
//!
//! The critic minimizes `E[D(x~)] - E[D(x)] + (gamma / 2) E[||grad_x D(x)||^2]`
//! with the penalty taken at real points only; the generator minimizes
//! `-E[D(G(z, y))]`.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synthaudit_nn::{seed, Adam, Bound, Element, Graph, Grads, Optimizer, Tensor, Var};

use crate::corpus::{Image, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::models::{Critic, GanArch, Generator, SampleShape, N_TARGETS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanAugment {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Brightness factors are drawn from `1 +- jitter`.
    pub jitter: f64,
}

impl Default for GanAugment {
    fn default() -> Self {
        Self {
            enabled: false,
            flip_prob: 0.5,
            jitter: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub arch: GanArch,
    /// R1 weight.
    pub gamma: f64,
    pub d_steps: usize,
    pub batch_size: usize,
    /// Generator updates; each one follows `d_steps` critic updates.
    pub steps: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub augment: GanAugment,
    /// Unconditional generator updates run before conditional training; the
    /// conditional input layers are reinitialized in between.
    pub pretrain_steps: usize,
    pub log_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            arch: GanArch::default(),
            gamma: 2.0,
            d_steps: 5,
            batch_size: 32,
            steps: 20_000,
            g_lr: 2e-4,
            d_lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            augment: GanAugment::default(),
            pretrain_steps: 0,
            log_every: 500,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gan.gamma", "must be finite and >= 0"));
        }
        if self.d_steps == 0 {
            return Err(Error::config("gan.d_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("gan.batch_size", "must be positive"));
        }
        if !(self.g_lr > 0.0 && self.d_lr > 0.0) {
            return Err(Error::config("gan.g_lr", "learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("gan.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) || !(0.0..1.0).contains(&self.augment.jitter) {
            return Err(Error::config("gan.augment", "flip_prob in [0, 1], jitter in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::config("gan.log_every", "must be positive"));
        }
        Ok(())
    }
}

/// Training samples with their conditioning codes.
#[derive(Clone, Debug)]
pub struct GanData<T> {
    pub shape: SampleShape,
    pub samples: Tensor<T>,
    /// `[n, code_dim]`; `code_dim` may be 0.
    pub codes: Tensor<T>,
}

impl GanData<f32> {
    /// Images and 12-wide label codes of `records`.
    pub fn from_records(records: &[&ImageRecord]) -> Result<Self> {
        let side = records
            .first()
            .ok_or_else(|| Error::Invalid("GAN training needs a nonempty corpus".into()))?
            .image
            .side;
        let mut x = Vec::with_capacity(records.len() * side * side * 3);
        let mut c = Vec::with_capacity(records.len() * N_TARGETS);
        for r in records {
            if r.image.side != side {
                return Err(Error::Invalid("records have mixed image sizes".into()));
            }
            x.extend_from_slice(&r.image.data);
            c.extend(conditioning_code(r));
        }
        Ok(Self {
            shape: SampleShape::Image { side },
            samples: Tensor::new(vec![records.len(), side, side, 3], x)?,
            codes: Tensor::new(vec![records.len(), N_TARGETS], c)?,
        })
    }
}

/// Conditioning code of a record: protest bit, violence, ten attribute bits.
pub fn conditioning_code(r: &ImageRecord) -> [f32; N_TARGETS] {
    r.annotation.targets()
}

impl<T: Element> GanData<T> {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code_dim(&self) -> usize {
        self.codes.row_len()
    }
}

/// Result of one critic evaluation.
#[derive(Clone, Debug)]
pub struct CriticStep<T> {
    /// Gap plus penalty, the minimized objective.
    pub loss: f64,
    /// `E[D(x)] - E[D(x~)]`.
    pub gap: f64,
    /// `(gamma / 2) E[||grad_x D(x)||^2]`.
    pub r1: f64,
    pub grads: Grads<T>,
}

/// Critic objective terms recorded in `g`: returns `(loss, gap, r1)`.
pub fn critic_objective<T: Element>(
    g: &mut Graph<T>,
    critic: &Critic<T>,
    p: &Bound,
    real: Var,
    fake: Var,
    code: Var,
    gamma: f64,
) -> Result<(Var, Var, Var)> {
    let d_real = critic.forward(g, p, real, code);
    let d_fake = critic.forward(g, p, fake, code);
    let m_real = g.mean(d_real);
    let m_fake = g.mean(d_fake);
    let neg_gap = g.sub(m_fake, m_real);
    let n = g.shape(real)[0];
    let r1 = if gamma > 0.0 {
        let s = g.sum(d_real);
        let gx = g.grad(s, &[real], true)?[0];
        let sq = g.square(gx);
        let total = g.sum(sq);
        g.scale(total, T::from_f64_lossy(gamma / 2.0 / n as f64))
    } else {
        g.constant(Tensor::zeros(&[1]))
    };
    let loss = g.add(neg_gap, r1);
    let gap = g.neg(neg_gap);
    Ok((loss, gap, r1))
}

/// Critic loss and parameter gradients on a real and a fake batch sharing codes.
pub fn critic_loss<T: Element>(
    critic: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    code: &Tensor<T>,
    gamma: f64,
) -> Result<CriticStep<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Invalid(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    let mut g = Graph::new();
    let p = critic.params().bind(&mut g);
    let x = g.param(real.clone());
    let xf = g.constant(fake.clone());
    let c = g.constant(code.clone());
    let (loss, gap, r1) = critic_objective(&mut g, critic, &p, x, xf, c, gamma)?;
    finish_critic(&mut g, critic, &p, loss, gap, r1)
}

fn finish_critic<T: Element>(
    g: &mut Graph<T>,
    critic: &Critic<T>,
    p: &Bound,
    loss: Var,
    gap: Var,
    r1: Var,
) -> Result<CriticStep<T>> {
    let lv = g.scalar(loss).as_f64();
    if !lv.is_finite() {
        return Err(Error::Divergence("non-finite critic loss".into()));
    }
    let flat: Vec<Var> = p.iter().flatten().copied().collect();
    let gv = g.grad(loss, &flat, false)?;
    let grads = synthaudit_nn::model::read_grads(g, p, &gv);
    let _ = critic;
    Ok(CriticStep {
        loss: lv,
        gap: g.scalar(gap).as_f64(),
        r1: g.scalar(r1).as_f64(),
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct GeneratorStep<T> {
    pub loss: f64,
    pub grads: Grads<T>,
}

/// `-E[D(G(z, y), y)]` with gradients for the generator only.
pub fn generator_loss<T: Element>(
    generator: &Generator<T>,
    critic: &Critic<T>,
    z: &Tensor<T>,
    code: &Tensor<T>,
) -> Result<GeneratorStep<T>> {
    generator_loss_aug(generator, critic, z, code, None)
}

/// Per-batch critic-input augmentation: which examples flip, and brightness factors.
#[derive(Clone, Debug)]
struct AugDraw {
    flip: Vec<bool>,
    bright: Vec<f64>,
}

fn draw_aug<R: Rng>(cfg: &GanAugment, n: usize, rng: &mut R) -> AugDraw {
    AugDraw {
        flip: (0..n).map(|_| rng.random::<f64>() < cfg.flip_prob).collect(),
        bright: (0..n)
            .map(|_| rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter))
            .collect(),
    }
}

/// Applies flips and brightness to an image batch inside the graph.
fn apply_aug<T: Element>(g: &mut Graph<T>, x: Var, aug: &AugDraw) -> Var {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return x;
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut perm = Vec::with_capacity(n * h * w * c);
    let mut scale = Vec::with_capacity(n * h * w * c);
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src_x = if aug.flip[i] { w - 1 - xx } else { xx };
                for ch in 0..c {
                    perm.push(((i * h + y) * w + src_x) * c + ch);
                    scale.push(T::from_f64_lossy(aug.bright[i]));
                }
            }
        }
    }
    let flipped = g.permute(x, Arc::new(perm));
    g.mul_const(flipped, Arc::new(scale))
}

fn generator_loss_aug<T: Element>(
    generator: &Generator<T>,
    critic: &Critic<T>,
    z: &Tensor<T>,
    code: &Tensor<T>,
    aug: Option<&AugDraw>,
) -> Result<GeneratorStep<T>> {
    let mut g = Graph::new();
    let gp = generator.params().bind(&mut g);
    let dp = critic.params().bind_frozen(&mut g);
    let zv = g.constant(z.clone());
    let cv = g.constant(code.clone());
    let mut fake = generator.forward(&mut g, &gp, zv, cv);
    if let Some(a) = aug {
        fake = apply_aug(&mut g, fake, a);
    }
    let d = critic.forward(&mut g, &dp, fake, cv);
    let m = g.mean(d);
    let loss = g.neg(m);
    let lv = g.scalar(loss).as_f64();
    if !lv.is_finite() {
        return Err(Error::Divergence("non-finite generator loss".into()));
    }
    let flat: Vec<Var> = gp.iter().flatten().copied().collect();
    let gv = g.grad(loss, &flat, false)?;
    Ok(GeneratorStep {
        loss: lv,
        grads: synthaudit_nn::model::read_grads(&g, &gp, &gv),
    })
}

/// Standard-normal latents `[n, dim]`.
pub fn sample_latents<T: Element, R: Rng>(n: usize, dim: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..n * dim)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(vec![n, dim], data).expect("latent shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogEntry {
    pub step: usize,
    pub phase: String,
    /// Mean over the interval of `E[D(x)] - E[D(x~)]`.
    pub critic_gap: f64,
    pub r1: f64,
    pub generator_loss: f64,
    /// Squared distance between per-coordinate means and standard deviations of
    /// generated and real probe samples.
    pub moment_distance: f64,
    pub wall_secs: f64,
}

/// Notifications emitted during training.
pub enum GanEvent<'a> {
    Log(&'a GanLogEntry),
    /// Parameters known to be finite, emitted at every log interval.
    Snapshot {
        step: usize,
        generator: &'a Generator<f32>,
        critic: &'a Critic<f32>,
    },
}

pub struct TrainedGan {
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    pub log: Vec<GanLogEntry>,
}

const PROBE_SIZE: usize = 256;

fn moment_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let stats = |t: &Tensor<f32>| {
        let (n, d) = (t.rows(), t.row_len());
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for i in 0..n {
            for (j, &v) in t.row(i).iter().enumerate() {
                mean[j] += f64::from(v);
                sq[j] += f64::from(v) * f64::from(v);
            }
        }
        let nf = n as f64;
        let std: Vec<f64> = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s / nf - (m / nf).powi(2)).max(0.0).sqrt())
            .collect();
        (mean.into_iter().map(|m| m / nf).collect::<Vec<_>>(), std)
    };
    let (ma, sa) = stats(a);
    let (mb, sb) = stats(b);
    let d = ma.len() as f64;
    (ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        / d
}

struct Phase<'a> {
    name: &'static str,
    steps: usize,
    codes: &'a Tensor<f32>,
}

/// Alternates `d_steps` critic updates with one generator update.
///
/// Non-finite losses abort with [`Error::Divergence`]; the last
/// [`GanEvent::Snapshot`] holds the most recent finite parameters.
pub fn train_gan(
    data: &GanData<f32>,
    cfg: &GanTrainConfig,
    seed_: u64,
    on_event: &mut dyn FnMut(GanEvent<'_>) -> Result<()>,
) -> Result<TrainedGan> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("GAN training needs a nonempty corpus".into()));
    }
    let code_dim = data.code_dim();
    let mut init = seed::rng(seed_, "gan-init", 0);
    let mut gen = Generator::<f32>::new(&cfg.arch, data.shape, code_dim, &mut init)?;
    let mut critic = Critic::<f32>::new(&cfg.arch, data.shape, code_dim, &mut init)?;
    let new_adam = |lr: f64| Adam::new(lr).map(|a| a.with_betas(cfg.beta1, cfg.beta2));
    let (mut g_opt, mut d_opt) = (new_adam(cfg.g_lr)?, new_adam(cfg.d_lr)?);

    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let probe_idx: Vec<usize> = (0..PROBE_SIZE.min(n)).map(|i| i * n / PROBE_SIZE.min(n)).collect();
    let probe_real = data.samples.select_rows(&probe_idx);
    let probe_z = sample_latents::<f32, _>(probe_idx.len(), gen.z_dim(), &mut seed::rng(seed_, "gan-probe", 0));
    let zero_codes = Tensor::zeros(data.codes.shape());

    let mut phases = Vec::new();
    if cfg.pretrain_steps > 0 {
        phases.push(Phase {
            name: "pretrain",
            steps: cfg.pretrain_steps,
            codes: &zero_codes,
        });
    }
    phases.push(Phase {
        name: "conditional",
        steps: cfg.steps,
        codes: &data.codes,
    });

    let start = Instant::now();
    let mut log = Vec::new();
    let mut global = 0usize;
    for (pi, phase) in phases.iter().enumerate() {
        if pi > 0 {
            // fresh conditional-input weights for fine-tuning
            let mut rng = seed::rng(seed_, "gan-reinit", pi as u64);
            if let Some(i) = gen.params().index_of("cond_in") {
                gen.params_mut().reinit_layer(i, &mut rng);
            }
            if let Some(i) = critic.params().index_of("embed") {
                critic.params_mut().reinit_layer(i, &mut rng);
            }
        }
        let probe_codes = phase.codes.select_rows(&probe_idx);
        let (mut acc_gap, mut acc_r1, mut acc_g, mut acc_n) = (0.0, 0.0, 0.0, 0usize);
        for step in 0..phase.steps {
            let mut rng = seed::rng(seed_, "gan-step", global as u64);
            for _ in 0..cfg.d_steps {
                let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
                let real = data.samples.select_rows(&idx);
                let code = phase.codes.select_rows(&idx);
                let z = sample_latents(bs, gen.z_dim(), &mut rng);
                let fake = gen.sample(&z, &code);
                let s = if cfg.augment.enabled {
                    let a_real = draw_aug(&cfg.augment, bs, &mut rng);
                    let a_fake = draw_aug(&cfg.augment, bs, &mut rng);
                    let mut g = Graph::new();
                    let p = critic.params().bind(&mut g);
                    let xr = g.param(real);
                    let xr_aug = apply_aug(&mut g, xr, &a_real);
                    let xf = g.constant(fake);
                    let xf = apply_aug(&mut g, xf, &a_fake);
                    let c = g.constant(code);
                    // the penalty is taken w.r.t. the critic's (augmented) input
                    let d_real = critic.forward(&mut g, &p, xr_aug, c);
                    let d_fake = critic.forward(&mut g, &p, xf, c);
                    let (mr, mf) = (g.mean(d_real), g.mean(d_fake));
                    let neg_gap = g.sub(mf, mr);
                    let r1 = if cfg.gamma > 0.0 {
                        let sum = g.sum(d_real);
                        let gx = g.grad(sum, &[xr_aug], true)?[0];
                        let sq = g.square(gx);
                        let t = g.sum(sq);
                        g.scale(t, (cfg.gamma / 2.0 / bs as f64) as f32)
                    } else {
                        g.constant(Tensor::zeros(&[1]))
                    };
                    let loss = g.add(neg_gap, r1);
                    let gap = g.neg(neg_gap);
                    finish_critic(&mut g, &critic, &p, loss, gap, r1)?
                } else {
                    critic_loss(&critic, &real, &fake, &code, cfg.gamma)?
                };
                d_opt.step(critic.params_mut(), &s.grads)?;
                acc_gap += s.gap;
                acc_r1 += s.r1;
            }
            let idx: Vec<usize> = (0..bs).map(|_| rng.random_range(0..n)).collect();
            let code = phase.codes.select_rows(&idx);
            let z = sample_latents(bs, gen.z_dim(), &mut rng);
            let aug = cfg.augment.enabled.then(|| draw_aug(&cfg.augment, bs, &mut rng));
            let gs = generator_loss_aug(&gen, &critic, &z, &code, aug.as_ref())?;
            g_opt.step(gen.params_mut(), &gs.grads)?;
            acc_g += gs.loss;
            acc_n += 1;
            global += 1;

            if (step + 1) % cfg.log_every == 0 || step + 1 == phase.steps {
                let probe = gen.sample(&probe_z, &probe_codes);
                let entry = GanLogEntry {
                    step: global,
                    phase: phase.name.into(),
                    critic_gap: acc_gap / (acc_n * cfg.d_steps) as f64,
                    r1: acc_r1 / (acc_n * cfg.d_steps) as f64,
                    generator_loss: acc_g / acc_n as f64,
                    moment_distance: moment_distance(&probe, &probe_real),
                    wall_secs: start.elapsed().as_secs_f64(),
                };
                tracing::info!(step = global, gap = entry.critic_gap, r1 = entry.r1, "gan");
                on_event(GanEvent::Log(&entry))?;
                on_event(GanEvent::Snapshot {
                    step: global,
                    generator: &gen,
                    critic: &critic,
                })?;
                log.push(entry);
                (acc_gap, acc_r1, acc_g, acc_n) = (0.0, 0.0, 0.0, 0);
            }
        }
    }
    Ok(TrainedGan {
        generator: gen,
        critic,
        log,
    })
}

/// One synthetic record per source record, `G(z_i, y_i)` with `z_i` derived
/// from `(z_seed, i)`. Annotations are copied, ids are fresh, and every
/// record lands in the train split.
pub fn emit_synthetic(generator: &Generator<f32>, source: &[&ImageRecord], z_seed: u64) -> Result<Vec<ImageRecord>> {
    let side = match generator.shape() {
        SampleShape::Image { side } => side,
        SampleShape::Vector { .. } => return Err(Error::Invalid("cannot emit images from a vector generator".into())),
    };
    if generator.code_dim() != N_TARGETS {
        return Err(Error::Invalid(format!(
            "generator takes {}-wide codes, expected {N_TARGETS}",
            generator.code_dim()
        )));
    }
    const CHUNK: usize = 64;
    let parts: Vec<Result<Vec<ImageRecord>>> = source
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut z = Vec::with_capacity(chunk.len() * generator.z_dim());
            let mut codes = Vec::with_capacity(chunk.len() * N_TARGETS);
            for (k, r) in chunk.iter().enumerate() {
                let i = ci * CHUNK + k;
                let mut rng = seed::rng(z_seed, "emit", i as u64);
                z.extend((0..generator.z_dim()).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); v as f32 }));
                codes.extend(conditioning_code(r));
            }
            let z = Tensor::new(vec![chunk.len(), generator.z_dim()], z)?;
            let codes = Tensor::new(vec![chunk.len(), N_TARGETS], codes)?;
            let out = generator.sample(&z, &codes);
            chunk
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let i = ci * CHUNK + k;
                    Ok(ImageRecord {
                        id: format!("syn-{i:06}"),
                        image: Image::new(side, out.row(k).to_vec())?.quantized(),
                        annotation: r.annotation.clone(),
                        split: Split::Train,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(source.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Order-of-magnitude delta of the inherent privacy of `n` samples from a
/// generator trained on `m` records: `c (n / m) / (eps (1 - e^-eps))`, capped at 1.
pub fn inherent_dp_delta(n_emitted: usize, m_train: usize, epsilon: f64, c: f64) -> Result<f64> {
    if m_train == 0 {
        return Err(Error::Invalid("m_train must be positive".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Invalid("epsilon must be positive".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Invalid("c must be positive".into()));
    }
    let ratio = n_emitted as f64 / m_train as f64;
    Ok((c * ratio / (epsilon * (1.0 - (-epsilon).exp()))).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_arch(h: usize) -> GanArch {
        GanArch {
            z_dim: 2,
            g_hidden: 8,
            d_hidden: h,
        }
    }

    fn set_layer(c: &mut Critic<f64>, name: &str, w: &[f64], b: &[f64]) {
        let i = c.params().index_of(name).unwrap();
        let layer = &mut c.params_mut().layers_mut()[i];
        layer.tensors[0].data_mut().copy_from_slice(w);
        layer.tensors[1].data_mut().copy_from_slice(b);
    }

    /// `D(x) = 3 x0 + 4 x1 + const` on inputs kept in the positive region.
    fn linear_critic() -> Critic<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Critic::new(&toy_arch(2), SampleShape::Vector { dim: 2 }, 0, &mut rng).unwrap();
        set_layer(&mut c, "d_fc1", &[1.0, 0.0, 0.0, 1.0], &[100.0, 100.0]);
        set_layer(&mut c, "d_fc2", &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
        set_layer(&mut c, "d_out", &[3.0, 4.0], &[0.5]);
        c
    }

    fn t(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn zero_critic_has_zero_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Critic::<f64>::new(&toy_arch(4), SampleShape::Vector { dim: 2 }, 0, &mut rng).unwrap();
        let zeros = vec![0.0; c.params().param_count()];
        c.params_mut().set_flat(&zeros).unwrap();
        let code = Tensor::zeros(&[2, 0]);
        let s = critic_loss(&c, &t(&[[1.0, 2.0], [0.0, -1.0]]), &t(&[[5.0, 5.0], [3.0, 1.0]]), &code, 10.0).unwrap();
        assert_eq!((s.loss, s.gap, s.r1), (0.0, 0.0, 0.0));
        let gen = Generator::<f64>::new(&toy_arch(4), SampleShape::Vector { dim: 2 }, 0, &mut rng).unwrap();
        let gs = generator_loss(&gen, &c, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 0])).unwrap();
        assert_eq!(gs.loss, 0.0);
    }

    #[test]
    fn linear_critic_penalty_and_gap() {
        let c = linear_critic();
        let real = t(&[[1.0, 1.0], [2.0, 0.0]]);
        let fake = t(&[[0.0, 0.0], [1.0, -1.0]]);
        let code = Tensor::zeros(&[2, 0]);
        let s = critic_loss(&c, &real, &fake, &code, 2.0).unwrap();
        // |grad|^2 = 25 everywhere; mean D(real) - mean D(fake) = 6.5 - (-0.5)
        assert!((s.r1 - 25.0).abs() < 1e-9);
        assert!((s.gap - 7.0).abs() < 1e-9);
        assert!((s.loss - 18.0).abs() < 1e-9);
        let s0 = critic_loss(&c, &real, &fake, &code, 0.0).unwrap();
        assert_eq!(s0.r1, 0.0);
        assert!((s0.loss + 7.0).abs() < 1e-9);
    }

    #[test]
    fn penalty_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Critic::<f64>::new(&toy_arch(5), SampleShape::Vector { dim: 2 }, 3, &mut rng).unwrap();
        let real = t(&[[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]]);
        let fake = t(&[[0.0, 0.1], [0.7, -0.6], [0.2, 0.2]]);
        let code = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.2, 1.0, 1.0, 0.0]).unwrap();
        let s = critic_loss(&c, &real, &fake, &code, 3.0).unwrap();
        let flat = c.params().flatten();
        let analytic: Vec<f64> = s.grads.iter().flatten().flat_map(|t| t.data().to_vec()).collect();
        let h = 1e-5;
        for k in (0..flat.len()).step_by(7) {
            let mut p = flat.clone();
            p[k] += h;
            c.params_mut().set_flat(&p).unwrap();
            let up = critic_loss(&c, &real, &fake, &code, 3.0).unwrap().loss;
            p[k] -= 2.0 * h;
            c.params_mut().set_flat(&p).unwrap();
            let down = critic_loss(&c, &real, &fake, &code, 3.0).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn flip_augmentation_is_differentiable() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap());
        let aug = AugDraw {
            flip: vec![true],
            bright: vec![2.0],
        };
        let y = apply_aug(&mut g, x, &aug);
        assert_eq!(g.value(y).data(), &[4.0, 2.0]);
        let w = g.constant(Tensor::new(vec![1, 1, 2, 1], vec![1.0, 10.0]).unwrap());
        let p = g.mul(y, w);
        let s = g.sum(p);
        let gx = g.grad(s, &[x], false).unwrap()[0];
        assert_eq!(g.value(gx).data(), &[20.0, 2.0]);
    }

    #[test]
    fn toy_gan_moves_towards_the_data_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 512;
        let data: Vec<f32> = (0..n)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [(3.0 + 0.3 * a) as f32, (-2.0 + 0.3 * b) as f32]
            })
            .collect();
        let gd = GanData {
            shape: SampleShape::Vector { dim: 2 },
            samples: Tensor::new(vec![n, 2], data).unwrap(),
            codes: Tensor::zeros(&[n, 0]),
        };
        let cfg = GanTrainConfig {
            arch: GanArch {
                z_dim: 4,
                g_hidden: 32,
                d_hidden: 32,
            },
            steps: 600,
            d_steps: 2,
            gamma: 1.0,
            g_lr: 5e-3,
            d_lr: 5e-3,
            log_every: 100,
            ..Default::default()
        };
        let mut logs = 0;
        let trained = train_gan(&gd, &cfg, 9, &mut |e| {
            if let GanEvent::Log(_) = e {
                logs += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(logs, 6);
        let z = sample_latents::<f32, _>(400, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let out = trained.generator.sample(&z, &Tensor::zeros(&[400, 0]));
        let (mut m0, mut m1) = (0.0, 0.0);
        for i in 0..400 {
            m0 += f64::from(out.row(i)[0]) / 400.0;
            m1 += f64::from(out.row(i)[1]) / 400.0;
        }
        assert!((m0 - 3.0).abs() < 0.5 && (m1 + 2.0).abs() < 0.5, "mean ({m0}, {m1})");
    }

    #[test]
    fn inherent_delta_reference_value() {
        let d = inherent_dp_delta(1, 2, 1.0, 1.0).unwrap();
        assert!((d - 0.790_988).abs() < 1e-4);
        assert_eq!(inherent_dp_delta(0, 10, 1.0, 1.0).unwrap(), 0.0);
        assert!(inherent_dp_delta(1, 0, 1.0, 1.0).is_err());
        assert!(inherent_dp_delta(1, 1, 0.0, 1.0).is_err());
    }
}
