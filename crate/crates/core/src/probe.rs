//! Synthetic reconstruction probe.
//!
//! Builds a dataset where one designated agent's observation at each step
//! is an exact function of the other agents' rows or of its own previous
//! row. Masking exactly that agent and training only the auxiliary stack
//! must push retrieval accuracy well above the 1/N chance level, while an
//! untrained stack must sit at chance. Because the generator is
//! closed-form, failures localize to the stack rather than to an
//! environment or the policy.

use rand::Rng;

use crate::contrastive::{contrastive_accuracy, info_nce_batch, init_similarity};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{apply_mask, MaskStrategy, MaskVariant, MaskVector, TimestepSample};
use crate::nets::{ema_update, EncoderConfig, Mlp, ProjectorConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::params::ParamStore;
use crate::recon::{ReconConfig, Reconstructor};
use crate::tensor::Tensor;
use crate::trainer::stream;

const STREAM_PROBE_DATA: u64 = 8;
const STREAM_PROBE_INIT: u64 = 9;
const STREAM_PROBE_TRAIN: u64 = 10;
const STREAM_PROBE_EVAL: u64 = 11;

/// How each frame's hidden structure is built. In both cases the agent
/// masked at step `t` is `t mod n_agents`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Construction {
    /// Rows are drawn iid standard normal and centered per dimension, so
    /// every agent equals minus the sum of the others. The joint law is
    /// exchangeable over agents, which pins untrained retrieval to exactly
    /// 1/N: there is no marginal or correlational asymmetry for a random
    /// similarity to latch onto. Constructions that compute one designated
    /// row as a linear blend of free rows fail that bar, because a random
    /// near-linear scorer ranks the blend like a sum of the distractor
    /// scores, which loses to their max well over 1/N of the time.
    CrossAgent,
    /// The masked agent's row is a copy of its own row one frame earlier;
    /// all other rows are fresh noise. Only temporal masking can solve it.
    Temporal,
}

/// Ground-truth dataset recipe for the probe.
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub construction: Construction,
    /// Frames to generate; yields `steps - 1` samples.
    pub steps: usize,
    pub seed: u64,
}

impl ProbeSpec {
    /// The reference construction: cross-agent zero-sum frames.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_agents: 4,
            obs_dim: 8,
            construction: Construction::CrossAgent,
            steps: 2_001,
            seed,
        }
    }

    /// Temporal copies only: one-step-back masking hands over the answer,
    /// while zero masking destroys it.
    pub fn temporal_only(seed: u64) -> Self {
        Self {
            construction: Construction::Temporal,
            ..Self::reference(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 || self.obs_dim == 0 || self.steps < 2 {
            return Err(Error::Config(
                "probe needs at least 2 agents, a positive obs_dim, and 2 steps".into(),
            ));
        }
        Ok(())
    }

    pub fn designated(&self, t: usize) -> usize {
        t % self.n_agents
    }
}

fn centered_frame(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let mut frame = Tensor::randn(&[n, d], rng);
    for c in 0..d {
        let mean = (0..n).map(|j| frame.row(j)[c]).sum::<f64>() / n as f64;
        for j in 0..n {
            frame.row_mut(j)[c] -= mean;
        }
    }
    frame
}

/// Generate the dataset: one long trajectory of fully observed frames,
/// then one sample per step `t >= 1` pairing frame `t` with frame `t - 1`.
/// Actions are zero rows; the probe isolates the observation pathway.
pub fn generate(spec: &ProbeSpec) -> Result<Vec<TimestepSample>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, STREAM_PROBE_DATA);
    let n = spec.n_agents;
    let d = spec.obs_dim;

    let mut frames: Vec<Tensor> = Vec::with_capacity(spec.steps);
    match spec.construction {
        Construction::CrossAgent => {
            for _ in 0..spec.steps {
                frames.push(centered_frame(n, d, &mut rng));
            }
        }
        Construction::Temporal => {
            frames.push(Tensor::randn(&[n, d], &mut rng));
            for t in 1..spec.steps {
                let mut frame = Tensor::randn(&[n, d], &mut rng);
                let star = spec.designated(t);
                let prev = frames[t - 1].row(star).to_vec();
                frame.row_mut(star).copy_from_slice(&prev);
                frames.push(frame);
            }
        }
    }

    let act = Tensor::zeros(&[n, PROBE_ACT_DIM]);
    Ok((1..spec.steps)
        .map(|t| TimestepSample {
            obs_t: frames[t].clone(),
            act_t: act.clone(),
            obs_prev: frames[t - 1].clone(),
            act_prev: act.clone(),
            episode_id: 0,
            t,
        })
        .collect())
}

/// Width of the zero action rows attached to probe samples.
pub const PROBE_ACT_DIM: usize = 2;

/// Training settings for the probe stack. Networks are deliberately small;
/// the dataset is exactly solvable.
#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub spec: ProbeSpec,
    pub strategy: MaskVariant,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub train_steps: usize,
    /// Samples scored per accuracy measurement.
    pub eval_samples: usize,
    /// Accuracy is recorded every this many steps (and at the end).
    pub eval_every: usize,
}

impl ProbeConfig {
    pub fn new(spec: ProbeSpec) -> Self {
        Self {
            spec,
            strategy: MaskVariant::PrevStep,
            hidden_dims: vec![32, 32],
            repr_dim: 32,
            proj_hidden: 64,
            proj_dim: 32,
            batch: 32,
            lr: 1e-3,
            tau: 0.01,
            train_steps: 2_000,
            eval_samples: 1_000,
            eval_every: 200,
        }
    }
}

/// The full auxiliary stack with its own encoder: everything trainable
/// lives in one store, targets in two more.
pub struct ProbeStack {
    online: ParamStore,
    target_enc: ParamStore,
    target_proj: ParamStore,
    enc: Mlp,
    proj: Mlp,
    recon: Reconstructor,
    strategy: MaskStrategy,
    tau: f64,
}

impl ProbeStack {
    pub fn init(cfg: &ProbeConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut online = ParamStore::new();
        let enc = Mlp::encoder(
            &mut online,
            "enc",
            &EncoderConfig {
                obs_dim: cfg.spec.obs_dim,
                hidden_dims: cfg.hidden_dims.clone(),
                repr_dim: cfg.repr_dim,
            },
            rng,
        )?;
        let proj = Mlp::projector(
            &mut online,
            "proj",
            &ProjectorConfig {
                in_dim: cfg.repr_dim,
                hidden_dim: cfg.proj_hidden,
                out_dim: cfg.proj_dim,
            },
            rng,
        )?;
        let recon_cfg = ReconConfig::new(cfg.proj_dim, PROBE_ACT_DIM, cfg.spec.n_agents);
        let recon = Reconstructor::init(&mut online, "recon", &recon_cfg, rng)?;
        init_similarity(&mut online, "w", cfg.proj_dim)?;
        let target_enc = online.subset("enc.").target_copy();
        let target_proj = online.subset("proj.").target_copy();
        Ok(Self {
            online,
            target_enc,
            target_proj,
            enc,
            proj,
            recon,
            strategy: MaskStrategy {
                variant: cfg.strategy,
                offset: 1,
            },
            tau: cfg.tau,
        })
    }

    pub fn online(&self) -> &ParamStore {
        &self.online
    }

    /// Queries and keys for a batch of already masked samples: queries run
    /// masked observations through online encoder, projector, and
    /// reconstructor; keys run original observations through the targets.
    fn forward_batch(
        &self,
        g: &Graph,
        batch: &[(Tensor, Tensor, &TimestepSample, MaskVector)],
    ) -> Result<(Vec<(Var, Var)>, crate::params::Lease)> {
        let n = batch[0].2.n_agents();
        let d = batch[0].2.obs_t.shape()[1];
        let b = batch.len();
        let mut masked = Vec::with_capacity(b * n * d);
        let mut full = Vec::with_capacity(b * n * d);
        for (mobs, _, sample, _) in batch {
            masked.extend_from_slice(mobs.data());
            full.extend_from_slice(sample.obs_t.data());
        }
        let masked_all = g.constant(Tensor::from_vec(vec![b * n, d], masked)?);
        let full_all = g.constant(Tensor::from_vec(vec![b * n, d], full)?);

        let online = self.online.lease(g);
        let tenc = self.target_enc.lease(g);
        let tproj = self.target_proj.lease(g);

        let z = self.enc.forward(&online, &masked_all)?;
        let q_all = self.proj.forward(&online, &z)?;
        let t = self.enc.forward(&tenc, &full_all)?;
        let k_all = self.proj.forward(&tproj, &t)?;

        let mut pairs = Vec::with_capacity(b);
        for (i, (_, mact, _, _)) in batch.iter().enumerate() {
            let z_i = q_all.narrow_rows(i * n, n)?;
            let act = g.constant(mact.clone());
            let tokens = self.recon.build_tokens(g, &online, &z_i, &act)?;
            let q = self.recon.reconstruct(&online, &tokens)?;
            let k = k_all.narrow_rows(i * n, n)?;
            pairs.push((q, k));
        }
        Ok((pairs, online))
    }

    /// Mask the designated agent of each sample and apply the strategy.
    fn mask_batch<'a>(
        &self,
        spec: &ProbeSpec,
        samples: &'a [&'a TimestepSample],
        rng: &mut impl Rng,
    ) -> Result<Vec<(Tensor, Tensor, &'a TimestepSample, MaskVector)>> {
        samples
            .iter()
            .map(|sample| {
                let mut bits = vec![0u8; spec.n_agents];
                bits[spec.designated(sample.t)] = 1;
                let mask = MaskVector::new(bits)?;
                let (mobs, mact) = apply_mask(sample, &mask, &self.strategy, rng)?;
                Ok((mobs, mact, *sample, mask))
            })
            .collect()
    }

    /// Retrieval accuracy over the given samples, no parameter updates.
    pub fn accuracy(
        &self,
        spec: &ProbeSpec,
        samples: &[&TimestepSample],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let mut hits = 0.0;
        let mut total = 0usize;
        for chunk in samples.chunks(256) {
            let batch = self.mask_batch(spec, chunk, rng)?;
            let g = Graph::new();
            let (pairs, online) = self.forward_batch(&g, &batch)?;
            let w = online.var("w")?.value();
            for ((q, k), (_, _, _, mask)) in pairs.iter().zip(&batch) {
                let acc = contrastive_accuracy(&q.value(), &k.value(), &w, mask)?;
                hits += acc * mask.n_masked() as f64;
                total += mask.n_masked();
            }
        }
        Ok(if total == 0 { 0.0 } else { hits / total as f64 })
    }

    /// One contrastive gradient step on a batch; returns the loss.
    pub fn train_step(
        &mut self,
        spec: &ProbeSpec,
        samples: &[&TimestepSample],
        adam: &mut Adam,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let batch = self.mask_batch(spec, samples, rng)?;
        let g = Graph::new();
        let (pairs, online) = self.forward_batch(&g, &batch)?;
        let items: Vec<(&Var, &Var, &MaskVector)> = pairs
            .iter()
            .zip(&batch)
            .map(|((q, k), (_, _, _, m))| (q, k, m))
            .collect();
        let w = online.var("w")?;
        let loss = info_nce_batch(&items, w)?;
        let loss_val = loss.item()?;
        let grad_store = g.backward(&loss)?;
        let mut grads = indexmap::IndexMap::new();
        for (name, grad) in online.grads(&grad_store) {
            grads.insert(format!("probe.{name}"), grad);
        }
        clip_global_norm(&mut grads, 10.0)?;
        adam.step(lr, "probe", &mut self.online, &grads)?;
        ema_update(&mut self.target_enc, &self.online.subset("enc."), self.tau)?;
        ema_update(&mut self.target_proj, &self.online.subset("proj."), self.tau)?;
        Ok(loss_val)
    }
}

/// Accuracy trace of a probe run: `(step, accuracy)` pairs, step 0 being
/// the untrained stack.
pub struct ProbeReport {
    pub trace: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

fn draw_eval<'a>(
    dataset: &'a [TimestepSample],
    count: usize,
    rng: &mut impl Rng,
) -> Vec<&'a TimestepSample> {
    (0..count)
        .map(|_| &dataset[rng.random_range(0..dataset.len())])
        .collect()
}

/// Train only the auxiliary stack on the probe dataset and measure
/// retrieval accuracy along the way.
pub fn probe_train(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let dataset = generate(&cfg.spec)?;
    let mut stack = ProbeStack::init(cfg, &mut stream(cfg.spec.seed, STREAM_PROBE_INIT))?;
    let mut adam = Adam::default();
    let mut train_rng = stream(cfg.spec.seed, STREAM_PROBE_TRAIN);
    let mut eval_rng = stream(cfg.spec.seed, STREAM_PROBE_EVAL);

    let eval_count = cfg.eval_samples.min(dataset.len());
    let mut trace = Vec::new();
    let eval_set = draw_eval(&dataset, eval_count, &mut eval_rng);
    trace.push((0, stack.accuracy(&cfg.spec, &eval_set, &mut eval_rng)?));

    let mut losses = Vec::with_capacity(cfg.train_steps);
    for step in 1..=cfg.train_steps {
        let batch: Vec<&TimestepSample> = (0..cfg.batch)
            .map(|_| &dataset[train_rng.random_range(0..dataset.len())])
            .collect();
        let loss = stack.train_step(&cfg.spec, &batch, &mut adam, cfg.lr, &mut train_rng)?;
        losses.push(loss);
        if step % cfg.eval_every == 0 || step == cfg.train_steps {
            let eval_set = draw_eval(&dataset, eval_count, &mut eval_rng);
            trace.push((step, stack.accuracy(&cfg.spec, &eval_set, &mut eval_rng)?));
        }
    }
    let final_accuracy = trace.last().map(|(_, a)| *a).unwrap_or(0.0);
    Ok(ProbeReport {
        trace,
        losses,
        final_accuracy,
    })
}

/// Untrained retrieval accuracy over at least `min_samples` fresh draws.
pub fn chance_accuracy(spec: &ProbeSpec, min_samples: usize, seed: u64) -> Result<f64> {
    let mut spec = spec.clone();
    spec.steps = spec.steps.max(min_samples + 1);
    let dataset = generate(&spec)?;
    let cfg = ProbeConfig::new(spec.clone());
    let stack = ProbeStack::init(&cfg, &mut stream(seed, STREAM_PROBE_INIT))?;
    let mut eval_rng = stream(seed, STREAM_PROBE_EVAL);
    let refs: Vec<&TimestepSample> = dataset.iter().collect();
    stack.accuracy(&spec, &refs, &mut eval_rng)
}
