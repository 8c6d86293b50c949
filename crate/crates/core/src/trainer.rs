//! The training loop: rollout collection, joint policy plus auxiliary
//! updates, metrics and checkpoint output, greedy evaluation, and the
//! ablation harness.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::buffer::{collect_rollout, sample_aux_batch, Trajectory};
use crate::config::TrainConfig;
use crate::contrastive::{contrastive_accuracy, info_nce_batch, init_similarity};
use crate::envs::{make_env, ActionSpace, Env};
use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::masking::{apply_mask, sample_mask, MaskStrategy, MaskVariant, MaskVector};
use crate::nets::{ema_update, EncoderConfig, Mlp, ProjectorConfig};
use crate::optim::Adam;
use crate::params::{checkpoint, Lease, ParamStore};
use crate::ppo::{AuxTask, MarlPpo};
use crate::recon::{ReconConfig, Reconstructor};
use crate::tensor::Tensor;

/// Distinct deterministic random stream for purpose `k` under one run seed.
/// Streams never interact, so enabling or disabling one consumer (say,
/// the auxiliary task) leaves every other stream's draws untouched.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k))
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_AUX_INIT: u64 = 1;
pub const STREAM_AUX: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_UPDATE: u64 = 4;
const STREAM_ROLLOUT_BASE: u64 = 16;

/// Each (update, worker) pair draws from its own stream so multi-worker
/// rollouts merge deterministically regardless of scheduling.
fn rollout_stream(seed: u64, update: usize, worker: usize, n_workers: usize) -> ChaCha8Rng {
    let k = STREAM_ROLLOUT_BASE + (update * n_workers + worker) as u64;
    stream(seed, k)
}

pub const METRICS_HEADER: &str = "step,episode_return_mean,episode_return_std,rl_actor_loss,\
rl_value_loss,entropy,cl_loss,contrastive_accuracy,grad_norm,wall_time_s";

/// One line of metrics.csv, written after every update.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub episode_return_mean: f64,
    pub episode_return_std: f64,
    pub rl_actor_loss: f64,
    pub rl_value_loss: f64,
    pub entropy: f64,
    /// Unweighted contrastive loss; 0 when the auxiliary task is off.
    pub cl_loss: f64,
    pub contrastive_accuracy: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode_return_mean,
            self.episode_return_std,
            self.rl_actor_loss,
            self.rl_value_loss,
            self.entropy,
            self.cl_loss,
            self.contrastive_accuracy,
            self.grad_norm,
            self.wall_time_s
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.episode_return_mean,
            self.episode_return_std,
            self.rl_actor_loss,
            self.rl_value_loss,
            self.entropy,
            self.cl_loss,
            self.contrastive_accuracy,
            self.grad_norm,
            self.wall_time_s,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Config(format!(
                "metrics row has {} fields, expected 10: {line:?}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad metrics field {:?}", fields[i])))
        };
        Ok(Self {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad step field {:?}", fields[0])))?,
            episode_return_mean: num(1)?,
            episode_return_std: num(2)?,
            rl_actor_loss: num(3)?,
            rl_value_loss: num(4)?,
            entropy: num(5)?,
            cl_loss: num(6)?,
            contrastive_accuracy: num(7)?,
            grad_norm: num(8)?,
            wall_time_s: num(9)?,
        })
    }
}

/// Read a metrics.csv produced by [`train`] back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "{} does not start with the metrics header (got {other:?})",
                path.display()
            )));
        }
    }
    lines.map(MetricsRow::parse).collect()
}

// -------------------------------------------------------------------------
// Auxiliary task
// -------------------------------------------------------------------------

/// One masked timestep ready for the graph: tensors precomputed so that
/// attaching the loss consumes no randomness.
struct PreparedSample {
    masked_obs: Tensor,
    masked_act: Tensor,
    full_obs: Tensor,
    mask: MaskVector,
}

/// Masked-agent latent reconstruction with a contrastive objective, run
/// jointly with the policy update. Owns the projector, the attentive
/// reconstructor, the similarity matrix, and the EMA target copies of the
/// encoder and projector. The observation encoder itself belongs to the
/// actor: the online path runs through the actor's live lease, so policy
/// and auxiliary gradients land on the same parameters.
pub struct Ma2clTask {
    online: ParamStore,
    target_enc: ParamStore,
    target_proj: ParamStore,
    enc_net: Mlp,
    proj_net: Mlp,
    recon: Reconstructor,
    space: ActionSpace,
    strategy: MaskStrategy,
    n_mask: usize,
    aux_batch: usize,
    lambda: f64,
    tau: f64,
    prepared: Vec<PreparedSample>,
    lease: Option<Lease>,
    last_cl_loss: f64,
    last_accuracy: f64,
}

impl Ma2clTask {
    pub fn new(ppo: &MarlPpo, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let d_proj = cfg.proj_out_dim();
        let mut online = ParamStore::new();
        let proj_cfg = ProjectorConfig {
            in_dim: cfg.repr_dim,
            hidden_dim: cfg.proj_hidden,
            out_dim: d_proj,
        };
        let proj_net = Mlp::projector(&mut online, "proj", &proj_cfg, rng)?;
        let mut recon_cfg = ReconConfig::new(d_proj, ppo.space().embed_dim(), ppo.n_agents());
        recon_cfg.n_blocks = cfg.recon_blocks;
        recon_cfg.n_heads = cfg.recon_heads;
        recon_cfg.concat_action = cfg.concat_action;
        recon_cfg.pos_embedding = cfg.pos_embedding;
        let recon = Reconstructor::init(&mut online, "recon", &recon_cfg, rng)?;
        init_similarity(&mut online, "w", d_proj)?;

        let target_enc = ppo.actor.subset("enc.").target_copy();
        let target_proj = online.subset("proj.").target_copy();

        Ok(Self {
            online,
            target_enc,
            target_proj,
            enc_net: ppo.actor_encoder().clone(),
            proj_net,
            recon,
            space: ppo.space(),
            strategy: cfg.mask,
            n_mask: cfg.n_mask,
            aux_batch: cfg.aux_batch,
            lambda: cfg.lambda,
            tau: cfg.tau,
            prepared: Vec::new(),
            lease: None,
            last_cl_loss: 0.0,
            last_accuracy: 0.0,
        })
    }

    /// Draw the auxiliary batch and precompute every masked tensor. All
    /// randomness happens here; [`AuxTask::attach`] is pure graph building.
    pub fn prepare<R: Rng>(&mut self, trajs: &[Trajectory], rng: &mut R) -> Result<()> {
        let samples = sample_aux_batch(trajs, self.space, self.aux_batch, self.strategy.offset, rng)?;
        self.prepared.clear();
        for sample in &samples {
            let mask = sample_mask(sample.n_agents(), self.n_mask, rng)?;
            let (masked_obs, masked_act) = apply_mask(sample, &mask, &self.strategy, rng)?;
            self.prepared.push(PreparedSample {
                masked_obs,
                masked_act,
                full_obs: sample.obs_t.clone(),
                mask,
            });
        }
        Ok(())
    }

    pub fn online(&self) -> &ParamStore {
        &self.online
    }

    pub fn target_enc(&self) -> &ParamStore {
        &self.target_enc
    }

    pub fn target_proj(&self) -> &ParamStore {
        &self.target_proj
    }

    /// Unweighted contrastive loss of the last attached batch.
    pub fn last_cl_loss(&self) -> f64 {
        self.last_cl_loss
    }

    pub fn last_accuracy(&self) -> f64 {
        self.last_accuracy
    }

    /// Stack per-sample `[N, d]` tensors into one `[B*N, d]` constant so the
    /// whole batch runs through the encoder and projector in one pass.
    fn stacked<'a>(
        g: &Graph,
        parts: impl Iterator<Item = &'a Tensor>,
        rows_each: usize,
        dim: usize,
        count: usize,
    ) -> Result<Var> {
        let mut data = Vec::with_capacity(count * rows_each * dim);
        for t in parts {
            data.extend_from_slice(t.data());
        }
        Ok(g.constant(Tensor::from_vec(vec![count * rows_each, dim], data)?))
    }
}

impl AuxTask for Ma2clTask {
    fn attach(&mut self, g: &Graph, actor_lease: &Lease) -> Result<Var> {
        if self.prepared.is_empty() {
            return Err(Error::Training(
                "auxiliary loss attached before prepare".into(),
            ));
        }
        let b = self.prepared.len();
        let n = self.prepared[0].mask.len();
        let obs_dim = self.prepared[0].masked_obs.shape()[1];

        let masked_all = Self::stacked(
            g,
            self.prepared.iter().map(|p| &p.masked_obs),
            n,
            obs_dim,
            b,
        )?;
        let full_all = Self::stacked(g, self.prepared.iter().map(|p| &p.full_obs), n, obs_dim, b)?;

        let online = self.online.lease(g);
        let tenc = self.target_enc.lease(g);
        let tproj = self.target_proj.lease(g);

        // Online path through the actor's own encoder leaves.
        let z = self.enc_net.forward(actor_lease, &masked_all)?;
        let q_all = self.proj_net.forward(&online, &z)?;
        // Momentum path over the original observations; all constants.
        let t = self.enc_net.forward(&tenc, &full_all)?;
        let k_all = self.proj_net.forward(&tproj, &t)?;

        let mut pairs: Vec<(Var, Var)> = Vec::with_capacity(b);
        for (i, sample) in self.prepared.iter().enumerate() {
            let z_i = q_all.narrow_rows(i * n, n)?;
            let act = g.constant(sample.masked_act.clone());
            let tokens = self.recon.build_tokens(g, &online, &z_i, &act)?;
            let recovered = self.recon.reconstruct(&online, &tokens)?;
            let key = k_all.narrow_rows(i * n, n)?;
            pairs.push((recovered, key));
        }
        let items: Vec<(&Var, &Var, &MaskVector)> = pairs
            .iter()
            .zip(&self.prepared)
            .map(|((q, k), p)| (q, k, &p.mask))
            .collect();
        let w = online.var("w")?;
        let cl = info_nce_batch(&items, w)?;

        self.last_cl_loss = cl.item()?;
        let w_now = self.online.get("w")?;
        let mut hits = 0.0;
        let mut masked_total = 0usize;
        for ((q, k), p) in pairs.iter().zip(&self.prepared) {
            let acc = contrastive_accuracy(&q.value(), &k.value(), w_now, &p.mask)?;
            hits += acc * p.mask.n_masked() as f64;
            masked_total += p.mask.n_masked();
        }
        self.last_accuracy = if masked_total == 0 {
            0.0
        } else {
            hits / masked_total as f64
        };

        let weighted = cl.smul(self.lambda)?;
        self.lease = Some(online);
        Ok(weighted)
    }

    fn collect_grads(
        &mut self,
        grads: &GradStore,
        out: &mut IndexMap<String, Tensor>,
    ) -> Result<()> {
        let lease = self.lease.take().ok_or_else(|| {
            Error::Training("auxiliary gradients requested before attach".into())
        })?;
        for (name, grad) in lease.grads(grads) {
            out.insert(format!("aux.{name}"), grad);
        }
        Ok(())
    }

    fn apply(&mut self, adam: &mut Adam, lr: f64, grads: &IndexMap<String, Tensor>) -> Result<()> {
        adam.step(lr, "aux", &mut self.online, grads)
    }

    fn after_step(&mut self, actor: &ParamStore) -> Result<()> {
        ema_update(&mut self.target_enc, &actor.subset("enc."), self.tau)?;
        ema_update(&mut self.target_proj, &self.online.subset("proj."), self.tau)
    }
}

// -------------------------------------------------------------------------
// Training loop
// -------------------------------------------------------------------------

/// Outcome of one full run.
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub final_eval_mean: f64,
    pub final_eval_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Returns of completed episodes across the batch, in worker order.
/// Falls back to partial sums when nothing finished inside the window.
fn episode_return_stats(trajs: &[Trajectory]) -> (f64, f64) {
    let mut complete = Vec::new();
    let mut partial = Vec::new();
    for traj in trajs {
        for seg in traj.segments() {
            let ret: f64 = traj.rewards[seg.start..seg.end].iter().sum();
            if seg.truncated {
                partial.push(ret);
            } else {
                complete.push(ret);
            }
        }
    }
    if complete.is_empty() {
        mean_std(&partial)
    } else {
        mean_std(&complete)
    }
}

fn collect_batch(
    envs: &mut [Box<dyn Env>],
    ppo: &MarlPpo,
    n_steps: usize,
    seed: u64,
    update: usize,
) -> Result<Vec<Trajectory>> {
    let n_workers = envs.len();
    if n_workers == 1 {
        let mut rng = rollout_stream(seed, update, 0, 1);
        return Ok(vec![collect_rollout(envs[0].as_mut(), ppo, n_steps, &mut rng)?]);
    }
    let results: Vec<Result<Trajectory>> = std::thread::scope(|scope| {
        let handles: Vec<_> = envs
            .iter_mut()
            .enumerate()
            .map(|(w, env)| {
                scope.spawn(move || {
                    let mut rng = rollout_stream(seed, update, w, n_workers);
                    collect_rollout(env.as_mut(), ppo, n_steps, &mut rng)
                })
            })
            .collect();
        // Join in spawn order so the merged batch is schedule-independent.
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Average greedy return over fresh episodes.
pub fn evaluate(
    env: &mut dyn Env,
    ppo: &MarlPpo,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng)?;
        let mut total = 0.0;
        loop {
            let action = ppo.greedy(&obs)?;
            let out = env.step(&action)?;
            total += out.team_reward;
            obs = out.obs;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

fn save_checkpoint(dir: &Path, ppo: &MarlPpo, task: Option<&Ma2clTask>) -> Result<()> {
    match task {
        Some(t) => checkpoint::save(
            dir,
            &[
                ("actor", &ppo.actor),
                ("critic", &ppo.critic),
                ("aux", &t.online),
                ("target_enc", &t.target_enc),
                ("target_proj", &t.target_proj),
            ],
        ),
        None => checkpoint::save(dir, &[("actor", &ppo.actor), ("critic", &ppo.critic)]),
    }
}

/// Rebuild a policy (and its auxiliary stores, when enabled) from a run
/// directory written by [`train`], loading the latest checkpoint.
pub fn load_policy(run_dir: &Path) -> Result<(TrainConfig, MarlPpo)> {
    let cfg = TrainConfig::from_file(&run_dir.join("config.txt"))?;
    let env = make_env(&cfg.env_name, cfg.n_agents)?;
    let enc_cfg = EncoderConfig {
        obs_dim: env.obs_dim(),
        hidden_dims: cfg.hidden_dims.clone(),
        repr_dim: cfg.repr_dim,
    };
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut ppo = MarlPpo::init(
        cfg.ppo.clone(),
        &enc_cfg,
        cfg.n_agents,
        env.action_space(),
        &mut init_rng,
    )?;
    let ckpt = run_dir.join("checkpoint");
    if cfg.ma2cl_enabled {
        let mut aux_rng = stream(cfg.seed, STREAM_AUX_INIT);
        let mut task = Ma2clTask::new(&ppo, &cfg, &mut aux_rng)?;
        checkpoint::load_into(
            &ckpt,
            &mut [
                ("actor", &mut ppo.actor),
                ("critic", &mut ppo.critic),
                ("aux", &mut task.online),
                ("target_enc", &mut task.target_enc),
                ("target_proj", &mut task.target_proj),
            ],
        )?;
    } else {
        checkpoint::load_into(
            &ckpt,
            &mut [("actor", &mut ppo.actor), ("critic", &mut ppo.critic)],
        )?;
    }
    Ok((cfg, ppo))
}

/// Run one training configuration end to end, writing `config.txt`,
/// `metrics.csv`, `eval.csv`, and a `checkpoint/` directory under `out_dir`.
/// The checkpoint is rewritten after every successful update, so an abort
/// always leaves the last good parameters on disk.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;

    let mut envs: Vec<Box<dyn Env>> = (0..cfg.rollout_threads)
        .map(|_| make_env(&cfg.env_name, cfg.n_agents))
        .collect::<Result<_>>()?;
    let mut eval_env = make_env(&cfg.env_name, cfg.n_agents)?;
    let obs_dim = envs[0].obs_dim();
    let space = envs[0].action_space();

    let enc_cfg = EncoderConfig {
        obs_dim,
        hidden_dims: cfg.hidden_dims.clone(),
        repr_dim: cfg.repr_dim,
    };
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut ppo = MarlPpo::init(cfg.ppo.clone(), &enc_cfg, cfg.n_agents, space, &mut init_rng)?;
    let mut task = if cfg.ma2cl_enabled {
        let mut aux_init_rng = stream(cfg.seed, STREAM_AUX_INIT);
        Some(Ma2clTask::new(&ppo, cfg, &mut aux_init_rng)?)
    } else {
        None
    };

    let mut adam = Adam::default();
    let mut aux_rng = stream(cfg.seed, STREAM_AUX);
    let mut update_rng = stream(cfg.seed, STREAM_UPDATE);
    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_file = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    let eval_path = out_dir.join("eval.csv");
    let mut eval_file = BufWriter::new(File::create(&eval_path)?);
    writeln!(eval_file, "step,eval_return_mean,eval_return_std")?;

    let ckpt_dir = out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &ppo, task.as_ref())?;

    let updates = cfg.num_updates();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(updates);

    for u in 0..updates {
        let trajs = collect_batch(&mut envs, &ppo, cfg.episode_length, cfg.seed, u)?;
        if let Some(t) = task.as_mut() {
            t.prepare(&trajs, &mut aux_rng)?;
        }
        let aux_dyn: Option<&mut dyn AuxTask> =
            task.as_mut().map(|t| t as &mut dyn AuxTask);
        let stats = ppo.update(&trajs, &mut adam, &mut update_rng, aux_dyn)?;

        let (ret_mean, ret_std) = episode_return_stats(&trajs);
        let (cl, acc) = task
            .as_ref()
            .map(|t| (t.last_cl_loss, t.last_accuracy))
            .unwrap_or((0.0, 0.0));
        let row = MetricsRow {
            step: (u + 1) * cfg.steps_per_update(),
            episode_return_mean: ret_mean,
            episode_return_std: ret_std,
            rl_actor_loss: stats.actor_loss,
            rl_value_loss: stats.value_loss,
            entropy: stats.entropy,
            cl_loss: cl,
            contrastive_accuracy: acc,
            grad_norm: stats.grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if !row.is_finite() {
            return Err(Error::Training(format!(
                "non-finite metrics after {} steps; last good checkpoint kept",
                row.step
            )));
        }
        writeln!(metrics_file, "{}", row.to_csv())?;
        metrics_file.flush()?;
        save_checkpoint(&ckpt_dir, &ppo, task.as_ref())?;
        rows.push(row);

        let last = u + 1 == updates;
        if cfg.eval_interval > 0 && (u + 1) % cfg.eval_interval == 0 && !last {
            let (em, es) = evaluate(eval_env.as_mut(), &ppo, cfg.eval_episodes, &mut eval_rng)?;
            writeln!(eval_file, "{},{em},{es}", row.step)?;
            eval_file.flush()?;
        }
    }

    let (final_eval_mean, final_eval_std) =
        evaluate(eval_env.as_mut(), &ppo, cfg.eval_episodes, &mut eval_rng)?;
    let final_step = updates * cfg.steps_per_update();
    writeln!(eval_file, "{final_step},{final_eval_mean},{final_eval_std}")?;
    eval_file.flush()?;

    Ok(RunResult {
        rows,
        final_eval_mean,
        final_eval_std,
    })
}

// -------------------------------------------------------------------------
// Ablation harness
// -------------------------------------------------------------------------

pub const ABLATION_PRESETS: [&str; 7] = [
    "strategy_sweep",
    "nmask_sweep",
    "offset_sweep",
    "lambda_sweep",
    "concat_action_off",
    "pos_embed_off",
    "baseline",
];

/// Variant labels and configs for a named preset, before seeding.
pub fn ablation_variants(preset: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let mut variants = Vec::new();
    match preset {
        "strategy_sweep" => {
            for v in [
                MaskVariant::PrevStep,
                MaskVariant::PrevStepGauss,
                MaskVariant::FullGauss,
                MaskVariant::Zero,
            ] {
                let mut cfg = base.clone();
                cfg.mask.variant = v;
                variants.push((v.name().to_string(), cfg));
            }
        }
        "nmask_sweep" => {
            for m in 1..=base.n_agents {
                let mut cfg = base.clone();
                cfg.n_mask = m;
                variants.push((format!("nmask{m}"), cfg));
            }
        }
        "offset_sweep" => {
            for k in 1..=4usize {
                let mut cfg = base.clone();
                cfg.mask.offset = k;
                variants.push((format!("k{k}"), cfg));
            }
        }
        "lambda_sweep" => {
            for l in [0.1, 0.5, 1.0, 2.0] {
                let mut cfg = base.clone();
                cfg.lambda = l;
                variants.push((format!("lambda{l}"), cfg));
            }
        }
        "concat_action_off" => {
            let mut cfg = base.clone();
            cfg.concat_action = false;
            variants.push(("concat_action_off".to_string(), cfg));
        }
        "pos_embed_off" => {
            let mut cfg = base.clone();
            cfg.pos_embedding = false;
            variants.push(("pos_embed_off".to_string(), cfg));
        }
        "baseline" => {
            let mut cfg = base.clone();
            cfg.ma2cl_enabled = false;
            variants.push(("baseline".to_string(), cfg));
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation preset {other:?}; expected one of {}",
                ABLATION_PRESETS.join(", ")
            )));
        }
    }
    Ok(variants)
}

/// Run every variant of a preset over `n_seeds` consecutive seeds. Output
/// lands under `out_root/<preset>/<variant>/seed<N>/`; returns the metrics
/// paths in run order.
pub fn run_ablation(
    preset: &str,
    base: &TrainConfig,
    out_root: &Path,
    n_seeds: usize,
) -> Result<Vec<PathBuf>> {
    if n_seeds == 0 {
        return Err(Error::Config("need at least one ablation seed".into()));
    }
    let variants = ablation_variants(preset, base)?;
    let mut paths = Vec::new();
    for (label, variant) in &variants {
        for s in 0..n_seeds as u64 {
            let mut cfg = variant.clone();
            cfg.seed = base.seed + s;
            let dir = out_root
                .join(preset)
                .join(label)
                .join(format!("seed{}", cfg.seed));
            train(&cfg, &dir)?;
            paths.push(dir.join("metrics.csv"));
        }
    }
    Ok(paths)
}
