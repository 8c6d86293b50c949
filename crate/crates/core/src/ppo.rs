//! Shared-parameter actor with a centralized critic, trained by clipped
//! proximal policy optimization on team rewards.
//!
//! All agents run one actor network; the critic consumes the concatenated
//! joint observation in fixed agent order and its value is shared by every
//! agent. An auxiliary objective can join the first gradient step of each
//! update through [`AuxTask`], reusing the actor's leased encoder so both
//! objectives shape the same representation.

use indexmap::IndexMap;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::buffer::Trajectory;
use crate::envs::{ActionSpace, EnvAction};
use crate::error::{Error, Result};
use crate::graph::{GradStore, Graph, Var};
use crate::nets::{Activation, EncoderConfig, Mlp};
use crate::optim::{clip_global_norm, Adam};
use crate::params::{Lease, ParamStore};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;
pub const LOG_STD_INIT: f64 = -0.5;

#[derive(Clone, Debug)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub num_mini_batch: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub use_huber: bool,
    pub huber_delta: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 5,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 1.0,
            max_grad_norm: 10.0,
            num_mini_batch: 1,
            lr_actor: 5e-4,
            lr_critic: 5e-4,
            use_huber: true,
            huber_delta: 10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidArg { op: "ppo_config", why });
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if self.ppo_epochs == 0 || self.num_mini_batch == 0 {
            return bad("ppo_epochs and num_mini_batch must be positive".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip {} must be positive", self.clip));
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm {} must be positive", self.max_grad_norm));
        }
        if !(self.lr_actor >= 0.0 && self.lr_critic >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.use_huber && !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta {} must be positive", self.huber_delta));
        }
        if !(self.entropy_coef.is_finite() && self.value_coef.is_finite()) {
            return bad("loss coefficients must be finite".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distribution helpers
// ---------------------------------------------------------------------------

/// Row-wise log-density of `actions: [R, d]` under a diagonal Gaussian with
/// `mean: [R, d]` and state-independent `log_std: [d]`. Returns `[R]`.
pub fn gaussian_log_prob(mean: &Var, log_std: &Var, actions: &Var) -> Result<Var> {
    let d = log_std.shape().iter().product::<usize>() as f64;
    let inv_std = log_std.neg()?.exp()?;
    let z = actions.sub(mean)?.mul(&inv_std)?;
    let per_dim = z.mul(&z)?.smul(-0.5)?.sub(log_std)?;
    per_dim.sum_last()?.sadd(-0.5 * LN_2PI * d)
}

/// Differential entropy of the diagonal Gaussian, a scalar shared by all rows.
pub fn gaussian_entropy(log_std: &Var) -> Result<Var> {
    log_std.sadd(0.5 * (1.0 + LN_2PI))?.sum()
}

/// Log-probability of the chosen index per row of `logits: [R, n]`.
pub fn categorical_log_prob(logits: &Var, actions: &[usize]) -> Result<Var> {
    logits.log_softmax_last()?.gather_last(actions)
}

/// Mean entropy of the categorical rows of `logits: [R, n]`.
pub fn categorical_entropy(logits: &Var) -> Result<Var> {
    let lp = logits.log_softmax_last()?;
    let p = lp.exp()?;
    p.mul(&lp)?.sum_last()?.neg()?.mean()
}

/// Invert the cumulative distribution of one probability row at `u ∈ [0, 1)`.
pub fn categorical_pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

/// Raw policy sample as drawn, before any squashing. This is what the
/// likelihood ratio is evaluated on during updates.
#[derive(Clone, Debug)]
pub enum ActionRecord {
    /// Pre-squash Gaussian draws, `[n_agents, dim]`.
    Continuous(Tensor),
    /// One category per agent.
    Discrete(Vec<usize>),
}

impl ActionRecord {
    /// Executed form handed to the environment: tanh squash for continuous
    /// draws, the indices as-is for discrete ones.
    pub fn to_env(&self) -> EnvAction {
        match self {
            ActionRecord::Continuous(raw) => EnvAction::Continuous(raw.map(f64::tanh)),
            ActionRecord::Discrete(idx) => EnvAction::Discrete(idx.clone()),
        }
    }

    /// Row embedding of the executed action for token building: the squashed
    /// vector for continuous control, a one-hot row for discrete control.
    pub fn embed(&self, space: ActionSpace) -> Result<Tensor> {
        match (self, space) {
            (ActionRecord::Continuous(raw), ActionSpace::Continuous { dim }) => {
                if raw.shape().len() != 2 || raw.shape()[1] != dim {
                    return Err(Error::InvalidShape {
                        op: "action_embed",
                        shape: raw.shape().to_vec(),
                        why: format!("expected [n_agents, {dim}]"),
                    });
                }
                Ok(raw.map(f64::tanh))
            }
            (ActionRecord::Discrete(idx), ActionSpace::Discrete { n }) => {
                let mut data = vec![0.0; idx.len() * n];
                for (i, &a) in idx.iter().enumerate() {
                    if a >= n {
                        return Err(Error::InvalidArg {
                            op: "action_embed",
                            why: format!("action {a} outside 0..{n}"),
                        });
                    }
                    data[i * n + a] = 1.0;
                }
                Tensor::from_vec(vec![idx.len(), n], data)
            }
            _ => Err(Error::InvalidArg {
                op: "action_embed",
                why: "action record does not match the action space".into(),
            }),
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            ActionRecord::Continuous(raw) => raw.shape()[0],
            ActionRecord::Discrete(idx) => idx.len(),
        }
    }
}

/// One sampled decision for a joint observation.
#[derive(Clone, Debug)]
pub struct ActDecision {
    pub record: ActionRecord,
    pub env_action: EnvAction,
    /// Per-agent log-probability of the raw record under the current policy.
    pub log_probs: Vec<f64>,
    /// Centralized value estimate, shared by all agents.
    pub value: f64,
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

pub struct MarlPpo {
    pub actor: ParamStore,
    pub critic: ParamStore,
    actor_enc: Mlp,
    actor_head: Mlp,
    critic_enc: Mlp,
    critic_head: Mlp,
    space: ActionSpace,
    n_agents: usize,
    obs_dim: usize,
    cfg: PpoConfig,
}

impl MarlPpo {
    pub fn init(
        cfg: PpoConfig,
        enc_cfg: &EncoderConfig,
        n_agents: usize,
        space: ActionSpace,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_agents == 0 {
            return Err(Error::InvalidArg {
                op: "ppo_init",
                why: "need at least one agent".into(),
            });
        }
        let obs_dim = enc_cfg.obs_dim;
        let head_out = match space {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { n } => n,
        };
        if head_out == 0 {
            return Err(Error::InvalidArg {
                op: "ppo_init",
                why: "action space must have positive width".into(),
            });
        }

        let mut actor = ParamStore::new();
        let actor_enc = Mlp::encoder(&mut actor, "enc", enc_cfg, rng)?;
        let actor_head = Mlp::init(
            &mut actor,
            "head",
            &[enc_cfg.repr_dim, head_out],
            Activation::Linear,
            Activation::Linear,
            rng,
        )?;
        if let ActionSpace::Continuous { dim } = space {
            actor.insert("log_std", Tensor::full(&[dim], LOG_STD_INIT))?;
        }

        let mut critic = ParamStore::new();
        let joint_cfg = EncoderConfig {
            obs_dim: n_agents * obs_dim,
            hidden_dims: enc_cfg.hidden_dims.clone(),
            repr_dim: enc_cfg.repr_dim,
        };
        let critic_enc = Mlp::encoder(&mut critic, "enc", &joint_cfg, rng)?;
        let critic_head = Mlp::init(
            &mut critic,
            "head",
            &[enc_cfg.repr_dim, 1],
            Activation::Linear,
            Activation::Linear,
            rng,
        )?;

        Ok(Self {
            actor,
            critic,
            actor_enc,
            actor_head,
            critic_enc,
            critic_head,
            space,
            n_agents,
            obs_dim,
            cfg,
        })
    }

    pub fn cfg(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// The actor's observation encoder. The auxiliary task calls this with
    /// the same lease as the policy loss, so both heads train one encoder.
    pub fn encode_actor(&self, lease: &Lease, obs: &Var) -> Result<Var> {
        self.actor_enc.forward(lease, obs)
    }

    /// Encoder descriptor, for running the same architecture over a
    /// target parameter store.
    pub fn actor_encoder(&self) -> &Mlp {
        &self.actor_enc
    }

    /// Mean (continuous) or logits (discrete) for observation rows.
    pub fn policy_head(&self, lease: &Lease, obs: &Var) -> Result<Var> {
        let z = self.actor_enc.forward(lease, obs)?;
        self.actor_head.forward(lease, &z)
    }

    /// Per-step values for joint observation rows, `[rows, N·obs] -> [rows]`.
    pub fn critic_values(&self, lease: &Lease, joint: &Var) -> Result<Var> {
        let z = self.critic_enc.forward(lease, joint)?;
        let v = self.critic_head.forward(lease, &z)?;
        let rows = v.shape()[0];
        v.reshape(&[rows])
    }

    fn check_obs(&self, obs: &Tensor) -> Result<()> {
        if obs.shape() != [self.n_agents, self.obs_dim] {
            return Err(Error::InvalidShape {
                op: "ppo_act",
                shape: obs.shape().to_vec(),
                why: format!("expected [{}, {}]", self.n_agents, self.obs_dim),
            });
        }
        obs.ensure_finite("observation")
    }

    /// Concatenate the per-agent rows into the critic's joint row.
    pub fn joint_row(&self, obs: &Tensor) -> Tensor {
        Tensor::from_vec(vec![1, self.n_agents * self.obs_dim], obs.data().to_vec())
            .expect("joint row shape")
    }

    /// Value of one joint observation under the current critic.
    pub fn value_of(&self, obs: &Tensor) -> Result<f64> {
        self.check_obs(obs)?;
        let g = Graph::new();
        let lease = self.critic.lease_frozen(&g);
        let joint = g.constant(self.joint_row(obs));
        self.critic_values(&lease, &joint)?.value().data()[0].ensure()
    }

    /// Sample one joint action, with per-agent log-probabilities and the
    /// centralized value, all under the current parameters.
    pub fn act(&self, obs: &Tensor, rng: &mut dyn RngCore) -> Result<ActDecision> {
        self.check_obs(obs)?;
        let g = Graph::new();
        let actor_lease = self.actor.lease_frozen(&g);
        let critic_lease = self.critic.lease_frozen(&g);
        let obs_var = g.constant(obs.clone());
        let head = self.policy_head(&actor_lease, &obs_var)?;

        let (record, logp) = match self.space {
            ActionSpace::Continuous { dim } => {
                let log_std = actor_lease.var("log_std")?;
                let std = log_std.value().map(f64::exp);
                let mean = head.value();
                let mut raw = Tensor::zeros(&[self.n_agents, dim]);
                for i in 0..self.n_agents {
                    for (j, slot) in raw.row_mut(i).iter_mut().enumerate() {
                        let eps: f64 = StandardNormal.sample(&mut *rng);
                        *slot = mean.row(i)[j] + eps * std.data()[j];
                    }
                }
                let actions = g.constant(raw.clone());
                let logp = gaussian_log_prob(&head, log_std, &actions)?;
                (ActionRecord::Continuous(raw), logp)
            }
            ActionSpace::Discrete { .. } => {
                let probs = head.softmax_last()?.value();
                let mut idx = Vec::with_capacity(self.n_agents);
                for i in 0..self.n_agents {
                    let u: f64 = rand::Rng::random::<f64>(&mut *rng);
                    idx.push(categorical_pick(probs.row(i), u));
                }
                let logp = categorical_log_prob(&head, &idx)?;
                (ActionRecord::Discrete(idx), logp)
            }
        };

        let joint = g.constant(self.joint_row(obs));
        let value = self.critic_values(&critic_lease, &joint)?.value().data()[0];
        let log_probs = logp.value().data().to_vec();
        for &lp in &log_probs {
            lp.ensure()?;
        }
        Ok(ActDecision {
            env_action: record.to_env(),
            record,
            log_probs,
            value: value.ensure()?,
        })
    }

    /// Deterministic action: distribution mean (squashed) or argmax category,
    /// ties resolving to the lowest index.
    pub fn greedy(&self, obs: &Tensor) -> Result<EnvAction> {
        self.check_obs(obs)?;
        let g = Graph::new();
        let lease = self.actor.lease_frozen(&g);
        let head = self.policy_head(&lease, &g.constant(obs.clone()))?.value();
        Ok(match self.space {
            ActionSpace::Continuous { .. } => EnvAction::Continuous(head.map(f64::tanh)),
            ActionSpace::Discrete { .. } => EnvAction::Discrete(
                (0..self.n_agents).map(|i| argmax(head.row(i))).collect(),
            ),
        })
    }
}

trait EnsureFinite {
    fn ensure(self) -> Result<f64>;
}

impl EnsureFinite for f64 {
    fn ensure(self) -> Result<f64> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite {
                context: "policy evaluation".into(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Generalized advantage estimation over one episode segment.
/// `delta_t = r_t + gamma·V_{t+1} − V_t` with `V_T = bootstrap`;
/// `adv_t = Σ_{l≥0} (gamma·lam)^l delta_{t+l}`; `returns = adv + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(Error::InvalidArg {
            op: "compute_gae",
            why: format!(
                "need matching non-empty slices, got {} rewards and {} values",
                rewards.len(),
                values.len()
            ),
        });
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidArg {
            op: "compute_gae",
            why: format!("gamma {gamma} and lam {lam} must lie in [0, 1]"),
        });
    }
    let t_max = rewards.len();
    let mut adv = vec![0.0; t_max];
    let mut carry = 0.0;
    for t in (0..t_max).rev() {
        let next_v = if t + 1 == t_max { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_v - values[t];
        carry = delta + gamma * lam * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Clipped surrogate: `−mean(min(r·adv, clip(r, 1−ε, 1+ε)·adv))` with
/// `r = exp(logp_new − logp_old)`.
pub fn ppo_actor_loss(logp_new: &Var, logp_old: &Var, adv: &Var, eps_clip: f64) -> Result<Var> {
    if !(eps_clip > 0.0) {
        return Err(Error::InvalidArg {
            op: "ppo_actor_loss",
            why: format!("eps_clip {eps_clip} must be positive"),
        });
    }
    let ratio = logp_new.sub(logp_old)?.exp()?;
    ratio.value().ensure_finite("ppo ratio")?;
    let unclipped = ratio.mul(adv)?;
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip)?.mul(adv)?;
    unclipped.minimum(&clipped)?.mean()?.neg()
}

/// Mean Huber loss (quadratic within `delta`, linear outside) of the value
/// errors, or plain mean squared error when `huber_delta` is `None`.
pub fn value_loss(values: &Var, returns: &Var, huber_delta: Option<f64>) -> Result<Var> {
    let err = values.sub(returns)?;
    match huber_delta {
        None => err.mul(&err)?.mean(),
        Some(delta) => {
            if !(delta > 0.0) {
                return Err(Error::InvalidArg {
                    op: "value_loss",
                    why: format!("huber_delta {delta} must be positive"),
                });
            }
            // clamp composition: a·e − a²/2 is e²/2 inside the band and
            // delta·(|e| − delta/2) outside, with the exact Huber gradient.
            let band = err.clamp(-delta, delta)?;
            let quad = band.mul(&band)?.smul(0.5)?;
            band.mul(&err)?.sub(&quad)?.mean()
        }
    }
}

// ---------------------------------------------------------------------------
// Joint update
// ---------------------------------------------------------------------------

/// Auxiliary objective attached to the first gradient step of each update.
pub trait AuxTask {
    /// Build the weighted auxiliary loss on this graph. Receives the actor's
    /// live lease so the shared encoder is the same graph object.
    fn attach(&mut self, g: &Graph, actor_lease: &Lease) -> Result<Var>;
    /// Copy gradients of auxiliary-owned parameters into the joint map,
    /// under this task's own prefix.
    fn collect_grads(
        &mut self,
        grads: &GradStore,
        out: &mut IndexMap<String, Tensor>,
    ) -> Result<()>;
    /// Apply the optimizer to auxiliary-owned parameters.
    fn apply(&mut self, adam: &mut Adam, lr: f64, grads: &IndexMap<String, Tensor>) -> Result<()>;
    /// Runs after every optimizer step of the update (target tracking).
    fn after_step(&mut self, actor: &ParamStore) -> Result<()>;
}

/// Scalar diagnostics of one update, averaged over its gradient steps.
#[derive(Clone, Copy, Debug)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Pre-clip global gradient norm of the first step (the one carrying the
    /// auxiliary term when enabled).
    pub grad_norm: f64,
}

struct FlatBatch {
    /// Per agent-row, step-major.
    obs: Vec<Vec<f64>>,
    records: Vec<ActionRecord>,
    logp_old: Vec<f64>,
    adv: Vec<f64>,
    /// Per step: joint rows and return targets.
    joint: Vec<Vec<f64>>,
    returns: Vec<f64>,
}

impl MarlPpo {
    fn flatten(&self, trajs: &[Trajectory]) -> Result<FlatBatch> {
        let mut batch = FlatBatch {
            obs: Vec::new(),
            records: Vec::new(),
            logp_old: Vec::new(),
            adv: Vec::new(),
            joint: Vec::new(),
            returns: Vec::new(),
        };
        for traj in trajs {
            if traj.n_agents != self.n_agents || traj.obs_dim != self.obs_dim {
                return Err(Error::Training(format!(
                    "trajectory shaped for {} agents x {} dims, policy expects {} x {}",
                    traj.n_agents, traj.obs_dim, self.n_agents, self.obs_dim
                )));
            }
            let mut adv_all = vec![0.0; traj.len()];
            let mut ret_all = vec![0.0; traj.len()];
            for seg in traj.segments() {
                let bootstrap = if seg.truncated { traj.bootstrap_value } else { 0.0 };
                let (adv, ret) = compute_gae(
                    &traj.rewards[seg.start..seg.end],
                    &traj.values[seg.start..seg.end],
                    bootstrap,
                    self.cfg.gamma,
                    self.cfg.gae_lambda,
                )?;
                adv_all[seg.start..seg.end].copy_from_slice(&adv);
                ret_all[seg.start..seg.end].copy_from_slice(&ret);
            }
            for t in 0..traj.len() {
                batch.joint.push(traj.obs[t].data().to_vec());
                batch.returns.push(ret_all[t]);
                batch.records.push(traj.records[t].clone());
                for agent in 0..self.n_agents {
                    batch.obs.push(traj.obs[t].row(agent).to_vec());
                    batch.logp_old.push(traj.log_probs[t][agent]);
                    batch.adv.push(adv_all[t]);
                }
            }
        }
        if batch.joint.is_empty() {
            return Err(Error::Training("update called with no steps".into()));
        }
        Ok(batch)
    }

    /// Normalize advantages in place over the whole batch.
    fn normalize_adv(adv: &mut [f64]) {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let denom = var.sqrt() + 1e-5;
        for a in adv.iter_mut() {
            *a = (*a - mean) / denom;
        }
    }

    fn minibatch_tensors(
        &self,
        batch: &FlatBatch,
        steps: &[usize],
    ) -> Result<(Tensor, Tensor, ActionRecord, Tensor, Tensor, Tensor)> {
        let n = self.n_agents;
        let mut obs_rows = Vec::with_capacity(steps.len() * n);
        let mut logp_old = Vec::with_capacity(steps.len() * n);
        let mut adv = Vec::with_capacity(steps.len() * n);
        let mut joint_rows = Vec::with_capacity(steps.len());
        let mut returns = Vec::with_capacity(steps.len());
        for &s in steps {
            joint_rows.push(batch.joint[s].clone());
            returns.push(batch.returns[s]);
            for agent in 0..n {
                let row = s * n + agent;
                obs_rows.push(batch.obs[row].clone());
                logp_old.push(batch.logp_old[row]);
                adv.push(batch.adv[row]);
            }
        }
        let actions = match self.space {
            ActionSpace::Continuous { .. } => {
                let mut rows = Vec::with_capacity(steps.len() * n);
                for &s in steps {
                    let ActionRecord::Continuous(raw) = &batch.records[s] else {
                        return Err(Error::Training("mixed action records".into()));
                    };
                    for agent in 0..n {
                        rows.push(raw.row(agent).to_vec());
                    }
                }
                ActionRecord::Continuous(Tensor::from_rows(&rows)?)
            }
            ActionSpace::Discrete { .. } => {
                let mut idx = Vec::with_capacity(steps.len() * n);
                for &s in steps {
                    let ActionRecord::Discrete(a) = &batch.records[s] else {
                        return Err(Error::Training("mixed action records".into()));
                    };
                    idx.extend_from_slice(a);
                }
                ActionRecord::Discrete(idx)
            }
        };
        Ok((
            Tensor::from_rows(&obs_rows)?,
            Tensor::from_rows(&joint_rows)?,
            actions,
            Tensor::from_vec(vec![logp_old.len()], logp_old)?,
            Tensor::from_vec(vec![adv.len()], adv)?,
            Tensor::from_vec(vec![returns.len()], returns)?,
        ))
    }

    /// One PPO update over collected trajectories, with the auxiliary task
    /// (when present) attached to the first minibatch of the first epoch and
    /// its target tracking applied after every gradient step.
    pub fn update(
        &mut self,
        trajs: &[Trajectory],
        adam: &mut Adam,
        rng: &mut dyn RngCore,
        mut aux: Option<&mut dyn AuxTask>,
    ) -> Result<UpdateStats> {
        let mut batch = self.flatten(trajs)?;
        Self::normalize_adv(&mut batch.adv);

        let n_steps = batch.joint.len();
        if self.cfg.num_mini_batch > n_steps {
            return Err(Error::Training(format!(
                "cannot split {n_steps} steps into {} minibatches",
                self.cfg.num_mini_batch
            )));
        }

        let mut sums = (0.0, 0.0, 0.0);
        let mut first_norm = None;
        let mut steps_done = 0usize;

        for epoch in 0..self.cfg.ppo_epochs {
            let mut order: Vec<usize> = (0..n_steps).collect();
            if self.cfg.num_mini_batch > 1 {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut *rng);
            }
            let chunk_len = n_steps.div_ceil(self.cfg.num_mini_batch);
            for (mb, chunk) in order.chunks(chunk_len).enumerate() {
                let (obs, joint, actions, logp_old, adv, returns) =
                    self.minibatch_tensors(&batch, chunk)?;

                let g = Graph::new();
                let actor_lease = self.actor.lease(&g);
                let critic_lease = self.critic.lease(&g);

                let head = self.policy_head(&actor_lease, &g.constant(obs))?;
                let (logp_new, entropy) = match &actions {
                    ActionRecord::Continuous(raw) => {
                        let log_std = actor_lease.var("log_std")?;
                        let lp =
                            gaussian_log_prob(&head, log_std, &g.constant(raw.clone()))?;
                        (lp, gaussian_entropy(log_std)?)
                    }
                    ActionRecord::Discrete(idx) => (
                        categorical_log_prob(&head, idx)?,
                        categorical_entropy(&head)?,
                    ),
                };
                let actor_loss = ppo_actor_loss(
                    &logp_new,
                    &g.constant(logp_old),
                    &g.constant(adv),
                    self.cfg.clip,
                )?;
                let values = self.critic_values(&critic_lease, &g.constant(joint))?;
                let huber = self.cfg.use_huber.then_some(self.cfg.huber_delta);
                let v_loss = value_loss(&values, &g.constant(returns), huber)?;

                let mut total = actor_loss
                    .add(&v_loss.smul(self.cfg.value_coef)?)?
                    .sub(&entropy.smul(self.cfg.entropy_coef)?)?;
                let aux_attached = epoch == 0 && mb == 0 && aux.is_some();
                if aux_attached {
                    let term = aux.as_mut().unwrap().attach(&g, &actor_lease)?;
                    total = total.add(&term)?;
                }

                let total_val = total.item()?;
                if !total_val.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch} minibatch {mb}: actor {} value {} entropy {}",
                        actor_loss.item()?,
                        v_loss.item()?,
                        entropy.item()?
                    )));
                }

                let grads = g.backward(&total)?;
                let mut joint_grads: IndexMap<String, Tensor> = IndexMap::new();
                for (name, grad) in actor_lease.grads(&grads) {
                    joint_grads.insert(format!("actor.{name}"), grad);
                }
                for (name, grad) in critic_lease.grads(&grads) {
                    joint_grads.insert(format!("critic.{name}"), grad);
                }
                if aux_attached {
                    aux.as_mut().unwrap().collect_grads(&grads, &mut joint_grads)?;
                }

                let pre_norm = clip_global_norm(&mut joint_grads, self.cfg.max_grad_norm)?;
                first_norm.get_or_insert(pre_norm);

                adam.step(self.cfg.lr_actor, "actor", &mut self.actor, &joint_grads)?;
                adam.step(self.cfg.lr_critic, "critic", &mut self.critic, &joint_grads)?;
                if let Some(task) = aux.as_mut() {
                    if aux_attached {
                        task.apply(adam, self.cfg.lr_actor, &joint_grads)?;
                    }
                    task.after_step(&self.actor)?;
                }

                sums.0 += actor_loss.item()?;
                sums.1 += v_loss.item()?;
                sums.2 += entropy.item()?;
                steps_done += 1;
            }
        }

        let k = steps_done as f64;
        Ok(UpdateStats {
            actor_loss: sums.0 / k,
            value_loss: sums.1 / k,
            entropy: sums.2 / k,
            grad_norm: first_norm.unwrap_or(0.0),
        })
    }
}
