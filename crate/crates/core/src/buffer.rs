//! On-policy rollout storage and the auxiliary-task sampler.
//!
//! A [`Trajectory`] records one worker's rollout: several episodes back to
//! back, the last of which may be cut off by the step budget. Sampling for
//! the reconstruction task draws (episode, t) pairs whose lookback stays
//! inside the same episode.

use rand::{Rng, RngCore};

use crate::envs::{ActionSpace, Env};
use crate::error::{Error, Result};
use crate::masking::TimestepSample;
use crate::ppo::{ActionRecord, MarlPpo};
use crate::tensor::Tensor;

/// Half-open step range of one episode inside a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// True when the episode was cut off by the step budget rather than
    /// finishing; its tail then bootstraps from the stored value.
    pub truncated: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// One rollout: per-step joint observations, raw action records, per-agent
/// log-probabilities, team rewards, centralized values, and episode ends.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub obs: Vec<Tensor>,
    pub records: Vec<ActionRecord>,
    pub log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate at the observation after the final step, used to
    /// bootstrap a truncated tail. Zero when the last episode finished.
    pub bootstrap_value: f64,
    pub episode_starts: Vec<usize>,
}

impl Trajectory {
    pub fn new(n_agents: usize, obs_dim: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            obs: Vec::new(),
            records: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            bootstrap_value: 0.0,
            episode_starts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Append one step. The observation is the one the action was taken
    /// from; `done` marks the end of its episode.
    pub fn push(
        &mut self,
        obs: Tensor,
        record: ActionRecord,
        log_probs: Vec<f64>,
        team_reward: f64,
        value: f64,
        done: bool,
    ) -> Result<()> {
        if obs.shape() != [self.n_agents, self.obs_dim] {
            return Err(Error::InvalidShape {
                op: "trajectory_push",
                shape: obs.shape().to_vec(),
                why: format!("expected [{}, {}]", self.n_agents, self.obs_dim),
            });
        }
        if log_probs.len() != self.n_agents || record.n_agents() != self.n_agents {
            return Err(Error::InvalidArg {
                op: "trajectory_push",
                why: format!(
                    "expected {} agents, got {} log-probs and {} action rows",
                    self.n_agents,
                    log_probs.len(),
                    record.n_agents()
                ),
            });
        }
        if !team_reward.is_finite() || !value.is_finite() {
            return Err(Error::NonFinite {
                context: "trajectory push".into(),
            });
        }
        let starts_episode = self.dones.last().copied().unwrap_or(true);
        if starts_episode {
            self.episode_starts.push(self.obs.len());
        }
        self.obs.push(obs);
        self.records.push(record);
        self.log_probs.push(log_probs);
        self.rewards.push(team_reward);
        self.values.push(value);
        self.dones.push(done);
        Ok(())
    }

    /// Episode extents in order; the final segment is flagged truncated when
    /// the trajectory ends without a terminal step.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (i, &start) in self.episode_starts.iter().enumerate() {
            let end = self
                .episode_starts
                .get(i + 1)
                .copied()
                .unwrap_or(self.len());
            let truncated = !self.dones[end - 1];
            out.push(Segment { start, end, truncated });
        }
        out
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_starts.len()
    }
}

/// Roll the current policy for `n_steps`, resetting the environment whenever
/// an episode ends. A truncated tail stores the critic's bootstrap value.
pub fn collect_rollout(
    env: &mut dyn Env,
    policy: &MarlPpo,
    n_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidArg {
            op: "collect_rollout",
            why: "n_steps must be positive".into(),
        });
    }
    if env.n_agents() != policy.n_agents()
        || env.obs_dim() != policy.obs_dim()
        || env.action_space() != policy.space()
    {
        return Err(Error::Training(format!(
            "env {} ({} agents, obs {}) does not match the policy ({} agents, obs {})",
            env.name(),
            env.n_agents(),
            env.obs_dim(),
            policy.n_agents(),
            policy.obs_dim()
        )));
    }
    let mut traj = Trajectory::new(env.n_agents(), env.obs_dim());
    let mut obs = env.reset(rng)?;
    for _ in 0..n_steps {
        let decision = policy.act(&obs, rng)?;
        let out = env.step(&decision.env_action)?;
        traj.push(
            obs,
            decision.record,
            decision.log_probs,
            out.team_reward,
            decision.value,
            out.done,
        )?;
        obs = if out.done { env.reset(rng)? } else { out.obs };
    }
    if !traj.dones[traj.len() - 1] {
        traj.bootstrap_value = policy.value_of(&obs)?;
    }
    Ok(traj)
}

/// Reconstruction-task sample drawn uniformly with replacement over every
/// (episode, t) pair with t ≥ k, where t indexes steps within its episode.
/// Action rows carry the executed embedding (squashed vector or one-hot).
pub fn sample_aux_batch(
    trajs: &[Trajectory],
    space: ActionSpace,
    batch: usize,
    k: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<TimestepSample>> {
    if batch == 0 || k == 0 {
        return Err(Error::Sampling(format!(
            "need positive batch and offset, got batch={batch}, k={k}"
        )));
    }
    // (episode_id, step of t, step of t-k, local t) with steps indexed over
    // the concatenated trajectories.
    let mut flat: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut episode_id = 0usize;
    let mut base = 0usize;
    for traj in trajs {
        for seg in traj.segments() {
            for local_t in k..seg.len() {
                let here = base + seg.start + local_t;
                flat.push((episode_id, here, here - k, local_t));
            }
            episode_id += 1;
        }
        base += traj.len();
    }
    if flat.is_empty() {
        return Err(Error::Sampling(format!(
            "rollout too short for offset k={k}: no episode has more than {k} steps"
        )));
    }

    // Concatenated step index -> owning trajectory and its local offset.
    let locate = |mut step: usize| {
        for traj in trajs {
            if step < traj.len() {
                return (traj, step);
            }
            step -= traj.len();
        }
        unreachable!("candidate index out of range");
    };

    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pick = rng.random_range(0..flat.len());
        let (episode_id, t_step, prev_step, local_t) = flat[pick];
        let (traj_t, off_t) = locate(t_step);
        let (traj_p, off_p) = locate(prev_step);
        out.push(TimestepSample {
            obs_t: traj_t.obs[off_t].clone(),
            act_t: traj_t.records[off_t].embed(space)?,
            obs_prev: traj_p.obs[off_p].clone(),
            act_prev: traj_p.records[off_p].embed(space)?,
            episode_id,
            t: local_t,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, EnvAction};
    use crate::nets::EncoderConfig;
    use crate::ppo::{MarlPpo, PpoConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_policy(env_name: &str, n_agents: usize, seed: u64) -> (Box<dyn Env>, MarlPpo) {
        let env = make_env(env_name, n_agents).unwrap();
        let enc = EncoderConfig {
            obs_dim: env.obs_dim(),
            hidden_dims: vec![16, 16],
            repr_dim: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ppo = MarlPpo::init(
            PpoConfig::default(),
            &enc,
            n_agents,
            env.action_space(),
            &mut rng,
        )
        .unwrap();
        (env, ppo)
    }

    /// Hand-built trajectory with the given episode lengths; the final
    /// episode is truncated when `last_done` is false. Observations encode
    /// their global step index so rows can be traced back to steps.
    fn scripted(ep_lens: &[usize], last_done: bool) -> Trajectory {
        let mut traj = Trajectory::new(2, 3);
        let mut step = 0usize;
        for (e, &len) in ep_lens.iter().enumerate() {
            for t in 0..len {
                let obs = Tensor::from_vec(
                    vec![2, 3],
                    vec![step as f64; 6],
                )
                .unwrap();
                let record = ActionRecord::Discrete(vec![step % 5, (step + 1) % 5]);
                let done = t + 1 == len && (e + 1 < ep_lens.len() || last_done);
                traj.push(obs, record, vec![-0.5, -0.5], -1.0, 0.1, done).unwrap();
                step += 1;
            }
        }
        traj
    }

    #[test]
    fn push_validates_shapes() {
        let mut traj = Trajectory::new(2, 3);
        let bad_obs = Tensor::zeros(&[2, 4]);
        let rec = ActionRecord::Discrete(vec![0, 1]);
        assert!(traj
            .push(bad_obs, rec.clone(), vec![0.0, 0.0], 0.0, 0.0, false)
            .is_err());
        let obs = Tensor::zeros(&[2, 3]);
        assert!(traj
            .push(obs.clone(), rec.clone(), vec![0.0], 0.0, 0.0, false)
            .is_err());
        assert!(traj
            .push(obs.clone(), rec.clone(), vec![0.0, 0.0], f64::NAN, 0.0, false)
            .is_err());
        assert!(traj.push(obs, rec, vec![0.0, 0.0], 0.0, 0.0, false).is_ok());
    }

    #[test]
    fn segments_track_episode_boundaries_and_truncation() {
        let traj = scripted(&[3, 2], false);
        let segs = traj.segments();
        assert_eq!(
            segs,
            vec![
                Segment { start: 0, end: 3, truncated: false },
                Segment { start: 3, end: 5, truncated: true },
            ]
        );
        assert_eq!(traj.n_episodes(), 2);

        let finished = scripted(&[4], true);
        assert_eq!(
            finished.segments(),
            vec![Segment { start: 0, end: 4, truncated: false }]
        );
    }

    #[test]
    fn rollout_auto_resets_and_bootstraps_the_tail() {
        let (mut env, ppo) = tiny_policy("leader_follower", 2, 0);
        let horizon = env.horizon();
        let steps = 2 * horizon + 30;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = collect_rollout(env.as_mut(), &ppo, steps, &mut rng).unwrap();

        assert_eq!(traj.len(), steps);
        assert_eq!(traj.episode_starts, vec![0, horizon, 2 * horizon]);
        assert!(traj.dones[horizon - 1] && traj.dones[2 * horizon - 1]);
        assert!(!traj.dones[steps - 1]);
        let segs = traj.segments();
        assert_eq!(segs.len(), 3);
        assert!(segs[2].truncated);
        assert!(traj.bootstrap_value.is_finite() && traj.bootstrap_value != 0.0);
    }

    #[test]
    fn finished_rollout_has_zero_bootstrap() {
        let (mut env, ppo) = tiny_policy("leader_follower", 2, 0);
        let horizon = env.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = collect_rollout(env.as_mut(), &ppo, horizon, &mut rng).unwrap();
        assert!(traj.dones[horizon - 1]);
        assert_eq!(traj.bootstrap_value, 0.0);
    }

    #[test]
    fn rollout_rejects_mismatched_env() {
        let (_, ppo) = tiny_policy("leader_follower", 2, 0);
        let mut other = make_env("leader_follower", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(collect_rollout(other.as_mut(), &ppo, 10, &mut rng).is_err());
    }

    #[test]
    fn sampler_respects_the_offset_boundaries() {
        let traj = scripted(&[5], true);
        let space = ActionSpace::Discrete { n: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        let batch = sample_aux_batch(std::slice::from_ref(&traj), space, 400, 1, &mut rng).unwrap();
        let ts: std::collections::BTreeSet<usize> = batch.iter().map(|s| s.t).collect();
        assert_eq!(ts, (1..5).collect());

        let batch = sample_aux_batch(std::slice::from_ref(&traj), space, 50, 4, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.t == 4));

        let err = sample_aux_batch(std::slice::from_ref(&traj), space, 10, 5, &mut rng);
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("rollout too short for offset k"), "{msg}");
    }

    #[test]
    fn samples_carry_matching_history_rows() {
        let traj = scripted(&[6, 4], false);
        let space = ActionSpace::Discrete { n: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_aux_batch(std::slice::from_ref(&traj), space, 300, 2, &mut rng).unwrap();
        for s in &batch {
            // Observations encode their global index; lookback must land
            // exactly k steps earlier inside the same episode.
            let here = s.obs_t.data()[0] as usize;
            let back = s.obs_prev.data()[0] as usize;
            assert_eq!(here - back, 2);
            let (ep, local) = if here < 6 { (0, here) } else { (1, here - 6) };
            assert_eq!(s.episode_id, ep);
            assert_eq!(s.t, local);
            assert!(local >= 2);
            s.validate(2).unwrap();
            // One-hot action embedding of the scripted record.
            assert_eq!(s.act_t.shape(), &[2, 5]);
            assert_eq!(s.act_t.row(0)[here % 5], 1.0);
            assert_eq!(s.act_prev.row(0)[back % 5], 1.0);
        }
    }

    #[test]
    fn sampler_never_crosses_episode_boundaries() {
        // Episodes of length 3 and 4 with k=2: only local t=2 (episode 0)
        // and t in {2,3} (episode 1) are drawable.
        let traj = scripted(&[3, 4], true);
        let space = ActionSpace::Discrete { n: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = sample_aux_batch(std::slice::from_ref(&traj), space, 500, 2, &mut rng).unwrap();
        for s in &batch {
            let here = s.obs_t.data()[0] as usize;
            let back = s.obs_prev.data()[0] as usize;
            match s.episode_id {
                0 => {
                    assert_eq!(here, 2);
                    assert_eq!(back, 0);
                }
                1 => {
                    assert!(here == 5 || here == 6);
                    assert_eq!(back, here - 2);
                    assert!(back >= 3);
                }
                other => panic!("unexpected episode {other}"),
            }
        }
    }

    #[test]
    fn sampler_spans_multiple_trajectories() {
        let a = scripted(&[4], true);
        let mut b = scripted(&[5], true);
        // Distinguish the second trajectory's payload.
        for obs in b.obs.iter_mut() {
            let shifted = obs.map(|v| v + 100.0);
            *obs = shifted;
        }
        let space = ActionSpace::Discrete { n: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sample_aux_batch(&[a, b], space, 600, 3, &mut rng).unwrap();
        let mut seen = [false, false];
        for s in &batch {
            assert!(s.episode_id < 2);
            seen[s.episode_id] = true;
            let v = s.obs_t.data()[0];
            if s.episode_id == 1 {
                assert!(v >= 100.0);
            } else {
                assert!(v < 100.0);
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn sampling_is_uniform_over_valid_pairs() {
        // Two episodes, k=1: 5 + 6 = 11 valid (episode, t) pairs.
        let traj = scripted(&[6, 7], true);
        let space = ActionSpace::Discrete { n: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 10_000usize;
        let batch =
            sample_aux_batch(std::slice::from_ref(&traj), space, draws, 1, &mut rng).unwrap();

        let mut counts = std::collections::HashMap::new();
        for s in &batch {
            *counts.entry((s.episode_id, s.t)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 11);
        let expected = draws as f64 / 11.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-square with df = 10 via the cube-root
        // normal approximation; p > 0.01 means staying below it.
        let df = 10.0_f64;
        let a = 2.0 / (9.0 * df);
        let crit = df * (1.0 - a + 2.3263478740408408 * a.sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 {chi2} exceeded {crit}");
    }

    #[test]
    fn sampling_is_deterministic_for_a_fixed_seed() {
        let traj = scripted(&[6, 7], false);
        let space = ActionSpace::Discrete { n: 5 };
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_aux_batch(std::slice::from_ref(&traj), space, 64, 2, &mut rng).unwrap()
        };
        let a = draw();
        let b = draw();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.episode_id, y.episode_id);
            assert_eq!(x.t, y.t);
            for (p, q) in x.obs_t.data().iter().zip(y.obs_t.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn rollouts_are_bitwise_reproducible() {
        let run = || {
            let (mut env, ppo) = tiny_policy("flock", 3, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            collect_rollout(env.as_mut(), &ppo, 40, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.obs.iter().zip(&b.obs) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        for (x, y) in a.rewards.iter().zip(&b.rewards) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn continuous_rollout_executes_squashed_actions() {
        let (mut env, ppo) = tiny_policy("flock", 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let traj = collect_rollout(env.as_mut(), &ppo, 5, &mut rng).unwrap();
        for record in &traj.records {
            let EnvAction::Continuous(executed) = record.to_env() else { panic!() };
            assert!(executed.data().iter().all(|a| a.abs() <= 1.0));
        }
    }
}
