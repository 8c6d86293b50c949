//! Flat key=value run configuration with dotted section prefixes.
//!
//! Files hold one `section.key = value` pair per line; `#` starts a comment.
//! Unknown keys are rejected so typos fail loudly. Command-line overrides
//! reuse [`TrainConfig::apply`] with the same key names.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::{MaskStrategy, MaskVariant};
use crate::ppo::PpoConfig;

/// Everything one training run needs, with defaults chosen for the
/// desk-scale environments.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub env_name: String,
    pub n_agents: usize,

    pub ppo: PpoConfig,
    /// Rollout steps collected per worker per update.
    pub episode_length: usize,
    pub rollout_threads: usize,

    pub mask: MaskStrategy,
    pub n_mask: usize,

    pub recon_blocks: usize,
    pub recon_heads: usize,
    pub concat_action: bool,
    pub pos_embedding: bool,

    pub ma2cl_enabled: bool,
    /// Weight of the auxiliary loss inside the total objective.
    pub lambda: f64,
    /// EMA retention of the target networks.
    pub tau: f64,
    pub aux_batch: usize,

    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    /// Projection width; 0 keeps it at `repr_dim`.
    pub proj_dim: usize,

    pub seed: u64,
    pub total_steps: usize,
    /// Greedy evaluation every this many updates; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env_name: "flock".into(),
            n_agents: 4,
            ppo: PpoConfig::default(),
            episode_length: 100,
            rollout_threads: 1,
            mask: MaskStrategy::default(),
            n_mask: 1,
            recon_blocks: 1,
            recon_heads: 1,
            concat_action: true,
            pos_embedding: true,
            ma2cl_enabled: true,
            lambda: 1.0,
            tau: 0.01,
            aux_batch: 128,
            hidden_dims: vec![64, 64],
            repr_dim: 64,
            proj_hidden: 512,
            proj_dim: 0,
            seed: 0,
            total_steps: 10_000,
            eval_interval: 0,
            eval_episodes: 20,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key}: expected true or false"
        ))),
    }
}

impl TrainConfig {
    /// Projection width after resolving the repr_dim default.
    pub fn proj_out_dim(&self) -> usize {
        if self.proj_dim == 0 {
            self.repr_dim
        } else {
            self.proj_dim
        }
    }

    /// Environment steps gathered per update across all workers.
    pub fn steps_per_update(&self) -> usize {
        self.episode_length * self.rollout_threads
    }

    pub fn num_updates(&self) -> usize {
        self.total_steps / self.steps_per_update()
    }

    /// Set one dotted key. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env.name" => self.env_name = value.to_string(),
            "env.n_agents" => self.n_agents = parse_num(key, value)?,

            "ppo.gamma" => self.ppo.gamma = parse_num(key, value)?,
            "ppo.gae_lambda" => self.ppo.gae_lambda = parse_num(key, value)?,
            "ppo.ppo_epochs" => self.ppo.ppo_epochs = parse_num(key, value)?,
            "ppo.ppo_clip" => self.ppo.clip = parse_num(key, value)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse_num(key, value)?,
            "ppo.value_coef" => self.ppo.value_coef = parse_num(key, value)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse_num(key, value)?,
            "ppo.num_mini_batch" => self.ppo.num_mini_batch = parse_num(key, value)?,
            "ppo.lr_actor" => self.ppo.lr_actor = parse_num(key, value)?,
            "ppo.lr_critic" => self.ppo.lr_critic = parse_num(key, value)?,
            "ppo.use_huber" => self.ppo.use_huber = parse_bool(key, value)?,
            "ppo.huber_delta" => self.ppo.huber_delta = parse_num(key, value)?,
            "ppo.episode_length" => self.episode_length = parse_num(key, value)?,
            "ppo.rollout_threads" => self.rollout_threads = parse_num(key, value)?,

            "mask.strategy" => self.mask.variant = MaskVariant::parse(value)?,
            "mask.k" => self.mask.offset = parse_num(key, value)?,
            "mask.n_mask" => self.n_mask = parse_num(key, value)?,

            "recon.blocks" => self.recon_blocks = parse_num(key, value)?,
            "recon.heads" => self.recon_heads = parse_num(key, value)?,
            "recon.concat_action" => self.concat_action = parse_bool(key, value)?,
            "recon.pos_embedding" => self.pos_embedding = parse_bool(key, value)?,

            "ma2cl.enabled" => self.ma2cl_enabled = parse_bool(key, value)?,
            "ma2cl.lambda" => self.lambda = parse_num(key, value)?,
            "ma2cl.tau" => self.tau = parse_num(key, value)?,
            "ma2cl.aux_batch" => self.aux_batch = parse_num(key, value)?,

            "net.hidden_dims" => {
                let dims: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| parse_num::<usize>(key, p.trim()))
                    .collect();
                self.hidden_dims = dims?;
            }
            "net.repr_dim" => self.repr_dim = parse_num(key, value)?,
            "net.proj_hidden" => self.proj_hidden = parse_num(key, value)?,
            "net.proj_dim" => self.proj_dim = parse_num(key, value)?,

            "train.seed" => self.seed = parse_num(key, value)?,
            "train.total_steps" => self.total_steps = parse_num(key, value)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, value)?,
            "train.eval_episodes" => self.eval_episodes = parse_num(key, value)?,

            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Merge a key=value file into this config.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize every key so a run directory records its exact settings.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden = self
            .hidden_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = write!(
            s,
            "env.name = {}\nenv.n_agents = {}\n\
             ppo.gamma = {}\nppo.gae_lambda = {}\nppo.ppo_epochs = {}\nppo.ppo_clip = {}\n\
             ppo.entropy_coef = {}\nppo.value_coef = {}\nppo.max_grad_norm = {}\n\
             ppo.num_mini_batch = {}\nppo.lr_actor = {}\nppo.lr_critic = {}\n\
             ppo.use_huber = {}\nppo.huber_delta = {}\nppo.episode_length = {}\n\
             ppo.rollout_threads = {}\n\
             mask.strategy = {}\nmask.k = {}\nmask.n_mask = {}\n\
             recon.blocks = {}\nrecon.heads = {}\nrecon.concat_action = {}\n\
             recon.pos_embedding = {}\n\
             ma2cl.enabled = {}\nma2cl.lambda = {}\nma2cl.tau = {}\nma2cl.aux_batch = {}\n\
             net.hidden_dims = {}\nnet.repr_dim = {}\nnet.proj_hidden = {}\nnet.proj_dim = {}\n\
             train.seed = {}\ntrain.total_steps = {}\ntrain.eval_interval = {}\n\
             train.eval_episodes = {}\n",
            self.env_name,
            self.n_agents,
            self.ppo.gamma,
            self.ppo.gae_lambda,
            self.ppo.ppo_epochs,
            self.ppo.clip,
            self.ppo.entropy_coef,
            self.ppo.value_coef,
            self.ppo.max_grad_norm,
            self.ppo.num_mini_batch,
            self.ppo.lr_actor,
            self.ppo.lr_critic,
            self.ppo.use_huber,
            self.ppo.huber_delta,
            self.episode_length,
            self.rollout_threads,
            self.mask.variant.name(),
            self.mask.offset,
            self.n_mask,
            self.recon_blocks,
            self.recon_heads,
            self.concat_action,
            self.pos_embedding,
            self.ma2cl_enabled,
            self.lambda,
            self.tau,
            self.aux_batch,
            hidden,
            self.repr_dim,
            self.proj_hidden,
            self.proj_dim,
            self.seed,
            self.total_steps,
            self.eval_interval,
            self.eval_episodes,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(why));
        if !matches!(
            self.env_name.as_str(),
            "flock" | "leader_follower" | "coop_gather"
        ) {
            return bad(format!(
                "env.name {:?} is not one of flock, leader_follower, coop_gather",
                self.env_name
            ));
        }
        if self.n_agents == 0 {
            return bad("env.n_agents must be positive".into());
        }
        self.ppo.validate()?;
        if self.episode_length == 0 || self.rollout_threads == 0 {
            return bad("ppo.episode_length and ppo.rollout_threads must be positive".into());
        }
        if self.mask.offset == 0 {
            return bad("mask.k must be at least 1".into());
        }
        if self.mask.offset >= self.episode_length {
            return bad(format!(
                "mask.k = {} leaves no valid samples in episodes of length {}",
                self.mask.offset, self.episode_length
            ));
        }
        if self.n_mask == 0 || self.n_mask > self.n_agents {
            return bad(format!(
                "mask.n_mask = {} outside 1..={}",
                self.n_mask, self.n_agents
            ));
        }
        if self.recon_blocks == 0 || self.recon_heads == 0 {
            return bad("recon.blocks and recon.heads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("ma2cl.tau = {} outside [0, 1)", self.tau));
        }
        if !self.lambda.is_finite() {
            return bad(format!("ma2cl.lambda = {} must be finite", self.lambda));
        }
        if self.aux_batch == 0 {
            return bad("ma2cl.aux_batch must be positive".into());
        }
        if self.repr_dim == 0 || self.proj_hidden == 0 {
            return bad("net.repr_dim and net.proj_hidden must be positive".into());
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return bad("net.hidden_dims entries must be positive".into());
        }
        if self.total_steps < self.steps_per_update() {
            return bad(format!(
                "train.total_steps = {} is below one update of {} steps",
                self.total_steps,
                self.steps_per_update()
            ));
        }
        if self.eval_episodes == 0 {
            return bad("train.eval_episodes must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply("ppo.gama", "0.9").unwrap_err();
        assert!(format!("{err}").contains("unknown config key"));
    }

    #[test]
    fn values_are_type_checked() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply("ppo.gamma", "fast").is_err());
        assert!(cfg.apply("ma2cl.enabled", "yes").is_err());
        assert!(cfg.apply("net.hidden_dims", "64,x").is_err());
        cfg.apply("net.hidden_dims", "32, 16").unwrap();
        assert_eq!(cfg.hidden_dims, vec![32, 16]);
    }

    #[test]
    fn file_round_trip_preserves_every_field() {
        let mut cfg = TrainConfig::default();
        cfg.apply("env.name", "leader_follower").unwrap();
        cfg.apply("env.n_agents", "3").unwrap();
        cfg.apply("mask.strategy", "full_gauss").unwrap();
        cfg.apply("mask.k", "2").unwrap();
        cfg.apply("ma2cl.lambda", "0.5").unwrap();
        cfg.apply("ppo.ppo_epochs", "2").unwrap();
        cfg.apply("train.seed", "7").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, cfg.to_text()).unwrap();
        let loaded = TrainConfig::from_file(&path).unwrap();
        assert_eq!(loaded.to_text(), cfg.to_text());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# full line comment\n\nppo.gamma = 0.9  # trailing comment\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.ppo.gamma, 0.9);
    }

    #[test]
    fn malformed_lines_report_their_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "ppo.gamma 0.9\n").unwrap();
        let err = TrainConfig::from_file(&path).unwrap_err();
        assert!(format!("{err}").contains(":1:"));
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        let mut cfg = TrainConfig::default();
        cfg.n_mask = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.mask.offset = cfg.episode_length;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.env_name = "atari".into();
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.total_steps = 50;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn proj_dim_zero_follows_repr_dim() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.proj_out_dim(), cfg.repr_dim);
        cfg.proj_dim = 32;
        assert_eq!(cfg.proj_out_dim(), 32);
    }
}
