//! Cooperative desk-scale environments: two point-mass scenarios with
//! continuous thrust control and a discrete grid scenario, all sharing one
//! object-safe [`Env`] interface.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Action interface exposed by an environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    /// Box actions in [-1, 1]^dim per agent.
    Continuous { dim: usize },
    /// One of `n` choices per agent.
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of an action row once embedded for tokens: raw vector for
    /// continuous, one-hot for discrete.
    pub fn embed_dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim } => *dim,
            ActionSpace::Discrete { n } => *n,
        }
    }
}

/// Joint action for one step.
#[derive(Clone, Debug)]
pub enum EnvAction {
    /// `[n_agents, dim]`, expected in [-1, 1].
    Continuous(Tensor),
    /// One index per agent.
    Discrete(Vec<usize>),
}

/// Result of stepping the environment.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Tensor,
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    pub done: bool,
}

// Send so rollout workers can own their environment on scoped threads.
pub trait Env: Send {
    fn name(&self) -> &'static str;
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    /// Start a fresh episode and return the initial joint observation.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Tensor>;
    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome>;
}

/// Build an environment by config name.
pub fn make_env(name: &str, n_agents: usize) -> Result<Box<dyn Env>> {
    match name {
        "flock" => Ok(Box::new(PointMassEnv::new(Scenario::Flock, n_agents)?)),
        "leader_follower" => Ok(Box::new(PointMassEnv::new(
            Scenario::LeaderFollower,
            n_agents,
        )?)),
        "coop_gather" => Ok(Box::new(CoopGatherEnv::new(n_agents)?)),
        other => Err(Error::Env(format!(
            "unknown env {other:?}; expected flock, leader_follower, or coop_gather"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Point-mass scenarios
// ---------------------------------------------------------------------------

const DT: f64 = 0.1;
const DAMPING: f64 = 0.8;
const GAIN: f64 = 0.5;
const POINT_MASS_HORIZON: usize = 100;

/// Shared kinematic state of the point-mass scenarios.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub positions: Tensor,
    pub velocities: Tensor,
    pub target: Tensor,
    pub t: usize,
    pub horizon: usize,
}

impl EnvState {
    fn n_agents(&self) -> usize {
        self.positions.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Flock,
    LeaderFollower,
}

/// Leader chases the target; each follower tracks its predecessor's
/// latitude (y coordinate), in agent index order.
pub fn flock_reward(state: &EnvState) -> Tensor {
    let n = state.n_agents();
    let mut r = vec![0.0; n];
    let lead = state.positions.row(0);
    r[0] = -lead
        .iter()
        .zip(state.target.data())
        .map(|(x, p)| (x - p) * (x - p))
        .sum::<f64>();
    for i in 1..n {
        let dy = state.positions.row(i)[1] - state.positions.row(i - 1)[1];
        r[i] = -dy * dy;
    }
    Tensor::from_vec(vec![n], r).expect("reward shape")
}

/// Leader chases the target; every follower closes on the leader, scaled by
/// the team size.
pub fn leader_follower_reward(state: &EnvState) -> Tensor {
    let n = state.n_agents();
    let mut r = vec![0.0; n];
    let lead = state.positions.row(0);
    r[0] = -lead
        .iter()
        .zip(state.target.data())
        .map(|(x, p)| (x - p) * (x - p))
        .sum::<f64>();
    for i in 1..n {
        let d2: f64 = state
            .positions
            .row(i)
            .iter()
            .zip(lead)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        r[i] = -d2 / n as f64;
    }
    Tensor::from_vec(vec![n], r).expect("reward shape")
}

pub struct PointMassEnv {
    scenario: Scenario,
    state: EnvState,
}

impl PointMassEnv {
    pub fn new(scenario: Scenario, n_agents: usize) -> Result<Self> {
        if n_agents < 2 {
            return Err(Error::Env(format!(
                "point-mass scenarios need at least 2 agents, got {n_agents}"
            )));
        }
        Ok(Self {
            scenario,
            state: EnvState {
                positions: Tensor::zeros(&[n_agents, 3]),
                velocities: Tensor::zeros(&[n_agents, 3]),
                target: Tensor::from_vec(vec![3], vec![0.0, 0.0, 1.0])?,
                t: 0,
                horizon: POINT_MASS_HORIZON,
            },
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    fn rewards(&self) -> Tensor {
        match self.scenario {
            Scenario::Flock => flock_reward(&self.state),
            Scenario::LeaderFollower => leader_follower_reward(&self.state),
        }
    }

    /// Own position and velocity, target relative to self, then every other
    /// agent's position relative to self in index order.
    fn observe(&self) -> Tensor {
        let n = self.state.n_agents();
        let dim = 9 + 3 * (n - 1);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let pos = self.state.positions.row(i);
            let vel = self.state.velocities.row(i);
            let mut row = Vec::with_capacity(dim);
            row.extend_from_slice(pos);
            row.extend_from_slice(vel);
            row.extend(self.state.target.data().iter().zip(pos).map(|(p, x)| p - x));
            for j in 0..n {
                if j != i {
                    row.extend(
                        self.state
                            .positions
                            .row(j)
                            .iter()
                            .zip(pos)
                            .map(|(xj, xi)| xj - xi),
                    );
                }
            }
            rows.push(row);
        }
        Tensor::from_rows(&rows).expect("observation shape")
    }
}

impl Env for PointMassEnv {
    fn name(&self) -> &'static str {
        match self.scenario {
            Scenario::Flock => "flock",
            Scenario::LeaderFollower => "leader_follower",
        }
    }

    fn n_agents(&self) -> usize {
        self.state.n_agents()
    }

    fn obs_dim(&self) -> usize {
        9 + 3 * (self.state.n_agents() - 1)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 3 }
    }

    fn horizon(&self) -> usize {
        self.state.horizon
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Tensor> {
        let n = self.state.n_agents();
        self.state.positions = Tensor::uniform(&[n, 3], -1.0, 1.0, rng);
        self.state.velocities = Tensor::zeros(&[n, 3]);
        self.state.t = 0;
        Ok(self.observe())
    }

    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        let EnvAction::Continuous(a) = action else {
            return Err(Error::Env("point-mass env takes continuous actions".into()));
        };
        let n = self.state.n_agents();
        if a.shape() != [n, 3] {
            return Err(Error::Env(format!(
                "expected action shape [{n}, 3], got {:?}",
                a.shape()
            )));
        }
        a.ensure_finite("point-mass action")?;
        if self.state.t >= self.state.horizon {
            return Err(Error::Env("episode already finished; reset first".into()));
        }
        for i in 0..n {
            let acc: Vec<f64> = a.row(i).iter().map(|&x| x.clamp(-1.0, 1.0)).collect();
            let vel = self.state.velocities.row_mut(i);
            for (v, &u) in vel.iter_mut().zip(&acc) {
                *v = DAMPING * *v + GAIN * u * DT;
            }
            let vel: Vec<f64> = self.state.velocities.row(i).to_vec();
            for (p, v) in self.state.positions.row_mut(i).iter_mut().zip(vel) {
                *p += v * DT;
            }
        }
        self.state.t += 1;
        let rewards = self.rewards();
        let team: f64 = rewards.data().iter().sum();
        Ok(StepOutcome {
            obs: self.observe(),
            rewards: rewards.data().to_vec(),
            team_reward: team,
            done: self.state.t == self.state.horizon,
        })
    }
}

// ---------------------------------------------------------------------------
// Discrete grid scenario
// ---------------------------------------------------------------------------

const GRID: i64 = 7;
const GATHER_HORIZON: usize = 50;
const GATHER_MISS_PENALTY: f64 = -0.01;

/// N agents and N landmarks on a 7x7 grid. Each landmark held by exactly
/// one agent pays +1 per step; any other landmark pays a small penalty.
pub struct CoopGatherEnv {
    n_agents: usize,
    agents: Vec<(i64, i64)>,
    landmarks: Vec<(i64, i64)>,
    t: usize,
}

impl CoopGatherEnv {
    pub fn new(n_agents: usize) -> Result<Self> {
        let cells = (GRID * GRID) as usize;
        if n_agents == 0 || 2 * n_agents > cells {
            return Err(Error::Env(format!(
                "coop_gather supports 1..={} agents, got {n_agents}",
                cells / 2
            )));
        }
        Ok(Self {
            n_agents,
            agents: vec![(0, 0); n_agents],
            landmarks: vec![(0, 0); n_agents],
            t: 0,
        })
    }

    fn scale(v: i64) -> f64 {
        (v as f64 - 3.0) / 3.0
    }

    fn observe(&self) -> Tensor {
        let n = self.n_agents;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = self.agents[i];
            let mut row = Vec::with_capacity(2 + 2 * n + 2 * (n - 1));
            row.push(Self::scale(x));
            row.push(Self::scale(y));
            for &(lx, ly) in &self.landmarks {
                row.push(Self::scale(lx) - Self::scale(x));
                row.push(Self::scale(ly) - Self::scale(y));
            }
            for (j, &(ax, ay)) in self.agents.iter().enumerate() {
                if j != i {
                    row.push(Self::scale(ax) - Self::scale(x));
                    row.push(Self::scale(ay) - Self::scale(y));
                }
            }
            rows.push(row);
        }
        Tensor::from_rows(&rows).expect("observation shape")
    }

    fn team_reward(&self) -> f64 {
        let mut total = 0.0;
        for &lm in &self.landmarks {
            let occupants = self.agents.iter().filter(|&&a| a == lm).count();
            total += if occupants == 1 { 1.0 } else { GATHER_MISS_PENALTY };
        }
        total
    }
}

impl Env for CoopGatherEnv {
    fn name(&self) -> &'static str {
        "coop_gather"
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_dim(&self) -> usize {
        2 + 2 * self.n_agents + 2 * (self.n_agents - 1)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { n: 5 }
    }

    fn horizon(&self) -> usize {
        GATHER_HORIZON
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Tensor> {
        // Distinct cells for agents and landmarks alike.
        let cells = (GRID * GRID) as usize;
        let picks = rand::seq::index::sample(&mut *rng, cells, 2 * self.n_agents);
        let place = |flat: usize| ((flat as i64) % GRID, (flat as i64) / GRID);
        for i in 0..self.n_agents {
            self.agents[i] = place(picks.index(i));
            self.landmarks[i] = place(picks.index(self.n_agents + i));
        }
        self.t = 0;
        Ok(self.observe())
    }

    fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        let EnvAction::Discrete(moves) = action else {
            return Err(Error::Env("coop_gather takes discrete actions".into()));
        };
        if moves.len() != self.n_agents {
            return Err(Error::Env(format!(
                "expected {} actions, got {}",
                self.n_agents,
                moves.len()
            )));
        }
        if self.t >= GATHER_HORIZON {
            return Err(Error::Env("episode already finished; reset first".into()));
        }
        for (i, &m) in moves.iter().enumerate() {
            let (dx, dy) = match m {
                0 => (0, 0),
                1 => (0, 1),
                2 => (0, -1),
                3 => (1, 0),
                4 => (-1, 0),
                other => {
                    return Err(Error::Env(format!(
                        "action {other} outside 0..5 for agent {i}"
                    )))
                }
            };
            let (x, y) = self.agents[i];
            self.agents[i] = ((x + dx).clamp(0, GRID - 1), (y + dy).clamp(0, GRID - 1));
        }
        self.t += 1;
        let team = self.team_reward();
        let per_agent = team / self.n_agents as f64;
        Ok(StepOutcome {
            obs: self.observe(),
            rewards: vec![per_agent; self.n_agents],
            team_reward: team,
            done: self.t == GATHER_HORIZON,
        })
    }
}
