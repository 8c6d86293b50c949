//! Finite-difference verification of every differentiable block.
//!
//! Each component builder draws a randomized small instance (parameters and
//! inputs), then every element of every trainable parameter is perturbed in
//! both directions and the central difference is compared against the
//! analytic gradient from one backward pass. Instances are deterministic in
//! the seed, so a passing suite stays passing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::info_nce;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskVector;
use crate::nets::{AttnBlock, EncoderConfig, Mlp, ProjectorConfig};
use crate::params::{Lease, ParamStore};
use crate::ppo::{
    categorical_entropy, categorical_log_prob, gaussian_entropy, gaussian_log_prob,
    ppo_actor_loss, value_loss,
};
use crate::recon::{ReconConfig, Reconstructor};
use crate::tensor::Tensor;
use crate::trainer::stream;

// Step size trades truncation against round-off: losses sit near 1, so the
// cancellation noise in a central difference is about 1e-16 / FD_EPS ~ 1e-11
// absolute, and truncation stays well below tolerance for every block's
// curvature. Gradients can legitimately be zero (a key bias shifts all
// logits of a softmax row equally), so the denominator floor keeps that
// noise from registering as relative error on near-zero gradients.
const FD_EPS: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-5;

/// Verification result for one block type.
#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: &'static str,
    pub instances: usize,
    /// Total parameter elements compared across all instances.
    pub params_checked: usize,
    pub max_rel_err: f64,
}

/// Results for the whole suite, one entry per block type.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub components: Vec<ComponentReport>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_within(&self, tol: f64) -> bool {
        self.components.iter().all(|c| c.max_rel_err <= tol)
    }
}

type LossFn = Box<dyn Fn(&Graph, &Lease) -> Result<Var>>;

/// Compare analytic gradients against central differences for every element
/// of every trainable entry. Returns the max relative error and the number
/// of elements checked.
fn check_store(store: &mut ParamStore, loss: &LossFn) -> Result<(f64, usize)> {
    let analytic = {
        let g = Graph::new();
        let lease = store.lease(&g);
        let out = loss(&g, &lease)?;
        let y = out.item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck forward".into(),
            });
        }
        let grads = g.backward(&out)?;
        lease.grads(&grads)
    };
    let value_at = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let lease = s.lease(&g);
        loss(&g, &lease)?.item()
    };

    let names: Vec<String> = store.names().map(String::from).collect();
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for name in &names {
        if store.is_target(name)? {
            continue;
        }
        let numel = store.get(name)?.numel();
        for i in 0..numel {
            let orig = store.get(name)?.data()[i];
            store.update(name, |t| t.data_mut()[i] = orig + FD_EPS)?;
            let fp = value_at(store)?;
            store.update(name, |t| t.data_mut()[i] = orig - FD_EPS)?;
            let fm = value_at(store)?;
            store.update(name, |t| t.data_mut()[i] = orig)?;
            let fd = (fp - fm) / (2.0 * FD_EPS);
            let an = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = (an - fd).abs() / (an.abs() + fd.abs()).max(DENOM_FLOOR);
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok((max_err, checked))
}

/// Overwrite every entry with fresh noise so blocks whose init is special
/// (zeroed residual projections, unit layer norms) are checked in general
/// position.
fn randomize(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let shape = store.get(name)?.shape().to_vec();
        let mut t = Tensor::randn(&shape, rng);
        for v in t.data_mut() {
            *v *= scale;
        }
        store.set(name, t)?;
    }
    Ok(())
}

/// Quadratic readout `mean((y - c)^2)` with a fixed random target, so every
/// output element receives a distinct nonzero upstream gradient. The mean
/// keeps the loss magnitude near 1, which keeps finite-difference round-off
/// small.
fn quadratic_readout(g: &Graph, y: &Var, target: &Tensor) -> Result<Var> {
    let c = g.constant(target.clone());
    let d = y.sub(&c)?;
    d.mul(&d)?.mean()
}

fn encoder_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let obs_dim = rng.random_range(2..=4);
    let repr = rng.random_range(2..=3);
    let hidden = if rng.random_bool(0.5) {
        vec![rng.random_range(3..=4)]
    } else {
        vec![4, 3]
    };
    let cfg = EncoderConfig {
        obs_dim,
        hidden_dims: hidden,
        repr_dim: repr,
    };
    let mut store = ParamStore::new();
    let net = Mlp::encoder(&mut store, "enc", &cfg, rng)?;
    randomize(&mut store, 0.6, rng)?;
    let rows = rng.random_range(2..=4);
    let x = Tensor::randn(&[rows, obs_dim], rng);
    let target = Tensor::randn(&[rows, repr], rng);
    Ok((
        store,
        Box::new(move |g, lease| {
            let xv = g.constant(x.clone());
            let y = net.forward(lease, &xv)?;
            quadratic_readout(g, &y, &target)
        }),
    ))
}

fn projector_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let cfg = ProjectorConfig {
        in_dim: rng.random_range(2..=4),
        hidden_dim: rng.random_range(3..=5),
        out_dim: rng.random_range(2..=3),
    };
    let mut store = ParamStore::new();
    let net = Mlp::projector(&mut store, "proj", &cfg, rng)?;
    randomize(&mut store, 0.6, rng)?;
    let rows = rng.random_range(2..=4);
    let x = Tensor::randn(&[rows, cfg.in_dim], rng);
    let target = Tensor::randn(&[rows, cfg.out_dim], rng);
    Ok((
        store,
        Box::new(move |g, lease| {
            let xv = g.constant(x.clone());
            let y = net.forward(lease, &xv)?;
            quadratic_readout(g, &y, &target)
        }),
    ))
}

fn attn_block_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let heads = rng.random_range(1..=2);
    let d = heads * rng.random_range(2..=3);
    let mut store = ParamStore::new();
    let block = AttnBlock::init(&mut store, "blk", d, heads, rng)?;
    randomize(&mut store, 0.5, rng)?;
    let rows = rng.random_range(2..=4);
    let x = Tensor::randn(&[rows, d], rng);
    let target = Tensor::randn(&[rows, d], rng);
    Ok((
        store,
        Box::new(move |g, lease| {
            let xv = g.constant(x.clone());
            let y = block.forward(lease, &xv)?;
            quadratic_readout(g, &y, &target)
        }),
    ))
}

fn reconstructor_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let mut cfg = ReconConfig::new(2, 2, 4);
    cfg.n_blocks = rng.random_range(1..=2);
    cfg.n_heads = rng.random_range(1..=2);
    cfg.concat_action = rng.random_bool(0.5);
    cfg.pos_embedding = rng.random_bool(0.5);
    let mut store = ParamStore::new();
    let recon = Reconstructor::init(&mut store, "recon", &cfg, rng)?;
    randomize(&mut store, 0.5, rng)?;
    let n = rng.random_range(2..=4);
    let z = Tensor::randn(&[n, cfg.d_proj], rng);
    let act = Tensor::randn(&[n, cfg.act_dim], rng);
    let target = Tensor::randn(&[n, cfg.d_proj], rng);
    Ok((
        store,
        Box::new(move |g, lease| {
            let zv = g.constant(z.clone());
            let av = g.constant(act.clone());
            let y = recon.forward(g, lease, &zv, &av)?;
            quadratic_readout(g, &y, &target)
        }),
    ))
}

fn info_nce_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, LossFn)> {
    let n = rng.random_range(2..=4);
    let d = rng.random_range(2..=3);
    let mut store = ParamStore::new();
    store.insert("q", Tensor::randn(&[n, d], rng))?;
    store.insert("w", Tensor::randn(&[d, d], rng))?;
    // Keys are stop-gradiented inside the loss (they come from the momentum
    // target in training), so they enter as a plain constant here.
    let keys = Tensor::randn(&[n, d], rng);
    let mut bits = vec![0u8; n];
    let n_masked = rng.random_range(1..=n);
    for i in 0..n_masked {
        bits[i] = 1;
    }
    let mask = MaskVector::new(bits)?;
    Ok((
        store,
        Box::new(move |g, lease| {
            let k = g.constant(keys.clone());
            info_nce(lease.var("q")?, &k, lease.var("w")?, &mask)
        }),
    ))
}

const CLIP_EPS: f64 = 0.2;
const HUBER_DELTA: f64 = 1.0;
// The clip and Huber losses have gradient kinks; an instance whose inputs
// sit within FD_EPS of one would make the central difference straddle two
// branches. Instances are redrawn until every element clears the kink by a
// wide margin, keeping the suite valid for any seed.
const KINK_MARGIN: f64 = 1e-3;

fn ratio_margins_ok(logp_new: &[f64], logp_old: &[f64]) -> bool {
    logp_new.iter().zip(logp_old).all(|(n, o)| {
        let ratio = (n - o).exp();
        (ratio - (1.0 - CLIP_EPS)).abs() > KINK_MARGIN
            && (ratio - (1.0 + CLIP_EPS)).abs() > KINK_MARGIN
    })
}

fn huber_margins_ok(values: &[f64], returns: &[f64]) -> bool {
    values
        .iter()
        .zip(returns)
        .all(|(v, r)| ((v - r).abs() - HUBER_DELTA).abs() > KINK_MARGIN)
}

fn ppo_losses_instance(rng: &mut ChaCha8Rng, discrete: bool) -> Result<(ParamStore, LossFn)> {
    let rows = rng.random_range(3..=5);
    let obs_dim = 3;
    let act_dim = 2;
    let n_act = 3;
    let mut store = ParamStore::new();
    let head_out = if discrete { n_act } else { act_dim };
    store.insert("pol.w", Tensor::randn(&[obs_dim, head_out], rng))?;
    store.insert("pol.b", Tensor::randn(&[head_out], rng))?;
    if !discrete {
        store.insert("pol.log_std", Tensor::randn(&[act_dim], rng))?;
    }
    store.insert("values", Tensor::randn(&[rows], rng))?;

    let obs = Tensor::randn(&[rows, obs_dim], rng);
    let acts_cont = Tensor::randn(&[rows, act_dim], rng);
    let acts_disc: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n_act)).collect();
    let adv = Tensor::randn(&[rows], rng);

    // Center point log-probs, so old log-probs can be placed near them and
    // the ratios stay in a realistic range around 1.
    let logp_center = {
        let g = Graph::new();
        let lease = store.lease(&g);
        let logits = g
            .constant(obs.clone())
            .matmul(lease.var("pol.w")?)?
            .add(lease.var("pol.b")?)?;
        let lp = if discrete {
            categorical_log_prob(&logits, &acts_disc)?
        } else {
            gaussian_log_prob(&logits, lease.var("pol.log_std")?, &g.constant(acts_cont.clone()))?
        };
        lp.value().data().to_vec()
    };

    let logp_old = loop {
        let cand: Vec<f64> = logp_center
            .iter()
            .map(|c| c + 0.05 * rng.random_range(-3.0..3.0))
            .collect();
        if ratio_margins_ok(&logp_center, &cand) {
            break Tensor::from_vec(vec![rows], cand)?;
        }
    };
    let values_now = store.get("values")?.data().to_vec();
    let returns = loop {
        let cand: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
        if huber_margins_ok(&values_now, &cand) {
            break Tensor::from_vec(vec![rows], cand)?;
        }
    };
    let huber = if discrete { None } else { Some(HUBER_DELTA) };

    Ok((
        store,
        Box::new(move |g, lease| {
            let logits = g
                .constant(obs.clone())
                .matmul(lease.var("pol.w")?)?
                .add(lease.var("pol.b")?)?;
            let (logp_new, entropy) = if discrete {
                (
                    categorical_log_prob(&logits, &acts_disc)?,
                    categorical_entropy(&logits)?,
                )
            } else {
                (
                    gaussian_log_prob(
                        &logits,
                        lease.var("pol.log_std")?,
                        &g.constant(acts_cont.clone()),
                    )?,
                    gaussian_entropy(lease.var("pol.log_std")?)?,
                )
            };
            let actor = ppo_actor_loss(
                &logp_new,
                &g.constant(logp_old.clone()),
                &g.constant(adv.clone()),
                CLIP_EPS,
            )?;
            let value = value_loss(lease.var("values")?, &g.constant(returns.clone()), huber)?;
            actor.add(&value.smul(0.5)?)?.add(&entropy.smul(0.01)?)
        }),
    ))
}

/// All block types covered by the suite, in report order.
pub const COMPONENTS: [&str; 6] = [
    "encoder",
    "projector",
    "attention_block",
    "reconstructor",
    "info_nce",
    "ppo_losses",
];

const STREAM_GRADCHECK_BASE: u64 = 32;

/// Run `instances` randomized checks per component.
pub fn run(instances: usize, seed: u64) -> Result<SuiteReport> {
    if instances == 0 {
        return Err(Error::InvalidArg {
            op: "gradcheck",
            why: "need at least one instance".into(),
        });
    }
    let mut components = Vec::with_capacity(COMPONENTS.len());
    for (ci, &name) in COMPONENTS.iter().enumerate() {
        let mut rng = stream(seed, STREAM_GRADCHECK_BASE + ci as u64);
        let mut max_err = 0.0f64;
        let mut checked = 0usize;
        for k in 0..instances {
            let (mut store, loss) = match name {
                "encoder" => encoder_instance(&mut rng)?,
                "projector" => projector_instance(&mut rng)?,
                "attention_block" => attn_block_instance(&mut rng)?,
                "reconstructor" => reconstructor_instance(&mut rng)?,
                "info_nce" => info_nce_instance(&mut rng)?,
                "ppo_losses" => ppo_losses_instance(&mut rng, k % 2 == 0)?,
                other => {
                    return Err(Error::InvalidArg {
                        op: "gradcheck",
                        why: format!("unknown component {other}"),
                    })
                }
            };
            let (err, n) = check_store(&mut store, &loss)?;
            max_err = max_err.max(err);
            checked += n;
        }
        components.push(ComponentReport {
            component: name,
            instances,
            params_checked: checked,
            max_rel_err: max_err,
        });
    }
    Ok(SuiteReport { components })
}
