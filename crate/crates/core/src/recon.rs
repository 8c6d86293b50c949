//! Token assembly and attentive reconstruction: turn projected masked
//! latents plus (masked) actions into per-agent tokens, mix them through
//! pre-norm attention blocks, and map back into projection space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{concat_last, Graph, Var};
use crate::nets::{init_linear, AttnBlock};
use crate::params::{Lease, ParamStore};
use crate::tensor::Tensor;

/// Reconstructor hyperparameters. The token width is always
/// `d_proj + act_dim`; the concat-action ablation zeroes the action slot
/// rather than shrinking the token, so shapes stay comparable across runs.
#[derive(Clone, Debug)]
pub struct ReconConfig {
    pub d_proj: usize,
    pub act_dim: usize,
    pub n_max: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub concat_action: bool,
    pub pos_embedding: bool,
}

impl ReconConfig {
    pub fn new(d_proj: usize, act_dim: usize, n_max: usize) -> Self {
        Self {
            d_proj,
            act_dim,
            n_max,
            n_blocks: 1,
            n_heads: 1,
            concat_action: true,
            pos_embedding: true,
        }
    }

    pub fn d_tok(&self) -> usize {
        self.d_proj + self.act_dim
    }

    fn validate(&self) -> Result<()> {
        if self.d_proj == 0 || self.act_dim == 0 || self.n_max == 0 || self.n_blocks == 0 {
            return Err(Error::InvalidArg {
                op: "recon_config",
                why: format!("{self:?} has a zero dimension"),
            });
        }
        Ok(())
    }
}

/// Attention stack plus linear head. The learned positional table (one row
/// per agent index) is registered only when enabled, so the ablated variant
/// contributes exact zeros and owns no dead parameters.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    prefix: String,
    cfg: ReconConfig,
    blocks: Vec<AttnBlock>,
}

impl Reconstructor {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ReconConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d_tok = cfg.d_tok();
        if cfg.pos_embedding {
            // Transformer-style small-normal init keeps identity information
            // present from the first step without dominating the tokens.
            let table = Tensor::randn(&[cfg.n_max, d_tok], rng).map(|v| v * 0.02);
            store.insert(&format!("{prefix}.pos.table"), table)?;
        }
        let blocks = (0..cfg.n_blocks)
            .map(|i| AttnBlock::init(store, &format!("{prefix}.blk{i}"), d_tok, cfg.n_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        init_linear(
            store,
            &format!("{prefix}.head.w"),
            &format!("{prefix}.head.b"),
            d_tok,
            cfg.d_proj,
            rng,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    /// Per-agent tokens: `[z_i : a_i] + p_i`, one row per agent.
    pub fn build_tokens(
        &self,
        g: &Graph,
        lease: &Lease,
        z_hat: &Var,
        act_masked: &Var,
    ) -> Result<Var> {
        let zs = z_hat.shape();
        let as_ = act_masked.shape();
        if zs.len() != 2 || zs[1] != self.cfg.d_proj {
            return Err(Error::InvalidShape {
                op: "build_tokens",
                shape: zs,
                why: format!("expected [n_agents, {}]", self.cfg.d_proj),
            });
        }
        if as_.len() != 2 || as_[0] != zs[0] || as_[1] != self.cfg.act_dim {
            return Err(Error::InvalidShape {
                op: "build_tokens",
                shape: as_,
                why: format!("expected [{}, {}]", zs[0], self.cfg.act_dim),
            });
        }
        let n = zs[0];
        if n > self.cfg.n_max {
            return Err(Error::InvalidArg {
                op: "build_tokens",
                why: format!("{n} agents exceed table capacity {}", self.cfg.n_max),
            });
        }
        let act_part = if self.cfg.concat_action {
            act_masked.clone()
        } else {
            g.constant(Tensor::zeros(&[n, self.cfg.act_dim]))
        };
        let tokens = concat_last(&[z_hat, &act_part])?;
        if self.cfg.pos_embedding {
            let table = lease.var(&format!("{}.pos.table", self.prefix))?;
            tokens.add(&table.narrow_rows(0, n)?)
        } else {
            Ok(tokens)
        }
    }

    /// Run the attention stack and the linear head: `[N, d_tok] -> [N, d_proj]`.
    pub fn reconstruct(&self, lease: &Lease, tokens: &Var) -> Result<Var> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = block.forward(lease, &x)?;
        }
        let w = lease.var(&format!("{}.head.w", self.prefix))?;
        let b = lease.var(&format!("{}.head.b", self.prefix))?;
        x.matmul(w)?.add(b)
    }

    /// Tokens plus reconstruction in one call.
    pub fn forward(
        &self,
        g: &Graph,
        lease: &Lease,
        z_hat: &Var,
        act_masked: &Var,
    ) -> Result<Var> {
        let tokens = self.build_tokens(g, lease, z_hat, act_masked)?;
        self.reconstruct(lease, &tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_blocks(store: &mut ParamStore, prefix: &str) {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(&format!("{prefix}.blk")))
            .map(String::from)
            .collect();
        for n in names {
            store
                .update(&n, |t| t.data_mut().iter_mut().for_each(|v| *v = 0.0))
                .unwrap();
        }
    }

    fn build(cfg: &ReconConfig, seed: u64) -> (ParamStore, Reconstructor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let recon = Reconstructor::init(&mut store, "recon", cfg, &mut rng).unwrap();
        // Fresh blocks are identity maps; these tests want live mixing.
        crate::nets::randomize_residual_projections(&mut store, "recon", &mut rng);
        (store, recon)
    }

    #[test]
    fn tokens_concatenate_latent_and_action() {
        let mut cfg = ReconConfig::new(2, 1, 4);
        cfg.pos_embedding = false;
        let (store, recon) = build(&cfg, 0);
        let g = Graph::new();
        let lease = store.lease(&g);
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let tok = recon.build_tokens(&g, &lease, &z, &a).unwrap().value();
        assert_eq!(tok.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn positional_row_adds_onto_the_token() {
        let cfg = ReconConfig::new(2, 1, 4);
        let (mut store, recon) = build(&cfg, 1);
        store
            .update("recon.pos.table", |t| {
                t.row_mut(0).copy_from_slice(&[1.0, 1.0, 1.0]);
            })
            .unwrap();
        let g = Graph::new();
        let lease = store.lease(&g);
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let tok = recon.build_tokens(&g, &lease, &z, &a).unwrap().value();
        assert_eq!(tok.data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_action_off_zeroes_the_action_slot() {
        let mut cfg = ReconConfig::new(2, 2, 4);
        cfg.concat_action = false;
        cfg.pos_embedding = false;
        let (store, recon) = build(&cfg, 2);
        let g = Graph::new();
        let lease = store.lease(&g);
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![9.0, 9.0]]).unwrap());
        let tok = recon.build_tokens(&g, &lease, &z, &a).unwrap().value();
        assert_eq!(tok.row(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(tok.row(1), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_blocks_and_identity_head_slice_pass_tokens_through() {
        let mut cfg = ReconConfig::new(3, 2, 4);
        cfg.pos_embedding = false;
        let (mut store, recon) = build(&cfg, 3);
        zero_blocks(&mut store, "recon");
        let d_tok = cfg.d_tok();
        let mut head = Tensor::zeros(&[d_tok, cfg.d_proj]);
        for i in 0..cfg.d_proj {
            head.row_mut(i)[i] = 1.0;
        }
        store.set("recon.head.w", head).unwrap();
        store.set("recon.head.b", Tensor::zeros(&[cfg.d_proj])).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let z = Tensor::randn(&[2, 3], &mut rng);
        let a = Tensor::randn(&[2, 2], &mut rng);
        let g = Graph::new();
        let lease = store.lease(&g);
        let zv = g.constant(z.clone());
        let av = g.constant(a.clone());
        let y = recon.forward(&g, &lease, &zv, &av).unwrap().value();
        for r in 0..2 {
            for (got, want) in y.row(r).iter().zip(z.row(r)) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_is_agents_by_proj_for_all_agent_counts() {
        let cfg = ReconConfig::new(4, 2, 5);
        let (store, recon) = build(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for n in 1..=5 {
            let g = Graph::new();
            let lease = store.lease(&g);
            let z = g.constant(Tensor::randn(&[n, 4], &mut rng));
            let a = g.constant(Tensor::randn(&[n, 2], &mut rng));
            let y = recon.forward(&g, &lease, &z, &a).unwrap();
            assert_eq!(y.shape(), vec![n, 4]);
        }
        let g = Graph::new();
        let lease = store.lease(&g);
        let z = g.constant(Tensor::zeros(&[6, 4]));
        let a = g.constant(Tensor::zeros(&[6, 2]));
        assert!(recon.build_tokens(&g, &lease, &z, &a).is_err());
    }

    #[test]
    fn disabled_positional_table_keeps_exact_permutation_equivariance() {
        let mut cfg = ReconConfig::new(3, 2, 4);
        cfg.pos_embedding = false;
        let (store, recon) = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let z = Tensor::randn(&[4, 3], &mut rng);
        let a = Tensor::randn(&[4, 2], &mut rng);
        let perm = [3usize, 1, 0, 2];

        let fwd = |z: &Tensor, a: &Tensor| {
            let g = Graph::new();
            let lease = store.lease(&g);
            recon
                .forward(&g, &lease, &g.constant(z.clone()), &g.constant(a.clone()))
                .unwrap()
                .value()
        };
        let base = fwd(&z, &a);
        let mut pz = Tensor::zeros(&[4, 3]);
        let mut pa = Tensor::zeros(&[4, 2]);
        for (dst, &src) in perm.iter().enumerate() {
            pz.row_mut(dst).copy_from_slice(z.row(src));
            pa.row_mut(dst).copy_from_slice(a.row(src));
        }
        let pout = fwd(&pz, &pa);
        for (dst, &src) in perm.iter().enumerate() {
            for (x, y) in pout.row(dst).iter().zip(base.row(src)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn enabled_positional_table_breaks_equivariance_once_rows_differ() {
        let cfg = ReconConfig::new(3, 2, 4);
        let (store, recon) = build(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let z = Tensor::randn(&[4, 3], &mut rng);
        let a = Tensor::randn(&[4, 2], &mut rng);
        let perm = [1usize, 0, 2, 3];

        let fwd = |z: &Tensor, a: &Tensor| {
            let g = Graph::new();
            let lease = store.lease(&g);
            recon
                .forward(&g, &lease, &g.constant(z.clone()), &g.constant(a.clone()))
                .unwrap()
                .value()
        };
        let base = fwd(&z, &a);
        let mut pz = Tensor::zeros(&[4, 3]);
        let mut pa = Tensor::zeros(&[4, 2]);
        for (dst, &src) in perm.iter().enumerate() {
            pz.row_mut(dst).copy_from_slice(z.row(src));
            pa.row_mut(dst).copy_from_slice(a.row(src));
        }
        let pout = fwd(&pz, &pa);
        let max_dev = pout
            .row(0)
            .iter()
            .zip(base.row(1))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev > 1e-9, "identity information had no effect");
    }

    #[test]
    fn token_gradients_pass_finite_differences() {
        let cfg = ReconConfig::new(3, 2, 4);
        let (store, recon) = build(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let tokens = Tensor::randn(&[3, 5], &mut rng);
        let err = grad_check(
            |g, x| {
                let lease = store.lease(g);
                recon.reconstruct(&lease, x)?.sum()
            },
            &tokens,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn attention_mixes_information_across_agents() {
        let cfg = ReconConfig::new(3, 2, 4);
        let (store, recon) = build(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let tokens = Tensor::randn(&[3, 5], &mut rng);

        let fwd = |t: &Tensor| {
            let g = Graph::new();
            let lease = store.lease(&g);
            recon.reconstruct(&lease, &g.constant(t.clone())).unwrap().value()
        };
        let base = fwd(&tokens);
        let mut bumped = tokens.clone();
        bumped.row_mut(2)[0] += 0.1;
        let out = fwd(&bumped);
        // Perturbing token 2 must move reconstruction rows other than 2.
        let moved = (0..2).any(|i| {
            out.row(i)
                .iter()
                .zip(base.row(i))
                .any(|(x, y)| (x - y).abs() > 1e-9)
        });
        assert!(moved, "token perturbation stayed local");
    }
}
