//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single `criterion N PASS` line on success; configs for the two
//! long-running criteria were frozen from reference runs and are not tuned
//! here. Budgets are asserted with wall clocks inside the tests themselves.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use ma2cl_core::buffer::collect_rollout;
use ma2cl_core::config::TrainConfig;
use ma2cl_core::contrastive::info_nce;
use ma2cl_core::envs::make_env;
use ma2cl_core::gradcheck;
use ma2cl_core::masking::{apply_mask, sample_mask};
use ma2cl_core::nets::{ema_update, AttnBlock, EncoderConfig, Mlp, ProjectorConfig};
use ma2cl_core::optim::Adam;
use ma2cl_core::ppo::{ppo_actor_loss, AuxTask, MarlPpo};
use ma2cl_core::probe::{chance_accuracy, probe_train, ProbeConfig, ProbeSpec};
use ma2cl_core::recon::{ReconConfig, Reconstructor};
use ma2cl_core::trainer::{read_metrics, run_ablation, stream, train, Ma2clTask};
use ma2cl_core::{
    Graph, MaskStrategy, MaskVariant, MaskVector, ParamStore, Tensor, TimestepSample,
};

// ---------------------------------------------------------------------
// Criterion 1: every differentiable block matches finite differences.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_every_block_matches_finite_differences() {
    let start = Instant::now();
    let report = gradcheck::run(20, 0).expect("gradient suite");
    let elapsed = start.elapsed();

    assert_eq!(report.components.len(), gradcheck::COMPONENTS.len());
    for c in &report.components {
        assert!(c.instances >= 20, "{}: only {} instances", c.component, c.instances);
        assert!(
            c.max_rel_err <= 1e-4,
            "{}: max relative error {:.3e} above 1e-4",
            c.component,
            c.max_rel_err
        );
    }
    assert!(elapsed.as_secs_f64() < 60.0, "suite took {elapsed:?}");
    println!(
        "criterion 1 PASS: 6 components x 20 instances, worst rel err {:.2e}, {:.2}s",
        report.max_rel_err(),
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 2: closed-form loss values match hand calculations.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_closed_form_losses_match_hand_values() {
    // Uniform logits: zero queries make every similarity zero, so the
    // contrastive loss must equal n_masked * ln(n_agents) exactly.
    let d = 3;
    for (n, bits) in [
        (2usize, vec![1u8, 0]),
        (3, vec![1, 1, 0]),
        (4, vec![1, 1, 1, 1]),
        (5, vec![0, 1, 0, 1, 0]),
    ] {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[n, d]));
        let k = g.constant(Tensor::randn(&[n, d], &mut stream(2, 0)));
        let w = g.constant(Tensor::eye(d));
        let mask = MaskVector::new(bits.clone()).unwrap();
        let loss = info_nce(&q, &k, &w, &mask).unwrap().item().unwrap();
        let want = mask.n_masked() as f64 * (n as f64).ln();
        assert!(
            (loss - want).abs() <= 1e-9,
            "n={n} masked={}: loss {loss} vs {want}",
            mask.n_masked()
        );
    }

    // EMA arithmetic against an elementwise hand computation.
    for tau in [0.25, 0.01] {
        let mut target = ParamStore::new();
        target
            .insert_target("w", Tensor::from_vec(vec![3], vec![0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        let mut online = ParamStore::new();
        online
            .insert("w", Tensor::from_vec(vec![3], vec![1.5, 0.75, -0.5]).unwrap())
            .unwrap();
        ema_update(&mut target, &online, tau).unwrap();
        let got = target.get("w").unwrap();
        for (g_i, (t0, o)) in got
            .data()
            .iter()
            .zip([(0.5, 1.5), (-1.25, 0.75), (2.0, -0.5)])
        {
            let want = tau * t0 + (1.0 - tau) * o;
            assert!((g_i - want).abs() <= 1e-12, "tau={tau}: {g_i} vs {want}");
        }
    }

    // The three clipped-surrogate cases, exact.
    let g = Graph::new();
    let zero = g.constant(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
    let adv_pos = g.constant(Tensor::from_vec(vec![1], vec![1.0]).unwrap());
    let adv_neg = g.constant(Tensor::from_vec(vec![1], vec![-1.0]).unwrap());

    let lp = g.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
    assert_eq!(ppo_actor_loss(&lp, &zero, &adv_pos, 0.2).unwrap().item().unwrap(), -1.0);

    let lp = g.leaf(Tensor::from_vec(vec![1], vec![2.0_f64.ln()]).unwrap());
    assert_eq!(ppo_actor_loss(&lp, &zero, &adv_pos, 0.2).unwrap().item().unwrap(), -1.2);

    let lp = g.leaf(Tensor::from_vec(vec![1], vec![0.5_f64.ln()]).unwrap());
    assert_eq!(ppo_actor_loss(&lp, &zero, &adv_neg, 0.2).unwrap().item().unwrap(), 0.8);

    println!("criterion 2 PASS: uniform contrastive, EMA, and clip values are exact");
}

// ---------------------------------------------------------------------
// Criterion 3: target networks move only through the EMA and never
// receive gradients.
// ---------------------------------------------------------------------

fn snapshot(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .map(|(name, t)| (name.to_string(), t.data().to_vec()))
        .collect()
}

#[test]
fn criterion_3_targets_move_only_by_ema_and_get_no_gradients() {
    let mut cfg = TrainConfig::default();
    cfg.n_agents = 2;
    cfg.episode_length = 16;
    cfg.total_steps = 16;
    cfg.hidden_dims = vec![8];
    cfg.repr_dim = 8;
    cfg.proj_hidden = 8;
    cfg.aux_batch = 4;
    cfg.tau = 0.25;
    // Exactly one optimizer step, so one EMA application to predict.
    cfg.ppo.ppo_epochs = 1;
    cfg.ppo.num_mini_batch = 1;
    cfg.validate().unwrap();

    let mut env = make_env(&cfg.env_name, cfg.n_agents).unwrap();
    let enc_cfg = EncoderConfig {
        obs_dim: env.obs_dim(),
        hidden_dims: cfg.hidden_dims.clone(),
        repr_dim: cfg.repr_dim,
    };
    let mut ppo = MarlPpo::init(
        cfg.ppo.clone(),
        &enc_cfg,
        cfg.n_agents,
        env.action_space(),
        &mut stream(0, 0),
    )
    .unwrap();
    let mut task = Ma2clTask::new(&ppo, &cfg, &mut stream(0, 1)).unwrap();
    let trajs = vec![
        collect_rollout(env.as_mut(), &ppo, cfg.episode_length, &mut stream(0, 16)).unwrap(),
    ];
    task.prepare(&trajs, &mut stream(0, 2)).unwrap();

    for (name, _) in task.target_enc().iter() {
        assert!(task.target_enc().is_target(name).unwrap(), "{name} not target-flagged");
    }
    for (name, _) in task.target_proj().iter() {
        assert!(task.target_proj().is_target(name).unwrap(), "{name} not target-flagged");
    }

    // A forward through target parameters alone has no gradient path at
    // all: backward refuses outright.
    let g = Graph::new();
    let tenc = task.target_enc().lease(&g);
    let x = g.constant(Tensor::randn(&[cfg.n_agents, env.obs_dim()], &mut stream(0, 3)));
    let z = ppo.actor_encoder().forward(&tenc, &x).unwrap();
    assert!(
        g.backward(&z.mean().unwrap()).is_err(),
        "target-only forward should have no gradient path"
    );

    // With a trainable input in the same graph, backward succeeds, the
    // input gets a gradient, and the targets still get none.
    let g = Graph::new();
    let tenc = task.target_enc().lease(&g);
    let x = g.leaf(Tensor::randn(&[cfg.n_agents, env.obs_dim()], &mut stream(0, 3)));
    let z = ppo.actor_encoder().forward(&tenc, &x).unwrap();
    let grads = g.backward(&z.mean().unwrap()).unwrap();
    assert!(grads.get(&x).is_some(), "leaf input lost its gradient");
    assert!(tenc.grads(&grads).is_empty(), "target encoder received gradients");

    let g = Graph::new();
    let tproj = task.target_proj().lease(&g);
    let mut scratch = ParamStore::new();
    let proj_net = Mlp::projector(
        &mut scratch,
        "proj",
        &ProjectorConfig {
            in_dim: cfg.repr_dim,
            hidden_dim: cfg.proj_hidden,
            out_dim: cfg.proj_out_dim(),
        },
        &mut stream(0, 4),
    )
    .unwrap();
    let h = g.leaf(Tensor::randn(&[3, cfg.repr_dim], &mut stream(0, 5)));
    let y = proj_net.forward(&tproj, &h).unwrap();
    let grads = g.backward(&y.mean().unwrap()).unwrap();
    assert!(tproj.grads(&grads).is_empty(), "target projector received gradients");

    // The joint update routes auxiliary gradients only to online parameters.
    {
        let g = Graph::new();
        let actor_lease = ppo.actor.lease(&g);
        let loss = task.attach(&g, &actor_lease).unwrap();
        let grads = g.backward(&loss).unwrap();
        let mut collected: IndexMap<String, Tensor> = IndexMap::new();
        task.collect_grads(&grads, &mut collected).unwrap();
        assert!(!collected.is_empty());
        for key in collected.keys() {
            assert!(key.starts_with("aux."), "unexpected gradient key {key}");
            let name = &key["aux.".len()..];
            assert!(task.online().get(name).is_ok(), "gradient for unknown {key}");
        }
    }

    let enc_before = snapshot(task.target_enc());
    let proj_before = snapshot(task.target_proj());

    let mut adam = Adam::default();
    ppo.update(&trajs, &mut adam, &mut stream(0, 6), Some(&mut task))
        .unwrap();

    // After the single step both targets must equal
    // tau * before + (1 - tau) * online_after, elementwise.
    let online_enc = ppo.actor.subset("enc.");
    let online_proj = task.online().subset("proj.");
    for (store_after, before, online) in [
        (task.target_enc(), &enc_before, &online_enc),
        (task.target_proj(), &proj_before, &online_proj),
    ] {
        assert_eq!(store_after.len(), before.len());
        for (name, vals) in before {
            let after = store_after.get(name).unwrap();
            let live = online.get(name).unwrap();
            for ((a, t0), o) in after.data().iter().zip(vals).zip(live.data()) {
                let want = cfg.tau * t0 + (1.0 - cfg.tau) * o;
                assert!(
                    (a - want).abs() <= 1e-12,
                    "{name}: target {a} vs EMA prediction {want}"
                );
            }
        }
    }

    println!("criterion 3 PASS: targets track by EMA only and hold no gradients");
}

// ---------------------------------------------------------------------
// Criterion 4: structural invariants of attention and masking.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_attention_and_masking_invariants_hold() {
    // Fresh blocks start as the identity, so give the residual projections
    // live values through the public store interface before testing.
    let randomize_blocks = |store: &mut ParamStore, prefix: &str, rng_seed: u64| {
        let mut rng = stream(rng_seed, 0);
        let names: Vec<String> = store
            .names()
            .filter(|n| {
                n.starts_with(prefix) && (n.ends_with(".wo") || n.ends_with(".ffn.w1"))
            })
            .map(String::from)
            .collect();
        for name in names {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();
        }
    };

    // Permutation equivariance of the whole reconstruction stack with the
    // positional table disabled: permuting agents permutes outputs, bitwise.
    let mut cfg = ReconConfig::new(3, 2, 4);
    cfg.pos_embedding = false;
    let mut store = ParamStore::new();
    let recon = Reconstructor::init(&mut store, "recon", &cfg, &mut stream(40, 0)).unwrap();
    randomize_blocks(&mut store, "recon.", 41);

    let mut rng = stream(42, 0);
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
            assert_eq!(x.to_bits(), y.to_bits(), "row {dst} differs after permutation");
        }
    }

    // A block whose parameters are all zero is the identity map.
    let mut store = ParamStore::new();
    let block = AttnBlock::init(&mut store, "blk", 6, 2, &mut stream(43, 0)).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        store.update(&name, |t| t.data_mut().iter_mut().for_each(|v| *v = 0.0)).unwrap();
    }
    let x = Tensor::randn(&[4, 6], &mut stream(44, 0));
    let g = Graph::new();
    let lease = store.lease(&g);
    let y = block.forward(&lease, &g.constant(x.clone())).unwrap().value();
    for (got, want) in y.data().iter().zip(x.data()) {
        assert_eq!(got.to_bits(), want.to_bits(), "zero block is not the identity");
    }

    // Masking rewrites exactly the masked rows and nothing else.
    let mut rng = stream(45, 0);
    let n = 4;
    let sample = TimestepSample {
        obs_t: Tensor::randn(&[n, 5], &mut rng),
        act_t: Tensor::randn(&[n, 2], &mut rng),
        obs_prev: Tensor::randn(&[n, 5], &mut rng),
        act_prev: Tensor::randn(&[n, 2], &mut rng),
        episode_id: 0,
        t: 3,
    };
    for variant in [
        MaskVariant::PrevStep,
        MaskVariant::PrevStepGauss,
        MaskVariant::FullGauss,
        MaskVariant::Zero,
    ] {
        let strategy = MaskStrategy::new(variant, 1).unwrap();
        let mask = sample_mask(n, 2, &mut rng).unwrap();
        let (obs, act) = apply_mask(&sample, &mask, &strategy, &mut rng).unwrap();
        for i in 0..n {
            let obs_same = obs.row(i) == sample.obs_t.row(i);
            let act_same = act.row(i) == sample.act_t.row(i);
            if mask.is_masked(i) {
                assert!(!obs_same, "{variant:?}: masked row {i} unchanged");
                assert_eq!(act.row(i), sample.act_prev.row(i));
            } else {
                assert!(obs_same && act_same, "{variant:?}: unmasked row {i} altered");
            }
        }
    }

    println!("criterion 4 PASS: equivariance, identity block, and mask locality hold");
}

// ---------------------------------------------------------------------
// Criterion 5: the synthetic probe starts at chance and learns retrieval.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_synthetic_probe_reaches_retrieval_from_chance() {
    let start = Instant::now();
    let spec = ProbeSpec::reference(0);
    let chance = chance_accuracy(&spec, 5000, 0).unwrap();
    assert!(
        (chance - 0.25).abs() <= 0.03,
        "untrained accuracy {chance} outside 0.25 +/- 0.03"
    );

    let report = probe_train(&ProbeConfig::new(ProbeSpec::reference(0))).unwrap();
    let elapsed = start.elapsed();
    assert!(
        report.final_accuracy >= 0.9,
        "final retrieval accuracy {} below 0.9 after 2000 steps",
        report.final_accuracy
    );
    assert!(elapsed.as_secs_f64() < 300.0, "probe took {elapsed:?}");
    println!(
        "criterion 5 PASS: chance {:.3}, trained {:.3} in {:.1}s",
        chance,
        report.final_accuracy,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 6: the auxiliary task helps on the hardest environment.
// ---------------------------------------------------------------------

/// Frozen comparison config; seeds 0..5 on both arms.
fn comparison_cfg(seed: u64, enabled: bool) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.env_name = "leader_follower".into();
    cfg.n_agents = 3;
    cfg.total_steps = 200_000;
    cfg.proj_hidden = 256;
    cfg.aux_batch = 64;
    cfg.seed = seed;
    cfg.ma2cl_enabled = enabled;
    cfg
}

fn auc(rows: &[ma2cl_core::trainer::MetricsRow]) -> f64 {
    rows.iter().map(|r| r.episode_return_mean).sum()
}

#[test]
fn criterion_6_auxiliary_task_beats_the_rl_baseline() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut finals = (Vec::new(), Vec::new());
    let mut auc_wins = 0usize;

    for seed in 0..5u64 {
        let with = train(
            &comparison_cfg(seed, true),
            &dir.path().join(format!("ma2cl/seed{seed}")),
        )
        .unwrap();
        let without = train(
            &comparison_cfg(seed, false),
            &dir.path().join(format!("base/seed{seed}")),
        )
        .unwrap();
        if auc(&with.rows) >= auc(&without.rows) {
            auc_wins += 1;
        }
        println!(
            "  seed {seed}: final eval {:.2} vs baseline {:.2}",
            with.final_eval_mean, without.final_eval_mean
        );
        finals.0.push(with.final_eval_mean);
        finals.1.push(without.final_eval_mean);
    }
    let elapsed = start.elapsed();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m, b) = (mean(&finals.0), mean(&finals.1));
    assert!(m >= b, "mean final eval {m:.2} fell below baseline {b:.2}");
    assert!(auc_wins >= 3, "auxiliary arm won AUC on only {auc_wins}/5 seeds");
    assert!(elapsed.as_secs_f64() < 1800.0, "comparison took {elapsed:?}");
    println!(
        "criterion 6 PASS: mean final eval {m:.2} vs baseline {b:.2}, AUC wins {auc_wins}/5, {:.0}s",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 7: the ablation grid runs and the contrastive loss falls.
// ---------------------------------------------------------------------

/// Frozen ablation base: small nets and a hot actor learning rate so the
/// contrastive trend is decisive within 5000 steps.
fn ablation_base() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.n_agents = 4;
    cfg.total_steps = 5_000;
    cfg.episode_length = 25;
    cfg.ppo.lr_actor = 2e-3;
    cfg.hidden_dims = vec![16];
    cfg.repr_dim = 16;
    cfg.proj_hidden = 32;
    cfg.aux_batch = 32;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Mean `cl_loss` over the first and last tenth of a run.
fn edge_means(path: &Path) -> (f64, f64) {
    let rows = read_metrics(path).unwrap();
    let tenth = (rows.len() / 10).max(1);
    let head = rows[..tenth].iter().map(|r| r.cl_loss).sum::<f64>() / tenth as f64;
    let tail = rows[rows.len() - tenth..].iter().map(|r| r.cl_loss).sum::<f64>() / tenth as f64;
    (head, tail)
}

#[test]
fn criterion_7_ablation_grid_runs_and_contrastive_loss_falls() {
    let base = ablation_base();
    let dir = tempfile::tempdir().unwrap();
    let seeds = 3usize;

    for (preset, expected) in [
        ("strategy_sweep", vec!["prev", "prev_gauss", "full_gauss", "zero"]),
        ("nmask_sweep", vec!["nmask1", "nmask2", "nmask3", "nmask4"]),
        ("offset_sweep", vec!["k1", "k2", "k3", "k4"]),
    ] {
        let paths = run_ablation(preset, &base, dir.path(), seeds).unwrap();
        assert_eq!(paths.len(), expected.len() * seeds, "{preset}: wrong run count");

        let mut by_variant: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for p in &paths {
            let variant = p
                .parent()
                .and_then(Path::parent)
                .and_then(Path::file_name)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            by_variant.entry(variant).or_default().push(edge_means(p));
        }
        assert_eq!(
            by_variant.keys().map(String::as_str).collect::<Vec<_>>(),
            {
                let mut sorted = expected.clone();
                sorted.sort_unstable();
                sorted
            },
            "{preset}: unexpected variant set"
        );

        for (variant, edges) in &by_variant {
            assert_eq!(edges.len(), seeds);
            let first = median(edges.iter().map(|e| e.0).collect());
            let last = median(edges.iter().map(|e| e.1).collect());
            assert!(
                first > last,
                "{preset}/{variant}: contrastive loss rose ({first:.4} -> {last:.4})"
            );
            println!("  {preset}/{variant}: cl_loss {first:.3} -> {last:.3}");
        }
    }

    println!("criterion 7 PASS: 12 variants x 3 seeds completed with falling cl_loss");
}

// ---------------------------------------------------------------------
// Criterion 8: identical configs reproduce metrics bit for bit.
// ---------------------------------------------------------------------

/// Metrics text with the wall-clock column removed; everything else must
/// match down to the last digit.
fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_8_identical_configs_reproduce_bitwise() {
    let mut cfg = TrainConfig::default();
    cfg.n_agents = 2;
    cfg.episode_length = 20;
    cfg.total_steps = 100;
    cfg.hidden_dims = vec![8];
    cfg.repr_dim = 8;
    cfg.proj_hidden = 8;
    cfg.aux_batch = 6;
    cfg.eval_interval = 2;
    cfg.eval_episodes = 2;
    cfg.rollout_threads = 1;

    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        train(&cfg, &out).unwrap();
        (
            std::fs::read_to_string(out.join("metrics.csv")).unwrap(),
            std::fs::read_to_string(out.join("eval.csv")).unwrap(),
        )
    };
    let (metrics_a, eval_a) = run("a");
    let (metrics_b, eval_b) = run("b");

    assert_eq!(
        strip_wall_time(&metrics_a),
        strip_wall_time(&metrics_b),
        "metrics diverged between identical runs"
    );
    assert_eq!(eval_a, eval_b, "evaluation rows diverged between identical runs");
    assert_ne!(metrics_a.lines().count(), 1, "metrics file is empty");
    println!("criterion 8 PASS: two identical runs match bit for bit");
}
