//! Bilinear similarity and the masked InfoNCE objective.
//!
//! Queries are reconstructed features, keys are momentum-target features.
//! The key branch is severed inside [`info_nce`], so no gradient can reach
//! `k_all` regardless of how the caller built it.

use crate::error::{Error, Result};
use crate::masking::MaskVector;
use crate::params::ParamStore;
use crate::tensor::{mm_nn, mm_nt, Tensor};
use crate::graph::Var;

/// Register the learned similarity matrix, initialized to the identity so
/// training starts from a plain inner product.
pub fn init_similarity(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArg {
            op: "init_similarity",
            why: "similarity dimension must be positive".into(),
        });
    }
    store.insert(name, Tensor::eye(d))
}

/// `q^T W k` on plain tensors, for diagnostics and tests.
pub fn bilinear_similarity(q: &Tensor, k: &Tensor, w: &Tensor) -> Result<f64> {
    let d = q.numel();
    if q.rank() != 1 || k.rank() != 1 || k.numel() != d || w.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "bilinear_similarity",
            lhs: q.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let wk = mm_nn(w.data(), k.data(), d, d, 1);
    Ok(q.data().iter().zip(&wk).map(|(a, b)| a * b).sum())
}

/// All pairwise similarities `logits[i][j] = q_i^T W k_j` with the key
/// branch stop-gradiented.
fn similarity_logits(q_all: &Var, k_all: &Var, w: &Var) -> Result<Var> {
    let qs = q_all.shape();
    let ks = k_all.shape();
    if qs.len() != 2 || ks != qs {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: qs,
            rhs: ks,
        });
    }
    let k_fixed = k_all.stop_gradient();
    q_all.matmul(w)?.matmul(&k_fixed.transpose()?)
}

/// Masked InfoNCE over one joint sample: for every masked agent i, the
/// positive is `k_i` and the denominator runs over all N keys of the same
/// sample, `j = i` included.
pub fn info_nce(q_all: &Var, k_all: &Var, w: &Var, mask: &MaskVector) -> Result<Var> {
    let n = q_all.shape()[0];
    if mask.len() != n {
        return Err(Error::InvalidArg {
            op: "info_nce",
            why: format!("mask length {} vs {n} agents", mask.len()),
        });
    }
    let logits = similarity_logits(q_all, k_all, w)?;
    logits.with_value(|t| t.ensure_finite("info_nce similarities"))?;
    let logp = logits.log_softmax_last()?;
    let idx: Vec<usize> = (0..n).collect();
    let diag = logp.gather_last(&idx)?;
    let g = q_all.graph();
    let m = g.constant(Tensor::from_vec(
        vec![n],
        mask.bits().iter().map(|&b| b as f64).collect(),
    )?);
    diag.mul(&m)?.sum()?.neg()
}

/// Mean of [`info_nce`] over a batch of samples that may differ in mask.
pub fn info_nce_batch(
    items: &[(&Var, &Var, &MaskVector)],
    w: &Var,
) -> Result<Var> {
    let first = items.first().ok_or(Error::InvalidArg {
        op: "info_nce_batch",
        why: "empty batch".into(),
    })?;
    let mut total = info_nce(first.0, first.1, w, first.2)?;
    for (q, k, m) in &items[1..] {
        total = total.add(&info_nce(q, k, w, m)?)?;
    }
    total.smul(1.0 / items.len() as f64)
}

/// Fraction of masked agents whose most similar key is their own, ties
/// broken toward the lowest index. Pure tensor computation, no gradients.
pub fn contrastive_accuracy(
    q_all: &Tensor,
    k_all: &Tensor,
    w: &Tensor,
    mask: &MaskVector,
) -> Result<f64> {
    let n = q_all.shape()[0];
    let d = q_all.shape()[1];
    if k_all.shape() != [n, d] || w.shape() != [d, d] || mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "contrastive_accuracy",
            lhs: q_all.shape().to_vec(),
            rhs: k_all.shape().to_vec(),
        });
    }
    let qw = mm_nn(q_all.data(), w.data(), n, d, d);
    let logits = mm_nt(&qw, k_all.data(), n, d, n);
    let mut correct = 0usize;
    let mut masked = 0usize;
    for i in mask.masked_indices() {
        masked += 1;
        let row = &logits[i * n..(i + 1) * n];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == i {
            correct += 1;
        }
    }
    if masked == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / masked as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec1(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(vec![n], v).unwrap()
    }

    #[test]
    fn bilinear_cases_evaluate_exactly() {
        let eye = Tensor::eye(2);
        assert_eq!(
            bilinear_similarity(&vec1(vec![1.0, 0.0]), &vec1(vec![1.0, 0.0]), &eye).unwrap(),
            1.0
        );
        assert_eq!(
            bilinear_similarity(&vec1(vec![1.0, 0.0]), &vec1(vec![0.0, 1.0]), &eye).unwrap(),
            0.0
        );
        let swap = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            bilinear_similarity(&vec1(vec![1.0, 0.0]), &vec1(vec![0.0, 1.0]), &swap).unwrap(),
            1.0
        );
    }

    fn nce_value(q: Tensor, k: Tensor, w: Tensor, mask: &MaskVector) -> f64 {
        let g = Graph::new();
        let qv = g.leaf(q);
        let kv = g.leaf(k);
        let wv = g.leaf(w);
        info_nce(&qv, &kv, &wv, mask).unwrap().item().unwrap()
    }

    #[test]
    fn uniform_similarities_give_masked_count_times_log_n() {
        let q = Tensor::full(&[3, 2], 1.0);
        let k = Tensor::full(&[3, 2], 1.0);
        let all = nce_value(q.clone(), k.clone(), Tensor::eye(2), &MaskVector::full(3));
        assert!((all - 3.0 * 3.0f64.ln()).abs() < 1e-9, "got {all}");

        let one = nce_value(
            q,
            k,
            Tensor::eye(2),
            &MaskVector::new(vec![1, 0, 0]).unwrap(),
        );
        assert!((one - 3.0f64.ln()).abs() < 1e-9, "got {one}");
    }

    #[test]
    fn two_agent_separated_case_matches_closed_form() {
        // diagonal similarity 2, off-diagonal 0
        let q = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let loss = nce_value(q, k, Tensor::eye(2), &MaskVector::full(2));
        let expect = 2.0 * (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-9, "got {loss} want {expect}");
    }

    #[test]
    fn single_agent_full_mask_has_zero_loss() {
        let q = Tensor::from_rows(&[vec![0.7, -0.3]]).unwrap();
        let loss = nce_value(q.clone(), q, Tensor::eye(2), &MaskVector::full(1));
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn all_zero_mask_gives_zero_loss_and_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let q = g.leaf(Tensor::randn(&[3, 4], &mut rng));
        let k = g.leaf(Tensor::randn(&[3, 4], &mut rng));
        let w = g.leaf(Tensor::eye(4));
        let mask = MaskVector::new(vec![0, 0, 0]).unwrap();
        let loss = info_nce(&q, &k, &w, &mask).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        let grads = g.backward(&loss).unwrap();
        for leaf in [&q, &w] {
            let t = grads.get(leaf).unwrap();
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.get(&k).is_none());
    }

    #[test]
    fn keys_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let q = g.leaf(Tensor::randn(&[4, 3], &mut rng));
        let k = g.leaf(Tensor::randn(&[4, 3], &mut rng));
        let w = g.leaf(Tensor::eye(3));
        let loss = info_nce(&q, &k, &w, &MaskVector::full(4)).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert!(grads.get(&q).is_some());
        assert!(grads.get(&w).is_some());
        assert!(grads.get(&k).is_none(), "stop-gradient leaked");
    }

    #[test]
    fn masked_terms_are_nonnegative_for_multi_agent_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n: usize = rng.random_range(2..6);
            let q = Tensor::randn(&[n, 5], &mut rng);
            let k = Tensor::randn(&[n, 5], &mut rng);
            let loss = nce_value(q, k, Tensor::eye(5), &MaskVector::full(n));
            assert!(loss >= 0.0, "loss {loss} for n {n}");
        }
    }

    #[test]
    fn loss_is_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[4, 3], &mut rng);
        let k = Tensor::randn(&[4, 3], &mut rng);
        let w = Tensor::randn(&[3, 3], &mut rng);
        let mask = MaskVector::new(vec![1, 0, 1, 0]).unwrap();
        let base = nce_value(q.clone(), k.clone(), w.clone(), &mask);

        let perm = [2usize, 3, 1, 0];
        let permute = |t: &Tensor| {
            let mut out = Tensor::zeros(t.shape());
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).copy_from_slice(t.row(src));
            }
            out
        };
        let pmask =
            MaskVector::new(perm.iter().map(|&s| mask.bits()[s]).collect()).unwrap();
        let permuted = nce_value(permute(&q), permute(&k), w, &pmask);
        assert_eq!(base.to_bits(), permuted.to_bits());
    }

    #[test]
    fn shifting_one_rows_similarities_leaves_the_loss_unchanged() {
        // Keys share first coordinate 1, so adding c to q_i's first
        // coordinate shifts every similarity in row i by exactly c.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Tensor::from_rows(&[
            vec![1.0, 0.3, -0.2],
            vec![1.0, -1.1, 0.8],
            vec![1.0, 0.5, 0.4],
        ])
        .unwrap();
        let q = Tensor::randn(&[3, 3], &mut rng);
        let base = nce_value(q.clone(), k.clone(), Tensor::eye(3), &MaskVector::full(3));
        let mut shifted = q.clone();
        shifted.row_mut(1)[0] += 7.5;
        let moved = nce_value(shifted, k, Tensor::eye(3), &MaskVector::full(3));
        assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    #[test]
    fn non_finite_similarities_are_rejected() {
        let g = Graph::new();
        let q = g.leaf(Tensor::full(&[2, 2], f64::INFINITY));
        let k = g.leaf(Tensor::full(&[2, 2], 1.0));
        let w = g.leaf(Tensor::eye(2));
        assert!(matches!(
            info_nce(&q, &k, &w, &MaskVector::full(2)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn batch_mean_averages_per_sample_sums() {
        let g = Graph::new();
        let q1 = g.leaf(Tensor::full(&[3, 2], 1.0));
        let k1 = g.leaf(Tensor::full(&[3, 2], 1.0));
        let q2 = g.leaf(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let k2 = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let w = g.leaf(Tensor::eye(2));
        let m1 = MaskVector::full(3);
        let m2 = MaskVector::full(2);
        let batch = info_nce_batch(&[(&q1, &k1, &m1), (&q2, &k2, &m2)], &w)
            .unwrap()
            .item()
            .unwrap();
        let expect = (3.0 * 3.0f64.ln() + 2.0 * (1.0 + (-2.0f64).exp()).ln()) / 2.0;
        assert!((batch - expect).abs() < 1e-9);
    }

    #[test]
    fn accuracy_is_perfect_for_aligned_orthogonal_pairs() {
        let q = Tensor::eye(3);
        let k = Tensor::eye(3);
        let acc = contrastive_accuracy(&q, &k, &Tensor::eye(3), &MaskVector::full(3)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn identical_keys_resolve_ties_toward_index_zero() {
        let q = Tensor::full(&[3, 2], 0.4);
        let k = Tensor::full(&[3, 2], 1.0);
        let mask = MaskVector::full(3);
        let acc = contrastive_accuracy(&q, &k, &Tensor::eye(2), &mask).unwrap();
        // Only agent 0 wins its own tie.
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        let first_only = MaskVector::new(vec![1, 0, 0]).unwrap();
        let acc0 = contrastive_accuracy(&q, &k, &Tensor::eye(2), &first_only).unwrap();
        assert_eq!(acc0, 1.0);
    }

    #[test]
    fn random_pairs_sit_near_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 4;
        let trials = 10_000;
        let mut acc_sum = 0.0;
        for _ in 0..trials {
            let q = Tensor::randn(&[n, 6], &mut rng);
            let k = Tensor::randn(&[n, 6], &mut rng);
            acc_sum +=
                contrastive_accuracy(&q, &k, &Tensor::eye(6), &MaskVector::full(n)).unwrap();
        }
        let mean = acc_sum / trials as f64;
        assert!((mean - 0.25).abs() <= 0.02, "mean accuracy {mean}");
    }

    #[test]
    fn info_nce_gradients_pass_finite_differences() {
        use crate::graph::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Tensor::randn(&[4, 3], &mut rng);
        let w0 = Tensor::randn(&[3, 3], &mut rng);
        let mask = MaskVector::new(vec![1, 1, 0, 1]).unwrap();

        let kq = k.clone();
        let wq = w0.clone();
        let mq = mask.clone();
        let err_q = grad_check(
            move |g, q| {
                let kv = g.constant(kq.clone());
                let wv = g.constant(wq.clone());
                info_nce(q, &kv, &wv, &mq)
            },
            &Tensor::randn(&[4, 3], &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err_q <= 1e-4, "query grad err {err_q}");

        let qt = Tensor::randn(&[4, 3], &mut rng);
        let err_w = grad_check(
            move |g, w| {
                let qv = g.constant(qt.clone());
                let kv = g.constant(k.clone());
                info_nce(&qv, &kv, w, &mask)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err_w <= 1e-4, "similarity grad err {err_w}");
    }
}
