use super::*;
use crate::init::Seeded;
use proptest::prelude::*;

fn seq(rng: &mut Seeded, c: usize, n: usize) -> SequencedMap {
    SequencedMap::from_sequence(rng.uniform(&[c, n], 1.0)).unwrap()
}

fn column(m: &SequencedMap, j: usize) -> Vec<f64> {
    (0..m.channels()).map(|c| m.matrix().at2(c, j)).collect()
}

/// softmax attention composed from the tensor primitives.
fn sa_oracle(q: &SequencedMap, k: &SequencedMap, v: &SequencedMap) -> Tensor {
    let logits = ops::matmul(&ops::transpose(q.matrix()).unwrap(), k.matrix()).unwrap();
    let w = ops::softmax_rows(&logits).unwrap();
    let o = ops::matmul(&w, &ops::transpose(v.matrix()).unwrap()).unwrap();
    ops::transpose(&o).unwrap()
}

#[test]
fn sequenced_map_round_trip() {
    let t = Seeded::new(1).uniform(&[2, 3, 4, 5], 1.0);
    let s = SequencedMap::from_map(&t, 1).unwrap();
    assert_eq!(s.channels(), 3);
    assert_eq!(s.len(), 20);
    assert_eq!(s.to_map(), t.batch_item(1).unwrap());
    assert_eq!(s.matrix().at2(2, 4 + 5), t.at4(1, 2, 1, 4));
}

#[test]
fn project_qkv_cases() {
    let mut rng = Seeded::new(2);
    let x = seq(&mut rng, 4, 6);
    let (q, k, v) = project_qkv(&x, &x, &ProjectionSet::identity(4)).unwrap();
    assert_eq!((&q, &k, &v), (&x, &x, &x));

    let mut proj = ProjectionSet::identity(4);
    proj.w_v = Pointwise::zeros(4, 4);
    let (_, _, v) = project_qkv(&x, &x, &proj).unwrap();
    assert!(v.matrix().data().iter().all(|&a| a == 0.0));

    let xq = seq(&mut rng, 3, 5);
    let xk = seq(&mut rng, 2, 7);
    let proj = ProjectionSet::seeded(&mut rng, 3, 2, 4);
    let (q, k, v) = project_qkv(&xq, &xk, &proj).unwrap();
    assert_eq!((q.len(), k.len(), v.len()), (5, 7, 7));
    for (out, w, x) in [(&q, &proj.w_q, &xq), (&k, &proj.w_k, &xk), (&v, &proj.w_v, &xk)] {
        for j in 0..x.len() {
            let col = column(x, j);
            for o in 0..4 {
                let want: f64 = (0..col.len()).map(|i| w.weight().at2(o, i) * col[i]).sum::<f64>()
                    + w.bias().data()[o];
                assert!((out.matrix().at2(o, j) - want).abs() <= 1e-12);
            }
        }
    }
    assert!(project_qkv(&xk, &xk, &proj).is_err());
}

#[test]
fn pointwise_matches_one_by_one_conv() {
    let mut rng = Seeded::new(3);
    let map = rng.uniform(&[1, 3, 2, 4], 1.0);
    let pw = Pointwise::new(rng.uniform(&[5, 3], 1.0), rng.uniform(&[5], 1.0)).unwrap();
    let via_seq = pw.apply(&SequencedMap::from_map(&map, 0).unwrap()).unwrap().to_map();
    let via_conv = ops::conv2d(&map, &pw.to_conv_spec()).unwrap();
    assert!(via_seq.max_abs_diff(&via_conv).unwrap() <= 1e-14);
}

#[test]
fn sa_exact_cases() {
    let mut rng = Seeded::new(4);
    let q = seq(&mut rng, 4, 3);
    let k = seq(&mut rng, 4, 1);
    let v = seq(&mut rng, 4, 1);
    let y = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
    for i in 0..3 {
        assert!(column(&y, i).iter().zip(column(&v, 0)).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    let kcol = rng.uniform(&[4, 1], 1.0);
    let k = SequencedMap::from_sequence(
        Tensor::new(&[4, 5], kcol.data().iter().flat_map(|&x| [x; 5]).collect()).unwrap(),
    )
    .unwrap();
    let v = seq(&mut rng, 4, 5);
    let y = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
    for i in 0..3 {
        for c in 0..4 {
            let mean = (0..5).map(|j| v.matrix().at2(c, j)).sum::<f64>() / 5.0;
            assert!((y.matrix().at2(c, i) - mean).abs() < 1e-12);
        }
    }

    let q = seq(&mut rng, 4, 6);
    let k = seq(&mut rng, 4, 6);
    let v = seq(&mut rng, 4, 6);
    let mut counter = OpCounter::new();
    let y = sa_exact(&q, &k, &v, &mut counter).unwrap();
    assert!(y.matrix().max_abs_diff(&sa_oracle(&q, &k, &v)).unwrap() <= 1e-10);
    assert_eq!(counter.macs(), 2 * 6 * 6 * 4);
    assert_eq!(counter.aux_peak(), 36);

    assert!(sa_exact(&q, &seq(&mut rng, 3, 6), &v, &mut OpCounter::new()).is_err());
    assert!(sa_exact(&q, &k, &seq(&mut rng, 4, 5), &mut OpCounter::new()).is_err());
}

#[test]
fn f_theta_cases() {
    let mut rng = Seeded::new(5);
    let x = seq(&mut rng, 3, 4);
    let zero = FeedForward::new(Pointwise::zeros(6, 3), Pointwise::zeros(3, 6)).unwrap();
    assert!(f_theta(&x, &zero).unwrap().matrix().data().iter().all(|&v| v == 0.0));

    let positive = SequencedMap::from_sequence(rng.uniform_range(&[3, 4], 0.1, 1.0)).unwrap();
    let id = FeedForward::new(Pointwise::identity(3), Pointwise::identity(3)).unwrap();
    assert_eq!(f_theta(&positive, &id).unwrap(), positive);

    let ffn = FeedForward::seeded(&mut rng, 3, 6);
    let y = f_theta(&x, &ffn).unwrap();
    for j in 0..4 {
        let col = column(&x, j);
        let hidden: Vec<f64> = (0..6)
            .map(|h| {
                let s: f64 = (0..3).map(|i| ffn.first.weight().at2(h, i) * col[i]).sum();
                (s + ffn.first.bias().data()[h]).max(0.0)
            })
            .collect();
        for o in 0..3 {
            let want: f64 = (0..6).map(|h| ffn.second.weight().at2(o, h) * hidden[h]).sum::<f64>()
                + ffn.second.bias().data()[o];
            assert!((y.matrix().at2(o, j) - want).abs() <= 1e-12);
        }
    }
    assert!(f_theta(&seq(&mut rng, 2, 4), &ffn).is_err());
    assert!(FeedForward::new(Pointwise::zeros(6, 3), Pointwise::zeros(3, 5)).is_err());
}

#[test]
fn multi_head_sa_cases() {
    let mut rng = Seeded::new(6);
    let xq = seq(&mut rng, 4, 5);
    let xk = seq(&mut rng, 4, 7);
    let head = ProjectionSet::seeded(&mut rng, 4, 4, 4);
    let one = multi_head_sa(&xq, &xk, std::slice::from_ref(&head), &Pointwise::identity(4)).unwrap();
    let (q, k, v) = project_qkv(&xq, &xk, &head).unwrap();
    let direct = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
    assert_eq!(one.matrix(), direct.matrix());

    let zero = multi_head_sa(&xq, &xk, std::slice::from_ref(&head), &Pointwise::zeros(4, 4)).unwrap();
    assert!(zero.matrix().data().iter().all(|&v| v == 0.0));

    let h2 = ProjectionSet::seeded(&mut rng, 4, 4, 4);
    let w_out = Pointwise::seeded(&mut rng, 4, 8);
    let got = multi_head_sa(&xq, &xk, &[head.clone(), h2.clone()], &w_out).unwrap();
    let a = {
        let (q, k, v) = project_qkv(&xq, &xk, &head).unwrap();
        sa_oracle(&q, &k, &v)
    };
    let b = {
        let (q, k, v) = project_qkv(&xq, &xk, &h2).unwrap();
        sa_oracle(&q, &k, &v)
    };
    let cat = ops::channel_concat(&[&a.reshape(&[1, 4, 1, 5]).unwrap(), &b.reshape(&[1, 4, 1, 5]).unwrap()]).unwrap();
    let want = ops::conv2d(&cat, &w_out.to_conv_spec()).unwrap();
    assert!(got.to_map().max_abs_diff(&want).unwrap() <= 1e-10);

    assert!(multi_head_sa(&xq, &xk, &[], &w_out).is_err());
}

#[test]
fn lt_trivial_cases() {
    let mut rng = Seeded::new(7);
    // single key collinear with the query
    let q = seq(&mut rng, 4, 1);
    let k = SequencedMap::from_sequence(q.matrix().map(|x| 3.0 * x)).unwrap();
    let v = seq(&mut rng, 4, 1);
    for y in [
        lt_bruteforce(&q, &k, &v, DENOM_EPS).unwrap(),
        lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap(),
    ] {
        assert!(y.matrix().max_abs_diff(v.matrix()).unwrap() <= 1e-6);
    }

    // query orthogonal to every key
    let q = SequencedMap::from_sequence(Tensor::new(&[3, 1], vec![0.0, 0.0, 2.0]).unwrap()).unwrap();
    let k = SequencedMap::from_sequence(rng.uniform(&[3, 4], 1.0).map(|x| x).with_data({
        let mut d = rng.uniform(&[3, 4], 1.0).into_data();
        d[8..].fill(0.0);
        d
    }))
    .unwrap();
    let v = seq(&mut rng, 2, 4);
    for y in [
        lt_bruteforce(&q, &k, &v, DENOM_EPS).unwrap(),
        lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap(),
    ] {
        for c in 0..2 {
            let mean = (0..4).map(|j| v.matrix().at2(c, j)).sum::<f64>() / 4.0;
            assert!((y.matrix().at2(c, 0) - mean).abs() <= 1e-6);
        }
    }

    let q = seq(&mut rng, 4, 5);
    let k = seq(&mut rng, 4, 5);
    let v = seq(&mut rng, 4, 5);
    let y = lt_bruteforce(&q, &k, &v, DENOM_EPS).unwrap();
    assert!(y.matrix().data().iter().all(|x| x.is_finite()));
}

#[test]
fn lt_factored_matches_bruteforce() {
    let mut rng = Seeded::new(8);
    let q = seq(&mut rng, 4, 5);
    let k = seq(&mut rng, 4, 5);
    let v = seq(&mut rng, 4, 5);
    let brute = lt_bruteforce(&q, &k, &v, DENOM_EPS).unwrap();
    let fast = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
    assert!(brute.matrix().max_abs_diff(fast.matrix()).unwrap() <= 1e-10);
}

#[test]
fn lt_zero_query_and_keys_stay_finite() {
    let q = SequencedMap::from_sequence(Tensor::zeros(&[3, 2])).unwrap();
    let k = SequencedMap::from_sequence(Tensor::zeros(&[3, 4])).unwrap();
    let v = SequencedMap::from_sequence(Tensor::full(&[3, 4], 2.0)).unwrap();
    let y = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
    assert!(y.matrix().data().iter().all(|x| (x - 2.0).abs() < 1e-6));
}

#[test]
fn auxiliary_storage_readout() {
    let mut rng = Seeded::new(9);
    let (c, n) = (8, 4096);
    let q = seq(&mut rng, c, n);
    let k = seq(&mut rng, c, n);
    let v = seq(&mut rng, c, n);
    let mut lt = OpCounter::new();
    lt_attention(&q, &k, &v, DENOM_EPS, &mut lt).unwrap();
    assert!(lt.aux_peak() <= 80);
    assert_eq!(lt.aux_peak(), (c * c + 2 * c) as u64);
    assert_eq!(lt.macs(), (2 * n * c * c + n * c) as u64);

    let mut sa = OpCounter::new();
    sa_exact(&q, &k, &v, &mut sa).unwrap();
    assert_eq!(sa.aux_peak(), 16_777_216);
}

#[test]
fn multi_head_lt_cases() {
    let mut rng = Seeded::new(10);
    let q = seq(&mut rng, 8, 5);
    let k = seq(&mut rng, 8, 6);
    let v = seq(&mut rng, 8, 6);
    let one = multi_head_lt(&q, &k, &v, 1, DENOM_EPS, &mut OpCounter::new()).unwrap();
    let direct = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
    assert_eq!(one, direct);

    // both halves identical: the average equals the half-width result
    let dup = |m: &SequencedMap| {
        let half = m.channel_slice(0, 4);
        let mut d = half.matrix().data().to_vec();
        d.extend_from_slice(half.matrix().data());
        (half.clone(), SequencedMap::from_sequence(Tensor::new(&[8, m.len()], d).unwrap()).unwrap())
    };
    let (qh, qd) = dup(&q);
    let (kh, kd) = dup(&k);
    let two = multi_head_lt(&qd, &kd, &v, 2, DENOM_EPS, &mut OpCounter::new()).unwrap();
    let half = lt_attention(&qh, &kh, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
    assert!(two.matrix().max_abs_diff(half.matrix()).unwrap() <= 1e-15);

    let got = multi_head_lt(&q, &k, &v, 2, DENOM_EPS, &mut OpCounter::new()).unwrap();
    let a = lt_bruteforce(&q.channel_slice(0, 4), &k.channel_slice(0, 4), &v, DENOM_EPS).unwrap();
    let b = lt_bruteforce(&q.channel_slice(4, 4), &k.channel_slice(4, 4), &v, DENOM_EPS).unwrap();
    let want = ops::add(a.matrix(), b.matrix()).unwrap().map(|x| 0.5 * x);
    assert!(got.matrix().max_abs_diff(&want).unwrap() <= 1e-10);

    assert!(multi_head_lt(&q, &k, &v, 3, DENOM_EPS, &mut OpCounter::new()).is_err());
}

#[test]
fn cross_attention_block_cases() {
    let mut rng = Seeded::new(11);
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let proj = ProjectionSet::seeded(&mut rng, 6, 5, 8);
    let query = rng.uniform(&[1, 6, 3, 4], 1.0);

    // a single key: each position returns v scaled by w/(w + eps), w = 1 + q̂ᵀk̂
    let point = rng.uniform(&[1, 5, 1, 1], 1.0);
    let y = cross_attention_block(&query, &point, &proj, &cfg).unwrap();
    assert_eq!(y.dims(), &[1, 8, 3, 4]);
    let v = proj.w_v.apply(&SequencedMap::from_map(&point, 0).unwrap()).unwrap();
    for c in 0..8 {
        let vc = v.matrix().at2(c, 0);
        for h in 0..3 {
            for w in 0..4 {
                assert!((y.at4(0, c, h, w) - vc).abs() <= 1e-4 * vc.abs());
            }
        }
    }

    for (qh, qw, kh, kw) in [(1, 1, 5, 5), (4, 2, 2, 3), (2, 7, 1, 9)] {
        let y = cross_attention_block(
            &rng.uniform(&[2, 6, qh, qw], 1.0),
            &rng.uniform(&[2, 5, kh, kw], 1.0),
            &proj,
            &cfg,
        )
        .unwrap();
        assert_eq!(y.dims(), &[2, 8, qh, qw]);
    }

    let queried = rng.uniform(&[1, 5, 3, 3], 1.0);
    let base = cross_attention_block(&query, &queried, &proj, &cfg).unwrap();
    let perm = rng.permutation(9);
    let shuffled = SequencedMap::from_map(&queried, 0).unwrap().permute_positions(&perm).unwrap().to_map();
    let moved = cross_attention_block(&query, &shuffled, &proj, &cfg).unwrap();
    assert!(base.max_abs_diff(&moved).unwrap() <= 1e-10);

    assert!(cross_attention_block(&query, &rng.uniform(&[1, 4, 3, 3], 1.0), &proj, &cfg).is_err());
    assert!(cross_attention_block(&query, &rng.uniform(&[2, 5, 3, 3], 1.0), &proj, &cfg).is_err());
    assert!(AttentionConfig::new(8, 3).is_err());
}

#[test]
fn counted_block_matches_formula_at_worked_value() {
    let mut rng = Seeded::new(12);
    let x = SequencedMap::from_matrix(rng.uniform(&[8, 16], 1.0), 4, 4).unwrap();
    let proj = ProjectionSet::seeded(&mut rng, 8, 8, 8)
        .with_output(Pointwise::seeded(&mut rng, 8, 8))
        .unwrap();
    let (_, counts) = attention_block_counted(&x, &x, &proj, AttentionKind::Exact).unwrap();
    assert_eq!(counts.total().macs(), 8192);
    assert_eq!(counts.projections.macs(), 4 * 16 * 64);
    assert_eq!(counts.core.aux_peak(), 256);
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = Seeded::new(13);
    let q = seq(&mut rng, 4, 5);
    let k = seq(&mut rng, 4, 6);
    let v = seq(&mut rng, 4, 6);
    let base = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
    // an extra channel with constant key value adds q_extra·c to every logit in a row
    let extend = |m: &SequencedMap, fill: &dyn Fn(usize) -> f64| {
        let mut d = m.matrix().data().to_vec();
        d.extend((0..m.len()).map(fill));
        SequencedMap::from_sequence(Tensor::new(&[5, m.len()], d).unwrap()).unwrap()
    };
    let q_ext = extend(&q, &|i| 0.3 * i as f64 - 0.7);
    let k_ext = extend(&k, &|_| 2.5);
    let shifted = sa_exact(&q_ext, &k_ext, &v, &mut OpCounter::new()).unwrap();
    assert!(base.matrix().max_abs_diff(shifted.matrix()).unwrap() <= 1e-10);
}

fn permute_keys(k: &SequencedMap, v: &SequencedMap, perm: &[usize]) -> (SequencedMap, SequencedMap) {
    (k.permute_positions(perm).unwrap(), v.permute_positions(perm).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn factored_identity(seed in any::<u64>(), c in 2usize..=16, nq in 1usize..=64, nk in 1usize..=64) {
        let mut rng = Seeded::new(seed);
        let q = seq(&mut rng, c, nq);
        let k = seq(&mut rng, c, nk);
        let v = seq(&mut rng, c, nk);
        let brute = lt_bruteforce(&q, &k, &v, DENOM_EPS).unwrap();
        let fast = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
        prop_assert!(brute.matrix().max_abs_diff(fast.matrix()).unwrap() <= 1e-10);
    }

    #[test]
    fn key_permutation_equivariance(seed in any::<u64>(), c in 2usize..8, nq in 1usize..12, nk in 1usize..12) {
        let mut rng = Seeded::new(seed);
        let q = seq(&mut rng, c, nq);
        let k = seq(&mut rng, c, nk);
        let v = seq(&mut rng, c, nk);
        let perm = rng.permutation(nk);
        let (kp, vp) = permute_keys(&k, &v, &perm);
        let a = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
        let b = sa_exact(&q, &kp, &vp, &mut OpCounter::new()).unwrap();
        prop_assert!(a.matrix().max_abs_diff(b.matrix()).unwrap() <= 1e-10);
        let a = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
        let b = lt_attention(&q, &kp, &vp, DENOM_EPS, &mut OpCounter::new()).unwrap();
        prop_assert!(a.matrix().max_abs_diff(b.matrix()).unwrap() <= 1e-10);
    }

    #[test]
    fn outputs_stay_in_value_hull(seed in any::<u64>(), c in 2usize..8, nq in 1usize..10, nk in 1usize..10) {
        let mut rng = Seeded::new(seed);
        let q = SequencedMap::from_sequence(rng.uniform(&[c, nq], 3.0)).unwrap();
        let k = SequencedMap::from_sequence(rng.uniform(&[c, nk], 3.0)).unwrap();
        let v = seq(&mut rng, c, nk);
        let sa = sa_exact(&q, &k, &v, &mut OpCounter::new()).unwrap();
        let lt = lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new()).unwrap();
        let unit = |m: &SequencedMap, j: usize| {
            let col = column(m, j);
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            col.into_iter().map(move |x| x / (n + ops::L2_EPS))
        };
        for i in 0..nq {
            // eps shrinks the lt output toward zero by eps / (Σw + eps)
            let weight_sum: f64 = (0..nk)
                .map(|j| 1.0 + unit(&q, i).zip(unit(&k, j)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            for ch in 0..c {
                let row: Vec<f64> = (0..nk).map(|j| v.matrix().at2(ch, j)).collect();
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let y = sa.matrix().at2(ch, i);
                prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
                let y = lt.matrix().at2(ch, i);
                let slack = 1e-9 + lo.abs().max(hi.abs()) * DENOM_EPS / (weight_sum + DENOM_EPS);
                prop_assert!(y >= lo - slack && y <= hi + slack);
            }
        }
    }
}
