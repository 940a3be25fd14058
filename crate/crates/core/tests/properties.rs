use eam_core::fixing::{build_plan, fixed_count, select_threshold, Scope};
use eam_core::quant::{calibrate_minmax, fake_quantize, Granularity, QuantGrid};
use eam_core::stats::{
    bin_index, entropy_map, histogram_entropy, histogram_kl, AttentionRecord, HistogramBank,
};
use eam_core::tensor::{matmul, softmax_rows};
use eam_core::Tensor;
use proptest::prelude::*;

fn record(layers: usize, heads: usize, seq: usize, raw: &[f32]) -> AttentionRecord {
    let mut r = AttentionRecord::zeros(layers, heads, seq);
    for (row, src) in r.values.chunks_mut(seq).zip(raw.chunks(seq)) {
        let sum: f32 = src.iter().sum::<f32>().max(1e-6);
        for (d, &s) in row.iter_mut().zip(src) {
            *d = (s / sum).min(1.0);
        }
    }
    r
}

fn bank_from(bits: u32, dims: (usize, usize, usize), images: &[Vec<f32>]) -> HistogramBank {
    let (l, h, s) = dims;
    let mut bank = HistogramBank::new(bits, l, h, s).unwrap();
    for raw in images {
        bank.accumulate(&record(l, h, s, raw)).unwrap();
    }
    bank
}

fn images(n: usize, w: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(0.0f32..1.0, w), 1..n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        data in prop::collection::vec(-50.0f64..50.0, 48),
    ) {
        let cols = data.len() / rows;
        let x = Tensor::new(&[rows, cols], data[..rows * cols].to_vec()).unwrap();
        let y = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-1.0f64..1.0, 64),
        b in prop::collection::vec(-1.0f64..1.0, 64),
        c in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let t = |v: &Vec<f64>| Tensor::new(&[8, 8], v.clone()).unwrap();
        let left = matmul(&matmul(&t(&a), &t(&b)).unwrap(), &t(&c)).unwrap();
        let right = matmul(&t(&a), &matmul(&t(&b), &t(&c)).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) <= 1e-4 * scale);
    }

    #[test]
    fn matmul_is_exact_on_small_integers(
        a in prop::collection::vec(-9i32..10, 16),
        b in prop::collection::vec(-9i32..10, 16),
        c in prop::collection::vec(-9i32..10, 16),
    ) {
        let t = |v: &Vec<i32>| Tensor::new(&[4, 4], v.iter().map(|&x| x as f32).collect()).unwrap();
        let left = matmul(&matmul(&t(&a), &t(&b)).unwrap(), &t(&c)).unwrap();
        let right = matmul(&t(&a), &matmul(&t(&b), &t(&c)).unwrap()).unwrap();
        prop_assert_eq!(left.data(), right.data());
    }

    #[test]
    fn entropy_is_bounded_and_bin_permutation_invariant(
        bits in 1u32..9,
        counts in prop::collection::vec(0u32..20, 256),
        rot in 0usize..256,
    ) {
        let nb = 1usize << bits;
        let mut c = counts[..nb].to_vec();
        c[0] += 1;
        let total: u64 = c.iter().map(|&v| v as u64).sum();
        let h = histogram_entropy(&c, total);
        prop_assert!(h >= 0.0 && h <= bits as f64 + 1e-12);
        let single = c.iter().filter(|&&v| v > 0).count() == 1;
        prop_assert_eq!(h == 0.0, single);
        let mut shuffled = c.clone();
        shuffled.rotate_left(rot % nb);
        shuffled.reverse();
        prop_assert!((histogram_entropy(&shuffled, total) - h).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        p in prop::collection::vec(0u32..10, 16),
        q in prop::collection::vec(0u32..10, 16),
    ) {
        let (mut p, mut q) = (p, q);
        p[0] += 1;
        q[1] += 1;
        let mp = p.iter().map(|&v| v as u64).sum();
        let mq = q.iter().map(|&v| v as u64).sum();
        let d = histogram_kl(&p, mp, &q, mq);
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert_eq!(histogram_kl(&p, mp, &p, mp), 0.0);
    }

    #[test]
    fn bins_stay_in_range(v in 0.0f64..=1.0, bits in 1u32..17) {
        let b = bin_index(v, bits).unwrap();
        prop_assert!(b < 1 << bits);
        prop_assert!(b as f64 <= v * (1u64 << bits) as f64);
    }

    #[test]
    fn fake_quantization_is_idempotent_and_bounded(
        data in prop::collection::vec(-10.0f64..10.0, 2..64),
        bits in 2u32..9,
    ) {
        let x = Tensor::new(&[data.len()], data.clone()).unwrap();
        let qp = calibrate_minmax([&x], bits, Granularity::PerTensor).unwrap();
        let once = fake_quantize(&x, &qp);
        let twice = fake_quantize(&once, &qp);
        prop_assert_eq!(once.data(), twice.data());
        let g = qp.grids[0];
        let qmax = ((1u64 << bits) - 1) as f64;
        let (lo, hi) = (-(g.zero_point as f64) * g.scale, (qmax - g.zero_point as f64) * g.scale);
        for (&a, &b) in data.iter().zip(once.data()) {
            if (lo..=hi).contains(&a) {
                prop_assert!((a - b).abs() <= g.scale / 2.0 + 1e-12);
            } else {
                prop_assert_eq!(b, if a < lo { lo } else { hi });
            }
        }
    }

    #[test]
    fn fake_quantization_is_monotone(
        lo in -5.0f64..0.0,
        width in 0.1f64..10.0,
        xs in prop::collection::vec(0.0f64..1.0, 2..32),
        bits in 2u32..9,
    ) {
        let grid = QuantGrid::from_range(lo, lo + width, bits);
        let mut xs: Vec<f64> = xs.iter().map(|t| lo + t * width).collect();
        xs.sort_by(f64::total_cmp);
        let q: Vec<f64> = xs.iter().map(|&x| grid.apply(x, bits)).collect();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fixed_sets_nest_and_have_exact_size(
        raw in images(12, 2 * 2 * 9),
        tau_a in 0u32..=100,
        tau_b in 0u32..=100,
    ) {
        let bank = bank_from(4, (2, 2, 3), &raw);
        let ent = entropy_map(&bank).unwrap();
        let (ta, tb) = (tau_a.min(tau_b) as f64 / 100.0, tau_a.max(tau_b) as f64 / 100.0);
        let small = build_plan(&ent, &bank, ta, Scope::Global, 32).unwrap();
        let large = build_plan(&ent, &bank, tb, Scope::Global, 32).unwrap();
        prop_assert!(small.is_subset_of(&large));
        let w = bank.num_weights();
        prop_assert_eq!(small.num_fixed(), fixed_count(ta, w));
        prop_assert_eq!(large.num_fixed(), fixed_count(tb, w));
        let eps = select_threshold(&ent, tb, Scope::Global).unwrap()[0];
        for (m, &h) in large.mask().iter().zip(&ent.map.values) {
            if *m {
                prop_assert!(h <= eps);
            } else {
                prop_assert!(h >= eps);
            }
        }
    }

    #[test]
    fn per_head_scope_fixes_each_head_separately(raw in images(8, 2 * 3 * 4), tau in 0u32..=100) {
        let bank = bank_from(3, (2, 3, 2), &raw);
        let ent = entropy_map(&bank).unwrap();
        let t = tau as f64 / 100.0;
        let plan = build_plan(&ent, &bank, t, Scope::PerHead, 32).unwrap();
        prop_assert_eq!(plan.thresholds.len(), 6);
        for (l, h) in (0..2).flat_map(|l| (0..3).map(move |h| (l, h))) {
            let n = plan.head_mask(l, h).iter().filter(|&&m| m).count();
            prop_assert_eq!(n, fixed_count(t, 4));
        }
    }

    #[test]
    fn merge_equals_sequential_accumulation(raw in images(16, 2 * 9), split in 0usize..16) {
        let split = split.min(raw.len());
        let whole = bank_from(8, (1, 2, 3), &raw);
        let a = bank_from(8, (1, 2, 3), &raw[..split]);
        let b = bank_from(8, (1, 2, 3), &raw[split..]);
        prop_assert_eq!(&a.merge(&b).unwrap(), &whole);
        prop_assert_eq!(&b.merge(&a).unwrap(), &whole);
    }
}
