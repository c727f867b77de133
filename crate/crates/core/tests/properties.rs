//! Property tests for the spec-level invariants.

use debias_core::datagen::{seed_stream, Provenance, SplitRanges};
use debias_core::heads::{bias_logits, vw_logits, BiasHeadBank};
use debias_core::metrics::auc;
use debias_core::network::LayeredNet;
use debias_core::tape::Tape;
use debias_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn finite_val() -> impl Strategy<Value = f64> {
    (-3.0..3.0f64).prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    /// forward_from_tap with the unperturbed activation reproduces the full
    /// forward pass at every tap, for random nets and inputs.
    #[test]
    fn tap_forward_consistency(
        seed in any::<u64>(),
        n in 1usize..5,
        dims_pick in 0usize..4,
    ) {
        let hidden: &[usize] = match dims_pick {
            0 => &[3],
            1 => &[4, 2],
            2 => &[5, 4, 3],
            _ => &[2, 2],
        };
        let d = 3;
        let net = LayeredNet::init_mlp(d, hidden, seed).unwrap();
        let mut rng = seed_stream(seed, "tapcheck");
        let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
        for tap in net.tap_names() {
            let mut tape = Tape::new();
            let fwd = net.forward_with_taps(&mut tape, &x).unwrap();
            let qv = tape.value(fwd.taps.get(&tap).unwrap()).clone();
            let q = tape.leaf(qv).unwrap();
            let z2 = net.forward_from_tap(&mut tape, &fwd, &tap, q).unwrap();
            let base = tape.value(fwd.output).clone();
            let redone = tape.value(z2);
            for (a, b) in base.data().iter().zip(redone.data().iter()) {
                prop_assert!((a - b).abs() < 1e-12, "tap {} mismatch: {} vs {}", tap, a, b);
            }
        }
    }

    /// backward(a*f + b*g) equals a*backward(f) + b*backward(g) to 1e-12.
    #[test]
    fn backward_linearity(
        seed in any::<u64>(),
        a in finite_val(),
        b in finite_val(),
        n in 1usize..5,
        k in 1usize..5,
    ) {
        let mut rng = seed_stream(seed, "linearity");
        let x0 = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        let r = tape.relu(x).unwrap();
        let g = tape.mean(r).unwrap();
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let combo = tape.add(fa, gb).unwrap();
        let gc = tape.backward(combo).unwrap();
        let gf = tape.backward(f).unwrap();
        let gg = tape.backward(g).unwrap();
        for i in 0..n * k {
            let lhs = gc.wrt(x).unwrap()[i];
            let rhs = a * gf.wrt(x).unwrap()[i] + b * gg.wrt(x).unwrap()[i];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    /// AUC is invariant under strictly monotone transforms of the scores.
    #[test]
    fn auc_monotone_invariance(
        seed in any::<u64>(),
        n in 4usize..40,
        transform in 0usize..3,
    ) {
        let mut rng = seed_stream(seed, "auc-prop");
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores
            .iter()
            .map(|&s| match transform {
                0 => 3.0 * s + 7.0,
                1 => s.exp(),
                _ => s.atan(),
            })
            .collect();
        let t = auc(&mapped, &labels).unwrap();
        prop_assert!((base - t).abs() < 1e-12);
    }

    /// bias_logits with alpha = 1, delta = 0 equals vw_logits bitwise.
    #[test]
    fn bias_head_composition_identity(
        seed in any::<u64>(),
        n in 1usize..6,
        emb in 1usize..5,
        labels in 1usize..4,
    ) {
        let mut bank = BiasHeadBank::init(emb, labels, 2, 0.0, seed).unwrap();
        bank.deltas = vec![Tensor::zeros(vec![emb + 1, labels]); 2];
        let mut rng = seed_stream(seed, "identity");
        let z = Tensor::new(vec![n, emb], (0..n * emb).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let zi = tape.leaf(z).unwrap();
        let lv = vw_logits(&mut tape, &reg, zi).unwrap();
        let lb = bias_logits(&mut tape, &reg, 1, zi).unwrap();
        prop_assert_eq!(tape.value(lv).data(), tape.value(lb).data());
    }

    /// Dataset write/read round-trips exactly.
    #[test]
    fn dataset_roundtrip(seed in any::<u64>(), n in 3usize..20, d in 1usize..6) {
        let mut rng = seed_stream(seed, "io-prop");
        let ds = debias_core::datagen::DomainDataset {
            domain_id: (seed % 7) as usize,
            name: format!("p{}", seed % 7),
            x: Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap(),
            y: Tensor::new(vec![n, 2], (0..n).flat_map(|_| {
                if rng.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] }
            }).collect()).unwrap(),
            splits: SplitRanges::ratio_7_1_2(n),
            entity_ids: (0..n as u64).collect(),
            provenance: Provenance { generator: "prop".into(), seed, params: serde_json::Value::Null },
        };
        let dir = tempfile::tempdir().unwrap();
        debias_core::datagen::write_dataset(&ds, dir.path()).unwrap();
        let back = debias_core::datagen::read_dataset(dir.path()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
