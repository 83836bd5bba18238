use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use signbridge::contrastive::{
    contrastive_loss, match_distribution, q_s2t, q_t2s, similarity_matrix, BatchPairing, ContrastiveConfig,
};
use signbridge::describe::{
    refine, run_pipeline, write_records, DescriptionKind, DescriptionRecord, DescriptionSource, KnowledgeBase,
    MockBackend, NonActionFilter, PipelineConfig, SignEntry,
};
use signbridge::numerics::ops;
use signbridge::skeleton::{EncoderConfig, SkeletonEncoder};
use signbridge::text_encoder::encode_text;
use signbridge::train::{fuse_streams, topk_accuracy};
use signbridge::{SkeletonLayout, SkeletonSequence, Tape, Tensor};

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::matrix(rows, dim, data).unwrap()
}

/// Label-closed batch with `b` samples owning `m >= b` texts in groups.
fn pairing(seed: u64, b: usize, extra: usize, classes: usize, dim: usize) -> BatchPairing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let mut counts = vec![1; b];
    for _ in 0..extra {
        counts[rng.random_range(0..b)] += 1;
    }
    let text_labels: Vec<usize> = counts.iter().zip(&labels).flat_map(|(&c, &l)| std::iter::repeat_n(l, c)).collect();
    let m = text_labels.len();
    BatchPairing::new(unit_rows(&mut rng, b, dim), unit_rows(&mut rng, m, dim), labels, text_labels, counts).unwrap()
}

fn rows_sum_to_one(t: &Tensor) -> bool {
    let (rows, _) = t.dims2().unwrap();
    (0..rows).all(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12)
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let cols = a.dims2().unwrap().1;
    let data: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    Tensor::matrix(data.len() / cols, cols, data).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        values in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
        tau in 0.05f64..2.0,
    ) {
        let x = Tensor::matrix(3, 4, values.clone()).unwrap();
        let shifted = Tensor::matrix(3, 4, values.iter().map(|v| v + shift).collect()).unwrap();
        let a = ops::softmax(&x, 1, tau).unwrap();
        let b = ops::softmax(&shifted, 1, tau).unwrap();
        prop_assert!(rows_sum_to_one(&a));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal(
        p in prop::collection::vec(0.0f64..1.0, 6),
        q in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let total_p: f64 = p.iter().sum::<f64>() + 1e-3;
        let p: Vec<f64> = p.iter().map(|v| (v + 1e-3 / 6.0) / total_p).collect();
        let total_q: f64 = q.iter().sum();
        let q: Vec<f64> = q.iter().map(|v| v / total_q).collect();
        let pt = Tensor::matrix(1, 6, p.clone()).unwrap();
        let qt = Tensor::matrix(1, 6, q).unwrap();
        prop_assert!(ops::kl_divergence(&pt, &qt, 1).unwrap().data()[0] >= 0.0);
        prop_assert!(ops::kl_divergence(&pt, &pt, 1).unwrap().data()[0].abs() <= 1e-12);
    }

    #[test]
    fn matching_rows_sum_to_one(seed in any::<u64>(), b in 1usize..=8, extra in 0usize..16, classes in 1usize..5) {
        let p = pairing(seed, b, extra, classes, 5);
        let sim = similarity_matrix(p.skeleton(), p.text()).unwrap();
        prop_assert!(rows_sum_to_one(&q_s2t(&sim, 0.1).unwrap()));
        prop_assert!(rows_sum_to_one(&q_t2s(&sim, 0.1).unwrap()));
        prop_assert!(rows_sum_to_one(&match_distribution(p.skeleton_labels(), p.text_labels()).unwrap()));
        prop_assert!(rows_sum_to_one(&match_distribution(p.text_labels(), p.skeleton_labels()).unwrap()));
    }

    #[test]
    fn match_distribution_counts_indicators(
        rows in prop::collection::vec(0usize..4, 1..8),
        extra in prop::collection::vec(0usize..4, 0..8),
    ) {
        let mut cols = rows.clone();
        cols.extend(extra);
        let p = match_distribution(&rows, &cols).unwrap();
        for (i, y) in rows.iter().enumerate() {
            let count = cols.iter().filter(|c| *c == y).count() as f64;
            for (j, c) in cols.iter().enumerate() {
                prop_assert_eq!(p.at(i, j), if c == y { 1.0 / count } else { 0.0 });
            }
        }
    }

    #[test]
    fn single_positive_reduces_to_info_nce(seed in any::<u64>(), b in 1usize..=8, dim in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = unit_rows(&mut rng, b, dim);
        let t = unit_rows(&mut rng, b, dim);
        let tau = 0.1;
        let sim = |i: usize, j: usize| s.row(i).iter().zip(t.row(j)).map(|(a, c)| a * c).sum::<f64>() / tau;
        let mut expected = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| sim(i, j).exp()).sum();
            let col: f64 = (0..b).map(|j| sim(j, i).exp()).sum();
            expected += 0.5 * ((row.ln() - sim(i, i)) + (col.ln() - sim(i, i)));
        }
        expected /= b as f64;
        let p = BatchPairing::one_to_one(s, t, (0..b).collect()).unwrap();
        prop_assert!((contrastive_loss(&p, &ContrastiveConfig::default()).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn text_permutation_leaves_loss_unchanged(seed in any::<u64>(), b in 1usize..=6, extra in 0usize..10) {
        let p = pairing(seed, b, extra, 3, 6);
        let m = p.text_labels().len();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let text: Vec<f64> = perm.iter().flat_map(|&k| p.text().row(k).to_vec()).collect();
        let labels: Vec<usize> = perm.iter().map(|&k| p.text_labels()[k]).collect();
        let permuted = BatchPairing::new(
            p.skeleton().clone(),
            Tensor::matrix(m, 6, text).unwrap(),
            p.skeleton_labels().to_vec(),
            labels,
            p.counts().to_vec(),
        )
        .unwrap();
        let cfg = ContrastiveConfig::default();
        prop_assert!((contrastive_loss(&p, &cfg).unwrap() - contrastive_loss(&permuted, &cfg).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn duplicating_the_batch_keeps_the_loss(seed in any::<u64>(), b in 1usize..=6, extra in 0usize..10) {
        let p = pairing(seed, b, extra, 3, 6);
        let twice = |v: &[usize]| v.iter().chain(v).copied().collect::<Vec<_>>();
        let doubled = BatchPairing::new(
            stack_rows(p.skeleton(), p.skeleton()),
            stack_rows(p.text(), p.text()),
            twice(p.skeleton_labels()),
            twice(p.text_labels()),
            twice(p.counts()),
        )
        .unwrap();
        let cfg = ContrastiveConfig::default();
        prop_assert!((contrastive_loss(&p, &cfg).unwrap() - contrastive_loss(&doubled, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn matched_pairs_below_target_are_attracted(seed in any::<u64>(), b in 1usize..=6, extra in 0usize..10) {
        let p = pairing(seed, b, extra, 3, 6);
        let sim = similarity_matrix(p.skeleton(), p.text()).unwrap();
        let target = match_distribution(p.skeleton_labels(), p.text_labels()).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(sim.clone());
        let q = tape.softmax(s, 1, 0.1).unwrap();
        let kl = tape.kl_divergence(target.clone(), q, 1).unwrap();
        let loss = tape.mean(kl).unwrap();
        let grad = tape.backward(loss).unwrap().wrt(s);
        let q = tape.value(q).clone();
        let (rows, cols) = sim.dims2().unwrap();
        for i in 0..rows {
            for j in 0..cols {
                if target.at(i, j) > 0.0 && q.at(i, j) < target.at(i, j) {
                    prop_assert!(grad.at(i, j) <= 0.0);
                }
            }
        }
    }

    #[test]
    fn fusion_of_copies_keeps_predictions(seed in any::<u64>(), rows in 1usize..12, classes in 2usize..8, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::matrix(rows, classes, (0..rows * classes).map(|_| rng.random::<f64>()).collect()).unwrap();
        let scores = ops::softmax(&logits, 1, 1.0).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let one = fuse_streams(std::slice::from_ref(&scores), &labels).unwrap();
        prop_assert_eq!(fuse_streams(&vec![scores; k], &labels).unwrap(), one);
    }

    #[test]
    fn top5_contains_top1(seed in any::<u64>(), rows in 1usize..12, classes in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::matrix(rows, classes, (0..rows * classes).map(|_| rng.random_range(0..3) as f64).collect()).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        prop_assert!(topk_accuracy(&logits, &labels, 5).unwrap() >= topk_accuracy(&logits, &labels, 1).unwrap());
    }

    #[test]
    fn text_features_are_unit_and_order_free(words in prop::collection::vec("[a-z]{1,8}", 1..10), seed in any::<u64>()) {
        let text = words.join(" ");
        let reversed: Vec<&str> = words.iter().rev().map(String::as_str).collect();
        let a = encode_text(&text, 32, seed).unwrap();
        let b = encode_text(&reversed.join(" "), 32, seed).unwrap();
        let norm = a.vector.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!(a.vector.max_abs_diff(&b.vector) < 1e-12);
    }

    #[test]
    fn refinement_is_a_fixpoint_on_plain_text(
        sentences in prop::collection::vec(
            prop::sample::select(vec![
                "Tap the chin twice.",
                "Extend the index finger of the right hand.",
                "Move both hands forward.",
                "Raise the eyebrows.",
                "Round the lips and nod the head.",
            ]),
            1..5,
        ),
    ) {
        let kb = KnowledgeBase::reference();
        let backend = MockBackend::new(0);
        let filter = NonActionFilter::default();
        let text = sentences.join(" ");
        let once = refine(&DescriptionRecord::new(0, DescriptionKind::Primary, text.clone(), DescriptionSource::Mock), &kb, &backend, &filter).unwrap();
        prop_assert_eq!(&once.record.text, &text);
        let twice = refine(&DescriptionRecord::new(0, DescriptionKind::Primary, once.record.text.clone(), DescriptionSource::Mock), &kb, &backend, &filter).unwrap();
        prop_assert_eq!(twice.record.text, once.record.text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pipeline_output_is_byte_identical(
        glosses in prop::collection::btree_set(prop::sample::select(vec!["love", "devoted", "ambience", "agree", "one", "good", "friend", "zebra"]), 1..6),
        seed in any::<u64>(),
    ) {
        let corpus: Vec<SignEntry> = glosses.iter().enumerate().map(|(i, g)| SignEntry { class_id: i, gloss: (*g).to_owned() }).collect();
        let kb = KnowledgeBase::reference();
        let run = || {
            let out = run_pipeline(&corpus, &kb, &MockBackend::new(seed), &PipelineConfig::default()).unwrap();
            for r in out.records.iter().filter(|r| r.kind == DescriptionKind::Part) {
                assert!(!r.parts.is_empty());
            }
            let mut buf = Vec::new();
            write_records(&out.records, &mut buf).unwrap();
            buf
        };
        prop_assert_eq!(run(), run());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoder_is_permutation_consistent(seed in any::<u64>()) {
        let layout = SkeletonLayout::standard();
        let n = layout.joint_count();
        let config = EncoderConfig { in_channels: 3, layers: 2, channels: 6, embed_dim: 8, num_classes: 3 };
        let encoder = SkeletonEncoder::new(config, layout, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = SkeletonSequence::from_fn(n, 3, 1, |c, _, _| if c == 2 { 1.0 } else { rng.random::<f64>() - 0.5 }).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = encoder.encode(&seq).unwrap();
        let b = encoder.permuted(&perm).unwrap().encode(&seq.permuted(&perm).unwrap()).unwrap();
        prop_assert!(a.global.max_abs_diff(&b.global) < 1e-10);
        for (part, v) in &a.parts {
            prop_assert!(v.max_abs_diff(&b.parts[part]) < 1e-10);
            prop_assert!((v.l2_norm() - 1.0).abs() < 1e-9);
        }
        prop_assert!((a.global.l2_norm() - 1.0).abs() < 1e-9);
    }
}
