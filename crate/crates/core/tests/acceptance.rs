//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use signbridge::contrastive::{
    contrastive_loss, match_distribution, q_s2t, q_t2s, similarity_matrix, BatchPairing, ContrastiveConfig,
};
use signbridge::describe::{
    refine, run_pipeline, write_records, DescriptionKind, DescriptionRecord, DescriptionSource, KnowledgeBase,
    MockBackend, NonActionFilter, PipelineConfig, SignEntry,
};
use signbridge::instrument;
use signbridge::numerics::ops;
use signbridge::train::{
    ablation_csv, evaluate, fuse_streams, grad_check_config, objective_grad_check, prepare_stream, run_ablation,
    train, ContrastiveTerms, Experiment, TrainConfig, TrainOutcome, ABLATION_ROWS,
};
use signbridge::{Result, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::matrix(rows, dim, data).unwrap()
}

/// Random label-closed batch: every text label belongs to some sample.
fn random_pairing(rng: &mut impl Rng, max_b: usize, max_m: usize, dim: usize) -> Result<BatchPairing> {
    let b = rng.random_range(1..=max_b);
    let classes = rng.random_range(1..=b);
    let skel_labels: Vec<usize> = (0..b).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    let m = rng.random_range(b..=max_m.max(b));
    let mut counts = vec![1usize; b];
    for _ in b..m {
        counts[rng.random_range(0..b)] += 1;
    }
    let text_labels: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(skel_labels[i], c)).collect();
    BatchPairing::new(unit_rows(rng, b, dim), unit_rows(rng, m, dim), skel_labels, text_labels, counts)
}

fn rows_sum_to_one(t: &Tensor) -> bool {
    let (rows, _) = t.dims2().unwrap();
    (0..rows).all(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12)
}

fn gradient_fidelity() -> Result<Verdict> {
    let start = Instant::now();
    let report = objective_grad_check(&grad_check_config(1), 1e-5)?;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "max relative error {:.3e} over {} coordinates in {} tensors, {secs:.1}s (limits 1e-4, 60s)",
            report.max_rel_error,
            report.coordinates,
            report.per_param.len()
        ),
    )
}

fn normalization_suite() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ContrastiveConfig::default();
    let mut failures = 0;
    for _ in 0..1000 {
        let p = random_pairing(&mut rng, 8, 24, 6)?;
        let sim = similarity_matrix(p.skeleton(), p.text())?;
        let s2t = q_s2t(&sim, cfg.temperature)?;
        let t2s = q_t2s(&sim, cfg.temperature)?;
        let p_s2t = match_distribution(p.skeleton_labels(), p.text_labels())?;
        let p_t2s = match_distribution(p.text_labels(), p.skeleton_labels())?;
        let kl_ok = ops::kl_divergence(&p_s2t, &s2t, 1)?.data().iter().all(|&v| v >= 0.0)
            && ops::kl_divergence(&p_t2s, &t2s, 1)?.data().iter().all(|&v| v >= 0.0);
        let sums_ok = [&s2t, &t2s, &p_s2t, &p_t2s].into_iter().all(rows_sum_to_one);
        if !(kl_ok && sums_ok && contrastive_loss(&p, &cfg)?.is_finite()) {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(failures == 0 && secs < 10.0, format!("{failures}/1000 instances failed, {secs:.2}s (limits 1 +/- 1e-12, 10s)"))
}

/// Cross-entropy of the diagonal, written out from scratch.
fn info_nce(skel: &Tensor, text: &Tensor, tau: f64) -> f64 {
    let b = skel.dims2().unwrap().0;
    let dot = |i: usize, j: usize| skel.row(i).iter().zip(text.row(j)).map(|(a, c)| a * c).sum::<f64>() / tau;
    let mut s2t = 0.0;
    let mut t2s = 0.0;
    for i in 0..b {
        let row_max = (0..b).map(|j| dot(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let row_lse = row_max + (0..b).map(|j| (dot(i, j) - row_max).exp()).sum::<f64>().ln();
        s2t += row_lse - dot(i, i);
        let col_max = (0..b).map(|j| dot(j, i)).fold(f64::NEG_INFINITY, f64::max);
        let col_lse = col_max + (0..b).map(|j| (dot(j, i) - col_max).exp()).sum::<f64>().ln();
        t2s += col_lse - dot(i, i);
    }
    0.5 * (s2t + t2s) / b as f64
}

fn single_positive_reduction() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ContrastiveConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..=8);
        let dim = rng.random_range(2..=16);
        let skel = unit_rows(&mut rng, b, dim);
        let text = unit_rows(&mut rng, b, dim);
        let pairing = BatchPairing::one_to_one(skel.clone(), text.clone(), (0..b).map(|i| 10 * i + 3).collect())?;
        worst = worst.max((contrastive_loss(&pairing, &cfg)? - info_nce(&skel, &text, cfg.temperature)).abs());
    }
    verdict(worst <= 1e-9, format!("max |loss - InfoNCE| {worst:.3e} on 100 instances (limit 1e-9)"))
}

fn match_distribution_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let b = rng.random_range(1..=8);
        let classes = rng.random_range(1..=5);
        let rows: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let mut cols: Vec<usize> = rows.clone();
        for _ in 0..rng.random_range(0..12) {
            cols.push(rows[rng.random_range(0..b)]);
        }
        let p = match_distribution(&rows, &cols)?;
        for (i, &y) in rows.iter().enumerate() {
            let mut count = 0u32;
            for &c in &cols {
                if c == y {
                    count += 1;
                }
            }
            for (j, &c) in cols.iter().enumerate() {
                let expected = if c == y { 1.0 / f64::from(count) } else { 0.0 };
                if p.at(i, j) != expected {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(mismatches == 0, format!("{mismatches} entries differ from indicator counting on 1000 cases"))
}

struct DirectionalRuns {
    verdict: Verdict,
    multipart: TrainOutcome,
    cls_only: TrainOutcome,
    multipart_config: TrainConfig,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn multipart_gain() -> Result<DirectionalRuns> {
    let start = Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    let mut kept = None;
    for seed in [1u64, 2, 3] {
        let multi_cfg = TrainConfig {
            seed,
            terms: ContrastiveTerms::ALL,
            ..Default::default()
        };
        let cls_cfg = TrainConfig {
            terms: ContrastiveTerms::NONE,
            ..multi_cfg.clone()
        };
        let exp = Experiment::from_config(&multi_cfg)?;
        let multi = train(&multi_cfg, &exp.data, &exp.texts)?;
        let cls = train(&cls_cfg, &exp.data, &exp.texts)?;
        with.push(multi.evaluation.top1);
        without.push(cls.evaluation.top1);
        if kept.is_none() {
            kept = Some((multi, cls, multi_cfg));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (m, c) = (median(with.clone()), median(without.clone()));
    let (multipart, cls_only, multipart_config) = kept.expect("three seeds ran");
    Ok(DirectionalRuns {
        verdict: Verdict {
            pass: m >= c && secs < 900.0,
            detail: format!(
                "median top-1 multipart {m:.3} vs cls-only {c:.3} (per seed {with:?} vs {without:?}), {:.0}s (limit 15 min)",
                secs
            ),
        },
        multipart,
        cls_only,
        multipart_config,
    })
}

fn ablation_coverage() -> Result<Verdict> {
    let config = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        decay_epochs: vec![2],
        ..Default::default()
    };
    let exp = Experiment::from_config(&config)?;
    let first = run_ablation(&config, &exp.data, &exp.texts)?;
    let second = run_ablation(&config, &exp.data, &exp.texts)?;
    let (a, b) = (ablation_csv(&first)?, ablation_csv(&second)?);
    let names: Vec<&str> = first.iter().map(|r| r.name.as_str()).collect();
    let expected: Vec<&str> = ABLATION_ROWS.iter().map(|(n, _)| *n).collect();
    let finite = first.iter().all(|r| {
        r.metrics
            .epochs
            .iter()
            .all(|e| e.loss_cls.is_finite() && e.loss_con_multi.is_finite() && e.loss_total.is_finite())
    });
    verdict(
        names == expected && finite && a == b,
        format!("rows {names:?}, finite losses {finite}, byte-identical CSV {} ({} bytes)", a == b, a.len()),
    )
}

fn pipeline_fixture() -> Result<Verdict> {
    let kb = KnowledgeBase::reference();
    let backend = MockBackend::new(0);
    let primary = DescriptionRecord::new(0, DescriptionKind::Primary, "Make the sign for 'love'.", DescriptionSource::Mock);
    let refined = refine(&primary, &kb, &backend, &NonActionFilter::default())?;
    let contains = refined.record.text.contains("Gently caress the back of the thumb");
    let corpus: Vec<SignEntry> = ["devoted", "ambience", "agree", "love"]
        .iter()
        .enumerate()
        .map(|(i, g)| SignEntry {
            class_id: i,
            gloss: (*g).to_owned(),
        })
        .collect();
    let run = || -> Result<Vec<u8>> {
        let out = run_pipeline(&corpus, &kb, &MockBackend::new(5), &PipelineConfig::default())?;
        let mut buf = Vec::new();
        write_records(&out.records, &mut buf)?;
        Ok(buf)
    };
    let identical = run()? == run()?;
    verdict(
        contains && identical,
        format!("refined {:?}; rerun byte-identical {identical}", refined.record.text),
    )
}

fn min_eval_time(outcome: &TrainOutcome, test: &[signbridge::SkeletonSequence]) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..15 {
        let start = Instant::now();
        for _ in 0..3 {
            evaluate(&outcome.model, test)?;
        }
        best = best.min(start.elapsed());
    }
    Ok(best)
}

fn inference_parity(runs: &DirectionalRuns) -> Result<Verdict> {
    let exp = Experiment::from_config(&runs.multipart_config)?;
    let test = prepare_stream(&exp.data.test, runs.multipart_config.stream, &exp.data)?;
    instrument::reset();
    evaluate(&runs.multipart.model, &test)?;
    let counters = instrument::snapshot();
    let zero = counters.text_encoder_calls == 0 && counters.part_branch_calls == 0;
    // warm both paths before timing
    evaluate(&runs.cls_only.model, &test)?;
    let (mut multi, mut cls) = (Duration::MAX, Duration::MAX);
    for _ in 0..3 {
        multi = multi.min(min_eval_time(&runs.multipart, &test)?);
        cls = cls.min(min_eval_time(&runs.cls_only, &test)?);
    }
    let ratio = multi.as_secs_f64() / cls.as_secs_f64();
    verdict(
        zero && (ratio - 1.0).abs() <= 0.10,
        format!(
            "eval counters text={} part={}; eval time {:.2}ms vs cls-only {:.2}ms, ratio {ratio:.3} (limit 10%)",
            counters.text_encoder_calls,
            counters.part_branch_calls,
            multi.as_secs_f64() * 1e3,
            cls.as_secs_f64() * 1e3
        ),
    )
}

fn fusion_identity() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0;
    for _ in 0..100 {
        let rows = rng.random_range(1..=20);
        let classes = rng.random_range(2..=12);
        let logits = Tensor::matrix(rows, classes, (0..rows * classes).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())?;
        let scores = ops::softmax(&logits, 1, 1.0)?;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let single = fuse_streams(std::slice::from_ref(&scores), &labels)?;
        let k = rng.random_range(2..=6);
        let fused = fuse_streams(&vec![scores; k], &labels)?;
        if fused != single {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("{failures}/100 cases changed predictions"))
}

fn report(n: usize, name: &str, outcome: Result<Verdict>) -> bool {
    match outcome {
        Ok(v) => {
            println!("criterion {n} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            v.pass
        }
        Err(e) => {
            println!("criterion {n} [FAIL] {name}: error {e}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient fidelity", gradient_fidelity());
    ok &= report(2, "distribution normalization", normalization_suite());
    ok &= report(3, "single-positive reduction", single_positive_reduction());
    ok &= report(4, "match distribution oracle", match_distribution_oracle());
    let runs = multipart_gain();
    ok &= report(
        5,
        "multipart directional gain",
        match &runs {
            Ok(r) => verdict(r.verdict.pass, r.verdict.detail.clone()),
            Err(e) => verdict(false, format!("error {e}")),
        },
    );
    ok &= report(6, "ablation coverage", ablation_coverage());
    ok &= report(7, "description pipeline fixture", pipeline_fixture());
    ok &= report(
        8,
        "inference parity",
        match &runs {
            Ok(r) => inference_parity(r),
            Err(_) => verdict(false, "no trained models"),
        },
    );
    ok &= report(9, "stream fusion identity", fusion_identity());
    if !ok {
        std::process::exit(1);
    }
}
