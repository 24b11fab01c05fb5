use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnn::evalstats::{
    benjamini_hochberg, chi2_sf_1df, compare_models, evaluate, exemplar_csv, mcnemar, timecourse, Evaluation, ProbDump,
    COMPARE_CSV_HEADER, CORRECTNESS_FILE,
};
use rcnn::network::{forward_unrolled, Checkpoint};
use rcnn::scenegen::{InputMode, SceneRecords, RECORD_BYTES};
use rcnn::{Error, ModelSpec, NetworkParams, Preset};

/// P(X > x) for X ~ chi2(1), by composite Simpson integration of the density
/// after substituting u = s^2: P(X <= x) = sqrt(2/pi) * int_0^sqrt(x) exp(-s^2/2) ds.
fn chi2_sf_simpson(x: f64) -> f64 {
    let upper = x.sqrt();
    let n = 4000;
    let h = upper / n as f64;
    let f = |s: f64| (-s * s / 2.0).exp();
    let mut acc = f(0.0) + f(upper);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - (2.0 / std::f64::consts::PI).sqrt() * acc * h / 3.0
}

/// Direct formula with explicit discordant counting.
fn mcnemar_reference(a: &[bool], b: &[bool]) -> (u64, u64, f64, f64) {
    let mut nb = 0;
    let mut nc = 0;
    for i in 0..a.len() {
        if a[i] && !b[i] {
            nb += 1;
        }
        if !a[i] && b[i] {
            nc += 1;
        }
    }
    if nb + nc == 0 {
        return (0, 0, 0.0, 1.0);
    }
    let d = (nb as f64 - nc as f64).abs() - 1.0;
    let chi2 = if d > 0.0 { d * d / (nb + nc) as f64 } else { 0.0 };
    (nb, nc, chi2, chi2_sf_simpson(chi2))
}

/// Every threshold k is tried; the largest passing one fixes the cut value.
fn bh_reference(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cut = None;
    for k in 1..=m {
        if sorted[k - 1] <= k as f64 / m as f64 * q {
            cut = Some(sorted[k - 1]);
        }
    }
    p.iter().map(|&v| cut.is_some_and(|c| v <= c)).collect()
}

#[test]
fn chi2_survival_against_quadrature() {
    for k in 0..20 {
        let x = 0.25 + k as f64 * 2.5;
        let got = chi2_sf_1df(x).unwrap();
        let want = chi2_sf_simpson(x);
        assert!((got - want).abs() < 1e-8, "x={x}: {got} vs {want}");
    }
    assert!((chi2_sf_1df(3.841459).unwrap() - 0.05).abs() < 1e-4);
    let mut prev = 1.0;
    for k in 1..200 {
        let p = chi2_sf_1df(k as f64 * 0.25).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

fn flags(b: usize, c: usize, agree: usize) -> (Vec<bool>, Vec<bool>) {
    let mut x = vec![true; b];
    let mut y = vec![false; b];
    x.extend(vec![false; c]);
    y.extend(vec![true; c]);
    x.extend(vec![true; agree]);
    y.extend(vec![true; agree]);
    (x, y)
}

#[test]
fn mcnemar_worked_examples() {
    let (a, b) = flags(10, 0, 5);
    let r = mcnemar(&a, &b, false).unwrap();
    assert!((r.chi2 - 8.1).abs() < 1e-12);
    assert!((r.p - chi2_sf_simpson(8.1)).abs() < 1e-8);
    assert!((r.p - 0.0044).abs() < 5e-5, "{}", r.p);

    let (a, b) = flags(30, 24, 100);
    let r = mcnemar(&a, &b, false).unwrap();
    assert!((r.chi2 - 25.0 / 54.0).abs() < 1e-12);
    assert!((r.chi2 - 0.4630).abs() < 5e-5);
    assert!((r.p - 0.496).abs() < 5e-4, "{}", r.p);

    let r = mcnemar(&a, &a, false).unwrap();
    assert_eq!((r.b, r.c, r.chi2, r.p), (0, 0, 0.0, 1.0));
}

#[test]
fn exact_mcnemar_matches_binomial_sum() {
    for (b, c) in [(3, 9), (0, 4), (7, 7), (12, 1)] {
        let (x, y) = flags(b, c, 3);
        let r = mcnemar(&x, &y, true).unwrap();
        let n = b + c;
        let k = b.min(c);
        let mut tail = 0.0;
        let mut binom = 1.0;
        for i in 0..=k {
            if i > 0 {
                binom = binom * (n - i + 1) as f64 / i as f64;
            }
            tail += binom;
        }
        let want = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        assert!((r.p - want).abs() < 1e-12, "b={b} c={c}: {} vs {want}", r.p);
    }
}

#[test]
fn bh_worked_example() {
    let r = benjamini_hochberg(&[0.04, 0.01, 0.20, 0.02], 0.05).unwrap();
    assert_eq!(r.reject, vec![false, true, false, true]);
    assert_eq!(r.critical_rank, 2);
    assert_eq!(r.sorted_p, vec![0.01, 0.02, 0.04, 0.20]);
    assert_eq!(r.order, vec![1, 3, 0, 2]);
}

#[test]
fn statistics_fuzz_against_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let n = rng.random_range(0..300);
        let pa = rng.random::<f64>();
        let pb = rng.random::<f64>();
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(pb)).collect();
        let got = mcnemar(&a, &b, false).unwrap();
        let (rb, rc, rchi, rp) = mcnemar_reference(&a, &b);
        assert_eq!((got.b, got.c), (rb, rc), "case {case}");
        assert!((got.chi2 - rchi).abs() < 1e-12, "case {case}");
        assert!((got.p - rp).abs() < 1e-8, "case {case}: {} vs {rp}", got.p);

        let m = rng.random_range(1..40);
        let p: Vec<f64> = (0..m)
            .map(|_| match rng.random_range(0..4) {
                0 => rng.random::<f64>() * 0.01,
                1 => (rng.random_range(0..5) as f64) / 100.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let q = rng.random_range(0.001..0.5);
        assert_eq!(benjamini_hochberg(&p, q).unwrap().reject, bh_reference(&p, q), "case {case}");
    }
}

proptest! {
    #[test]
    fn mcnemar_is_symmetric(a in proptest::collection::vec(any::<bool>(), 0..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = a.iter().map(|&x| if rng.random_bool(0.3) { !x } else { x }).collect();
        let ab = mcnemar(&a, &b, false).unwrap();
        let ba = mcnemar(&b, &a, false).unwrap();
        prop_assert_eq!((ab.b, ab.c), (ba.c, ba.b));
        prop_assert_eq!(ab.chi2.to_bits(), ba.chi2.to_bits());
        prop_assert_eq!(ab.p.to_bits(), ba.p.to_bits());
        prop_assert!(ab.b + ab.c <= a.len() as u64 && ab.chi2 >= 0.0 && (0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn bh_is_monotone_in_q(p in proptest::collection::vec(0.0f64..=1.0, 1..30), q1 in 0.001f64..0.5, dq in 0.0f64..0.4) {
        let lo = benjamini_hochberg(&p, q1).unwrap();
        let hi = benjamini_hochberg(&p, q1 + dq).unwrap();
        for (a, b) in lo.reject.iter().zip(&hi.reject) {
            prop_assert!(!a || *b);
        }
        // rejected set is a prefix of the sorted order
        let flags: Vec<bool> = lo.order.iter().map(|&i| lo.reject[i]).collect();
        prop_assert!(flags.windows(2).all(|w| w[0] || !w[1]));
    }
}

fn random_records(n: usize, classes: u16, seed: u64) -> SceneRecords {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SceneRecords::default();
    let mut rec = vec![0u8; RECORD_BYTES];
    for i in 0..n {
        rng.fill(&mut rec[..]);
        rec[0..2].copy_from_slice(&(i as u16 % classes).to_le_bytes());
        rec[6..10].copy_from_slice(&0.5f32.to_le_bytes());
        out.push_bytes(&rec);
    }
    out
}

/// Fresh parameters with running statistics taken from one training pass.
fn calibrated(spec: &ModelSpec, data: &SceneRecords, seed: u64) -> NetworkParams<f32> {
    let mut params = NetworkParams::<f32>::init(spec, seed).unwrap();
    let rows: Vec<usize> = (0..data.len().min(16)).collect();
    let mode = if spec.input_channels == 2 { InputMode::Stereo } else { InputMode::Mono };
    let trace = forward_unrolled(spec, &params, &data.to_tensor(&rows, mode), true).unwrap();
    params.commit_batch_stats(&trace).unwrap();
    params
}

fn toy(preset: Preset) -> ModelSpec {
    ModelSpec::preset_scaled(preset, 2, 2).with_tau(3)
}

#[test]
fn constant_prediction_accuracy() {
    let spec = toy(Preset::B);
    let data = random_records(50, 10, 1);
    let mut params = calibrated(&spec, &data, 3);
    params.dense.weights.iter_mut().for_each(|w| *w = 0.0);
    params.dense.bias.iter_mut().for_each(|b| *b = 0.0);
    params.dense.bias[3] = 1.0;
    let ev = evaluate(&Checkpoint::new(spec, params), &data, 7, true).unwrap();
    assert_eq!(ev.len(), 50);
    assert_eq!(ev.accuracy(), 0.1);
    let mean = ev.correct.iter().map(|&c| c as u8 as f64).sum::<f64>() / 50.0;
    assert!((mean - ev.accuracy()).abs() < 1e-12);
}

#[test]
fn evaluation_is_batch_independent_and_round_trips() {
    let spec = toy(Preset::BLT);
    let data = random_records(40, 10, 2);
    let ck = Checkpoint::new(spec.clone(), calibrated(&spec, &data, 5));
    let mut a = evaluate(&ck, &data, 40, true).unwrap();
    let b = evaluate(&ck, &data, 6, true).unwrap();
    assert_eq!(a.correct, b.correct);
    assert_eq!(a.dump.as_ref().unwrap().len(), 40);
    let (da, db) = (a.dump.as_ref().unwrap(), b.dump.as_ref().unwrap());
    let diff = da.probs.iter().zip(&db.probs).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-6, "{diff}");

    a.model = "blt".into();
    a.dataset_checksum = "abc".into();
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = Evaluation::load(dir.path(), true).unwrap();
    assert_eq!(back, a);
    let text = std::fs::read_to_string(dir.path().join("eval.txt")).unwrap();
    assert!(text.contains(&format!("accuracy={}", a.accuracy())));

    let mut corr = std::fs::read(dir.path().join(CORRECTNESS_FILE)).unwrap();
    corr[4..8].copy_from_slice(&(if a.correct[0] { 0.0f32 } else { 1.0 }).to_le_bytes());
    std::fs::write(dir.path().join(CORRECTNESS_FILE), corr).unwrap();
    assert!(matches!(Evaluation::load(dir.path(), false), Err(Error::ChecksumMismatch(..))));
}

#[test]
fn missing_dump_is_reported() {
    let spec = toy(Preset::B);
    let data = random_records(10, 10, 3);
    let mut ev = evaluate(&Checkpoint::new(spec.clone(), calibrated(&spec, &data, 1)), &data, 10, false).unwrap();
    ev.model = "b".into();
    let dir = tempfile::tempdir().unwrap();
    ev.save(dir.path()).unwrap();
    assert!(Evaluation::load(dir.path(), false).unwrap().dump.is_none());
    assert!(matches!(Evaluation::load(dir.path(), true), Err(Error::MissingDump(_))));
}

#[test]
fn evaluation_rejects_mismatched_models() {
    let data = random_records(10, 10, 3);
    let spec = ModelSpec::preset_scaled(Preset::B, 2, 3);
    let ck = Checkpoint::new(spec.clone(), NetworkParams::init(&spec, 0).unwrap());
    assert!(evaluate(&ck, &data, 10, false).is_err());
    let spec = toy(Preset::B).with_classes(5);
    let ck = Checkpoint::new(spec.clone(), NetworkParams::init(&spec, 0).unwrap());
    assert!(evaluate(&ck, &data, 10, false).is_err());
}

/// Dump with `tau` steps where each sample's argmax follows `path`.
fn dump_from_paths(paths: &[Vec<u16>], labels: &[u16], classes: usize) -> ProbDump {
    let tau = paths[0].len();
    let mut d = ProbDump::new(tau, classes);
    for (i, (path, &l)) in paths.iter().zip(labels).enumerate() {
        d.ids.push(i as u32);
        d.labels.push(l);
        for &k in path {
            let mut row = vec![0.5 / (classes - 1) as f32; classes];
            row[k as usize] = 0.5;
            row[k as usize] += 0.01;
            d.probs.extend(row);
        }
    }
    d
}

#[test]
fn three_of_ten_corrected() {
    let labels = vec![1u16; 10];
    let mut paths = vec![vec![1, 1, 1, 1]; 5];
    paths.extend([vec![0, 1, 1, 1], vec![2, 2, 1, 1], vec![3, 3, 3, 1]]);
    paths.extend([vec![0, 0, 0, 0], vec![1, 0, 0, 1]]);
    let d = dump_from_paths(&paths, &labels, 4);
    let r = timecourse(&d, 3).unwrap();
    assert_eq!(r.counts.corrected, 3);
    assert_eq!(r.counts.reverted, 0);
    assert_eq!(r.counts.stable_correct, 5);
    assert_eq!(r.counts.stable_wrong, 1);
    assert_eq!(r.counts.other, 1);
    assert_eq!(r.corrected_over_all, 0.3);
    assert_eq!(r.corrected_over_initially_wrong, 0.75);
    assert_eq!(r.reverted_over_all, 0.0);
    assert_eq!(r.initially_correct, 6);
    let csv = exemplar_csv(&r, &d);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample_id,label,t,p0,p1,p2,p3");
    assert_eq!(lines.len(), 1 + 3 * 4);
}

proptest! {
    #[test]
    fn timecourse_matches_naive_loop(seed in any::<u64>(), n in 1usize..60, tau in 1usize..5, classes in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = ProbDump::new(tau, classes);
        for i in 0..n {
            d.ids.push(i as u32);
            d.labels.push(rng.random_range(0..classes) as u16);
            for _ in 0..tau * classes {
                // coarse values so ties occur
                d.probs.push(rng.random_range(0..4) as f32 / 4.0);
            }
        }
        let r = timecourse(&d, 5).unwrap();
        let (mut corrected, mut reverted, mut wrong0) = (0, 0, 0);
        for i in 0..n {
            let row = |t: usize| &d.probs[(i * tau + t) * classes..(i * tau + t + 1) * classes];
            let arg = |t: usize| {
                let mut best = 0;
                for k in 1..classes {
                    if row(t)[k] > row(t)[best] {
                        best = k;
                    }
                }
                best
            };
            let l = d.labels[i] as usize;
            let ok0 = arg(0) == l;
            let okl = arg(tau - 1) == l;
            if !ok0 { wrong0 += 1; }
            if !ok0 && okl { corrected += 1; }
            if ok0 && !okl { reverted += 1; }
        }
        prop_assert_eq!(r.counts.total(), n);
        prop_assert_eq!(r.counts.corrected, corrected);
        prop_assert_eq!(r.counts.reverted, reverted);
        prop_assert_eq!(r.corrected_over_all, corrected as f64 / n as f64);
        let over_wrong = if wrong0 == 0 { 0.0 } else { corrected as f64 / wrong0 as f64 };
        prop_assert_eq!(r.corrected_over_initially_wrong, over_wrong);
        let right0 = n - wrong0;
        let over_right = if right0 == 0 { 0.0 } else { reverted as f64 / right0 as f64 };
        prop_assert_eq!(r.reverted_over_initially_correct, over_right);
        prop_assert!((0.0..=1.0).contains(&r.corrected_over_all) && (0.0..=1.0).contains(&r.reverted_over_all));
    }
}

#[test]
fn feedforward_dump_has_no_transitions() {
    let spec = toy(Preset::B).with_tau(4);
    let data = random_records(30, 10, 9);
    let ev = evaluate(&Checkpoint::new(spec.clone(), calibrated(&spec, &data, 2)), &data, 30, true).unwrap();
    let r = timecourse(ev.dump.as_ref().unwrap(), 4).unwrap();
    assert_eq!((r.corrected_over_all, r.reverted_over_all), (0.0, 0.0));
    assert_eq!(r.counts.other, 0);
    assert_eq!(r.counts.stable_correct + r.counts.stable_wrong, 30);
}

fn fake_eval(name: &str, correct: Vec<bool>, checksum: &str) -> Evaluation {
    Evaluation {
        model: name.into(),
        preset: "B".into(),
        input_mode: InputMode::Stereo,
        dataset_checksum: checksum.into(),
        tau: 4,
        classes: 10,
        ids: (0..correct.len() as u32).collect(),
        correct,
        dump: None,
    }
}

#[test]
fn comparison_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let evals: Vec<Evaluation> = (0..6)
        .map(|m| {
            let acc = 0.5 + 0.08 * m as f64;
            fake_eval(&format!("m{m}"), (0..400).map(|_| rng.random_bool(acc)).collect(), "ds")
        })
        .collect();
    let cmp = compare_models(&evals, 0.05, false).unwrap();
    assert_eq!(cmp.rows.len(), 15);
    let csv = cmp.to_csv();
    assert_eq!(csv.lines().next().unwrap(), COMPARE_CSV_HEADER);
    assert_eq!(csv.lines().count(), 16);
    for (m, e) in cmp.models.iter().zip(&evals) {
        assert_eq!(m.error, 1.0 - e.accuracy());
    }
    let strict = compare_models(&evals, 0.01, false).unwrap();
    for (s, l) in strict.rows.iter().zip(&cmp.rows) {
        assert!(!s.reject || l.reject);
    }
    assert!(cmp.rows.iter().any(|r| r.reject));

    let same = compare_models(&[evals[0].clone(), evals[0].clone()], 0.05, false).unwrap();
    assert_eq!((same.rows[0].test.p, same.rows[0].reject), (1.0, false));

    let other = fake_eval("x", evals[0].correct.clone(), "other");
    assert!(matches!(compare_models(&[evals[0].clone(), other], 0.05, false), Err(Error::ChecksumMismatch(..))));
    assert!(compare_models(&evals[..1], 0.05, false).is_err());
}
