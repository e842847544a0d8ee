//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bpreg::apps::bpe::{body_part_examined_tag, BodyPartBoundaries};
use bpreg::apps::known_region::{crop_mask, estimate_known_region, slice_scores_for_cropping};
use bpreg::apps::metadata::{metadata_from_scores, MetadataConfig, METADATA_KEYS};
use bpreg::apps::sanity::{data_sanity_check, SanityReport, DEFAULT_THETA};
use bpreg::cli::{cmd_predict, PredictArgs, CHARACTERISTICS_FILE, EXIT_OK, MODEL_FILE};
use bpreg::eval::{
    accuracy_5class, landmark_scores_from_curves, lmse, predict_landmark_scores, z_test_compare, LandmarkScores,
    LmseAggregation, ReferenceEntry, ReferenceTable, VolumeScores,
};
use bpreg::landmarks::{Annotations, EVALUATION_LANDMARKS, EYES_END, PELVIS_START};
use bpreg::loss::{classification_order_loss, distance_loss, heuristic_order_loss, LossValue, ScoreBatch};
use bpreg::model::{ModelConfig, SliceScoreModel};
use bpreg::par::Exec;
use bpreg::phantom::{
    annotations_of, generate_phantom_dataset, generate_phantom_volume, landmark_latents, random_spec, DatasetConfig,
    PhantomVolume, Split,
};
use bpreg::postprocess::{characteristics_from_curves, cleaned_slice_scores, CleanedScoreCurve, ModelCharacteristics};
use bpreg::stats::{median, spearman};
use bpreg::train::{derive_schedule, train, EpochRecord, ScheduleMode, TrainConfig, TrainOptions};
use bpreg::volume::{preprocess_volume, save_raw_json, PreprocessedVolume};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- losses

/// Worst per-component relative error (denominator floored at 1e-3 of the
/// largest gradient entry) and the norm-wise relative error.
fn fd_check(f: &dyn Fn(&ScoreBatch) -> LossValue, batch: &ScoreBatch) -> (f64, f64) {
    let an = f(batch).grad;
    let gmax = an.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let (mut worst, mut diff2, mut norm2) = (0.0f64, 0.0, 0.0);
    for k in 0..batch.scores.len() {
        let h = 1e-5 * batch.scores[k].abs().max(1.0);
        let mut p = batch.clone();
        p.scores[k] += h;
        let mut q = batch.clone();
        q.scores[k] -= h;
        let num = (f(&p).value - f(&q).value) / (2.0 * h);
        let err = (num - an[k]).abs() / an[k].abs().max(1e-3 * gmax).max(f64::MIN_POSITIVE);
        worst = worst.max(err);
        diff2 += (num - an[k]).powi(2);
        norm2 += an[k] * an[k];
    }
    (worst, (diff2 / norm2).sqrt())
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [(0.0f64, 0.0f64); 3];
    for _ in 0..100 {
        let b = 64;
        let m = rng.gen_range(3..=6);
        let scores: Vec<f64> = (0..b * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let dh: Vec<f64> = (0..b).map(|_| rng.gen_range(5.0..100.0)).collect();
        let batch = ScoreBatch::new(scores, m, dh).unwrap();
        let beta = rng.gen_range(0.001..0.05);
        let losses: [&dyn Fn(&ScoreBatch) -> LossValue; 3] = [
            &move |x| heuristic_order_loss(x, beta),
            &|x| classification_order_loss(x),
            &|x| distance_loss(x).unwrap(),
        ];
        for (w, f) in worst.iter_mut().zip(losses) {
            let (c, n) = fd_check(f, &batch);
            *w = (w.0.max(c), w.1.max(n));
        }
    }
    let beta = 0.01;
    let dh = 37.0;
    let s = [0.0, beta * dh, 2.0 * beta * dh];
    let zero = heuristic_order_loss(&ScoreBatch::new(s.to_vec(), 3, vec![dh]).unwrap(), beta).value;
    // second derivative of the single-term loss at Δs = βΔh with βΔh → 0
    let tiny_dh = 1e-6;
    let l = |d: f64| heuristic_order_loss(&ScoreBatch::new(vec![0.0, d], 2, vec![tiny_dh]).unwrap(), beta).value;
    let x0 = beta * tiny_dh;
    let h = 1e-3;
    let curv = (l(x0 + h) - 2.0 * l(x0) + l(x0 - h)) / (h * h);
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst.iter().all(|&(c, n)| c < 1e-5 && n < 1e-5) && zero == 0.0 && (curv - 0.125).abs() < 1e-4 && secs < 10.0,
        format!(
            "max rel grad error (component/norm) heuristic {:.1e}/{:.1e} classification {:.1e}/{:.1e} distance {:.1e}/{:.1e}; loss at βΔh {zero}; curvature {curv:.7}; {secs:.2}s",
            worst[0].0, worst[0].1, worst[1].0, worst[1].1, worst[2].0, worst[2].1
        ),
    )
}

fn criterion_2() -> Outcome {
    let batch = ScoreBatch::new(vec![0.0, -800.0, -1600.0, 5.0], 2, vec![10.0, 10.0]).unwrap();
    let l = classification_order_loss(&batch);
    let single = classification_order_loss(&ScoreBatch::new(vec![800.0, 0.0], 2, vec![10.0]).unwrap());
    check(
        l.value.is_finite() && l.grad.iter().all(|g| g.is_finite()) && single.value.is_finite(),
        format!("loss {} grads finite {}; all-excluded batch warns {}", l.value, l.grad.iter().all(|g| g.is_finite()), single.empty_warning),
    )
}

// ---------------------------------------------------------------- trained model

struct Trained {
    model: SliceScoreModel,
    history: Vec<EpochRecord>,
    train_vols: Vec<PreprocessedVolume>,
    test: Vec<PhantomVolume>,
    test_vols: Vec<PreprocessedVolume>,
    ann: Annotations,
    chars: ModelCharacteristics,
    train_curves: Vec<(Vec<f64>, f64)>,
    seconds: f64,
}

fn prep(vs: &[PhantomVolume]) -> Vec<PreprocessedVolume> {
    Exec::default().map(vs, |p| preprocess_volume(&p.volume, &p.id))
}

fn train_desk_model() -> Trained {
    let t0 = Instant::now();
    let ds = generate_phantom_dataset(200, 10, 20, &DatasetConfig::default(), 0).unwrap();
    let (train_vols, val_vols, test_vols) = (prep(&ds.train), prep(&ds.val), prep(&ds.test));
    let mut ann = annotations_of(&ds.train);
    ann.extend(&annotations_of(&ds.val));
    ann.extend(&annotations_of(&ds.test));
    let cfg = TrainConfig {
        m: 4,
        beta: 0.01,
        alpha: 0.0,
        model: ModelConfig::tiny(),
        learning_rate: 1e-3,
        slices_per_batch: 32,
        total_slices_per_volume: 120,
        ..Default::default()
    };
    let out = train(&train_vols, &val_vols, &ann, &cfg, &TrainOptions::default()).expect("training");
    let exec = Exec::default();
    let train_curves: Vec<(Vec<f64>, f64)> =
        train_vols.iter().map(|v| (out.best.predict_scores(v, 64, exec), v.z_spacing)).collect();
    let pool: Vec<PreprocessedVolume> = train_vols.iter().chain(&val_vols).cloned().collect();
    let table = ReferenceTable::build(&predict_landmark_scores(&out.best, &pool, &ann, exec).unwrap()).unwrap();
    let chars = characteristics_from_curves(out.best.empty_slice_score(), table, &train_curves).unwrap();
    Trained {
        model: out.best,
        history: out.history,
        train_vols,
        test: ds.test,
        test_vols,
        ann,
        chars,
        train_curves,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn criterion_3(t: &Trained) -> Outcome {
    let exec = Exec::default();
    let (mut ok, mut total) = (0usize, 0usize);
    let mut rhos = Vec::new();
    for v in &t.test_vols {
        let s = t.model.predict_scores(v, 64, exec);
        let idx: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
        rhos.push(spearman(&idx, &s));
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                if (j - i) as f64 * v.z_spacing >= 5.0 {
                    total += 1;
                    ok += usize::from(s[j] > s[i]);
                }
            }
        }
    }
    let monotony = ok as f64 / total as f64;
    let first = t.history[0].val_lmse.unwrap_or(f64::NAN);
    let best = t.history.iter().filter_map(|r| r.val_lmse).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / first;
    let rho = median(&rhos);
    check(
        t.history.len() >= 30 && monotony >= 0.95 && drop >= 0.5 && rho > 0.99 && t.seconds <= 1200.0,
        format!(
            "{} epochs; monotony {monotony:.5}; val LMSE {first:.3} -> {best:.3} ({:.1}% lower); median Spearman {rho:.5}; {:.0}s",
            t.history.len(),
            100.0 * drop,
            t.seconds
        ),
    )
}

// ---------------------------------------------------------------- metric oracles

fn naive_table(lm: &LandmarkScores) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in lm.values() {
        for (l, s) in row {
            let e = sums.entry(l.clone()).or_insert((0.0, 0));
            e.0 += s;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
}

fn naive_lmse(lm: &LandmarkScores) -> f64 {
    let means = naive_table(lm);
    let d = (means[EYES_END] - means[PELVIS_START]) / 100.0;
    let mut per_volume = Vec::new();
    for row in lm.values() {
        let mut acc = 0.0;
        let mut n = 0;
        for l in EVALUATION_LANDMARKS {
            if let Some(s) = row.get(l) {
                acc += ((means[l] - s) / d).powi(2);
                n += 1;
            }
        }
        if n > 0 {
            per_volume.push(acc / n as f64);
        }
    }
    per_volume.iter().sum::<f64>() / per_volume.len() as f64
}

const NAIVE_BOUNDS: [&str; 6] = [PELVIS_START, "L5", "Th11", "Th2", "C1", EYES_END];

fn naive_accuracy(scores: &VolumeScores, ann: &Annotations, means: &BTreeMap<String, f64>) -> Option<f64> {
    let mut accs = Vec::new();
    for (vid, s) in scores {
        let lms = ann.get(vid).unwrap();
        let (mut hit, mut total) = (0, 0);
        for (i, &score) in s.iter().enumerate() {
            let mut truth = None;
            for c in 0..5 {
                if let (Some(&a), Some(&b)) = (lms.get(NAIVE_BOUNDS[c]), lms.get(NAIVE_BOUNDS[c + 1])) {
                    if a <= i && i < b {
                        truth = Some(c);
                    }
                }
            }
            let Some(truth) = truth else { continue };
            total += 1;
            let mut pred = None;
            for c in 0..5 {
                if let (Some(lo), Some(hi)) = (means.get(NAIVE_BOUNDS[c]), means.get(NAIVE_BOUNDS[c + 1])) {
                    if *lo <= score && score < *hi {
                        pred = Some(c);
                        break;
                    }
                }
            }
            if pred == Some(truth) {
                hit += 1;
            }
        }
        if total > 0 {
            accs.push(hit as f64 / total as f64);
        }
    }
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (VolumeScores, Annotations) {
    let mut scores = VolumeScores::new();
    let mut ann = Annotations::new();
    for v in 0..rng.gen_range(2..5) {
        let n = rng.gen_range(13..30);
        let mut s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for x in s.iter_mut() {
            acc += 1.0 + *x;
            *x = acc;
        }
        let mut lms = BTreeMap::new();
        let start = rng.gen_range(0..n - 12);
        let mut idx = start;
        for (k, l) in EVALUATION_LANDMARKS.iter().enumerate() {
            let anchor = k == 0 || k == EVALUATION_LANDMARKS.len() - 1;
            if (anchor && v == 0) || rng.gen_bool(0.7) {
                lms.insert(l.to_string(), idx.min(n - 1));
            }
            idx += 1;
        }
        scores.insert(format!("v{v}"), s);
        ann.insert(format!("v{v}"), lms);
    }
    (scores, ann)
}

fn naive_tag(scores: &[f64], z_range: f64, valid: bool, means: &BTreeMap<String, f64>) -> String {
    if !valid || scores.is_empty() {
        return "NONE".into();
    }
    let names = ["PELVIS", "ABDOMEN", "CHEST", "NECK", "HEAD"];
    if z_range < 100.0 {
        let mut counts = [0; 5];
        for &s in scores {
            for c in 0..5 {
                let hi = if c == 4 { f64::INFINITY } else { means[NAIVE_BOUNDS[c + 1]] };
                if means[NAIVE_BOUNDS[c]] <= s && s < hi {
                    counts[c] += 1;
                }
            }
        }
        let mut best = 0;
        for c in 1..5 {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        return if counts[best] == 0 { "NONE".into() } else { names[best].into() };
    }
    let rules: [(&[&str], usize); 5] = [
        (&[PELVIS_START, "femur-end", "pelvis-end"], 2),
        (&["L5", "L3", "L1"], 2),
        (&["Th12", "Th8", "Th5", "Th1"], 3),
        (&["C6", "C4", "C2"], 2),
        (&["C1", EYES_END], 2),
    ];
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut tags = Vec::new();
    for c in (0..5).rev() {
        let (lms, min) = rules[c];
        let seen = lms.iter().filter(|l| lo < means[**l] && means[**l] < hi).count();
        if seen >= min {
            tags.push(names[c]);
        }
    }
    if tags.is_empty() {
        "NONE".into()
    } else {
        tags.join("-")
    }
}

fn phantom_table() -> ReferenceTable {
    ReferenceTable {
        entries: landmark_latents()
            .into_iter()
            .map(|(n, u)| (n.to_string(), ReferenceEntry { mean: u, std: 1.0, count: 1 }))
            .collect(),
    }
}

fn curve(scores: Vec<f64>) -> CleanedScoreCurve {
    let n = scores.len();
    CleanedScoreCurve {
        z: (0..n).map(|i| i as f64).collect(),
        indices: (0..n).collect(),
        unprocessed: scores.clone(),
        scores,
        empty_slices: vec![],
        removed_tails: vec![],
        num_slices: n,
        z_spacing: 1.0,
    }
}

fn sanity(valid: bool) -> SanityReport {
    SanityReport {
        reverse_z_ordering: false,
        valid_z_spacing: valid,
        observed_slope: 1.0,
        expected_slope: 1.0,
        slope_ratio: 1.0,
        relative_error: 0.0,
        expected_z_spacing: 1.0,
        theta: DEFAULT_THETA,
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut metric_cases = 0;
    let mut worst_lmse: f64 = 0.0;
    let mut worst_acc: f64 = 0.0;
    while metric_cases < 10_000 {
        let (scores, ann) = random_fixture(&mut rng);
        let lm = landmark_scores_from_curves(&scores, &ann).unwrap();
        let Ok(table) = ReferenceTable::build(&lm) else { continue };
        let got = lmse(&lm, &table, LmseAggregation::VolumeFirst).unwrap().mean;
        worst_lmse = worst_lmse.max((got - naive_lmse(&lm)).abs());
        let means = naive_table(&lm);
        let naive_acc = naive_accuracy(&scores, &ann, &means);
        let acc = accuracy_5class(&scores, &ann, &table).ok().map(|a| a.mean);
        match (acc, naive_acc) {
            (Some(a), Some(b)) => worst_acc = worst_acc.max((a - b).abs()),
            (None, None) => {}
            _ => worst_acc = f64::INFINITY,
        }
        metric_cases += 1;
    }
    let table = phantom_table();
    let means: BTreeMap<String, f64> = table.transformed().entries.into_iter().map(|(k, e)| (k, e.mean)).collect();
    let bounds = BodyPartBoundaries::default();
    let mut tag_cases = 0;
    let mut mismatches = 0;
    let mut distinct = std::collections::BTreeSet::new();
    for a in 0..100 {
        for b in 0..100 {
            let lo = -20.0 + 1.5 * a as f64 + 0.01;
            let hi = -20.0 + 1.5 * b as f64 + 0.02;
            let scores: Vec<f64> = (0..7).map(|k| lo + (hi - lo) * k as f64 / 6.0).collect();
            for (z_range, valid) in [(300.0, true), (60.0, true), (300.0, false)] {
                let got = body_part_examined_tag(&curve(scores.clone()), z_range, &sanity(valid), &table, &bounds);
                let want = naive_tag(&scores, z_range, valid, &means);
                mismatches += usize::from(got != want);
                distinct.insert(got);
                tag_cases += 1;
            }
        }
    }
    check(
        worst_lmse <= 1e-9 && worst_acc <= 1e-9 && mismatches == 0,
        format!(
            "{metric_cases} metric fixtures: max |ΔLMSE| {worst_lmse:.1e}, max |Δaccuracy| {worst_acc:.1e}; {tag_cases} tag cases, {mismatches} mismatches, {} distinct tags",
            distinct.len()
        ),
    )
}

// ---------------------------------------------------------------- closed-form arithmetic

fn criterion_5() -> Outcome {
    let z = z_test_compare(3.3, 0.4, 2.65, 0.28).unwrap();
    let rows = [(4usize, 64usize, 480usize), (8, 32, 240), (12, 21, 160)];
    let mut got = Vec::new();
    let mut ok = (z.t - 1.3).abs() <= 0.05 && !z.significant;
    for (m, b, e) in rows {
        let cfg = TrainConfig {
            m,
            slices_per_batch: 256,
            total_slices_per_volume: 1920,
            schedule_mode: ScheduleMode::Floor,
            ..Default::default()
        };
        let s = derive_schedule(&cfg).unwrap();
        ok &= s.batch_size.abs_diff(b) <= 1 && s.epochs.abs_diff(e) <= 1;
        got.push(format!("({m},{},{})", s.batch_size, s.epochs));
    }
    check(ok, format!("t = {:.4}, significant {}; schedules {}", z.t, z.significant, got.join(" ")))
}

// ---------------------------------------------------------------- scale invariance

fn tags_for(t: &Trained, affine: impl Fn(f64) -> f64) -> Result<Vec<String>, String> {
    let curves: Vec<(Vec<f64>, f64)> =
        t.train_curves.iter().map(|(s, z)| (s.iter().map(|&x| affine(x)).collect(), *z)).collect();
    let pool = landmark_scores_from_curves(
        &t.train_vols
            .iter()
            .zip(&t.train_curves)
            .map(|(v, (s, _))| (v.source_id.clone(), s.iter().map(|&x| affine(x)).collect()))
            .collect(),
        &t.ann,
    )
    .map_err(|e| e.to_string())?;
    let table = ReferenceTable::build(&pool).map_err(|e| e.to_string())?;
    let chars = characteristics_from_curves(affine(t.chars.s0), table, &curves).map_err(|e| e.to_string())?;
    t.test_vols
        .iter()
        .map(|v| {
            let raw: Vec<f64> = t.model.predict_scores(v, 64, Exec::default()).into_iter().map(&affine).collect();
            metadata_from_scores(&raw, v.z_spacing, &chars, &MetadataConfig::default(), "")
                .map(|o| o.record.body_part_examined_tag)
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn criterion_6(t: &Trained) -> Outcome {
    let exec = Exec::default();
    let scores: VolumeScores =
        t.test_vols.iter().map(|v| (v.source_id.clone(), t.model.predict_scores(v, 64, exec))).collect();
    let shifted: VolumeScores =
        scores.iter().map(|(k, s)| (k.clone(), s.iter().map(|x| 2.0 * x + 3.0).collect())).collect();
    let metrics = |s: &VolumeScores| {
        let lm = landmark_scores_from_curves(s, &t.ann).unwrap();
        let table = ReferenceTable::build(&lm).unwrap();
        let l = lmse(&lm, &table, LmseAggregation::VolumeFirst).unwrap().mean;
        let a = accuracy_5class(s, &t.ann, &table).unwrap().mean;
        (l, a)
    };
    let (l1, a1) = metrics(&scores);
    let (l2, a2) = metrics(&shifted);
    let tags1 = tags_for(t, |x| x)?;
    let tags2 = tags_for(t, |x| 2.0 * x + 3.0)?;
    check(
        (l1 - l2).abs() <= 1e-9 && (a1 - a2).abs() <= 1e-12 && tags1 == tags2,
        format!(
            "LMSE {l1:.6} vs {l2:.6} (Δ {:.1e}); accuracy {a1:.6} vs {a2:.6}; {} of {} tags equal",
            (l1 - l2).abs(),
            tags1.iter().zip(&tags2).filter(|(a, b)| a == b).count(),
            tags1.len()
        ),
    )
}

// ---------------------------------------------------------------- sanity check

/// Evaluation phantoms for the sanity check, with body heights within ±5 %.
fn sanity_phantoms(n: usize) -> Vec<PhantomVolume> {
    let cfg = DatasetConfig {
        scale_jitter: 0.05,
        ..Default::default()
    };
    (0..n)
        .map(|i| {
            let seed = 0xacce_0000 + i as u64;
            let spec = random_spec(&cfg, Split::Test, seed);
            let (volume, landmarks) = generate_phantom_volume(&spec).unwrap();
            PhantomVolume {
                id: format!("sanity_{i:03}"),
                spec,
                volume,
                landmarks,
            }
        })
        .collect()
}

fn sanity_of(t: &Trained, v: &PreprocessedVolume, z_spacing: f64) -> SanityReport {
    let raw = t.model.predict_scores(v, 64, Exec::default());
    let curve = cleaned_slice_scores(&raw, z_spacing, &t.chars).unwrap();
    data_sanity_check(&curve, &t.chars, DEFAULT_THETA).unwrap()
}

fn criterion_7(t: &Trained) -> Outcome {
    let phantoms = sanity_phantoms(50);
    let jobs: Vec<(PreprocessedVolume, PreprocessedVolume)> = Exec::default().map(&phantoms, |p| {
        (preprocess_volume(&p.volume, &p.id), preprocess_volume(&p.volume.reversed_z(), &p.id))
    });
    let (mut reversed, mut inflated, mut false_pos) = (0, 0, 0);
    let mut gammas = Vec::new();
    for (v, r) in &jobs {
        reversed += usize::from(sanity_of(t, r, r.z_spacing).reverse_z_ordering);
        let up = sanity_of(t, v, v.z_spacing * 1.5);
        inflated += usize::from(!up.valid_z_spacing);
        gammas.push(up.relative_error);
        false_pos += usize::from(!sanity_of(t, v, v.z_spacing).valid_z_spacing);
    }
    let n = jobs.len() as f64;
    let (rev, inf, fp) = (reversed as f64 / n, inflated as f64 / n, false_pos as f64 / n);
    check(
        rev == 1.0 && inf >= 0.9 && fp <= 0.05,
        format!(
            "reverse detection {:.0}%; γ=0.5 flagged {:.0}% (median γ̂ {:.3}); γ=0 false positives {:.0}%",
            100.0 * rev,
            100.0 * inf,
            median(&gammas),
            100.0 * fp
        ),
    )
}

// ---------------------------------------------------------------- known region

/// Training set of a downstream algorithm that only ever saw the abdomen analog.
fn downstream_phantoms(n: usize) -> Vec<PhantomVolume> {
    let cfg = DatasetConfig::default();
    (0..n)
        .map(|i| {
            let seed = 0xd0e5_0000 + i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut spec = random_spec(&cfg, Split::Train, seed);
            spec.u_start = rng.gen_range(25.0..=35.0);
            spec.u_end = rng.gen_range(65.0..=75.0);
            let (volume, landmarks) = generate_phantom_volume(&spec).unwrap();
            PhantomVolume {
                id: format!("downstream_{i:03}"),
                spec,
                volume,
                landmarks,
            }
        })
        .collect()
}

fn criterion_8(t: &Trained) -> Outcome {
    let cleaned: Vec<CleanedScoreCurve> = downstream_phantoms(40)
        .iter()
        .filter_map(|p| {
            let v = preprocess_volume(&p.volume, &p.id);
            let raw = t.model.predict_scores(&v, 64, Exec::default());
            cleaned_slice_scores(&raw, v.z_spacing, &t.chars).ok()
        })
        .collect();
    let region = estimate_known_region(&cleaned, 0.25, 0.75).map_err(|e| e.to_string())?;
    let margin = 10.0;
    let (mut outside, mut intercepted, mut inside, mut truncated, mut volumes) = (0, 0, 0, 0, 0);
    for (p, v) in t.test.iter().zip(&t.test_vols) {
        let raw = t.model.predict_scores(v, 64, Exec::default());
        let curve = cleaned_slice_scores(&raw, v.z_spacing, &t.chars).map_err(|e| e.to_string())?;
        let scores = slice_scores_for_cropping(&curve);
        // plant one positive voxel per slice whose true position is clearly outside or inside
        let mut mask: Vec<Vec<u8>> = vec![vec![0; 4]; v.len()];
        let mut planted = Vec::new();
        for (i, slice) in mask.iter_mut().enumerate() {
            let u = p.spec.latent_at(i);
            if u < region.s_min - margin || u > region.s_max + margin {
                slice[1] = 1;
                planted.push((i, false));
            } else if u > region.s_min + margin && u < region.s_max - margin {
                slice[2] = 1;
                planted.push((i, true));
            }
        }
        let Ok(_report) = crop_mask(&mut mask, &scores, &region) else { continue };
        volumes += 1;
        for (i, is_inside) in planted {
            if is_inside {
                inside += 1;
                truncated += usize::from(mask[i][2] == 0);
            } else {
                outside += 1;
                intercepted += usize::from(mask[i][1] == 0);
            }
        }
    }
    check(
        outside > 0 && inside > 0 && intercepted == outside && truncated == 0,
        format!(
            "region [{:.1}, {:.1}] over {volumes} volumes; outside positives intercepted {intercepted}/{outside}; inside positives truncated {truncated}/{inside}",
            region.s_min, region.s_max
        ),
    )
}

// ---------------------------------------------------------------- CLI

fn criterion_9(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model_dir = dir.path().join("model");
    std::fs::create_dir_all(&model_dir).unwrap();
    t.model.save(&model_dir.join(MODEL_FILE)).map_err(|e| e.to_string())?;
    t.chars.save(&model_dir.join(CHARACTERISTICS_FILE)).map_err(|e| e.to_string())?;
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    for p in t.test.iter().take(6) {
        save_raw_json(&p.volume, &input.join(format!("{}.json", p.id))).unwrap();
    }
    let run = |out: &Path| {
        cmd_predict(&PredictArgs {
            input: input.clone(),
            output: out.to_path_buf(),
            model: Some(model_dir.clone()),
            plot: false,
            theta: None,
            boundaries: None,
            recursive: false,
            jobs: None,
        })
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let codes = (run(&a), run(&b));
    let mut records = 0;
    let mut complete = true;
    let mut identical = true;
    for p in t.test.iter().take(6) {
        let name = format!("{}.json", p.id);
        let (x, y) = (std::fs::read(a.join(&name)).unwrap_or_default(), std::fs::read(b.join(&name)).unwrap_or_default());
        identical &= !x.is_empty() && x == y;
        let v: serde_json::Value = serde_json::from_slice(&x).unwrap_or_default();
        let keys: Vec<&str> = v.as_object().map(|o| o.keys().map(|k| k.as_str()).collect()).unwrap_or_default();
        complete &= keys.len() == 14 && METADATA_KEYS.iter().all(|k| keys.contains(k));
        records += 1;
    }
    check(
        codes == (EXIT_OK, EXIT_OK) && complete && identical,
        format!("exit codes {codes:?}; {records} records with all 14 keys {complete}; byte-identical {identical}"),
    )
}

// ---------------------------------------------------------------- driver

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match &res {
        Ok(m) => println!("criterion {n} [{name}]: PASS ({secs:.1}s) {m}"),
        Err(m) => println!("criterion {n} [{name}]: FAIL ({secs:.1}s) {m}"),
    }
    res.is_ok()
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut ok = true;
    if wanted(1) {
        ok &= run(1, "loss correctness", criterion_1);
    }
    if wanted(2) {
        ok &= run(2, "classification stability", criterion_2);
    }
    if wanted(4) {
        ok &= run(4, "metric oracles", criterion_4);
    }
    if wanted(5) {
        ok &= run(5, "closed-form arithmetic", criterion_5);
    }
    if [3, 6, 7, 8, 9].into_iter().any(wanted) {
        let trained = catch_unwind(train_desk_model);
        match &trained {
            Ok(t) => {
                let checks: [(usize, &str, fn(&Trained) -> Outcome); 5] = [
                    (3, "desk-scale learning", criterion_3),
                    (6, "scale invariance", criterion_6),
                    (7, "sanity checks", criterion_7),
                    (8, "known-region cropping", criterion_8),
                    (9, "CLI end-to-end", criterion_9),
                ];
                for (n, name, f) in checks {
                    if wanted(n) {
                        ok &= run(n, name, || f(t));
                    }
                }
            }
            Err(_) => {
                for n in [3, 6, 7, 8, 9].into_iter().filter(|&n| wanted(n)) {
                    println!("criterion {n}: FAIL desk-scale training did not complete");
                }
                ok = false;
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
