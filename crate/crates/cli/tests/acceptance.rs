//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! output stays readable; exits nonzero when any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use eegclass_core::bilstm::{loss, BiLstmClassifier, ParamTensors};
use eegclass_core::evaluation::{metrics, split_indices, ConfusionMatrix, EvalReport, Positive};
use eegclass_core::features::{
    derivative_matrix, energy_diff_matrix, time_domain_energy, EnergyVector, FeatureSequence,
    SpectralEnergy,
};
use eegclass_core::ingest::{ChannelLayout, Dataset, LabelKind, LabelSpan, Recording};
use eegclass_core::pipeline::load_report;
use eegclass_core::segmentation::{trial_count, window_geometry, SegmentPlan};
use eegclass_core::synthgen::ProfileSet;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ac1_metrics_oracle() -> Outcome {
    let cm = ConfusionMatrix::from_counts(
        vec![vec![851, 46, 39], vec![54, 860, 22], vec![48, 4, 884]],
        vec!["a".into(), "b".into(), "c".into()],
    );
    let m = metrics(&cm, Positive::Macro).map_err(|e| e.to_string())?;
    let pct = m.accuracy * 100.0;
    ensure((pct - 92.41).abs() <= 0.005, || {
        format!("accuracy {pct:.4}%")
    })?;
    Ok(format!("accuracy {pct:.4}% vs 92.41 ± 0.005"))
}

fn ac2_parseval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(100..=5000);
        let channels = rng.random_range(2..=61);
        let block = Array2::from_shape_fn((channels, len), |_| rng.random_range(-100.0..100.0));
        let engine = SpectralEnergy::new(len);
        for row in block.rows() {
            let t = time_domain_energy(row);
            worst = worst.max((engine.energy(row) - t).abs() / t);
        }
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:e}"))?;
    Ok(format!("1000 trials, max relative error {worst:.2e}"))
}

fn ac3_diff_matrix_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..1000 {
        let c = rng.random_range(2..=61);
        let ev = EnergyVector {
            values_db: (0..c).map(|_| rng.random_range(-100.0..100.0)).collect(),
        };
        let m = energy_diff_matrix(&ev).map_err(|e| e.to_string())?.m;
        for i in 0..c {
            ensure(m[[i, i]] == 0.0, || format!("vector {n}: nonzero diagonal"))?;
            for j in 0..c {
                ensure(m[[i, j]] == -m[[j, i]], || {
                    format!("vector {n}: not antisymmetric at ({i},{j})")
                })?;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = rng.random_range(2..=61);
        let len = rng.random_range(100..=2000);
        let block = Array2::from_shape_fn((c, len), |_| rng.random_range(-50.0..50.0));
        let gain = rng.random_range(1e-3..1e3);
        let engine = SpectralEnergy::new(len);
        let a = energy_diff_matrix(
            &engine
                .energy_vector(block.view())
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let scaled = block.mapv(|v| v * gain);
        let b = energy_diff_matrix(
            &engine
                .energy_vector(scaled.view())
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        worst = (&a.m - &b.m).iter().fold(worst, |w, v| w.max(v.abs()));
    }
    ensure(worst <= 1e-9, || {
        format!("scale change moved entries by {worst:e}")
    })?;
    Ok(format!(
        "1000 vectors exact; gain invariance max change {worst:.2e} dB"
    ))
}

fn ac4_derivative_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_general = 0.0f64;
    for dyadic in [true, false] {
        for n in 0..1000 {
            let c = rng.random_range(2..=61);
            let e: Vec<_> = (0..3)
                .map(|_| {
                    let values_db = (0..c)
                        .map(|_| {
                            let v: f64 = rng.random_range(-100.0..100.0);
                            if dyadic {
                                (v * 256.0).round() / 256.0
                            } else {
                                v
                            }
                        })
                        .collect();
                    energy_diff_matrix(&EnergyVector { values_db }).expect("c >= 2")
                })
                .collect();
            let d = derivative_matrix(&e[0], &e[2])
                .map_err(|e| e.to_string())?
                .m;
            ensure(d == (&e[2].m - &e[0].m) / 2.0, || {
                format!("triple {n}: not the centered difference")
            })?;
            // Forward differences at n and n - 1 with unit step, then their mean.
            let g_n = (&e[2].m - &e[1].m) / 1.0;
            let g_prev = (&e[1].m - &e[0].m) / 1.0;
            let literal = (g_n + g_prev) / 2.0;
            if dyadic {
                ensure(d == literal, || {
                    format!("triple {n}: differs from composition on exact grid")
                })?;
            } else {
                worst_general = (&d - &literal)
                    .iter()
                    .fold(worst_general, |w, v| w.max(v.abs()));
            }
        }
    }
    ensure(worst_general <= 1e-12, || {
        format!("composition differs by {worst_general:e}")
    })?;
    Ok(format!(
        "centered difference exact; composition exact on 2^-8 grid, {worst_general:.1e} on general reals"
    ))
}

fn ac5_segmentation_counts() -> Outcome {
    let mut lines = Vec::new();
    for (span_s, rate, trial_s, overlap, expected) in
        [(30.0, 2500.0, 0.4, 0.5, 149), (5.0, 2500.0, 1.0, 0.5, 9)]
    {
        let (trial, hop) = window_geometry(trial_s, overlap, rate).map_err(|e| e.to_string())?;
        let span = (span_s * rate) as usize;
        let enumerated = (0..span)
            .filter(|s| s % hop == 0 && s + trial <= span)
            .count();
        let rec = Recording::new(rate, ChannelLayout::numbered(1), Array2::zeros((1, span)))
            .map_err(|e| e.to_string())?;
        let plan = SegmentPlan::new(&rec, &LabelSpan::new(0.0, span_s), trial_s, overlap)
            .map_err(|e| e.to_string())?;
        let got = [trial_count(span, trial, hop), plan.count, enumerated];
        ensure(got.iter().all(|&g| g == expected), || {
            format!("{span_s} s: {got:?}, expected {expected}")
        })?;
        lines.push(format!("{span_s} s/{trial_s} s -> {expected}"));
    }
    Ok(lines.join(", "))
}

fn ac6_gradient_check() -> Outcome {
    const STEP: f64 = 1e-5;
    const REL_FLOOR: f64 = 1e-6;
    let vocab = vec!["a".to_string(), "b".to_string()];
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let mut model =
            BiLstmClassifier::init(3, 4, vocab.clone(), draw).map_err(|e| e.to_string())?;
        for t in model.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let seq = FeatureSequence::new(Array2::from_shape_fn((5, 3), |_| {
            rng.random_range(-2.0..2.0)
        }));
        let label = rng.random_range(0..2);
        let (_, grads) = model.backward(&seq, label).map_err(|e| e.to_string())?;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, g) in analytic.iter().enumerate() {
            for (i, &a) in g.iter().enumerate() {
                let orig = model.tensors()[ti][i];
                model.tensors_mut()[ti][i] = orig + STEP;
                let up = loss(&model.forward(&seq).map_err(|e| e.to_string())?, label);
                model.tensors_mut()[ti][i] = orig - STEP;
                let down = loss(&model.forward(&seq).map_err(|e| e.to_string())?, label);
                model.tensors_mut()[ti][i] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
            }
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("100 draws, max relative error {worst:.2e}"))
}

fn eegclass(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eegclass"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`eegclass {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_profiles(dir: &Path, set: &ProfileSet) -> Result<(), String> {
    fs::write(
        dir.join("profiles.json"),
        serde_json::to_string_pretty(set).unwrap(),
    )
    .map_err(|e| e.to_string())
}

/// Synthesizes data into `dir/data` and writes `dir/exp.json`.
fn prepare(
    dir: &Path,
    set: &ProfileSet,
    spans: usize,
    span_s: f64,
    runs: usize,
    epochs: usize,
) -> Result<(), String> {
    write_profiles(dir, set)?;
    let (spans, span_s) = (spans.to_string(), span_s.to_string());
    eegclass(
        &[
            "synth",
            "--classes",
            "profiles.json",
            "--spans",
            &spans,
            "--span-s",
            &span_s,
            "--rate",
            "2500",
            "--seed",
            "1",
            "--out",
            "data",
        ],
        dir,
    )?;
    let config = serde_json::json!({
        "version": 1,
        "manifest": "data/manifest.json",
        "out_dir": "exp",
        "trial_ms": 400,
        "overlap": 0.5,
        "feature_kind": "plain",
        "label_kind": "audio_type",
        "classes": ["V", "M"],
        "hidden": 20,
        "train": {"epochs": epochs, "learning_rate": 1e-3, "batch_size": 32, "seed": 7},
        "eval_runs": runs,
        "train_frac": 0.5
    });
    fs::write(
        dir.join("exp.json"),
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .map_err(|e| e.to_string())
}

fn contrast_profiles() -> ProfileSet {
    // 5 dB boosts on disjoint channel groups: cross pairs differ by 10 dB.
    ProfileSet::contrast(LabelKind::AudioType, &["V", "M"], 5, 5.0, (4.0, 30.0), 10.0)
}

fn identical_profiles() -> ProfileSet {
    let mut set = contrast_profiles();
    set.profiles[1].channel_gains = set.profiles[0].channel_gains.clone();
    set
}

fn ac7_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        prepare(d.path(), &contrast_profiles(), 1, 5.0, 2, 2)?;
        eegclass(&["run", "--config", "exp.json"], d.path())?;
    }
    let exp = |d: &tempfile::TempDir| d.path().join("exp");
    let mut files = vec!["report.json".to_string()];
    for entry in fs::read_dir(exp(&dirs[0]).join("checkpoints")).map_err(|e| e.to_string())? {
        files.push(format!(
            "checkpoints/{}",
            entry
                .map_err(|e| e.to_string())?
                .file_name()
                .to_string_lossy()
        ));
    }
    for f in &files {
        let a = fs::read(exp(&dirs[0]).join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(exp(&dirs[1]).join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!(
        "{} files byte-identical across two runs",
        files.len()
    ))
}

/// Pairs `(i, j)` of kept channels whose mean energy difference differs
/// between the two profiles by at least `db`.
fn contrasting_pairs(set: &ProfileSet, db: f64) -> usize {
    let layout = set.layout().unwrap();
    let kept: Vec<usize> = (0..layout.count())
        .filter(|&i| !eegclass_core::ingest::NON_EEG_CHANNELS.contains(&layout.names()[i].as_str()))
        .collect();
    let (a, b) = (
        &set.profiles[0].channel_gains,
        &set.profiles[1].channel_gains,
    );
    let mut n = 0;
    for &i in &kept {
        for &j in &kept {
            let da = 20.0 * (a[i] / a[j]).log10();
            let db_ = 20.0 * (b[i] / b[j]).log10();
            if i < j && (da - db_).abs() >= db - 1e-9 {
                n += 1;
            }
        }
    }
    n
}

fn run_synthetic(set: &ProfileSet) -> Result<EvalReport, String> {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path(), set, 2, 30.0, 10, 5)?;
    eegclass(&["run", "--config", "exp.json"], dir.path())?;
    load_report(&dir.path().join("exp/report.json")).map_err(|e| e.to_string())
}

fn ac8_separability(reports: &mut Vec<EvalReport>) -> Outcome {
    let separable = contrast_profiles();
    let pairs = contrasting_pairs(&separable, 10.0);
    ensure(pairs >= 5, || {
        format!("only {pairs} channel pairs differ by 10 dB")
    })?;
    let rep = run_synthetic(&separable)?;
    let sep_acc = rep.aggregate.accuracy;
    ensure(
        rep.per_run.iter().all(|r| r.confusion.counts.len() == 2),
        || "not binary".into(),
    )?;
    reports.push(rep);
    ensure(sep_acc >= 0.95, || {
        format!("separable accuracy {:.2}%", sep_acc * 100.0)
    })?;

    let null = run_synthetic(&identical_profiles())?;
    let n = null.per_run[0].test_size as f64;
    let half_width = 1.96 * (0.25 / n).sqrt();
    let null_acc = null.aggregate.accuracy;
    reports.push(null);
    ensure((null_acc - 0.5).abs() <= half_width, || {
        format!(
            "identical-profile accuracy {:.2}% outside 50 ± {:.2}%",
            null_acc * 100.0,
            half_width * 100.0
        )
    })?;
    Ok(format!(
        "{pairs} pairs >= 10 dB: {:.2}%; identical: {:.2}% in 50 ± {:.2}% (n={n})",
        sep_acc * 100.0,
        null_acc * 100.0,
        half_width * 100.0
    ))
}

fn ac9_repeated_eval(reports: &[EvalReport]) -> Outcome {
    ensure(!reports.is_empty(), || {
        "no 10-run reports were produced".into()
    })?;
    for r in reports {
        ensure(r.runs == 10 && r.per_run.len() == 10, || {
            format!("{} runs", r.per_run.len())
        })?;
        let mean = r.per_run_accuracies.iter().sum::<f64>() / r.per_run_accuracies.len() as f64;
        ensure(r.aggregate.accuracy == mean, || {
            format!("aggregate {} != mean {mean}", r.aggregate.accuracy)
        })?;
        let k = r.class_vocab.len();
        for i in 0..k {
            for j in 0..k {
                let sum: u64 = r.per_run.iter().map(|p| p.confusion.counts[i][j]).sum();
                ensure(r.aggregate.confusion.counts[i][j] == sum, || {
                    format!("cell ({i},{j}) is not the sum")
                })?;
            }
        }
    }
    Ok(format!(
        "{} reports: mean and confusion sums exact",
        reports.len()
    ))
}

fn ac10_balanced_split() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..200u64 {
        let k = rng.random_range(2..=5);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(2..60)).collect();
        let mut items = Vec::new();
        for (label, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                items.push((FeatureSequence::new(Array2::zeros((1, 1))), label));
            }
        }
        let ds = Dataset::new(items, (0..k).map(|i| i.to_string()).collect())
            .map_err(|e| e.to_string())?;
        let frac = rng.random_range(0.05..0.95);
        let (train, test) = split_indices(&ds, frac, trial).map_err(|e| e.to_string())?;
        let min = *counts.iter().min().unwrap();
        let tr: BTreeSet<usize> = train.iter().copied().collect();
        let te: BTreeSet<usize> = test.iter().copied().collect();
        ensure(tr.len() == train.len() && te.len() == test.len(), || {
            "duplicate indices".into()
        })?;
        ensure(tr.is_disjoint(&te), || {
            format!("split {trial}: train and test overlap")
        })?;
        let kept: BTreeSet<usize> = tr.union(&te).copied().collect();
        let mut per_class = vec![0; k];
        for &i in &kept {
            per_class[ds.items[i].1] += 1;
        }
        ensure(per_class.iter().all(|&c| c == min), || {
            format!("split {trial}: kept {per_class:?}, min {min}")
        })?;
        ensure(kept.len() == train.len() + test.len(), || {
            "not exhaustive".into()
        })?;
    }
    Ok("200 random imbalanced datasets".into())
}

fn main() {
    let mut reports = Vec::new();
    let mut failures = 0;
    let mut check = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id:<5} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("{id:<5} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    };
    check("AC1", "metrics oracle", &mut ac1_metrics_oracle);
    check("AC2", "Parseval", &mut ac2_parseval);
    check("AC3", "E(n) structure", &mut ac3_diff_matrix_structure);
    check("AC4", "E'(n) identity", &mut ac4_derivative_identity);
    check("AC5", "segmentation counts", &mut ac5_segmentation_counts);
    check("AC6", "gradient check", &mut ac6_gradient_check);
    check("AC7", "determinism", &mut ac7_determinism);
    check("AC8", "synthetic separability", &mut || {
        ac8_separability(&mut reports)
    });
    check("AC9", "repeated-eval protocol", &mut || {
        ac9_repeated_eval(&reports)
    });
    check("AC10", "balanced split", &mut ac10_balanced_split);
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
