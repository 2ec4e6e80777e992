//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use tempfile::tempdir;

use testvol::cohort::{make_splits, SplitSizes};
use testvol::metrics::{dice, read_volumes_csv, VolumeReport};
use testvol::nifti::{
    read_mask, read_nifti, write_nifti_with, ByteOrder, Datatype, Scaling, SegmentationMask,
    VolumeGeometry, VoxelVolume, WriteOptions,
};
use testvol::phantom::{
    generate_cohort, mask_file_name, read_manifest, CohortDesign, CohortLayout, PhantomSpec,
};
use testvol::pipeline::{resolve_model, run_infer, InferOptions, PipelineConfig, MASK_DIR, VOLUMES_CSV};
use testvol::popstats::{summarize, SummaryOptions};
use testvol::postprocess::{apply_margin_rule, Face, MarginPolicy};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn nifti_round_trip() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(610);
    let start = Instant::now();
    let mut bytes_total = 0u64;
    for i in 0..50 {
        let dims = [
            rng.random_range(1..40usize),
            rng.random_range(1..40usize),
            rng.random_range(1..30usize),
        ];
        let spacing = [0, 1, 2].map(|_| rng.random_range(0.3f32..4.0) as f64);
        let datatype = Datatype::ALL[i % Datatype::ALL.len()];
        let scaled = datatype == Datatype::I16 && rng.random_bool(0.5);
        let scaling = if scaled {
            Scaling { slope: 0.5, intercept: -3.0 }
        } else {
            Scaling::IDENTITY
        };
        let geometry = VolumeGeometry::new(dims, spacing).map_err(|e| e.to_string())?;
        let data: Vec<f32> = (0..geometry.voxel_count())
            .map(|_| match datatype {
                Datatype::U8 => rng.random_range(0..=255u32) as f32,
                Datatype::I16 => {
                    let raw = rng.random_range(-32768..=32767i32) as f64;
                    (raw * scaling.slope + scaling.intercept) as f32
                }
                Datatype::I32 => rng.random_range(-16_000_000..16_000_000i32) as f32,
                Datatype::F32 | Datatype::F64 => (rng.random::<f32>() - 0.5) * 1e4,
            })
            .collect();
        let volume = VoxelVolume::new(geometry, data)
            .map_err(|e| e.to_string())?
            .with_storage(datatype, scaling);
        let compress = rng.random_bool(0.5);
        let byte_order = if rng.random_bool(0.3) { ByteOrder::Big } else { ByteOrder::Little };
        let path = dir.path().join(format!("v{i}.nii{}", if compress { ".gz" } else { "" }));
        let opts = WriteOptions {
            scaling,
            byte_order,
            ..WriteOptions::new(datatype, compress)
        };
        write_nifti_with(&volume, &path, &opts).map_err(|e| format!("write {i}: {e}"))?;
        bytes_total += std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        let back = read_nifti(&path).map_err(|e| format!("read {i}: {e}"))?;
        ensure!(back.geometry().dims() == dims, "volume {i}: dims {:?} != {dims:?}", back.geometry().dims());
        for (a, b) in back.geometry().spacing().iter().zip(spacing) {
            ensure!((a - b).abs() <= 1e-6, "volume {i}: spacing {a} != {b}");
        }
        let same = back.data().iter().zip(volume.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "volume {i} ({}): payload differs", datatype.name());
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}, limit 5 s");
    Ok(format!("50 volumes bit-exact, {bytes_total} bytes on disk, {elapsed:.2?}"))
}

fn infer_cohort(root: &Path, design: &CohortDesign) -> Result<(PipelineConfig, Vec<testvol::metrics::VolumeRow>), String> {
    generate_cohort(root, design).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        catalog_root: CohortLayout::new(root).catalog(),
        expected_dims: design.dims,
        output_dir: root.join("out"),
        workers: 4,
        ..Default::default()
    };
    let model = resolve_model(&cfg).map_err(|e| e.to_string())?;
    let out = run_infer(&cfg, &model, InferOptions::default()).map_err(|e| e.to_string())?;
    Ok((cfg, out.rows))
}

fn volumetry_oracle() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let designs = [
        ([64, 48, 24], [2.232, 2.232, 3.0]),
        ([48, 56, 32], [1.0, 1.5, 2.5]),
    ];
    let mut checked = 0;
    for (k, (dims, spacing)) in designs.into_iter().enumerate() {
        let root = dir.path().join(format!("c{k}"));
        let design = CohortDesign {
            n_subjects: 12,
            dims,
            spacing,
            seed: 100 + k as u64,
            margin_every: None,
            rater_masks: false,
            ..Default::default()
        };
        let (cfg, rows) = infer_cohort(&root, &design)?;
        let manifest = read_manifest(CohortLayout::new(&root).manifest()).map_err(|e| e.to_string())?;
        ensure!(rows.len() == manifest.subjects.len(), "{} rows for {} phantoms", rows.len(), manifest.subjects.len());
        for (row, truth) in rows.iter().zip(&manifest.subjects) {
            let voxels = truth.spec.truth_voxels();
            let [sx, sy, sz] = truth.spec.spacing;
            let oracle = voxels.len() as f64 * (sx * sy * sz) / 1000.0;
            let mask = read_mask(cfg.output_dir.join(MASK_DIR).join(mask_file_name(&row.subject_id)))
                .map_err(|e| e.to_string())?;
            let predicted: HashSet<[usize; 3]> = mask.foreground().collect();
            let expected: HashSet<[usize; 3]> = voxels.iter().copied().collect();
            ensure!(predicted == expected, "{}: mask differs from generator voxel list", row.subject_id);
            ensure!(row.voxel_count == Some(voxels.len() as u64), "{}: voxel count", row.subject_id);
            ensure!(row.volume_ml == Some(oracle), "{}: {:?} mL != {oracle} mL", row.subject_id, row.volume_ml);
            checked += 1;
        }
    }
    ensure!(checked >= 20, "only {checked} phantoms checked");
    Ok(format!("{checked} phantoms, volume_ml exact"))
}

fn dice_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(612);
    let mut scored = 0;
    for i in 0..100 {
        let dims = [rng.random_range(1..20usize), rng.random_range(1..20usize), rng.random_range(1..10usize)];
        let g = VolumeGeometry::new(dims, [1.0; 3]).map_err(|e| e.to_string())?;
        let (pa, pb) = (rng.random::<f64>(), rng.random::<f64>());
        let a = SegmentationMask::from_fn(g.clone(), |_, _, _| rng.random_bool(pa));
        let b = SegmentationMask::from_fn(g, |_, _, _| rng.random_bool(pb));
        let sa: HashSet<[usize; 3]> = a.foreground().collect();
        let sb: HashSet<[usize; 3]> = b.foreground().collect();
        match (dice(&a, &b), dice(&b, &a)) {
            (Ok(ab), Ok(ba)) => {
                let oracle = 2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64;
                ensure!(ab.value == oracle, "pair {i}: {} != oracle {oracle}", ab.value);
                ensure!(ab.value == ba.value, "pair {i}: not symmetric");
                ensure!((0.0..=1.0).contains(&ab.value), "pair {i}: out of bounds");
                scored += 1;
            }
            (Err(_), Err(_)) => ensure!(sa.is_empty() && sb.is_empty(), "pair {i}: spurious error"),
            _ => return Err(format!("pair {i}: asymmetric failure")),
        }
        if !sa.is_empty() {
            ensure!(dice(&a, &a).map(|d| d.value).ok() == Some(1.0), "pair {i}: identity != 1");
            let complement = SegmentationMask::from_fn(a.geometry().clone(), |x, y, z| !a.get(x, y, z));
            if !complement.is_empty() {
                ensure!(dice(&a, &complement).map(|d| d.value).ok() == Some(0.0), "pair {i}: disjoint != 0");
            }
        }
    }
    Ok(format!("{scored}/100 random pairs equal the set oracle"))
}

fn margin_rule() -> Outcome {
    let dims = [64, 48, 24];
    let policy = MarginPolicy::all();
    for (i, face) in Face::ALL.into_iter().enumerate() {
        let spec = PhantomSpec::random("s", dims, [1.0; 3], Some(face), 20 + i as u64).map_err(|e| e.to_string())?;
        let mask = spec.truth_mask().map_err(|e| e.to_string())?;
        let out = apply_margin_rule(&mask, &policy);
        ensure!(out.margin_flagged, "{face}: not flagged");
        ensure!(out.touched_faces == vec![face], "{face}: touched {:?}", out.touched_faces);
        ensure!(out.mask.is_empty(), "{face}: mask not zeroed");
        let again = apply_margin_rule(&out.mask, &policy);
        ensure!(again.mask == out.mask && !again.margin_flagged, "{face}: not idempotent");
    }
    for seed in 0..10 {
        let spec = PhantomSpec::random("s", dims, [1.0; 3], None, seed).map_err(|e| e.to_string())?;
        let mask = spec.truth_mask().map_err(|e| e.to_string())?;
        let out = apply_margin_rule(&mask, &policy);
        ensure!(!out.margin_flagged && out.mask == mask, "interior seed {seed} altered");
        let again = apply_margin_rule(&out.mask, &policy);
        ensure!(again == out, "interior seed {seed}: not idempotent");
    }
    Ok("6 faces flagged and zeroed, 10 interior phantoms unchanged, idempotent".into())
}

fn split_determinism() -> Outcome {
    let ids: Vec<String> = (0..350).map(|i| format!("{}", 1_000_000 + i * 37)).collect();
    let sizes = SplitSizes { train: 313, test: 37, rt: 12 };
    let a = make_splits(&ids, sizes, 5, 42).map_err(|e| e.to_string())?;
    let b = make_splits(&ids, sizes, 5, 42).map_err(|e| e.to_string())?;
    ensure!(
        (a.train.len(), a.test.len(), a.rt.len()) == (313, 37, 12),
        "sizes {} / {} / {}",
        a.train.len(),
        a.test.len(),
        a.rt.len()
    );
    let mut folds: Vec<usize> = a.folds.iter().map(Vec::len).collect();
    folds.sort_unstable_by(|x, y| y.cmp(x));
    ensure!(folds == [63, 63, 63, 62, 62], "fold sizes {folds:?}");
    let (ja, jb) = (a.to_json().map_err(|e| e.to_string())?, b.to_json().map_err(|e| e.to_string())?);
    ensure!(ja.as_bytes() == jb.as_bytes(), "manifests differ between runs");
    Ok(format!("313/37/12, folds {folds:?}, {} byte manifest identical", ja.len()))
}

fn reports(values: &[f64]) -> Vec<VolumeReport> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| VolumeReport {
            subject_id: format!("s{i}"),
            volume_ml: v,
            voxel_count: 0,
            voxel_volume_mm3: 1.0,
            margin_flagged: false,
            model_id: String::new(),
        })
        .collect()
}

fn population_stats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(615);
    let normal = Normal::new(48.5, 21.3).map_err(|e| e.to_string())?;
    let values: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let s = summarize(&reports(&values), SummaryOptions::default()).map_err(|e| e.to_string())?;
    let oracle = 2.0 * (1.0 - StatNormal::standard().cdf(2.0));
    ensure!((oracle - 0.0455).abs() < 5e-5, "analytic tail {oracle}");
    ensure!(
        (s.frac_outside_2sd - oracle).abs() <= 0.003,
        "frac_outside {} vs {oracle:.4} +- 0.003",
        s.frac_outside_2sd
    );

    let (a, b) = (2.5, -7.0);
    let moved: Vec<f64> = values.iter().map(|v| a * v + b).collect();
    let t = summarize(&reports(&moved), SummaryOptions::default()).map_err(|e| e.to_string())?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
    ensure!(close(t.mean_ml, a * s.mean_ml + b), "mean {} vs {}", t.mean_ml, a * s.mean_ml + b);
    ensure!(close(t.sd_ml, a * s.sd_ml), "sd {} vs {}", t.sd_ml, a * s.sd_ml);
    ensure!(t.frac_outside_2sd == s.frac_outside_2sd, "outlier fraction changed under x -> {a}x{b:+}");
    let shifted: Vec<f64> = values.iter().map(|v| v + 1000.0).collect();
    let u = summarize(&reports(&shifted), SummaryOptions::default()).map_err(|e| e.to_string())?;
    ensure!(close(u.mean_ml, s.mean_ml + 1000.0) && close(u.sd_ml, s.sd_ml), "translation");
    Ok(format!(
        "frac_outside_2sd {:.4} (oracle {oracle:.4}), mean {:.2}, sd {:.2}",
        s.frac_outside_2sd, s.mean_ml, s.sd_ml
    ))
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_testvol"));
    cmd.env_remove("TESTVOL_WORKERS");
    cmd
}

fn run(cmd: &mut Command) -> Result<serde_json::Value, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{cmd:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("{cmd:?} printed non-JSON: {e}"))
}

fn config_copy(base: &Path, out: &str) -> Result<PathBuf, String> {
    let mut cfg = PipelineConfig::load(base.join("testvol.toml")).map_err(|e| e.to_string())?;
    cfg.output_dir = base.join(out);
    let path = base.join(format!("{out}.toml"));
    std::fs::write(&path, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(path)
}

fn read(path: impl AsRef<Path>) -> Result<Vec<u8>, String> {
    std::fs::read(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))
}

fn end_to_end() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let start = Instant::now();
    run(bin().arg("phantom").arg(root).args(["-n", "6", "--seed", "616"]))?;
    let manifest = read_manifest(CohortLayout::new(root).manifest()).map_err(|e| e.to_string())?;

    let one = config_copy(root, "w1")?;
    let eight = config_copy(root, "w8")?;
    let resumed = config_copy(root, "resumed")?;
    run(bin().args(["infer", "--workers", "1", "-c"]).arg(&one))?;
    run(bin().args(["infer", "-c"]).arg(&eight).env("TESTVOL_WORKERS", "8"))?;
    let partial = run(bin().args(["infer", "--limit", "2", "-c"]).arg(&resumed))?;
    ensure!(partial["pending"] == 4, "interrupted run left {} pending", partial["pending"]);
    let rest = run(bin().args(["infer", "-c"]).arg(&resumed))?;
    ensure!(rest["reused"] == 2 && rest["processed"] == 4, "resume summary {rest}");

    let csv = |out: &str| read(root.join(out).join(VOLUMES_CSV));
    ensure!(csv("w1")? == csv("w8")?, "workers 1 and 8 disagree");
    ensure!(csv("w1")? == csv("resumed")?, "resumed run differs from uninterrupted run");

    let rows = read_volumes_csv(root.join("w1").join(VOLUMES_CSV)).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 6, "{} volume rows", rows.len());
    for (row, truth) in rows.iter().zip(&manifest.subjects) {
        ensure!(row.subject_id == truth.subject_id, "row order");
        ensure!(row.margin_flagged == Some(truth.margin_flagged), "{}: flag", row.subject_id);
        ensure!(row.volume_ml == Some(truth.expected_volume_ml), "{}: volume", row.subject_id);
        let mask = |out: &str| read(root.join(out).join(MASK_DIR).join(mask_file_name(&row.subject_id)));
        ensure!(mask("w1")? == mask("w8")? && mask("w1")? == mask("resumed")?, "{}: masks differ", row.subject_id);
    }
    let flagged = manifest.subjects.iter().filter(|s| s.margin_flagged).count();
    ensure!(flagged == 2, "phantom design should flag 2 subjects, manifest has {flagged}");

    let stats = run(bin().args(["stats", "-c"]).arg(&one))?;
    let kept: Vec<f64> = manifest.subjects.iter().filter(|s| !s.margin_flagged).map(|s| s.expected_volume_ml).collect();
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let got = stats["mean_ml"].as_f64().unwrap_or(f64::NAN);
    ensure!((got - mean).abs() <= 1e-9 * mean, "stats mean {got} vs phantom mean {mean}");
    let eval = run(bin().args(["evaluate", "-c"]).arg(&one))?;
    ensure!(eval["median_dice"] == 1.0, "dice against ground truth {eval}");

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}, limit 60 s");
    Ok(format!("6 subjects, {flagged} flagged, workers 1 = 8 = resumed, {elapsed:.1?}"))
}

fn exclusion_accounting() -> Outcome {
    let dir = tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    run(bin()
        .arg("phantom")
        .arg(root)
        .args(["-n", "7", "--dims", "32,24,16", "--missing-all", "3", "--missing-channel", "2", "--bad-dims", "4"]))?;
    let s = run(bin().args(["scan", "-c"]).arg(root.join("testvol.toml")))?;
    let got = [
        &s["total"],
        &s["valid"],
        &s["missing_all_data"],
        &s["missing_window_file"],
        &s["dimension_mismatch"],
    ]
    .map(|v| v.as_u64().unwrap_or(u64::MAX));
    ensure!(got == [16, 7, 3, 2, 4], "counts {got:?}, expected [16, 7, 3, 2, 4]");
    let catalog = std::fs::read_to_string(root.join("out/catalog.csv")).map_err(|e| e.to_string())?;
    ensure!(catalog.lines().count() == 17, "catalog.csv has {} lines", catalog.lines().count());
    Ok(format!(
        "total {} = valid {} + missing data {} + missing window file {} + dimension mismatch {}",
        got[0], got[1], got[2], got[3], got[4]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("nifti round-trip", nifti_round_trip),
        ("volumetry oracle", volumetry_oracle),
        ("dice suite", dice_suite),
        ("margin rule", margin_rule),
        ("split determinism", split_determinism),
        ("population stats", population_stats),
        ("end-to-end stub model", end_to_end),
        ("exclusion accounting", exclusion_accounting),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
