use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use dcl_core::depth::Domain;
use dcl_core::losses::PairSampling;
use dcl_core::metrics::MetricReport;
use dcl_core::nn::{ModelConfig, ModelSet};
use dcl_core::scene::{build_dataset, load_samples, simulate_dataset, DomainConfig, Manifest, NoiseModel, Split};
use dcl_core::seed::{derive_seed, tag};
use dcl_core::tasks::{evaluate_task, finetune, train_task, TaskConfig, TaskKind, TaskModel};
use dcl_core::train::{load_synthesis_model, read_train_log, synthesize_dataset, train, DomainData, TrainConfig, Trainer, LOG_FILE};

/// Reduced acceptance scale for a single CPU core.
struct Scale {
    resolution: usize,
    width: usize,
    residual_blocks: usize,
    steps: usize,
    domain_samples: usize,
    task_samples: usize,
    validation_samples: usize,
    held_out_batches: usize,
    task_width: usize,
    task_steps: usize,
    finetune_steps: usize,
}

const SCALE: Scale = Scale {
    resolution: 32,
    width: 8,
    residual_blocks: 4,
    steps: 2000,
    domain_samples: 500,
    task_samples: 500,
    validation_samples: 256,
    held_out_batches: 4,
    task_width: 16,
    task_steps: 1000,
    finetune_steps: 250,
};

const SOURCES: [&str; 3] = ["clean", "simulation", "dcl"];

struct SeedRun {
    seed: u64,
    losses_finite: bool,
    logged_steps: usize,
    idt_initial: f64,
    idt_final: f64,
    holes_real: f64,
    holes_synthesized: f64,
    /// Validation mean angular error and RMSE per training source.
    normals: [f64; 3],
    enhance: [f64; 3],
    normals_finetuned: f64,
    enhance_finetuned: f64,
}

fn seeds() -> Vec<u64> {
    let n = std::env::var("DCL_ACCEPTANCE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(3u64);
    (0..n).collect()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mean_holes(m: &Manifest) -> Result<f64, String> {
    let s = load_samples(m).map_err(err)?;
    Ok(s.iter().map(|x| x.depth.hole_fraction()).sum::<f64>() / s.len() as f64)
}

/// Mean L1 between generator output and input over the first batches.
fn held_out_idt(models: &ModelSet<f32>, data: &DomainData, batches: usize) -> Result<f64, String> {
    let mut total = 0.0;
    for b in 0..batches {
        let idx: Vec<usize> = (b * 8..(b + 1) * 8).collect();
        let batch = data.batch(&idx, false);
        let (out, _) = models.forward_synthesis(&batch.depth, None).map_err(err)?;
        let x = batch.depth.data();
        total += out.data().iter().zip(x).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / x.len() as f64;
    }
    Ok(total / batches as f64)
}

fn task_config(kind: TaskKind, seed: u64) -> TaskConfig {
    TaskConfig {
        kind,
        base_width: SCALE.task_width,
        steps: SCALE.task_steps,
        finetune_steps: SCALE.finetune_steps,
        seed,
        ..TaskConfig::default()
    }
}

fn metric(kind: TaskKind, r: &MetricReport) -> f64 {
    let key = match kind {
        TaskKind::Normals => "mean_deg",
        TaskKind::Enhance => "rmse",
    };
    r.get(key).unwrap_or(f64::NAN)
}

fn run_seed(seed: u64, root: &Path) -> Result<SeedRun, String> {
    let res = SCALE.resolution;
    let nm = NoiseModel::default();
    let data_seed = derive_seed(seed, &[tag("acceptance-data")]);
    let gen = |domain: Domain, split: Split, n: usize, name: &str| {
        build_dataset(&DomainConfig::for_domain(domain, res, res), &nm, split, n, data_seed, &root.join(name)).map_err(err)
    };
    let synth = gen(Domain::Synth, Split::Synthesis, SCALE.domain_samples, "synth")?;
    let real = gen(Domain::Real, Split::Synthesis, SCALE.domain_samples, "real")?;
    let clean_task = gen(Domain::Synth, Split::Task, SCALE.task_samples, "clean_task")?;
    let real_task = gen(Domain::Real, Split::Task, SCALE.task_samples, "real_task")?;
    let validation = gen(Domain::Real, Split::Validation, SCALE.validation_samples, "validation")?;
    let simulated = simulate_dataset(&clean_task, &nm, data_seed, &root.join("simulated")).map_err(err)?;

    let mut model = ModelConfig::new(res, SCALE.width, SCALE.residual_blocks);
    model.tapped_layers = vec![0, 1, 2, 3, 3 + SCALE.residual_blocks.div_ceil(2)];
    let cfg = TrainConfig {
        model,
        steps: SCALE.steps,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let held_out = DomainData::from_manifest(&real_task, res).map_err(err)?;
    let initial = Trainer::new(cfg.clone(), synth.entries.len(), real.entries.len()).map_err(err)?;
    let idt_initial = held_out_idt(&initial.models, &held_out, SCALE.held_out_batches)?;
    let out = train(&synth, &real, &cfg, &root.join("dcl"), None).map_err(err)?;
    let log = read_train_log(&root.join("dcl").join(LOG_FILE)).map_err(err)?;
    let (trained, _) = load_synthesis_model(&out.checkpoint).map_err(err)?;
    let idt_final = held_out_idt(&trained, &held_out, SCALE.held_out_batches)?;
    let synthesized = synthesize_dataset(&out.checkpoint, &clean_task, &root.join("synthesized")).map_err(err)?;

    let mut normals = [0.0; 3];
    let mut enhance = [0.0; 3];
    let mut finetuned = [0.0; 2];
    for (k, kind) in [TaskKind::Normals, TaskKind::Enhance].into_iter().enumerate() {
        let mut dcl_model: Option<TaskModel> = None;
        for (i, data) in [&clean_task, &simulated, &synthesized].into_iter().enumerate() {
            let (m, _) = train_task(data, &task_config(kind, seed)).map_err(err)?;
            let v = metric(kind, &evaluate_task(&m, &validation).map_err(err)?);
            if k == 0 {
                normals[i] = v;
            } else {
                enhance[i] = v;
            }
            dcl_model = Some(m);
        }
        let (ft, _) = finetune(&dcl_model.unwrap(), &real_task, 0.1).map_err(err)?;
        finetuned[k] = metric(kind, &evaluate_task(&ft, &validation).map_err(err)?);
    }
    Ok(SeedRun {
        seed,
        losses_finite: log.iter().all(|(_, l)| l.all_finite()),
        logged_steps: log.len(),
        idt_initial,
        idt_final,
        holes_real: mean_holes(&real)?,
        holes_synthesized: mean_holes(&synthesized)?,
        normals,
        enhance,
        normals_finetuned: finetuned[0],
        enhance_finetuned: finetuned[1],
    })
}

fn runs() -> &'static Result<Vec<SeedRun>, String> {
    static RUNS: OnceLock<Result<Vec<SeedRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(err)?;
        seeds()
            .into_iter()
            .map(|s| {
                let r = run_seed(s, &dir.path().join(format!("seed{s}")));
                if let Ok(r) = &r {
                    eprintln!(
                        "seed {}: idt {:.4} -> {:.4}, holes real {:.4} synthesized {:.4}, normals {:?} -> {:.3}, enhance {:?} -> {:.4}",
                        r.seed, r.idt_initial, r.idt_final, r.holes_real, r.holes_synthesized, r.normals, r.normals_finetuned, r.enhance, r.enhance_finetuned
                    );
                }
                r
            })
            .collect()
    })
}

/// At least two of three seeds, or the same proportion for other counts.
fn majority(per_seed: &[bool]) -> bool {
    let passed = per_seed.iter().filter(|&&p| p).count();
    !per_seed.is_empty() && 3 * passed >= 2 * per_seed.len()
}

fn judge(per_seed: Vec<(bool, String)>) -> Result<String, String> {
    let flags: Vec<bool> = per_seed.iter().map(|(p, _)| *p).collect();
    let detail = per_seed
        .iter()
        .map(|(p, d)| format!("{} {d}", if *p { "ok" } else { "miss" }))
        .collect::<Vec<_>>()
        .join("; ");
    if majority(&flags) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn a8() -> Result<String, String> {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    judge(
        runs.iter()
            .map(|r| {
                let shrink = 1.0 - r.idt_final / r.idt_initial;
                let ratio = r.holes_synthesized / r.holes_real;
                let ok = r.losses_finite && r.logged_steps == SCALE.steps && shrink >= 0.5 && (0.5..=1.5).contains(&ratio);
                (
                    ok,
                    format!(
                        "seed {}: finite {}, held-out idt {:.3} -> {:.3} ({:.0}% lower), holes {:.4} vs real {:.4} (x{ratio:.2})",
                        r.seed,
                        r.losses_finite,
                        r.idt_initial,
                        r.idt_final,
                        100.0 * shrink,
                        r.holes_synthesized,
                        r.holes_real
                    ),
                )
            })
            .collect(),
    )
}

fn triple(v: &[f64; 3]) -> String {
    SOURCES.iter().zip(v).map(|(s, x)| format!("{s} {x:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn a9() -> Result<String, String> {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    let normals = judge(
        runs.iter()
            .map(|r| (r.normals[2] < r.normals[0], format!("seed {} mean_deg {}", r.seed, triple(&r.normals))))
            .collect(),
    );
    let enhance = judge(
        runs.iter()
            .map(|r| (r.enhance[2] < r.enhance[0], format!("seed {} rmse {}", r.seed, triple(&r.enhance))))
            .collect(),
    );
    let ok = normals.is_ok() && enhance.is_ok();
    let detail = format!("normals [{}]; enhancement [{}]", normals.unwrap_or_else(|e| e), enhance.unwrap_or_else(|e| e));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn a10() -> Result<String, String> {
    let runs = runs().as_ref().map_err(Clone::clone)?;
    let normals = judge(
        runs.iter()
            .map(|r| {
                (
                    r.normals_finetuned < r.normals[2],
                    format!("seed {} mean_deg {:.3} -> {:.3}", r.seed, r.normals[2], r.normals_finetuned),
                )
            })
            .collect(),
    );
    let enhance = judge(
        runs.iter()
            .map(|r| {
                (
                    r.enhance_finetuned < r.enhance[2],
                    format!("seed {} rmse {:.4} -> {:.4}", r.seed, r.enhance[2], r.enhance_finetuned),
                )
            })
            .collect(),
    );
    let ok = normals.is_ok() && enhance.is_ok();
    let detail = format!("normals [{}]; enhancement [{}]", normals.unwrap_or_else(|e| e), enhance.unwrap_or_else(|e| e));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<(), String> {
        for e in fs::read_dir(dir).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).map_err(err)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Every stage at a small scale, run twice into the same directory.
fn small_pipeline(root: &Path) -> Result<(), String> {
    let res = 16;
    let nm = NoiseModel::default();
    let gen = |domain: Domain, split: Split, n: usize, name: &str| {
        build_dataset(&DomainConfig::for_domain(domain, res, res), &nm, split, n, 9, &root.join(name)).map_err(err)
    };
    let synth = gen(Domain::Synth, Split::Synthesis, 12, "synth")?;
    let real = gen(Domain::Real, Split::Synthesis, 12, "real")?;
    let clean_task = gen(Domain::Synth, Split::Task, 10, "clean_task")?;
    let real_task = gen(Domain::Real, Split::Task, 10, "real_task")?;
    let validation = gen(Domain::Real, Split::Validation, 6, "validation")?;
    simulate_dataset(&clean_task, &nm, 4, &root.join("simulated")).map_err(err)?;
    let mut model = ModelConfig::new(res, 4, 2);
    model.projection_dim = 16;
    let cfg = TrainConfig {
        model,
        steps: 6,
        batch_size: 4,
        checkpoint_every: 3,
        seed: 5,
        sampling: PairSampling {
            anchors: 8,
            partners: 4,
            local_radius: 2,
        },
        ..TrainConfig::default()
    };
    let out = train(&synth, &real, &cfg, &root.join("dcl"), None).map_err(err)?;
    let synthesized = synthesize_dataset(&out.checkpoint, &clean_task, &root.join("synthesized")).map_err(err)?;
    for kind in [TaskKind::Normals, TaskKind::Enhance] {
        let tc = TaskConfig {
            kind,
            base_width: 4,
            steps: 4,
            finetune_steps: 2,
            batch_size: 4,
            seed: 5,
            ..TaskConfig::default()
        };
        let (m, _) = train_task(&synthesized, &tc).map_err(err)?;
        m.save(&root.join(format!("{kind}.dclc"))).map_err(err)?;
        let (ft, _) = finetune(&m, &real_task, 0.5).map_err(err)?;
        ft.save(&root.join(format!("{kind}_finetuned.dclc"))).map_err(err)?;
        let report = evaluate_task(&ft, &validation).map_err(err)?;
        fs::write(root.join(format!("{kind}_eval.json")), report.to_json().map_err(err)?).map_err(err)?;
    }
    Ok(())
}

pub fn a11() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path().join("run");
    small_pipeline(&root)?;
    let first = snapshot(&root)?;
    fs::remove_dir_all(&root).map_err(err)?;
    small_pipeline(&root)?;
    let second = snapshot(&root)?;
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let bytes: usize = first.values().map(Vec::len).sum();
    if differing.is_empty() && first.len() > 20 {
        Ok(format!("{} files, {bytes} bytes identical across reruns", first.len()))
    } else {
        Err(format!("{} of {} files differ: {:?}", differing.len(), first.len(), differing))
    }
}
