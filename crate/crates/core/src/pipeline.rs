//! Stage functions behind the command line, operating on a run directory.
//!
//! Only [`gen_data`], [`add_noise`] and [`eval`] touch clean images. Every
//! stage writes `<stage>.manifest.json` with the config hash, the seed and
//! SHA-256 checksums of what it wrote.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{
    audit_images, compare_reports, export_residuals, fit_g_for_denoiser, residual_map, Comparison,
    ConsistencyReport, Method,
};
use crate::config::{hex, RunConfig};
use crate::data::{gen_synthetic_dataset, load_pgm, read_manifest, save_pgm, write_manifest, Image};
use crate::denoise::{external_denoiser, DenoiserSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricSummary};
use crate::nets::Net;
use crate::parallel;
use crate::rng::{derive_seed, stage_rng};
use crate::tensor::write_atomic;
use crate::train::{
    calibrate_t, image_tensor, infer, infer_on_aux, load_estimator, load_refiner, save_estimator,
    train_estimator, train_refiner, TargetSource, TrainedEstimator,
};

pub const SPLITS: [&str; 2] = ["train", "test"];

/// Residual maps are exported for this many held-out images.
const EXPORTED_RESIDUALS: usize = 4;

#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        Run {
            dir: cfg.paths.out.clone(),
            hash: cfg.hash(),
            cfg,
        }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self, kind: &str, split: &str) -> PathBuf {
        match (kind, split) {
            ("noisy", "train") if self.cfg.paths.noisy_train.is_some() => {
                self.cfg.paths.noisy_train.clone().expect("checked")
            }
            ("noisy", "test") if self.cfg.paths.noisy_test.is_some() => {
                self.cfg.paths.noisy_test.clone().expect("checked")
            }
            _ => self.path(format!("{kind}_{split}.txt")),
        }
    }

    pub fn estimator_dir(&self) -> PathBuf {
        self.path("estimator")
    }

    pub fn refiner_dir(&self) -> PathBuf {
        self.path("refiner")
    }

    fn log_file(&self, name: &str) -> Result<BufWriter<File>> {
        let dir = self.path("logs");
        std::fs::create_dir_all(&dir)?;
        Ok(BufWriter::new(File::create(dir.join(name))?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub reads_clean: bool,
    pub artifacts: Vec<Artifact>,
}

pub fn checksum(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.into()))?;
    write_atomic(path, text.as_bytes())
}

fn finish_stage(run: &Run, stage: &str, reads_clean: bool, written: &[PathBuf]) -> Result<()> {
    let artifacts = written
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: p.strip_prefix(&run.dir).unwrap_or(p).to_path_buf(),
                sha256: checksum(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&run.dir)?;
    write_json(
        &run.path(format!("{stage}.manifest.json")),
        &StageManifest {
            stage: stage.into(),
            config_hash: run.hash.clone(),
            seed: run.cfg.seed,
            reads_clean,
            artifacts,
        },
    )
}

fn image_name(i: usize) -> String {
    format!("img_{i:04}.pgm")
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn save_split(dir: &Path, manifest: &Path, names: &[String], images: &[Image]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    parallel::map_indices(images.len(), |i| save_pgm(&paths[i], &images[i]))
        .into_iter()
        .collect::<Result<()>>()?;
    write_manifest(manifest, &paths)?;
    let mut out = paths;
    out.push(manifest.to_path_buf());
    Ok(out)
}

/// Loads every image of a manifest with its path.
pub fn load_split(manifest: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let paths = read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(Error::config(format!("{} lists no images", manifest.display())));
    }
    parallel::map_slice(&paths, |p| load_pgm(p).map(|img| (p.clone(), img)))
        .into_iter()
        .collect()
}

fn images_only(v: Vec<(PathBuf, Image)>) -> Vec<Image> {
    v.into_iter().map(|(_, i)| i).collect()
}

/// Synthetic clean train and test sets.
pub fn gen_data(run: &Run) -> Result<()> {
    let d = &run.cfg.data;
    let mut written = Vec::new();
    for (split, count) in SPLITS.iter().zip([d.train, d.test]) {
        let imgs = gen_synthetic_dataset(count, d.size, derive_seed(run.cfg.seed, "gen-data", split_index(split)))?;
        let names: Vec<String> = (0..count).map(image_name).collect();
        written.extend(save_split(
            &run.path(format!("clean/{split}")),
            &run.manifest("clean", split),
            &names,
            &imgs,
        )?);
    }
    finish_stage(run, "gen-data", false, &written)
}

fn split_index(split: &str) -> u64 {
    SPLITS.iter().position(|s| *s == split).unwrap_or(0) as u64
}

/// Noisy copies of the clean sets.
pub fn add_noise(run: &Run) -> Result<()> {
    let mut written = Vec::new();
    for split in SPLITS {
        let clean = load_split(&run.manifest("clean", split))?;
        let stage = format!("noise-{split}");
        let noisy = parallel::map_indices(clean.len(), |i| {
            let mut rng = stage_rng(run.cfg.seed, &stage, i as u64);
            run.cfg.noise.apply(&clean[i].1, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = clean.iter().map(|(p, _)| format!("{}.pgm", stem(p))).collect();
        written.extend(save_split(
            &run.path(format!("noisy/{split}")),
            &run.path(format!("noisy_{split}.txt")),
            &names,
            &noisy,
        )?);
    }
    finish_stage(run, "add-noise", true, &written)
}

/// `D(y)` for every noisy image of a split.
pub fn base_outputs(spec: &DenoiserSpec, noisy: &[(PathBuf, Image)]) -> Result<Vec<Image>> {
    parallel::map_slice(noisy, |(p, y)| match spec {
        DenoiserSpec::External { dir } => external_denoiser(p, dir.as_deref(), y.dims()),
        _ => spec.apply(y),
    })
    .into_iter()
    .collect()
}

/// Base denoiser on the held-out split.
pub fn base_denoise(run: &Run) -> Result<()> {
    let noisy = load_split(&run.manifest("noisy", "test"))?;
    let out = base_outputs(&run.cfg.denoiser, &noisy)?;
    let names: Vec<String> = noisy.iter().map(|(p, _)| format!("{}.pgm", stem(p))).collect();
    let written = save_split(&run.path("base/test"), &run.path("base_test.txt"), &names, &out)?;
    finish_stage(run, "denoise-base", false, &written)
}

/// Last tenth of the training images (at least one) is held out for
/// estimator calibration and validation.
fn estimator_split(images: &[Image]) -> (Vec<Image>, Vec<Image>) {
    if images.len() == 1 {
        return (images.to_vec(), images.to_vec());
    }
    let cut = images.len() - (images.len() / 10).max(1);
    (images[..cut].to_vec(), images[cut..].to_vec())
}

pub fn train_estimator_stage(run: &Run) -> Result<TrainedEstimator> {
    let noisy = images_only(load_split(&run.manifest("noisy", "train"))?);
    let (train, holdout) = estimator_split(&noisy);
    let cfg = &run.cfg.estimator;
    let cal = calibrate_t(&train, &holdout, &run.cfg.aux, cfg, derive_seed(run.cfg.seed, "estimator", 0))?;
    log::info!("estimator pilot mean squares {:?}, t {:?}", cal.pilot_mean_squares, cal.t);
    let mut log = run.log_file("estimator.jsonl")?;
    let est = train_estimator(
        &train,
        &holdout,
        &run.cfg.aux,
        &cal.t,
        cfg,
        derive_seed(run.cfg.seed, "estimator", 1),
        Some(&mut log),
    )?;
    save_estimator(&run.estimator_dir(), &est)?;
    let dir = run.estimator_dir();
    finish_stage(
        run,
        "train-estimator",
        false,
        &[dir.join(crate::train::ESTIMATOR_FILE), dir.join(crate::train::ESTIMATOR_META)],
    )?;
    Ok(est)
}

/// Owned storage for [`TargetSource`].
enum Targets {
    Builtin(DenoiserSpec),
    Fixed(Vec<Image>),
}

impl Targets {
    fn load(spec: &DenoiserSpec, noisy: &[(PathBuf, Image)]) -> Result<Self> {
        Ok(match spec {
            DenoiserSpec::External { .. } => Targets::Fixed(base_outputs(spec, noisy)?),
            _ => Targets::Builtin(spec.clone()),
        })
    }

    fn source(&self) -> TargetSource<'_> {
        match self {
            Targets::Builtin(s) => TargetSource::Builtin(s),
            Targets::Fixed(v) => TargetSource::Fixed(v),
        }
    }
}

pub struct TrainedRefiner {
    pub refiner: Net<f32>,
    pub gnets: Vec<Net<f32>>,
}

pub fn train_refiner_stage(run: &Run) -> Result<TrainedRefiner> {
    let est = load_estimator(&run.estimator_dir())?;
    let noisy = load_split(&run.manifest("noisy", "train"))?;
    let targets = Targets::load(&run.cfg.denoiser, &noisy)?;
    let train = images_only(noisy);
    let mut log = run.log_file("refiner.jsonl")?;
    let out = train_refiner(
        &train,
        targets.source(),
        &est,
        &run.cfg.aux,
        &run.cfg.refiner,
        derive_seed(run.cfg.seed, "refiner", 0),
        Some(&mut log),
        Some(&run.refiner_dir()),
    )?;
    let dir = run.refiner_dir();
    let mut written = vec![dir.join(crate::train::REFINER_FILE)];
    written.extend((0..out.gnets.len()).map(|l| dir.join(crate::train::consistency_file(l))));
    finish_stage(run, "train-refiner", false, &written)?;
    Ok(TrainedRefiner {
        refiner: out.refiner,
        gnets: out.gnets,
    })
}

/// Refined outputs on `y` and on a fresh `ŷ` for the held-out split.
pub fn denoise(run: &Run) -> Result<()> {
    let moments = run.cfg.estimator.moments;
    let (refiner, _) = load_refiner(&run.refiner_dir(), moments)?;
    let noisy = load_split(&run.manifest("noisy", "test"))?;
    let names: Vec<String> = noisy.iter().map(|(p, _)| format!("{}.pgm", stem(p))).collect();
    let on_y = parallel::map_slice(&noisy, |(_, y)| infer(&refiner, y))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let seed = derive_seed(run.cfg.seed, "denoise", 0);
    let on_aux = parallel::map_indices(noisy.len(), |i| infer_on_aux(&refiner, &noisy[i].1, &run.cfg.aux, seed, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut written = save_split(&run.path("refined/test"), &run.path("refined_test.txt"), &names, &on_y)?;
    written.extend(save_split(
        &run.path("refined_aux/test"),
        &run.path("refined_aux_test.txt"),
        &names,
        &on_aux,
    )?);
    finish_stage(run, "denoise", false, &written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(label, summary)` against the clean held-out images.
    pub methods: Vec<(String, MetricSummary)>,
}

impl EvalReport {
    pub fn get(&self, label: &str) -> Option<&MetricSummary> {
        self.methods.iter().find(|(l, _)| l == label).map(|(_, s)| s)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12}  {:>9}  {:>7}\n", "method", "psnr_db", "ssim");
        for (l, m) in &self.methods {
            s.push_str(&format!("{l:<12}  {:>9.3}  {:>7.4}\n", m.mean_psnr, m.mean_ssim));
        }
        s
    }
}

/// Pairs two manifests by position and scores `test` against `reference`.
pub fn eval_manifests(reference: &Path, test: &Path) -> Result<MetricSummary> {
    let a = load_split(reference)?;
    let b = load_split(test)?;
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "{} lists {} images, {} lists {}",
            reference.display(),
            a.len(),
            test.display(),
            b.len()
        )));
    }
    let items: Vec<_> = a
        .into_iter()
        .zip(b)
        .map(|((p, x), (_, y))| (stem(&p), x, y))
        .collect();
    evaluate(&items, 1.0)
}

/// PSNR/SSIM of every available output set on the held-out split.
pub fn eval(run: &Run) -> Result<EvalReport> {
    let clean = run.manifest("clean", "test");
    let mut methods = Vec::new();
    for (label, kind) in [("noisy", "noisy"), ("base", "base"), ("refined", "refined"), ("refined_aux", "refined_aux")] {
        let m = run.manifest(kind, "test");
        if m.exists() {
            methods.push((label.to_string(), eval_manifests(&clean, &m)?));
        }
    }
    let report = EvalReport { methods };
    let (json, txt) = (run.path("eval.json"), run.path("eval.txt"));
    write_json(&json, &report)?;
    write_atomic(&txt, report.table().as_bytes())?;
    finish_stage(run, "eval", true, &[json, txt])?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub base: ConsistencyReport,
    pub refined: ConsistencyReport,
    /// `a` is the base denoiser, `b` the refined model.
    pub comparison: Comparison,
}

/// Fits consistency nets for the base denoiser (one output) and for the
/// refiner (its K heads), then reports residual energies on held-out images.
pub fn audit(run: &Run) -> Result<AuditOutcome> {
    let cfg = &run.cfg;
    let est = load_estimator(&run.estimator_dir())?;
    let (refiner, _) = load_refiner(&run.refiner_dir(), est.t.len())?;
    let train = load_split(&run.manifest("noisy", "train"))?;
    let test = load_split(&run.manifest("noisy", "test"))?;
    let train_targets = Targets::load(&cfg.denoiser, &train)?;
    let test_targets = Targets::load(&cfg.denoiser, &test)?;
    let train_imgs: Vec<Image> = train.iter().map(|(_, i)| i.clone()).collect();
    let named: Vec<(String, Image)> = test.iter().map(|(p, i)| (stem(p), i.clone())).collect();
    let seed = derive_seed(cfg.seed, "audit", 0);
    let dir = run.path("audit");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut reports = Vec::new();
    for (label, fit_method, test_method) in [
        ("base", Method::Denoiser(train_targets.source()), Method::Denoiser(test_targets.source())),
        ("refined", Method::Refiner(&refiner), Method::Refiner(&refiner)),
    ] {
        let fitted = fit_g_for_denoiser(&train_imgs, fit_method, &est, &cfg.aux, &cfg.audit, seed)?;
        log::info!("audit {label}: consistency fit loss {:.5}", fitted.final_loss);
        let id = match label {
            "base" => cfg.denoiser.id(),
            _ => "refined".into(),
        };
        let report = audit_images(&named, test_method, &id, &fitted.gnets, &est, &cfg.aux, cfg.audit.draws, seed, &run.hash)?;
        for (i, (name, y)) in named.iter().take(EXPORTED_RESIDUALS).enumerate() {
            let out = match test_method {
                Method::Denoiser(TargetSource::Builtin(s)) => image_tensor(&s.apply(y)?),
                Method::Denoiser(TargetSource::Fixed(v)) => image_tensor(&v[i]),
                Method::Refiner(r) => r.eval(&image_tensor(y))?,
            };
            let maps = residual_map(&image_tensor(y), &out, &fitted.gnets, &est)?;
            let maps_dir = dir.join(label);
            export_residuals(&maps_dir, name, &maps)?;
            written.extend((0..maps.maps.len()).map(|l| maps_dir.join(format!("{name}.residual{}.pgm", l + 1))));
        }
        let (json, txt) = (dir.join(format!("{label}.json")), dir.join(format!("{label}.txt")));
        write_json(&json, &report)?;
        write_atomic(&txt, report.to_text().as_bytes())?;
        written.extend([json, txt]);
        reports.push(report);
    }
    let refined = reports.pop().expect("two reports");
    let base = reports.pop().expect("two reports");
    let comparison = compare_reports(&base, &refined)?;
    let cmp = dir.join("comparison.json");
    write_json(&cmp, &comparison)?;
    written.push(cmp);
    finish_stage(run, "audit", false, &written)?;
    Ok(AuditOutcome {
        base,
        refined,
        comparison,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub eval: EvalReport,
    pub psnr_delta_db: f64,
    pub audit: AuditOutcome,
}

impl PipelineSummary {
    pub fn text(&self) -> String {
        let c = &self.audit.comparison;
        format!(
            "{}refined - base: {:+.3} dB\naudit energy: base {:.4e}, refined {:.4e}, ratio {:.3}, refined lower on {}/{} images\n",
            self.eval.table(),
            self.psnr_delta_db,
            self.audit.base.aggregate,
            self.audit.refined.aggregate,
            c.ratio,
            c.b_wins,
            c.a_wins + c.b_wins + c.ties
        )
    }
}

/// All stages in order. Clean data are generated only when no noisy
/// manifests are configured.
pub fn pipeline(run: &Run) -> Result<PipelineSummary> {
    let external = run.cfg.paths.noisy_train.is_some() || run.cfg.paths.noisy_test.is_some();
    if !external {
        gen_data(run)?;
        add_noise(run)?;
    }
    base_denoise(run)?;
    train_estimator_stage(run)?;
    train_refiner_stage(run)?;
    denoise(run)?;
    let eval = if run.manifest("clean", "test").exists() {
        eval(run)?
    } else {
        EvalReport { methods: Vec::new() }
    };
    let audit = audit(run)?;
    let psnr_delta_db = match (eval.get("refined"), eval.get("base")) {
        (Some(r), Some(b)) => r.mean_psnr - b.mean_psnr,
        _ => f64::NAN,
    };
    let summary = PipelineSummary {
        eval,
        psnr_delta_db,
        audit,
    };
    write_json(&run.path("summary.json"), &summary)?;
    Ok(summary)
}
