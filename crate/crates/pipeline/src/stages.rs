//! The pipeline commands. Each reads its inputs from disk and writes its
//! outputs under `paths.output`:
//!
//! ```text
//! keyview/report.txt
//! colorizer/colorizer.ckpt  colorizer/loss.csv
//! chroma/<id>.c3dp          chroma/<id>.png
//! reconstruct/scene.json    reconstruct/optimizer.json  reconstruct/log.csv
//! renders/<id>.c3dp         renders/<id>.png
//! evaluate/metrics.csv      evaluate/summary.txt        evaluate/<id>.png
//! <stage>/STAGE             (run-all only)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use color3d_core::augment::{ingest_generated, AugmentSample, Provenance};
use color3d_core::colorizer::{train, ColorizerNet, TrainLog};
use color3d_core::colorspace::{NormalizedLabImage, Plane};
use color3d_core::keyview::{select_key_view, BuiltinDescriptor, EmbeddingProvider, FileEmbeddings};
use color3d_core::reconstruct::{
    init_scene, render_novel, InitSeed, OptimizerSnapshot, ReconstructLog, SupervisionSet, SupervisionView, Trainer,
};
use color3d_core::scene::Scene;
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, ProviderKind, SceneType};
use crate::error::{Error, Result, StageContext};
use crate::evaluate::{evaluate_images, EvalReport};
use crate::io::{self, CameraEntry, Dataset, Role};
use crate::synth::{write_dataset, SynthSummary};

pub const KEYVIEW_HEADER: &str = "# color3d-keyview v1";

/// Output paths under one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn keyview_report(&self) -> PathBuf {
        self.root.join("keyview/report.txt")
    }
    pub fn colorizer_ckpt(&self) -> PathBuf {
        self.root.join("colorizer/colorizer.ckpt")
    }
    pub fn colorizer_log(&self) -> PathBuf {
        self.root.join("colorizer/loss.csv")
    }
    pub fn chroma(&self, id: &str) -> PathBuf {
        self.root.join("chroma").join(format!("{id}.c3dp"))
    }
    pub fn scene(&self) -> PathBuf {
        self.root.join("reconstruct/scene.json")
    }
    pub fn optimizer(&self) -> PathBuf {
        self.root.join("reconstruct/optimizer.json")
    }
    pub fn reconstruct_log(&self) -> PathBuf {
        self.root.join("reconstruct/log.csv")
    }
    pub fn render(&self, id: &str) -> PathBuf {
        self.root.join("renders").join(format!("{id}.c3dp"))
    }
    pub fn evaluate_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }
    pub fn marker(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("STAGE")
    }
}

fn prepare(cfg: &PipelineConfig) -> Result<(PipelineConfig, Layout)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let layout = Layout::new(&cfg.paths.output);
    Ok((cfg, layout))
}

fn open_input(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.require_input()?;
    Dataset::open(&cfg.paths.input)
}

fn train_entries(ds: &Dataset) -> Result<Vec<&CameraEntry>> {
    let v = ds.with_role(Role::Train);
    if v.is_empty() {
        return Err(Error::Missing("the camera file has no training views".into()));
    }
    Ok(v)
}

/// Writes a synthetic dataset to `paths.input`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let (cfg, _) = prepare(cfg)?;
    write_dataset(&cfg.paths.input, &cfg.synth, cfg.scene_type == SceneType::Dynamic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyviewReport {
    pub provider: String,
    pub selected: String,
    pub entropies: Vec<(String, f64)>,
}

impl KeyviewReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{KEYVIEW_HEADER}\nprovider {}\nselected {}\n", self.provider, self.selected);
        for (id, h) in &self.entropies {
            let _ = writeln!(s, "entropy {id} {h}");
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut provider = None;
        let mut selected = None;
        let mut entropies = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["provider", p] => provider = Some(p.to_string()),
                ["selected", id] => selected = Some(id.to_string()),
                ["entropy", id, h] => entropies.push((
                    id.to_string(),
                    h.parse().map_err(|e| Error::format(origin, format!("line {}: {e}", ln + 1)))?,
                )),
                _ => return Err(Error::format(origin, format!("line {}: unrecognized entry", ln + 1))),
            }
        }
        match (provider, selected) {
            (Some(provider), Some(selected)) => Ok(Self {
                provider,
                selected,
                entropies,
            }),
            _ => Err(Error::format(origin, "report lacks provider or selected view")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io::read_text(path)?, path)
    }
}

pub fn cmd_select_keyview(cfg: &PipelineConfig) -> Result<KeyviewReport> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let views: Vec<(String, Plane)> = train_entries(&ds)?
        .into_iter()
        .map(|e| Ok((e.id.clone(), ds.mono(&e.id)?)))
        .collect::<Result<_>>()?;
    let file;
    let provider: &dyn EmbeddingProvider = match cfg.keyview.provider {
        ProviderKind::Builtin => &BuiltinDescriptor,
        ProviderKind::File => {
            let path = cfg.paths.embeddings.as_ref().expect("validated");
            file = FileEmbeddings::load(path)?;
            &file
        }
    };
    let sel = select_key_view(&views, provider, cfg.keyview.include_self)?;
    let report = KeyviewReport {
        provider: provider.name().to_string(),
        selected: views[sel.index].0.clone(),
        entropies: views.iter().map(|(id, _)| id.clone()).zip(sel.entropies).collect(),
    };
    io::write_file(&layout.keyview_report(), report.to_text())?;
    info!("key view: {}", report.selected);
    Ok(report)
}

/// Location of the user's colorization of the key view.
pub fn key_view_color_path(cfg: &PipelineConfig, key: &str) -> Result<PathBuf> {
    let template = cfg.paths.key_view_color.as_ref().ok_or_else(|| {
        Error::Missing(format!(
            "key view {key} has been selected; colorize it with any image colorizer and set paths.key_view_color"
        ))
    })?;
    let path = PathBuf::from(template.replace("{id}", key));
    if !path.exists() {
        return Err(Error::Missing(format!("colorized key view {key} expected at {}", path.display())));
    }
    Ok(path)
}

fn with_log_header(kind: &str, csv: String) -> String {
    format!("# color3d-{kind} v1\n{csv}")
}

pub fn cmd_train_colorizer(cfg: &PipelineConfig) -> Result<TrainLog> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let key = KeyviewReport::load(&layout.keyview_report())?.selected;
    let color = io::read_color_image(&key_view_color_path(&cfg, &key)?)?;
    let mono = ds.mono(&key)?;
    if (color.width, color.height) != (mono.width, mono.height) {
        return Err(Error::Missing(format!(
            "colorized key view is {}x{} but view {key} is {}x{}",
            color.width, color.height, mono.width, mono.height
        )));
    }
    // luminance always comes from the monochrome input
    let original = AugmentSample::new(mono.clone(), color.plane(1), color.plane(2), Provenance::Original)?;
    let pool = ingest_generated(cfg.paths.manifest.as_deref(), original)?;
    let mut train_cfg = cfg.colorizer.train.clone();
    let side = mono.width.min(mono.height);
    if train_cfg.crop > side {
        train_cfg.crop = side;
    }
    let mut net = ColorizerNet::new(cfg.colorizer.net.clone())?;
    info!("colorizer: {} samples in pool, {} iterations", pool.len(), train_cfg.iterations);
    let log = train(&mut net, &pool, &train_cfg, &cfg.augment)?;
    let ckpt = layout.colorizer_ckpt();
    io::create_dir(ckpt.parent().expect("has parent"))?;
    net.save(&ckpt)?;
    io::write_file(&layout.colorizer_log(), with_log_header("colorizer-log", log.to_csv()))?;
    Ok(log)
}

/// Predicts chroma for every training view; returns the number written.
pub fn cmd_colorize_views(cfg: &PipelineConfig) -> Result<usize> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let net = ColorizerNet::load(&layout.colorizer_ckpt())?;
    let entries = train_entries(&ds)?;
    for e in &entries {
        let l = ds.mono(&e.id)?;
        let (a, b) = net.predict_ab(&l)?;
        let path = layout.chroma(&e.id);
        io::write_planes(&path, &[&a, &b])?;
        io::write_png_lab(&path.with_extension("png"), &NormalizedLabImage::compose(&l, &a, &b)?)?;
    }
    info!("colorized {} views", entries.len());
    Ok(entries.len())
}

/// Supervision from the monochrome inputs and the predicted chroma files.
pub fn load_supervision(cfg: &PipelineConfig, ds: &Dataset, layout: &Layout) -> Result<SupervisionSet> {
    let entries = train_entries(ds)?;
    let missing: Vec<&str> = entries
        .iter()
        .filter(|e| !layout.chroma(&e.id).exists())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(format!("no predicted chroma for view(s): {}", missing.join(", "))));
    }
    let dynamic = cfg.scene_type == SceneType::Dynamic;
    if dynamic && !ds.is_dynamic() {
        return Err(Error::Missing("a dynamic reconstruction needs timestamps in cameras.txt".into()));
    }
    if !dynamic && ds.is_dynamic() {
        return Err(Error::Config("the dataset has timestamps; set scene_type = \"dynamic\"".into()));
    }
    let mut sup = SupervisionSet::default();
    for e in entries {
        let ab = io::read_planes_n(&layout.chroma(&e.id), 2)?;
        sup.views.push(SupervisionView {
            id: e.id.clone(),
            camera: e.camera.clone(),
            time: e.time,
            l: ds.mono(&e.id)?,
            a: ab[0].clone(),
            b: ab[1].clone(),
        });
    }
    Ok(sup)
}

fn init_seed(cfg: &PipelineConfig, ds: &Dataset) -> Result<InitSeed> {
    let points_file = cfg.paths.init_points.clone().or_else(|| Some(ds.points_path()).filter(|p| p.exists()));
    Ok(match points_file {
        Some(p) => InitSeed::Points(io::parse_points(&io::read_text(&p)?, &p)?),
        None => {
            warn!("no seed points; initializing {} random primitives", cfg.random_init.count);
            InitSeed::Random {
                count: cfg.random_init.count,
                min: cfg.random_init.min,
                max: cfg.random_init.max,
                seed: crate::config::derive_seed(cfg.seed, "init"),
            }
        }
    })
}

fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    io::create_dir(path.parent().expect("has parent"))?;
    Ok(scene.save(path)?)
}

pub const OPTIMIZER_FORMAT: &str = "color3d-optimizer v1";

#[derive(Serialize)]
struct Versioned<'a, T> {
    format: &'a str,
    #[serde(flatten)]
    value: &'a T,
}

fn write_optimizer(path: &Path, snapshot: &OptimizerSnapshot) -> Result<()> {
    let doc = Versioned {
        format: OPTIMIZER_FORMAT,
        value: snapshot,
    };
    let text = serde_json::to_string(&doc).map_err(|e| Error::format(path, e.to_string()))?;
    io::write_file(path, text)
}

/// Reads an optimizer snapshot written by `cmd_reconstruct`.
pub fn read_optimizer(path: &Path) -> Result<OptimizerSnapshot> {
    let mut v: serde_json::Value =
        serde_json::from_str(&io::read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    let format = v.as_object_mut().and_then(|o| o.remove("format"));
    if format.as_ref().and_then(|f| f.as_str()) != Some(OPTIMIZER_FORMAT) {
        return Err(Error::format(path, format!("expected format {OPTIMIZER_FORMAT}")));
    }
    serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string()))
}

pub fn cmd_reconstruct(cfg: &PipelineConfig) -> Result<ReconstructLog> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let sup = load_supervision(&cfg, &ds, &layout)?;
    let scene = init_scene(&init_seed(&cfg, &ds)?, &cfg.init)?;
    let mut trainer = Trainer::new(scene, &sup, &cfg.reconstruct)?;
    info!(
        "reconstruct: {} primitives, {} views, {} iterations",
        trainer.scene().len(),
        sup.views.len(),
        cfg.reconstruct.iterations
    );
    while !trainer.is_done() {
        if let Err(e) = trainer.step() {
            // keep the last finite state for inspection
            save_scene(trainer.scene(), &layout.scene())?;
            write_optimizer(&layout.optimizer(), &trainer.snapshot())?;
            return Err(e.into());
        }
    }
    write_optimizer(&layout.optimizer(), &trainer.snapshot())?;
    let (scene, log) = trainer.into_parts();
    save_scene(&scene, &layout.scene())?;
    io::write_file(&layout.reconstruct_log(), with_log_header("reconstruct-log", log.to_csv()))?;
    Ok(log)
}

fn load_scene(layout: &Layout) -> Result<Scene> {
    let path = layout.scene();
    if !path.exists() {
        return Err(Error::Missing(format!("no reconstructed scene at {}", path.display())));
    }
    Ok(Scene::load(&path)?)
}

/// Renders every camera of the dataset; returns the number of renders.
pub fn cmd_render(cfg: &PipelineConfig) -> Result<usize> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let scene = load_scene(&layout)?;
    for e in &ds.cameras {
        let (_, lab) = render_novel(&scene, &e.camera, e.time)?;
        let path = layout.render(&e.id);
        io::write_lab(&path, &lab)?;
        io::write_png_lab(&path.with_extension("png"), &lab)?;
    }
    Ok(ds.cameras.len())
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let (cfg, layout) = prepare(cfg)?;
    let ds = open_input(&cfg)?;
    let held = ds.with_role(Role::Heldout);
    if held.is_empty() {
        return Err(Error::Missing("no held-out views configured in cameras.txt".into()));
    }
    let scene = load_scene(&layout)?;
    let dir = layout.evaluate_dir();
    let mut images = Vec::new();
    for e in held {
        let (_, lab) = render_novel(&scene, &e.camera, e.time)?;
        io::write_png_lab(&dir.join(format!("{}.png", e.id)), &lab)?;
        images.push((e, lab));
    }
    let report = evaluate_images(&ds, &images)?;
    report.write(&dir)?;
    info!("evaluate: mean ME {:?}, mean L' PSNR {:?}", report.mean_me(), report.mean_psnr_l());
    Ok(report)
}

const STAGES: [&str; 5] = ["keyview", "colorizer", "chroma", "reconstruct", "evaluate"];

/// Fingerprint of a stage: its name, the config it depends on and the
/// fingerprint of the stage before it.
fn fingerprint(cfg: &PipelineConfig, stage: &str, upstream: &str) -> String {
    let mut h = Sha256::new();
    let json = |v: &dyn erased::Json| v.json();
    let parts: Vec<String> = match stage {
        "keyview" => vec![
            json(&cfg.paths.input),
            json(&cfg.paths.embeddings),
            json(&cfg.keyview),
        ],
        "colorizer" => vec![
            json(&cfg.paths.key_view_color),
            json(&cfg.paths.manifest),
            json(&cfg.augment),
            json(&cfg.colorizer),
        ],
        "reconstruct" => vec![
            json(&cfg.paths.init_points),
            json(&cfg.scene_type),
            json(&cfg.init),
            json(&cfg.random_init),
            json(&cfg.reconstruct),
        ],
        _ => vec![],
    };
    h.update(stage.as_bytes());
    h.update(upstream.as_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).expect("config serializes")
        }
    }
}

fn marker_text(stage: &str, fp: &str) -> String {
    format!("# color3d-stage v1\nstage {stage}\nfingerprint {fp}\n")
}

/// What `cmd_run_all` did with each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ran: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
    pub report: Option<EvalReport>,
}

/// Runs every stage in order, skipping stages whose marker matches the
/// current configuration. A missing key-view colorization stops the run after
/// key-view selection.
pub fn cmd_run_all(cfg: &PipelineConfig) -> Result<RunSummary> {
    let (rcfg, layout) = prepare(cfg)?;
    let mut summary = RunSummary {
        ran: Vec::new(),
        skipped: Vec::new(),
        report: None,
    };
    let mut upstream = String::new();
    for stage in STAGES {
        let fp = fingerprint(&rcfg, stage, &upstream);
        let marker = layout.marker(stage);
        let output = match stage {
            "keyview" => Some(layout.keyview_report()),
            "colorizer" => Some(layout.colorizer_ckpt()),
            "reconstruct" => Some(layout.scene()),
            _ => None,
        };
        let done = std::fs::read_to_string(&marker).is_ok_and(|t| t == marker_text(stage, &fp))
            && output.is_none_or(|p| p.exists());
        if done && stage != "evaluate" {
            info!("{stage}: up to date");
            summary.skipped.push(stage);
        } else {
            if marker.exists() {
                std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e)).stage(stage)?;
            }
            match stage {
                "keyview" => cmd_select_keyview(cfg).map(drop),
                "colorizer" => cmd_train_colorizer(cfg).map(drop),
                "chroma" => cmd_colorize_views(cfg).map(drop),
                "reconstruct" => cmd_reconstruct(cfg).map(drop),
                _ => cmd_evaluate(cfg).map(|r| summary.report = Some(r)),
            }
            .stage(stage)?;
            io::write_file(&marker, marker_text(stage, &fp)).stage(stage)?;
            summary.ran.push(stage);
        }
        upstream = fp;
    }
    Ok(summary)
}
