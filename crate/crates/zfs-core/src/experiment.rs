//! Experiment front end: run configs, run records, results tables, and
//! SVG report plots.
//!
//! Config files are dotted `key=value` text with a `format=1` header:
//!
//! ```text
//! format=1
//! dataset=synthetic
//! arch=basic
//! objective=dim
//! local.kind=ac
//! optimizer.epochs=30
//! seed=1
//! output_dir=runs/dim-ac
//! ```

use crate::data::{
    apply_split, bundled_split, generate_synthetic, load_dataset, normalize_attributes,
    DatasetManifest, SplitSpec, SyntheticSpec,
};
use crate::encoders::EncoderArch;
use crate::error::{io_ingest, Result, ZfsError};
use crate::local_aux::LocalKind;
use crate::objectives::ObjectiveKind;
use crate::protonet::Metric;
use crate::trainer::{fit, OptimizerConfig, TrainerConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const VALID_KEYS: &[&str] = &[
    "dataset",
    "arch",
    "objective",
    "objective.beta",
    "objective.latent_dim",
    "dim.terms",
    "local.kind",
    "local.weight",
    "local.tap_layer",
    "optimizer.algorithm",
    "optimizer.learning_rate",
    "optimizer.batch_size",
    "optimizer.epochs",
    "proto.refit_epochs",
    "proto.metric",
    "checkpoint.every",
    "seed",
    "output_dir",
    "data.dir",
    "synthetic.spec",
    "synthetic.seed",
];

/// Fully validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub arch: EncoderArch,
    pub objective: ObjectiveKind,
    pub local: LocalKind,
    pub local_weight: f64,
    pub local_tap_layer: usize,
    pub beta: f64,
    pub latent_dim: usize,
    pub dim_terms: String,
    pub metric: Metric,
    pub optimizer: OptimizerConfig,
    pub refit_epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub synthetic_spec: Option<PathBuf>,
    pub synthetic_seed: u64,
}

impl RunConfig {
    /// Parse + validate + fill defaults.
    pub fn from_text(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut kv = BTreeMap::new();
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim() == "format=1" => {}
            other => {
                return Err(ZfsError::Config(format!(
                    "{}: expected 'format=1' header, got {:?}",
                    origin.display(),
                    other
                )))
            }
        }
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ZfsError::Config(format!("{}: expected key=value, got '{line}'", origin.display()))
            })?;
            let k = k.trim();
            if !VALID_KEYS.contains(&k) {
                return Err(ZfsError::Config(format!(
                    "unknown config key '{k}'; valid keys: {}",
                    VALID_KEYS.join(", ")
                )));
            }
            kv.insert(k.to_string(), v.trim().to_string());
        }
        Self::from_map(kv)
    }

    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ZfsError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text, path)
    }

    fn from_map(kv: BTreeMap<String, String>) -> Result<RunConfig> {
        let get = |k: &str| kv.get(k).map(String::as_str);
        let dataset = get("dataset")
            .ok_or_else(|| ZfsError::Config("missing 'dataset'".into()))?
            .to_string();
        let arch = EncoderArch::parse(get("arch").unwrap_or("basic"))?;
        let objective = ObjectiveKind::parse(
            get("objective").ok_or_else(|| ZfsError::Config("missing 'objective'".into()))?,
        )?;
        let local = LocalKind::parse(get("local.kind").unwrap_or("none"))?;

        let parse_f64 = |k: &str, d: f64| -> Result<f64> {
            match get(k) {
                None => Ok(d),
                Some(v) => v
                    .parse()
                    .map_err(|_| ZfsError::Config(format!("bad number for '{k}': '{v}'"))),
            }
        };
        let parse_usize = |k: &str, d: usize| -> Result<usize> {
            match get(k) {
                None => Ok(d),
                Some(v) => v
                    .parse()
                    .map_err(|_| ZfsError::Config(format!("bad integer for '{k}': '{v}'"))),
            }
        };

        let local_tap_layer = parse_usize("local.tap_layer", 3)?;
        if local_tap_layer != 3 {
            return Err(ZfsError::Config(format!(
                "local.tap_layer={local_tap_layer} unsupported: encoders expose layer 3"
            )));
        }
        let dim_terms = get("dim.terms").unwrap_or("local").to_string();
        if dim_terms != "local" {
            return Err(ZfsError::Config(format!(
                "dim.terms='{dim_terms}' unsupported: only the local term is implemented"
            )));
        }
        let algorithm = get("optimizer.algorithm").unwrap_or("adam").to_string();
        if algorithm != "adam" {
            return Err(ZfsError::Config(format!(
                "optimizer.algorithm='{algorithm}' unsupported (adam only)"
            )));
        }

        let default_beta = if objective == ObjectiveKind::BetaVae { 4.0 } else { 1.0 };
        let beta = parse_f64("objective.beta", default_beta)?;
        if beta < 0.0 {
            return Err(ZfsError::Config("objective.beta must be >= 0".into()));
        }
        let default_epochs = if dataset == "synthetic" { 30 } else { 100 };

        Ok(RunConfig {
            dataset: dataset.clone(),
            arch,
            objective,
            local,
            local_weight: parse_f64("local.weight", 1.0)?,
            local_tap_layer,
            beta,
            latent_dim: parse_usize("objective.latent_dim", crate::encoders::GLOBAL_DIM)?,
            dim_terms,
            metric: Metric::parse(get("proto.metric").unwrap_or("squared_euclidean"))?,
            optimizer: OptimizerConfig {
                algorithm,
                learning_rate: parse_f64("optimizer.learning_rate", 1e-4)?,
                batch_size: parse_usize("optimizer.batch_size", 64)?,
                epochs: parse_usize("optimizer.epochs", default_epochs)?,
            },
            refit_epochs: parse_usize("proto.refit_epochs", 25)?,
            checkpoint_every: parse_usize("checkpoint.every", 0)?,
            seed: parse_usize("seed", 1)? as u64,
            output_dir: PathBuf::from(get("output_dir").unwrap_or("runs/run")),
            data_dir: get("data.dir").map(PathBuf::from),
            synthetic_spec: get("synthetic.spec").map(PathBuf::from),
            synthetic_seed: parse_usize("synthetic.seed", 1)? as u64,
        })
    }

    /// Canonical serialization; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("format=1\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("dataset", self.dataset.clone());
        put("arch", self.arch.name().into());
        put("objective", self.objective.name().into());
        put("objective.beta", self.beta.to_string());
        put("objective.latent_dim", self.latent_dim.to_string());
        put("dim.terms", self.dim_terms.clone());
        put("local.kind", self.local.name().into());
        put("local.weight", self.local_weight.to_string());
        put("local.tap_layer", self.local_tap_layer.to_string());
        put("optimizer.algorithm", self.optimizer.algorithm.clone());
        put(
            "optimizer.learning_rate",
            self.optimizer.learning_rate.to_string(),
        );
        put("optimizer.batch_size", self.optimizer.batch_size.to_string());
        put("optimizer.epochs", self.optimizer.epochs.to_string());
        put("proto.refit_epochs", self.refit_epochs.to_string());
        put("proto.metric", self.metric.name().into());
        put("checkpoint.every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        put("output_dir", self.output_dir.display().to_string());
        if let Some(d) = &self.data_dir {
            put("data.dir", d.display().to_string());
        }
        if let Some(d) = &self.synthetic_spec {
            put("synthetic.spec", d.display().to_string());
        }
        put("synthetic.seed", self.synthetic_seed.to_string());
        s
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            arch: self.arch,
            objective: self.objective,
            local: self.local,
            local_weight: self.local_weight,
            beta: self.beta,
            latent_dim: self.latent_dim,
            metric: self.metric,
            optimizer: self.optimizer.clone(),
            refit_epochs: self.refit_epochs,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

/// Persisted outcome of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub top1: f64,
    pub per_class_top1: f64,
    pub wall_time: f64,
    pub provenance_digest: String,
    pub artifact_rev: String,
}

impl RunRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::from("format=1\n");
        let _ = writeln!(s, "top1={}", self.top1);
        let _ = writeln!(s, "per_class_top1={}", self.per_class_top1);
        let _ = writeln!(s, "wall_time={}", self.wall_time);
        let _ = writeln!(s, "provenance_digest={}", self.provenance_digest);
        let _ = writeln!(s, "artifact_rev={}", self.artifact_rev);
        for line in self.config.to_text().lines().skip(1) {
            let _ = writeln!(s, "config.{line}");
        }
        s
    }

    pub fn read(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| io_ingest(path, e))?;
        let mut top1 = None;
        let mut per_class = None;
        let mut wall = 0.0;
        let mut prov = String::new();
        let mut rev = String::new();
        let mut cfg_text = String::from("format=1\n");
        let mut lines = text.lines();
        match lines.next() {
            Some("format=1") => {}
            other => {
                return Err(ZfsError::Schema(format!(
                    "{}: bad record header {other:?}",
                    path.display()
                )))
            }
        }
        for line in lines {
            if let Some(rest) = line.strip_prefix("config.") {
                cfg_text.push_str(rest);
                cfg_text.push('\n');
            } else if let Some((k, v)) = line.split_once('=') {
                match k {
                    "top1" => top1 = v.parse().ok(),
                    "per_class_top1" => per_class = v.parse().ok(),
                    "wall_time" => wall = v.parse().unwrap_or(0.0),
                    "provenance_digest" => prov = v.to_string(),
                    "artifact_rev" => rev = v.to_string(),
                    _ => {}
                }
            }
        }
        Ok(RunRecord {
            config: RunConfig::from_text(&cfg_text, path)?,
            top1: top1.ok_or_else(|| ZfsError::Schema(format!("{}: missing top1", path.display())))?,
            per_class_top1: per_class
                .ok_or_else(|| ZfsError::Schema(format!("{}: missing per_class_top1", path.display())))?,
            wall_time: wall,
            provenance_digest: prov,
            artifact_rev: rev,
        })
    }
}

pub fn artifact_rev() -> String {
    option_env!("ZFS_BUILD_REV")
        .map(str::to_string)
        .unwrap_or_else(|| format!("zfs-core-{}", env!("CARGO_PKG_VERSION")))
}

/// Resolve the dataset named by a config, generating the synthetic benchmark
/// on demand when no data directory is given.
pub fn prepare_dataset(config: &RunConfig) -> Result<(crate::data::DatasetHandle, SplitSpec)> {
    let data_dir = match (&config.data_dir, config.dataset.as_str()) {
        (Some(dir), _) => dir.clone(),
        (None, "synthetic") => {
            let spec = match &config.synthetic_spec {
                Some(p) => SyntheticSpec::read(p)?,
                None => SyntheticSpec::reference(),
            };
            let dir = config.output_dir.join("data");
            let manifest = dir.join("manifest.txt");
            if !manifest.exists() {
                generate_synthetic(&spec, config.synthetic_seed, &dir)?;
            }
            dir
        }
        (None, name) => {
            return Err(ZfsError::Ingest(format!(
                "dataset '{name}' needs data.dir pointing at its manifest directory"
            )))
        }
    };
    let manifest = DatasetManifest::read(&data_dir.join("manifest.txt"))?;
    let handle = load_dataset(&manifest)?;
    let split = if handle.split_file.exists() {
        SplitSpec::read(&handle.split_file)?
    } else if let Some(split) = bundled_split(&config.dataset) {
        split
    } else {
        return Err(ZfsError::Ingest(format!(
            "split file {} not found",
            handle.split_file.display()
        )));
    };
    Ok((handle, split))
}

/// Execute one experiment end to end and persist its record.
pub fn run_experiment(config: &RunConfig) -> Result<RunRecord> {
    let (handle, split) = prepare_dataset(config)?;
    let views = apply_split(&handle, &split)?;
    let attrs = normalize_attributes(&handle.raw_attributes)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| io_ingest(&config.output_dir, e))?;

    let artifacts = fit(
        &config.trainer_config(),
        &handle,
        &views,
        &attrs,
        &config.output_dir,
        &config.to_text(),
    )?;

    let record = RunRecord {
        config: config.clone(),
        top1: artifacts.eval.top1,
        per_class_top1: artifacts.eval.per_class_top1,
        wall_time: artifacts.wall_time,
        provenance_digest: artifacts.provenance_digest,
        artifact_rev: artifact_rev(),
    };
    let record_path = config.output_dir.join("record.txt");
    std::fs::write(&record_path, record.to_text()).map_err(|e| io_ingest(&record_path, e))?;

    // Loss-curve plot from losses.csv.
    let losses = config.output_dir.join("losses.csv");
    if let Ok(csv) = std::fs::read_to_string(&losses) {
        let svg = plots::loss_curves_svg(&csv);
        let _ = std::fs::write(config.output_dir.join("losses.svg"), svg);
    }
    Ok(record)
}

/// Results table: rows are objective x local-aux, columns dataset x arch.
/// The machine-readable TSV carries exact values; the human-readable form
/// rounds to 2 decimals and flags the best cell per (objective, dataset).
pub fn emit_results_table(records: &[RunRecord]) -> Result<(String, String)> {
    if records.is_empty() {
        return Err(ZfsError::Config("no records to tabulate".into()));
    }
    let mut datasets: Vec<String> = records.iter().map(|r| r.config.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let archs = [EncoderArch::Alexnet, EncoderArch::Basic];
    let objectives = [
        ObjectiveKind::Fc,
        ObjectiveKind::Proto,
        ObjectiveKind::Vae,
        ObjectiveKind::BetaVae,
        ObjectiveKind::Aae,
        ObjectiveKind::Dim,
    ];
    let locals = [LocalKind::Lc, LocalKind::Ac, LocalKind::None];

    let cell = |o: ObjectiveKind, l: LocalKind, d: &str, a: EncoderArch| -> Option<f64> {
        records
            .iter()
            .find(|r| {
                r.config.objective == o
                    && r.config.local == l
                    && r.config.dataset == d
                    && r.config.arch == a
            })
            .map(|r| r.top1)
    };

    // Machine-readable TSV.
    let mut tsv = String::from("format=1\n");
    tsv.push_str("objective\tlocal");
    for d in &datasets {
        for a in archs {
            let _ = write!(tsv, "\t{}/{}", d, a.name());
        }
    }
    tsv.push('\n');
    for o in objectives {
        for l in locals {
            let mut row = format!("{}\t{}", o.name(), l.name());
            let mut any = false;
            for d in &datasets {
                for a in archs {
                    match cell(o, l, d, a) {
                        Some(v) => {
                            let _ = write!(row, "\t{v}");
                            any = true;
                        }
                        None => row.push_str("\t-"),
                    }
                }
            }
            if any {
                tsv.push_str(&row);
                tsv.push('\n');
            }
        }
    }

    // Human-readable table with per-(objective, dataset) best flagged.
    let mut human = String::new();
    let _ = writeln!(
        human,
        "{:<10} {:<6} {}",
        "objective",
        "local",
        datasets
            .iter()
            .flat_map(|d| archs.iter().map(move |a| format!("{:>14}", format!("{}/{}", d, a.name()))))
            .collect::<Vec<_>>()
            .join(" ")
    );
    for o in objectives {
        // Best per dataset across locals and archs.
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for d in &datasets {
            let mut b = f64::NEG_INFINITY;
            for l in locals {
                for a in archs {
                    if let Some(v) = cell(o, l, d, a) {
                        b = b.max(v);
                    }
                }
            }
            best.insert(d.as_str(), b);
        }
        for l in locals {
            let mut cells = Vec::new();
            let mut any = false;
            for d in &datasets {
                for a in archs {
                    match cell(o, l, d, a) {
                        Some(v) => {
                            any = true;
                            let accuracy = 100.0 * v;
                            let flag = if (v - best[d.as_str()]).abs() < 1e-12 { "*" } else { " " };
                            cells.push(format!("{:>13.2}{flag}", accuracy));
                        }
                        None => cells.push(format!("{:>14}", "-")),
                    }
                }
            }
            if any {
                let _ = writeln!(human, "{:<10} {:<6} {}", o.name(), l.name(), cells.join(" "));
            }
        }
    }
    Ok((tsv, human))
}

pub mod plots {
    //! Minimal deterministic SVG emitters for loss curves and accuracy bars.

    use std::collections::BTreeMap;
    use std::fmt::Write as _;

    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const MARGIN: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    /// Per-epoch mean of every component in a losses.csv body.
    pub fn loss_curves_svg(csv: &str) -> String {
        let mut series: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        for line in csv.lines().skip(2) {
            let mut parts = line.split(',');
            let (Some(e), Some(_b), Some(name), Some(v)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            let (Ok(e), Ok(v)) = (e.parse::<usize>(), v.parse::<f64>()) else {
                continue;
            };
            let slot = series.entry(name.to_string()).or_default().entry(e).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
        let mut svg = svg_header("training loss by epoch");
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        let mut xmax = 1usize;
        for per_epoch in series.values() {
            for (&e, &(sum, n)) in per_epoch {
                let m = sum / n as f64;
                ymin = ymin.min(m);
                ymax = ymax.max(m);
                xmax = xmax.max(e);
            }
        }
        if !ymin.is_finite() {
            ymin = 0.0;
            ymax = 1.0;
        }
        if (ymax - ymin).abs() < 1e-12 {
            ymax = ymin + 1.0;
        }
        for (i, (name, per_epoch)) in series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = per_epoch
                .iter()
                .map(|(&e, &(sum, n))| {
                    let x = MARGIN + (e as f64 / xmax as f64) * (W - 2.0 * MARGIN);
                    let y = H - MARGIN - ((sum / n as f64 - ymin) / (ymax - ymin)) * (H - 2.0 * MARGIN);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{name}</text>"#,
                W - MARGIN + 4.0,
                MARGIN + 14.0 * i as f64
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{:.1}" font-size="10">min {ymin:.4}  max {ymax:.4}  epochs {xmax}</text>"#,
            H - 12.0
        );
        svg.push_str("</svg>\n");
        svg
    }

    /// Accuracy bars for (label, top1) pairs.
    pub fn accuracy_bars_svg(entries: &[(String, f64)]) -> String {
        let mut svg = svg_header("zero-shot top-1 accuracy");
        let n = entries.len().max(1) as f64;
        let bw = (W - 2.0 * MARGIN) / n;
        for (i, (label, v)) in entries.iter().enumerate() {
            let x = MARGIN + i as f64 * bw;
            let h = v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);
            let y = H - MARGIN - h;
            let color = COLORS[i % COLORS.len()];
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>"#,
                x + 2.0,
                bw - 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" transform="rotate(35 {:.1} {:.1})">{label} {:.2}%</text>"#,
                x + 2.0,
                H - MARGIN + 12.0,
                x + 2.0,
                H - MARGIN + 12.0,
                100.0 * v
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    fn svg_header(title: &str) -> String {
        format!(
            concat!(
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
                "\n",
                r#"<rect width="{w}" height="{h}" fill="white"/>"#,
                "\n",
                r#"<text x="{m}" y="20" font-size="13">{title}</text>"#,
                "\n",
                r#"<line x1="{m}" y1="{ybase}" x2="{xend}" y2="{ybase}" stroke="black"/>"#,
                "\n",
                r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{ybase}" stroke="black"/>"#,
                "\n"
            ),
            w = W,
            h = H,
            m = MARGIN,
            ybase = H - MARGIN,
            xend = W - MARGIN,
            title = title
        )
    }
}
