//! `segdg sweep`: enumerate runs for one experiment protocol, train each and
//! aggregate the results into the report layouts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use segdg::backbones::BackboneSpec;
use segdg::config::{validate_config, ExperimentConfig};
use segdg::data::Split;
use segdg::decoders::{DecoderKind, DecoderSpec};
use segdg::evaluation::{emit_reports, AssemblyInfo, DgMatrix};
use segdg::peft::{PeftKind, PeftSpec};
use segdg::training::{BEST_CHECKPOINT, LAST_CHECKPOINT};

use super::evaluate::{load_model, score};
use super::train::{execute, RESOLVED_CONFIG};
use super::{dataset, load_config, write_text};
use crate::exit::{CmdResult, Exit, Failure};
use crate::manifest::{RunManifest, RunStatus};

pub const SUMMARY_FILE: &str = "sweep_summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Protocol {
    /// Decoders × backbones with frozen backbones.
    DecoderSelection,
    /// PEFT methods × backbones with the base decoder.
    PeftSelection,
    /// One assembly trained on every source and scored on every dataset.
    IdDg,
}

/// Axes of a sweep. Empty axes fall back to the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Base experiment config, relative to the sweep file.
    pub base: PathBuf,
    #[serde(default)]
    pub backbones: Vec<BackboneSpec>,
    #[serde(default)]
    pub decoders: Vec<DecoderKind>,
    #[serde(default)]
    pub pefts: Vec<PeftKind>,
    /// Datasets trained on; defaults to the base source (all datasets for `id_dg`).
    #[serde(default)]
    pub sources: Vec<String>,
    /// Datasets scored besides each source; defaults to the base targets
    /// (all other datasets for `id_dg`).
    #[serde(default)]
    pub targets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(value_enum)]
    pub protocol: Protocol,
    /// Sweep config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the base seed for every cell.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrain cells that already completed.
    #[arg(long)]
    pub force: bool,
}

/// One training run of the sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: String,
    pub source: String,
    pub config: ExperimentConfig,
    pub info: AssemblyInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub assembly_id: String,
    pub source: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn single<T: Clone>(axis: &[T], name: &str, protocol: Protocol) -> CmdResult<Option<T>> {
    match axis {
        [] => Ok(None),
        [v] => Ok(Some(v.clone())),
        _ => Err(Failure::config(format!("{protocol:?} sweeps take at most one entry in `{name}`"))),
    }
}

fn cell_id(source: &str, cfg: &ExperimentConfig) -> String {
    let b = &cfg.backbone;
    let patch = b.patch_size.map(|p| format!("-p{p}")).unwrap_or_default();
    format!("{source}__{}-{}{patch}__{}__{}", b.family, b.size, cfg.peft.kind, cfg.decoder.kind)
}

/// Expand the sweep axes into resolved cell configs.
pub fn plan(protocol: Protocol, sweep: &SweepConfig, base: &ExperimentConfig) -> CmdResult<Vec<Cell>> {
    let all: Vec<String> = base.datasets.keys().cloned().collect();
    let mut backbones = sweep.backbones.clone();
    let mut decoders = sweep.decoders.clone();
    let mut pefts = sweep.pefts.clone();
    match protocol {
        Protocol::DecoderSelection => {
            if pefts.iter().any(|p| *p != PeftKind::Freeze) {
                return Err(Failure::config("decoder_selection keeps the backbone frozen; `pefts` must be [\"freeze\"] or empty"));
            }
            pefts = vec![PeftKind::Freeze];
        }
        Protocol::PeftSelection => {
            single(&decoders, "decoders", protocol)?;
        }
        Protocol::IdDg => {
            single(&decoders, "decoders", protocol)?;
            single(&pefts, "pefts", protocol)?;
            single(&backbones, "backbones", protocol)?;
        }
    }
    if backbones.is_empty() {
        backbones.push(base.backbone.clone());
    }
    if decoders.is_empty() {
        decoders.push(base.decoder.kind);
    }
    if pefts.is_empty() {
        pefts.push(base.peft.kind);
    }
    let sources = match (&sweep.sources[..], protocol) {
        ([], Protocol::IdDg) => all.clone(),
        ([], _) => vec![base.source_dataset.clone()],
        (s, _) => s.to_vec(),
    };

    let mut cells = Vec::new();
    for bb in &backbones {
        for &dec in &decoders {
            for &pk in &pefts {
                for src in &sources {
                    let mut cfg = base.clone();
                    cfg.backbone = bb.clone();
                    if dec != base.decoder.kind {
                        let mut d = DecoderSpec::new(dec, base.decoder.num_classes);
                        d.resnet_repeat_m = base.decoder.resnet_repeat_m;
                        cfg.decoder = d;
                    }
                    cfg.peft = PeftSpec {
                        kind: pk,
                        ..base.peft.clone()
                    };
                    cfg.source_dataset = src.clone();
                    cfg.target_datasets = match (&sweep.targets[..], protocol) {
                        ([], Protocol::IdDg) => all.iter().filter(|d| *d != src).cloned().collect(),
                        ([], _) => base.target_datasets.iter().filter(|d| *d != src).cloned().collect(),
                        (t, _) => t.iter().filter(|d| *d != src).cloned().collect(),
                    };
                    let cfg = validate_config(&cfg).map_err(|e| Failure::config(e.to_string()))?;
                    let info = AssemblyInfo::from_spec(&cfg.assembly()).map_err(|e| Failure::config(e.to_string()))?;
                    cells.push(Cell {
                        id: cell_id(src, &cfg),
                        source: src.clone(),
                        config: cfg,
                        info,
                    });
                }
            }
        }
    }
    Ok(cells)
}

pub fn load_sweep(path: &Path) -> CmdResult<(SweepConfig, ExperimentConfig)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read sweep config {}: {e}", path.display())))?;
    let mut sweep: SweepConfig =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if sweep.base.is_relative() {
        sweep.base = path.parent().unwrap_or(Path::new(".")).join(&sweep.base);
    }
    let base = load_config(&sweep.base, None)?;
    Ok((sweep, base))
}

fn train_cell(cell: &Cell, dir: &Path, force: bool, device: &Device) -> CmdResult {
    let config_path = dir.join(RESOLVED_CONFIG);
    let previous = RunManifest::load(dir)?;
    let completed = previous
        .as_ref()
        .is_some_and(|m| m.status == RunStatus::Completed && m.config_hash == cell.config.hash());
    if completed && !force && dir.join(BEST_CHECKPOINT).exists() {
        log::info!("{}: reusing completed run", cell.id);
        return Ok(());
    }
    let resume = (!force && previous.is_some() && dir.join(LAST_CHECKPOINT).exists()).then_some(Path::new(""));
    execute(&cell.config, &config_path, dir, resume, true, None, device).map(|_| ())
}

fn score_cell(cell: &Cell, dir: &Path, device: &Device, m: &mut DgMatrix) -> CmdResult {
    let model = load_model(&cell.config, &dir.join(BEST_CHECKPOINT), false, device)?;
    let mut targets = vec![cell.source.clone()];
    targets.extend(cell.config.target_datasets.iter().cloned());
    for t in &targets {
        let manifest = dataset(&cell.config, t)?;
        let d = score(&model, &cell.config, &manifest, Split::Test, device)?;
        m.insert_scores(&cell.source, t, &cell.info.id, &d)?;
    }
    Ok(())
}

pub fn cmd(args: &SweepArgs, device: &Device) -> CmdResult {
    let (sweep, mut base) = load_sweep(&args.config)?;
    if let Some(s) = args.seed {
        base.seed = s;
    }
    let cells = plan(args.protocol, &sweep, &base)?;

    let sweep_hash = segdg::container::sha256_hex(
        format!("{:?}|{}", args.protocol, cells.iter().map(|c| c.config.hash()).collect::<Vec<_>>().join(","))
            .as_bytes(),
    );
    let mut manifest = match RunManifest::load(&args.out)? {
        Some(m) if m.status == RunStatus::Completed && !args.force => {
            return Err(Failure::config(format!(
                "{} already holds completed sweep {}; pass --force to rerun",
                args.out.display(),
                m.run_id
            )))
        }
        Some(mut m) => {
            m.config_hash = sweep_hash[..16].to_string();
            m.status = RunStatus::Running;
            m.finished_at = None;
            m
        }
        None => RunManifest::new(
            &format!("sweep {:?}", args.protocol),
            &args.config,
            &sweep_hash[..16],
            &args.out,
            base.seed,
        ),
    };
    manifest.save()?;

    // Every cell is materialized before anything runs.
    let cells_dir = args.out.join("cells");
    for c in &cells {
        let text = c.config.to_toml().map_err(|e| Failure::config(e.to_string()))?;
        write_text(&cells_dir.join(&c.id).join(RESOLVED_CONFIG), &text)?;
    }
    log::info!("{} cells planned under {}", cells.len(), cells_dir.display());

    let mut matrix = DgMatrix::new();
    let mut statuses = Vec::new();
    for c in &cells {
        matrix.add_assembly(c.info.clone());
        let dir = cells_dir.join(&c.id);
        let mut scratch = DgMatrix::new();
        let result = train_cell(c, &dir, args.force, device).and_then(|_| score_cell(c, &dir, device, &mut scratch));
        match &result {
            Ok(()) => {
                for cell in scratch.cells() {
                    matrix.insert(cell.clone())?;
                }
            }
            Err(f) => eprintln!("cell {} failed ({:?}): {}", c.id, f.exit, f.message),
        }
        statuses.push(CellStatus {
            id: c.id.clone(),
            assembly_id: c.info.id.clone(),
            source: c.source.clone(),
            ok: result.is_ok(),
            error: result.err().map(|f| f.message),
        });
    }

    matrix.metadata = BTreeMap::from([
        ("protocol".to_string(), format!("{:?}", args.protocol)),
        ("run_id".to_string(), manifest.run_id.clone()),
        ("revision".to_string(), manifest.revision.clone()),
    ]);
    let reports = emit_reports(&matrix, &args.out.join("reports"))?;
    let summary = serde_json::to_string_pretty(&statuses).map_err(|e| Failure::new(Exit::Other, e.to_string()))?;
    write_text(&args.out.join(SUMMARY_FILE), &summary)?;

    let failed = statuses.iter().filter(|s| !s.ok).count();
    println!(
        "{} of {} cells succeeded; reports in {}",
        statuses.len() - failed,
        statuses.len(),
        reports.matrix_csv.parent().unwrap_or(Path::new(".")).display()
    );
    if failed > 0 {
        manifest.finish(RunStatus::Failed, Some(format!("{failed} cell(s) failed")))?;
        Err(Failure::new(Exit::PartialFailure, format!("{failed} of {} cells failed", statuses.len())))
    } else {
        manifest.finish(RunStatus::Completed, None)
    }
}
