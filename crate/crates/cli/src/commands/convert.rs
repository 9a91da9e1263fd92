//! `segdg convert-weights`: map a public encoder checkpoint into the weight container.

use std::path::PathBuf;

use clap::Args;
use segdg::backbones::{BackboneSpec, Family, Size};
use segdg::weights::convert_weights;

use crate::exit::{CmdResult, Failure};

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input safetensors checkpoint.
    #[arg(long)]
    pub input: PathBuf,
    /// Backbone family (dinov2, sam, medsam, mae, toy).
    #[arg(long)]
    pub family: String,
    /// Backbone size (small, base, large, huge_or_giant, toy).
    #[arg(long)]
    pub size: String,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, v: &str) -> CmdResult<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Failure::config(format!("unknown backbone {what} `{v}`")))
}

pub fn cmd(args: &ConvertArgs) -> CmdResult {
    if args.out.exists() && !args.force {
        return Err(Failure::config(format!(
            "{} already exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let family: Family = parse("family", &args.family)?;
    let size: Size = parse("size", &args.size)?;
    let mut spec = BackboneSpec::new(family, size);
    spec.patch_size = args.patch_size;
    let report = convert_weights(&args.input, &spec, &args.out)?;
    println!(
        "converted {} arrays ({} dropped, {} synthesized) into {}",
        report.converted.len(),
        report.dropped.len(),
        report.synthesized.len(),
        args.out.display()
    );
    for name in &report.synthesized {
        println!("  synthesized {name}");
    }
    Ok(())
}
