//! `segdg gen-phantoms`: write a synthetic dataset with an optional intensity shift.

use std::path::PathBuf;

use clap::Args;
use segdg::data::{write_phantom_dataset, DomainShift, PhantomSpec};

use crate::exit::{CmdResult, Failure};

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory; receives the volumes and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "phantom")]
    pub dataset_id: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub num_train: usize,
    #[arg(long, default_value_t = 4)]
    pub num_val: usize,
    #[arg(long, default_value_t = 4)]
    pub num_test: usize,
    /// Volume shape D,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [12, 64, 64])]
    pub shape: Vec<usize>,
    /// Classes including background.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub contrast: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

pub fn cmd(args: &PhantomArgs) -> CmdResult {
    let manifest = args.out.join("manifest.json");
    if manifest.exists() && !args.force {
        return Err(Failure::config(format!(
            "{} already exists; pass --force to overwrite",
            manifest.display()
        )));
    }
    let [d, h, w] = args.shape[..] else {
        return Err(Failure::config(format!("--shape takes D,H,W, got {:?}", args.shape)));
    };
    let spec = PhantomSpec {
        num_train: args.num_train,
        num_val: args.num_val,
        num_test: args.num_test,
        shape: [d, h, w],
        num_classes: args.classes,
        domain_shift: DomainShift {
            gamma: args.gamma,
            contrast: args.contrast,
            noise_sigma: args.noise,
            bias_strength: args.bias,
        },
        ..PhantomSpec::default()
    };
    spec.check().map_err(|e| Failure::config(e.to_string()))?;
    let path = write_phantom_dataset(&spec, args.seed, &args.dataset_id, &args.out)?;
    println!("wrote {} subjects to {}", spec.total(), path.display());
    Ok(())
}
