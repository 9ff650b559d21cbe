//! Efficiency analysis inputs: an architecture file with an optional
//! `[baseline]` table, or the U-Net implied by a run config.

use std::path::Path;

use serde::Deserialize;

use bitdiff_core::diffusion::QuantMode;
use bitdiff_core::efficiency::{report, unet_arch, ArchSpec, Report};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    #[serde(default)]
    name: String,
    #[serde(default, rename = "layer")]
    layers: Vec<bitdiff_core::efficiency::LayerDef>,
    baseline: Option<ArchSpec>,
}

pub fn parse_arch_file(text: &str) -> Result<(ArchSpec, Option<ArchSpec>)> {
    let f: ArchFile = toml::from_str(text).map_err(|e| CliError::config("<arch>", e.message().to_string()))?;
    Ok((ArchSpec { name: f.name, layers: f.layers }, f.baseline))
}

pub fn analyze_file(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let (arch, baseline) = parse_arch_file(&text)?;
    Ok(report(&arch, baseline.as_ref())?)
}

/// The configured model against its full-precision counterpart.
pub fn analyze_config(cfg: &RunConfig) -> Result<Report> {
    let spec = cfg.unet_spec();
    let mut fp = spec.clone();
    fp.quant = QuantMode::Fp;
    fp.tbs_blocks.clear();
    Ok(report(&unet_arch(&spec)?, Some(&unet_arch(&fp)?))?)
}
