use longct_core::registration::TRANSFORM_FORMAT_VERSION;
use longct_core::study::MANIFEST_FORMAT_VERSION;
use longct_seg::checkpoint::CHECKPOINT_FORMAT_VERSION;
use serde::Serialize;

use crate::config::{Device, Preset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionInfo {
    pub package: &'static str,
    pub version: &'static str,
    pub checkpoint_format_version: u32,
    pub transform_format_version: u32,
    pub manifest_format_version: u32,
    pub preset: Preset,
    pub device: Device,
}

pub fn version_info(preset: Preset, device: Device) -> VersionInfo {
    VersionInfo {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_format_version: CHECKPOINT_FORMAT_VERSION,
        transform_format_version: TRANSFORM_FORMAT_VERSION,
        manifest_format_version: MANIFEST_FORMAT_VERSION,
        preset,
        device,
    }
}
