//! `--config` handling: a JSON object whose top-level sections override the
//! defaults of the matching stage.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Serialize};
use serde_json::{Map, Value};

use mvcap_core::calibrate::IcpConfig;
use mvcap_core::cloudproc::MaskConfig;
use mvcap_core::kpanno::AnnotationConfig;
use mvcap_core::pipeline::synth::SceneSpec;
use mvcap_core::register::RegistrationConfig;
use mvcap_core::syncsim::SyncConfig;

pub const SECTIONS: [&str; 7] = ["scene", "annotation", "registration", "icp", "sync", "denoise", "mask"];

/// Statistical outlier removal parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub k: usize,
    pub std_ratio: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { k: 8, std_ratio: 2.0 }
    }
}

/// User overrides, validated against the known section names.
#[derive(Debug, Clone, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = value else { bail!("config {}: top level must be an object", path.display()) };
        if let Some(k) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            bail!("config {}: unknown section {k:?} (expected one of {})", path.display(), SECTIONS.join(", "));
        }
        // typos surface even in sections the current command ignores
        let o = Self(map);
        o.resolve::<SceneSpec>("scene")?;
        o.resolve::<AnnotationConfig>("annotation")?;
        o.resolve::<RegistrationConfig>("registration")?;
        o.resolve::<IcpConfig>("icp")?;
        o.resolve::<SyncConfig>("sync")?;
        o.resolve::<DenoiseConfig>("denoise")?;
        o.resolve::<MaskConfig>("mask")?;
        Ok(o)
    }

    /// Default for `section` with the user's keys merged over it.
    pub fn resolve<T: Serialize + DeserializeOwned + Default>(&self, section: &str) -> Result<T> {
        let mut base = serde_json::to_value(T::default()).expect("configs serialize");
        if let Some(user) = self.0.get(section) {
            merge(&mut base, user, section)?;
        }
        serde_json::from_value(base).with_context(|| format!("config section {section:?}"))
    }
}

/// Overlays `user` on `base`, refusing keys the base does not have.
fn merge(base: &mut Value, user: &Value, at: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = format!("{at}.{k}");
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("config: unknown field {path}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Effective configuration of every stage, for the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Effective {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation: Option<AnnotationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registration: Option<RegistrationConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub icp: Option<IcpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise: Option<DenoiseConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskConfig>,
}

impl Effective {
    pub fn none() -> Self {
        Self { scene: None, annotation: None, registration: None, icp: None, sync: None, denoise: None, mask: None }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("configs serialize")
    }
}
