//! The run configuration document.
//!
//! ```json
//! { "schema_version": 1, "seed": 0,
//!   "data": { ... }, "teacher": { ... }, "distill": { ... }, "metrics": { ... } }
//! ```
//!
//! Every field is optional and falls back to its default. Unknown keys are
//! rejected, and all of them are reported at once as dotted paths.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::MixtureSpec;
use crate::distill::{DistillConfig, DistillStage, StageKind, TimePolicy};
use crate::error::{Error, Result};
use crate::flow::TeacherConfig;
use crate::io::read_to_string;
use crate::metrics::DEFAULT_K_RADIUS;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub k_radius: f64,
    /// Fixed MMD bandwidth; `null` selects the median heuristic.
    pub bandwidth: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            k_radius: DEFAULT_K_RADIUS,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed; the distillation seed follows it unless set explicitly.
    pub seed: u64,
    pub data: MixtureSpec,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA,
            seed: 0,
            data: MixtureSpec::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Dotted paths of keys in `user` that have no counterpart in `reference`.
/// Array elements are checked against the merged reference elements.
fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let join = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
    match (user, reference) {
        (Value::Object(u), Value::Object(r)) => {
            for (k, v) in u {
                match r.get(k) {
                    Some(rv) => unknown_keys(v, rv, &join(k), out),
                    None => out.push(join(k)),
                }
            }
        }
        (Value::Array(u), Value::Array(r)) => {
            // object elements may omit optional fields, so merge them
            let mut merged = r.first().cloned().unwrap_or(Value::Null);
            if let Value::Object(m) = &mut merged {
                for item in r.iter().skip(1).filter_map(Value::as_object) {
                    m.extend(item.iter().map(|(k, v)| (k.clone(), v.clone())));
                }
            }
            for (i, v) in u.iter().enumerate() {
                unknown_keys(v, &merged, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

fn section<T: DeserializeOwned + Default>(doc: &Value, key: &str) -> Result<T> {
    match doc.get(key) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::ConfigValue {
            key: key.to_owned(),
            msg: e.to_string(),
        }),
    }
}

impl RunConfig {
    pub fn from_value(doc: &Value) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::ConfigValue {
                key: "<root>".to_owned(),
                msg: "expected a JSON object".to_owned(),
            });
        }
        // every optional stage field present, so the key check sees the full schema
        let mut reference = RunConfig::default();
        reference.distill.stages.push(DistillStage {
            time_policy: Some(TimePolicy::default()),
            lr_student: Some(reference.distill.lr_student),
            ..DistillStage::new(StageKind::Differential, 0)
        });
        let reference = serde_json::to_value(reference)?;
        let mut unknown = Vec::new();
        unknown_keys(doc, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config { keys: unknown });
        }
        let default = RunConfig::default();
        let schema_version = match doc.get("schema_version") {
            None => CONFIG_SCHEMA,
            Some(v) => v.as_u64().map(|v| v as u32).ok_or_else(|| Error::ConfigValue {
                key: "schema_version".to_owned(),
                msg: "expected an unsigned integer".to_owned(),
            })?,
        };
        if schema_version != CONFIG_SCHEMA {
            return Err(Error::ConfigValue {
                key: "schema_version".to_owned(),
                msg: format!("unsupported version {schema_version}, expected {CONFIG_SCHEMA}"),
            });
        }
        let seed = match doc.get("seed") {
            None => default.seed,
            Some(v) => v.as_u64().ok_or_else(|| Error::ConfigValue {
                key: "seed".to_owned(),
                msg: "expected an unsigned integer".to_owned(),
            })?,
        };
        let mut distill: DistillConfig = section(doc, "distill")?;
        if doc.get("distill").and_then(|d| d.get("seed")).is_none() {
            distill.seed = seed;
        }
        let cfg = RunConfig {
            schema_version,
            seed,
            data: section(doc, "data")?,
            teacher: section(doc, "teacher")?,
            distill,
            metrics: section(doc, "metrics")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::ConfigValue {
            key: "<document>".to_owned(),
            msg: e.to_string(),
        })?;
        Self::from_value(&doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    /// Checks every section and reports all invalid keys together.
    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        let mut collect = |r: Result<()>, prefix: &str| match r {
            Ok(()) => Ok(()),
            Err(Error::Config { keys: k }) => {
                keys.extend(k.into_iter().map(|k| {
                    if k.contains('.') {
                        k
                    } else {
                        format!("{prefix}.{k}")
                    }
                }));
                Ok(())
            }
            Err(e) => Err(e),
        };
        collect(self.data.validate(), "data")?;
        collect(self.teacher.validate(), "teacher")?;
        collect(self.distill.validate(), "distill")?;
        if !(self.metrics.k_radius > 0.0 && self.metrics.k_radius.is_finite()) {
            keys.push("metrics.k_radius".to_owned());
        }
        if self.metrics.bandwidth.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            keys.push("metrics.bandwidth".to_owned());
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { keys })
        }
    }
}
