//! JSON checkpoints for the three networks.
//!
//! A checkpoint stores the layer spec, the time encoding and every parameter
//! matrix as nested row lists. Optimizer state is not saved.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_json};
use crate::net::{bias_name, weight_name, DiscriminatorNet, MlpSpec, StudentNet, TeacherNet, TimeEncoding};

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Discriminator,
}

impl Role {
    pub fn scope(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Discriminator => "discriminator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub tool_version: String,
    pub role: Role,
    pub spec: MlpSpec,
    pub time_freqs: usize,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn new(role: Role, spec: &MlpSpec, time: TimeEncoding, params: &ParamSet) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            role,
            spec: spec.clone(),
            time_freqs: time.freqs,
            params: params.iter().map(|(n, e)| (n.to_owned(), e.value.to_rows())).collect(),
        }
    }

    pub fn teacher(net: &TeacherNet) -> Self {
        Self::new(Role::Teacher, &net.mlp.spec, net.time, net.params())
    }

    pub fn student(net: &StudentNet) -> Self {
        Self::new(Role::Student, &net.mlp.spec, net.time, net.params())
    }

    pub fn discriminator(net: &DiscriminatorNet) -> Self {
        Self::new(Role::Discriminator, &net.mlp.spec, net.time, net.params())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Reads and validates a checkpoint. Anything that is not a well-formed
    /// checkpoint of the current schema is an [`Error::Artifact`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Artifact(format!("{}: not a valid checkpoint: {e}", path.display())))?;
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Artifact(format!(
                "{}: checkpoint schema version {} (expected {CHECKPOINT_SCHEMA})",
                path.display(),
                ck.schema_version
            )));
        }
        Ok(ck)
    }

    pub fn time(&self) -> TimeEncoding {
        TimeEncoding { freqs: self.time_freqs }
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Artifact(format!(
                "checkpoint holds a {:?} network, expected {role:?}",
                self.role
            )));
        }
        Ok(())
    }

    /// Rebuilds the parameter set in layer order, checking names and shapes
    /// against the recorded architecture.
    pub fn param_set(&self) -> Result<ParamSet> {
        let bad = |msg: String| Error::Artifact(msg);
        self.spec.validate().map_err(|e| bad(format!("bad spec: {e}")))?;
        let mut params = ParamSet::new(self.role.scope());
        let mut used = 0;
        for (i, (fan_in, fan_out)) in self.spec.layer_dims().into_iter().enumerate() {
            for (name, shape) in [(weight_name(i), (fan_in, fan_out)), (bias_name(i), (1, fan_out))] {
                let rows = self.params.get(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
                let t = Tensor2::from_rows(rows).map_err(|e| bad(format!("parameter {name}: {e}")))?;
                if t.shape() != shape {
                    return Err(bad(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
                }
                params.insert(name, t)?;
                used += 1;
            }
        }
        if used != self.params.len() {
            return Err(bad(format!("{} unexpected parameters", self.params.len() - used)));
        }
        Ok(params)
    }

    pub fn into_teacher(self) -> Result<TeacherNet> {
        self.expect_role(Role::Teacher)?;
        TeacherNet::from_parts(self.spec.clone(), self.param_set()?, self.time()).map_err(art)
    }

    pub fn into_student(self) -> Result<StudentNet> {
        self.expect_role(Role::Student)?;
        StudentNet::from_parts(self.spec.clone(), self.param_set()?, self.time()).map_err(art)
    }

    pub fn into_discriminator(self) -> Result<DiscriminatorNet> {
        self.expect_role(Role::Discriminator)?;
        DiscriminatorNet::from_parts(self.spec.clone(), self.param_set()?, self.time()).map_err(art)
    }
}

fn art(e: Error) -> Error {
    match e {
        Error::Artifact(_) => e,
        other => Error::Artifact(other.to_string()),
    }
}
