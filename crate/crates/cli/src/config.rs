//! Run configuration: one strict JSON file, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lesion_core::registration::RegParams;
use lesion_core::reversal::{pipeline_reg_params, Inpainter, ReversalConfig};
use lesion_core::synthesis::{LesionParams, PhantomSpec, SubjectSpec};

use crate::experiment::ExperimentConfig;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Worker threads; `None` defers to the environment.
    pub threads: Option<usize>,
    pub phantom: PhantomSpec,
    pub subject: SubjectSpec,
    /// Subjects written by `cohort`.
    pub cohort_size: usize,
    /// Subjects registered into the normative pool.
    pub pool_subjects: usize,
    pub holdout_subjects: usize,
    pub cases: usize,
    pub lesion: LesionParams,
    /// Used by `register` and by the labelings.
    pub registration: RegParams,
    /// Used by `inpaint`.
    pub inpainter: Inpainter,
    pub reversal: ReversalConfig,
    pub perilesional_distance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            out: None,
            threads: None,
            phantom: e.phantom,
            subject: e.subject,
            cohort_size: 5,
            pool_subjects: e.pool_subjects,
            holdout_subjects: e.holdout_subjects,
            cases: e.cases,
            lesion: e.lesion,
            registration: pipeline_reg_params(),
            inpainter: Inpainter::default(),
            reversal: e.reversal,
            perilesional_distance: e.perilesional_distance,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("{e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            phantom: self.phantom.clone(),
            subject: self.subject.clone(),
            pool_subjects: self.pool_subjects,
            holdout_subjects: self.holdout_subjects,
            cases: self.cases,
            lesion: self.lesion.clone(),
            reversal: self.reversal.clone(),
            labeling_registration: self.registration.clone(),
            perilesional_distance: self.perilesional_distance,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_typo_names_the_key() {
        let err = RunConfig::parse(r#"{"registration": {"lamda_bend": 2.0}}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("lamda_bend")), "{err}");
    }

    #[test]
    fn round_trips() {
        let c = RunConfig { seed: 9, inpainter: Inpainter::harmonic(), ..RunConfig::default() };
        let back = RunConfig::parse(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
