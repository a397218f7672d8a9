//! Output directories that appear all at once: everything is written into a
//! hidden sibling directory which replaces the target on commit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lesion_core::field::FieldSidecar;
use lesion_core::nifti::{write_nifti, NiftiElement};
use lesion_core::synthesis::NormativeJacobianPool;
use lesion_core::{Volume, VectorField};

use crate::CliError;

pub struct OutDir {
    target: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
    committed: bool,
}

fn sibling(target: &Path, tag: &str) -> Result<PathBuf, CliError> {
    let name = target
        .file_name()
        .ok_or_else(|| CliError::Input(format!("output path {} has no directory name", target.display())))?;
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{}.{tag}-{}", name.to_string_lossy(), std::process::id())))
}

impl OutDir {
    pub fn create(target: &Path) -> Result<Self, CliError> {
        let staging = sibling(target, "tmp")?;
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        Ok(Self { target: target.to_path_buf(), staging, files: Vec::new(), committed: false })
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.staging.join(name)
    }

    pub fn volume<T: NiftiElement>(&mut self, name: &str, vol: &Volume<T>) -> Result<(), CliError> {
        let p = self.path(&format!("{name}.nii"));
        Ok(write_nifti(vol, p)?)
    }

    /// Three component volumes `<name>_dx.nii` .. `<name>_dz.nii`, no sidecar.
    pub fn components(&mut self, name: &str, f: &VectorField) -> Result<(), CliError> {
        for (a, axis) in ["dx", "dy", "dz"].iter().enumerate() {
            self.volume(&format!("{name}_{axis}"), &f.component(a))?;
        }
        Ok(())
    }

    /// Components plus the `<name>.json` sidecar.
    pub fn field(&mut self, name: &str, f: &VectorField, steps: Option<usize>) -> Result<(), CliError> {
        self.components(name, f)?;
        self.json(name, &FieldSidecar { kind: f.kind(), steps, dims: f.geometry().dims })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let p = self.path(&format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    /// `<name>.bin` plus `<name>.json`.
    pub fn pool(&mut self, name: &str, pool: &NormativeJacobianPool) -> Result<(), CliError> {
        let stem = self.path(&format!("{name}.bin")).with_extension("");
        self.files.push(format!("{name}.json"));
        Ok(pool.save(stem)?)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    /// Replaces the target directory with the staged one and returns the
    /// sorted file names.
    pub fn commit(mut self) -> Result<Vec<String>, CliError> {
        if let Some(parent) = self.target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let old = sibling(&self.target, "old")?;
        let had_old = self.target.exists();
        if had_old {
            fs::rename(&self.target, &old).map_err(|e| CliError::io(&self.target, e))?;
        }
        if let Err(e) = fs::rename(&self.staging, &self.target) {
            if had_old {
                let _ = fs::rename(&old, &self.target);
            }
            return Err(CliError::io(&self.target, e));
        }
        self.committed = true;
        if had_old {
            fs::remove_dir_all(&old).map_err(|e| CliError::io(&old, e))?;
        }
        let mut files = std::mem::take(&mut self.files);
        files.sort();
        Ok(files)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
