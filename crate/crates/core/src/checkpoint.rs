//! Task checkpoints: both networks of one direction in a single archive.

use std::path::Path;

use crossgan_nn::{Archive, PatchConfig, PatchDiscriminator, UNet, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::data::Direction;
use crate::error::{write_file, Error, Result};
use crate::training::{Task, TrainConfig};

pub const FORMAT: &str = "crossgan-task";

/// Architecture and provenance recorded next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub direction: Direction,
    pub resolution: usize,
    pub generator: UNetConfig,
    pub discriminator: PatchConfig,
    pub train: TrainConfig,
    pub iterations: usize,
}

pub fn to_archive(task: &Task) -> Archive {
    let manifest = Manifest {
        format: FORMAT.into(),
        direction: task.direction,
        resolution: task.resolution(),
        generator: task.generator.config().clone(),
        discriminator: task.discriminator.config().clone(),
        train: task.train.clone(),
        iterations: task.history.len(),
    };
    let mut archive = Archive::new(serde_json::to_value(manifest).expect("manifest serializes"));
    archive.push_params("generator", &task.generator);
    archive.push_params("discriminator", &task.discriminator);
    archive
}

pub fn save_checkpoint(path: &Path, task: &Task) -> Result<()> {
    write_file(path, to_archive(task).to_bytes())
}

/// Rebuilds a task, refusing archives built for another resolution or direction.
pub fn from_archive(
    archive: &Archive,
    resolution: Option<usize>,
    direction: Option<Direction>,
) -> Result<Task> {
    let manifest: Manifest = serde_json::from_value(archive.manifest.clone())
        .map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::format(format!("not a task checkpoint ({})", manifest.format)));
    }
    if let Some(r) = resolution {
        if r != manifest.resolution {
            return Err(Error::config(format!(
                "checkpoint was trained at resolution {}, requested {r}",
                manifest.resolution
            )));
        }
    }
    if let Some(d) = direction {
        if d != manifest.direction {
            return Err(Error::config(format!(
                "checkpoint holds direction {}, expected {d}",
                manifest.direction
            )));
        }
    }
    if manifest.generator.resolution != manifest.resolution
        || manifest.discriminator.resolution != manifest.resolution
    {
        return Err(Error::format("checkpoint manifest has inconsistent resolutions"));
    }
    let mut generator = UNet::new(manifest.generator.clone(), 0)?;
    let mut discriminator = PatchDiscriminator::new(manifest.discriminator.clone(), 0)?;
    archive.load_params("generator", &mut generator)?;
    archive.load_params("discriminator", &mut discriminator)?;
    Task::from_networks(manifest.direction, generator, discriminator, &manifest.train)
}

pub fn load_checkpoint(path: &Path, resolution: Option<usize>, direction: Option<Direction>) -> Result<Task> {
    let archive = Archive::load(path).map_err(|e| match Error::from(e) {
        Error::Io { source, .. } => Error::io(format!("reading {}", path.display()), source),
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    from_archive(&archive, resolution, direction)
}
