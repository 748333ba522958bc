use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;

use lungforge::image::{list_image_files, load_image, GrayImage};

use crate::error::{usage, CliError, CliResult};

/// Every image in `dir`, in file-name order. Any unreadable file is an error.
pub fn load_dir(dir: &Path) -> CliResult<Vec<(PathBuf, GrayImage)>> {
    if !dir.is_dir() {
        return usage(format!("{} is not a directory", dir.display()));
    }
    let files = list_image_files(dir)?;
    if files.is_empty() {
        return usage(format!("{} contains no PNG or JPEG images", dir.display()));
    }
    files
        .into_par_iter()
        .map(|p| {
            let img = load_image(&p)?;
            Ok((p, img))
        })
        .collect()
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Parses a TOML file, or returns the default when no path is given.
pub fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).or_else(|e| usage(format!("{}: {e}", path.display())))
}
