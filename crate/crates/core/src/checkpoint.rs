//! Versioned JSON artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "qdsnn";
pub const VERSION: u32 = 1;

pub const KIND_ANN: &str = "ann";
pub const KIND_SNN: &str = "snn";
pub const KIND_QTABLE: &str = "qtable";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    let env = Envelope {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        payload: value,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &env)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<serde_json::Value> = serde_json::from_reader(std::io::BufReader::new(file))?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported artifact format {} v{}",
            path.display(),
            env.format,
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Usage(format!("{}: expected a {kind} artifact, found {}", path.display(), env.kind)));
    }
    Ok(serde_json::from_value(env.payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        save(&p, KIND_QTABLE, &vec![1.5, 2.0]).unwrap();
        let v: Vec<f64> = load(&p, KIND_QTABLE).unwrap();
        assert_eq!(v, vec![1.5, 2.0]);
        assert!(matches!(load::<Vec<f64>>(&p, KIND_ANN), Err(Error::Usage(_))));
        assert!(matches!(
            load::<Vec<f64>>(&dir.path().join("missing.json"), KIND_ANN),
            Err(Error::MissingArtifact(_))
        ));
    }
}
