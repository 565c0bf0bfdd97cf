//! JSON files for instances and schedules.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Instance, ModelError, Schedule};

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Invalid { path: String, source: ModelError },
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let name = || path.display().to_string();
    let f = File::open(path).map_err(|source| FileError::Io { path: name(), source })?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| FileError::Json { path: name(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let name = || path.display().to_string();
    let io = |source| FileError::Io { path: name(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| FileError::Json { path: name(), source })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io)
}

/// Reads and validates an instance.
pub fn read_instance(path: &Path) -> Result<Instance, FileError> {
    let inst: Instance = read_json(path)?;
    inst.validate().map_err(|source| FileError::Invalid {
        path: path.display().to_string(),
        source,
    })?;
    Ok(inst)
}

pub fn write_instance(path: &Path, instance: &Instance) -> Result<(), FileError> {
    write_json(path, instance)
}

pub fn read_schedule(path: &Path) -> Result<Schedule, FileError> {
    read_json(path)
}

pub fn write_schedule(path: &Path, schedule: &Schedule) -> Result<(), FileError> {
    write_json(path, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_synthetic, GenParams};

    #[test]
    fn instance_and_schedule_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate_synthetic(&GenParams {
            num_users: 5,
            seed: 4,
            ..GenParams::default()
        })
        .unwrap();
        let p = dir.path().join("i.json");
        write_instance(&p, &inst).unwrap();
        assert_eq!(read_instance(&p).unwrap(), inst);

        let mut s = Schedule::new();
        s.assign(0, 2);
        s.assignment.insert(1, None);
        let q = dir.path().join("s.json");
        write_schedule(&q, &s).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap().replace(char::is_whitespace, ""), r#"{"0":2,"1":null}"#);
        assert_eq!(read_schedule(&q).unwrap(), s);
    }

    #[test]
    fn invalid_instance_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut inst = generate_synthetic(&GenParams {
            num_users: 2,
            ..GenParams::default()
        })
        .unwrap();
        inst.base_load_kw.pop();
        let p = dir.path().join("bad.json");
        write_instance(&p, &inst).unwrap();
        assert!(matches!(read_instance(&p), Err(FileError::Invalid { .. })));
    }
}
