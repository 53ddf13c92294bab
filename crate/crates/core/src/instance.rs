//! Paired clean/noisy dataset records and their JSONL encoding.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::audio::{AudioLoader, FileLoader};
use crate::error::{Error, Result};

/// One paired example. Serialized field names follow the published record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    pub prompt: String,
    #[serde(rename = "noisy_audio_path")]
    pub noisy_audio_ref: PathBuf,
    #[serde(rename = "clean_audio_path")]
    pub clean_audio_ref: PathBuf,
    pub choices: Vec<String>,
    pub target: String,
    pub noise_type: String,
    #[serde(rename = "snr")]
    pub snr_db: f64,
}

impl DatasetInstance {
    pub fn target_index(&self) -> usize {
        self.choices
            .iter()
            .position(|c| *c == self.target)
            .expect("validated instance has target among choices")
    }
}

fn required<'a>(raw: &'a Map<String, Value>, field: &str) -> Result<&'a Value> {
    match raw.get(field) {
        None | Some(Value::Null) => Err(Error::MissingField(field.to_string())),
        Some(v) => Ok(v),
    }
}

fn malformed(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidField {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn string_field(raw: &Map<String, Value>, field: &str) -> Result<String> {
    match required(raw, field)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(malformed(field, format!("expected a string, got {other}"))),
    }
}

/// Parses and checks one raw record, loading both clips to compare their shapes.
pub fn validate_instance(
    raw: &Map<String, Value>,
    loader: &dyn AudioLoader,
) -> Result<DatasetInstance> {
    let id = string_field(raw, "id")?;
    let prompt = string_field(raw, "prompt")?;
    let noisy = PathBuf::from(string_field(raw, "noisy_audio_path")?);
    let clean = PathBuf::from(string_field(raw, "clean_audio_path")?);

    let choices: Vec<String> = match required(raw, "choices")? {
        Value::Array(items) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(malformed("choices", format!("non-string choice {other}"))),
            })
            .collect::<Result<_>>()?,
        other => return Err(malformed("choices", format!("expected a list, got {other}"))),
    };
    if choices.len() < 2 {
        return Err(malformed("choices", "need at least two choices"));
    }
    for (i, c) in choices.iter().enumerate() {
        if choices[..i].contains(c) {
            return Err(Error::DuplicateChoice(c.clone()));
        }
    }

    let target = string_field(raw, "target")?;
    if !choices.contains(&target) {
        return Err(Error::TargetNotInChoices { target });
    }
    let noise_type = string_field(raw, "noise_type")?;
    let snr_db = match required(raw, "snr")? {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|v| v.is_finite())
    .ok_or_else(|| malformed("snr", "expected a finite number"))?;

    let noisy_clip = loader.load(&noisy)?;
    let clean_clip = loader.load(&clean)?;
    if noisy_clip.shape() != clean_clip.shape() {
        return Err(Error::AudioMismatch {
            noisy: noisy_clip.shape(),
            clean: clean_clip.shape(),
        });
    }

    Ok(DatasetInstance {
        id,
        prompt,
        noisy_audio_ref: noisy,
        clean_audio_ref: clean,
        choices,
        target,
        noise_type,
        snr_db,
    })
}

/// A dataset file together with the loader that resolves its audio references.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<DatasetInstance>,
    pub loader: FileLoader,
}

impl Dataset {
    /// Reads a JSONL file; audio references resolve relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loader = FileLoader::new(base);
        let instances = read_jsonl(path, &loader)?;
        Ok(Self { instances, loader })
    }
}

pub fn read_jsonl(path: &Path, loader: &dyn AudioLoader) -> Result<Vec<DatasetInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Map<String, Value> = serde_json::from_str(&line)?;
        let inst = validate_instance(&raw, loader)?;
        if out.iter().any(|o: &DatasetInstance| o.id == inst.id) {
            return Err(malformed("id", format!("duplicate id `{}`", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[DatasetInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{AudioClip, MemoryLoader};
    use serde_json::json;

    fn loader_with(noisy_frames: usize, clean_frames: usize) -> MemoryLoader {
        let mut l = MemoryLoader::default();
        l.insert("n.edau", AudioClip::zeros(noisy_frames, 16));
        l.insert("c.edau", AudioClip::zeros(clean_frames, 16));
        l
    }

    fn table_record() -> Map<String, Value> {
        json!({
            "id": 19452,
            "prompt": "What is producing the sound in the audio? Please answer based on the audio.",
            "noisy_audio_path": "n.edau",
            "clean_audio_path": "c.edau",
            "choices": ["Airplane", "Motorcycle", "Train", "Sports car"],
            "target": "Airplane",
            "noise_type": "water",
            "snr": 30
        })
        .as_object()
        .unwrap()
        .clone()
    }

    #[test]
    fn published_record_validates() {
        let inst = validate_instance(&table_record(), &loader_with(64, 64)).unwrap();
        assert_eq!(inst.id, "19452");
        assert_eq!(inst.target_index(), 0);
        assert_eq!(inst.noise_type, "water");
        assert_eq!(inst.snr_db, 30.0);
    }

    #[test]
    fn target_outside_choices() {
        let mut raw = table_record();
        raw.insert("target".into(), json!("Boat"));
        raw.insert("choices".into(), json!(["Airplane", "Train"]));
        let err = validate_instance(&raw, &loader_with(64, 64)).unwrap_err();
        assert!(matches!(err, Error::TargetNotInChoices { .. }));
    }

    #[test]
    fn frame_count_mismatch() {
        let err = validate_instance(&table_record(), &loader_with(90, 100)).unwrap_err();
        assert!(matches!(err, Error::AudioMismatch { .. }));
    }

    #[test]
    fn missing_field_is_named() {
        for field in ["id", "prompt", "choices", "target", "snr", "noisy_audio_path"] {
            let mut raw = table_record();
            raw.remove(field);
            match validate_instance(&raw, &loader_with(64, 64)) {
                Err(Error::MissingField(f)) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn duplicate_choices_rejected() {
        let mut raw = table_record();
        raw.insert("choices".into(), json!(["Airplane", "Airplane"]));
        assert!(matches!(
            validate_instance(&raw, &loader_with(64, 64)),
            Err(Error::DuplicateChoice(_))
        ));
    }

    #[test]
    fn serializes_with_published_field_names() {
        let inst = validate_instance(&table_record(), &loader_with(64, 64)).unwrap();
        let v = serde_json::to_value(&inst).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "choices",
                "clean_audio_path",
                "id",
                "noise_type",
                "noisy_audio_path",
                "prompt",
                "snr",
                "target"
            ]
        );
    }
}
