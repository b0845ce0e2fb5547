//! Corpus files: `corpus.jsonl` records plus `frames.ckpt` in the checkpoint
//! tensor format.
//!
//! Each line is `{"id": n, "source": [..], "target": [..], "frames": "frames/<n>"}`
//! where `frames` names an `[n_frames, frame_dim]` f32 entry of `frames.ckpt`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Utterance};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: usize,
    source: Vec<usize>,
    target: Vec<usize>,
    frames: String,
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ckpt = Checkpoint::new();
    let mut lines = fs::File::create(dir.join("corpus.jsonl"))?;
    for u in &corpus.items {
        let name = format!("frames/{}", u.id);
        ckpt.push_tensor(&name, &u.frames);
        let rec = Record {
            id: u.id,
            source: u.source.clone(),
            target: u.target.clone(),
            frames: name,
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.write_all(b"\n")?;
    }
    ckpt.save(&dir.join("frames.ckpt"))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let ckpt = Checkpoint::load(&dir.join("frames.ckpt"))?;
    let file = fs::File::open(dir.join("corpus.jsonl"))?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let frames = ckpt.tensor::<f32>(&rec.frames)?;
        if frames.rank() != 2 {
            return Err(Error::Format(format!("frames of item {} are not 2-d", rec.id)));
        }
        items.push(Utterance {
            id: rec.id,
            frames,
            source: rec.source,
            target: rec.target,
        });
    }
    Ok(Corpus { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LengthDist, TaskConfig, ToyTask};

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = ToyTask::new(TaskConfig::default()).unwrap();
        let c = t.generate(12, 3, (1, 9), LengthDist::Uniform).unwrap();
        save_corpus(dir.path(), &c).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
        let first = fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
        assert!(first.starts_with("{\"id\":0,\"source\":["));
    }
}
