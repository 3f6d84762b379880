use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::objectives::TargetSet;
use crate::scene::{SceneBundle, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

/// Seed of scene `index` of `split` under master seed `seed`.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, (split.stream() << 32) | index as u64)
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Scene directory relative to the data directory.
    pub dir: String,
    pub talker_count: usize,
    /// Achieved speech-to-noise ratio in dB.
    pub snr_db: f64,
    /// Achieved talker-to-talker ratio in dB (dual-talker scenes).
    pub sir_db: Option<f64>,
    pub spec: SceneSpec,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub(crate) fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = data_dir.join(MANIFEST);
    let f = std::fs::File::open(&path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Loads every scene of `split` from disk, in manifest order.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<(ManifestEntry, SceneBundle)>> {
    read_manifest(data_dir)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let dir = data_dir.join(&e.dir);
            let mixture = read_wav(&dir.join("mix.wav"))?;
            let sources = vec![read_wav(&dir.join("s1.wav"))?, read_wav(&dir.join("s2.wav"))?];
            let noise = read_wav(&dir.join("noise.wav"))?;
            let targets = TargetSet::new(sources, e.talker_count)?;
            let bundle = SceneBundle { mixture, targets, noise, spec: e.spec.clone() };
            Ok((e, bundle))
        })
        .collect()
}
