//! Tab-separated dataset manifest. Paths are stored relative to the
//! manifest's own directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: &str = "clip_id\tlabel\tframes_path\twav_path\tfps\tduration\tsplit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub label: String,
    pub frames_path: PathBuf,
    pub wav_path: PathBuf,
    pub fps: f64,
    pub duration: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn find(&self, clip_id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.clip_id == clip_id)
            .ok_or_else(|| Error::UnknownClip(clip_id.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    /// Checks ids are unique, labels belong to `classes` and durations are positive.
    pub fn validate(&self, classes: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::invalid(format!("duplicate clip id {}", e.clip_id)));
            }
            if !classes.contains(&e.label) {
                return Err(Error::Config(format!(
                    "clip {} has unknown label {}",
                    e.clip_id, e.label
                )));
            }
            if !(e.duration > 0.0) || !(e.fps > 0.0) {
                return Err(Error::invalid(format!(
                    "clip {} has nonpositive duration or fps",
                    e.clip_id
                )));
            }
        }
        Ok(())
    }

    /// Every class must have at least one training clip.
    pub fn check_train_coverage(&self, classes: &[String]) -> Result<()> {
        for c in classes {
            if !self.split(Split::Train).any(|e| &e.label == c) {
                return Err(Error::Split(format!("class {c} has no training clips")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}\n",
                e.clip_id,
                e.label,
                e.frames_path.display(),
                e.wav_path.display(),
                e.fps,
                e.duration,
                e.split
            ));
        }
        out
    }

    pub fn from_text(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing manifest header".into(),
                })
            }
        }
        let mut entries = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 7 tab-separated fields, found {}", f.len()),
                });
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad {what} {s:?}"),
                })
            };
            let split = match f[6].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                s => {
                    return Err(Error::Parse {
                        line,
                        message: format!("bad split {s:?}"),
                    })
                }
            };
            entries.push(ManifestEntry {
                clip_id: f[0].to_string(),
                label: f[1].to_string(),
                frames_path: PathBuf::from(f[2]),
                wav_path: PathBuf::from(f[3]),
                fps: num(f[4], "fps")?,
                duration: num(f[5], "duration")?,
                split,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/data"),
            entries: vec![
                ManifestEntry {
                    clip_id: "rain_00".into(),
                    label: "rain".into(),
                    frames_path: "clips/rain_00/frames".into(),
                    wav_path: "clips/rain_00.wav".into(),
                    fps: 16.0,
                    duration: 2.0,
                    split: Split::Train,
                },
                ManifestEntry {
                    clip_id: "car_03".into(),
                    label: "car".into(),
                    frames_path: "f".into(),
                    wav_path: "w.wav".into(),
                    fps: 29.97,
                    duration: 1.5,
                    split: Split::Test,
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        assert_eq!(DatasetManifest::from_text(&m.to_text(), "/data").unwrap(), m);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let mut text = sample().to_text();
        text.push_str("x\ty\n");
        assert!(matches!(
            DatasetManifest::from_text(&text, "."),
            Err(Error::Parse { line: 4, .. })
        ));
        let bad = sample().to_text().replace("29.97", "fast");
        assert!(matches!(
            DatasetManifest::from_text(&bad, "."),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            DatasetManifest::from_text("nope\n", "."),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn lookup_and_validation() {
        let m = sample();
        assert_eq!(m.find("car_03").unwrap().label, "car");
        assert!(matches!(m.find("dog_01"), Err(Error::UnknownClip(_))));
        let classes: Vec<String> = vec!["car".into(), "rain".into()];
        m.validate(&classes).unwrap();
        assert!(matches!(m.check_train_coverage(&classes), Err(Error::Split(_))));
        assert!(m.validate(&classes[..1]).is_err());
        assert_eq!(m.resolve(Path::new("a")), PathBuf::from("/data/a"));
    }
}
