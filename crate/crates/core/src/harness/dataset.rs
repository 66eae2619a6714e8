//! Question/image samples, synthetic dataset generation and the line-delimited
//! JSON manifest used for externally supplied pairs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::ImageBuf;
use crate::error::{Error, Result};
use crate::imageio::{read_pnm, write_pnm};
use crate::rng::Rng;

use super::scene::{gen_scene, Modality, QaSample, SceneConfig};
use super::vocab::{Vocab, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Samples drawn from the same image pair share this index.
    pub pair: usize,
    pub qa: QaSample,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub pairs: Vec<(ImageBuf, ImageBuf)>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `scenes` synthetic scenes; each contributes all of its questions.
    pub fn synthetic(seed: u64, config: &SceneConfig, scenes: usize) -> Result<Self> {
        let mut rng = Rng::derive(seed, "scenes");
        let mut ds = Dataset::default();
        for s in 0..scenes {
            let (scene, qa) = gen_scene(&mut rng, config)?;
            ds.pairs.push((scene.rgb, scene.ir));
            for (k, qa) in qa.into_iter().enumerate() {
                ds.samples.push(Sample {
                    id: format!("s{s:05}_q{k}"),
                    pair: s,
                    qa,
                });
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rgb(&self, sample: &Sample) -> &ImageBuf {
        &self.pairs[sample.pair].0
    }

    pub fn ir(&self, sample: &Sample) -> &ImageBuf {
        &self.pairs[sample.pair].1
    }

    /// Reads a manifest; image paths are resolved relative to its directory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset::default();
        let mut pair_index: HashMap<(String, String), usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Manifest { line: i + 1, detail };
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let modality: Modality = rec.modality_tag.parse().map_err(|e: Error| bad(e.to_string()))?;
            let question = Vocab.encode(&rec.question).map_err(|e| bad(e.to_string()))?;
            let mut answer = Vocab.encode(&rec.answer).map_err(|e| bad(e.to_string()))?;
            if answer.is_empty() {
                return Err(bad("empty answer".into()));
            }
            let binary = answer.len() == 1 && ["yes", "no"].contains(&rec.answer.trim().to_ascii_lowercase().as_str());
            answer.push(EOS);
            let key = (rec.rgb_path.clone(), rec.ir_path.clone());
            let pair = match pair_index.get(&key) {
                Some(&p) => p,
                None => {
                    let rgb = read_pnm(&root.join(&rec.rgb_path)).map_err(|e| bad(format!("{}: {e}", rec.rgb_path)))?;
                    let ir = read_pnm(&root.join(&rec.ir_path)).map_err(|e| bad(format!("{}: {e}", rec.ir_path)))?;
                    if rgb.channels() != 3 || ir.channels() != 1 {
                        return Err(bad("RGB must be P6 and IR must be P5".into()));
                    }
                    if (rgb.height(), rgb.width()) != (ir.height(), ir.width()) {
                        return Err(bad(format!(
                            "RGB is {}x{} but IR is {}x{}",
                            rgb.height(),
                            rgb.width(),
                            ir.height(),
                            ir.width()
                        )));
                    }
                    ds.pairs.push((rgb, ir));
                    pair_index.insert(key, ds.pairs.len() - 1);
                    ds.pairs.len() - 1
                }
            };
            ds.samples.push(Sample {
                id: rec.id,
                pair,
                qa: QaSample {
                    question,
                    answer,
                    modality,
                    binary,
                },
            });
        }
        Ok(ds)
    }

    /// Writes images as PPM/PGM next to a `manifest.jsonl`; returns its path.
    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        for (i, (rgb, ir)) in self.pairs.iter().enumerate() {
            write_pnm(&dir.join(format!("pair{i:05}_rgb.ppm")), rgb)?;
            write_pnm(&dir.join(format!("pair{i:05}_ir.pgm")), ir)?;
        }
        let mut out = String::new();
        for s in &self.samples {
            let rec = ManifestRecord {
                id: s.id.clone(),
                rgb_path: format!("pair{:05}_rgb.ppm", s.pair),
                ir_path: format!("pair{:05}_ir.pgm", s.pair),
                question: Vocab.decode(&s.qa.question)?,
                answer: Vocab.decode(&s.qa.answer)?,
                modality_tag: s.qa.modality.as_str().to_string(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::InvalidArgument(e.to_string()))?);
            out.push('\n');
        }
        let path = dir.join("manifest.jsonl");
        fs::write(&path, out)?;
        Ok(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    rgb_path: String,
    ir_path: String,
    question: String,
    answer: String,
    modality_tag: String,
}
