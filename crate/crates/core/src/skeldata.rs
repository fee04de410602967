//! Skeleton datasets: on-disk format, validation, frame resampling,
//! train/test splitting and synthetic stand-ins for the motion-capture corpora.
//!
//! A sample file is plain text:
//!
//! ```text
//! T J fps label
//! x0 y0 z0 x1 y1 z1 ... (3·J reals)      # frame 0
//! ...                                     # T lines in total
//! ```
//!
//! A manifest is TOML naming the dataset, its joint count, frame rate,
//! label set and sample files (paths relative to the manifest).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frame count every sequence is brought to before encoding.
pub const TARGET_FRAMES: usize = 64;

/// A `T × J × 3` motion recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub sample_id: String,
    pub dataset_id: String,
    pub label: String,
    pub fps: f64,
    joint_count: usize,
    positions: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(
        sample_id: impl Into<String>,
        dataset_id: impl Into<String>,
        label: impl Into<String>,
        fps: f64,
        joint_count: usize,
        positions: Vec<f64>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if joint_count == 0 {
            return Err(Error::param(format!(
                "{sample_id}: joint count must be positive"
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::param(format!("{sample_id}: fps must be positive")));
        }
        if !positions.len().is_multiple_of(joint_count * 3) {
            return Err(Error::param(format!(
                "{sample_id}: {} coordinates do not form whole frames of {joint_count} joints",
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(format!("{sample_id}: non-finite coordinate")));
        }
        Ok(Self {
            sample_id,
            dataset_id: dataset_id.into(),
            label: label.into(),
            fps,
            joint_count,
            positions,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.positions.len() / (self.joint_count * 3)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    /// The `3·J` coordinates of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.joint_count * 3;
        &self.positions[t * w..(t + 1) * w]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Positions as a `(T·J, 3)` matrix, frame-major.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.frame_count() * self.joint_count, 3],
            self.positions.clone(),
        )
    }

    fn with_frames(&self, indices: impl Iterator<Item = usize>) -> Self {
        let mut positions = Vec::new();
        for t in indices {
            positions.extend_from_slice(self.frame(t));
        }
        Self {
            positions,
            ..self.clone()
        }
    }
}

/// Brings a sequence to `target` frames.
///
/// Longer sequences keep frames `floor(k·T/target)`; shorter ones are
/// extended by repeating the sequence cyclically from its first frame.
pub fn resample_to_frames(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let t = seq.frame_count();
    if t == 0 {
        return Err(Error::EmptySequence(seq.sample_id.clone()));
    }
    if target == 0 {
        return Err(Error::param("target frame count must be positive"));
    }
    Ok(if t > target {
        seq.with_frames((0..target).map(|k| k * t / target))
    } else {
        seq.with_frames((0..target).map(|k| k % t))
    })
}

/// Frame indices [`resample_to_frames`] selects, exposed for inspection.
pub fn resample_indices(frames: usize, target: usize) -> Vec<usize> {
    if frames > target {
        (0..target).map(|k| k * frames / target).collect()
    } else {
        (0..target).map(|k| k % frames.max(1)).collect()
    }
}

/// Per-coordinate standardisation `(x − mean) / std`, fitted over every
/// frame of a set of same-topology sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl CoordinateNorm {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a SkeletonSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut frames = 0usize;
        for seq in seqs {
            let w = seq.joint_count * 3;
            if sum.is_empty() {
                sum = vec![0.0; w];
                sq = vec![0.0; w];
            } else if sum.len() != w {
                return Err(Error::param(
                    "coordinate statistics need sequences of one joint count",
                ));
            }
            for t in 0..seq.frame_count() {
                for (k, &v) in seq.frame(t).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            frames += seq.frame_count();
        }
        if frames == 0 {
            return Err(Error::param(
                "coordinate statistics need at least one frame",
            ));
        }
        let n = frames as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| 1.0 / (q / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        let w = seq.joint_count * 3;
        if w != self.mean.len() {
            return Err(Error::param(format!(
                "{}: normalisation fitted for {} joints, sequence has {}",
                seq.sample_id,
                self.mean.len() / 3,
                seq.joint_count
            )));
        }
        let positions = seq
            .positions
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % w]) * self.inv_std[i % w])
            .collect();
        Ok(SkeletonSequence {
            positions,
            ..seq.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub joint_count: usize,
    pub fps: f64,
    pub labels: Vec<String>,
    /// Bone list; a default tree is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::param(format!("{}: label set is empty", self.name)));
        }
        let unique: BTreeSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(Error::param(format!("{}: duplicate labels", self.name)));
        }
        if let Some(bad) = self
            .labels
            .iter()
            .find(|l| l.is_empty() || l.contains(char::is_whitespace))
        {
            return Err(Error::param(format!(
                "{}: label {bad:?} must be a single non-empty word",
                self.name
            )));
        }
        if self.joint_count == 0 {
            return Err(Error::param(format!(
                "{}: joint_count must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn edges_or_default(&self) -> Vec<(usize, usize)> {
        self.edges
            .clone()
            .unwrap_or_else(|| default_edges(self.joint_count))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }
}

/// Bones of a binary tree rooted at joint 0: parent of `i` is `(i - 1) / 2`.
pub fn default_edges(joints: usize) -> Vec<(usize, usize)> {
    (1..joints).map(|i| ((i - 1) / 2, i)).collect()
}

/// A manifest together with its validated sequences, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn sequence(&self, sample_id: &str) -> Option<&SkeletonSequence> {
        self.sequences.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn description(&self, sample_id: &str) -> Option<&str> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.id == sample_id)
            .and_then(|s| s.description.as_deref())
    }

    /// Writes the manifest and one sample file per sequence under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        for (entry, seq) in self.manifest.samples.iter().zip(&self.sequences) {
            let path = dir.join(&entry.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_sample(&path, seq)?;
        }
        let manifest_path = dir.join("manifest.toml");
        fs::write(&manifest_path, self.manifest.to_toml())?;
        Ok(manifest_path)
    }
}

pub fn format_sample(seq: &SkeletonSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {}",
        seq.frame_count(),
        seq.joint_count,
        seq.fps,
        seq.label
    );
    for t in 0..seq.frame_count() {
        let line: Vec<String> = seq.frame(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_sample(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    fs::write(path, format_sample(seq))?;
    Ok(())
}

/// Parses one sample file. The sample id defaults to the file stem.
pub fn read_sample(
    path: &Path,
    dataset_id: &str,
    sample_id: Option<&str>,
) -> Result<SkeletonSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    let id = sample_id
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    parse_sample(&text, dataset_id, &id)
        .map_err(|reason| Error::load(path, format!("sample {id}: {reason}")))
}

fn parse_sample(
    text: &str,
    dataset_id: &str,
    sample_id: &str,
) -> std::result::Result<SkeletonSequence, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("missing header line")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [t, j, fps, label] = fields.as_slice() else {
        return Err(format!("header must be `T J fps label`, got {header:?}"));
    };
    let t: usize = t.parse().map_err(|_| format!("bad frame count {t:?}"))?;
    let j: usize = j.parse().map_err(|_| format!("bad joint count {j:?}"))?;
    let fps: f64 = fps.parse().map_err(|_| format!("bad fps {fps:?}"))?;
    let mut positions = Vec::with_capacity(t * j * 3);
    let mut seen = 0;
    for (n, line) in lines.enumerate() {
        let before = positions.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format!("frame {n}: bad coordinate {tok:?}"))?;
            positions.push(v);
        }
        if positions.len() - before != 3 * j {
            return Err(format!(
                "frame {n}: expected {} coordinates, got {}",
                3 * j,
                positions.len() - before
            ));
        }
        seen += 1;
    }
    if seen != t {
        return Err(format!("header declares {t} frames, file has {seen}"));
    }
    SkeletonSequence::new(sample_id, dataset_id, *label, fps, j, positions)
        .map_err(|e| e.to_string())
}

/// Loads and validates a manifest and every sample it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text =
        fs::read_to_string(manifest_path).map_err(|e| Error::load(manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::load(manifest_path, e.to_string()))?;
    manifest
        .validate()
        .map_err(|e| Error::load(manifest_path, e.to_string()))?;
    if manifest.samples.is_empty() {
        return Err(Error::load(manifest_path, "no samples"));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ids = BTreeSet::new();
    let mut sequences = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if !ids.insert(entry.id.as_str()) {
            return Err(Error::load(
                manifest_path,
                format!("duplicate sample id {}", entry.id),
            ));
        }
        let path = root.join(&entry.path);
        let seq = read_sample(&path, &manifest.name, Some(&entry.id))?;
        let fail =
            |reason: String| Err(Error::load(&path, format!("sample {}: {reason}", entry.id)));
        if seq.joint_count != manifest.joint_count {
            return fail(format!(
                "has {} joints, manifest declares {}",
                seq.joint_count, manifest.joint_count
            ));
        }
        if manifest.label_index(&entry.label).is_none() {
            return fail(format!("unknown label {:?}", entry.label));
        }
        if seq.label != entry.label {
            return fail(format!(
                "file label {:?} disagrees with manifest label {:?}",
                seq.label, entry.label
            ));
        }
        if seq.frame_count() != entry.frames {
            return fail(format!(
                "has {} frames, manifest declares {}",
                seq.frame_count(),
                entry.frames
            ));
        }
        sequences.push(seq);
    }
    Ok(Dataset {
        manifest,
        sequences,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            seed,
        }
    }
}

/// Seeded shuffle of sample ids into `round(f·N)` training and `N − round(f·N)` test ids.
pub fn split_train_test(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(Vec<String>, Vec<String>)> {
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    split_ids(&ids, spec)
}

pub fn split_ids(ids: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction {} not in (0, 1)",
            spec.train_fraction
        )));
    }
    if ids.len() < 5 {
        return Err(Error::Split(format!(
            "need at least 5 samples, have {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * ids.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub name: String,
    pub joint_count: usize,
    pub fps: f64,
    pub labels: Vec<String>,
    pub samples_per_label: usize,
    pub seed: u64,
    /// Inclusive range of raw frame counts.
    pub frame_range: (usize, usize),
}

pub const EMILYA_LABELS: [&str; 8] = [
    "Neutral", "Joy", "Anger", "Panic", "Fear", "Anxiety", "Sadness", "Shame",
];
pub const KDAE_LABELS: [&str; 7] = [
    "Happiness",
    "Sadness",
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Surprise",
];

impl SynthProfile {
    /// Named shapes of the three reference corpora: 28 joints at 120 Hz with
    /// eight emotions; 24 joints at 125 Hz and 25 joints at 30 Hz with seven.
    pub fn named(name: &str, samples_per_label: usize, seed: u64) -> Result<Self> {
        let (joints, fps, labels): (usize, f64, &[&str]) = match name {
            "emilya-like" => (28, 120.0, &EMILYA_LABELS),
            "kdae-like" => (24, 125.0, &KDAE_LABELS),
            "egbm-like" => (25, 30.0, &KDAE_LABELS),
            other => {
                return Err(Error::param(format!(
                    "unknown profile {other:?} (expected emilya-like, kdae-like or egbm-like)"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            joint_count: joints,
            fps,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            samples_per_label,
            seed,
            frame_range: (40, 120),
        })
    }

    pub fn custom(
        name: &str,
        joint_count: usize,
        labels: &[&str],
        samples_per_label: usize,
        seed: u64,
    ) -> Self {
        Self {
            name: name.to_string(),
            joint_count,
            fps: 30.0,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            samples_per_label,
            seed,
            frame_range: (40, 120),
        }
    }
}

/// Per-label motion signature: oscillation amplitude (m), frequency (Hz)
/// and the residue class of joints that carry the full amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSignature {
    pub amplitude: f64,
    pub frequency: f64,
    pub joint_group: usize,
}

pub fn motion_signature(label_index: usize) -> MotionSignature {
    MotionSignature {
        amplitude: 0.04 + 0.03 * label_index as f64,
        frequency: 0.5 + 0.25 * label_index as f64,
        joint_group: label_index % 3,
    }
}

const DESCRIPTION_CUES: [(&str, [&str; 3]); 11] = [
    (
        "Neutral",
        [
            "the arms hang loosely",
            "the steps keep a steady rhythm",
            "the posture stays upright and relaxed",
        ],
    ),
    (
        "Joy",
        [
            "the arms swing widely",
            "the steps are light and bouncy",
            "the chest is open and lifted",
        ],
    ),
    (
        "Happiness",
        [
            "the arms swing widely",
            "the steps are light and bouncy",
            "the chest is open and lifted",
        ],
    ),
    (
        "Anger",
        [
            "the fists are clenched",
            "the movements are abrupt and forceful",
            "the body leans forward",
        ],
    ),
    (
        "Panic",
        [
            "the arms flail rapidly",
            "the head turns back and forth",
            "the steps are hurried and irregular",
        ],
    ),
    (
        "Fear",
        [
            "the body shrinks backward",
            "the arms are raised to protect the face",
            "the steps retreat",
        ],
    ),
    (
        "Anxiety",
        [
            "the hands fidget",
            "the weight shifts from foot to foot",
            "the shoulders are tense",
        ],
    ),
    (
        "Sadness",
        [
            "the head hangs low",
            "the shoulders droop",
            "the movements are slow and heavy",
        ],
    ),
    (
        "Shame",
        [
            "the gaze is lowered",
            "the body turns away",
            "the arms fold close to the body",
        ],
    ),
    (
        "Disgust",
        [
            "the head pulls away",
            "the hand pushes outward",
            "the upper body recoils",
        ],
    ),
    (
        "Surprise",
        [
            "the arms jerk upward",
            "the body stops suddenly",
            "the head lifts quickly",
        ],
    ),
];

/// A short action description built from label-specific cues.
pub fn synth_description(label: &str, variant: usize) -> String {
    let cues = DESCRIPTION_CUES
        .iter()
        .find(|(l, _)| *l == label)
        .map(|(_, c)| *c)
        .unwrap_or(["the body moves", "the arms move", "the head moves"]);
    let a = cues[variant % 3];
    let b = cues[(variant + 1) % 3];
    let mut s = format!("{a} and {b}.");
    s[..1].make_ascii_uppercase();
    s
}

/// Deterministic synthetic dataset whose classes differ in posture,
/// oscillation amplitude, frequency and which joints move most.
pub fn synthesize_dataset(profile: &SynthProfile) -> Result<Dataset> {
    let j = profile.joint_count;
    if j < 2 {
        return Err(Error::param("synthetic skeletons need at least 2 joints"));
    }
    if profile.labels.is_empty() {
        return Err(Error::param("synthetic profile needs at least one label"));
    }
    if profile.samples_per_label == 0 {
        return Err(Error::param("samples_per_label must be positive"));
    }
    let (lo, hi) = profile.frame_range;
    if lo == 0 || lo > hi {
        return Err(Error::param(format!("bad frame range {lo}..={hi}")));
    }
    let manifest = DatasetManifest {
        name: profile.name.clone(),
        joint_count: j,
        fps: profile.fps,
        labels: profile.labels.clone(),
        edges: None,
        samples: Vec::new(),
    };
    manifest.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    // Shared rest pose and per-joint oscillation axes.
    let edges = default_edges(j);
    let mut rest = vec![[0.0f64; 3]; j];
    rest[0] = [0.0, 1.0, 0.0];
    for &(parent, child) in &edges {
        let off = [
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.25..-0.05),
            rng.random_range(-0.1..0.1),
        ];
        rest[child] = [
            rest[parent][0] + off[0],
            rest[parent][1] + off[1],
            rest[parent][2] + off[2],
        ];
    }
    let axes: Vec<[f64; 3]> = (0..j)
        .map(|_| {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();

    // Label-specific posture shift of every joint.
    let postures: Vec<Vec<[f64; 3]>> = (0..profile.labels.len())
        .map(|_| {
            (0..j)
                .map(|_| {
                    [
                        rng.random_range(-0.08..0.08),
                        rng.random_range(-0.08..0.08),
                        rng.random_range(-0.08..0.08),
                    ]
                })
                .collect()
        })
        .collect();

    let mut manifest = manifest;
    let mut sequences = Vec::new();
    for (li, label) in profile.labels.iter().enumerate() {
        let sig = motion_signature(li);
        let posture = &postures[li];
        for s in 0..profile.samples_per_label {
            let id = format!("{}-{:04}", profile.name, li * profile.samples_per_label + s);
            let frames = rng.random_range(lo..=hi);
            let amp = sig.amplitude * rng.random_range(0.95..1.05);
            let freq = sig.frequency * rng.random_range(0.95..1.05);
            let phases: Vec<f64> = (0..j)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let mut positions = Vec::with_capacity(frames * j * 3);
            for t in 0..frames {
                let time = t as f64 / profile.fps;
                for jj in 0..j {
                    let gain = if jj % 3 == sig.joint_group { 1.0 } else { 0.3 };
                    let disp =
                        amp * gain * (std::f64::consts::TAU * freq * time + phases[jj]).sin();
                    for d in 0..3 {
                        let noise = rng.random_range(-0.002..0.002);
                        positions.push(rest[jj][d] + posture[jj][d] + axes[jj][d] * disp + noise);
                    }
                }
            }
            let seq = SkeletonSequence::new(&id, &profile.name, label, profile.fps, j, positions)?;
            manifest.samples.push(SampleEntry {
                id: id.clone(),
                path: PathBuf::from(format!("samples/{id}.txt")),
                label: label.clone(),
                frames,
                description: Some(synth_description(label, s)),
            });
            sequences.push(seq);
        }
    }
    Ok(Dataset {
        manifest,
        sequences,
    })
}

/// Mean speed (m/s) of every joint, the feature used by the separability probe.
pub fn joint_speed_profile(seq: &SkeletonSequence) -> Vec<f64> {
    let j = seq.joint_count;
    let t = seq.frame_count();
    let mut speeds = vec![0.0; j];
    if t < 2 {
        return speeds;
    }
    for f in 1..t {
        let (a, b) = (seq.frame(f - 1), seq.frame(f));
        for (jj, speed) in speeds.iter_mut().enumerate() {
            let d: f64 = (0..3)
                .map(|k| (b[jj * 3 + k] - a[jj * 3 + k]).powi(2))
                .sum::<f64>()
                .sqrt();
            *speed += d * seq.fps;
        }
    }
    speeds.iter_mut().for_each(|s| *s /= (t - 1) as f64);
    speeds
}

/// Training accuracy of a nearest-centroid classifier on joint speed profiles.
pub fn nearest_centroid_accuracy(dataset: &Dataset) -> f64 {
    let feats: Vec<(String, Vec<f64>)> = dataset
        .sequences
        .iter()
        .map(|s| (s.label.clone(), joint_speed_profile(s)))
        .collect();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, f) in &feats {
        let e = sums
            .entry(label.as_str())
            .or_insert_with(|| (vec![0.0; f.len()], 0));
        e.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let centroids: Vec<(&str, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = feats
        .iter()
        .filter(|(label, f)| {
            let best = centroids
                .iter()
                .map(|(l, c)| {
                    let d: f64 = c.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
                    (d, *l)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, l)| l);
            best == Some(label.as_str())
        })
        .count();
    correct as f64 / feats.len() as f64
}
