//! Feature datasets: the `NTCF` container, the planted-motif synthetic
//! generator and superframe segmentation.
//!
//! `NTCF` layout, all integers `u32` little-endian:
//!
//! ```text
//! "NTCF" version count C T H W K label_mode
//! per record: id_len id_bytes[id_len] f32[C*T*H*W] u8[K]
//! ```

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Task;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const NTCF_MAGIC: &[u8; 4] = b"NTCF";
pub const NTCF_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    MultiLabel,
    SingleLabel,
}

impl LabelMode {
    fn code(self) -> u32 {
        match self {
            LabelMode::MultiLabel => 0,
            LabelMode::SingleLabel => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(LabelMode::MultiLabel),
            1 => Some(LabelMode::SingleLabel),
            _ => None,
        }
    }

    pub fn task(self) -> Task {
        match self {
            LabelMode::MultiLabel => Task::MultiLabel,
            LabelMode::SingleLabel => Task::SingleLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `(C, T, H, W)` row-major.
    pub features: Vec<f32>,
    /// One byte per class, 0 or 1.
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub label_mode: LabelMode,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(channels: usize, timesteps: usize, height: usize, width: usize, classes: usize, label_mode: LabelMode) -> Self {
        Dataset {
            channels,
            timesteps,
            height,
            width,
            classes,
            label_mode,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.channels * self.timesteps * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != self.feature_len() {
                return Err(Error::config(format!(
                    "record {i} ({}) has {} feature values, expected {}",
                    r.id,
                    r.features.len(),
                    self.feature_len()
                )));
            }
            check_labels(&r.labels, self.classes, self.label_mode).map_err(|m| Error::config(format!("record {i} ({}): {m}", r.id)))?;
        }
        Ok(())
    }

    /// A dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..Dataset::new(self.channels, self.timesteps, self.height, self.width, self.classes, self.label_mode)
        }
    }

    /// Disjoint, exhaustive split: a seeded shuffle, the first
    /// `round(fraction * len)` records going to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    /// Features `(B, C, T, H, W)` and targets `(B, K, 1, 1, 1)` for `indices`.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let fl = self.feature_len();
        let mut x = Vec::with_capacity(indices.len() * fl);
        let mut y = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| Error::Usage(format!("record {i} out of range")))?;
            x.extend(r.features.iter().map(|&v| S::of(v as f64)));
            y.extend(r.labels.iter().map(|&l| if l != 0 { S::one() } else { S::zero() }));
        }
        let n = indices.len();
        Ok((
            Tensor::from_vec(Shape::new(n, self.channels, self.timesteps, self.height, self.width), x)?,
            Tensor::from_vec(Shape::matrix(n, self.classes), y)?,
        ))
    }

    pub fn features<S: Scalar>(&self) -> Result<Tensor<S>> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&all)?.0)
    }

    pub fn label_matrix(&self) -> Vec<Vec<bool>> {
        self.records.iter().map(|r| r.labels.iter().map(|&l| l != 0).collect()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(36 + self.len() * (4 + 4 * self.feature_len() + self.classes));
        out.extend_from_slice(NTCF_MAGIC);
        for v in [
            NTCF_VERSION,
            to_u32(self.len(), "record count")?,
            to_u32(self.channels, "C")?,
            to_u32(self.timesteps, "T")?,
            to_u32(self.height, "H")?,
            to_u32(self.width, "W")?,
            to_u32(self.classes, "K")?,
            self.label_mode.code(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&to_u32(r.id.len(), "id length")?.to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            for v in &r.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&r.labels);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "NTCF");
        let magic = r.take(4, "magic")?;
        if magic != NTCF_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"NTCF\"")));
        }
        let version = r.u32("version")?;
        if version != NTCF_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}, expected {NTCF_VERSION}")));
        }
        let count = r.u32("record count")? as usize;
        let dims: Vec<usize> = (0..5).map(|_| r.u32("header").map(|v| v as usize)).collect::<Result<_>>()?;
        let (c, t, h, w, k) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let mode_at = r.offset();
        let mode = r.u32("label mode")?;
        let label_mode = LabelMode::from_code(mode).ok_or_else(|| r.error_at(mode_at, format!("unknown label mode {mode}")))?;
        let fl = c
            .checked_mul(t)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| r.error_at(12, "feature dimensions overflow".into()))?;
        let mut ds = Dataset::new(c, t, h, w, k, label_mode);
        // a count larger than the data allows fails on truncation below
        ds.records.reserve(count.min(bytes.len() / 4 + 1));
        for i in 0..count {
            let id_len = r.u32("id length")? as usize;
            let id_at = r.offset();
            let id = std::str::from_utf8(r.take(id_len, "id")?)
                .map_err(|_| r.error_at(id_at, format!("record {i} id is not UTF-8")))?
                .to_string();
            let raw = r.take(
                fl.checked_mul(4).ok_or_else(|| r.error_at(12, "feature dimensions overflow".into()))?,
                "features",
            )?;
            let features = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let lab_at = r.offset();
            let labels = r.take(k, "labels")?.to_vec();
            check_labels(&labels, k, label_mode).map_err(|m| r.error_at(lab_at, format!("record {i}: {m}")))?;
            ds.records.push(FeatureRecord { id, features, labels });
        }
        if r.remaining() != 0 {
            return Err(r.error_at(
                r.offset(),
                format!("{} trailing bytes after {count} records; header dimensions disagree with the data", r.remaining()),
            ));
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in 32 bits")))
}

fn check_labels(labels: &[u8], k: usize, mode: LabelMode) -> std::result::Result<(), String> {
    if labels.len() != k {
        return Err(format!("{} labels, expected {k}", labels.len()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err("label bytes must be 0 or 1".into());
    }
    if mode == LabelMode::SingleLabel && labels.iter().filter(|&&l| l == 1).count() != 1 {
        return Err("single-label record must have exactly one positive".into());
    }
    Ok(())
}

/// Bounds-checked little-endian reader reporting byte offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Reader { bytes, pos: 0, format }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Format {
            format: self.format,
            offset: offset as u64,
            message,
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                format!(
                    "truncated {what}: expected {n} bytes, found {} (file length {})",
                    self.remaining(),
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// A bump train: `amplitude` for the first `width` steps of every period and
/// zero otherwise, over `duration` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motif {
    pub class: usize,
    pub channels: Vec<usize>,
    pub period: usize,
    pub width: usize,
    pub duration: usize,
    pub amplitude: f64,
}

impl Motif {
    /// Value at step `i` after the onset.
    pub fn value(&self, i: usize) -> f64 {
        if i % self.period < self.width {
            self.amplitude
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that each non-primary class is also active (multi-label).
    pub overlap: f64,
    pub noise: f64,
    pub seed: u64,
    pub label_mode: LabelMode,
    /// Empty selects [`SynthSpec::default_motifs`].
    pub motifs: Vec<Motif>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            samples_per_class: 125,
            channels: 16,
            timesteps: 32,
            height: 1,
            width: 1,
            overlap: 0.3,
            noise: 1.0,
            seed: 0,
            label_mode: LabelMode::MultiLabel,
            motifs: Vec::new(),
        }
    }
}

impl SynthSpec {
    /// Class `k` gets three unit-width bumps spaced `2k + 3` steps apart on a
    /// shared band of half the channels. Every class carries the same energy
    /// in the same channels, so only bump spacing separates them.
    pub fn default_motifs(&self) -> Vec<Motif> {
        let band: Vec<usize> = (0..self.channels.div_ceil(2)).collect();
        (0..self.classes)
            .map(|k| {
                let period = 2 * k + 3;
                Motif {
                    class: k,
                    channels: band.clone(),
                    period,
                    width: 1,
                    duration: (2 * period + 1).min(self.timesteps),
                    amplitude: 1.0,
                }
            })
            .collect()
    }

    pub fn motif_library(&self) -> Vec<Motif> {
        if self.motifs.is_empty() {
            self.default_motifs()
        } else {
            self.motifs.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::schema(format!("/{field}"), msg));
        if self.classes == 0 {
            return bad("classes", "must be at least 1".into());
        }
        if self.channels == 0 || self.timesteps == 0 || self.height == 0 || self.width == 0 {
            return bad("channels", "feature dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap", format!("{} outside [0, 1]", self.overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("{} is not a valid standard deviation", self.noise));
        }
        for (i, m) in self.motif_library().iter().enumerate() {
            let at = |f: &str| format!("motifs/{i}/{f}");
            if m.class >= self.classes {
                return bad(&at("class"), format!("class {} out of range", m.class));
            }
            if m.period < 2 {
                return bad(&at("period"), format!("period {} below 2", m.period));
            }
            if m.width == 0 || m.width >= m.period {
                return bad(&at("width"), format!("bump width {} outside [1, {})", m.width, m.period));
            }
            if m.duration == 0 || m.duration > self.timesteps {
                return bad(
                    &at("duration"),
                    format!("motif of duration {} does not fit in {} timesteps", m.duration, self.timesteps),
                );
            }
            if m.channels.iter().any(|&c| c >= self.channels) {
                return bad(&at("channels"), "channel index out of range".into());
            }
        }
        Ok(())
    }
}

/// Planted-motif dataset. Sample `i` has primary class `i mod K`; in
/// multi-label mode every other class is added with probability `overlap`.
/// Each active class's motifs are added at uniform onsets on top of
/// Gaussian noise, identically at every spatial position.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let motifs = spec.motif_library();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let (c, t, hw) = (spec.channels, spec.timesteps, spec.height * spec.width);
    let mut ds = Dataset::new(c, t, spec.height, spec.width, spec.classes, spec.label_mode);
    let total = spec.classes * spec.samples_per_class;
    for i in 0..total {
        let primary = i % spec.classes;
        let mut labels = vec![0u8; spec.classes];
        labels[primary] = 1;
        if spec.label_mode == LabelMode::MultiLabel {
            for (k, l) in labels.iter_mut().enumerate() {
                if k != primary && rng.random_bool(spec.overlap) {
                    *l = 1;
                }
            }
        }
        let mut x: Vec<f64> = if spec.noise > 0.0 {
            (0..c * t * hw).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; c * t * hw]
        };
        for m in motifs.iter().filter(|m| labels[m.class] == 1) {
            let onset = rng.random_range(0..=t - m.duration);
            for &ch in &m.channels {
                for s in 0..m.duration {
                    let base = (ch * t + onset + s) * hw;
                    for v in &mut x[base..base + hw] {
                        *v += m.value(s);
                    }
                }
            }
        }
        ds.records.push(FeatureRecord {
            id: format!("synth-{i:05}"),
            features: x.into_iter().map(|v| v as f32).collect(),
            labels,
        });
    }
    Ok(ds)
}

/// Index ranges of the 8-frame superframes for `timesteps` equal segments
/// of a `frames`-frame video, each centred in its segment.
pub fn segment_video_frames(frames: usize, timesteps: usize) -> Result<Vec<Range<usize>>> {
    const SUPERFRAME: usize = 8;
    if timesteps == 0 {
        return Err(Error::config("at least one segment is required"));
    }
    if frames < SUPERFRAME * timesteps {
        return Err(Error::config(format!(
            "video of {frames} frames is too short for {timesteps} superframes of {SUPERFRAME}"
        )));
    }
    Ok((0..timesteps)
        .map(|i| {
            let lo = i * frames / timesteps;
            let hi = (i + 1) * frames / timesteps;
            let start = lo + (hi - lo - SUPERFRAME) / 2;
            start..start + SUPERFRAME
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            samples_per_class: 5,
            timesteps: 16,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noise_free_single_motif_is_exact() {
        let m = Motif {
            class: 0,
            channels: vec![1],
            period: 4,
            width: 2,
            duration: 6,
            amplitude: 2.0,
        };
        let spec = SynthSpec {
            classes: 1,
            samples_per_class: 3,
            channels: 3,
            timesteps: 10,
            noise: 0.0,
            motifs: vec![m.clone()],
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for r in &ds.records {
            let ch1 = &r.features[10..20];
            let onset = ch1.iter().position(|&v| v != 0.0).unwrap();
            let want: Vec<f32> = (0..10)
                .map(|t| if (onset..onset + 6).contains(&t) { m.value(t - onset) as f32 } else { 0.0 })
                .collect();
            assert_eq!(ch1, &want[..]);
            assert!(r.features[..10].iter().chain(&r.features[20..]).all(|&v| v == 0.0));
            assert_eq!(want[onset..onset + 6], [2.0, 2.0, 0.0, 0.0, 2.0, 2.0]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small_spec(3)).unwrap().to_bytes().unwrap();
        let b = generate_synthetic(&small_spec(3)).unwrap().to_bytes().unwrap();
        let c = generate_synthetic(&small_spec(4)).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn motif_longer_than_sequence_rejected() {
        let spec = SynthSpec {
            motifs: vec![Motif {
                class: 0,
                channels: vec![0],
                period: 2,
                width: 1,
                duration: 40,
                amplitude: 1.0,
            }],
            ..SynthSpec::default()
        };
        let err = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(err.contains("duration"), "{err}");
    }

    #[test]
    fn label_marginals_match_overlap() {
        let spec = SynthSpec {
            samples_per_class: 300,
            timesteps: 8,
            channels: 2,
            overlap: 0.3,
            seed: 17,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut hits = 0usize;
        let mut trials = 0usize;
        for (i, r) in ds.records.iter().enumerate() {
            for k in 0..spec.classes {
                if k != i % spec.classes {
                    trials += 1;
                    hits += r.labels[k] as usize;
                }
            }
        }
        let p = spec.overlap;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!(((hits as f64) - trials as f64 * p).abs() < 3.0 * sd, "{hits}/{trials}");
    }

    #[test]
    fn round_trip_and_errors() {
        let ds = generate_synthetic(&small_spec(1)).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);

        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));

        // claim one fewer timestep than the records hold
        let mut bad = bytes.clone();
        let t = u32::from_le_bytes(bad[16..20].try_into().unwrap());
        bad[16..20].copy_from_slice(&(t - 1).to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let ds = generate_synthetic(&small_spec(2)).unwrap();
        let (a, b) = ds.split(0.5, 9).unwrap();
        assert_eq!(a.len() + b.len(), ds.len());
        let mut ids: Vec<_> = a.records.iter().chain(&b.records).map(|r| r.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), ds.len());
    }

    #[test]
    fn segmentation_examples() {
        let r = segment_video_frames(256, 32).unwrap();
        assert_eq!(r.len(), 32);
        assert!(r.iter().enumerate().all(|(i, x)| x.start == 8 * i && x.len() == 8));
        let r = segment_video_frames(320, 32).unwrap();
        assert!(r.iter().enumerate().all(|(i, x)| x.start == 10 * i + 1 && x.len() == 8));
        assert!(segment_video_frames(255, 32).is_err());
    }

    proptest! {
        #[test]
        fn segments_stay_inside(t in 1usize..64, extra in 0usize..500) {
            let frames = 8 * t + extra;
            let r = segment_video_frames(frames, t).unwrap();
            prop_assert_eq!(r.iter().map(|x| x.len()).sum::<usize>(), 8 * t);
            for (i, x) in r.iter().enumerate() {
                prop_assert!(x.start >= i * frames / t && x.end <= (i + 1) * frames / t);
            }
        }
    }
}
