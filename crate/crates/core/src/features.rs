//! Feature sequences, the KNNF container, and unit databases.
//!
//! KNNF layout (little-endian):
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `b"KNNF"`            |
//! | 4..8   | `u32` version (= 1)        |
//! | 8..12  | `u32` frame count T        |
//! | 12..16 | `u32` dimension D          |
//! | 16..20 | `f32` frame rate in Hz     |
//! | 20..   | T×D `f32` payload, row-major |

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel;

pub const MAGIC: [u8; 4] = *b"KNNF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// WavLM-Large emits one frame per 20 ms at 16 kHz.
pub const DEFAULT_FRAME_RATE_HZ: f32 = 50.0;

/// Rows with an L2 norm below this cannot take part in cosine retrieval.
pub const MIN_NORM: f64 = 1e-8;

/// One utterance's features: T frames of D dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    dim: usize,
    frame_rate_hz: f32,
    source_id: String,
}

impl FeatureSequence {
    /// Builds a sequence from a row-major T×D buffer.
    pub fn new(
        frames: Vec<f32>,
        dim: usize,
        frame_rate_hz: f32,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let n = frames.len().checked_div(dim).unwrap_or(0);
        if dim == 0 || n == 0 {
            return Err(Error::EmptyShape { frames: n, dim });
        }
        if frames.len() != n * dim {
            return Err(Error::InvalidConfig(format!(
                "buffer of {} values is not a multiple of D={dim}",
                frames.len()
            )));
        }
        check_frame_rate(frame_rate_hz)?;
        check_finite(&frames, dim)?;
        Ok(FeatureSequence {
            frames,
            dim,
            frame_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(
        rows: &[R],
        frame_rate_hz: f32,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut frames = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            frames.extend_from_slice(r);
        }
        Self::new(frames, dim, frame_rate_hz, source_id)
    }

    /// Number of frames T.
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    /// Always false; sequences hold at least one frame.
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.frame_rate_hz
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> std::slice::ChunksExact<'_, f32> {
        self.frames.chunks_exact(self.dim)
    }

    /// Row-major T×D values.
    pub fn as_slice(&self) -> &[f32] {
        &self.frames
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.frames
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz as f64
    }
}

fn check_frame_rate(rate: f32) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidFrameRate(rate))
    }
}

fn check_finite(values: &[f32], dim: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            frame: i / dim,
            dim: i % dim,
        }),
        None => Ok(()),
    }
}

/// Serializes a sequence to KNNF bytes.
pub fn encode(seq: &FeatureSequence) -> Result<Vec<u8>> {
    check_finite(&seq.frames, seq.dim)?;
    let t = u32::try_from(seq.len())
        .map_err(|_| Error::InvalidConfig(format!("T={} exceeds u32", seq.len())))?;
    let d = u32::try_from(seq.dim)
        .map_err(|_| Error::InvalidConfig(format!("D={} exceeds u32", seq.dim)))?;
    let mut out = Vec::with_capacity(HEADER_LEN + seq.frames.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&seq.frame_rate_hz.to_le_bytes());
    for v in &seq.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses KNNF bytes. Every check happens before any value is trusted.
pub fn decode(bytes: &[u8], source_id: impl Into<String>) -> Result<FeatureSequence> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = le_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let t = le_u32(&bytes[8..12]) as usize;
    let d = le_u32(&bytes[12..16]) as usize;
    if t == 0 || d == 0 {
        return Err(Error::EmptyShape { frames: t, dim: d });
    }
    let rate = f32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]);
    check_frame_rate(rate)?;
    let expected = HEADER_LEN as u64 + 4 * t as u64 * d as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingBytes { expected, actual });
    }
    let frames: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureSequence::new(frames, d, rate, source_id)
}

/// Writes `seq` to `path` in KNNF format. Nothing is written if `seq` fails
/// validation.
pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a KNNF file. The sequence's `source_id` is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, file_stem(path))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// A contiguous run of database rows that came from one source utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub source_id: String,
    pub start: usize,
    pub len: usize,
}

/// Where a database row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance<'a> {
    pub source_id: &'a str,
    pub frame_index: usize,
}

/// The retrieval corpus: target-speaker frames concatenated in utterance
/// order, with per-row provenance and precomputed squared L2 norms.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDatabase {
    units: Vec<f32>,
    dim: usize,
    sq_norms: Vec<f64>,
    // (utterance index, frame index within that utterance) per row
    provenance: Vec<(u32, u32)>,
    utterances: Vec<Utterance>,
    frame_rate_hz: f32,
    speaker_id: String,
}

impl UnitDatabase {
    /// Concatenates sequences in the given order.
    ///
    /// All sequences must share D and frame rate, and every frame must have
    /// an L2 norm of at least [`MIN_NORM`]; offending frames are reported,
    /// never dropped.
    pub fn from_sequences<I>(sequences: I, speaker_id: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = FeatureSequence>,
    {
        let mut it = sequences.into_iter().peekable();
        let first = it.peek().ok_or(Error::Empty("no sequences"))?;
        let dim = first.dim;
        let rate = first.frame_rate_hz;

        let mut db = UnitDatabase {
            units: Vec::new(),
            dim,
            sq_norms: Vec::new(),
            provenance: Vec::new(),
            utterances: Vec::new(),
            frame_rate_hz: rate,
            speaker_id: speaker_id.into(),
        };
        for seq in it {
            if seq.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: seq.dim,
                });
            }
            if seq.frame_rate_hz.to_bits() != rate.to_bits() {
                return Err(Error::FrameRateMismatch {
                    expected: rate,
                    found: seq.frame_rate_hz,
                });
            }
            db.push_frames(&seq.source_id, seq.frames().take(seq.len()))?;
        }
        Ok(db)
    }

    fn push_frames<'a>(
        &mut self,
        source_id: &str,
        frames: impl Iterator<Item = &'a [f32]>,
    ) -> Result<()> {
        let utt = self.utterances.len();
        let start = self.sq_norms.len();
        for (i, frame) in frames.enumerate() {
            let sq = kernel::dot(frame, frame);
            if !(sq.sqrt() >= MIN_NORM) {
                return Err(Error::ZeroNormFrame {
                    source_id: source_id.to_owned(),
                    frame: i,
                });
            }
            self.units.extend_from_slice(frame);
            self.sq_norms.push(sq);
            self.provenance.push((utt as u32, i as u32));
        }
        self.utterances.push(Utterance {
            source_id: source_id.to_owned(),
            start,
            len: self.sq_norms.len() - start,
        });
        Ok(())
    }

    /// Number of units N.
    pub fn len(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.frame_rate_hz
    }

    pub fn speaker_id(&self) -> &str {
        &self.speaker_id
    }

    pub fn unit(&self, row: usize) -> &[f32] {
        &self.units[row * self.dim..(row + 1) * self.dim]
    }

    pub fn units(&self) -> std::slice::ChunksExact<'_, f32> {
        self.units.chunks_exact(self.dim)
    }

    /// Row-major N×D values.
    pub fn as_slice(&self) -> &[f32] {
        &self.units
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.sq_norms[row].sqrt()
    }

    /// Squared L2 norm of a row.
    pub fn sq_norm(&self, row: usize) -> f64 {
        self.sq_norms[row]
    }

    pub fn provenance(&self, row: usize) -> Provenance<'_> {
        let (u, f) = self.provenance[row];
        Provenance {
            source_id: &self.utterances[u as usize].source_id,
            frame_index: f as usize,
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    /// N / frame rate.
    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz as f64
    }

    /// Row-permuted copy. `order[i]` is the source row of output row `i`.
    /// Provenance follows the rows; utterance spans are rebuilt from runs of
    /// consecutive frames of the same source utterance.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::InvalidConfig(format!(
                "permutation of length {} for {} rows",
                order.len(),
                self.len()
            )));
        }
        let mut seen = vec![false; self.len()];
        let mut out = UnitDatabase {
            units: Vec::with_capacity(self.units.len()),
            dim: self.dim,
            sq_norms: Vec::with_capacity(self.len()),
            provenance: Vec::with_capacity(self.len()),
            utterances: Vec::new(),
            frame_rate_hz: self.frame_rate_hz,
            speaker_id: self.speaker_id.clone(),
        };
        let mut prev: Option<(u32, u32)> = None;
        for (i, &row) in order.iter().enumerate() {
            if row >= self.len() || std::mem::replace(&mut seen[row], true) {
                return Err(Error::InvalidConfig(format!(
                    "not a permutation at row {row}"
                )));
            }
            let (utt, frame) = self.provenance[row];
            let continues = prev.is_some_and(|(pu, pf)| pu == utt && pf + 1 == frame);
            if continues {
                out.utterances.last_mut().expect("open span").len += 1;
            } else {
                out.utterances.push(Utterance {
                    source_id: self.utterances[utt as usize].source_id.clone(),
                    start: i,
                    len: 1,
                });
            }
            prev = Some((utt, frame));
            out.units.extend_from_slice(self.unit(row));
            out.sq_norms.push(self.sq_norms[row]);
            out.provenance
                .push(((out.utterances.len() - 1) as u32, frame));
        }
        Ok(out)
    }
}

/// Total duration in seconds: N / frame rate.
pub fn database_duration(db: &UnitDatabase) -> f64 {
    db.duration_seconds()
}

/// Loads each KNNF file and concatenates them in order.
pub fn build_database<P: AsRef<Path>>(paths: &[P], speaker_id: &str) -> Result<UnitDatabase> {
    if paths.is_empty() {
        return Err(Error::Empty("no feature files"));
    }
    let mut seqs = Vec::with_capacity(paths.len());
    for p in paths {
        let seq = load_features(p)?;
        if let Some(first) = seqs.first() {
            let first: &FeatureSequence = first;
            if seq.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    found: seq.dim,
                });
            }
        }
        seqs.push(seq);
    }
    UnitDatabase::from_sequences(seqs, speaker_id)
}

/// Duration-limited draw used by the reference-data ablations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSpec {
    pub duration_seconds: f64,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn new(duration_seconds: f64, seed: u64) -> Result<Self> {
        if !(duration_seconds.is_finite() && duration_seconds > 0.0) {
            return Err(Error::InvalidDuration(duration_seconds));
        }
        Ok(SubsetSpec {
            duration_seconds,
            seed,
        })
    }
}

/// `ceil(seconds × rate)`, treating products within 1e-9 of an integer as
/// that integer so that e.g. 0.1 s at 50 Hz is 5 frames rather than 6.
pub fn frames_for_duration(seconds: f64, frame_rate_hz: f32) -> usize {
    let x = seconds * frame_rate_hz as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Draws whole utterances in a seeded shuffle order until the requested
/// duration is reached; the utterance that would overflow contributes only
/// the frame prefix needed to hit the target exactly.
pub fn subset_database(db: &UnitDatabase, spec: &SubsetSpec) -> Result<UnitDatabase> {
    let spec = SubsetSpec::new(spec.duration_seconds, spec.seed)?;
    let target = frames_for_duration(spec.duration_seconds, db.frame_rate_hz);
    if target > db.len() {
        return Err(Error::DurationExceeded {
            requested: spec.duration_seconds,
            available: db.duration_seconds(),
        });
    }
    let spans: Vec<&Utterance> = db.utterances.iter().collect();
    let mut order: Vec<usize> = (0..spans.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let mut out = UnitDatabase {
        units: Vec::with_capacity(target * db.dim),
        dim: db.dim,
        sq_norms: Vec::with_capacity(target),
        provenance: Vec::with_capacity(target),
        utterances: Vec::new(),
        frame_rate_hz: db.frame_rate_hz,
        speaker_id: db.speaker_id.clone(),
    };
    for i in order {
        let remaining = target - out.len();
        if remaining == 0 {
            break;
        }
        let span = spans[i];
        let take = span.len.min(remaining);
        let utt = out.utterances.len() as u32;
        let start = out.len();
        for row in span.start..span.start + take {
            out.units.extend_from_slice(db.unit(row));
            out.sq_norms.push(db.sq_norms[row]);
            out.provenance.push((utt, db.provenance[row].1));
        }
        out.utterances.push(Utterance {
            source_id: span.source_id.clone(),
            start,
            len: take,
        });
    }
    debug_assert_eq!(out.len(), target);
    Ok(out)
}

/// On-disk database description: the speaker and an ordered list of KNNF
/// files, relative to the manifest's directory.
///
/// A consolidated database (one KNNF holding every unit) additionally lists
/// `utterances`, which splits that file back into its source utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub speaker_id: String,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterances: Option<Vec<UtteranceEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub source_id: String,
    pub frames: usize,
}

impl DatabaseManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            what: "database manifest",
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// Absolute (or cwd-relative) paths of the listed files.
    pub fn resolved_files(&self, manifest_path: &Path) -> Vec<PathBuf> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.files.iter().map(|f| base.join(f)).collect()
    }
}

/// Loads a database from a JSON manifest, or treats any other path as a
/// single KNNF utterance whose stem names the speaker.
pub fn load_database(path: impl AsRef<Path>) -> Result<UnitDatabase> {
    let path = path.as_ref();
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if !is_json {
        let seq = load_features(path)?;
        let speaker = seq.source_id.clone();
        return UnitDatabase::from_sequences([seq], speaker);
    }
    let manifest = DatabaseManifest::load(path)?;
    let files = manifest.resolved_files(path);
    let Some(entries) = &manifest.utterances else {
        return build_database(&files, &manifest.speaker_id);
    };
    let malformed = |message: String| Error::Malformed {
        what: "database manifest",
        path: path.to_owned(),
        message,
    };
    if files.len() != 1 {
        return Err(malformed(format!(
            "consolidated database lists {} files, expected 1",
            files.len()
        )));
    }
    let all = load_features(&files[0])?;
    let total: usize = entries.iter().map(|e| e.frames).sum();
    if total != all.len() || entries.iter().any(|e| e.frames == 0) {
        return Err(malformed(format!(
            "utterance frame counts sum to {total}, unit file holds {}",
            all.len()
        )));
    }
    let mut seqs = Vec::with_capacity(entries.len());
    let mut start = 0;
    for e in entries {
        let values = all.as_slice()[start * all.dim..(start + e.frames) * all.dim].to_vec();
        seqs.push(FeatureSequence::new(
            values,
            all.dim,
            all.frame_rate_hz,
            e.source_id.clone(),
        )?);
        start += e.frames;
    }
    UnitDatabase::from_sequences(seqs, manifest.speaker_id)
}

/// Writes `db` as a consolidated manifest at `manifest_path` plus a unit
/// file next to it with the `.knnf` extension.
pub fn save_database(db: &UnitDatabase, manifest_path: impl AsRef<Path>) -> Result<PathBuf> {
    let manifest_path = manifest_path.as_ref();
    let units_path = manifest_path.with_extension("knnf");
    let units = FeatureSequence::new(
        db.units.clone(),
        db.dim,
        db.frame_rate_hz,
        db.speaker_id.clone(),
    )?;
    save_features(&units, &units_path)?;
    let manifest = DatabaseManifest {
        speaker_id: db.speaker_id.clone(),
        files: vec![units_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()],
        utterances: Some(
            db.utterances
                .iter()
                .map(|u| UtteranceEntry {
                    source_id: u.source_id.clone(),
                    frames: u.len,
                })
                .collect(),
        ),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(units_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f32]], id: &str) -> FeatureSequence {
        FeatureSequence::from_rows(rows, DEFAULT_FRAME_RATE_HZ, id).unwrap()
    }

    fn ramp(t: usize, d: usize, id: &str) -> FeatureSequence {
        let v = (0..t * d).map(|i| 1.0 + i as f32).collect();
        FeatureSequence::new(v, d, DEFAULT_FRAME_RATE_HZ, id).unwrap()
    }

    #[test]
    fn minimal_file_layout() {
        let bytes = encode(&seq(&[&[1.0, 2.0]], "x")).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(&bytes[..4], b"KNNF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &50.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &2.0f32.to_le_bytes());
    }

    #[test]
    fn nan_is_rejected_and_nothing_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.knnf");
        let mut s = seq(&[&[1.0, 2.0]], "x");
        s.frames[1] = f32::NAN;
        let err = save_features(&s, &path).unwrap_err();
        assert!(matches!(err, Error::NonFinite { frame: 0, dim: 1 }));
        assert!(!path.exists());
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            FeatureSequence::new(vec![], 4, 50.0, "x"),
            Err(Error::EmptyShape { .. })
        ));
        assert!(matches!(
            FeatureSequence::new(vec![1.0], 0, 50.0, "x"),
            Err(Error::EmptyShape { .. })
        ));
        assert!(matches!(
            FeatureSequence::new(vec![1.0, f32::INFINITY], 2, 50.0, "x"),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            FeatureSequence::new(vec![1.0], 1, 0.0, "x"),
            Err(Error::InvalidFrameRate(_))
        ));
    }

    #[test]
    fn decode_errors() {
        let good = encode(&ramp(10, 3, "x")).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bad, "x"), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bad, "x"),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        // declares T=10 but only 9 frames of payload
        let bad = &good[..good.len() - 12];
        assert!(matches!(
            decode(bad, "x"),
            Err(Error::Truncated {
                expected: 140,
                actual: 128
            })
        ));

        assert!(matches!(
            decode(&good[..10], "x"),
            Err(Error::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bad, "x"), Err(Error::EmptyShape { .. })));

        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bad, "x"), Err(Error::NonFinite { .. })));

        let mut bad = good;
        bad.push(0);
        assert!(matches!(
            decode(&bad, "x"),
            Err(Error::TrailingBytes { .. })
        ));
    }

    #[test]
    fn build_concatenates_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.knnf");
        let b = dir.path().join("b.knnf");
        save_features(&ramp(5, 1024, "a"), &a).unwrap();
        save_features(&ramp(7, 1024, "b"), &b).unwrap();
        let db = build_database(&[&a, &b], "spk").unwrap();
        assert_eq!(db.len(), 12);
        for row in 0..5 {
            assert_eq!(db.provenance(row).source_id, "a");
            assert_eq!(db.provenance(row).frame_index, row);
        }
        for row in 5..12 {
            assert_eq!(db.provenance(row).source_id, "b");
            assert_eq!(db.provenance(row).frame_index, row - 5);
        }
    }

    #[test]
    fn build_rejects_mixed_dims_and_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.knnf");
        let b = dir.path().join("b.knnf");
        save_features(&ramp(2, 1024, "a"), &a).unwrap();
        save_features(&ramp(2, 768, "b"), &b).unwrap();
        assert!(matches!(
            build_database(&[&a, &b], "spk"),
            Err(Error::DimensionMismatch {
                expected: 1024,
                found: 768
            })
        ));
        let none: [&Path; 0] = [];
        assert!(matches!(build_database(&none, "spk"), Err(Error::Empty(_))));
    }

    #[test]
    fn build_rejects_zero_norm_frame() {
        let s = seq(&[&[1.0, 0.0], &[0.0, 0.0]], "u");
        let err = UnitDatabase::from_sequences([s], "spk").unwrap_err();
        assert!(matches!(err, Error::ZeroNormFrame { frame: 1, .. }));
    }

    #[test]
    fn forty_utterances_of_eight_minutes() {
        // 40 utterances of 12 s each at 50 Hz
        let seqs: Vec<_> = (0..40).map(|i| ramp(600, 2, &format!("u{i}"))).collect();
        let expected: usize = seqs.iter().map(|s| s.len()).sum();
        let db = UnitDatabase::from_sequences(seqs, "spk").unwrap();
        assert_eq!(expected, 24000);
        assert_eq!(db.len(), 24000);
        assert!((database_duration(&db) - 480.0).abs() < 1e-9);
    }

    #[test]
    fn duration_arithmetic() {
        let db = UnitDatabase::from_sequences([ramp(1500, 1, "a")], "s").unwrap();
        assert_eq!(database_duration(&db), 30.0);
        let db = UnitDatabase::from_sequences([ramp(1, 1, "a")], "s").unwrap();
        assert!((database_duration(&db) - 0.02).abs() < 1e-12);
        assert!((database_duration(&db) * 50.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frames_for_duration_rounding() {
        assert_eq!(frames_for_duration(30.0, 50.0), 1500);
        assert_eq!(frames_for_duration(0.1, 50.0), 5);
        assert_eq!(frames_for_duration(0.011, 50.0), 1);
        assert_eq!(frames_for_duration(0.03, 50.0), 2);
    }

    #[test]
    fn subset_single_utterance_prefix() {
        let db = UnitDatabase::from_sequences([ramp(3000, 2, "long")], "s").unwrap();
        let sub = subset_database(&db, &SubsetSpec::new(30.0, 1).unwrap()).unwrap();
        assert_eq!(sub.len(), 1500);
        for row in 0..1500 {
            assert_eq!(sub.unit(row), db.unit(row));
            assert_eq!(sub.provenance(row).frame_index, row);
        }
    }

    #[test]
    fn subset_ten_utterances_replays_shuffle() {
        let seqs: Vec<_> = (0..10).map(|i| ramp(500, 2, &format!("u{i}"))).collect();
        let db = UnitDatabase::from_sequences(seqs, "s").unwrap();
        let sub = subset_database(&db, &SubsetSpec::new(25.0, 7).unwrap()).unwrap();
        assert_eq!(sub.len(), 1250);

        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
        let ids: Vec<String> = order[..3].iter().map(|i| format!("u{i}")).collect();
        let lens: Vec<usize> = sub.utterances().iter().map(|u| u.len).collect();
        let got: Vec<&str> = sub
            .utterances()
            .iter()
            .map(|u| u.source_id.as_str())
            .collect();
        assert_eq!(got, ids);
        assert_eq!(lens, [500, 500, 250]);
    }

    #[test]
    fn subset_errors() {
        let db = UnitDatabase::from_sequences([ramp(100, 2, "a")], "s").unwrap();
        assert!(matches!(
            subset_database(
                &db,
                &SubsetSpec {
                    duration_seconds: 3.0,
                    seed: 0
                }
            ),
            Err(Error::DurationExceeded { .. })
        ));
        assert!(SubsetSpec::new(0.0, 0).is_err());
        assert!(SubsetSpec::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn consolidated_database_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let db = UnitDatabase::from_sequences([ramp(3, 4, "a"), ramp(5, 4, "b")], "spk").unwrap();
        let m = dir.path().join("db.json");
        save_database(&db, &m).unwrap();
        let back = load_database(&m).unwrap();
        assert_eq!(back, db);
    }

    #[test]
    fn plain_manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        save_features(&ramp(3, 4, "a"), dir.path().join("a.knnf")).unwrap();
        save_features(&ramp(2, 4, "b"), dir.path().join("b.knnf")).unwrap();
        let m = dir.path().join("m.json");
        fs::write(
            &m,
            r#"{"speaker_id": "spk", "files": ["a.knnf", "b.knnf"]}"#,
        )
        .unwrap();
        let db = load_database(&m).unwrap();
        assert_eq!(db.len(), 5);
        assert_eq!(db.speaker_id(), "spk");
    }

    #[test]
    fn permuted_keeps_provenance() {
        let db = UnitDatabase::from_sequences([ramp(4, 2, "a")], "s").unwrap();
        let p = db.permuted(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.unit(0), db.unit(2));
        assert_eq!(p.provenance(0).frame_index, 2);
        assert!(db.permuted(&[0, 0, 1, 2]).is_err());
    }
}
