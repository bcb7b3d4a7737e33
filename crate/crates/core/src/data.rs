//! Utterances, the synthetic speech-like corpus, feature files and manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("feature file {path}: {msg}")]
    FeatureFile { path: String, msg: String },
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: usize,
    pub dim: usize,
    /// Row-major `frames x dim`.
    pub features: Vec<f32>,
    pub transcript: String,
}

impl Utterance {
    pub fn tensor(&self) -> Tensor {
        crate::model::features_tensor(self.frames, self.dim, &self.features)
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub utterances: usize,
    /// Number of letters used, taken from the start of the alphabet.
    pub letters: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub lexicon_size: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub feat_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            utterances: 200,
            letters: 26,
            min_words: 1,
            max_words: 3,
            lexicon_size: 30,
            min_word_len: 2,
            max_word_len: 3,
            feat_dim: 16,
            min_frames: 2,
            max_frames: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.letters == 0 || self.letters > 26 {
            return bad("letters must be in 1..=26");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("need 1 <= min_word_len <= max_word_len");
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return bad("need 2 <= min_frames <= max_frames");
        }
        if self.lexicon_size == 0 || self.feat_dim == 0 || self.utterances == 0 {
            return bad("utterances, lexicon_size and feat_dim must be positive");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Random unit vector per symbol (letters plus the space).
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub symbols: Vec<char>,
    pub vectors: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(symbols: Vec<char>, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let vectors = symbols
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Prototypes { symbols, vectors }
    }

    pub fn get(&self, c: char) -> Option<&[f64]> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| self.vectors[i].as_slice())
    }
}

/// Emits `frames_for(c)` noisy copies of each character's prototype.
pub fn render(
    transcript: &str,
    protos: &Prototypes,
    mut frames_for: impl FnMut(char) -> usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>, DataError> {
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut rows = Vec::new();
    for c in transcript.chars() {
        let proto = protos
            .get(c)
            .ok_or_else(|| DataError::Invalid(format!("no prototype for {c:?}")))?;
        for _ in 0..frames_for(c) {
            rows.push(
                proto
                    .iter()
                    .map(|&p| (p + normal.sample(rng)) as f32)
                    .collect(),
            );
        }
    }
    Ok(rows)
}

/// Deterministic synthetic corpus: transcripts are 1..=N words drawn from a
/// seeded random lexicon, and every character (space included) becomes 2..=4
/// frames of its prototype plus Gaussian noise.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Utterance>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let letters: Vec<char> = ALPHABET.chars().take(cfg.letters).collect();
    let mut symbols = letters.clone();
    symbols.push(' ');
    let protos = Prototypes::new(symbols, cfg.feat_dim, &mut rng);
    let lexicon: Vec<String> = (0..cfg.lexicon_size)
        .map(|_| {
            let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
            (0..len)
                .map(|_| letters[rng.random_range(0..letters.len())])
                .collect()
        })
        .collect();
    let width = cfg.utterances.to_string().len();
    let mut out = Vec::with_capacity(cfg.utterances);
    for n in 0..cfg.utterances {
        let words = rng.random_range(cfg.min_words..=cfg.max_words);
        let transcript: Vec<&str> = (0..words)
            .map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str())
            .collect();
        let transcript = transcript.join(" ");
        let (lo, hi) = (cfg.min_frames, cfg.max_frames);
        let mut frame_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let rows = render(
            &transcript,
            &protos,
            |_| frame_rng.random_range(lo..=hi),
            cfg.noise,
            &mut noise_rng,
        )?;
        out.push(Utterance {
            id: format!("syn{n:0width$}"),
            frames: rows.len(),
            dim: cfg.feat_dim,
            features: rows.into_iter().flatten().collect(),
            transcript,
        });
    }
    Ok(out)
}

/// 80/10/10 train/dev/test split by seeded shuffle.
pub fn split(utts: &[Utterance], seed: u64) -> (Vec<Utterance>, Vec<Utterance>, Vec<Utterance>) {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = utts.len();
    let n_dev = n / 10;
    let n_test = n / 10;
    let n_train = n - n_dev - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| utts[i].clone()).collect::<Vec<_>>();
    (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    )
}

pub fn encode_features(frames: usize, dim: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses a feature file image into `(frames, dim, values)`.
pub fn decode_features(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(format!("bad magic {:?}", &bytes[..4]));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = frames * dim * 4;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(format!(
            "expected {expected} data bytes for {frames}x{dim}, found {}",
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((frames, dim, data))
}

pub fn write_features(path: &Path, utt: &Utterance) -> Result<(), DataError> {
    fs::write(path, encode_features(utt.frames, utt.dim, &utt.features)).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes).map_err(|msg| DataError::FeatureFile {
        path: path.display().to_string(),
        msg,
    })
}

/// Writes one feature file per utterance under `feat_dir` and a manifest at
/// `manifest` pointing at them (paths relative to the manifest's directory
/// when possible).
pub fn write_manifest(
    manifest: &Path,
    feat_dir: &Path,
    utts: &[Utterance],
) -> Result<(), DataError> {
    fs::create_dir_all(feat_dir).map_err(io_err(feat_dir))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for u in utts {
        if u.id.contains('\t') || u.transcript.contains('\t') || u.transcript.contains('\n') {
            return Err(DataError::Invalid(format!(
                "utterance {} has tabs or newlines",
                u.id
            )));
        }
        let path = feat_dir.join(format!("{}.feat", u.id));
        write_features(&path, u)?;
        let shown = path.strip_prefix(base).unwrap_or(&path);
        let _ = writeln!(text, "{}\t{}\t{}", u.id, shown.display(), u.transcript);
    }
    if let Some(parent) = manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(manifest, text).map_err(io_err(manifest))
}

pub fn read_manifest(manifest: &Path) -> Result<Vec<Utterance>, DataError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::Manifest {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[2].trim().is_empty() {
            return Err(DataError::Manifest {
                line: i + 1,
                msg: "empty transcript".into(),
            });
        }
        let p = PathBuf::from(fields[1]);
        let path = if p.is_absolute() { p } else { base.join(p) };
        if !path.exists() {
            return Err(DataError::FeatureFile {
                path: path.display().to_string(),
                msg: "missing".into(),
            });
        }
        let (frames, dim, features) = read_features(&path)?;
        out.push(Utterance {
            id: fields[0].to_string(),
            frames,
            dim,
            features,
            transcript: fields[2].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_places_frames_per_character() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let protos = Prototypes::new(vec!['a', 'b', ' '], 16, &mut rng);
        let rows = render("ab", &protos, |_| 2, 0.1, &mut rng).unwrap();
        assert_eq!(rows.len(), 4);
        let dist = |r: &[f32], p: &[f64]| {
            r.iter()
                .zip(p)
                .map(|(&x, &y)| (x as f64 - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let (pa, pb) = (protos.get('a').unwrap(), protos.get('b').unwrap());
        for row in &rows[..2] {
            assert!(dist(row, pa) < dist(row, pb));
            assert!(dist(row, pa) < 0.8);
        }
        for row in &rows[2..] {
            assert!(dist(row, pb) < dist(row, pa));
        }
        for v in &protos.vectors {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_well_formed() {
        let cfg = SyntheticConfig {
            utterances: 50,
            seed: 9,
            ..SyntheticConfig::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        for u in &a {
            let chars = u.transcript.chars().count();
            assert!(u.frames >= 2 * chars && u.frames <= 4 * chars);
            assert_eq!(u.features.len(), u.frames * 16);
            let words = u.transcript.split(' ').count();
            assert!((1..=3).contains(&words));
            assert!(u
                .transcript
                .chars()
                .all(|c| c == ' ' || c.is_ascii_lowercase()));
        }
        let other = gen_synthetic(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_synthetic_config_rejected() {
        let cfg = SyntheticConfig {
            letters: 27,
            ..SyntheticConfig::default()
        };
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let utts = gen_synthetic(&SyntheticConfig {
            utterances: 200,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let (tr, dv, te) = split(&utts, 3);
        assert_eq!((tr.len(), dv.len(), te.len()), (160, 20, 20));
        let mut ids: Vec<&str> = tr
            .iter()
            .chain(&dv)
            .chain(&te)
            .map(|u| u.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 200);
        assert_eq!(split(&utts, 3).1, dv);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let utts = gen_synthetic(&SyntheticConfig {
            utterances: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let manifest = dir.path().join("train.tsv");
        write_manifest(&manifest, &dir.path().join("feats"), &utts).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), utts);
    }

    #[test]
    fn manifest_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "a\tb\n").unwrap();
        match read_manifest(&m) {
            Err(DataError::Manifest { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let feat = dir.path().join("x.feat");
        fs::write(&feat, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
        fs::write(&m, "u1\tx.feat\thello\n").unwrap();
        match read_manifest(&m) {
            Err(DataError::FeatureFile { path, msg }) => {
                assert!(path.ends_with("x.feat"));
                assert!(msg.contains("magic"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&m, "u1\tmissing.feat\thello\n").unwrap();
        assert!(matches!(
            read_manifest(&m),
            Err(DataError::FeatureFile { .. })
        ));
    }

    #[test]
    fn feature_file_layout() {
        let bytes = encode_features(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 6.5);
        assert_eq!(
            decode_features(&bytes).unwrap(),
            (2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5])
        );
        assert!(decode_features(&bytes[..20]).is_err());
    }
}
