//! Benchmark task data: the synthetic copy-memory task, character-level
//! corpora, and digit images stored in the classic IDX format (read as
//! pixel sequences).

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

// ── Copy-memory task ────────────────────────────────────────────────────────

/// Symbols of the copy task: 0 is blank, 1..=8 are payload symbols, 9 is the
/// recall delimiter.
pub const COPY_VOCAB: usize = 10;
pub const COPY_BLANK: usize = 0;
pub const COPY_DELIMITER: usize = 9;

/// One copy-memory sequence. With payload length P and delay D the layout is
///
/// ```text
/// index:  0 .. P-1   P .. P+D-2   P+D-1      P+D .. P+D+P-1
/// input:  payload    blanks       delimiter  blanks
/// target: –          –            –          payload
/// ```
///
/// so the whole sequence is `D + 2P` long, the delimiter arrives `D` steps
/// after the payload ends, and the model must reproduce the payload on the
/// final `P` positions (loss masked everywhere else). Guessing uniformly
/// over the 8 payload symbols scores 1/8.
pub fn gen_copy_sequence(
    delay: usize,
    payload_len: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<Option<usize>>) {
    assert!(delay >= 1, "delay must be at least 1");
    assert!(payload_len >= 1, "payload must be nonempty");
    let t_len = delay + 2 * payload_len;
    let mut input = vec![COPY_BLANK; t_len];
    let mut target = vec![None; t_len];
    for i in 0..payload_len {
        input[i] = rng.gen_range(1..=8);
    }
    input[payload_len + delay - 1] = COPY_DELIMITER;
    for i in 0..payload_len {
        target[payload_len + delay + i] = Some(input[i]);
    }
    (input, target)
}

// ── Character corpora ───────────────────────────────────────────────────────

/// A character corpus tokenized against the training split's alphabet.
/// Characters absent from the training split map to a reserved unknown id
/// equal to `vocab.len()`; models should therefore use
/// [`CharCorpus::num_classes`] (alphabet plus unknown) as their class count.
#[derive(Debug, Clone)]
pub struct CharCorpus {
    /// Sorted distinct characters of the training split.
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl CharCorpus {
    fn from_splits(train_text: &str, valid_text: &str, test_text: &str) -> CharCorpus {
        let mut vocab: Vec<char> = {
            let mut set: Vec<char> = train_text.chars().collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        vocab.shrink_to_fit();
        let corpus = CharCorpus { vocab, train: Vec::new(), valid: Vec::new(), test: Vec::new() };
        let train = corpus.encode(train_text);
        let valid = corpus.encode(valid_text);
        let test = corpus.encode(test_text);
        CharCorpus { train, valid, test, ..corpus }
    }

    /// Alphabet size of the training split (excludes the unknown id).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// The reserved id for characters outside the training alphabet.
    pub fn unk_id(&self) -> usize {
        self.vocab.len()
    }

    /// Class count a model over this corpus needs: alphabet plus unknown.
    pub fn num_classes(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|ch| self.vocab.binary_search(&ch).unwrap_or(self.vocab.len()))
            .collect()
    }

    /// Inverse of [`Self::encode`]; unknown ids render as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.vocab.get(id).copied().unwrap_or('\u{FFFD}')).collect()
    }
}

/// Loads a single text file and splits it by character count into
/// train/valid/test fractions (`frac_train + frac_valid < 1`; the remainder
/// is the test split). The alphabet comes from the training split only.
pub fn load_char_corpus_single(
    path: &Path,
    frac_train: f64,
    frac_valid: f64,
) -> Result<CharCorpus, DataError> {
    if !(frac_train > 0.0 && frac_valid >= 0.0 && frac_train + frac_valid < 1.0) {
        return Err(DataError::Format(format!(
            "bad split fractions train={frac_train} valid={frac_valid}"
        )));
    }
    let text = fs::read_to_string(path)?;
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    if n < 10 {
        return Err(DataError::Format(format!("corpus too small ({n} chars)")));
    }
    let n_train = (n as f64 * frac_train) as usize;
    let n_valid = (n as f64 * frac_valid) as usize;
    let train: String = chars[..n_train].iter().collect();
    let valid: String = chars[n_train..n_train + n_valid].iter().collect();
    let test: String = chars[n_train + n_valid..].iter().collect();
    Ok(CharCorpus::from_splits(&train, &valid, &test))
}

/// Loads pre-split train/valid/test text files.
pub fn load_char_corpus_files(
    train: &Path,
    valid: &Path,
    test: &Path,
) -> Result<CharCorpus, DataError> {
    let train_text = fs::read_to_string(train)?;
    let valid_text = fs::read_to_string(valid)?;
    let test_text = fs::read_to_string(test)?;
    Ok(CharCorpus::from_splits(&train_text, &valid_text, &test_text))
}

// ── Language-model batching ─────────────────────────────────────────────────

/// One BPTT chunk of one lane: next-token prediction with targets shifted by
/// one position. `is_first` marks the lane's first chunk (history restarts).
#[derive(Debug, Clone)]
pub struct LmChunk {
    pub lane: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub is_first: bool,
}

/// Splits a token stream into `batch` contiguous lanes and each lane into
/// BPTT chunks. The outer vector is the step sequence: element k holds the
/// k-th chunk of every lane that still has one, so consecutive steps
/// continue each lane exactly where the previous step left off.
pub fn lm_batches(tokens: &[usize], batch: usize, bptt: usize) -> Vec<Vec<LmChunk>> {
    assert!(batch >= 1 && bptt >= 1);
    let lane_len = tokens.len() / batch;
    if lane_len < 2 {
        return Vec::new();
    }
    let lanes: Vec<&[usize]> = (0..batch).map(|b| &tokens[b * lane_len..(b + 1) * lane_len]).collect();
    let usable = lane_len - 1; // last token of a lane is only ever a target
    let steps = usable.div_ceil(bptt);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let lo = k * bptt;
        let hi = usize::min(lo + bptt, usable);
        let mut step = Vec::with_capacity(batch);
        for (lane, toks) in lanes.iter().enumerate() {
            step.push(LmChunk {
                lane,
                inputs: toks[lo..hi].to_vec(),
                targets: toks[lo + 1..hi + 1].iter().map(|&t| Some(t)).collect(),
                is_first: k == 0,
            });
        }
        out.push(step);
    }
    out
}

// ── IDX images ──────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image file (big-endian, magic 0x803) into per-image pixel
/// rows scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Vec<Vec<f64>>, DataError> {
    let mut f = fs::File::open(path)?;
    let magic = read_be_u32(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!("bad image magic 0x{magic:08x}")));
    }
    let n = read_be_u32(&mut f)? as usize;
    let rows = read_be_u32(&mut f)? as usize;
    let cols = read_be_u32(&mut f)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    f.read_exact(&mut pixels)?;
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(DataError::Format("trailing bytes after pixel data".into()));
    }
    let per = rows * cols;
    Ok((0..n)
        .map(|i| pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0).collect())
        .collect())
}

/// Reads an IDX label file (magic 0x801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut f = fs::File::open(path)?;
    let magic = read_be_u32(&mut f)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!("bad label magic 0x{magic:08x}")));
    }
    let n = read_be_u32(&mut f)? as usize;
    let mut labels = vec![0u8; n];
    f.read_exact(&mut labels)?;
    Ok(labels)
}

/// Writes images (values in `[0, 1]`, rounded to bytes) in IDX format.
pub fn write_idx_images(
    path: &Path,
    images: &[Vec<f64>],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(DataError::Format("image size does not match dimensions".into()));
        }
        bytes.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// 2×2 average pooling of a square image given as a flat row-major slice;
/// side must be even. 28×28 becomes 14×14 (a 196-step pixel sequence).
pub fn downsample_2x2(img: &[f64], side: usize) -> Vec<f64> {
    assert_eq!(img.len(), side * side, "image is not side×side");
    assert_eq!(side % 2, 0, "side must be even");
    let half = side / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..half {
        for c in 0..half {
            let (r2, c2) = (2 * r, 2 * c);
            out[r * half + c] = (img[r2 * side + c2]
                + img[r2 * side + c2 + 1]
                + img[(r2 + 1) * side + c2]
                + img[(r2 + 1) * side + c2 + 1])
                / 4.0;
        }
    }
    out
}

/// A seeded Fisher–Yates permutation of `0..len` (for the permuted-pixels
/// task variant).
pub fn pixel_permutation(len: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Reorders a pixel sequence: `out[i] = img[perm[i]]`.
pub fn apply_permutation(img: &[f64], perm: &[usize]) -> Vec<f64> {
    assert_eq!(img.len(), perm.len());
    perm.iter().map(|&src| img[src]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::io::Write;

    #[test]
    fn test_copy_sequence_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (delay, payload) = (5, 10);
        let (input, target) = gen_copy_sequence(delay, payload, &mut rng);
        assert_eq!(input.len(), delay + 2 * payload);
        assert_eq!(target.len(), input.len());
        for i in 0..payload {
            assert!((1..=8).contains(&input[i]), "payload symbol out of range");
        }
        for i in payload..payload + delay - 1 {
            assert_eq!(input[i], COPY_BLANK);
        }
        assert_eq!(input[payload + delay - 1], COPY_DELIMITER);
        for i in payload + delay..input.len() {
            assert_eq!(input[i], COPY_BLANK, "post-delimiter input must be blank");
        }
        for (i, t) in target.iter().enumerate() {
            if i < payload + delay {
                assert_eq!(*t, None);
            } else {
                assert_eq!(*t, Some(input[i - payload - delay]), "target must echo the payload");
            }
        }
    }

    #[test]
    fn test_copy_sequence_minimum_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (input, target) = gen_copy_sequence(1, 3, &mut rng);
        assert_eq!(input.len(), 7);
        // Delimiter immediately follows the payload.
        assert_eq!(input[3], COPY_DELIMITER);
        assert_eq!(target[4], Some(input[0]));
    }

    #[test]
    fn test_char_corpus_vocab_from_train_split_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        // Train split: first 60% = "ababababab ab" region; '!' appears only
        // in the final (test) region and must become unknown.
        let mut f = fs::File::create(&path).unwrap();
        write!(f, "abababababababababababab!!cc").unwrap();
        drop(f);
        let corpus = load_char_corpus_single(&path, 0.6, 0.2).unwrap();
        assert_eq!(corpus.vocab, vec!['a', 'b']);
        assert_eq!(corpus.vocab_size(), 2);
        assert_eq!(corpus.unk_id(), 2);
        assert_eq!(corpus.num_classes(), 3);
        assert_eq!(corpus.encode("abab"), vec![0, 1, 0, 1]);
        assert!(corpus.test.contains(&corpus.unk_id()), "unseen chars must map to unk");
        assert_eq!(corpus.decode(&[0, 1]), "ab");
        let n = 28;
        assert_eq!(corpus.train.len(), (n as f64 * 0.6) as usize);
        assert_eq!(corpus.valid.len(), (n as f64 * 0.2) as usize);
        assert_eq!(corpus.train.len() + corpus.valid.len() + corpus.test.len(), n);
    }

    #[test]
    fn test_char_corpus_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        fs::write(&a, "hello").unwrap();
        fs::write(&b, "hole").unwrap();
        fs::write(&c, "xy").unwrap();
        let corpus = load_char_corpus_files(&a, &b, &c).unwrap();
        assert_eq!(corpus.vocab, vec!['e', 'h', 'l', 'o']);
        assert_eq!(corpus.valid, corpus.encode("hole"));
        assert!(corpus.test.iter().all(|&t| t == corpus.unk_id()));
    }

    #[test]
    fn test_corpus_rejects_bad_fractions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::write(&path, "abcdefghijklmnop").unwrap();
        assert!(load_char_corpus_single(&path, 0.8, 0.3).is_err());
        assert!(load_char_corpus_single(&path, 0.0, 0.1).is_err());
    }

    #[test]
    fn test_lm_batches_partition_lanes_contiguously() {
        let tokens: Vec<usize> = (0..26).collect();
        let steps = lm_batches(&tokens, 2, 4);
        // Lane length 13, usable 12, so 3 steps of width 4.
        assert_eq!(steps.len(), 3);
        for (k, step) in steps.iter().enumerate() {
            assert_eq!(step.len(), 2);
            for chunk in step {
                assert_eq!(chunk.is_first, k == 0);
                assert_eq!(chunk.inputs.len(), chunk.targets.len());
                // Next-token targets: target == input + 1 in this corpus.
                for (i, t) in chunk.inputs.iter().zip(chunk.targets.iter()) {
                    assert_eq!(t.unwrap(), i + 1);
                }
            }
        }
        // Consecutive chunks of one lane continue exactly.
        let lane0: Vec<usize> = steps.iter().flat_map(|s| s[0].inputs.clone()).collect();
        assert_eq!(lane0, (0..12).collect::<Vec<_>>());
        let lane1: Vec<usize> = steps.iter().flat_map(|s| s[1].inputs.clone()).collect();
        assert_eq!(lane1, (13..25).collect::<Vec<_>>());
    }

    #[test]
    fn test_lm_batches_ragged_tail() {
        let tokens: Vec<usize> = (0..11).collect();
        let steps = lm_batches(&tokens, 1, 4);
        // Usable 10 → chunks of 4, 4, 2.
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[2][0].inputs.len(), 2);
        let total: usize = steps.iter().map(|s| s[0].targets.len()).sum();
        assert_eq!(total, 10, "every non-initial token is predicted exactly once");
    }

    #[test]
    fn test_idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        let images = vec![
            (0..16).map(|v| v as f64 / 255.0).collect::<Vec<f64>>(),
            (0..16).map(|v| (255 - v) as f64 / 255.0).collect(),
        ];
        write_idx_images(&img_path, &images, 4, 4).unwrap();
        write_idx_labels(&lbl_path, &[7, 3]).unwrap();
        let back = load_idx_images(&img_path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in images.iter().zip(back.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(load_idx_labels(&lbl_path).unwrap(), vec![7, 3]);
    }

    #[test]
    fn test_idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut bytes = 0x0000_0801u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_idx_images(&path), Err(DataError::Format(_))));
    }

    #[test]
    fn test_downsample_2x2_averages_blocks() {
        // 4×4 image with known values; block averages computed by hand.
        let img = vec![
            0.0, 1.0, 2.0, 3.0, //
            4.0, 5.0, 6.0, 7.0, //
            8.0, 9.0, 10.0, 11.0, //
            12.0, 13.0, 14.0, 15.0,
        ];
        let out = downsample_2x2(&img, 4);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn test_pixel_permutation_is_seeded_and_complete() {
        let a = pixel_permutation(196, 99);
        let b = pixel_permutation(196, 99);
        let c = pixel_permutation(196, 100);
        assert_eq!(a, b, "same seed must give the same permutation");
        assert_ne!(a, c, "different seeds must differ");
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..196).collect::<Vec<_>>());
        let img: Vec<f64> = (0..196).map(|v| v as f64).collect();
        let shuffled = apply_permutation(&img, &a);
        assert_eq!(shuffled[0], a[0] as f64);
    }
}
