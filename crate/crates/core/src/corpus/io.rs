use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{TokenSequence, Vocabulary};

use super::generator::{LinePairs, TrilingualSplit};
use super::GeneratorConfig;

/// Largest vocabulary built from a corpus side unless configured otherwise.
pub const DEFAULT_MAX_VOCAB: usize = 30_000;

/// Encoded sentence pairs with the vocabularies used to encode them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(TokenSequence, TokenSequence)>,
    pub left_vocab: Vocabulary,
    pub right_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes both sides as text, one sentence per line.
    pub fn save(&self, left: &Path, right: &Path) -> Result<()> {
        let (l, r): (Vec<String>, Vec<String>) = self
            .pairs
            .iter()
            .map(|(a, b)| (self.left_vocab.decode(a), self.right_vocab.decode(b)))
            .unzip();
        write_lines(left, &l)?;
        write_lines(right, &r)
    }
}

/// Where the vocabularies of a loaded corpus come from.
#[derive(Clone, Debug)]
pub enum VocabPolicy {
    /// Built from the corpus itself, at most this many entries per side.
    Build {
        max_size: usize,
    },
    Given {
        left: Vocabulary,
        right: Vocabulary,
    },
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn tokenize_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Vocabulary of the most frequent tokens of `lines`.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Vocabulary> {
    let tokenized: Vec<Vec<String>> = lines.iter().map(|l| tokenize_line(l.as_ref())).collect();
    Vocabulary::build(tokenized.iter().map(Vec::as_slice), max_size)
}

/// Encodes aligned in-memory lines.
pub fn encode_parallel<S: AsRef<str>>(left: &[S], right: &[S], policy: VocabPolicy) -> Result<ParallelCorpus> {
    if left.len() != right.len() {
        return Err(Error::Contract(format!(
            "{} left lines but {} right lines",
            left.len(),
            right.len()
        )));
    }
    if left.is_empty() {
        return Err(Error::Config("parallel corpus is empty".into()));
    }
    for (i, (l, r)) in left.iter().zip(right).enumerate() {
        if l.as_ref().trim().is_empty() || r.as_ref().trim().is_empty() {
            return Err(Error::Config(format!("line {} has an empty side", i + 1)));
        }
    }
    let (left_vocab, right_vocab) = match policy {
        VocabPolicy::Build { max_size } => (build_vocab(left, max_size)?, build_vocab(right, max_size)?),
        VocabPolicy::Given { left, right } => (left, right),
    };
    let pairs = left
        .iter()
        .zip(right)
        .map(|(l, r)| (left_vocab.encode(l.as_ref()), right_vocab.encode(r.as_ref())))
        .collect();
    Ok(ParallelCorpus {
        pairs,
        left_vocab,
        right_vocab,
    })
}

/// Loads two aligned plain-text files.
pub fn load_parallel(left: &Path, right: &Path, policy: VocabPolicy) -> Result<ParallelCorpus> {
    let l = read_lines(left)?;
    let r = read_lines(right)?;
    if l.len() != r.len() {
        return Err(Error::Alignment {
            left: left.to_path_buf(),
            right: right.to_path_buf(),
            left_lines: l.len(),
            right_lines: r.len(),
        });
    }
    encode_parallel(&l, &r, policy)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub lines: usize,
    pub sha256: String,
}

/// Generator settings plus the name, size and hash of every file written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub generator: GeneratorConfig,
    pub files: Vec<FileRecord>,
}

impl SplitManifest {
    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.sha256.as_str())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// File names of a written split, by role.
#[derive(Clone, Debug)]
pub struct SplitPaths {
    pub dir: PathBuf,
}

impl SplitPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SplitPaths { dir: dir.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `(left, right)` files of a named corpus: `train.xz`, `train.zy`,
    /// `dev.xz`, `dev.xy` or `test.xy`.
    pub fn pair(&self, corpus: &str) -> Result<(PathBuf, PathBuf)> {
        let (split, langs) = corpus
            .split_once('.')
            .filter(|(_, l)| l.len() == 2)
            .ok_or_else(|| Error::Config(format!("unknown corpus {corpus:?}")))?;
        let mut chars = langs.chars();
        let (a, b) = (chars.next().expect("two chars"), chars.next().expect("two chars"));
        let name = |l: char| {
            if split == "train" {
                format!("train.{langs}.{l}")
            } else {
                format!("{split}.{l}")
            }
        };
        Ok((self.file(&name(a)), self.file(&name(b))))
    }
}

fn split_files(split: &TrilingualSplit) -> Vec<(String, Vec<String>)> {
    let side = |pairs: &LinePairs, left: bool| -> Vec<String> {
        pairs
            .iter()
            .map(|(a, b)| if left { a.clone() } else { b.clone() })
            .collect()
    };
    vec![
        ("train.xz.x".into(), side(&split.train_xz, true)),
        ("train.xz.z".into(), side(&split.train_xz, false)),
        ("train.zy.z".into(), side(&split.train_zy, true)),
        ("train.zy.y".into(), side(&split.train_zy, false)),
        ("dev.x".into(), side(&split.dev_xz, true)),
        ("dev.z".into(), side(&split.dev_xz, false)),
        ("dev.y".into(), side(&split.dev_xy, false)),
        ("test.x".into(), side(&split.test_xy, true)),
        ("test.z".into(), split.test_z.clone()),
        ("test.y".into(), side(&split.test_xy, false)),
    ]
}

/// Writes every corpus of `split` plus `manifest.json` into `dir`.
pub fn write_split(split: &TrilingualSplit, dir: &Path) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, lines) in split_files(split) {
        let path = dir.join(&name);
        write_lines(&path, &lines)?;
        files.push(FileRecord {
            lines: lines.len(),
            sha256: sha256_file(&path)?,
            name,
        });
    }
    let manifest = SplitManifest {
        generator: split.config.clone(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_trilingual;

    #[test]
    fn three_line_files() {
        let dir = tempfile::tempdir().unwrap();
        let (l, r) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        write_lines(&l, &["a b", "b c", "c"]).unwrap();
        write_lines(&r, &["x", "y y", "z"]).unwrap();
        let c = load_parallel(&l, &r, VocabPolicy::Build { max_size: 100 }).unwrap();
        assert_eq!(c.len(), 3);
        let (l2, r2) = (dir.path().join("c.txt"), dir.path().join("d.txt"));
        c.save(&l2, &r2).unwrap();
        let again = load_parallel(
            &l2,
            &r2,
            VocabPolicy::Given {
                left: c.left_vocab.clone(),
                right: c.right_vocab.clone(),
            },
        )
        .unwrap();
        assert_eq!(again.pairs, c.pairs);
    }

    #[test]
    fn misaligned_files_report_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (l, r) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        write_lines(&l, &["a", "b"]).unwrap();
        write_lines(&r, &["x"]).unwrap();
        match load_parallel(&l, &r, VocabPolicy::Build { max_size: 10 }) {
            Err(Error::Alignment {
                left_lines,
                right_lines,
                ..
            }) => assert_eq!((left_lines, right_lines), (2, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_side_rejected() {
        assert!(encode_parallel(&["a", " "], &["b", "c"], VocabPolicy::Build { max_size: 10 }).is_err());
    }

    #[test]
    fn vocab_order_and_boundary() {
        let v = build_vocab(&["a a b"], 10).unwrap();
        assert_eq!(&v.tokens()[4..], &["a".to_string(), "b".to_string()]);
        let ten: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        assert_eq!(build_vocab(&[ten.join(" ")], 5).unwrap().len(), 5);
    }

    #[test]
    fn split_written_with_manifest() {
        let cfg = GeneratorConfig {
            train_xz: 20,
            train_zy: 20,
            dev: 5,
            test: 5,
            ..GeneratorConfig::default()
        };
        let split = generate_trilingual(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_split(&split, dir.path()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert_eq!(m.files.len(), 10);
        let paths = SplitPaths::new(dir.path());
        let (l, r) = paths.pair("train.zy").unwrap();
        assert!(l.ends_with("train.zy.z") && r.ends_with("train.zy.y"));
        let (l, r) = paths.pair("dev.xy").unwrap();
        assert!(l.ends_with("dev.x") && r.ends_with("dev.y"));
        assert_eq!(read_lines(&r).unwrap().len(), 5);
    }
}
