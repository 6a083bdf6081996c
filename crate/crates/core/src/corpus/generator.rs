use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::MIN_VOCAB;

/// Insert a function word before every position `t` with
/// `(t + offset) % FUNCTION_PERIOD == 0`.
pub const FUNCTION_PERIOD: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub train_xz: usize,
    pub train_zy: usize,
    pub dev: usize,
    pub test: usize,
    pub latent_vocab: usize,
    /// Surface words per language; those beyond `latent_vocab` are function
    /// words.
    pub surface_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Block size of the source-side local reordering (1 disables it).
    pub reorder_window: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 1234,
            train_xz: 5000,
            train_zy: 5000,
            dev: 500,
            test: 500,
            latent_vocab: 40,
            surface_vocab: 50,
            min_len: 3,
            max_len: 9,
            reorder_window: 2,
        }
    }
}

impl GeneratorConfig {
    /// The default corpus with the source-pivot side cut to one eighth.
    pub fn small_source_pivot() -> Self {
        let d = Self::default();
        GeneratorConfig {
            train_xz: d.train_xz / 8,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence lengths must satisfy 1 <= min <= max, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.latent_vocab < MIN_VOCAB || self.surface_vocab < self.latent_vocab {
            return Err(Error::Config(format!(
                "need {MIN_VOCAB} <= latent vocab ({}) <= surface vocab ({})",
                self.latent_vocab, self.surface_vocab
            )));
        }
        if self.reorder_window == 0 {
            return Err(Error::Config("reorder window must be at least 1".into()));
        }
        if self.train_xz == 0 || self.train_zy == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one pair".into()));
        }
        Ok(())
    }

    /// Number of distinct latent sentences within the length range.
    pub fn capacity(&self) -> u128 {
        (self.min_len..=self.max_len)
            .map(|l| (self.latent_vocab as u128).checked_pow(l as u32).unwrap_or(u128::MAX))
            .fold(0u128, |a, b| a.saturating_add(b))
    }

    pub fn requested(&self) -> u128 {
        (self.train_xz + self.train_zy + self.dev + self.test) as u128
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lang {
    X,
    Z,
    Y,
}

impl Lang {
    pub const ALL: [Lang; 3] = [Lang::X, Lang::Z, Lang::Y];

    pub fn code(self) -> &'static str {
        match self {
            Lang::X => "x",
            Lang::Z => "z",
            Lang::Y => "y",
        }
    }

    fn offset(self) -> usize {
        match self {
            Lang::X => 1,
            Lang::Z => 3,
            Lang::Y => 5,
        }
    }
}

/// Surface realization rules of one synthetic language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Language {
    pub lang: Lang,
    /// Surface word index of each latent word.
    content: Vec<usize>,
    /// Surface word indices reserved for function words.
    function: Vec<usize>,
    reorder_window: usize,
}

impl Language {
    fn new(lang: Lang, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..cfg.surface_vocab).collect();
        perm.shuffle(rng);
        let function = perm.split_off(cfg.latent_vocab);
        Language {
            lang,
            content: perm,
            function,
            reorder_window: if lang == Lang::X { cfg.reorder_window } else { 1 },
        }
    }

    fn word(&self, surface: usize) -> String {
        format!("{}{surface}", self.lang.code())
    }

    /// Block reversal; its own inverse.
    fn reorder(&self, latent: &[usize]) -> Vec<usize> {
        latent
            .chunks(self.reorder_window)
            .flat_map(|c| c.iter().rev().copied())
            .collect()
    }

    pub fn render(&self, latent: &[usize]) -> String {
        let mut words = Vec::with_capacity(latent.len() + latent.len() / FUNCTION_PERIOD + 1);
        for (t, &w) in self.reorder(latent).iter().enumerate() {
            if (t + self.lang.offset()).is_multiple_of(FUNCTION_PERIOD) && !self.function.is_empty() {
                words.push(self.word(self.function[w % self.function.len()]));
            }
            words.push(self.word(self.content[w]));
        }
        words.join(" ")
    }

    /// Recovers the latent sentence; `None` for text this language cannot
    /// produce.
    pub fn parse(&self, line: &str) -> Option<Vec<usize>> {
        let mut latent = Vec::new();
        for tok in line.split_whitespace() {
            let surface: usize = tok.strip_prefix(self.lang.code())?.parse().ok()?;
            if self.function.contains(&surface) {
                continue;
            }
            latent.push(self.content.iter().position(|&c| c == surface)?);
        }
        Some(self.reorder(&latent))
    }
}

/// The three languages drawn from one seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grammar {
    languages: Vec<Language>,
}

impl Grammar {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let languages = Lang::ALL.iter().map(|&l| Language::new(l, cfg, &mut rng)).collect();
        Ok(Grammar { languages })
    }

    pub fn language(&self, lang: Lang) -> &Language {
        &self.languages[lang as usize]
    }

    /// Reference translator between any two languages.
    pub fn translate(&self, from: Lang, to: Lang, line: &str) -> Option<String> {
        let latent = self.language(from).parse(line)?;
        Some(self.language(to).render(&latent))
    }
}

pub type LinePairs = Vec<(String, String)>;

/// All corpora of one synthetic experiment. The pivot sides of `train_xz`
/// and `train_zy` are disjoint, and no dev or test source occurs in
/// training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrilingualSplit {
    pub config: GeneratorConfig,
    pub train_xz: LinePairs,
    pub train_zy: LinePairs,
    pub dev_xz: LinePairs,
    pub dev_xy: LinePairs,
    pub test_xy: LinePairs,
    /// Reference pivot sentences of the test sources.
    pub test_z: Vec<String>,
}

fn distinct_latents(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = cfg.requested() as usize;
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.latent_vocab)).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Draws distinct latent sentences and renders them into the three
/// languages, a pure function of `cfg`.
pub fn generate_trilingual(cfg: &GeneratorConfig) -> Result<TrilingualSplit> {
    let grammar = Grammar::new(cfg)?;
    let available = cfg.capacity();
    if cfg.requested() > available {
        return Err(Error::Capacity {
            requested: cfg.requested(),
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let latents = distinct_latents(cfg, &mut rng);
    let render = |lang: Lang, s: &[usize]| grammar.language(lang).render(s);
    let pairs = |range: &[Vec<usize>], a: Lang, b: Lang| -> LinePairs {
        range.iter().map(|s| (render(a, s), render(b, s))).collect()
    };
    let (xz, rest) = latents.split_at(cfg.train_xz);
    let (zy, rest) = rest.split_at(cfg.train_zy);
    let (dev, test) = rest.split_at(cfg.dev);
    Ok(TrilingualSplit {
        config: cfg.clone(),
        train_xz: pairs(xz, Lang::X, Lang::Z),
        train_zy: pairs(zy, Lang::Z, Lang::Y),
        dev_xz: pairs(dev, Lang::X, Lang::Z),
        dev_xy: pairs(dev, Lang::X, Lang::Y),
        test_xy: pairs(test, Lang::X, Lang::Y),
        test_z: test.iter().map(|s| render(Lang::Z, s)).collect(),
    })
}
