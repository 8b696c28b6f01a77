//! Language specifications and corpus sampling.
//!
//! A [`LanguageSpec`] is a doubly-embedded Markov chain: an outer chain over
//! `K` intentions and, for each intention, a letter-level chain over an
//! alphabet of `V` letters. Symbol `V` is the newline that terminates every
//! message, so models see `V + 1` symbols.
//!
//! Noise-free specs give every intention a block of dedicated letters (`a..c`
//! for intention 0, `d..f` for intention 1, ...). Noise level `eta` mixes each
//! emission row with the uniform distribution over all `V` letters.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Symbol = u8;

/// Row sums must match 1 to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

pub const SPEC_FORMAT: &str = "latentlm-spec";
pub const SPEC_VERSION: u32 = 1;

/// Largest alphabet the one-letter-per-symbol text format can carry.
pub const MAX_ALPHABET: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LengthMode {
    /// Exactly `message_length` letters, then a newline with probability 1.
    Fixed,
    /// After each letter the message ends with probability `end_prob`.
    Geometric { end_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_intentions: usize,
    pub alphabet_size: usize,
    pub letters_per_intention: usize,
    pub message_length: usize,
    /// Self-transition probability of the circular intention chain.
    pub stay_prob: f64,
    pub noise_level: f64,
    pub length_mode: LengthMode,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_intentions: 6,
            alphabet_size: 18,
            letters_per_intention: 3,
            message_length: 20,
            stay_prob: 0.5,
            noise_level: 0.0,
            length_mode: LengthMode::Fixed,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn with_noise(mut self, eta: f64) -> Self {
        self.noise_level = eta;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_intentions < 2 {
            return fail(format!("need at least 2 intentions, got {}", self.num_intentions));
        }
        if self.letters_per_intention < 1 {
            return fail("letters_per_intention must be positive".into());
        }
        if self.alphabet_size < self.num_intentions * self.letters_per_intention {
            return fail(format!(
                "alphabet of {} letters cannot hold {} intentions x {} letters",
                self.alphabet_size, self.num_intentions, self.letters_per_intention
            ));
        }
        if self.alphabet_size > MAX_ALPHABET {
            return fail(format!("alphabet size {} exceeds {MAX_ALPHABET}", self.alphabet_size));
        }
        if self.message_length < 1 || self.message_length > 250 {
            return fail(format!("message length {} outside 1..=250", self.message_length));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return fail(format!("noise level {} outside [0, 1)", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return fail(format!("stay probability {} outside [0, 1]", self.stay_prob));
        }
        if let LengthMode::Geometric { end_prob } = self.length_mode {
            if !(end_prob > 0.0 && end_prob < 1.0) {
                return fail(format!("end probability {end_prob} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub num_intentions: usize,
    pub alphabet_size: usize,
    pub letters_per_intention: usize,
    pub message_length: usize,
    pub length_mode: LengthMode,
    pub prior_transition: Vec<Vec<f64>>,
    pub prior_initial: Vec<f64>,
    /// `[intention][letter]`
    pub emission_initial: Vec<Vec<f64>>,
    /// `[intention][previous letter][next letter]`
    pub emission_transition: Vec<Vec<Vec<f64>>>,
    pub noise_level: f64,
    pub seed: u64,
}

/// Builds the spec for `config`. Pure in `config`.
///
/// Dirichlet draws are taken in a fixed order from one stream seeded by
/// `config.seed`: for each intention, its initial row, then one transition
/// row per previous letter `0..V`. Each draw covers only the intention's
/// dedicated letters.
pub fn build_spec(config: &GeneratorConfig) -> Result<LanguageSpec> {
    config.validate()?;
    let k = config.num_intentions;
    let v = config.alphabet_size;
    let lpi = config.letters_per_intention;
    let eta = config.noise_level;
    let mut rng = Rng::seed_from_u64(config.seed);

    let mut prior_transition = vec![vec![0.0; k]; k];
    for (i, row) in prior_transition.iter_mut().enumerate() {
        row[i] += config.stay_prob;
        row[(i + 1) % k] += 1.0 - config.stay_prob;
    }

    let noisy_row = |rng: &mut Rng, theta: usize| {
        let base = rng.dirichlet_ones(lpi);
        let mut row = vec![0.0; v];
        for (offset, p) in base.into_iter().enumerate() {
            row[theta * lpi + offset] = p;
        }
        mix_uniform(&mut row, eta);
        row
    };

    let mut emission_initial = Vec::with_capacity(k);
    let mut emission_transition = Vec::with_capacity(k);
    for theta in 0..k {
        emission_initial.push(noisy_row(&mut rng, theta));
        let rows = (0..v).map(|_| noisy_row(&mut rng, theta)).collect();
        emission_transition.push(rows);
    }

    let spec = LanguageSpec {
        num_intentions: k,
        alphabet_size: v,
        letters_per_intention: lpi,
        message_length: config.message_length,
        length_mode: config.length_mode,
        prior_transition,
        prior_initial: vec![1.0 / k as f64; k],
        emission_initial,
        emission_transition,
        noise_level: eta,
        seed: config.seed,
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

/// `(1 - eta) * row + eta * uniform`, in place.
pub fn mix_uniform(row: &mut [f64], eta: f64) {
    if eta == 0.0 {
        return;
    }
    let floor = eta / row.len() as f64;
    for p in row.iter_mut() {
        *p = (1.0 - eta) * *p + floor;
    }
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::Config(format!("{what}: expected {len} entries, got {}", row.len())));
    }
    if row.iter().any(|&p| p.is_nan() || p < 0.0 || !p.is_finite()) {
        return Err(Error::Config(format!("{what}: negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Config(format!("{what}: row sums to {total}")));
    }
    Ok(())
}

impl LanguageSpec {
    pub fn newline(&self) -> Symbol {
        self.alphabet_size as Symbol
    }

    /// Letters plus newline.
    pub fn symbol_count(&self) -> usize {
        self.alphabet_size + 1
    }

    pub fn dedicated_letters(&self, theta: usize) -> Range<usize> {
        theta * self.letters_per_intention..(theta + 1) * self.letters_per_intention
    }

    /// Owner of a dedicated letter, if any.
    pub fn letter_owner(&self, letter: Symbol) -> Option<usize> {
        let owner = letter as usize / self.letters_per_intention;
        (owner < self.num_intentions).then_some(owner)
    }

    pub fn is_fixed_length(&self) -> bool {
        matches!(self.length_mode, LengthMode::Fixed)
    }

    /// Checks dimensions and stochasticity of every row.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_intentions;
        let v = self.alphabet_size;
        if k < 2 || v < k * self.letters_per_intention || v > MAX_ALPHABET {
            return Err(Error::Config("inconsistent dimensions".into()));
        }
        if self.prior_transition.len() != k || self.emission_initial.len() != k {
            return Err(Error::Config("intention count mismatch".into()));
        }
        check_row(&self.prior_initial, k, "prior_initial")?;
        for (i, row) in self.prior_transition.iter().enumerate() {
            check_row(row, k, &format!("prior_transition[{i}]"))?;
        }
        for theta in 0..k {
            check_row(&self.emission_initial[theta], v, &format!("emission_initial[{theta}]"))?;
            let rows = &self.emission_transition[theta];
            if rows.len() != v {
                return Err(Error::Config(format!("emission_transition[{theta}] has {} rows", rows.len())));
            }
            for (prev, row) in rows.iter().enumerate() {
                check_row(row, v, &format!("emission_transition[{theta}][{prev}]"))?;
            }
        }
        if let LengthMode::Geometric { end_prob } = self.length_mode {
            if !(end_prob > 0.0 && end_prob < 1.0) {
                return Err(Error::Config(format!("end probability {end_prob} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of the spec.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn to_json(&self) -> String {
        let doc = SpecDocument {
            format: SPEC_FORMAT.to_string(),
            version: SPEC_VERSION,
            fingerprint: self.fingerprint(),
            spec: self.clone(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("spec serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<LanguageSpec> {
        let doc: SpecDocument =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("spec document: {e}")))?;
        if doc.format != SPEC_FORMAT {
            return Err(Error::Format(format!("unexpected format tag {:?}", doc.format)));
        }
        if doc.version != SPEC_VERSION {
            return Err(Error::Version { found: doc.version, expected: SPEC_VERSION });
        }
        doc.spec.validate()?;
        if doc.spec.fingerprint() != doc.fingerprint {
            return Err(Error::Format("fingerprint does not match content".into()));
        }
        Ok(doc.spec)
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    format: String,
    version: u32,
    fingerprint: String,
    spec: LanguageSpec,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub symbols: Vec<Symbol>,
    pub generating_intention: Option<usize>,
}

impl Message {
    pub fn new(symbols: Vec<Symbol>) -> Self {
        Message { symbols, generating_intention: None }
    }

    /// Symbols without the trailing newline.
    pub fn letters(&self) -> &[Symbol] {
        match self.symbols.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }

    /// Message from a string of letters `a..`, newline appended.
    pub fn from_letters(text: &str, alphabet_size: usize) -> Result<Message> {
        let mut symbols = Vec::with_capacity(text.len() + 1);
        for (i, c) in text.chars().enumerate() {
            let s = letter_index(c, alphabet_size)
                .ok_or_else(|| Error::MalformedMessage(format!("character {c:?} at {i} outside alphabet")))?;
            symbols.push(s);
        }
        symbols.push(alphabet_size as Symbol);
        Ok(Message::new(symbols))
    }

    pub fn to_text(&self) -> String {
        self.letters().iter().map(|&s| (b'a' + s) as char).collect()
    }
}

fn letter_index(c: char, alphabet_size: usize) -> Option<Symbol> {
    let idx = (c as u32).checked_sub('a' as u32)? as usize;
    (idx < alphabet_size).then_some(idx as Symbol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentionMode {
    /// Intentions follow the prior chain across messages.
    Chain,
    /// One intention for every message: the given one, or a single draw from
    /// the initial prior.
    Clamped(Option<usize>),
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub messages: Vec<Message>,
    pub mode: IntentionMode,
    pub alphabet_size: usize,
    pub message_length: usize,
    pub spec_fingerprint: Option<String>,
}

pub fn sample_intention_path(
    spec: &LanguageSpec,
    mode: IntentionMode,
    count: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    assert!(count >= 1, "intention path needs at least one step");
    let first = match mode {
        IntentionMode::Clamped(Some(theta)) => {
            assert!(theta < spec.num_intentions, "intention {theta} out of range");
            theta
        }
        _ => rng.categorical(&spec.prior_initial),
    };
    match mode {
        IntentionMode::Clamped(_) => vec![first; count],
        IntentionMode::Chain => {
            let mut path = Vec::with_capacity(count);
            path.push(first);
            for _ in 1..count {
                let prev = *path.last().unwrap();
                path.push(rng.categorical(&spec.prior_transition[prev]));
            }
            path
        }
    }
}

pub fn sample_message(spec: &LanguageSpec, intention: usize, rng: &mut Rng) -> Message {
    assert!(intention < spec.num_intentions, "intention {intention} out of range");
    let mut symbols = Vec::with_capacity(spec.message_length + 1);
    let mut letter = rng.categorical(&spec.emission_initial[intention]) as Symbol;
    symbols.push(letter);
    loop {
        let done = match spec.length_mode {
            LengthMode::Fixed => symbols.len() == spec.message_length,
            LengthMode::Geometric { end_prob } => rng.uniform() < end_prob,
        };
        if done {
            break;
        }
        letter = rng.categorical(&spec.emission_transition[intention][letter as usize]) as Symbol;
        symbols.push(letter);
    }
    symbols.push(spec.newline());
    Message { symbols, generating_intention: Some(intention) }
}

/// Samples a corpus. One draw from `rng` seeds the run; the intention path
/// and each message then use their own derived streams, so messages are
/// generated in parallel without affecting the output.
pub fn sample_corpus(
    spec: &LanguageSpec,
    num_messages: usize,
    mode: IntentionMode,
    rng: &mut Rng,
) -> Corpus {
    assert!(num_messages >= 1, "corpus needs at least one message");
    let base = rng.next_u64();
    let path = sample_intention_path(spec, mode, num_messages, &mut Rng::stream(base, "path", 0));
    let messages = path
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| sample_message(spec, theta, &mut Rng::stream(base, "message", i as u64)))
        .collect();
    Corpus {
        messages,
        mode,
        alphabet_size: spec.alphabet_size,
        message_length: spec.message_length,
        spec_fingerprint: Some(spec.fingerprint()),
    }
}

impl Corpus {
    pub fn num_symbols(&self) -> usize {
        self.messages.iter().map(|m| m.symbols.len()).sum()
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        self.messages.iter().flat_map(|m| m.symbols.iter().copied())
    }

    pub fn intentions(&self) -> Option<Vec<usize>> {
        self.messages.iter().map(|m| m.generating_intention).collect()
    }

    /// First messages holding at least `n` symbols in total.
    pub fn prefix_with_symbols(&self, n: usize) -> Corpus {
        let mut total = 0;
        let count = self
            .messages
            .iter()
            .take_while(|m| {
                let keep = total < n;
                total += m.symbols.len();
                keep
            })
            .count();
        Corpus { messages: self.messages[..count].to_vec(), ..self.clone_header() }
    }

    fn clone_header(&self) -> Corpus {
        Corpus {
            messages: Vec::new(),
            mode: self.mode,
            alphabet_size: self.alphabet_size,
            message_length: self.message_length,
            spec_fingerprint: self.spec_fingerprint.clone(),
        }
    }

    /// One message per line, letters `a..`, newline-terminated.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = Vec::with_capacity(self.message_length + 1);
        for m in &self.messages {
            line.clear();
            line.extend(m.letters().iter().map(|&s| b'a' + s));
            line.push(b'\n');
            out.write_all(&line)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Generating intentions, one per line, aligned with the corpus lines.
    pub fn write_intentions<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.messages {
            match m.generating_intention {
                Some(theta) => writeln!(out, "{theta}")?,
                None => return Err(Error::Format("message without recorded intention".into())),
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parses the text format. With `fixed_length`, every line must hold
    /// exactly `message_length` letters.
    pub fn read_text<R: BufRead>(
        reader: R,
        alphabet_size: usize,
        message_length: usize,
        fixed_length: bool,
    ) -> Result<Corpus> {
        let mut messages = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let bad = |reason: String| Error::CorpusLine { line: lineno, reason };
            if line.is_empty() {
                return Err(bad("empty message".into()));
            }
            let msg = Message::from_letters(&line, alphabet_size).map_err(|e| bad(e.to_string()))?;
            if fixed_length && msg.letters().len() != message_length {
                return Err(bad(format!("expected {message_length} letters, found {}", msg.letters().len())));
            }
            messages.push(msg);
        }
        if messages.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            messages,
            mode: IntentionMode::Chain,
            alphabet_size,
            message_length,
            spec_fingerprint: None,
        })
    }

    /// Attaches a sidecar of generating intentions.
    pub fn read_intentions<R: BufRead>(&mut self, reader: R) -> Result<()> {
        let mut values = Vec::with_capacity(self.messages.len());
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let theta: usize = line.trim().parse().map_err(|_| Error::CorpusLine {
                line: i + 1,
                reason: format!("not an intention index: {line:?}"),
            })?;
            values.push(theta);
        }
        if values.len() != self.messages.len() {
            return Err(Error::Format(format!(
                "sidecar has {} entries for {} messages",
                values.len(),
                self.messages.len()
            )));
        }
        for (m, theta) in self.messages.iter_mut().zip(values) {
            m.generating_intention = Some(theta);
        }
        Ok(())
    }
}
