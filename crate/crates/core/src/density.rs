//! Smoothed count model of the next symbol.
//!
//! The model conditions on a [`FeatureContext`]: the last `k` symbols of the
//! stream and the number of letters already emitted in the current message.
//! Training is the closed-form maximum-likelihood fold over `(context, next)`
//! events, with additive smoothing `lambda` at prediction time.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langspec::{Corpus, Symbol};
use crate::math::total_variation;
use crate::oracle::{FilterState, Oracle};

pub const MODEL_FORMAT: &str = "latentlm-density-model";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Anything that predicts the next symbol from a running state.
pub trait NextSymbolModel {
    type State: Clone;

    fn symbol_count(&self) -> usize;
    fn start(&self) -> Self::State;
    fn predict(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &mut Self::State, symbol: Symbol) -> Result<()>;

    fn next_symbol(&self, history: &[Symbol]) -> Result<Vec<f64>> {
        let mut state = self.start();
        for &s in history {
            self.advance(&mut state, s)?;
        }
        Ok(self.predict(&state))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureContext {
    /// Oldest first; the begin marker pads the start of a stream.
    pub history: Vec<Symbol>,
    pub position: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    k: usize,
    lambda: f64,
    alphabet_size: usize,
    message_length: usize,
    counts: BTreeMap<FeatureContext, Vec<u64>>,
    total_training_symbols: u64,
}

/// Running context of a [`DensityModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    context: FeatureContext,
}

impl DensityModel {
    /// Untrained model: every prediction is uniform.
    pub fn empty(k: usize, lambda: f64, alphabet_size: usize, message_length: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("context order must be at least 1".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("smoothing constant {lambda} must be positive")));
        }
        Ok(DensityModel {
            k,
            lambda,
            alphabet_size,
            message_length,
            counts: BTreeMap::new(),
            total_training_symbols: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn total_training_symbols(&self) -> u64 {
        self.total_training_symbols
    }

    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self, context: &FeatureContext) -> Option<&[u64]> {
        self.counts.get(context).map(Vec::as_slice)
    }

    fn newline(&self) -> Symbol {
        self.alphabet_size as Symbol
    }

    fn begin_marker(&self) -> Symbol {
        self.alphabet_size as Symbol + 1
    }

    fn initial_context(&self) -> FeatureContext {
        FeatureContext { history: vec![self.begin_marker(); self.k], position: 0 }
    }

    fn push(&self, context: &mut FeatureContext, symbol: Symbol) {
        context.history.remove(0);
        context.history.push(symbol);
        context.position = if symbol == self.newline() {
            0
        } else {
            (context.position as usize + 1).min(self.message_length) as u8
        };
    }

    /// Context features for the symbol following `history`.
    pub fn context_of(&self, history: &[Symbol]) -> FeatureContext {
        let mut ctx = self.initial_context();
        let start = history.len().saturating_sub(self.k);
        for (i, &s) in history[start..].iter().enumerate() {
            ctx.history[self.k - (history.len() - start) + i] = s;
        }
        let since_newline = history.iter().rev().take_while(|&&s| s != self.newline()).count();
        ctx.position = since_newline.min(self.message_length) as u8;
        ctx
    }

    /// `(counts + lambda)` normalized; unseen contexts are uniform.
    pub fn predict_context(&self, context: &FeatureContext) -> Vec<f64> {
        let n = self.alphabet_size + 1;
        match self.counts.get(context) {
            None => vec![1.0 / n as f64; n],
            Some(c) => {
                let total = c.iter().sum::<u64>() as f64 + self.lambda * n as f64;
                c.iter().map(|&x| (x as f64 + self.lambda) / total).collect()
            }
        }
    }

    /// `ln p(x_1, ..., x_T)` by the chain rule.
    pub fn sequence_logprob(&self, symbols: &[Symbol]) -> f64 {
        let mut ctx = self.initial_context();
        let mut total = 0.0;
        for &s in symbols {
            total += self.predict_context(&ctx)[s as usize].ln();
            self.push(&mut ctx, s);
        }
        total
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DensityModel> {
        DensityModel::from_json(&std::fs::read_to_string(path)?)
    }

    /// Versioned JSON with contexts in canonical order.
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            k: self.k,
            lambda: self.lambda,
            alphabet_size: self.alphabet_size,
            message_length: self.message_length,
            total_training_symbols: self.total_training_symbols,
            contexts: self
                .counts
                .iter()
                .map(|(ctx, counts)| ContextRecord {
                    history: ctx.history.clone(),
                    position: ctx.position,
                    counts: counts.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&file).expect("model serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<DensityModel> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model file is not JSON: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::Format("missing model format tag".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("missing version".into()))?;
        if version != u64::from(MODEL_VERSION) {
            return Err(Error::Version { found: version as u32, expected: MODEL_VERSION });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = DensityModel::empty(file.k, file.lambda, file.alphabet_size, file.message_length)?;
        model.total_training_symbols = file.total_training_symbols;
        for rec in file.contexts {
            if rec.history.len() != file.k || rec.counts.len() != file.alphabet_size + 1 {
                return Err(Error::Format("context record has wrong dimensions".into()));
            }
            model.counts.insert(FeatureContext { history: rec.history, position: rec.position }, rec.counts);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    k: usize,
    lambda: f64,
    alphabet_size: usize,
    message_length: usize,
    total_training_symbols: u64,
    contexts: Vec<ContextRecord>,
}

#[derive(Serialize, Deserialize)]
struct ContextRecord {
    history: Vec<Symbol>,
    position: u8,
    counts: Vec<u64>,
}

const TRAIN_CHUNK: usize = 1 << 16;

/// Counts every `(context, next symbol)` event of the concatenated corpus.
///
/// Chunks of the stream are counted in parallel and merged; counts are
/// integers, so the merge order does not affect the model.
pub fn train(corpus: &Corpus, k: usize, lambda: f64) -> Result<DensityModel> {
    if corpus.messages.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = DensityModel::empty(k, lambda, corpus.alphabet_size, corpus.message_length)?;
    let stream: Vec<Symbol> = corpus.symbols().collect();
    if stream.iter().any(|&s| s as usize > corpus.alphabet_size) {
        return Err(Error::SpecMismatch("corpus symbol outside the alphabet".into()));
    }
    let nl = model.newline();
    let cap = model.message_length;
    let mut positions = Vec::with_capacity(stream.len());
    let mut pos = 0usize;
    for &s in &stream {
        positions.push(pos.min(cap) as u8);
        pos = if s == nl { 0 } else { pos + 1 };
    }

    let nsym = corpus.alphabet_size + 1;
    let begin = model.begin_marker();
    let model_ref = &model;
    let counts = (0..stream.len())
        .into_par_iter()
        .step_by(TRAIN_CHUNK)
        .map(|start| {
            let end = (start + TRAIN_CHUNK).min(stream.len());
            let mut local: BTreeMap<FeatureContext, Vec<u64>> = BTreeMap::new();
            let mut ctx = FeatureContext { history: vec![begin; k], position: positions[start] };
            for j in 0..k {
                if let Some(idx) = (start + j).checked_sub(k) {
                    ctx.history[j] = stream[idx];
                }
            }
            for &s in &stream[start..end] {
                local.entry(ctx.clone()).or_insert_with(|| vec![0; nsym])[s as usize] += 1;
                model_ref.push(&mut ctx, s);
            }
            local
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (ctx, c) in b {
                match a.get_mut(&ctx) {
                    Some(acc) => acc.iter_mut().zip(c).for_each(|(x, y)| *x += y),
                    None => {
                        a.insert(ctx, c);
                    }
                }
            }
            a
        });
    model.counts = counts;
    model.total_training_symbols = stream.len() as u64;
    Ok(model)
}

impl NextSymbolModel for DensityModel {
    type State = ContextState;

    fn symbol_count(&self) -> usize {
        self.alphabet_size + 1
    }

    fn start(&self) -> ContextState {
        ContextState { context: self.initial_context() }
    }

    fn predict(&self, state: &ContextState) -> Vec<f64> {
        self.predict_context(&state.context)
    }

    fn advance(&self, state: &mut ContextState, symbol: Symbol) -> Result<()> {
        if symbol as usize > self.alphabet_size {
            return Err(Error::SpecMismatch(format!("symbol {symbol} outside the model alphabet")));
        }
        self.push(&mut state.context, symbol);
        Ok(())
    }
}

impl NextSymbolModel for Oracle {
    type State = FilterState;

    fn symbol_count(&self) -> usize {
        self.spec().symbol_count()
    }

    fn start(&self) -> FilterState {
        self.filter()
    }

    fn predict(&self, state: &FilterState) -> Vec<f64> {
        Oracle::predict(self, state)
    }

    fn advance(&self, state: &mut FilterState, symbol: Symbol) -> Result<()> {
        self.observe(state, symbol).map(|_| ())
    }
}

/// `-(1/N) sum ln p(x_t | x_<t)` over every symbol of the corpus, in nats.
pub fn cross_entropy<M: NextSymbolModel>(model: &M, corpus: &Corpus) -> Result<f64> {
    let n = corpus.num_symbols();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut state = model.start();
    let mut total = 0.0;
    for s in corpus.symbols() {
        total -= model.predict(&state)[s as usize].ln();
        model.advance(&mut state, s)?;
    }
    Ok(total / n as f64)
}

/// Mean total-variation distance between the model's and the oracle's
/// next-symbol distributions over every position of `eval`.
pub fn mean_tv_gap<M: NextSymbolModel>(model: &M, oracle: &Oracle, eval: &Corpus) -> Result<f64> {
    let spec = oracle.spec();
    if model.symbol_count() != spec.symbol_count() {
        return Err(Error::SpecMismatch(format!(
            "model predicts {} symbols, spec has {}",
            model.symbol_count(),
            spec.symbol_count()
        )));
    }
    if eval.symbols().any(|s| s as usize >= spec.symbol_count()) {
        return Err(Error::SpecMismatch("evaluation symbols exceed the spec alphabet".into()));
    }
    let n = eval.num_symbols();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut m_state = model.start();
    let mut o_state = oracle.filter();
    let mut total = 0.0;
    for s in eval.symbols() {
        total += total_variation(&model.predict(&m_state), &oracle.predict(&o_state));
        model.advance(&mut m_state, s)?;
        oracle.observe(&mut o_state, s)?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langspec::{build_spec, sample_corpus, GeneratorConfig, IntentionMode, Message};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn corpus(eta: f64, n: usize, seed: u64) -> (Oracle, Corpus) {
        let spec = build_spec(&GeneratorConfig::default().with_noise(eta)).unwrap();
        let c = sample_corpus(&spec, n, IntentionMode::Chain, &mut Rng::seed_from_u64(seed));
        (Oracle::new(spec), c)
    }

    #[test]
    fn one_message_gives_one_event_per_symbol() {
        let (_, c) = corpus(0.0, 1, 1);
        let m = train(&c, 1, 0.1).unwrap();
        let events: u64 = m.counts.values().flatten().sum();
        assert_eq!(events, 21);
        assert_eq!(m.total_training_symbols(), 21);
    }

    #[test]
    fn parallel_counting_matches_sequential_fold() {
        let (_, c) = corpus(0.2, 8000, 2);
        for k in [1, 3] {
            let m = train(&c, k, 0.1).unwrap();
            let mut expected: BTreeMap<FeatureContext, Vec<u64>> = BTreeMap::new();
            let mut ctx = m.initial_context();
            for s in c.symbols() {
                expected.entry(ctx.clone()).or_insert_with(|| vec![0; 19])[s as usize] += 1;
                m.push(&mut ctx, s);
            }
            assert!(c.num_symbols() > TRAIN_CHUNK);
            assert_eq!(m.counts, expected);
        }
    }

    #[test]
    fn small_lambda_approaches_mle() {
        let (_, c) = corpus(0.0, 50, 3);
        let m = train(&c, 1, 1e-12).unwrap();
        let (ctx, counts) = m.counts.iter().max_by_key(|(_, c)| c.iter().sum::<u64>()).unwrap();
        let n: u64 = counts.iter().sum();
        let p = m.predict_context(ctx);
        for (s, &c) in counts.iter().enumerate() {
            assert!((p[s] - c as f64 / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let (_, c) = corpus(0.0, 10, 4);
        let m = train(&c, 2, 0.1).unwrap();
        let p = m.next_symbol(&[17, 0, 0]).unwrap();
        assert!(p.iter().all(|&x| x == 1.0 / 19.0));
    }

    #[test]
    fn terminator_is_learned_at_last_position() {
        let (_, c) = corpus(0.0, 2000, 5);
        let m = train(&c, 1, 0.1).unwrap();
        let mut history: Vec<Symbol> = c.messages[0].letters().to_vec();
        history.truncate(20);
        assert!(m.next_symbol(&history).unwrap()[18] > 0.99);
    }

    #[test]
    fn context_features() {
        let m = DensityModel::empty(3, 0.1, 18, 20).unwrap();
        let ctx = m.context_of(&[]);
        assert_eq!(ctx, FeatureContext { history: vec![19, 19, 19], position: 0 });
        let ctx = m.context_of(&[0, 1, 18, 4]);
        assert_eq!(ctx, FeatureContext { history: vec![1, 18, 4], position: 1 });
        let long = vec![2u8; 30];
        assert_eq!(m.context_of(&long).position, 20);
    }

    #[test]
    fn cross_entropy_of_untrained_model() {
        let (_, c) = corpus(0.0, 20, 6);
        let m = DensityModel::empty(1, 0.1, 18, 20).unwrap();
        let ce = cross_entropy(&m, &c).unwrap();
        assert!((ce - 19f64.ln()).abs() < 1e-12);
        assert!((19f64.ln() - 2.944).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_on_own_training_message() {
        // Single message, lambda -> 0: the loss equals the empirical
        // conditional entropy of the message's (context, symbol) events.
        let (_, c) = corpus(0.0, 1, 7);
        let m = train(&c, 1, 1e-12).unwrap();
        let mut empirical = 0.0;
        for counts in m.counts.values() {
            let n: u64 = counts.iter().sum();
            for &x in counts.iter().filter(|&&x| x > 0) {
                empirical -= x as f64 * (x as f64 / n as f64).ln();
            }
        }
        empirical /= 21.0;
        assert!((cross_entropy(&m, &c).unwrap() - empirical).abs() < 1e-9);
    }

    #[test]
    fn sequence_logprob_matches_step_sum() {
        let (_, c) = corpus(0.1, 300, 8);
        let m = train(&c, 2, 0.1).unwrap();
        let probe: Vec<Symbol> = c.messages[17].symbols.iter().chain(&c.messages[3].symbols).copied().collect();
        let mut resum = 0.0;
        for t in 0..probe.len() {
            resum += m.next_symbol(&probe[..t]).unwrap()[probe[t] as usize].ln();
        }
        assert!((m.sequence_logprob(&probe) - resum).abs() < 1e-10);
        assert_eq!(m.sequence_logprob(&probe[..1]), m.next_symbol(&[]).unwrap()[probe[0] as usize].ln());
        for t in 1..probe.len() {
            assert!(m.sequence_logprob(&probe[..t + 1]) < m.sequence_logprob(&probe[..t]));
        }
    }

    #[test]
    fn oracle_has_zero_gap_against_itself() {
        let (o, c) = corpus(0.05, 30, 9);
        assert_eq!(mean_tv_gap(&o, &o, &c).unwrap(), 0.0);
    }

    #[test]
    fn untrained_gap_at_deterministic_positions() {
        // At the terminator position the oracle is a point mass on newline
        // and the untrained model is uniform: TV = 1 - 1/19.
        let (o, _) = corpus(0.0, 1, 10);
        let m = DensityModel::empty(1, 0.1, 18, 20).unwrap();
        let msg = Message::from_letters("abcabcabcabcabcabcab", 18).unwrap();
        let tv = total_variation(&m.next_symbol(msg.letters()).unwrap(), &o.next_symbol_marginal(msg.letters()).unwrap());
        assert!((tv - (1.0 - 1.0 / 19.0)).abs() < 1e-12);
    }

    #[test]
    fn gap_rejects_mismatched_alphabets() {
        let (o, c) = corpus(0.0, 5, 11);
        let m = DensityModel::empty(1, 0.1, 17, 20).unwrap();
        assert!(matches!(mean_tv_gap(&m, &o, &c), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn empty_corpus_and_bad_parameters() {
        let (_, mut c) = corpus(0.0, 1, 12);
        c.messages.clear();
        assert!(matches!(train(&c, 1, 0.1), Err(Error::EmptyCorpus)));
        assert!(matches!(cross_entropy(&DensityModel::empty(1, 0.1, 18, 20).unwrap(), &c), Err(Error::EmptyCorpus)));
        assert!(DensityModel::empty(0, 0.1, 18, 20).is_err());
        assert!(DensityModel::empty(1, 0.0, 18, 20).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (_, c) = corpus(0.1, 500, 13);
        let m = train(&c, 3, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = DensityModel::load(&path).unwrap();
        assert_eq!(back, m);
        let mut rng = Rng::seed_from_u64(14);
        for _ in 0..100 {
            let len = rng.below(40);
            let h: Vec<Symbol> = (0..len).map(|_| rng.below(19) as Symbol).collect();
            assert_eq!(m.next_symbol(&h).unwrap(), back.next_symbol(&h).unwrap());
        }
    }

    #[test]
    fn load_rejects_bad_magic_and_version() {
        let m = DensityModel::empty(1, 0.1, 18, 20).unwrap();
        let text = m.to_json();
        let corrupted = text.replacen(MODEL_FORMAT, "latentlm-densXty-model", 1);
        assert!(matches!(DensityModel::from_json(&corrupted), Err(Error::Format(_))));
        assert!(matches!(DensityModel::from_json("\u{0}garbage"), Err(Error::Format(_))));
        let old = text.replacen("\"version\":1", "\"version\":0", 1);
        assert!(matches!(DensityModel::from_json(&old), Err(Error::Version { found: 0, .. })));
    }

    proptest! {
        #[test]
        fn predictions_are_positive_and_normalized(
            history in proptest::collection::vec(0u8..19, 0..60),
            k in 1usize..4,
            seed in 0u64..4,
        ) {
            let (_, c) = corpus(0.1, 100, seed);
            let m = train(&c, k, 0.1).unwrap();
            let p = m.next_symbol(&history).unwrap();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
