//! Exact inference over a [`LanguageSpec`].
//!
//! The latent space is small, so every quantity here is computed exactly:
//! per-intention likelihoods, posteriors, ambiguity, the forward recursion
//! over the intention chain, and the next-symbol conditional of the ideal
//! model `p(x_t | x_<t) = q(x_t | x_<t)`.
//!
//! Priors over the intention of the first observed message use the
//! stationary distribution of the intention chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langspec::{LanguageSpec, LengthMode, Message, Symbol};
use crate::math::{argmax, ln, log_sum_exp, softmax};

const STATIONARY_TOL: f64 = 1e-12;

/// What happens to a conditioned intention when a message ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// The intention moves along the prior chain.
    Chain,
    /// The intention is shared by every message.
    Clamped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector {
    pub probs: Vec<f64>,
    /// `ln q(theta, observations)` per intention.
    pub log_joint: Vec<f64>,
    pub log_evidence: f64,
}

impl PosteriorVector {
    fn from_log_joint(log_joint: Vec<f64>) -> Result<Self> {
        let log_evidence = log_sum_exp(&log_joint);
        if log_evidence == f64::NEG_INFINITY {
            return Err(Error::DegenerateEvidence);
        }
        let probs = softmax(&log_joint);
        Ok(PosteriorVector { probs, log_joint, log_evidence })
    }

    /// `1 - Pr(theta | x)`, computed from the other intentions' mass so
    /// that tiny residuals keep full precision.
    pub fn residual(&self, theta: usize) -> f64 {
        (self.log_residual(theta) - self.log_evidence).exp()
    }

    /// `ln q(Theta \ theta, x)`.
    pub fn log_residual(&self, theta: usize) -> f64 {
        let others: Vec<f64> = self
            .log_joint
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != theta)
            .map(|(_, &w)| w)
            .collect();
        log_sum_exp(&others)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityReport {
    /// `1 - max_theta Pr(theta | x)`.
    pub epsilon: f64,
    pub argmax_intention: usize,
    pub matches_generating: Option<bool>,
    /// `1 - Pr(theta_x | x)` for the recorded generating intention.
    pub generating_epsilon: Option<f64>,
    /// `ln q(argmax, x) - ln q(Theta \ argmax, x)`; `+inf` when the rest is 0.
    pub log_dominance_ratio: f64,
}

impl AmbiguityReport {
    /// `ln((1 - eps) / eps)`.
    pub fn log_dominance_bound(&self) -> f64 {
        (-self.epsilon).ln_1p() - ln(self.epsilon)
    }
}

/// Forward-filtering state: posterior over the current message's intention
/// given everything observed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub posterior: Vec<f64>,
    /// Letters seen in the current message, capped at the message length.
    pub position: usize,
    pub last: Option<Symbol>,
    pub boundary: Boundary,
    /// `ln` probability of everything observed.
    pub log_prob: f64,
    pub steps: usize,
}

/// Mixture over "the first message has intention lambda" components, each a
/// one-hot [`FilterState`], weighted by their posterior.
#[derive(Debug, Clone)]
pub struct MixtureFilter {
    components: Vec<Option<FilterState>>,
    log_weights: Vec<f64>,
}

impl MixtureFilter {
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_weights)
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `None` once the component has assigned zero probability to the data.
    pub fn component(&self, theta: usize) -> Option<&FilterState> {
        self.components[theta].as_ref()
    }
}

pub struct Oracle {
    spec: LanguageSpec,
    prior: Vec<f64>,
    log_prior: Vec<f64>,
    log_transition: Vec<Vec<f64>>,
    log_initial: Vec<Vec<f64>>,
    log_emission: Vec<Vec<Vec<f64>>>,
}

/// Stationary distribution by lazy power iteration, `pi <- pi (I + T) / 2`,
/// which shares its fixed point with `T` and converges for periodic chains.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; k];
        for (i, row) in transition.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                next[j] += pi[i] * t;
            }
        }
        for (n, p) in next.iter_mut().zip(&pi) {
            *n = 0.5 * (*n + p);
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|n| *n /= total);
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < STATIONARY_TOL {
            break;
        }
    }
    pi
}

impl Oracle {
    pub fn new(spec: LanguageSpec) -> Self {
        let prior = stationary_distribution(&spec.prior_transition);
        let log_prior = prior.iter().map(|&p| ln(p)).collect();
        let log_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect()
        };
        let log_transition = log_rows(&spec.prior_transition);
        let log_initial = log_rows(&spec.emission_initial);
        let log_emission = spec.emission_transition.iter().map(|m| log_rows(m)).collect();
        Oracle { spec, prior, log_prior, log_transition, log_initial, log_emission }
    }

    pub fn spec(&self) -> &LanguageSpec {
        &self.spec
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    fn newline(&self) -> Symbol {
        self.spec.newline()
    }

    fn check_prefix(&self, symbols: &[Symbol]) -> Result<()> {
        let nl = self.newline();
        for (i, &s) in symbols.iter().enumerate() {
            if s > nl {
                return Err(Error::MalformedMessage(format!("symbol {s} at {i} outside alphabet")));
            }
            if s == nl && i + 1 != symbols.len() {
                return Err(Error::MalformedMessage(format!("terminator at {i} before the end")));
            }
        }
        let letters = symbols.iter().filter(|&&s| s != nl).count();
        if letters == 0 {
            return Err(Error::MalformedMessage("message has no letters".into()));
        }
        if self.spec.is_fixed_length() && letters > self.spec.message_length {
            return Err(Error::MalformedMessage(format!(
                "{letters} letters exceed the message length {}",
                self.spec.message_length
            )));
        }
        Ok(())
    }

    fn check_message(&self, symbols: &[Symbol]) -> Result<()> {
        self.check_prefix(symbols)?;
        if symbols.last() != Some(&self.newline()) {
            return Err(Error::MalformedMessage("missing terminator".into()));
        }
        if self.spec.is_fixed_length() && symbols.len() != self.spec.message_length + 1 {
            return Err(Error::MalformedMessage(format!(
                "expected {} letters, found {}",
                self.spec.message_length,
                symbols.len() - 1
            )));
        }
        Ok(())
    }

    /// `ln q(prefix | theta)` for a message prefix: letters, optionally ended
    /// by the terminator.
    pub fn prefix_loglik(&self, symbols: &[Symbol], theta: usize) -> Result<f64> {
        self.check_prefix(symbols)?;
        Ok(self.prefix_loglik_unchecked(symbols, theta))
    }

    fn prefix_loglik_unchecked(&self, symbols: &[Symbol], theta: usize) -> f64 {
        let nl = self.newline();
        let terminated = symbols.last() == Some(&nl);
        let letters = if terminated { &symbols[..symbols.len() - 1] } else { symbols };
        let mut total = self.log_initial[theta][letters[0] as usize];
        for w in letters.windows(2) {
            total += self.log_emission[theta][w[0] as usize][w[1] as usize];
        }
        if let LengthMode::Geometric { end_prob } = self.spec.length_mode {
            total += (letters.len() - 1) as f64 * (-end_prob).ln_1p();
            if terminated {
                total += end_prob.ln();
            }
        }
        total
    }

    /// `ln q(x | theta)` for a complete message; `-inf` on zero-probability
    /// paths.
    pub fn message_loglik(&self, x: &Message, theta: usize) -> Result<f64> {
        self.check_message(&x.symbols)?;
        Ok(self.prefix_loglik_unchecked(&x.symbols, theta))
    }

    fn log_joint(&self, symbols: &[Symbol]) -> Vec<f64> {
        (0..self.spec.num_intentions)
            .map(|theta| self.log_prior[theta] + self.prefix_loglik_unchecked(symbols, theta))
            .collect()
    }

    pub fn posterior_single(&self, x: &Message) -> Result<PosteriorVector> {
        self.check_message(&x.symbols)?;
        PosteriorVector::from_log_joint(self.log_joint(&x.symbols))
    }

    /// Posterior over the intention of a (possibly partial) message.
    pub fn posterior_prefix(&self, symbols: &[Symbol]) -> Result<PosteriorVector> {
        self.check_prefix(symbols)?;
        PosteriorVector::from_log_joint(self.log_joint(symbols))
    }

    /// Posterior over one intention shared by every message.
    pub fn posterior_tied(&self, messages: &[Message]) -> Result<PosteriorVector> {
        for m in messages {
            self.check_message(&m.symbols)?;
        }
        let parts: Vec<&[Symbol]> = messages.iter().map(|m| m.symbols.as_slice()).collect();
        self.posterior_tied_parts(&parts)
    }

    /// Tied posterior over arbitrary parts; each part is a message prefix.
    pub fn posterior_tied_parts(&self, parts: &[&[Symbol]]) -> Result<PosteriorVector> {
        assert!(!parts.is_empty(), "tied posterior needs at least one part");
        for p in parts {
            self.check_prefix(p)?;
        }
        let log_joint = (0..self.spec.num_intentions)
            .map(|theta| {
                self.log_prior[theta]
                    + parts.iter().map(|p| self.prefix_loglik_unchecked(p, theta)).sum::<f64>()
            })
            .collect();
        PosteriorVector::from_log_joint(log_joint)
    }

    pub fn ambiguity(&self, x: &Message) -> Result<AmbiguityReport> {
        let post = self.posterior_single(x)?;
        Ok(ambiguity_report(&post, x.generating_intention))
    }

    /// `ln q(x_1, ..., x_m)` by the forward recursion over the intention chain.
    pub fn sequence_logmarginal(&self, messages: &[Message]) -> Result<f64> {
        assert!(!messages.is_empty(), "sequence needs at least one message");
        let k = self.spec.num_intentions;
        let mut alpha: Vec<f64> = Vec::with_capacity(k);
        for (j, m) in messages.iter().enumerate() {
            self.check_message(&m.symbols)?;
            let lik: Vec<f64> = (0..k).map(|t| self.prefix_loglik_unchecked(&m.symbols, t)).collect();
            alpha = if j == 0 {
                (0..k).map(|t| self.log_prior[t] + lik[t]).collect()
            } else {
                (0..k)
                    .map(|t| {
                        let incoming: Vec<f64> =
                            (0..k).map(|s| alpha[s] + self.log_transition[s][t]).collect();
                        log_sum_exp(&incoming) + lik[t]
                    })
                    .collect()
            };
        }
        Ok(log_sum_exp(&alpha))
    }

    /// Filter over the stationary prior with chain boundaries: the exact
    /// marginal next-symbol model.
    pub fn filter(&self) -> FilterState {
        self.filter_with(self.prior.clone(), Boundary::Chain)
    }

    /// Filter with the current intention fixed to `theta`.
    pub fn filter_conditioned(&self, theta: usize, boundary: Boundary) -> FilterState {
        let mut posterior = vec![0.0; self.spec.num_intentions];
        posterior[theta] = 1.0;
        self.filter_with(posterior, boundary)
    }

    /// Filter over the stationary prior, shared intention across messages.
    pub fn filter_tied(&self) -> FilterState {
        self.filter_with(self.prior.clone(), Boundary::Clamped)
    }

    pub fn filter_with(&self, posterior: Vec<f64>, boundary: Boundary) -> FilterState {
        assert_eq!(posterior.len(), self.spec.num_intentions);
        FilterState { posterior, position: 0, last: None, boundary, log_prob: 0.0, steps: 0 }
    }

    fn emission_row(&self, theta: usize, state: &FilterState) -> &[f64] {
        match state.last {
            None => &self.spec.emission_initial[theta],
            Some(prev) => &self.spec.emission_transition[theta][prev as usize],
        }
    }

    /// Next-symbol distribution over `V + 1` symbols.
    pub fn predict(&self, state: &FilterState) -> Vec<f64> {
        let nsym = self.spec.symbol_count();
        let nl = self.newline() as usize;
        let mut dist = vec![0.0; nsym];
        if self.spec.is_fixed_length() && state.position >= self.spec.message_length {
            dist[nl] = 1.0;
            return dist;
        }
        for (theta, &w) in state.posterior.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (d, &p) in dist.iter_mut().zip(self.emission_row(theta, state)) {
                *d += w * p;
            }
        }
        if let LengthMode::Geometric { end_prob } = self.spec.length_mode {
            if state.position > 0 {
                dist.iter_mut().for_each(|d| *d *= 1.0 - end_prob);
                dist[nl] = end_prob;
            }
        }
        dist
    }

    /// Consumes one symbol; returns its predictive probability.
    pub fn observe(&self, state: &mut FilterState, symbol: Symbol) -> Result<f64> {
        let invalid = |reason: String| Error::InvalidPrefix { position: state.steps, reason };
        if symbol as usize >= self.spec.symbol_count() {
            return Err(invalid(format!("symbol {symbol} outside alphabet")));
        }
        let p = self.predict(state)[symbol as usize];
        if p <= 0.0 {
            return Err(invalid(format!("symbol {symbol} has zero probability")));
        }
        if symbol == self.newline() {
            if state.boundary == Boundary::Chain {
                let k = self.spec.num_intentions;
                let mut next = vec![0.0; k];
                for (i, &w) in state.posterior.iter().enumerate() {
                    for (n, &t) in next.iter_mut().zip(&self.spec.prior_transition[i]) {
                        *n += w * t;
                    }
                }
                state.posterior = next;
            }
            state.position = 0;
            state.last = None;
        } else {
            let lik: Vec<f64> = (0..self.spec.num_intentions)
                .map(|theta| self.emission_row(theta, state)[symbol as usize])
                .collect();
            let mut total = 0.0;
            for (w, l) in state.posterior.iter_mut().zip(lik) {
                *w *= l;
                total += *w;
            }
            state.posterior.iter_mut().for_each(|w| *w /= total);
            state.position = (state.position + 1).min(self.spec.message_length);
            state.last = Some(symbol);
        }
        state.log_prob += p.ln();
        state.steps += 1;
        Ok(p)
    }

    pub fn observe_all(&self, state: &mut FilterState, symbols: &[Symbol]) -> Result<()> {
        for &s in symbols {
            self.observe(state, s)?;
        }
        Ok(())
    }

    /// `q(. | history)`.
    pub fn next_symbol_marginal(&self, history: &[Symbol]) -> Result<Vec<f64>> {
        let mut state = self.filter();
        self.observe_all(&mut state, history)?;
        Ok(self.predict(&state))
    }

    /// `q(. | history, theta)` with `theta` the intention of the history's
    /// first message.
    pub fn next_symbol_conditioned(
        &self,
        history: &[Symbol],
        theta: usize,
        boundary: Boundary,
    ) -> Result<Vec<f64>> {
        let mut state = self.filter_conditioned(theta, boundary);
        self.observe_all(&mut state, history)?;
        Ok(self.predict(&state))
    }

    /// Mixture of one-hot components over the first message's intention,
    /// weighted by the stationary prior.
    pub fn mixture(&self, boundary: Boundary) -> MixtureFilter {
        let k = self.spec.num_intentions;
        MixtureFilter {
            components: (0..k).map(|t| Some(self.filter_conditioned(t, boundary))).collect(),
            log_weights: self.log_prior.clone(),
        }
    }

    pub fn mixture_observe(&self, mix: &mut MixtureFilter, symbol: Symbol) -> Result<()> {
        let steps = mix.components.iter().flatten().map(|c| c.steps).next().unwrap_or(0);
        for (slot, w) in mix.components.iter_mut().zip(mix.log_weights.iter_mut()) {
            let Some(comp) = slot else { continue };
            match self.observe(comp, symbol) {
                Ok(p) => *w += p.ln(),
                Err(Error::InvalidPrefix { .. }) if symbol as usize <= self.newline() as usize => {
                    *slot = None;
                    *w = f64::NEG_INFINITY;
                }
                Err(e) => return Err(e),
            }
        }
        if mix.components.iter().all(Option::is_none) {
            return Err(Error::InvalidPrefix {
                position: steps,
                reason: "zero probability under every intention".into(),
            });
        }
        Ok(())
    }

    pub fn mixture_observe_all(&self, mix: &mut MixtureFilter, symbols: &[Symbol]) -> Result<()> {
        for &s in symbols {
            self.mixture_observe(mix, s)?;
        }
        Ok(())
    }

    pub fn mixture_predict(&self, mix: &MixtureFilter) -> Vec<f64> {
        let mut dist = vec![0.0; self.spec.symbol_count()];
        for (comp, w) in mix.components.iter().zip(mix.weights()) {
            if let Some(c) = comp {
                for (d, p) in dist.iter_mut().zip(self.predict(c)) {
                    *d += w * p;
                }
            }
        }
        dist
    }

    /// `m`-th power of the intention transition matrix.
    pub fn intention_hop(&self, steps: usize) -> Vec<Vec<f64>> {
        assert!(steps >= 1, "hop needs at least one step");
        let t = &self.spec.prior_transition;
        let k = t.len();
        let mut acc = t.clone();
        for _ in 1..steps {
            let mut next = vec![vec![0.0; k]; k];
            for i in 0..k {
                for (l, &a) in acc[i].iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        next[i][j] += a * t[l][j];
                    }
                }
            }
            acc = next;
        }
        acc
    }
}

pub fn ambiguity_report(post: &PosteriorVector, generating: Option<usize>) -> AmbiguityReport {
    let best = post.argmax();
    let log_rest = post.log_residual(best);
    AmbiguityReport {
        epsilon: post.residual(best),
        argmax_intention: best,
        matches_generating: generating.map(|g| g == best),
        generating_epsilon: generating.map(|g| post.residual(g)),
        log_dominance_ratio: post.log_joint[best] - log_rest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langspec::{build_spec, sample_corpus, sample_message, GeneratorConfig, IntentionMode};
    use crate::rng::Rng;

    fn oracle(eta: f64) -> Oracle {
        Oracle::new(build_spec(&GeneratorConfig::default().with_noise(eta)).unwrap())
    }

    /// Direct product of probabilities, no logs.
    fn brute_likelihood(spec: &LanguageSpec, x: &Message, theta: usize) -> f64 {
        let letters = x.letters();
        let mut p = spec.emission_initial[theta][letters[0] as usize];
        for w in letters.windows(2) {
            p *= spec.emission_transition[theta][w[0] as usize][w[1] as usize];
        }
        p
    }

    #[test]
    fn loglik_matches_direct_product() {
        let o = oracle(0.05);
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = sample_message(o.spec(), rng.below(6), &mut rng);
            for theta in 0..6 {
                let direct = brute_likelihood(o.spec(), &x, theta);
                let ll = o.message_loglik(&x, theta).unwrap();
                assert!((ll.exp() - direct).abs() <= 1e-12 * direct.max(1e-300));
            }
        }
    }

    #[test]
    fn loglik_off_support_is_neg_inf() {
        let o = oracle(0.0);
        let x = Message::from_letters("abcabcabcabcabcabcad", 18).unwrap();
        assert_eq!(o.message_loglik(&x, 0).unwrap(), f64::NEG_INFINITY);
        assert!(o.message_loglik(&x, 1).unwrap() == f64::NEG_INFINITY);
    }

    #[test]
    fn single_letter_message() {
        let cfg = GeneratorConfig { message_length: 1, ..Default::default() };
        let o = Oracle::new(build_spec(&cfg).unwrap());
        let x = Message::from_letters("a", 18).unwrap();
        assert_eq!(o.message_loglik(&x, 0).unwrap(), o.spec().emission_initial[0][0].ln());
    }

    #[test]
    fn malformed_messages_rejected() {
        let o = oracle(0.0);
        let short = Message::from_letters("abc", 18).unwrap();
        assert!(matches!(o.message_loglik(&short, 0), Err(Error::MalformedMessage(_))));
        let mut early = Message::from_letters("abcabcabcabcabcabcab", 18).unwrap();
        early.symbols[5] = 18;
        assert!(matches!(o.message_loglik(&early, 0), Err(Error::MalformedMessage(_))));
        let unterminated = Message::new(vec![0; 20]);
        assert!(matches!(o.message_loglik(&unterminated, 0), Err(Error::MalformedMessage(_))));
    }

    #[test]
    fn stationary_prior_is_uniform_for_default_chain() {
        let o = oracle(0.0);
        assert!(o.prior().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        // Non-uniform chain: two states, 0 -> 1 w.p. 0.25, 1 -> 0 w.p. 0.5.
        let pi = stationary_distribution(&[vec![0.75, 0.25], vec![0.5, 0.5]]);
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-10);
        // Periodic chain still converges.
        let pi = stationary_distribution(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!((pi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noise_free_posteriors_are_one_hot() {
        let o = oracle(0.0);
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..100 {
            let theta = rng.below(6);
            let x = sample_message(o.spec(), theta, &mut rng);
            let post = o.posterior_single(&x).unwrap();
            assert_eq!(post.probs[theta], 1.0);
            let amb = o.ambiguity(&x).unwrap();
            assert_eq!(amb.epsilon, 0.0);
            assert_eq!(amb.matches_generating, Some(true));
            assert_eq!(amb.log_dominance_ratio, f64::INFINITY);
        }
    }

    #[test]
    fn posterior_matches_brute_force_bayes() {
        let o = oracle(0.05);
        let corpus = sample_corpus(o.spec(), 200, IntentionMode::Chain, &mut Rng::seed_from_u64(3));
        for x in &corpus.messages {
            let joint: Vec<f64> = (0..6).map(|t| brute_likelihood(o.spec(), x, t) / 6.0).collect();
            let total: f64 = joint.iter().sum();
            let post = o.posterior_single(x).unwrap();
            for t in 0..6 {
                assert!((post.probs[t] - joint[t] / total).abs() < 1e-12);
            }
            let best = argmax(&joint);
            let eps_brute = joint.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, p)| p).sum::<f64>() / total;
            let amb = o.ambiguity(x).unwrap();
            assert!((amb.epsilon - eps_brute).abs() < 1e-12);
            assert!((amb.epsilon - (1.0 - post.probs[amb.argmax_intention])).abs() < 1e-12);
            assert!((post.log_evidence - total.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_evidence() {
        let o = oracle(0.0);
        let x = Message::from_letters("adadadadadadadadadad", 18).unwrap();
        assert!(matches!(o.posterior_single(&x), Err(Error::DegenerateEvidence)));
    }

    /// Two intentions with identical emission rows.
    fn twin_spec() -> LanguageSpec {
        let mut spec = build_spec(&GeneratorConfig {
            num_intentions: 2,
            alphabet_size: 6,
            message_length: 4,
            noise_level: 0.3,
            ..Default::default()
        })
        .unwrap();
        spec.emission_initial[1] = spec.emission_initial[0].clone();
        spec.emission_transition[1] = spec.emission_transition[0].clone();
        spec.validate().unwrap();
        spec
    }

    #[test]
    fn symmetric_message_splits_evenly_and_ties_to_lowest() {
        let o = Oracle::new(twin_spec());
        let x = Message::from_letters("abcd", 6).unwrap();
        let post = o.posterior_single(&x).unwrap();
        assert!((post.probs[0] - 0.5).abs() < 1e-15);
        assert!((post.probs[1] - 0.5).abs() < 1e-15);
        let amb = o.ambiguity(&x).unwrap();
        assert_eq!(amb.argmax_intention, 0);
        assert!((amb.epsilon - 0.5).abs() < 1e-15);
        // Eq. 4 is tight here: ratio 1, bound (1 - 0.5) / 0.5 = 1.
        assert!(amb.log_dominance_ratio.abs() < 1e-12);
        assert!(amb.log_dominance_bound().abs() < 1e-12);
    }

    #[test]
    fn tied_posterior_reduces_to_single() {
        let o = oracle(0.1);
        let mut rng = Rng::seed_from_u64(4);
        let x = sample_message(o.spec(), 2, &mut rng);
        let a = o.posterior_single(&x).unwrap();
        let b = o.posterior_tied(std::slice::from_ref(&x)).unwrap();
        assert_eq!(a, b);

        let z = oracle(0.0);
        let pair = [sample_message(z.spec(), 0, &mut rng), sample_message(z.spec(), 0, &mut rng)];
        assert_eq!(z.posterior_tied(&pair).unwrap().probs[0], 1.0);
    }

    #[test]
    fn sequence_marginal_matches_path_enumeration() {
        let o = oracle(0.05);
        let corpus = sample_corpus(o.spec(), 40, IntentionMode::Chain, &mut Rng::seed_from_u64(5));
        let t = &o.spec().prior_transition;
        for pair in corpus.messages.chunks(2) {
            let mut total = 0.0;
            for a in 0..6 {
                for b in 0..6 {
                    total += (1.0 / 6.0)
                        * brute_likelihood(o.spec(), &pair[0], a)
                        * t[a][b]
                        * brute_likelihood(o.spec(), &pair[1], b);
                }
            }
            let got = o.sequence_logmarginal(pair).unwrap();
            assert!((got - total.ln()).abs() < 1e-10);
        }
        let single = &corpus.messages[..1];
        let ev = o.posterior_single(&single[0]).unwrap().log_evidence;
        assert!((o.sequence_logmarginal(single).unwrap() - ev).abs() < 1e-12);
    }

    #[test]
    fn noise_free_paths_follow_letter_blocks() {
        let o = oracle(0.0);
        let corpus = sample_corpus(o.spec(), 4, IntentionMode::Chain, &mut Rng::seed_from_u64(6));
        let ids = corpus.intentions().unwrap();
        let lik = |m: &Message, t| brute_likelihood(o.spec(), m, t);
        let t = &o.spec().prior_transition;
        let mut total = 0.0;
        let mut nonzero = Vec::new();
        for path in 0..6usize.pow(4) {
            let p: Vec<usize> = (0..4).map(|i| path / 6usize.pow(i) % 6).collect();
            let mut w = (1.0 / 6.0) * lik(&corpus.messages[0], p[0]);
            for i in 1..4 {
                w *= t[p[i - 1]][p[i]] * lik(&corpus.messages[i], p[i]);
            }
            if w > 0.0 {
                nonzero.push(p);
            }
            total += w;
        }
        assert_eq!(nonzero, vec![ids]);
        assert!((o.sequence_logmarginal(&corpus.messages).unwrap() - total.ln()).abs() < 1e-10);
    }

    #[test]
    fn chain_rule_matches_forward_marginal() {
        for eta in [0.0, 0.05, 0.3] {
            let o = oracle(eta);
            let corpus = sample_corpus(o.spec(), 6, IntentionMode::Chain, &mut Rng::seed_from_u64(7));
            let mut state = o.filter();
            for s in corpus.symbols() {
                let dist = o.predict(&state);
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                o.observe(&mut state, s).unwrap();
                assert!((state.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(state.position <= 20);
            }
            let forward = o.sequence_logmarginal(&corpus.messages).unwrap();
            assert!((state.log_prob.exp() - forward.exp()).abs() < 1e-9);
            assert!((state.log_prob - forward).abs() < 1e-9);
        }
    }

    #[test]
    fn next_symbol_examples() {
        let o = oracle(0.0);
        let empty = o.next_symbol_marginal(&[]).unwrap();
        for s in 0..18 {
            let expected: f64 = (0..6).map(|t| o.spec().emission_initial[t][s] / 6.0).sum();
            assert!((empty[s] - expected).abs() < 1e-15);
        }
        assert_eq!(empty[18], 0.0);

        let after_ab = o.next_symbol_marginal(&[0, 1]).unwrap();
        assert_eq!(after_ab, o.spec().emission_transition[0][1].iter().copied().chain([0.0]).collect::<Vec<_>>());

        let full = Message::from_letters("abcabcabcabcabcabcab", 18).unwrap();
        let at_end = o.next_symbol_marginal(full.letters()).unwrap();
        assert_eq!(at_end[18], 1.0);
    }

    #[test]
    fn invalid_prefixes() {
        let o = oracle(0.0);
        assert!(matches!(o.next_symbol_marginal(&[0, 18]), Err(Error::InvalidPrefix { position: 1, .. })));
        assert!(matches!(o.next_symbol_marginal(&[0, 3]), Err(Error::InvalidPrefix { .. })));
        assert!(matches!(o.next_symbol_marginal(&[19]), Err(Error::InvalidPrefix { .. })));
        let mut long = vec![0u8; 21];
        long[20] = 1;
        assert!(o.next_symbol_marginal(&long).is_err());
    }

    #[test]
    fn conditioned_on_generating_intention_equals_marginal_without_noise() {
        let o = oracle(0.0);
        let mut rng = Rng::seed_from_u64(8);
        for _ in 0..30 {
            let theta = rng.below(6);
            let x = sample_message(o.spec(), theta, &mut rng);
            for cut in 1..=20 {
                let h = &x.symbols[..cut];
                let a = o.next_symbol_marginal(h).unwrap();
                let b = o.next_symbol_conditioned(h, theta, Boundary::Chain).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn conditioned_boundary_policies() {
        let o = oracle(0.0);
        let x = sample_message(o.spec(), 0, &mut Rng::seed_from_u64(9));
        let clamped = o.next_symbol_conditioned(&x.symbols, 0, Boundary::Clamped).unwrap();
        let mut expected = o.spec().emission_initial[0].clone();
        expected.push(0.0);
        assert_eq!(clamped, expected);

        let chained = o.next_symbol_conditioned(&x.symbols, 0, Boundary::Chain).unwrap();
        for s in 0..18 {
            let mix = 0.5 * o.spec().emission_initial[0][s] + 0.5 * o.spec().emission_initial[1][s];
            assert!((chained[s] - mix).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_reproduces_marginal() {
        let o = oracle(0.2);
        let corpus = sample_corpus(o.spec(), 3, IntentionMode::Chain, &mut Rng::seed_from_u64(10));
        let mut mix = o.mixture(Boundary::Chain);
        let mut marg = o.filter();
        for s in corpus.symbols() {
            let a = o.mixture_predict(&mix);
            let b = o.predict(&marg);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            o.mixture_observe(&mut mix, s).unwrap();
            o.observe(&mut marg, s).unwrap();
        }
        let mut tied = o.mixture(Boundary::Clamped);
        let mut tied_filter = o.filter_tied();
        for s in corpus.symbols() {
            let a = o.mixture_predict(&tied);
            let b = o.predict(&tied_filter);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            o.mixture_observe(&mut tied, s).unwrap();
            o.observe(&mut tied_filter, s).unwrap();
        }
    }

    #[test]
    fn intention_hops() {
        let o = oracle(0.0);
        assert_eq!(o.intention_hop(1), o.spec().prior_transition);
        let h4 = o.intention_hop(4);
        assert_eq!(h4[0][4], 0.0625);
        // Binomial(4, 1/2) over advance counts.
        for (advances, expected) in [1.0, 4.0, 6.0, 4.0, 1.0].iter().enumerate() {
            assert_eq!(h4[0][advances], expected / 16.0);
        }
        for m in 1..12 {
            for row in o.intention_hop(m) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometric_filter_is_consistent() {
        let cfg = GeneratorConfig {
            length_mode: LengthMode::Geometric { end_prob: 0.15 },
            noise_level: 0.1,
            ..Default::default()
        };
        let o = Oracle::new(build_spec(&cfg).unwrap());
        let corpus = sample_corpus(o.spec(), 5, IntentionMode::Chain, &mut Rng::seed_from_u64(11));
        let mut state = o.filter();
        for s in corpus.symbols() {
            let d = o.predict(&state);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            o.observe(&mut state, s).unwrap();
        }
        assert!((state.log_prob - o.sequence_logmarginal(&corpus.messages).unwrap()).abs() < 1e-9);
        assert_eq!(o.next_symbol_marginal(&[]).unwrap()[18], 0.0);
    }
}
