//! Sweeps behind the convergence, understanding and in-context curves.
//!
//! Every point is an independent seeded task; points run in parallel and are
//! returned in grid order, so reruns produce identical rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{cross_entropy, mean_tv_gap, train, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::langspec::{build_spec, sample_corpus, sample_message, Corpus, GeneratorConfig, IntentionMode};
use crate::oracle::{Boundary, Oracle};
use crate::rng::Rng;
use crate::verify::{kl_icl, kl_understanding, KlDirection, KlMethod, KlSettings, LmBackend};

/// Rows of one sweep as CSV with a header.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub generator: GeneratorConfig,
    /// Training sizes in symbols; each is a prefix of the next.
    pub sizes: Vec<usize>,
    /// Context orders of the count model.
    pub orders: Vec<usize>,
    pub lambda: f64,
    pub heldout_messages: usize,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            generator: GeneratorConfig::default(),
            sizes: vec![10_000, 100_000, 1_000_000],
            orders: vec![2],
            lambda: DEFAULT_LAMBDA,
            heldout_messages: 2000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub k: usize,
    /// Requested size; whole messages are kept, so the actual size may
    /// exceed it by less than one message.
    pub n_target: usize,
    pub n_symbols: usize,
    /// Nats per symbol.
    pub heldout_cross_entropy: f64,
    pub oracle_entropy: f64,
    pub excess: f64,
    /// Mean total variation to the oracle, in [0, 1].
    pub mean_tv_gap: f64,
    pub contexts: usize,
}

/// Training corpus large enough for the biggest size, and a held-out corpus
/// from an independent stream.
pub fn convergence_corpora(oracle: &Oracle, cfg: &ConvergenceConfig) -> (Corpus, Corpus) {
    let per_message = oracle.spec().message_length + 1;
    let max_n = cfg.sizes.iter().copied().max().unwrap_or(0);
    let spec = oracle.spec();
    let train_corpus = sample_corpus(
        spec,
        max_n.div_ceil(per_message) + 1,
        IntentionMode::Chain,
        &mut Rng::stream(cfg.seed, "train-corpus", 0),
    );
    let heldout = sample_corpus(
        spec,
        cfg.heldout_messages,
        IntentionMode::Chain,
        &mut Rng::stream(cfg.seed, "heldout-corpus", 0),
    );
    (train_corpus, heldout)
}

pub fn convergence_sweep(cfg: &ConvergenceConfig) -> Result<Vec<ConvergencePoint>> {
    if cfg.sizes.is_empty() || cfg.orders.is_empty() {
        return Err(Error::Config("convergence sweep needs sizes and orders".into()));
    }
    if cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("training sizes must be strictly increasing".into()));
    }
    let oracle = Oracle::new(build_spec(&cfg.generator)?);
    let (train_corpus, heldout) = convergence_corpora(&oracle, cfg);
    let oracle_entropy = cross_entropy(&oracle, &heldout)?;
    let grid: Vec<(usize, usize)> =
        cfg.orders.iter().flat_map(|&k| cfg.sizes.iter().map(move |&n| (k, n))).collect();
    grid.par_iter()
        .map(|&(k, n)| {
            let model = train(&train_corpus.prefix_with_symbols(n), k, cfg.lambda)?;
            let ce = cross_entropy(&model, &heldout)?;
            Ok(ConvergencePoint {
                k,
                n_target: n,
                n_symbols: model.total_training_symbols() as usize,
                heldout_cross_entropy: ce,
                oracle_entropy,
                excess: ce - oracle_entropy,
                mean_tv_gap: mean_tv_gap(&model, &oracle, &heldout)?,
                contexts: model.num_contexts(),
            })
        })
        .collect()
}

/// Mean ambiguity `1 - max_theta Pr(theta | x)` of sampled messages.
pub fn mean_ambiguity(generator: &GeneratorConfig, eta: f64, messages: usize, seed: u64) -> Result<f64> {
    let oracle = Oracle::new(build_spec(&generator.clone().with_noise(eta))?);
    let total = (0..messages)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::stream(seed, "ambiguity", i as u64);
            let theta = rng.categorical(oracle.prior());
            let x = sample_message(oracle.spec(), theta, &mut rng);
            Ok(oracle.ambiguity(&x)?.epsilon)
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum::<f64>();
    Ok(total / messages as f64)
}

const MAX_ETA: f64 = 0.999;

/// Noise level whose mean message ambiguity matches `target`, by bisection
/// on a fixed sample (common random numbers across noise levels).
pub fn calibrate_eta(generator: &GeneratorConfig, target: f64, messages: usize, seed: u64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, MAX_ETA);
    if mean_ambiguity(generator, hi, messages, seed)? < target {
        return Err(Error::Config(format!("ambiguity {target} is out of reach for this generator")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_ambiguity(generator, mid, messages, seed)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingConfig {
    pub generator: GeneratorConfig,
    /// Target mean message ambiguities; 0 is the noise-free language.
    pub levels: Vec<f64>,
    pub calibration_messages: usize,
    pub horizon: usize,
    pub prompts: usize,
    pub samples: usize,
    pub prompt_len: (usize, usize),
    /// Trained backend: corpus size in symbols, context order, smoothing.
    pub train_symbols: usize,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for UnderstandingConfig {
    fn default() -> Self {
        UnderstandingConfig {
            generator: GeneratorConfig::default(),
            levels: vec![0.0, 1e-20, 1e-8],
            calibration_messages: 2000,
            horizon: 20,
            prompts: 500,
            samples: 10_000,
            prompt_len: (1, 19),
            train_symbols: 1_000_000,
            k: 2,
            lambda: DEFAULT_LAMBDA,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlPoint {
    pub level: usize,
    pub target_epsilon: Option<f64>,
    pub eta: f64,
    pub measured_epsilon: Option<f64>,
    /// Number of in-context messages; 0 for the understanding sweep.
    pub m: usize,
    pub backend: String,
    pub method: KlMethod,
    pub direction: KlDirection,
    pub horizon: usize,
    /// Nats.
    pub kl: f64,
    pub standard_error: f64,
}

fn kl_point(level: usize, target: Option<f64>, eta: f64, eps: Option<f64>, m: usize, backend: &str, est: &crate::verify::KlEstimate) -> KlPoint {
    KlPoint {
        level,
        target_epsilon: target,
        eta,
        measured_epsilon: eps,
        m,
        backend: backend.to_string(),
        method: est.method,
        direction: est.direction,
        horizon: est.horizon,
        kl: est.value,
        standard_error: est.standard_error,
    }
}

/// Per level: oracle KL at the configured horizon, the exact/Monte Carlo
/// cross-check at the enumeration cap, and the trained count model.
pub fn understanding_sweep(cfg: &UnderstandingConfig) -> Result<Vec<KlPoint>> {
    let levels = cfg
        .levels
        .par_iter()
        .enumerate()
        .map(|(i, &target)| {
            let seed = Rng::stream(cfg.seed, "level", i as u64).next_u64();
            let eta = calibrate_eta(&cfg.generator, target, cfg.calibration_messages, cfg.seed)?;
            let eps = mean_ambiguity(&cfg.generator, eta, cfg.calibration_messages, cfg.seed)?;
            let spec = build_spec(&cfg.generator.clone().with_noise(eta))?;
            let corpus_messages = cfg.train_symbols.div_ceil(spec.message_length + 1);
            let corpus = sample_corpus(&spec, corpus_messages, IntentionMode::Chain, &mut Rng::stream(seed, "corpus", 0));
            let model = train(&corpus, cfg.k, cfg.lambda)?;
            let oracle = Oracle::new(spec);
            let base = KlSettings {
                horizon: cfg.horizon,
                prompts: cfg.prompts,
                samples: cfg.samples,
                method: KlMethod::MonteCarlo,
                direction: KlDirection::Forward,
                prompt_len: cfg.prompt_len,
                seed,
            };
            let short = KlSettings { horizon: crate::verify::EXACT_HORIZON_CAP, ..base };
            let exact = KlSettings { method: KlMethod::ExactDp, ..short };
            let oracle_b = LmBackend::Oracle(Boundary::Chain);
            let trained_b = LmBackend::Trained(&model);
            let reverse = |s: KlSettings| KlSettings { direction: trained_b.default_direction(), ..s };
            let runs = [
                (oracle_b, base),
                (oracle_b, exact),
                (oracle_b, short),
                (trained_b, reverse(base)),
                (trained_b, reverse(exact)),
            ];
            runs.iter()
                .map(|(b, s)| Ok(kl_point(i, Some(target), eta, Some(eps), 0, b.name(), &kl_understanding(*b, &oracle, s)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(levels.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclConfig {
    pub generator: GeneratorConfig,
    pub etas: Vec<f64>,
    pub m_values: Vec<usize>,
    pub horizon: usize,
    pub prompts: usize,
    pub samples: usize,
    pub method: KlMethod,
    pub prompt_len: (usize, usize),
    pub seed: u64,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            generator: GeneratorConfig::default(),
            etas: vec![0.0, 0.05, 0.5],
            m_values: (0..=8).collect(),
            horizon: 3,
            prompts: 500,
            samples: 10_000,
            method: KlMethod::ExactDp,
            prompt_len: (1, 4),
            seed: 42,
        }
    }
}

/// KL against `m` for the clamped oracle, plus the chain-boundary oracle as
/// an unasserted analogue.
pub fn icl_sweep(cfg: &IclConfig) -> Result<Vec<KlPoint>> {
    if cfg.m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("m values must be strictly increasing".into()));
    }
    let per_eta = cfg
        .etas
        .par_iter()
        .enumerate()
        .map(|(i, &eta)| {
            let oracle = Oracle::new(build_spec(&cfg.generator.clone().with_noise(eta))?);
            let settings = KlSettings {
                horizon: cfg.horizon,
                prompts: cfg.prompts,
                samples: cfg.samples,
                method: cfg.method,
                direction: KlDirection::Forward,
                prompt_len: cfg.prompt_len,
                seed: Rng::stream(cfg.seed, "icl-eta", i as u64).next_u64(),
            };
            let mut rows = Vec::new();
            for b in [LmBackend::Oracle(Boundary::Clamped), LmBackend::Oracle(Boundary::Chain)] {
                for (m, est) in kl_icl(b, &oracle, &cfg.m_values, &settings)? {
                    rows.push(kl_point(i, None, eta, None, m, b.name(), &est));
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_eta.into_iter().flatten().collect())
}

/// Shape of one convergence series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrend {
    pub k: usize,
    pub cross_entropy_strictly_decreasing: bool,
    pub final_excess: f64,
    /// First TV gap over last.
    pub tv_reduction: f64,
}

pub fn convergence_trends(points: &[ConvergencePoint]) -> Vec<ConvergenceTrend> {
    let mut orders: Vec<usize> = points.iter().map(|p| p.k).collect();
    orders.dedup();
    orders
        .into_iter()
        .filter_map(|k| {
            let s: Vec<&ConvergencePoint> = points.iter().filter(|p| p.k == k).collect();
            let (first, last) = (s.first()?, s.last()?);
            Some(ConvergenceTrend {
                k,
                cross_entropy_strictly_decreasing: s.windows(2).all(|w| w[1].heldout_cross_entropy < w[0].heldout_cross_entropy),
                final_excess: last.excess,
                tv_reduction: first.mean_tv_gap / last.mean_tv_gap,
            })
        })
        .collect()
}

/// Ordering of the understanding curves across levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnderstandingTrend {
    /// Oracle KL at the first level, which is noise-free when its target is 0.
    pub oracle_first_level_kl: f64,
    pub oracle_strictly_increasing: bool,
    pub trained_strictly_increasing: bool,
    /// Largest `|mc - exact| / se` of the short-horizon oracle cross-check;
    /// 0 when both agree exactly.
    pub max_mc_exact_z: f64,
}

pub fn understanding_trend(points: &[KlPoint], horizon: usize) -> UnderstandingTrend {
    let series = |backend: &str, method: KlMethod, h: usize| -> Vec<&KlPoint> {
        points.iter().filter(|p| p.backend == backend && p.method == method && p.horizon == h).collect()
    };
    let increasing = |s: &[&KlPoint]| s.windows(2).all(|w| w[1].kl > w[0].kl);
    let oracle = series("oracle", KlMethod::MonteCarlo, horizon);
    let trained = series("trained", KlMethod::MonteCarlo, horizon);
    let cap = crate::verify::EXACT_HORIZON_CAP;
    let mc = series("oracle", KlMethod::MonteCarlo, cap);
    let exact = series("oracle", KlMethod::ExactDp, cap);
    let max_mc_exact_z = mc
        .iter()
        .zip(&exact)
        .map(|(m, e)| {
            let diff = (m.kl - e.kl).abs();
            if diff == 0.0 {
                0.0
            } else {
                diff / m.standard_error
            }
        })
        .fold(0.0, f64::max);
    UnderstandingTrend {
        oracle_first_level_kl: oracle.first().map_or(f64::NAN, |p| p.kl),
        oracle_strictly_increasing: increasing(&oracle),
        trained_strictly_increasing: increasing(&trained),
        max_mc_exact_z,
    }
}

/// Absolute slack for KL trends: per-step rounding of sums of order one.
pub const KL_TREND_TOL: f64 = 1e-12;

/// KL against `m` for one noise level and backend, over `m >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IclTrend {
    pub eta: f64,
    pub backend: String,
    pub non_increasing: bool,
    /// Largest minus smallest KL.
    pub spread: f64,
}

pub fn icl_trends(points: &[KlPoint]) -> Vec<IclTrend> {
    let mut keys: Vec<(usize, String)> = points.iter().map(|p| (p.level, p.backend.clone())).collect();
    keys.dedup();
    keys.into_iter()
        .map(|(level, backend)| {
            let s: Vec<&KlPoint> = points.iter().filter(|p| p.level == level && p.backend == backend && p.m >= 1).collect();
            let kl: Vec<f64> = s.iter().map(|p| p.kl).collect();
            let hi = kl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = kl.iter().copied().fold(f64::INFINITY, f64::min);
            IclTrend {
                eta: s.first().map_or(f64::NAN, |p| p.eta),
                backend,
                non_increasing: kl.windows(2).all(|w| w[1] <= w[0] + KL_TREND_TOL),
                spread: if kl.is_empty() { 0.0 } else { hi - lo },
            }
        })
        .collect()
}
