//! Acceptance suite: one PASS/FAIL line per criterion, each with its
//! runtime budget. Exits nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use latentlm::experiment::{
    convergence_sweep, convergence_trends, icl_sweep, icl_trends, understanding_sweep, understanding_trend,
    ConvergenceConfig, IclConfig, UnderstandingConfig,
};
use latentlm::verify::{
    all_advance_path, check_icl, check_instruction_mixture, check_prop1, check_prop2, check_prop2_exhaustive,
    check_sparsity, cot_compare, icl_monotone_fraction, summarize, BoundCheck, LmBackend, TrialConfig,
};
use latentlm::{build_spec, Boundary, GeneratorConfig, Oracle, Rng};

type Outcome = Result<String, String>;

const SEED: u64 = 42;
const NOISY: [f64; 3] = [0.02, 0.05, 0.1];

fn oracle(eta: f64) -> Oracle {
    Oracle::new(build_spec(&GeneratorConfig::default().with_noise(eta)).expect("default spec"))
}

fn violations(checks: &[BoundCheck]) -> usize {
    checks.iter().filter(|c| c.is_violation()).count()
}

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sparsity() -> Outcome {
    let checks = check_sparsity(&oracle(0.0), 1000, SEED).map_err(|e| e.to_string())?;
    let max_eps = checks.iter().flat_map(|c| c.epsilons.iter().copied()).fold(0.0, f64::max);
    let clean = checks.iter().all(|c| c.satisfied) && max_eps < 1e-12;
    let mut detail = format!("eta=0: {} one-hot, max eps {max_eps:?}", checks.iter().filter(|c| c.satisfied).count());
    let mut noisy_violations = 0;
    for eta in NOISY {
        let v = violations(&check_sparsity(&oracle(eta), 1000, SEED).map_err(|e| e.to_string())?);
        detail += &format!("; eta={eta}: {v} violations");
        noisy_violations += v;
    }
    require(clean && noisy_violations == 0, detail)
}

fn prop1() -> Outcome {
    let mut total = 0;
    let mut detail = Vec::new();
    for eta in NOISY {
        let checks = check_prop1(&oracle(eta), 1000, SEED).map_err(|e| e.to_string())?;
        let s = summarize("prop1", &checks);
        detail.push(format!("eta={eta}: {} violations, max dev {:?}", s.violations, s.max_deviation));
        total += s.violations;
    }
    require(total == 0, detail.join("; "))
}

fn prop2() -> Outcome {
    let backend = LmBackend::Oracle(Boundary::Chain);
    let mut total = 0;
    let mut detail = Vec::new();
    for eta in [0.0, 0.05] {
        let o = oracle(eta);
        let cfg = TrialConfig { trials: 1000, samples_per_trial: 10, horizon: 5, seed: SEED, ..TrialConfig::default() };
        let sampled = check_prop2(backend, &o, &cfg).map_err(|e| e.to_string())?;
        let exhaustive = check_prop2_exhaustive(backend, &o, 100, 3, cfg.prompt_len, SEED).map_err(|e| e.to_string())?;
        let (vs, ve) = (violations(&sampled), violations(&exhaustive));
        detail.push(format!("eta={eta}: 10^4 sampled {vs} violations, 100 exhaustive H=3 {ve} violations"));
        total += vs + ve;
    }
    require(total == 0, detail.join("; "))
}

fn props34() -> Outcome {
    let m: Vec<usize> = (1..=8).collect();
    let backend = LmBackend::Oracle(Boundary::Clamped);
    let cfg = TrialConfig { trials: 1000, seed: SEED, ..TrialConfig::default() };
    let exact = check_icl(backend, &oracle(0.0), &m, &cfg).map_err(|e| e.to_string())?;
    let gap = exact.iter().filter_map(|c| c.step_gap).fold(0.0, f64::max);
    let noisy = check_icl(backend, &oracle(0.05), &m, &cfg).map_err(|e| e.to_string())?;
    let v = violations(&exact) + violations(&noisy);
    let monotone = icl_monotone_fraction(&noisy);
    require(
        gap < 1e-10 && v == 0 && monotone >= 0.95,
        format!("eta=0 max per-symbol gap {gap:?}; eta=0.05 {v} violations, monotone fraction {monotone:?}"),
    )
}

fn convergence() -> Outcome {
    let rows = convergence_sweep(&ConvergenceConfig { seed: SEED, ..ConvergenceConfig::default() })
        .map_err(|e| e.to_string())?;
    let t = &convergence_trends(&rows)[0];
    require(
        t.cross_entropy_strictly_decreasing && t.final_excess.abs() <= 0.05 && t.tv_reduction >= 3.0,
        format!(
            "k={}: decreasing {}, final excess {:.4} nats, TV reduction {:.1}x",
            t.k, t.cross_entropy_strictly_decreasing, t.final_excess, t.tv_reduction
        ),
    )
}

fn understanding() -> Outcome {
    let cfg = UnderstandingConfig { seed: SEED, ..UnderstandingConfig::default() };
    let rows = understanding_sweep(&cfg).map_err(|e| e.to_string())?;
    let t = understanding_trend(&rows, cfg.horizon);
    let kl = |backend: &str| -> Vec<String> {
        rows.iter()
            .filter(|r| r.backend == backend && r.horizon == cfg.horizon)
            .map(|r| format!("{:.3}", r.kl))
            .collect()
    };
    require(
        t.oracle_first_level_kl < 1e-9
            && t.oracle_strictly_increasing
            && t.trained_strictly_increasing
            && t.max_mc_exact_z <= 3.0,
        format!(
            "oracle KL [{}], trained KL [{}], MC vs exact max z {:.2}",
            kl("oracle").join(", "),
            kl("trained").join(", "),
            t.max_mc_exact_z
        ),
    )
}

fn icl() -> Outcome {
    let cfg = IclConfig { etas: vec![0.0, 0.05, 0.5], m_values: (1..=8).collect(), seed: SEED, ..IclConfig::default() };
    let trends = icl_trends(&icl_sweep(&cfg).map_err(|e| e.to_string())?);
    let clamped: Vec<_> = trends.iter().filter(|t| t.backend == "oracle-clamped").collect();
    let ok = clamped.iter().all(|t| if t.eta == 0.0 { t.spread <= 1e-9 } else { t.non_increasing });
    let detail = clamped
        .iter()
        .map(|t| format!("eta={}: non-increasing {}, spread {:?}", t.eta, t.non_increasing, t.spread))
        .collect::<Vec<_>>()
        .join("; ");
    require(ok, detail)
}

fn chain_of_thought() -> Outcome {
    let o = oracle(0.0);
    let mut ok = true;
    let mut detail = Vec::new();
    for m in 2..=5 {
        let rec = cot_compare(&o, &all_advance_path(6, 0, m), &mut Rng::stream(SEED, "cot", m as u64))
            .map_err(|e| e.to_string())?;
        ok &= rec.ratio() == 2f64.powi(m as i32 - 1);
        detail.push(format!("m={m}: {:?} vs {:?}", rec.direct_factor, rec.chained_factor));
    }
    require(ok, detail.join("; "))
}

fn instruction() -> Outcome {
    let exact = check_instruction_mixture(&oracle(0.0), 100, 10, SEED).map_err(|e| e.to_string())?;
    let noisy = check_instruction_mixture(&oracle(0.05), 100, 10, SEED).map_err(|e| e.to_string())?;
    let (ve, vn) = (violations(&exact), violations(&noisy));
    require(
        ve == 0 && vn == 0 && exact.len() == 1000,
        format!("eta=0: {} replies, {ve} off by > 1e-10; eta=0.05: {vn} violations", exact.len()),
    )
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_latentlm"))
        .args(args)
        .current_dir(out)
        .env("LATENTLM_OUT_DIR", ".")
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)))
    }
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| {
            let e = e.expect("dir entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("output file"))
        })
        .collect();
    files.sort();
    files
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for out in &runs {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        let (corpus, spec, model) = ("corpus.txt", "corpus.spec.json", "model.json");
        let commands: [&[&str]; 8] = [
            &["gen", "--eta", "0.05", "--messages", "2000", "--measure-epsilon"],
            &["train", "--corpus", corpus, "--spec", spec],
            &["eval", "--model", model, "--corpus", corpus, "--spec", spec],
            &["verify", "--prop", "all", "--eta", "0.05", "--trials", "50", "--exhaustive-prompts", "10"],
            &["experiment", "convergence", "--sizes", "2000,20000"],
            &["experiment", "understanding", "--prompts", "20", "--samples", "200"],
            &["experiment", "icl", "--etas", "0,0.5", "--m-values", "1,2,3", "--prompts", "20"],
            &["--seed", "7", "gen", "--messages", "100", "--name", "other"],
        ];
        for args in commands {
            run_cli(out, args)?;
        }
    }
    let (a, b) = (listing(&runs[0]), listing(&runs[1]));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|((na, ba), (nb, bb))| na != nb || ba != bb)
        .map(|((na, _), _)| na.as_str())
        .collect();
    let detail = format!("{} files compared byte-for-byte: {}", a.len(), names.join(" "));
    if !differing.is_empty() || a.len() != b.len() {
        return Err(format!("{detail}; differing: {}", differing.join(" ")));
    }
    require(a.len() == 19, detail)
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "sparsity and ambiguity", budget: Duration::from_secs(10), run: sparsity },
        Criterion { id: 2, name: "composition (prop 1)", budget: Duration::from_secs(30), run: prop1 },
        Criterion { id: 3, name: "understanding bound (prop 2)", budget: Duration::from_secs(120), run: prop2 },
        Criterion { id: 4, name: "in-context bounds (props 3-4)", budget: Duration::from_secs(300), run: props34 },
        Criterion { id: 5, name: "convergence curve", budget: Duration::from_secs(300), run: convergence },
        Criterion { id: 6, name: "understanding KL", budget: Duration::from_secs(300), run: understanding },
        Criterion { id: 7, name: "in-context KL", budget: Duration::from_secs(300), run: icl },
        Criterion { id: 8, name: "chain of thought", budget: Duration::from_secs(1), run: chain_of_thought },
        Criterion { id: 9, name: "instruction mixture", budget: Duration::from_secs(60), run: instruction },
        Criterion { id: 10, name: "reproducibility", budget: Duration::MAX, run: reproducibility },
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let budget = if c.budget == Duration::MAX { "none".to_string() } else { format!("{:?}", c.budget) };
        println!(
            "{} criterion {:>2} {:<30} {:>8.2}s (budget {budget}) {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
