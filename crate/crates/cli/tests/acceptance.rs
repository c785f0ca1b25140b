//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Oracles here are computed independently of the library where possible:
//! closed forms are written out inline and the objective used for finite
//! differences is evaluated directly from the logit table.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gspo_lab::info_metrics::{entropy_clip_bounds, random_trial, BatchEquivalence};
use gspo_lab::objectives::{
    clipped_weights, group_advantages, grpo_gradient, gspo_gradient, ClipConfig, ClipFlag, Group,
    DEFAULT_STD_FLOOR,
};
use gspo_lab::policy::{PolicyParams, QueryId, TokenSequence, Vocabulary, EOS};
use gspo_lab::rng::substream;
use gspo_lab::trainer::{run_training, Algorithm, RewardSpec, StepMetrics, TrainConfig};
use gspo_lab::variance_lab::{
    delta_bridge, gaussian_samples, lognormal_variance, simulate_log_s, SamplerSpec,
};
use rand::Rng;

const SIGMA2: f64 = 8.14e-4;
const N_MC: usize = 1_000_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

// 1 ------------------------------------------------------------------------

fn equivalence_identity() -> Outcome {
    let vocab = Vocabulary::new(16).unwrap();
    let mut lens = (usize::MAX, 0);
    let reports: Vec<_> = (0..10_000u64)
        .map(|i| {
            let t = random_trial(vocab, 64, 1.0, &mut substream(1, i)).unwrap();
            lens = (lens.0.min(t.length), lens.1.max(t.length));
            t.report
        })
        .collect();
    let max_ppl = reports.iter().map(|r| r.rel_err_ppl()).fold(0.0, f64::max);
    let max_ent = reports
        .iter()
        .map(|r| r.rel_err_entropy())
        .fold(0.0, f64::max);
    let batch = BatchEquivalence::from_reports(&reports);
    outcome(
        max_ppl < 1e-10 && max_ent < 1e-10 && lens == (1, 64),
        format!(
            "10^4 triples, L in [{}, {}]: max rel err ppl {max_ppl:.2e}, entropy {max_ent:.2e}; mean abs err {:.2e}",
            lens.0, lens.1, batch.mean_err_ppl
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn raw_log_probs(logits: &[f64], v: usize, seq: &TokenSequence) -> Vec<f64> {
    let q = seq.query().0;
    let mut prev = v;
    seq.tokens()
        .iter()
        .map(|&next| {
            let base = (q * (v + 1) + prev) * v;
            let row = &logits[base..base + v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            prev = next;
            row[next] - m - z.ln()
        })
        .collect()
}

struct FdCase {
    new: PolicyParams,
    old: PolicyParams,
    group: Group,
    adv: Vec<f64>,
}

impl FdCase {
    fn random(seed: u64) -> Self {
        let mut rng = substream(seed, 0);
        let v = rng.random_range(3..7);
        let vocab = Vocabulary::new(v).unwrap();
        let old = PolicyParams::random(vocab, 2, 1.0, &mut rng).unwrap();
        let mut new = old.clone();
        new.logits_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-0.3..0.3));
        let g = rng.random_range(2..6);
        let responses = (0..g)
            .map(|_| {
                let len = rng.random_range(1..=8);
                let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
                if rng.random_bool(0.5) {
                    t[len - 1] = EOS;
                }
                TokenSequence::new(QueryId(1), t, vocab).unwrap()
            })
            .collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let adv = group_advantages(&rewards, DEFAULT_STD_FLOOR)
            .unwrap()
            .advantages;
        Self {
            new,
            old,
            group: Group::new(QueryId(1), responses, rewards).unwrap(),
            adv,
        }
    }

    fn log_ratios(&self, logits: &[f64]) -> Vec<Vec<f64>> {
        let v = self.new.vocab().size();
        self.group
            .responses()
            .iter()
            .map(|seq| {
                raw_log_probs(logits, v, seq)
                    .iter()
                    .zip(raw_log_probs(self.old.logits(), v, seq))
                    .map(|(n, o)| n - o)
                    .collect()
            })
            .collect()
    }

    fn objective(&self, algo: Algorithm, clip: &ClipConfig, logits: &[f64]) -> f64 {
        let surrogate = |w: f64, a: f64| {
            let c = w.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
            (w * a).min(c * a)
        };
        let per_response = self
            .log_ratios(logits)
            .into_iter()
            .zip(&self.adv)
            .map(|(lw, &a)| {
                let l = lw.len() as f64;
                match algo {
                    Algorithm::Gspo => surrogate((lw.iter().sum::<f64>() / l).exp(), a),
                    Algorithm::Grpo => lw.iter().map(|x| surrogate(x.exp(), a)).sum::<f64>() / l,
                }
            });
        per_response.sum::<f64>() / self.group.size() as f64
    }

    /// Norm-wise relative error between analytic and central-difference
    /// gradients.
    fn check(&self, algo: Algorithm, clip: &ClipConfig) -> f64 {
        let n = self.new.logits().len();
        let analytic = match algo {
            Algorithm::Gspo => gspo_gradient(&self.new, &self.group, &self.old, clip),
            Algorithm::Grpo => grpo_gradient(&self.new, &self.group, &self.old, clip),
        }
        .unwrap()
        .grad
        .to_dense(n);
        let h = 1e-5;
        let mut x = self.new.logits().to_vec();
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = self.objective(algo, clip, &x);
                x[i] = orig - h;
                let down = self.objective(algo, clip, &x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8)
    }
}

/// Clip bands with one edge `margin` (in log space) inside or outside
/// `log_w`, the other edge wide.
fn edge_clips(log_w: f64, margin: f64) -> Vec<(ClipConfig, bool)> {
    let mut out = Vec::new();
    for inside in [true, false] {
        let shifted = if inside == (log_w > 0.0) {
            log_w + margin
        } else {
            log_w - margin
        };
        let edge = shifted.exp();
        let clip = if log_w > 0.0 {
            ClipConfig::new(0.2, edge - 1.0)
        } else {
            ClipConfig::new(1.0 - edge, 0.2)
        };
        if let Ok(c) = clip {
            out.push((c, inside));
        }
    }
    out
}

fn gradient_correctness() -> Outcome {
    let margin = 1e-3;
    let mut worst = 0.0f64;
    let (mut configs, mut boundary, mut boundary_outside) = (0, 0, 0);
    for seed in 0..60 {
        let case = FdCase::random(10_000 + seed);
        let mut clips: Vec<(ClipConfig, Algorithm)> =
            [ClipConfig::new(0.2, 0.2).unwrap(), ClipConfig::default()]
                .into_iter()
                .flat_map(|c| [(c, Algorithm::Gspo), (c, Algorithm::Grpo)])
                .collect();

        let ratios = case.log_ratios(case.new.logits());
        let k = seed as usize % ratios.len();
        let log_s = ratios[k].iter().sum::<f64>() / ratios[k].len() as f64;
        let log_w = ratios[k][0];
        for (algo, target) in [(Algorithm::Gspo, log_s), (Algorithm::Grpo, log_w)] {
            if target.abs() <= 2.0 * margin {
                continue;
            }
            for (clip, inside) in edge_clips(target, margin) {
                let w = target.exp();
                assert_eq!(clip.flag(w) == ClipFlag::None, inside, "edge construction");
                clips.push((clip, algo));
                boundary += 1;
                boundary_outside += usize::from(!inside);
            }
        }
        for (clip, algo) in clips {
            worst = worst.max(case.check(algo, &clip));
            configs += 1;
        }
    }
    outcome(
        worst < 1e-5 && configs >= 100 && boundary_outside > 0,
        format!(
            "{configs} configurations ({boundary} at a clip edge, {boundary_outside} just outside): max rel err {worst:.2e}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn iid_variance_law() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, len) in [10usize, 100, 817].into_iter().enumerate() {
        let r = simulate_log_s(&SamplerSpec::iid(SIGMA2, len), N_MC, 300 + i as u64).unwrap();
        let target = SIGMA2 / len as f64;
        let e = rel(r.var_log_s, target);
        pass &= e < 0.05;
        parts.push(format!("L={len} {:.4e} ({:.2}%)", r.var_log_s, 100.0 * e));
        if len == 817 {
            let e817 = rel(r.var_log_s, 9.96e-7);
            pass &= e817 < 0.05 && rel(target, 9.96e-7) < 1e-3;
            parts.push(format!("vs 9.96e-7 {:.2}%", 100.0 * e817));
        }
    }
    outcome(pass, parts.join(", "))
}

// 4 ------------------------------------------------------------------------

fn correlation_inflation() -> Outcome {
    let (rho, len) = (0.003, 817usize);
    let closed = 1.0 + (len as f64 - 1.0) * rho;
    let r = simulate_log_s(&SamplerSpec::equicorrelated(SIGMA2, rho, len), N_MC, 400).unwrap();
    let e = rel(r.inflation, closed);
    outcome(
        e < 0.10 && (closed - 3.448).abs() < 1e-12,
        format!(
            "measured {:.4} ± {:.4} vs closed form {closed:.3} ({:.2}%); the stated ~2.6x is {:.0}% below the closed form",
            r.inflation,
            r.inflation_se,
            100.0 * e,
            100.0 * (1.0 - 2.6 / closed)
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn length_heterogeneity() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, lengths) in [
        vec![(100usize, 0.5), (900, 0.5)],
        vec![(10, 0.3), (817, 0.7)],
    ]
    .into_iter()
    .enumerate()
    {
        let e_l: f64 = lengths.iter().map(|&(l, w)| w * l as f64).sum();
        let e_inv: f64 = lengths.iter().map(|&(l, w)| w / l as f64).sum();
        let jensen = e_inv * e_l;
        let r = simulate_log_s(
            &SamplerSpec::mixture(SIGMA2, lengths.clone()),
            N_MC,
            500 + i as u64,
        )
        .unwrap();
        let e = rel(r.inflation, jensen);
        pass &= e < 0.10 && jensen > 1.0;
        parts.push(format!(
            "{lengths:?}: {:.4} vs {jensen:.4} ({:.2}%)",
            r.inflation,
            100.0 * e
        ));
    }
    outcome(pass, parts.join("; "))
}

// 6 ------------------------------------------------------------------------

fn delta_bridge_check() -> Outcome {
    let mut pass = true;
    let mut worst = (0.0f64, 0.0f64);
    for (i, v) in [1e-4, 1e-3, 1e-2].into_iter().enumerate() {
        for mu in [0.0, 0.5] {
            let xs = gaussian_samples(mu, v, N_MC, 600 + i as u64).unwrap();
            let b = delta_bridge(&xs).unwrap();
            let closed = (v.exp() - 1.0) * (2.0 * mu + v).exp();
            pass &= b.relative_gap < 3.0 * v && rel(b.direct_var_s, closed) < 0.01;
            if b.relative_gap / v > worst.0 / worst.1.max(f64::MIN_POSITIVE) {
                worst = (b.relative_gap, v);
            }
            debug_assert!(rel(closed, lognormal_variance(mu, v)) < 1e-12);
        }
    }
    // Same draws shifted by μ = 0.5 scale Var[s] by e^{2μ} = e.
    let v = 1e-3;
    let base = delta_bridge(&gaussian_samples(0.0, v, N_MC, 601).unwrap()).unwrap();
    let shifted = delta_bridge(&gaussian_samples(0.5, v, N_MC, 601).unwrap()).unwrap();
    let factor = shifted.direct_var_s / base.direct_var_s;
    let unscaled_gap = rel(shifted.direct_var_s, shifted.bridged_var_s / 1f64.exp());
    pass &= rel(factor, 1f64.exp()) < 1e-9 && shifted.relative_gap < 3.0 * v && unscaled_gap > 0.5;
    outcome(
        pass,
        format!(
            "worst gap {:.2e} at v={:.0e} (bound {:.0e}); mu=0.5 scales Var[s] by {factor:.9}, bridge without e^(2mu) misses by {:.0}%",
            worst.0,
            worst.1,
            3.0 * worst.1,
            100.0 * unscaled_gap
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn clipping_semantics() -> Outcome {
    let clip = ClipConfig::default();
    let band = entropy_clip_bounds(clip.eps_low, clip.eps_high).unwrap();
    let mut rng = substream(700, 0);
    let mut mismatches = 0;
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        let dh: f64 = rng.random_range(-1e-3..1e-3);
        let s = dh.exp();
        let by_entropy = if dh < (-clip.eps_low).ln_1p() {
            ClipFlag::Low
        } else if dh > clip.eps_high.ln_1p() {
            ClipFlag::High
        } else {
            ClipFlag::None
        };
        let flag = clip.flag(s);
        mismatches += usize::from(flag != by_entropy);
        counts[flag as usize] += 1;
    }

    let max_var = clip.eps_low.max(clip.eps_high).powi(2);
    let mut worst_var = 0.0f64;
    for _ in 0..200 {
        let s: Vec<f64> = (0..64)
            .map(|_| rng.random_range(-0.5f64..0.5).exp())
            .collect();
        let w = clipped_weights(&s, &clip);
        let m = w.iter().sum::<f64>() / w.len() as f64;
        worst_var = worst_var.max(w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w.len() as f64);
    }

    let shown = (format!("{:.5}", band.lower), format!("{:.5}", band.upper));
    let pass = mismatches == 0
        && counts.iter().all(|&c| c > 0)
        && worst_var <= max_var
        && shown == ("-0.00030".to_string(), "0.00040".to_string());
    outcome(
        pass,
        format!(
            "{mismatches} flag mismatches on 10^4 values (none/high/low {counts:?}); clipped variance {worst_var:.3e} <= {max_var:.3e}; band [{:.5e}, {:.5e}] -> [{}, {}]",
            band.lower, band.upper, shown.0, shown.1
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn toy_training() -> Outcome {
    let cfg = TrainConfig::default();
    let spec_shape = cfg.algorithm == Algorithm::Gspo
        && (
            cfg.vocab_size,
            cfg.max_len,
            cfg.group_size,
            cfg.inner_updates,
            cfg.total_steps,
        ) == (8, 32, 8, 4, 500)
        && (cfg.clip.eps_low, cfg.clip.eps_high) == (3e-4, 4e-4);
    let log = match run_training(&cfg, &RewardSpec::default()) {
        Ok(log) => log,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let fractions_ok = log.steps.iter().all(|m| {
        [m.frac_clipped, m.frac_high, m.frac_low]
            .iter()
            .all(|f| (0.0..=1.0).contains(f))
            && (m.frac_high + m.frac_low - m.frac_clipped).abs() < 1e-12
    });
    let refresh_ok = log
        .steps
        .iter()
        .filter(|m| m.refresh)
        .all(|m| (m.min_s, m.max_s, m.mean_delta_h, m.frac_clipped) == (1.0, 1.0, 0.0, 0.0));
    let s = &log.summary;
    outcome(
        spec_shape
            && log.steps.len() == 500
            && s.reward_end > s.reward_start
            && s.ppl_end < s.ppl_start
            && fractions_ok
            && refresh_ok,
        format!(
            "reward {:.4} -> {:.4}, ppl {:.4} -> {:.4}, fractions in [0,1]: {fractions_ok}, s = 1 at refresh: {refresh_ok}",
            s.reward_start, s.reward_end, s.ppl_start, s.ppl_end
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn metric_values(m: &StepMetrics) -> Vec<f64> {
    let v = serde_json::to_value(m).unwrap();
    v.as_object()
        .unwrap()
        .values()
        .filter_map(|x| x.as_f64())
        .collect()
}

fn single_token_degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = substream(900 + seed, 0);
        let vocab = Vocabulary::new(rng.random_range(2..9)).unwrap();
        let old = PolicyParams::random(vocab, 1, 1.0, &mut rng).unwrap();
        let mut new = old.clone();
        new.logits_mut()
            .iter_mut()
            .for_each(|x| *x += rng.random_range(-0.05..0.05));
        let g = rng.random_range(2..9);
        let responses = (0..g)
            .map(|_| {
                TokenSequence::new(QueryId(0), vec![rng.random_range(0..vocab.size())], vocab)
                    .unwrap()
            })
            .collect();
        let rewards = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let group = Group::new(QueryId(0), responses, rewards).unwrap();
        for clip in [
            ClipConfig::default(),
            ClipConfig::new(0.02, 0.02).unwrap(),
            ClipConfig::new(0.5, 0.5).unwrap(),
        ] {
            let a = gspo_gradient(&new, &group, &old, &clip).unwrap();
            let b = grpo_gradient(&new, &group, &old, &clip).unwrap();
            let n = new.logits().len();
            let gd = a
                .grad
                .to_dense(n)
                .iter()
                .zip(b.grad.to_dense(n))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst
                .max(gd)
                .max((a.loss.objective - b.loss.objective).abs());
        }
    }

    let cfg = |algorithm| TrainConfig {
        algorithm,
        max_len: 1,
        total_steps: 200,
        ..TrainConfig::default()
    };
    let gspo = run_training(&cfg(Algorithm::Gspo), &RewardSpec::default()).unwrap();
    let grpo = run_training(&cfg(Algorithm::Grpo), &RewardSpec::default()).unwrap();
    let mut stream_worst = 0.0f64;
    for (x, y) in gspo.steps.iter().zip(&grpo.steps) {
        for (p, q) in metric_values(x).iter().zip(metric_values(y)) {
            stream_worst = stream_worst.max((p - q).abs());
        }
    }
    outcome(
        worst < 1e-10 && stream_worst < 1e-10 && gspo.steps.len() == grpo.steps.len(),
        format!("objective/gradient max diff {worst:.2e} over 150 groups; 200-step metric streams max diff {stream_worst:.2e}"),
    )
}

// 10 -----------------------------------------------------------------------

fn run_cli(args: &[&str], out: &Path) -> (i32, Vec<u8>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gspo-lab"));
    cmd.args(args).env_remove("SEED");
    if !out.as_os_str().is_empty() {
        cmd.arg("--out").arg(out);
    }
    let o = cmd.output().expect("spawn gspo-lab");
    (o.status.code().unwrap_or(-1), o.stdout)
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn reproducibility() -> Outcome {
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("equivalence", vec!["equivalence"]),
        ("variance", vec!["variance", "--n-samples", "20000"]),
        ("train", vec!["train"]),
        (
            "compare",
            vec!["train", "--compare", "--total-steps", "100"],
        ),
    ];
    let mut trees = Vec::new();
    let mut stdout = Vec::new();
    for _ in 0..2 {
        let root = tempfile::tempdir().unwrap();
        for (dir, args) in &commands {
            let (code, _) = run_cli(args, &root.path().join(dir));
            assert_eq!(code, 0, "{args:?}");
        }
        let (code, _) = run_cli(&["report", root.path().to_str().unwrap()], Path::new(""));
        assert_eq!(code, 0, "report");
        stdout.push(run_cli(&["clip-bounds"], Path::new("")).1);
        trees.push((snapshot(root.path()), root));
    }
    let (a, b) = (&trees[0].0, &trees[1].0);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let pass =
        !a.is_empty() && a.keys().eq(b.keys()) && differing.is_empty() && stdout[0] == stdout[1];
    outcome(
        pass,
        format!(
            "{} data files across equivalence, variance, train, compare, report: {} differ; clip-bounds output identical: {}",
            a.len(),
            differing.len(),
            stdout[0] == stdout[1]
        ),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);
    let criteria: [Criterion; 10] = [
        (
            "equivalence identity",
            equivalence_identity,
            Some(Duration::from_secs(5)),
        ),
        (
            "gradient correctness",
            gradient_correctness,
            Some(Duration::from_secs(30)),
        ),
        (
            "iid variance law",
            iid_variance_law,
            Some(Duration::from_secs(60)),
        ),
        ("correlation inflation", correlation_inflation, None),
        ("length heterogeneity", length_heterogeneity, None),
        ("delta bridge", delta_bridge_check, None),
        ("clipping semantics", clipping_semantics, None),
        ("toy training", toy_training, Some(Duration::from_secs(120))),
        ("single-token degeneracy", single_token_degeneracy, None),
        ("reproducibility", reproducibility, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        let budget = limit
            .map(|l| format!(" / {}s", l.as_secs()))
            .unwrap_or_default();
        println!(
            "{} {:>2} {name} [{:.1}s{budget}]: {}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
