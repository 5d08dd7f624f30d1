//! Acceptance runner: one PASS/FAIL line per criterion, with the measured
//! value, the pinned tolerance and the wall time. Exits non-zero if any
//! criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{bwn_gradient_error, linear_norm_grad, norm_gradient_error, random_tensor, rel_err};
use normlab::activation_norm::{
    norm_backward, norm_forward, Affine, NormAxis, NormMetric, NormScheme, NormStats, StatsMode,
};
use normlab::constants::{mc_dispersion_ratio, ConstantQuery};
use normlab::dynamics::default_claim_check;
use normlab::harness::config::ExperimentConfig;
use normlab::harness::experiments::{
    bwn_invariance, half_precision, lp_compare, wd_equivalence, HalfStatus, NORM_SCHEDULED, WD_OFF_CORRECTED, WD_ON,
};
use normlab::numeric::half::{from_half_bits, HALF_MAX};
use normlab::numeric::PrecisionMode;
use normlab::weight_norm::NormOrder;

const METRICS: [NormMetric; 4] = [NormMetric::L2, NormMetric::L1, NormMetric::Linf, NormMetric::TopK(2)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Runner {
    failures: usize,
}

impl Runner {
    fn check(&mut self, id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= budget, o.detail),
            Err(_) => (false, "panicked".to_string()),
        };
        if !pass {
            self.failures += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml")
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(config_path()).unwrap()).unwrap();
    cfg.apply_seed_override(None).unwrap();
    cfg
}

fn c1_l1_identity() -> Outcome {
    let e = mc_dispersion_ratio(ConstantQuery::l1(256).unwrap(), 1_000_000, 1).unwrap();
    outcome((e.value - 1.0).abs() <= 0.01, format!("ratio {:.6} (stderr {:.1e}), tol ±0.01", e.value, e.stderr))
}

fn c2_linf_corridor() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [16, 256] {
        let e = mc_dispersion_ratio(ConstantQuery::linf(n).unwrap(), 200_000, 2).unwrap();
        pass &= (0.74..=1.56).contains(&e.value);
        parts.push(format!("n={n}: {:.4}", e.value));
    }
    outcome(pass, format!("{} in [0.74, 1.56]", parts.join(", ")))
}

fn c3_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, &m) in METRICS.iter().enumerate() {
        for axis in [NormAxis::Batch, NormAxis::Feature] {
            let scheme = NormScheme { axis, ..NormScheme::batch(m) };
            worst = worst.max(norm_gradient_error(&scheme, 100 + i as u64));
        }
    }
    for order in [NormOrder::L2, NormOrder::L1, NormOrder::Inf] {
        worst = worst.max(bwn_gradient_error(order, 300));
    }
    outcome(worst <= 1e-5, format!("worst rel err {worst:.2e}, tol 1e-5"))
}

fn c4_scale_invariance() -> Outcome {
    let mut forward_err: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    let x = random_tensor(16, 6, 41);
    let w = random_tensor(5, 6, 42);
    let upstream = random_tensor(16, 5, 43);
    for m in METRICS {
        // Epsilon breaks exact invariance; keep it negligible against the smallest scale.
        let scheme = NormScheme::batch(m).with_epsilon(1e-12);
        let z = x.matmul_nt(&w).unwrap();
        let affine = Affine::identity(5);
        let base = common::forward(&z, &scheme, &affine);
        for alpha in [0.01, 100.0] {
            let scaled = common::forward(&z.scale(alpha), &scheme, &affine);
            forward_err = forward_err.max(rel_err(scaled.data(), base.data()));
        }
        let g1 = linear_norm_grad(&w, &x, &scheme, &upstream);
        let g2 = linear_norm_grad(&w.scale(2.0), &x, &scheme, &upstream);
        grad_err = grad_err.max(rel_err(g2.data(), g1.scale(0.5).data()));
    }
    outcome(
        forward_err <= 1e-6 && grad_err <= 1e-6,
        format!("forward {forward_err:.2e}, gradient {grad_err:.2e}, tol 1e-6"),
    )
}

fn c5_claim() -> Outcome {
    let r = default_claim_check(1e-3, 7).unwrap();
    outcome(
        (3.5..=4.5).contains(&r.ratio_at_half_eta),
        format!("residual ratio {:.4} in [3.5, 4.5]", r.ratio_at_half_eta),
    )
}

fn forward_backward(
    x: &normlab::numeric::Tensor,
    metric: NormMetric,
    upstream: &normlab::numeric::Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let scheme = NormScheme::batch(metric);
    let affine = Affine::identity(x.shape()[1]);
    let mut stats = NormStats::new(x.shape()[1], 0.9);
    let (y, cache) = norm_forward(x, &scheme, &affine, StatsMode::Train, &mut stats).unwrap();
    let g = norm_backward(upstream, &cache, &scheme).unwrap();
    (y.data().to_vec(), g.x.data().to_vec())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn c6_identities() -> Outcome {
    let x = random_tensor(8, 4, 61);
    let upstream = random_tensor(8, 4, 62);
    let (l1_y, l1_g) = forward_backward(&x, NormMetric::L1, &upstream);
    let (tn_y, tn_g) = forward_backward(&x, NormMetric::TopK(8), &upstream);
    let (li_y, li_g) = forward_backward(&x, NormMetric::Linf, &upstream);
    let (t1_y, t1_g) = forward_backward(&x, NormMetric::TopK(1), &upstream);
    let top_n = bits(&l1_y) == bits(&tn_y) && bits(&l1_g) == bits(&tn_g);
    let top_1 = bits(&li_y) == bits(&t1_y) && bits(&li_g) == bits(&t1_g);
    outcome(top_n && top_1, format!("Top(n)==L1 {top_n}, Top(1)==Linf {top_1}, bitwise"))
}

fn c7_wd_equivalence(out: &Path) -> Outcome {
    let cfg = desk_config();
    let r = wd_equivalence(&cfg, out).unwrap();
    let on = r.arm(WD_ON).unwrap().accuracy();
    let corrected = r.arm(WD_OFF_CORRECTED).unwrap().accuracy() - on;
    let scheduled = r.arm(NORM_SCHEDULED).unwrap().accuracy() - on;
    let pass = cfg.optimizer.weight_decay == 0.0005
        && cfg.run.epochs == 20
        && corrected.abs() <= 0.02
        && scheduled.abs() <= 0.02
        && r.growth_wd_off.growth
        && r.arms.iter().all(|a| !a.result.diverged());
    outcome(
        pass,
        format!(
            "wd-on {on:.4}, corrected gap {corrected:+.4}, norm-schedule gap {scheduled:+.4} (tol 0.02); wd-off growth flag {} ({:.0}% channels grew)",
            r.growth_wd_off.growth,
            100.0 * r.growth_wd_off.grew_fraction
        ),
    )
}

fn half_square_overflows() -> bool {
    let half = PrecisionMode::HALF;
    (0u16..0x7C00).map(from_half_bits).filter(|&v| v > 255.9).all(|v| {
        half.mul(v, v) == f64::INFINITY && half.mul(-v, -v) == f64::INFINITY && half.round(-v).abs() <= HALF_MAX
    })
}

fn c8_half(out: &Path) -> Outcome {
    let unit = half_square_overflows();
    let r = half_precision(&desk_config(), out).unwrap();
    let l1_gap = r.arm("l1-half").unwrap().accuracy() - r.arm("l1-f32").unwrap().accuracy();
    let l1_ok = r.l1_status == HalfStatus::Ok && l1_gap.abs() <= 0.02;
    let l2_flagged = r.l2_status != HalfStatus::Ok;
    outcome(
        unit && l1_ok && l2_flagged,
        format!("unit {unit}; l2-half {}; l1-half {} gap {l1_gap:+.4} (tol 0.02)", r.l2_status, r.l1_status),
    )
}

fn c9_bwn(out: &Path) -> Outcome {
    let r = bwn_invariance(&desk_config(), out).unwrap();
    let pass =
        r.max_norm_deviation <= 1e-6 && r.rho_init_error <= 1e-12 && r.fold_error <= 1e-9 && !r.arm.result.diverged();
    outcome(
        pass,
        format!(
            "norm dev {:.1e} (tol 1e-6), rho init {:.1e} (tol 1e-12), fold {:.1e} (tol 1e-9), {} records",
            r.max_norm_deviation,
            r.rho_init_error,
            r.fold_error,
            r.arm.result.trajectory.records().len()
        ),
    )
}

fn c10_lp_compare(out: &Path) -> Outcome {
    let cfg = desk_config();
    let r = lp_compare(&cfg, out).unwrap();
    let l2 = r.arm("l2").unwrap().accuracy();
    let l1 = r.arm("l1").unwrap().accuracy() - l2;
    let top = r.arm(&format!("top{}", cfg.experiment.top_k)).unwrap().accuracy() - l2;
    let linf = r.arm("linf").unwrap().accuracy() - l2;
    let pass = cfg.run.batch_size == 64 && cfg.experiment.top_k == 10 && l1.abs() <= 0.01 && top.abs() <= 0.01;
    outcome(pass, format!("l2 {l2:.4}, l1 {l1:+.4}, top10 {top:+.4} (tol 0.01), linf {linf:+.4}"))
}

fn normlab(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_normlab")).args(args).env_remove("NORMLAB_SEED").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn c11_determinism(first: &Path, second: &Path) -> Outcome {
    let cfg = config_path();
    let cfg = cfg.to_str().unwrap();
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for name in ["wd-equivalence", "half-precision", "bwn-invariance", "lp-compare"] {
        let a = first.join(name);
        let b = second.join(name);
        normlab(&["experiment", name, "--config", cfg, "--out", b.to_str().unwrap()]);
        let (fa, fb) = (files(&a), files(&b));
        compared += fa.len();
        if fa != fb {
            mismatched.push(name);
        }
    }
    let commands: [&[&str]; 3] = [
        &["verify-constants", "--scheme", "topk", "--n", "64", "--k", "10", "--trials", "100000", "--seed", "5"],
        &["verify-claim", "--eta", "1e-3", "--seed", "7"],
        &["train", "--config", cfg],
    ];
    for args in commands {
        compared += 1;
        if normlab(args) != normlab(args) {
            mismatched.push(args[0]);
        }
    }
    outcome(mismatched.is_empty(), format!("{compared} CSV outputs compared, mismatches {mismatched:?}"))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let sub = |name: &str| {
        let p = first.join(name);
        std::fs::create_dir_all(&p).unwrap();
        p
    };
    let mut r = Runner { failures: 0 };
    let s = Duration::from_secs;
    r.check(1, "L1 constant identity", s(30), c1_l1_identity);
    r.check(2, "L-infinity constant corridor", s(30), c2_linf_corridor);
    r.check(3, "gradient suite", s(10), c3_gradients);
    r.check(4, "scale invariance", s(5), c4_scale_invariance);
    r.check(5, "direction-update claim", s(10), c5_claim);
    r.check(6, "Top(k) identities", s(5), c6_identities);
    r.check(7, "WD/LR equivalence", s(600), || c7_wd_equivalence(&sub("wd-equivalence")));
    r.check(8, "half precision", s(600), || c8_half(&sub("half-precision")));
    r.check(9, "BWN invariance", s(300), || c9_bwn(&sub("bwn-invariance")));
    r.check(10, "Lp compare", s(600), || c10_lp_compare(&sub("lp-compare")));
    r.check(11, "determinism", s(1200), || c11_determinism(&first, &second));
    println!("{} of 11 criteria passed", 11 - r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
