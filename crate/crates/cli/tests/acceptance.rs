//! Acceptance run: one PASS/FAIL line per criterion, with its timing.
//!
//! Failures are reported but do not fail the process unless
//! `GRADCAL_ACCEPTANCE_STRICT=1`. `GRADCAL_ACCEPTANCE_ONLY=7,8` runs a subset.

use std::time::{Duration, Instant};

use gradcal::calibrate::{fit_temperature, predictions_at};
use gradcal::gaussbench::{
    correlation_experiment, expected_grad_logits, mc_bias_check, simplex_fixed_point, CorrelationConfig,
    FixedPointTarget,
};
use gradcal::losses::{cross_entropy, focal_grad_factor, focal_loss, gbs_weight, LossKind, LossSpec};
use gradcal::metrics::{ada_ece, classwise_ece, ece, PredictionSet};
use gradcal::numkit::{argmax, one_hot, softmax, Matrix, ProbVector, RngStream};
use gradcal::trainer::MlpModel;
use gradcal_cli::checkpoint;
use gradcal_cli::config::RunConfig;
use gradcal_cli::experiments::{par_map, train_seed, RunOptions, SeedRun};

type Check = std::result::Result<String, String>;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_weighting_identity() -> Check {
    let mut rng = RngStream::new(1);
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    while samples < 10_000 {
        let k = 2 + (rng.uniform() * 5.0) as usize;
        let model = MlpModel::new(2, &[16, 16], k, &mut rng).map_err(|e| e.to_string())?;
        let gamma = rng.uniform_range(0.0, 6.0);
        let beta = rng.uniform_range(1.0, 3.0);
        let loss = LossSpec::bsce_gra(gamma, beta).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let x = [3.0 * rng.normal(), 3.0 * rng.normal()];
            let y = (rng.uniform() * k as f64) as usize;
            let cache = model.forward(&x).map_err(|e| e.to_string())?;
            let p = softmax(cache.logits().row(0), 1.0).map_err(|e| e.to_string())?;
            let label = one_hot(y, k).map_err(|e| e.to_string())?;
            let w = gbs_weight(&p, &label, gamma, beta);
            let g_ce = model.backward(&cache, &cross_entropy(&p, &label).grad_logits).map_err(|e| e.to_string())?;
            let g_gra = model.backward(&cache, &loss.evaluate(&p, &label).grad_logits).map_err(|e| e.to_string())?;
            let got: Vec<f64> = g_gra.iter().flat_map(|l| l.weights.data().iter().chain(&l.bias).copied()).collect();
            let want: Vec<f64> =
                g_ce.iter().flat_map(|l| l.weights.data().iter().chain(&l.bias).map(|v| w * v)).collect();
            worst = worst.max(rel_err(&got, &want));
            samples += 1;
        }
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:.3e} ≥ 1e-12"))?;
    Ok(format!("max relative error {worst:.2e} over {samples} samples"))
}

fn focal_factorization() -> Check {
    let mut rng = RngStream::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = 2 + (rng.uniform() * 8.0) as usize;
        let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
        let y = (rng.uniform() * k as f64) as usize;
        let gamma = rng.uniform_range(0.5, 6.0);
        let p = softmax(&logits, 1.0).map_err(|e| e.to_string())?;
        let label = one_hot(y, k).map_err(|e| e.to_string())?;
        let g = focal_grad_factor(p[y], gamma).map_err(|e| e.to_string())?;
        let want: Vec<f64> = cross_entropy(&p, &label).grad_logits.iter().map(|v| g * v).collect();
        worst = worst.max(rel_err(&focal_loss(&p, &label, gamma).grad_logits, &want));
    }
    ensure(worst < 1e-9, || format!("factorisation error {worst:.3e} ≥ 1e-9"))?;
    let mut argmax_g1 = f64::NAN;
    for gamma in [1.0, 2.0, 3.0, 5.0] {
        let n = 100_000;
        let g: Vec<f64> = (1..n).map(|i| focal_grad_factor(i as f64 / n as f64, gamma).unwrap()).collect();
        let peaks: Vec<usize> = (1..g.len() - 1).filter(|&i| g[i] > g[i - 1] && g[i] >= g[i + 1]).collect();
        ensure(peaks.len() == 1, || format!("γ={gamma}: {} interior maxima", peaks.len()))?;
        if gamma == 1.0 {
            argmax_g1 = (peaks[0] + 1) as f64 / n as f64;
        }
    }
    let off = (argmax_g1 - (-2f64).exp()).abs();
    ensure(off < 1e-3, || format!("γ=1 maximiser {argmax_g1} is {off:.2e} from e⁻²"))?;
    Ok(format!("factorisation error {worst:.2e}; one peak per γ; γ=1 peak at p={argmax_g1:.5} (e⁻²={:.5})", (-2f64).exp()))
}

fn away_from_kinks(p: &ProbVector, y: usize, margin: f64) -> bool {
    let p_t = p[y];
    let others: Vec<f64> = (0..p.len()).filter(|&i| i != y).map(|i| p[i]).collect();
    let mut sorted = others.clone();
    sorted.sort_by(f64::total_cmp);
    (p_t - 0.2).abs() >= margin
        && others.iter().all(|&q| (q - p_t).abs() >= margin)
        && sorted.windows(2).all(|w| w[1] - w[0] >= margin)
}

fn finite_differences() -> Check {
    let specs = [
        LossSpec::ce(),
        LossSpec::with_defaults(LossKind::BrierLoss),
        LossSpec::with_defaults(LossKind::Focal),
        LossSpec::with_defaults(LossKind::FocalFlsd53),
        LossSpec::with_defaults(LossKind::DualFocal),
        LossSpec::with_defaults(LossKind::Bsce),
    ];
    let mut rng = RngStream::new(3);
    let mut summary = Vec::new();
    for spec in specs {
        let value = |z: &[f64], y: usize| -> f64 {
            let p = softmax(z, 1.0).unwrap();
            spec.evaluate(&p, &one_hot(y, z.len()).unwrap()).value
        };
        let (mut worst, mut checked, mut low) = (0.0f64, 0, 0);
        while checked < 1000 {
            let k = 2 + (rng.uniform() * 5.0) as usize;
            let z: Vec<f64> = (0..k).map(|_| 1.5 * rng.normal()).collect();
            let y = (rng.uniform() * k as f64) as usize;
            let p = softmax(&z, 1.0).map_err(|e| e.to_string())?;
            if !away_from_kinks(&p, y, 1e-4) {
                continue;
            }
            low += usize::from(p[y] < 0.2);
            let analytic = spec.evaluate(&p, &one_hot(y, k).map_err(|e| e.to_string())?).grad_logits;
            let h = 1e-6;
            let numeric: Vec<f64> = (0..k)
                .map(|i| {
                    let (mut up, mut down) = (z.clone(), z.clone());
                    up[i] += h;
                    down[i] -= h;
                    (value(&up, y) - value(&down, y)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(rel_err(&numeric, &analytic));
            checked += 1;
        }
        ensure(worst < 1e-5, || format!("{}: relative error {worst:.3e} ≥ 1e-5", spec.kind))?;
        if spec.kind == LossKind::FocalFlsd53 {
            ensure(low > 0 && low < 1000, || "FLSD-53 cases did not cover both γ regions".into())?;
        }
        summary.push(format!("{} {worst:.1e}", spec.kind));
    }
    Ok(format!("1000 cases each; worst relative error: {}", summary.join(", ")))
}

fn brute_ece(conf: &[f64], hit: &[f64], m: usize) -> f64 {
    let n = conf.len() as f64;
    (0..m)
        .map(|b| {
            let (lo, hi) = (b as f64 / m as f64, (b + 1) as f64 / m as f64);
            let idx: Vec<usize> =
                (0..conf.len()).filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == m - 1 && conf[i] <= 1.0))).collect();
            if idx.is_empty() {
                return 0.0;
            }
            let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / idx.len() as f64;
            let a = idx.iter().map(|&i| hit[i]).sum::<f64>() / idx.len() as f64;
            idx.len() as f64 / n * (a - c).abs()
        })
        .sum()
}

fn brute_ada_ece(conf: &[f64], hit: &[f64], m: usize) -> f64 {
    let n = conf.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(hit[a].total_cmp(&hit[b])).then(a.cmp(&b)));
    let mut start = 0;
    let mut total = 0.0;
    for b in 0..m {
        let size = n / m + usize::from(b < n % m);
        let idx = &order[start..start + size];
        let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / size as f64;
        let a = idx.iter().map(|&i| hit[i]).sum::<f64>() / size as f64;
        total += size as f64 / n as f64 * (a - c).abs();
        start += size;
    }
    total
}

fn metric_oracles() -> Check {
    let mut rng = RngStream::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + (rng.uniform() * 50.0) as usize;
        let k = 2 + (rng.uniform() * 4.0) as usize;
        let m = (1 + (rng.uniform() * 5.0) as usize).min(n);
        let probs: Vec<ProbVector> = (0..n)
            .map(|_| softmax(&(0..k).map(|_| 2.0 * rng.normal()).collect::<Vec<_>>(), 1.0).unwrap())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| (rng.uniform() * k as f64) as usize).collect();
        let conf: Vec<f64> = probs.iter().map(|p| p.confidence()).collect();
        let hit: Vec<f64> = probs.iter().zip(&labels).map(|(p, &y)| f64::from(u8::from(p.argmax() == y))).collect();
        let per_class = (0..k)
            .map(|j| {
                let pj: Vec<f64> = probs.iter().map(|p| p[j]).collect();
                let yj: Vec<f64> = labels.iter().map(|&y| f64::from(u8::from(y == j))).collect();
                brute_ece(&pj, &yj, m)
            })
            .sum::<f64>()
            / k as f64;
        let set = PredictionSet::new(probs, labels).map_err(|e| e.to_string())?;
        worst = worst
            .max((ece(&set, m).map_err(|e| e.to_string())?.0 - brute_ece(&conf, &hit, m)).abs())
            .max((ada_ece(&set, m).map_err(|e| e.to_string())?.0 - brute_ada_ece(&conf, &hit, m)).abs())
            .max((classwise_ece(&set, m).map_err(|e| e.to_string())? - per_class).abs());
    }
    ensure(worst < 1e-12, || format!("disagreement {worst:.3e} ≥ 1e-12"))?;
    Ok(format!("100 sets, max disagreement {worst:.2e}"))
}

fn interior(rng: &mut RngStream, k: usize) -> ProbVector {
    softmax(&rng.standard_normal(k).unwrap(), 1.0).unwrap()
}

fn bias_identity() -> Check {
    let mut rng = RngStream::new(5);
    let mut worst_z: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    for _ in 0..20 {
        let k = 2 + (rng.uniform() * 5.0) as usize;
        let eta = interior(&mut rng, k);
        let (p1, p2) = (interior(&mut rng, k), interior(&mut rng, k));
        let a = mc_bias_check(&eta, &p1, 1_000_000, &mut rng).map_err(|e| e.to_string())?;
        let b = mc_bias_check(&eta, &p2, 1_000_000, &mut rng).map_err(|e| e.to_string())?;
        let expected: f64 = eta.iter().map(|e| e * (e - 1.0)).sum();
        ensure((a.expected - expected).abs() < 1e-12, || "closed form disagrees".into())?;
        for c in [a, b] {
            worst_z = worst_z.max((c.estimate - c.expected).abs() / c.stderr);
        }
        worst_pair = worst_pair.max((a.estimate - b.estimate).abs() / (a.stderr.powi(2) + b.stderr.powi(2)).sqrt());
    }
    ensure(worst_z < 3.0, || format!("estimate {worst_z:.2} standard errors from Σ η(η−1)"))?;
    ensure(worst_pair < 3.0, || format!("two predictions differ by {worst_pair:.2} combined standard errors"))?;
    Ok(format!("worst |z| {worst_z:.2} against the closed form, {worst_pair:.2} between predictions"))
}

fn fixed_point() -> Check {
    let loss = LossSpec::bsce_gra(4.0, 2.0).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(6);
    let (mut worst_q, mut worst_g) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let k = 2 + i % 5;
        let eta = interior(&mut rng, k);
        let r = simplex_fixed_point(&eta, &loss, 1.0, 200).map_err(|e| e.to_string())?;
        worst_q = worst_q.max(r.q.iter().zip(eta.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let (g, _) = expected_grad_logits(&eta, &eta, &loss, FixedPointTarget::Posterior).map_err(|e| e.to_string())?;
        worst_g = worst_g.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    ensure(worst_q < 1e-4, || format!("‖q − η‖∞ = {worst_q:.3e} ≥ 1e-4"))?;
    ensure(worst_g < 1e-8, || format!("gradient norm at η {worst_g:.3e} ≥ 1e-8"))?;
    Ok(format!("20 posteriors, K 2..6: max ‖q − η‖∞ {worst_q:.2e}, max ‖∇‖ at η {worst_g:.2e}"))
}

fn toy_correlation() -> Check {
    let report = correlation_experiment(&CorrelationConfig::default()).map_err(|e| e.to_string())?;
    let get = |name: &str| report.result(name).map(|r| r.pearson).unwrap_or(f64::NAN);
    let (gbs, dfl, fl) = (get("gbs"), get("dual-focal"), get("focal"));
    let line = format!(
        "gBS {gbs:.3} (anchor 0.664), DFL {dfl:.3} (0.638), FL {fl:.3} (0.550); test accuracy {:?}",
        report.test_accuracy.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    let mut problems = Vec::new();
    if !(gbs > dfl && dfl > fl) {
        problems.push("ordering gBS > DFL > FL does not hold".to_string());
    }
    for (name, got, anchor) in [("gBS", gbs, 0.664), ("DFL", dfl, 0.638), ("FL", fl, 0.550)] {
        if (got - anchor).abs() > 0.15 {
            problems.push(format!("{name} off its anchor by {:.3}", (got - anchor).abs()));
        }
    }
    if problems.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}; {}", problems.join("; ")))
    }
}

fn toy_calibration() -> Check {
    let mut config = RunConfig::default();
    config.train.epochs = 20;
    let seeds = [1u64, 42, 71];
    let kinds = [LossKind::Ce, LossKind::Bsce, LossKind::BsceGra];
    let jobs: Vec<(LossKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let runs: Vec<SeedRun> =
        par_map(&jobs, |&(k, s)| train_seed(&config, LossSpec::with_defaults(k), s, RunOptions::default()))
            .map_err(|e| e.to_string())?;
    let mean_ece = |k: LossKind| {
        let v: Vec<f64> = runs.iter().filter(|r| r.loss.kind == k).map(|r| r.evaluation.pre.ece).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (ce, bsce, gra) = (mean_ece(LossKind::Ce), mean_ece(LossKind::Bsce), mean_ece(LossKind::BsceGra));
    let line = format!("mean pre-T ECE: CE {ce:.4}, BSCE {bsce:.4}, BSCE-GRA {gra:.4}");
    let mut problems = Vec::new();
    if !(gra < ce) {
        problems.push("BSCE-GRA < CE does not hold");
    }
    if !(gra <= bsce) {
        problems.push("BSCE-GRA ≤ BSCE does not hold");
    }
    if problems.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}; {}", problems.join("; ")))
    }
}

/// Binary logits at confidences 0.5..0.95 with exactly matching hit counts.
fn calibrated_logits() -> (Matrix, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (conf, n, hits) in [(0.5, 20, 10), (0.6, 20, 12), (0.7, 20, 14), (0.8, 20, 16), (0.9, 20, 18), (0.95, 20, 19)] {
        let z = f64::ln(conf / (1.0 - conf));
        for i in 0..n {
            rows.push(vec![z, 0.0]);
            labels.push(usize::from(i >= hits));
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

fn temperature_scaling() -> Check {
    let (logits, labels) = calibrated_logits();
    let fit = fit_temperature(&logits, &labels, 15).map_err(|e| e.to_string())?;
    ensure(fit.temperature == 1.0, || format!("calibrated set fitted T = {}", fit.temperature))?;
    let doubled = Matrix::from_vec(logits.rows(), 2, logits.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let fit2 = fit_temperature(&doubled, &labels, 15).map_err(|e| e.to_string())?;
    ensure((fit2.temperature - 2.0).abs() <= 0.1 + 1e-12, || format!("doubled logits fitted T = {}", fit2.temperature))?;
    let mut fits = vec![fit, fit2];

    let mut rng = RngStream::new(9);
    for _ in 0..30 {
        let n = 50 + (rng.uniform() * 200.0) as usize;
        let k = 2 + (rng.uniform() * 6.0) as usize;
        let scale = rng.uniform_range(0.3, 6.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| scale * rng.normal()).collect()).collect();
        let labels: Vec<usize> = rows
            .iter()
            .map(|z| rng.categorical(softmax(&z.iter().map(|v| v / 2.0).collect::<Vec<_>>(), 1.0).unwrap().as_slice()))
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let base = predictions_at(&m, &labels, 1.0).map_err(|e| e.to_string())?;
        for t in [0.1, 0.5, 2.0, 7.3, 10.0] {
            let at_t = predictions_at(&m, &labels, t).map_err(|e| e.to_string())?;
            ensure(at_t.accuracy() == base.accuracy(), || format!("accuracy changed at T = {t}"))?;
            ensure(
                rows.iter().zip(at_t.probs()).all(|(z, p)| argmax(z) == p.argmax()),
                || format!("argmax changed at T = {t}"),
            )?;
        }
        fits.push(fit_temperature(&m, &labels, 15).map_err(|e| e.to_string())?);
    }
    let bad = fits.iter().filter(|f| f.val_ece_post > f.val_ece_pre).count();
    ensure(bad == 0, || format!("{bad} fits raised validation ECE"))?;
    Ok(format!(
        "T = {} on the calibrated set, {} on doubled logits; accuracy fixed; {} fits never raise validation ECE",
        fits[0].temperature,
        fits[1].temperature,
        fits.len()
    ))
}

fn determinism() -> Check {
    let config: RunConfig = gradcal_cli::config::parse_config_str(
        "[data.synthetic]\ntrain_per_class = 400\ntest_per_class = 100\n\
         [train]\nepochs = 5\nhidden = [32, 32]\nvalidation_size = 200\n",
    )
    .map_err(|e| e.to_string())?;
    let loss = LossSpec::with_defaults(LossKind::BsceGra);
    let bits = |r: &SeedRun| r.state.model.flat_parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let a = train_seed(&config, loss, 11, RunOptions::default()).map_err(|e| e.to_string())?;
    let b = train_seed(&config, loss, 11, RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(bits(&a) == bits(&b), || "same-seed reruns differ".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.ckpt");
    let mut three = config.clone();
    three.train.epochs = 3;
    train_seed(&three, loss, 11, RunOptions { resume: None, checkpoint: Some(path.clone()) }).map_err(|e| e.to_string())?;
    let state = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let resumed = train_seed(&config, loss, 11, RunOptions { resume: Some(state), checkpoint: None }).map_err(|e| e.to_string())?;
    ensure(bits(&resumed) == bits(&a), || "3 + 2 epochs differ from 5".into())?;

    let bytes = checkpoint::encode(&a.state);
    let back = checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    ensure(checkpoint::encode(&back) == bytes, || "round trip is not bit-exact".into())?;
    ensure(back.model.flat_parameters().iter().zip(a.state.model.flat_parameters()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "round trip changed parameters".into()
    })?;

    let mut rejected = 0;
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    rejected += usize::from(checkpoint::decode(&flipped).is_err());
    rejected += usize::from(checkpoint::decode(&bytes[..bytes.len() - 7]).is_err());
    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let n = versioned.len() - 4;
    let crc = crc32_of(&versioned[..n]);
    versioned[n..].copy_from_slice(&crc.to_le_bytes());
    rejected += usize::from(checkpoint::decode(&versioned).is_err());
    ensure(rejected == 3, || format!("only {rejected} of 3 corrupted checkpoints rejected"))?;
    Ok("reruns, 3 + 2 resume and round trip bit-identical; flipped bit, truncation and version bump rejected".into())
}

/// Bitwise CRC-32 (IEEE), independent of the crate the writer uses.
fn crc32_of(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient-weighting identity", budget: Duration::from_secs(10), run: gradient_weighting_identity },
        Criterion { id: 2, name: "focal factorisation", budget: Duration::from_secs(10), run: focal_factorization },
        Criterion { id: 3, name: "finite differences", budget: Duration::from_secs(60), run: finite_differences },
        Criterion { id: 4, name: "metric oracles", budget: Duration::from_secs(30), run: metric_oracles },
        Criterion { id: 5, name: "bias identity", budget: Duration::from_secs(60), run: bias_identity },
        Criterion { id: 6, name: "fixed point", budget: Duration::from_secs(60), run: fixed_point },
        Criterion { id: 7, name: "toy correlation", budget: Duration::from_secs(600), run: toy_correlation },
        Criterion { id: 8, name: "toy calibration", budget: Duration::from_secs(900), run: toy_calibration },
        Criterion { id: 9, name: "temperature scaling", budget: Duration::from_secs(60), run: temperature_scaling },
        Criterion { id: 10, name: "determinism and persistence", budget: Duration::from_secs(60), run: determinism },
    ];
    let only: Option<Vec<u32>> = std::env::var("GRADCAL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("GRADCAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let mut failed = Vec::new();
    let mut ran = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", c.budget.as_secs())),
            Err(d) => (false, d),
        };
        println!(
            "{} criterion {:>2} {}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
        if !pass {
            failed.push(c.id);
        }
        ran += 1;
    }
    println!("acceptance: {} of {ran} criteria passed{}", ran - failed.len(), if failed.is_empty() {
        String::new()
    } else {
        format!("; failing: {failed:?}")
    });
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
