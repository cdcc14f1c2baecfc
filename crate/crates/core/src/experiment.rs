//! Robustness sweeps, result tables, the SVG chart and the gradient-check
//! suite.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activation::{
    post_tv, reg_softmax_iterative, reg_softmax_onestep, RegActConfig, DEFAULT_TEST_ITERATIONS,
};
use crate::backward::{
    lambda_gradient, reg_softmax_onestep_backward, reg_softmax_unrolled_backward,
};
use crate::data::{stream_rng, ImpulseKind, Noise, Sample};
use crate::error::{Error, Result};
use crate::field::{Field3, LabelMap, Shape};
use crate::gradcheck::{finite_diff_check, finite_diff_check_slice, GradReport, Probes};
use crate::metrics::{regularization_effect, ConfusionMatrix, MetricsRow, ReMode};
use crate::net::{cross_entropy, FinalActivation, NetSpec, Network};

/// Default noise grid: clean, gaussian sigma
/// 0.01..0.09, pepper 1%, salt 1%.
pub const DEFAULT_SWEEP: &str = "gauss:0.01..0.09:0.02,pepper:0.01,salt:0.01";

/// Parses a comma-separated list of `clean`, `gauss:S`, `gauss:A..B:STEP`,
/// `pepper:F`, `salt:F`, `saltpepper:F`. The clean point is always first.
pub fn parse_sweep(spec: &str) -> Result<Vec<Noise>> {
    let mut out = vec![Noise::Clean];
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Error::InvalidConfig(format!("bad sweep number {t:?}")))
    };
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "clean" {
            continue;
        }
        let (kind, arg) = item
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("bad sweep item {item:?}")))?;
        match kind {
            "gauss" => {
                let parts: Vec<&str> = arg.split(':').collect();
                match parts.as_slice() {
                    [v] if !v.contains("..") => out.push(Noise::Gaussian { sigma: num(v)? }),
                    [range, step] => {
                        let (a, b) = range
                            .split_once("..")
                            .ok_or_else(|| Error::InvalidConfig(format!("bad range {range:?}")))?;
                        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
                        if step <= 0.0 || b < a {
                            return Err(Error::InvalidConfig(format!("empty range in {item:?}")));
                        }
                        let n = ((b - a) / step + 1e-9).floor() as usize;
                        for k in 0..=n {
                            // round away accumulated binary error
                            let s = ((a + k as f64 * step) * 1e9).round() / 1e9;
                            out.push(Noise::Gaussian { sigma: s });
                        }
                    }
                    _ => return Err(Error::InvalidConfig(format!("bad gaussian item {item:?}"))),
                }
            }
            "pepper" | "salt" | "saltpepper" => {
                let fraction = num(arg)?;
                if fraction > 1.0 {
                    return Err(Error::InvalidConfig(format!(
                        "fraction above 1 in {item:?}"
                    )));
                }
                let kind = match kind {
                    "pepper" => ImpulseKind::Pepper,
                    "salt" => ImpulseKind::Salt,
                    _ => ImpulseKind::Both,
                };
                out.push(Noise::Impulse { kind, fraction });
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown noise kind {other:?}"
                )))
            }
        }
    }
    Ok(out)
}

/// Something that maps an image to a label map.
pub enum Model<'a> {
    /// Plain softmax or, for a regularized net, the iterative activation with
    /// this many dual iterations.
    Net { net: &'a Network, iterations: usize },
    /// Plain-network logits followed by the iterative regularized softmax.
    PostTv {
        net: &'a Network,
        lambda: f64,
        iterations: usize,
    },
    /// Returns the ground truth; a harness check.
    Oracle,
}

impl Model<'_> {
    fn predict(&self, image: &Field3, truth: &LabelMap) -> Result<LabelMap> {
        match self {
            Model::Net { net, iterations } => Ok(net.predict(image, *iterations)?.1),
            Model::PostTv {
                net,
                lambda,
                iterations,
            } => {
                let logits = net.logits(image)?;
                Ok(LabelMap::argmax(
                    post_tv(&logits, *lambda, *iterations)?.as_field(),
                ))
            }
            Model::Oracle => Ok(truth.clone()),
        }
    }
}

/// Seed of the noise applied to test image `k` at sweep point `point`;
/// identical for every model so all models see the same noisy images.
pub fn noise_seed(seed: u64, point: usize, k: usize) -> u64 {
    stream_rng(seed, ((point as u64) << 32) | k as u64).random()
}

/// Scores of one model at one noise point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointScore {
    pub miou: f64,
    pub accuracy: f64,
    /// Mean RE of the predicted label maps.
    pub re: f64,
}

pub fn evaluate(
    model: &Model,
    test: &[Sample],
    noise: &Noise,
    point: usize,
    seed: u64,
) -> Result<PointScore> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    let classes = test
        .iter()
        .map(|s| s.label.max_label() as usize + 1)
        .max()
        .unwrap_or(1)
        .max(match model {
            Model::Net { net, .. } | Model::PostTv { net, .. } => net.spec().classes,
            Model::Oracle => 0,
        });
    let mut cm = ConfusionMatrix::new(classes);
    let mut re = 0.0;
    for (k, s) in test.iter().enumerate() {
        let noisy = noise.apply(&s.image, noise_seed(seed, point, k))?;
        let pred = model.predict(&noisy, &s.label)?;
        cm.add(&pred, &s.label)?;
        re += regularization_effect(&pred, ReMode::LabelIndex);
    }
    Ok(PointScore {
        miou: cm.miou(),
        accuracy: cm.accuracy(),
        re: re / test.len() as f64,
    })
}

/// Evaluates every model at every noise point. Rows are ordered by model,
/// then by noise point.
pub fn sweep(
    models: &[(String, Model)],
    test: &[Sample],
    grid: &[Noise],
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(models.len() * grid.len());
    for (name, model) in models {
        for (p, noise) in grid.iter().enumerate() {
            let s = evaluate(model, test, noise, p, seed)?;
            let (kind, level) = noise.descriptor();
            rows.push(MetricsRow {
                model: name.clone(),
                noise_kind: kind.to_string(),
                level,
                miou: s.miou,
                accuracy: s.accuracy,
                re: s.re,
            });
        }
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Line chart of mIoU against gaussian sigma (clean plotted at 0), one
/// polyline per model.
pub fn svg_chart(rows: &[MetricsRow]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let pts = |name: &str| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| r.model == name && (r.noise_kind == "clean" || r.noise_kind == "gauss"))
            .map(|r| (r.level, r.miou))
            .collect()
    };
    let xmax = rows
        .iter()
        .filter(|r| r.noise_kind == "gauss")
        .map(|r| r.level)
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let x = |v: f64| m + (w - 2.0 * m) * v / xmax;
    let y = |v: f64| h - m - (h - 2.0 * m) * v / 100.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    )
    .unwrap();
    for t in [0.0, 25.0, 50.0, 75.0, 100.0] {
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{t}</text>"#,
            m - 6.0,
            y(t) + 4.0
        )
        .unwrap();
    }
    for k in 0..=4 {
        let v = xmax * k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{v:.3}</text>"#,
            x(v),
            h - m + 16.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">gaussian sigma</text>"#,
        w / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mIoU (%)</text>"#, h / 2.0, h / 2.0).unwrap();
    for (i, name) in models.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = pts(name)
            .iter()
            .map(|&(a, b)| format!("{:.1},{:.1}", x(a), y(b)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            line.join(" ")
        )
        .unwrap();
        let ly = m + 16.0 * i as f64;
        writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{name}</text>"#,
            w - m - 120.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Which gradient check to sabotage, for exercising the failure path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Perturb(pub Option<String>);

impl Perturb {
    fn scale(&self, name: &str) -> f64 {
        if self.0.as_deref() == Some(name) {
            1.01
        } else {
            1.0
        }
    }
}

pub const GRADCHECK_NAMES: [&str; 7] = [
    "onestep",
    "unrolled_t1",
    "unrolled_t3",
    "unrolled_t5",
    "lambda",
    "network_plain",
    "network_regularized",
];

fn normal_field(shape: Shape, rng: &mut ChaCha8Rng) -> Field3 {
    Field3::from_fn(shape, |_, _, _| rng.sample(StandardNormal))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Field3, Field3, f64) {
    let c = rng.random_range(2..=4);
    let h = rng.random_range(2..=6);
    let w = rng.random_range(2..=6);
    let s = Shape::new(c, h, w).expect("positive");
    let o = normal_field(s, rng).map(|v| 2.0 * v);
    let weights = normal_field(s, rng);
    let lambda = rng.random_range(0.2..1.5);
    (o, weights, lambda)
}

fn worst(reports: Vec<GradReport>, tolerance: f64) -> GradReport {
    let mut out = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: 0,
        non_finite: 0,
        tolerance,
        pass: true,
    };
    for r in reports {
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
        out.max_abs_error = out.max_abs_error.max(r.max_abs_error);
        out.probes += r.probes;
        out.non_finite += r.non_finite;
        out.pass &= r.pass;
    }
    out
}

/// Central-difference step for the activation checks.
pub const FD_EPS: f64 = 1e-4;

/// One-step backward on `instances` random problems, relative tolerance 1e-6.
pub fn check_onestep(instances: usize, seed: u64, perturb: &Perturb) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = perturb.scale("onestep");
    let mut reports = Vec::new();
    for _ in 0..instances {
        let (o, wts, lambda) = random_instance(&mut rng);
        let cfg = RegActConfig::one_step(lambda, 0.25);
        let (_, tape) = reg_softmax_onestep(&o, &cfg)?;
        let g = reg_softmax_onestep_backward(&tape, &wts)?.map(|v| v * scale);
        let f = |x: &Field3| {
            reg_softmax_onestep(x, &cfg)
                .expect("valid config")
                .0
                .dot(&wts)
        };
        reports.push(finite_diff_check(f, &o, &g, FD_EPS, 1e-6)?);
    }
    Ok(worst(reports, 1e-6))
}

/// Unrolled backward through `t` iterations, relative tolerance 1e-5.
pub fn check_unrolled(
    t: usize,
    instances: usize,
    seed: u64,
    perturb: &Perturb,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = perturb.scale(&format!("unrolled_t{t}"));
    let mut reports = Vec::new();
    for _ in 0..instances {
        let (o, wts, lambda) = random_instance(&mut rng);
        let cfg = RegActConfig::iterative(lambda, 0.125, t);
        let (_, _, tape) = reg_softmax_iterative(&o, &cfg)?;
        let g = reg_softmax_unrolled_backward(&tape, &wts)?.map(|v| v * scale);
        let f = |x: &Field3| {
            reg_softmax_iterative(x, &cfg)
                .expect("valid config")
                .0
                .dot(&wts)
        };
        reports.push(finite_diff_check(f, &o, &g, FD_EPS, 1e-5)?);
    }
    Ok(worst(reports, 1e-5))
}

/// `dL/dlambda` with `eta` held at its forward value, relative tolerance 1e-6.
pub fn check_lambda(instances: usize, seed: u64, perturb: &Perturb) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = perturb.scale("lambda");
    let mut reports = Vec::new();
    for _ in 0..instances {
        let (o, wts, lambda) = random_instance(&mut rng);
        let cfg = RegActConfig::one_step(lambda, 0.25);
        let (_, tape) = reg_softmax_onestep(&o, &cfg)?;
        let g = lambda_gradient(&tape, &wts)? * scale;
        let d_eta = crate::grid::div(tape.eta());
        let f = |l: &[f64]| {
            let mut z = o.clone();
            z.axpy(-l[0], &d_eta);
            crate::activation::softmax(&z).dot(&wts)
        };
        reports.push(finite_diff_check_slice(
            f,
            &[lambda],
            &[g],
            FD_EPS,
            1e-6,
            &Probes::Explicit(vec![0]),
        )?);
    }
    Ok(worst(reports, 1e-6))
}

/// End-to-end parameter gradient of the cross-entropy loss on a random
/// 16x16 image; 200 sampled parameters, relative tolerance 1e-5.
pub fn check_network(
    activation: FinalActivation,
    seed: u64,
    perturb: &Perturb,
) -> Result<GradReport> {
    let name = match activation {
        FinalActivation::Plain => "network_plain",
        FinalActivation::Regularized => "network_regularized",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec {
        widths: vec![4, 8],
        activation,
        ..NetSpec::default()
    };
    let net = Network::build(spec, rng.random())?;
    let image = Field3::from_fn(Shape::new(3, 16, 16)?, |_, _, _| rng.random_range(0.0..1.0));
    let label = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..3u8)).collect())?;
    let out = net.forward(&image)?;
    let (_, d) = cross_entropy(&out.probs, &label)?;
    let g = net.backward(&out.tape, &d)?;
    let scale = perturb.scale(name);
    let analytic: Vec<f64> = g.flatten().into_iter().map(|v| v * scale).collect();
    let point = net.params().flatten();
    let mut probe = net.clone();
    finite_diff_check_slice(
        |x| {
            probe.params_mut().unflatten(x).expect("same length");
            let o = probe.forward(&image).expect("valid image");
            cross_entropy(&o.probs, &label).expect("valid labels").0
        },
        &point,
        &analytic,
        1e-5,
        1e-5,
        &Probes::Auto { seed },
    )
}

/// Runs every check; returns `(name, report)` in [`GRADCHECK_NAMES`] order.
pub fn gradcheck_suite(
    instances: usize,
    seed: u64,
    perturb: &Perturb,
) -> Result<Vec<(String, GradReport)>> {
    let mut out = Vec::new();
    out.push((
        "onestep".to_string(),
        check_onestep(instances, seed, perturb)?,
    ));
    for t in [1, 3, 5] {
        out.push((
            format!("unrolled_t{t}"),
            check_unrolled(t, instances, seed + t as u64, perturb)?,
        ));
    }
    out.push((
        "lambda".to_string(),
        check_lambda(instances, seed + 10, perturb)?,
    ));
    out.push((
        "network_plain".to_string(),
        check_network(FinalActivation::Plain, seed + 20, perturb)?,
    ));
    out.push((
        "network_regularized".to_string(),
        check_network(FinalActivation::Regularized, seed + 21, perturb)?,
    ));
    Ok(out)
}

pub fn gradcheck_csv(results: &[(String, GradReport)]) -> String {
    let mut s = String::from(GradReport::CSV_HEADER);
    s.push('\n');
    for (name, r) in results {
        s.push_str(&r.csv_row(name));
        s.push('\n');
    }
    s
}

/// Test-time iterations used when none are given.
pub const TEST_ITERATIONS: usize = DEFAULT_TEST_ITERATIONS;
