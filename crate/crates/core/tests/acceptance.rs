//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! when any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 4 5`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use certattack::attacks::{AttackSpec, Method};
use certattack::autodiff::{finite_diff_check, ConvGeometry, Tape, Tensor, Var};
use certattack::geometry::{exit_radius, sampled_first_exit, stay_radius, BallLedger, CertifiedBall};
use certattack::harness::{
    certifiers, compare_selected, ibp_study, load_datasets, run_sweep, sample_seed, select_operating_point,
    sigma_estimation_run, trained_model, ExperimentConfig, RunRecord,
};
use certattack::ibp::{ibp_radius_label, ibp_verify_label, propagate, IntervalBox};
use certattack::model::Classifier;
use certattack::smoothing::{cohen_radius, goodman_intervals};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (u32, &'static str, fn(&Path) -> Outcome);

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(text).expect("acceptance config parses");
    cfg.output_dir = out.to_path_buf();
    cfg.validate().expect("acceptance config is valid");
    cfg
}

fn mnist_config(name: &str, samples: usize, methods: &str, out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
name = "{name}"
seed = 0
samples = {samples}
grid_units = "pixel"

[dataset]
kind = "mnist"
dir = {dir:?}

[model]
arch = "mlp"
hidden = [128]
epochs = 15
lr = 0.05

[certifier]
kind = "smoothing"
sigmas = [0.5]
attack_samples = 100
judge_samples = 1000
alpha = 0.005
{methods}"#,
        dir = mnist_dir().to_string_lossy()
    );
    config(&text, out)
}

const C3_METHODS: &str = r#"
[[methods]]
method = "caa"
eps_min = [1, 5]
eps_max = [20, 40]
delta = [0.05]

[[methods]]
method = "pgd"
eps = [4, 10, 20, 40]
"#;

const SINGLE_CAA: &str = r#"
[[methods]]
method = "caa"
eps_min = [5]
eps_max = [40]
delta = [0.05]
"#;

fn blobs_config(samples: usize, sigmas: &str, out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
name = "blobs-acceptance"
seed = 11
samples = {samples}

[dataset]
kind = "synthetic"
shape = "blobs"
train = 400
test = 600

[model]
arch = "mlp"
hidden = [32]
epochs = 20

[certifier]
kind = "smoothing"
sigmas = {sigmas}
attack_samples = 100
judge_samples = 1000
alpha = 0.005

[[methods]]
method = "caa"
eps_min = [0.02]
eps_max = [0.2]
delta = [0.05]

[[methods]]
method = "pgd"
eps = [0.05]

[[methods]]
method = "cw"
c = [10.0]

[[methods]]
method = "deepfool"
"#
    );
    config(&text, out)
}

/// Confident attacks never land inside the clean certificate.
fn soundness(tmp: &Path) -> Outcome {
    let cfg = blobs_config(200, "[0.5, 1.0]", &tmp.join("c1"));
    let rec = run_sweep(&cfg)?;
    let confident: Vec<_> = rec.rows.iter().filter(|r| r.confident).collect();
    let violations = confident.iter().filter(|r| r.norm.partial_cmp(&r.clean_radius) != Some(std::cmp::Ordering::Greater)).count();
    let errors = rec.rows.iter().filter(|r| r.error.is_some()).count();
    let per_setting: Vec<usize> = rec.settings.iter().map(|s| s.samples.len()).collect();
    let mut by_method = String::new();
    for m in [Method::Caa, Method::Pgd, Method::Cw, Method::DeepFool] {
        let n = confident.iter().filter(|r| r.method == m).count();
        by_method += &format!(" {m}={n}");
    }
    Ok((
        violations == 0 && errors == 0 && per_setting.iter().all(|&n| n == 200),
        format!(
            "{} attacks on {per_setting:?} samples per sigma, confident:{by_method}, violations {violations}, errors {errors}",
            rec.rows.len()
        ),
    ))
}

/// Every CAA success carries a nonzero judge certificate at x'.
fn confident_contract(tmp: &Path) -> Outcome {
    let cfg = mnist_config("mnist-contract", 20, SINGLE_CAA, &tmp.join("c2"));
    let (train_set, test_set) = load_datasets(&cfg)?;
    let sigma = Some(0.5);
    let (model, _) = trained_model(&cfg, &train_set, sigma, Some(&cfg.resolved_output_dir()))?;
    let (att, judge) = certifiers(&cfg.certifier, &model, sigma, cfg.seed)?;
    let spec = cfg.methods[0].points(cfg.grid_units)?.remove(0);
    let (mut successes, mut certified, mut fresh_certified) = (0usize, 0usize, 0usize);
    let mut attacked = 0usize;
    for i in 0..test_set.len() {
        if attacked == cfg.samples {
            break;
        }
        let x0 = test_set.input(i);
        let seed = sample_seed(cfg.seed, i);
        let r = spec.with_seed(seed).run(att.as_ref(), judge.as_ref(), x0)?;
        if r.original_class != test_set.label(i) {
            continue;
        }
        attacked += 1;
        if !r.success {
            continue;
        }
        successes += 1;
        if r.adv_radius > 0.0 && r.adv_class != Some(r.original_class) {
            certified += 1;
        }
        let x_adv = r.x_adv.as_deref().expect("a success has a point");
        let v = judge.certify(x_adv, &[seed, 0x7265636865636b])?;
        if v.class != r.original_class && v.radius > 0.0 {
            fresh_certified += 1;
        }
    }
    Ok((
        successes > 0 && certified == successes && fresh_certified == successes,
        format!(
            "{certified}/{successes} CAA successes certified by the N=1000 judge on {attacked} points; \
             independent fresh-noise recheck {fresh_certified}/{successes}"
        ),
    ))
}

/// At σ = 0.5 the selected CAA point perturbs less, relative to the clean
/// certificate, than the selected PGD point.
fn mnist_ordering(tmp: &Path) -> Outcome {
    let cfg = mnist_config("mnist-ordering", 40, C3_METHODS, &tmp.join("c3"));
    let rec = run_sweep(&cfg)?;
    let sel = select_operating_point(&rec, 0.9)?;
    let cmp = compare_selected(&rec, &sel)?;
    let metrics = &cmp.first().ok_or("no comparison")?.metrics;
    let get = |name: &str| metrics.iter().find(|m| m.method == name).ok_or(format!("no {name} column"));
    let (caa, pgd) = (get("caa")?, get("pgd")?);
    let sel_of = |m: Method| sel.iter().find(|s| s.method == m).ok_or("no selection");
    let (sc, sp) = (sel_of(Method::Caa)?, sel_of(Method::Pgd)?);
    let both_meet = sc.meets_target && sp.meets_target;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |p| format!("{p:.1}"));
    let ordered = matches!((caa.pct_to_cohen, pgd.pct_to_cohen), (Some(a), Some(b)) if a < b);
    let best = caa.best_proportion.unwrap_or(0.0);
    Ok((
        both_meet && ordered && best > 0.5,
        format!(
            "{} samples; CAA point {} success {:.2} %-C {} | PGD point {} success {:.2} %-C {} | CAA best {:.2}",
            caa.samples,
            sc.point,
            caa.success_rate,
            pct(caa.pct_to_cohen),
            sp.point,
            pgd.success_rate,
            pct(pgd.pct_to_cohen),
            best
        ),
    ))
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// Random balls, some strung along the projected ray so that the walk has
/// to cross several of them.
fn random_ledger(rng: &mut ChaCha8Rng, x: &[f64], dir: &[f64]) -> BallLedger {
    let d = x.len();
    let scale = (d as f64).sqrt();
    let mut ledger = BallLedger::new(0);
    let count = rng.random_range(1..=8);
    for step in 0..count {
        let t = if step == 0 { 0.0 } else { rng.random_range(0.0..0.6) * scale };
        let jitter = rng.random_range(0.0..0.1);
        let center: Vec<f64> = x
            .iter()
            .zip(dir)
            .map(|(a, b)| (a - t * b + jitter * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0))
            .collect();
        let radius = rng.random_range(0.05..0.5) * scale;
        let class_label = usize::from(rng.random_bool(0.5));
        ledger
            .push(CertifiedBall {
                center,
                radius,
                class_label,
                step_index: step,
            })
            .expect("valid ball");
    }
    ledger
}

/// Ray queries against a dense march.
fn geometry_oracle(_: &Path) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut configs, mut bad) = (0.0f64, 0usize, 0usize);
    for (d, n) in [(2usize, 400usize), (10, 400), (784, 200)] {
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let dir = unit_vector(&mut rng, d);
            let ledger = random_ledger(&mut rng, &x, &dir);
            let same: Vec<CertifiedBall> = ledger.same_class().cloned().collect();
            let adv: Vec<CertifiedBall> = ledger.adversarial().cloned().collect();
            let pairs = [
                (exit_radius(&ledger, &x, &dir)?.rho, sampled_first_exit(&same, &x, &dir, 100_000)),
                (stay_radius(&ledger, &x, &dir)?.rho, sampled_first_exit(&adv, &x, &dir, 100_000)),
            ];
            for (got, oracle) in pairs {
                let err = (got - oracle).abs();
                worst = worst.max(err);
                if err > 1e-3 {
                    bad += 1;
                }
            }
            configs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        bad == 0 && secs < 120.0,
        format!("{configs} configurations, max |error| {worst:.2e}, {bad} over 1e-3, {secs:.1} s"),
    ))
}

/// One random differentiable program over a `[rows, cols]` input.
struct Program {
    rows: usize,
    cols: usize,
    conv: Option<(ConvGeometry, Tensor, Tensor)>,
    ops: Vec<Op>,
    reduce: usize,
}

enum Op {
    Linear(Tensor, Tensor),
    Relu,
    Exp,
    Abs,
    Clip(f64, f64),
    Square,
    MulConst(Tensor),
    SubConst(Tensor),
    Affine(f64, f64),
    LogSoftmax,
    LogOfSoftmax,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

impl Program {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let rows = rng.random_range(1..=3);
        let (mut cols, conv) = if rng.random_bool(0.25) {
            let g = ConvGeometry {
                in_channels: rng.random_range(1..=2),
                in_h: rng.random_range(4..=6),
                in_w: rng.random_range(4..=6),
                out_channels: rng.random_range(1..=3),
                kernel: rng.random_range(2..=3),
                stride: rng.random_range(1..=2),
            };
            let w = random_tensor(rng, vec![g.out_channels, g.patch_len()], 0.6);
            let b = random_tensor(rng, vec![g.out_channels], 0.3);
            (g.in_len(), Some((g, w, b)))
        } else {
            (rng.random_range(2..=6), None)
        };
        let input_cols = cols;
        if let Some((g, _, _)) = &conv {
            cols = g.out_len();
        }
        let mut ops = Vec::new();
        for _ in 0..rng.random_range(2..=6) {
            let op = match rng.random_range(0..11) {
                0 => {
                    let out = rng.random_range(2..=6);
                    let w = random_tensor(rng, vec![cols, out], 1.0 / (cols as f64).sqrt());
                    let b = random_tensor(rng, vec![out], 0.5);
                    cols = out;
                    Op::Linear(w, b)
                }
                1 => Op::Relu,
                2 => Op::Exp,
                3 => Op::Abs,
                4 => Op::Clip(-0.5, 0.7),
                5 => Op::Square,
                6 => Op::MulConst(random_tensor(rng, vec![rows, cols], 1.5)),
                7 => Op::SubConst(random_tensor(rng, vec![rows, cols], 1.0)),
                8 => Op::Affine(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)),
                9 => Op::LogSoftmax,
                _ => Op::LogOfSoftmax,
            };
            ops.push(op);
        }
        Self {
            rows,
            cols: input_cols,
            conv,
            ops,
            reduce: rng.random_range(0..4),
        }
    }

    fn build(&self, t: &mut Tape, x: Var) -> certattack::Result<Var> {
        let mut h = x;
        if let Some((g, w, b)) = &self.conv {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            h = t.conv2d(h, w, Some(b), *g)?;
        }
        for op in &self.ops {
            h = match op {
                Op::Linear(w, b) => {
                    let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                    let z = t.matmul(h, w)?;
                    t.add_row(z, b)?
                }
                Op::Relu => t.relu(h)?,
                Op::Exp => {
                    let c = t.clip(h, -3.0, 3.0)?;
                    t.exp(c)?
                }
                Op::Abs => t.abs(h)?,
                Op::Clip(lo, hi) => t.clip(h, *lo, *hi)?,
                Op::Square => t.mul(h, h)?,
                Op::MulConst(c) | Op::SubConst(c) => {
                    let shape = t.value(h).shape().to_vec();
                    let c = t.constant(c.reshape(shape).expect("same length"));
                    if matches!(op, Op::MulConst(_)) {
                        t.mul(h, c)?
                    } else {
                        t.sub(h, c)?
                    }
                }
                Op::Affine(a, b) => {
                    let s = t.scale(h, *a)?;
                    t.add_scalar(s, *b)?
                }
                Op::LogSoftmax => t.log_softmax_rows(h)?,
                Op::LogOfSoftmax => {
                    let s = t.softmax_rows(h)?;
                    let s = t.add_scalar(s, 0.1)?;
                    t.log(s)?
                }
            };
        }
        match self.reduce {
            0 => t.sum(h),
            1 => t.mean(h),
            2 => {
                let m = t.mean_rows(h)?;
                t.index(m, 0)
            }
            _ => {
                let n = t.value(h).len();
                t.index(h, n - 1)
            }
        }
    }

    /// A column count that is consistent with the ops that follow; `MulConst`
    /// and `SubConst` constants are drawn for the shape at their position.
    fn fits(&self) -> bool {
        let mut cols = match &self.conv {
            Some((g, _, _)) => g.out_len(),
            None => self.cols,
        };
        for op in &self.ops {
            match op {
                Op::Linear(w, _) => {
                    if w.shape()[0] != cols {
                        return false;
                    }
                    cols = w.shape()[1];
                }
                Op::MulConst(c) | Op::SubConst(c)
                    if c.len() != self.rows * cols => {
                        return false;
                    }
                _ => {}
            }
        }
        true
    }
}

/// Tape gradients against central differences away from kinks.
fn gradients(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut graphs, mut nodes) = (0.0f64, 0usize, 0usize);
    while graphs < 100 {
        let p = Program::random(&mut rng);
        assert!(p.fits(), "program shapes are consistent");
        let mut found = None;
        for _ in 0..200 {
            let x = random_tensor(&mut rng, vec![p.rows, p.cols], 1.0);
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            p.build(&mut tape, v)?;
            if tape.kink_margin() > 1e-3 {
                nodes += tape.len();
                found = Some(x);
                break;
            }
        }
        let Some(x) = found else { continue };
        let err = finite_diff_check(|t, v| p.build(t, v), &x, 1e-6)?;
        worst = worst.max(err);
        graphs += 1;
    }
    Ok((
        worst < 1e-4,
        format!("{graphs} graphs ({nodes} tape nodes), max relative error {worst:.2e}"),
    ))
}

/// Simultaneous interval coverage and monotonicity of the radius.
fn goodman(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (trials, n, alpha) = (10_000usize, 1000usize, 0.05);
    let mut covered = 0usize;
    for _ in 0..trials {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut counts = [0u64; 4];
        let mut left = n as u64;
        let mut mass = 1.0;
        for k in 0..3 {
            let q = (p[k] / mass).clamp(0.0, 1.0);
            counts[k] = Binomial::new(left, q)?.sample(&mut rng);
            left -= counts[k];
            mass -= p[k];
        }
        counts[3] = left;
        let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let iv = goodman_intervals(&freqs, n, alpha)?;
        if iv.iter().zip(&p).all(|(&(lo, hi), &pk)| lo <= pk && pk <= hi) {
            covered += 1;
        }
    }
    let coverage = covered as f64 / trials as f64;

    let mut violations = 0usize;
    for _ in 0..10_000 {
        let sigma = rng.random_range(0.05..2.0);
        let e1 = rng.random_range(0.0..0.5);
        let e0 = rng.random_range(e1..1.0);
        let r = cohen_radius(e0, e1, sigma)?;
        let up0 = rng.random_range(e0..=1.0);
        let down1 = rng.random_range(0.0..=e1);
        let r0 = cohen_radius(up0, e1, sigma)?;
        let r1 = cohen_radius(e0, down1, sigma)?;
        if r < 0.0 || r0 < r || r1 < r {
            violations += 1;
        }
    }
    Ok((
        coverage >= 1.0 - alpha && violations == 0,
        format!("coverage {coverage:.4} over {trials} multinomials, monotonicity violations {violations}/10000"),
    ))
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

/// Random points of each verified box stay inside the output bounds.
fn ibp_box_soundness(model: &Classifier, test: &certattack::data::Dataset, rng: &mut ChaCha8Rng) -> Outcome {
    let (mut points, mut draws, mut escapes, mut flips) = (0usize, 0usize, 0usize, 0usize);
    let d = test.dim();
    let k = model.num_classes();
    for i in 0..test.len() {
        if points == 20 {
            break;
        }
        let x = test.input(i);
        let label = argmax(&model.forward_batch(x, 1)?);
        if label != test.label(i) {
            continue;
        }
        let eps = ibp_radius_label(model, x, label, 1e-4)?;
        if eps <= 0.0 || !ibp_verify_label(model, x, eps, label)? {
            continue;
        }
        points += 1;
        let bx = IntervalBox::linf_ball(x, eps)?;
        let out = propagate(model, &bx)?;
        for _ in 0..10 {
            let batch = 1000;
            let mut xs = Vec::with_capacity(batch * d);
            for b in 0..batch {
                for j in 0..d {
                    let (lo, hi) = (bx.lower()[j], bx.upper()[j]);
                    // a quarter of the draws sit on box corners
                    let v = if b % 4 == 0 {
                        if rng.random_bool(0.5) {
                            lo
                        } else {
                            hi
                        }
                    } else {
                        lo + (hi - lo) * rng.random_range(0.0..=1.0)
                    };
                    xs.push(v);
                }
            }
            let logits = model.forward_batch(&xs, batch)?;
            for row in logits.chunks(k) {
                draws += 1;
                if row.iter().enumerate().any(|(j, &v)| v < out.lower()[j] || v > out.upper()[j]) {
                    escapes += 1;
                }
                if argmax(row) != label {
                    flips += 1;
                }
            }
        }
    }
    Ok((
        points == 20 && escapes == 0 && flips == 0,
        format!("{points} points, {draws} draws, {escapes} outside bounds, {flips} argmax flips"),
    ))
}

/// Bisection against a linear scan on tiny random networks.
fn ibp_bisection(rng: &mut ChaCha8Rng) -> Outcome {
    let (mut worst, nets) = (0.0f64, 50);
    for s in 0..nets {
        let model = Classifier::mlp(4, &[8], 3, 1000 + s)?;
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let label = argmax(&model.forward_batch(&x, 1)?);
        let bisect = ibp_radius_label(&model, &x, label, 1e-4)?;
        let mut scan = 0.0;
        for k in 0..=10_000 {
            let eps = k as f64 * 1e-4;
            if ibp_verify_label(&model, &x, eps, label)? {
                scan = eps;
            } else {
                break;
            }
        }
        worst = worst.max((bisect - scan).abs());
    }
    Ok((worst <= 2e-4, format!("{nets} d=4 nets, max |bisection - scan| {worst:.2e}")))
}

fn ibp(tmp: &Path) -> Outcome {
    let text = format!(
        r#"
name = "mnist-ibp"
seed = 0
samples = 20
grid_units = "pixel"

[dataset]
kind = "mnist"
dir = {dir:?}

[model]
arch = "cnn"
epochs = 10
lr = 0.02

[certifier]
kind = "ibp"
tol = 1e-4

[[methods]]
method = "caa"
eps_min = [1, 5]
eps_max = [40]
delta = [0.05]

[[methods]]
method = "pgd"
eps = [4, 20]
"#,
        dir = mnist_dir().to_string_lossy()
    );
    let cfg = config(&text, &tmp.join("c7"));
    let (train_set, test_set) = load_datasets(&cfg)?;
    let (model, _) = trained_model(&cfg, &train_set, None, Some(&cfg.resolved_output_dir()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (box_ok, box_msg) = ibp_box_soundness(&model, &test_set, &mut rng)?;
    let (bis_ok, bis_msg) = ibp_bisection(&mut rng)?;

    let study = ibp_study(&cfg, 0.9)?;
    let caa: Vec<_> = study.points.iter().filter(|p| p.method == Method::Caa).collect();
    let pgd: Vec<_> = study.points.iter().filter(|p| p.method == Method::Pgd).collect();
    let budget = |s: &AttackSpec| match s {
        AttackSpec::Caa(c) => c.max_iters,
        AttackSpec::Pgd(c) => c.iters,
        _ => 0,
    };
    let pointwise = caa.iter().any(|a| {
        pgd.iter()
            .any(|b| budget(&a.params) == budget(&b.params) && a.metrics.success_rate >= b.metrics.success_rate)
    });
    let dir_ok = study.caa_at_least_pgd || pointwise;
    let rates: Vec<String> = study
        .points
        .iter()
        .map(|p| format!("{}#{} {:.2}", p.method, p.point, p.metrics.success_rate))
        .collect();
    Ok((
        box_ok && bis_ok && dir_ok,
        format!(
            "{box_msg}; {bis_msg}; point success [{}]; selected CAA {:?} vs PGD {:?}, matched budget {}",
            rates.join(", "),
            study.caa_success,
            study.pgd_success,
            study.matched_budget
        ),
    ))
}

/// Over-estimating σ by half keeps at least half of the success rate.
fn sigma_estimation(tmp: &Path) -> Outcome {
    let cfg = mnist_config("mnist-sigma", 30, SINGLE_CAA, &tmp.join("c8"));
    let rows = sigma_estimation_run(&cfg, 0.5, &[1.0, 1.5])?;
    let rate = |f: f64| rows.iter().find(|r| r.factor == f).map(|r| r.success_rate).ok_or("missing factor");
    let (base, over) = (rate(1.0)?, rate(1.5)?);
    Ok((
        base > 0.0 && over >= 0.5 * base,
        format!("success {base:.2} at 1.0 sigma, {over:.2} at 1.5 sigma on {} samples", rows[0].samples),
    ))
}

/// Two fresh end-to-end runs write identical rows.
fn determinism(tmp: &Path) -> Outcome {
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let cfg = blobs_config(30, "[0.5]", &tmp.join("c9").join(run));
        run_sweep(&cfg)?;
        bytes.push(std::fs::read(cfg.resolved_output_dir().join("rows.jsonl"))?);
        RunRecord::load(cfg.resolved_output_dir())?;
    }
    let same = bytes[0] == bytes[1];
    Ok((
        same && !bytes[0].is_empty(),
        format!("rows.jsonl {} and {} bytes, identical {same}", bytes[0].len(), bytes[1].len()),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "soundness of confident attacks", soundness),
        (2, "confident-attack contract", confident_contract),
        (3, "MNIST ordering against PGD", mnist_ordering),
        (4, "geometry oracle", geometry_oracle),
        (5, "gradient correctness", gradients),
        (6, "Goodman coverage and radius monotonicity", goodman),
        (7, "IBP soundness and study", ibp),
        (8, "sigma over-estimation", sigma_estimation),
        (9, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match run(tmp.path()) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id} [{}] {name} ({:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
