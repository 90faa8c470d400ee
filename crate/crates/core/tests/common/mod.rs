//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! the code it checks: metrics are recomputed by brute force and gradients
//! by central differences.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tscan::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use tscan::layers::{self, Ctx, LayerConfig};
use tscan::model::{Fusion, ModelConfig, Task, Tscan};
use tscan::pipeline::{
    prepare, synth_cohort, Episode, EpisodeLabels, EventRecord, PrepareConfig, PreparedDataset,
    Sample, Split, StayRecord, VariableDictionary,
};
use tscan::train::task_loss;
use tscan::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: String,
    /// Largest norm-wise relative error over the checked tensors.
    pub max_rel_err: f64,
    /// Tensor with the largest error.
    pub worst: String,
    pub scalars: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// Norm floor for the relative error. Some gradients are identically zero
/// (attention key biases shift every score of a query equally), and there
/// the central-difference noise of about 1e-10 is all that remains.
pub const FD_NORM_FLOOR: f64 = 1e-5;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(FD_NORM_FLOOR)
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &p, &vars).expect("forward pass");
    g.value(loss).item().expect("scalar loss")
}

/// Compares reverse-mode gradients of a scalar `f` with central
/// differences, for every parameter in `store` and every input tensor.
pub fn fd_check<F>(name: &str, store: &ParamStore, inputs: &[Tensor], f: F) -> FdReport
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &p, &vars).expect("forward pass");
    g.backward(loss).expect("backward pass");
    let param_grads = p.gradients(&g);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
        })
        .collect();

    let mut report = FdReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        scalars: 0,
    };
    let mut record = |what: String, analytic: &Tensor, numeric: Vec<f64>| {
        let e = rel_err(analytic.data(), &numeric);
        report.scalars += numeric.len();
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = what;
        }
    };

    let mut s = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for pname in names {
        let base = store.get(&pname).unwrap().clone();
        let mut numeric = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let mut probe = |delta: f64| {
                let mut d = base.data().to_vec();
                d[i] += delta;
                s.set(&pname, Tensor::new(base.shape().to_vec(), d).unwrap())
                    .unwrap();
                evaluate(&s, inputs, &f)
            };
            let (up, down) = (probe(FD_STEP), probe(-FD_STEP));
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        s.set(&pname, base).unwrap();
        record(pname.clone(), &param_grads[&pname], numeric);
    }
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let probe = |delta: f64| {
                let mut moved = inputs.to_vec();
                let mut d = x.data().to_vec();
                d[i] += delta;
                moved[k] = Tensor::new(x.shape().to_vec(), d).unwrap();
                evaluate(store, &moved, &f)
            };
            numeric.push((probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP));
        }
        record(format!("input{k}"), &input_grads[k], numeric);
    }
    report
}

/// `sum(v * R)` for a fixed random `R`, so every output element matters.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(v), seed));
    let m = g.mul(v, r)?;
    Ok(g.sum_all(m))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|v| 0.5 + v.abs())
}

/// Every differentiable graph operation on its own.
pub fn primitive_checks() -> Vec<FdReport> {
    let empty = ParamStore::new();
    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2);
    let c = random(&[4, 5], 3);
    let pos = positive(&[3, 4], 4);
    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unary: Vec<(&str, Tensor, Unary)> = vec![
        ("scale", a.clone(), |g, x| Ok(g.scale(x, -1.7))),
        ("offset", a.clone(), |g, x| Ok(g.offset(x, 0.3))),
        ("relu", a.clone(), |g, x| Ok(g.relu(x))),
        ("sigmoid", a.clone(), |g, x| Ok(g.sigmoid(x))),
        ("exp", a.clone(), |g, x| Ok(g.exp(x))),
        ("ln", pos.clone(), |g, x| Ok(g.ln(x))),
        ("clamp", a.clone(), |g, x| Ok(g.clamp(x, -0.5, 0.5))),
        ("transpose", a.clone(), |g, x| g.transpose(x)),
        ("reshape", a.clone(), |g, x| g.reshape(x, vec![2, 6])),
        ("narrow", a.clone(), |g, x| g.narrow(x, 1, 1, 2)),
        ("broadcast_rows", random(&[4], 5), |g, x| {
            g.broadcast_rows(x, 3)
        }),
        ("sum_axis0", a.clone(), |g, x| g.sum(x, 0)),
        ("sum_axis1", a.clone(), |g, x| g.sum(x, 1)),
        ("mean_axis0", a.clone(), |g, x| g.mean(x, 0)),
        ("mean_axis1", a.clone(), |g, x| g.mean(x, 1)),
        ("softmax_axis0", a.clone(), |g, x| g.softmax(x, 0)),
        ("softmax_axis1", a.clone(), |g, x| g.softmax(x, 1)),
        ("layer_norm", a.clone(), |g, x| g.layer_norm(x)),
    ];
    let mut out = Vec::new();
    for (k, (name, x, op)) in unary.into_iter().enumerate() {
        out.push(fd_check(name, &empty, &[x], move |g, _, v| {
            let y = op(g, v[0])?;
            project(g, y, 100 + k as u64)
        }));
    }
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var>;
    let binary: Vec<(&str, Tensor, Tensor, Binary)> = vec![
        ("add", a.clone(), b.clone(), |g, x, y| g.add(x, y)),
        ("sub", a.clone(), b.clone(), |g, x, y| g.sub(x, y)),
        ("mul", a.clone(), b.clone(), |g, x, y| g.mul(x, y)),
        ("div", a.clone(), pos.clone(), |g, x, y| g.div(x, y)),
        ("maximum", a.clone(), b.clone(), |g, x, y| g.maximum(x, y)),
        ("matmul", a.clone(), c.clone(), |g, x, y| g.matmul(x, y)),
        ("concat_axis0", a.clone(), b.clone(), |g, x, y| {
            g.concat(&[x, y], 0)
        }),
        (
            "concat_axis1",
            a.clone(),
            c.transpose().unwrap(),
            |g, x, y| {
                let yt = g.transpose(y)?;
                let yt = g.narrow(yt, 0, 0, 3)?;
                g.concat(&[x, yt], 1)
            },
        ),
    ];
    for (k, (name, x, y, op)) in binary.into_iter().enumerate() {
        out.push(fd_check(name, &empty, &[x, y], move |g, _, v| {
            let z = op(g, v[0], v[1])?;
            project(g, z, 200 + k as u64)
        }));
    }
    out.push(fd_check(
        "sum_all",
        &empty,
        std::slice::from_ref(&a),
        |g, _, v| Ok(g.sum_all(v[0])),
    ));
    out
}

pub fn small_layer() -> LayerConfig {
    LayerConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        dropout_rate: 0.0,
    }
}

/// Positional encoding, linear, attention, MSA, MCA, FFN and the value MLP,
/// each with fresh parameters (biases and norm gains perturbed off their
/// initial constants so that they are exercised).
pub fn layer_checks() -> Vec<FdReport> {
    let cfg = small_layer();
    let d = cfg.d_model;
    let mut r = rng(7);
    let mut store = ParamStore::new();
    layers::init_linear(&mut store, "lin", 6, d, &mut r).unwrap();
    layers::init_attention(&mut store, "att", &cfg, &mut r).unwrap();
    layers::init_ffn(&mut store, "ffn", &cfg, &mut r).unwrap();
    layers::init_v_mlp(&mut store, "vmlp", &cfg, &mut r).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for (k, n) in names.iter().enumerate() {
        let t = store.get(n).unwrap();
        let moved = t
            .data()
            .iter()
            .zip(random(t.shape(), 300 + k as u64).data())
            .map(|(a, b)| a + 0.1 * b)
            .collect();
        store
            .set(n, Tensor::new(t.shape().to_vec(), moved).unwrap())
            .unwrap();
    }
    let only = |prefix: &str| {
        let mut s = ParamStore::new();
        for (n, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
            s.insert(n, t.clone()).unwrap();
        }
        s
    };
    let x6 = random(&[5, 6], 11);
    let x = random(&[5, d], 12);
    let kv = random(&[7, d], 13);
    let cfg2 = cfg.clone();
    let cfg3 = cfg.clone();
    let cfg4 = cfg.clone();
    let cfg5 = cfg.clone();
    let cfg6 = cfg.clone();
    vec![
        fd_check(
            "positional_encoding_add",
            &only("lin"),
            std::slice::from_ref(&x6),
            |g, p, v| {
                let e = layers::linear(g, p, "lin", v[0])?;
                let pe = g.constant(layers::positional_encoding(5, 8)?);
                let h = g.add(e, pe)?;
                project(g, h, 20)
            },
        ),
        fd_check("linear", &only("lin"), &[x6], |g, p, v| {
            let y = layers::linear(g, p, "lin", v[0])?;
            project(g, y, 21)
        }),
        fd_check(
            "attention_core",
            &only("att"),
            &[x.clone(), kv.clone()],
            move |g, p, v| {
                let (y, _) = layers::attention_core(g, p, "att", v[0], v[1], v[1], &cfg2)?;
                project(g, y, 22)
            },
        ),
        fd_check(
            "msa",
            &only("att"),
            std::slice::from_ref(&x),
            move |g, p, v| {
                let (y, _) = layers::msa(g, p, "att", v[0], &cfg3, &mut Ctx::eval())?;
                project(g, y, 23)
            },
        ),
        fd_check(
            "mca",
            &only("att"),
            &[x.clone(), kv.clone()],
            move |g, p, v| {
                let (y, _) = layers::mca(g, p, "att", v[0], v[1], v[1], &cfg4, &mut Ctx::eval())?;
                project(g, y, 24)
            },
        ),
        fd_check(
            "ffn",
            &only("ffn"),
            std::slice::from_ref(&x),
            move |g, p, v| {
                let y = layers::ffn(g, p, "ffn", v[0], &cfg5, &mut Ctx::eval())?;
                project(g, y, 25)
            },
        ),
        fd_check(
            "v_mlp",
            &only("vmlp"),
            &[x.clone(), random(&[5, d], 14)],
            move |g, p, v| {
                let y = layers::v_mlp(g, p, "vmlp", v[0], v[1], &cfg6)?;
                project(g, y, 26)
            },
        ),
    ]
}

/// The toy network: t = 8, d = 6, n = 2, d_model = 8, 2 heads.
pub fn toy_config(fusion: Fusion) -> ModelConfig {
    let mut c = ModelConfig::new(Task::Ihm, 8, 6, 2);
    c.layer = small_layer();
    c.fusion = fusion;
    c
}

/// Moves every parameter by a small random amount so that zero-initialised
/// biases and unit norm gains take generic values.
pub fn jitter(model: &mut Tscan, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in model.params_mut().iter_mut() {
        let moved: Vec<f64> = t
            .data()
            .iter()
            .map(|v| v + scale * r.random_range(-1.0..1.0))
            .collect();
        *t = Tensor::new(t.shape().to_vec(), moved).unwrap();
    }
}

fn model_check(name: &str, cfg: ModelConfig, label: tscan::pipeline::Label, seed: u64) -> FdReport {
    let mut model = Tscan::new(cfg.clone(), seed).unwrap();
    jitter(&mut model, seed + 1, 0.05);
    let x = random(&[cfg.t, cfg.d], seed + 2);
    let m = model.clone();
    fd_check(name, model.params(), &[], move |g, p, _| {
        let out = m.forward(g, p, &x, &mut Ctx::eval())?;
        task_loss(g, out.probs, &label, m.config().task, 1.7)
    })
}

/// The toy network under every fusion (mortality loss), plus the
/// length-of-stay and phenotype heads.
pub fn model_checks() -> Vec<FdReport> {
    use tscan::pipeline::Label;
    let mut out: Vec<FdReport> = Fusion::ALL
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            model_check(
                &format!("tscan_{f}"),
                toy_config(f),
                Label::Binary {
                    positive: k % 2 == 0,
                },
                40 + 10 * k as u64,
            )
        })
        .collect();
    let mut los = toy_config(Fusion::Concatenate);
    los.task = Task::Los;
    los.n_classes = Task::Los.default_classes();
    out.push(model_check(
        "tscan_los_head",
        los,
        Label::Bucket {
            bucket: 3,
            remaining_hours: 80.0,
        },
        120,
    ));
    let mut ph = toy_config(Fusion::MaxPool);
    ph.task = Task::Phenotype;
    ph.n_classes = Task::Phenotype.default_classes();
    let labels = (0..ph.n_classes).map(|i| i % 3 == 0).collect();
    out.push(model_check(
        "tscan_phenotype_head",
        ph,
        Label::MultiLabel { labels },
        130,
    ));
    out
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Mann-Whitney statistic over all positive/negative pairs, ties 1/2.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        for j in (0..scores.len()).filter(|&j| !labels[j]) {
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision: precision and recall recounted from scratch at every
/// distinct threshold, highest first.
pub fn ap_thresholds(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for th in thresholds {
        let tp = (0..scores.len())
            .filter(|&i| scores[i] >= th && labels[i])
            .count() as f64;
        let flagged = scores.iter().filter(|&&s| s >= th).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / flagged);
        prev_recall = recall;
    }
    ap
}

/// Linear weighted kappa as `(p_o - p_e) / (1 - p_e)` with agreement
/// weights, the chance term averaged over all prediction/label pairs.
pub fn kappa_pairs(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let agree = |a: usize, b: usize| 1.0 - (a as f64 - b as f64).abs() / (k - 1) as f64;
    let n = pred.len() as f64;
    let po = pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| agree(a, b))
        .sum::<f64>()
        / n;
    let mut pe = 0.0;
    for &a in pred {
        for &b in truth {
            pe += agree(a, b);
        }
    }
    pe /= n * n;
    (po - pe) / (1.0 - pe)
}

pub fn macro_micro_pairs(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> (f64, f64) {
    let cols = scores[0].len();
    let mut per = Vec::new();
    for c in 0..cols {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            per.push(auc_pairs(&s, &l));
        }
    }
    let flat_s: Vec<f64> = scores.concat();
    let flat_l: Vec<bool> = labels.concat();
    (
        per.iter().sum::<f64>() / per.len() as f64,
        auc_pairs(&flat_s, &flat_l),
    )
}

/// Scores on a coarse grid (so ties occur) with both classes present.
pub fn binary_fixture(r: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..=max_n);
    let levels = r.random_range(2..=20) as f64;
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| ((r.random::<f64>() + if l { 0.3 } else { 0.0 }) * levels).floor() / levels)
        .collect();
    (scores, labels)
}

/// Predicted and true buckets with more than one distinct value overall.
pub fn bucket_fixture(r: &mut ChaCha8Rng, max_n: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let n = r.random_range(2..=max_n);
    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let mut pred: Vec<usize> = truth
        .iter()
        .map(|&t| {
            if r.random_bool(0.5) {
                t
            } else {
                r.random_range(0..k)
            }
        })
        .collect();
    if pred.iter().chain(&truth).all(|&b| b == truth[0]) {
        pred[0] = (truth[0] + 1) % k;
    }
    (pred, truth)
}

// ---------------------------------------------------------------------------
// Selection oracles

/// First failing rule of each stay, recomputed independently of the
/// filter: age, then repeated subject, then transfers.
pub fn stay_reasons(stays: &[StayRecord]) -> HashMap<&'static str, usize> {
    let mut per_subject: HashMap<&str, usize> = HashMap::new();
    for s in stays {
        *per_subject.entry(s.subject_id.as_str()).or_insert(0) += 1;
    }
    let mut out = HashMap::new();
    for s in stays {
        let reason = if s.age_years <= 18.0 {
            "minor"
        } else if per_subject[s.subject_id.as_str()] > 1 {
            "multiple_stays"
        } else if s.transfers > 0 {
            "transfers"
        } else {
            "kept"
        };
        *out.entry(reason).or_insert(0) += 1;
    }
    out
}

/// Reason each event is kept or dropped, given the retained stays.
pub fn event_reasons(events: &[EventRecord], kept: &[StayRecord]) -> HashMap<&'static str, usize> {
    let mut out = HashMap::new();
    for e in events {
        let reason = match &e.hadm_id {
            None => "no_hadm",
            Some(h) => {
                let in_hadm: Vec<&StayRecord> = kept.iter().filter(|s| &s.hadm_id == h).collect();
                if in_hadm.is_empty() {
                    "unknown_hadm"
                } else {
                    match &e.icustay_id {
                        Some(id) if in_hadm.iter().any(|s| &s.icustay_id == id) => "kept",
                        None if in_hadm.len() == 1 => "kept",
                        _ => "unknown_stay",
                    }
                }
            }
        };
        *out.entry(reason).or_insert(0) += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Fixtures

/// An episode whose cell `(h, c)` holds `h + c / 100`, so windows can be
/// checked by value.
pub fn episode(
    hours: usize,
    los_hours: f64,
    death_hours: Option<f64>,
    phenotypes: Option<Vec<bool>>,
) -> Episode {
    let d = 3;
    let matrix = Tensor::from_fn(vec![hours, d], |i| (i / d) as f64 + (i % d) as f64 / 100.0);
    Episode {
        icustay_id: "900".into(),
        subject_id: "90".into(),
        mask: Tensor::ones(vec![hours, d]),
        matrix,
        los_hours,
        labels: EpisodeLabels {
            mortality: death_hours.is_some(),
            death_hours,
            phenotypes,
        },
    }
}

/// Synthetic 200-patient mortality dataset with split seed 0, built once
/// per test binary.
pub fn ihm_cohort() -> &'static PreparedDataset {
    static DATA: OnceLock<PreparedDataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dict = VariableDictionary::builtin_24();
        let cohort = synth_cohort(0, 200, &dict).expect("synthetic cohort");
        prepare(
            &cohort.stays,
            &cohort.events,
            Some(&cohort.phenotypes),
            &dict,
            &PrepareConfig::new(Task::Ihm),
        )
        .expect("prepared dataset")
    })
}

pub fn split(data: &PreparedDataset, s: Split) -> Vec<Sample> {
    data.samples(Some(s)).expect("samples")
}
