//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use peaklab::dataset::load_instances;
use peaklab::editors::{rank_one_update_with, APPConfig};
use peaklab::metrics::{
    aggregate_additivity, probability_changes, ranking_forgetting, ranking_noise, AnswerProbe, ReportRow,
};
use peaklab::microlm::{
    answer_logprob, init_model, load_delta, load_model, objective_value, objective_value_and_grad, KlReference,
    KlScope, Matrix, ModelConfig, ModelParams, ObjectiveTerm, Patch, PatchSite, Target, Token, WeightId,
};
use peaklab::pipeline::{self, EditRecord, EditorKind, Layout, RunConfig, RunSpec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- metrics

struct ProbeConfig {
    pre_correct: Vec<f64>,
    post_correct: Vec<f64>,
    pre_false: Vec<f64>,
    post_false: Vec<f64>,
}

fn probability(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(f64::EPSILON..1.0)
}

fn probe_configs() -> Vec<ProbeConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1000)
        .map(|_| {
            let nc = rng.random_range(5..=20);
            let nf = rng.random_range(5..=30);
            let mut draw = |n: usize| (0..n).map(|_| probability(&mut rng)).collect::<Vec<_>>();
            ProbeConfig {
                pre_correct: draw(nc),
                post_correct: draw(nc),
                pre_false: draw(nf),
                post_false: draw(nf),
            }
        })
        .collect()
}

struct Additivity {
    rff: f64,
    rnf: f64,
    cpc: f64,
    fpc: f64,
    aff: f64,
    anf: f64,
}

/// Direct evaluation of the formulas on raw probabilities.
fn oracle(c: &ProbeConfig) -> Additivity {
    let sig = |p: f64| 1.0 / (1.0 + (-p).exp());
    let fmax = c.post_false.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cmin = c.post_correct.iter().cloned().fold(f64::INFINITY, f64::min);
    let rff = c.post_correct.iter().filter(|&&p| p < fmax).map(|&p| sig(p)).sum::<f64>()
        / c.post_correct.iter().map(|&p| sig(p)).sum::<f64>();
    let rnf = c.post_false.iter().filter(|&&p| p > cmin).map(|&p| sig(p)).sum::<f64>()
        / c.post_false.iter().map(|&p| sig(p)).sum::<f64>();
    let cpc = c.post_correct.iter().sum::<f64>() / c.pre_correct.iter().sum::<f64>();
    let fpc = c.post_false.iter().sum::<f64>() / c.pre_false.iter().sum::<f64>();
    Additivity {
        rff,
        rnf,
        cpc,
        fpc,
        aff: 1.0 - (1.0 - rff) * cpc.min(1.0),
        anf: 1.0 - (1.0 - rnf) * (1.0 / fpc).min(1.0),
    }
}

fn library(c: &ProbeConfig) -> Additivity {
    let probes = |ps: &[f64]| ps.iter().map(|&p| AnswerProbe::with_probability(p)).collect::<Vec<_>>();
    let (prc, poc, prf, pof) = (
        probes(&c.pre_correct),
        probes(&c.post_correct),
        probes(&c.pre_false),
        probes(&c.post_false),
    );
    let fmax = pof.iter().map(|p| p.probability).fold(f64::NEG_INFINITY, f64::max);
    let cmin = poc.iter().map(|p| p.probability).fold(f64::INFINITY, f64::min);
    let rff = ranking_forgetting(&poc, fmax).unwrap();
    let rnf = ranking_noise(&pof, cmin).unwrap();
    let (cpc, fpc) = probability_changes(&prc, &poc, &prf, &pof).unwrap();
    let (aff, anf) = aggregate_additivity(rff, rnf, cpc, fpc);
    Additivity {
        rff,
        rnf,
        cpc,
        fpc,
        aff,
        anf,
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for c in probe_configs() {
        let (a, b) = (library(&c), oracle(&c));
        for (x, y) in [
            (a.rff, b.rff),
            (a.rnf, b.rnf),
            (a.cpc, b.cpc),
            (a.fpc, b.fpc),
            (a.aff, b.aff),
            (a.anf, b.anf),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    let t = start.elapsed();
    check(
        worst <= 1e-9 && t < Duration::from_secs(5),
        format!("1000 configurations, max abs diff {worst:.2e}, {}", secs(t)),
    )
}

fn additivity_algebra() -> Outcome {
    let mut violations = Vec::new();
    let (mut cpc_ge, mut fpc_le) = (0, 0);
    for (i, c) in probe_configs().iter().enumerate() {
        let a = library(c);
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![a.rff, a.rnf, a.aff, a.anf].into_iter().all(unit) {
            violations.push(format!("#{i} out of [0,1]"));
        }
        if a.cpc >= 1.0 {
            cpc_ge += 1;
            if a.aff != a.rff {
                violations.push(format!("#{i} CPC≥1 but AFF≠RFF"));
            }
        } else if a.aff < a.rff {
            violations.push(format!("#{i} CPC<1 but AFF<RFF"));
        }
        if a.fpc <= 1.0 {
            fpc_le += 1;
            if a.anf != a.rnf {
                violations.push(format!("#{i} FPC≤1 but ANF≠RNF"));
            }
        } else if a.anf < a.rnf {
            violations.push(format!("#{i} FPC>1 but ANF<RNF"));
        }
    }
    check(
        violations.is_empty(),
        format!(
            "1000 configurations ({cpc_ge} with CPC≥1, {fpc_le} with FPC≤1), {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- gradients

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let d_model = [8, 12, 16][rng.random_range(0..3)];
    let cfg = ModelConfig {
        vocab_size: rng.random_range(20..=32),
        d_model,
        n_layers: 2,
        n_heads: 2,
        d_ff: rng.random_range(8..=24),
        max_seq_len: 10,
        seed: rng.random(),
    };
    let mut m = init_model(&cfg).unwrap();
    let mut roughen = |w: &mut Matrix| w.data.iter_mut().for_each(|x| *x += gaussian(rng, 0.3));
    roughen(&mut m.tok_emb);
    roughen(&mut m.pos_emb);
    for l in &mut m.layers {
        for w in [&mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.w_o, &mut l.w_fc, &mut l.w_proj] {
            roughen(w);
        }
    }
    m
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, lengths: std::ops::RangeInclusive<usize>) -> Vec<Token> {
    let len = rng.random_range(lengths);
    (0..len).map(|_| rng.random_range(1..vocab) as Token).collect()
}

/// Answer-likelihood, hinge, both freeze directions and a KL anchor, with the
/// piecewise terms placed on their active side.
fn random_terms(m: &ModelParams, rng: &mut ChaCha8Rng) -> (Vec<ObjectiveTerm>, usize) {
    let v = m.config.vocab_size;
    let prompt = random_seq(rng, v, 3..=5);
    let para = random_seq(rng, v, 3..=5);
    let kl_prompt = random_seq(rng, v, 3..=5);
    let answer = |rng: &mut ChaCha8Rng| random_seq(rng, v, 1..=2);
    let (target, good, bad) = (answer(rng), answer(rng), answer(rng));
    let lp = |p: &[Token], a: &[Token]| answer_logprob(m, p, a, None).unwrap();
    let gap = lp(&prompt, &good) - lp(&prompt, &bad);
    let scope = if rng.random_bool(0.5) { KlScope::FinalPosition } else { KlScope::AllPositions };
    let mut anchor = m.clone();
    anchor.layers.iter_mut().for_each(|l| l.w_proj.data.iter_mut().for_each(|x| *x += gaussian(rng, 0.2)));
    let kl = Arc::new(KlReference::capture(&anchor, &kl_prompt, scope).unwrap());
    let w = |rng: &mut ChaCha8Rng| rng.random_range(0.1..1.0);
    let terms = vec![
        ObjectiveTerm::answer_nll(prompt.clone(), target.clone(), 1.0),
        ObjectiveTerm::answer_nll(para.clone(), target, w(rng)),
        ObjectiveTerm::hinge(prompt.clone(), good.clone(), bad.clone(), gap.max(0.0) + 2.0 + w(rng), w(rng)),
        ObjectiveTerm::freeze_lower(prompt.clone(), good.clone(), lp(&prompt, &good) + 0.5 + w(rng), w(rng)),
        ObjectiveTerm::freeze_upper(para.clone(), bad.clone(), lp(&para, &bad) - 0.5 - w(rng), w(rng)),
        ObjectiveTerm::kl_anchor(kl_prompt.clone(), kl, w(rng)),
    ];
    let min_len = prompt.len().min(para.len()).min(kl_prompt.len());
    (terms, min_len)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-4;
    let (mut worst_patch, mut worst_weight, mut largest) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..5 {
        let m = random_model(&mut rng);
        for _ in 0..5 {
            let (terms, min_len) = random_terms(&m, &mut rng);
            let layer = rng.random_range(0..2);

            let site = PatchSite {
                layer,
                position: rng.random_range(0..min_len),
            };
            let z: Vec<f64> = (0..m.config.d_model).map(|_| gaussian(&mut rng, 1.0)).collect();
            let patched = |z: &[f64]| objective_value(&m, &terms, Target::Patch(Patch { site, value: z })).unwrap().0;
            let g = objective_value_and_grad(&m, &terms, Target::Patch(Patch { site, value: &z })).unwrap();
            for (i, &a) in g.gradient.as_slice().iter().enumerate() {
                let (mut p, mut q) = (z.clone(), z.clone());
                p[i] += h;
                q[i] -= h;
                let n = (patched(&p) - patched(&q)) / (2.0 * h);
                worst_patch = worst_patch.max(rel_err(a, n));
                largest = largest.max(a.abs());
            }

            let id = WeightId::MlpProj(layer);
            let g = objective_value_and_grad(&m, &terms, Target::Weight(id)).unwrap();
            let mut probe = m.clone();
            for (i, &a) in g.gradient.as_slice().iter().enumerate() {
                let w0 = m.layers[layer].w_proj.data[i];
                probe.layers[layer].w_proj.data[i] = w0 + h;
                let fp = objective_value(&probe, &terms, Target::Weight(id)).unwrap().0;
                probe.layers[layer].w_proj.data[i] = w0 - h;
                let fm = objective_value(&probe, &terms, Target::Weight(id)).unwrap().0;
                probe.layers[layer].w_proj.data[i] = w0;
                let n = (fp - fm) / (2.0 * h);
                worst_weight = worst_weight.max(rel_err(a, n));
                largest = largest.max(a.abs());
            }
        }
    }
    let t = start.elapsed();
    check(
        worst_patch < 1e-4 && worst_weight < 1e-4 && t < Duration::from_secs(60),
        format!(
            "25 model/term-set pairs, max rel err patch {worst_patch:.2e}, W_proj {worst_weight:.2e} (largest |grad| {largest:.2}), {}",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- rank-one

fn rank_one_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d_model = 16;
    let mut worst = 0.0f64;
    let mut draws = 0;
    for d_ff in [8usize, 64, 256] {
        for _ in 0..100 {
            let w = Matrix::from_vec(d_model, d_ff, (0..d_model * d_ff).map(|_| gaussian(&mut rng, 1.0)).collect())
                .unwrap();
            let k: Vec<f64> = (0..d_ff).map(|_| gaussian(&mut rng, 1.0)).collect();
            let v: Vec<f64> = (0..d_model).map(|_| gaussian(&mut rng, 1.0)).collect();
            let n = 64;
            let a: Vec<f64> = (0..n * d_ff).map(|_| gaussian(&mut rng, 1.0)).collect();
            let mut c = vec![0.0; d_ff * d_ff];
            for row in a.chunks(d_ff) {
                for i in 0..d_ff {
                    for j in 0..d_ff {
                        c[i * d_ff + j] += row[i] * row[j] / n as f64;
                    }
                }
            }
            for i in 0..d_ff {
                c[i * d_ff + i] += 0.1;
            }
            let c = Matrix::from_vec(d_ff, d_ff, c).unwrap();
            let updated = rank_one_update_with(&w, &k, &v, &c).unwrap();
            let got = updated.mul_vec(&k);
            let err = got.iter().zip(&v).map(|(g, t)| (g - t).powi(2)).sum::<f64>().sqrt()
                / v.iter().map(|t| t * t).sum::<f64>().sqrt();
            worst = worst.max(err);
            draws += 1;
        }
    }
    let hand = rank_one_update_with(&Matrix::identity(2), &[1.0, 0.0], &[3.0, 0.0], &Matrix::identity(2)).unwrap();
    let hand_ok = hand.data == vec![3.0, 0.0, 0.0, 1.0];
    let t = start.elapsed();
    check(
        worst < 1e-8 && hand_ok && t < Duration::from_secs(5),
        format!(
            "{draws} draws, max relative residual {worst:.2e}, 2×2 hand case {}, {}",
            if hand_ok { "exact" } else { "WRONG" },
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- pipeline

const SEEDS: [u64; 3] = [0, 1, 2];

fn ablations() -> [(&'static str, APPConfig); 4] {
    let base = APPConfig::ROME;
    [
        ("rome-l1", APPConfig::new(base.alpha, 0.0, 0.0)),
        ("rome-no-alpha", APPConfig::new(0.0, base.beta, base.gamma)),
        ("rome-no-beta", APPConfig::new(base.alpha, 0.0, base.gamma)),
        ("rome-no-gamma", APPConfig::new(base.alpha, base.beta, 0.0)),
    ]
}

/// Default runs, zero-weight coupled runs, and the ROME ablations, each
/// sharing the seeds of its plain counterpart.
fn acceptance_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    let coupled = |label: &str, editor: EditorKind, app: APPConfig, key: &str| RunSpec {
        app: Some(app),
        seed_key: Some(key.to_string()),
        compare_to: Some(key.to_string()),
        ..RunSpec::new(label, editor)
    };
    cfg.runs.push(coupled("rome+zero", EditorKind::Rome, APPConfig::new(0.0, 0.0, 0.0), "rome"));
    cfg.runs.push(coupled("ft+zero", EditorKind::Ft, APPConfig::new(0.0, 0.0, 0.0), "ft"));
    for (label, app) in ablations() {
        cfg.runs.push(coupled(label, EditorKind::Rome, app, "rome"));
    }
    cfg.with_seed(seed).unwrap()
}

struct SeedRun {
    seed: u64,
    dir: tempfile::TempDir,
    elapsed: Duration,
    rows: BTreeMap<String, ReportRow>,
}

impl SeedRun {
    fn out(&self) -> &Path {
        self.dir.path()
    }

    fn row(&self, label: &str) -> &ReportRow {
        self.rows.get(label).unwrap_or_else(|| panic!("seed {}: no report row for {label}", self.seed))
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.out().join(rel)).unwrap()
    }
}

fn execute(seed: u64) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = pipeline::run_all(&acceptance_config(seed), dir.path(), None).unwrap();
    SeedRun {
        seed,
        dir,
        elapsed: start.elapsed(),
        rows: summary.rows.into_iter().collect(),
    }
}

fn seed_run(seed: u64) -> &'static SeedRun {
    static RUNS: [OnceLock<SeedRun>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| execute(seed))
}

fn editing_efficacy() -> Outcome {
    let run = seed_run(0);
    let base = load_model(run.out().join(Layout::MODEL)).unwrap();
    let data = load_instances(run.out().join(Layout::FILTERED), false).unwrap();
    let n = data.instances.len();
    let mut increased = 0;
    for (i, inst) in data.instances.iter().enumerate() {
        let path = run.out().join(Layout::delta("rome", i));
        if !path.exists() {
            continue;
        }
        let post = load_delta(&path).unwrap().apply(&base).unwrap();
        let before = answer_logprob(&base, &inst.prompt, &inst.new_answer, None).unwrap();
        let after = answer_logprob(&post, &inst.prompt, &inst.new_answer, None).unwrap();
        increased += usize::from(after > before);
    }
    let (rome, ft) = (run.row("rome"), run.row("ft"));
    let inc = increased as f64 / n.max(1) as f64;
    check(
        n >= 50 && rome.es >= 0.9 && inc >= 0.9 && ft.es >= 0.8 && run.elapsed < Duration::from_secs(600),
        format!(
            "{n} filtered instances, ROME ES {:.2}% with P(o*|p) up on {:.2}%, FT ES {:.2}%, pipeline {}",
            rome.es * 100.0,
            inc * 100.0,
            ft.es * 100.0,
            secs(run.elapsed)
        ),
    )
}

fn mean_over_seeds(label: &str, f: impl Fn(&ReportRow) -> f64) -> f64 {
    SEEDS.iter().map(|&s| f(seed_run(s).row(label))).sum::<f64>() / SEEDS.len() as f64
}

fn app_direction() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (plain, coupled) in [("rome", "rome+app"), ("ft", "ft+app")] {
        let m = |label: &str, f: fn(&ReportRow) -> f64| mean_over_seeds(label, f);
        let (aff_p, aff_c) = (m(plain, |r| r.aff_hard), m(coupled, |r| r.aff_hard));
        let (anf_p, anf_c) = (m(plain, |r| r.anf_hard), m(coupled, |r| r.anf_hard));
        let (es_p, es_c) = (m(plain, |r| r.es), m(coupled, |r| r.es));
        ok &= aff_c <= 0.9 * aff_p && anf_c <= 0.9 * anf_p && es_c >= 0.9 * es_p;
        parts.push(format!(
            "{coupled}/{plain}: AFF(h) {:.3}, ANF(h) {:.3}, ES {:.3}",
            aff_c / aff_p,
            anf_c / anf_p,
            es_c / es_p
        ));
    }
    let total: Duration = SEEDS.iter().map(|&s| seed_run(s).elapsed).sum();
    ok &= total < Duration::from_secs(1800);
    check(ok, format!("{}; 3 seeds in {}", parts.join("; "), secs(total)))
}

fn hard_sum(r: &ReportRow) -> f64 {
    r.aff_hard + r.anf_hard
}

fn ablation_direction() -> Outcome {
    let full = mean_over_seeds("rome+app", hard_sum);
    let l1 = mean_over_seeds("rome-l1", hard_sum);
    let mut alpha_largest = 0;
    let mut per_seed = Vec::new();
    for &s in &SEEDS {
        let run = seed_run(s);
        let base = hard_sum(run.row("rome+app"));
        let d = |label: &str| hard_sum(run.row(label)) - base;
        let (da, db, dg) = (d("rome-no-alpha"), d("rome-no-beta"), d("rome-no-gamma"));
        alpha_largest += usize::from(da > db && da > dg);
        per_seed.push(format!("seed {s}: α {da:+.3} β {db:+.3} γ {dg:+.3}"));
    }
    check(
        full - l1 <= 0.02 && alpha_largest >= 2,
        format!(
            "AFF(h)+ANF(h) full {full:.3} vs L1-only {l1:.3}; degradation {}; α largest in {alpha_largest}/3",
            per_seed.join(", ")
        ),
    )
}

fn records(run: &SeedRun, label: &str) -> Vec<EditRecord> {
    String::from_utf8(run.read(&Layout::diagnostics(label)))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn zero_weight_degeneracy() -> Outcome {
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for &s in &SEEDS {
        let run = seed_run(s);
        for (plain, zero) in [("rome", "rome+zero"), ("ft", "ft+zero")] {
            let (a, b) = (records(run, plain), records(run, zero));
            if a.len() != b.len() {
                mismatches.push(format!("seed {s} {zero}: {} vs {} records", b.len(), a.len()));
                continue;
            }
            for (ra, rb) in a.iter().zip(&b) {
                let delta_of = |r: &EditRecord| r.snapshot.as_ref().map(|p| load_delta(run.out().join(p)).unwrap());
                let (da, db) = (delta_of(ra), delta_of(rb));
                let bits = |d: &Option<peaklab::microlm::WeightDelta>| {
                    d.as_ref().map(|d| d.value.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                };
                let traj = |r: &EditRecord| r.trajectory.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                if ra.seed != rb.seed || bits(&da) != bits(&db) || traj(ra) != traj(rb) {
                    mismatches.push(format!("seed {s} {zero} #{}", ra.index));
                }
                compared += 1;
            }
        }
    }
    check(
        mismatches.is_empty() && compared > 0,
        format!(
            "{compared} coupled/uncoupled edit pairs over both editors, {} differ{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(", first: {m}")).unwrap_or_default()
        ),
    )
}

fn determinism() -> Outcome {
    let first = seed_run(0);
    let second = execute(0);
    let mut differing = Vec::new();
    for rel in [Layout::REPORT_CSV, Layout::REPORT_FRACTIONS] {
        if first.read(rel) != second.read(rel) {
            differing.push(rel);
        }
    }
    check(
        differing.is_empty(),
        format!(
            "second seed-0 execution in {}, aggregate CSVs {}",
            secs(second.elapsed),
            if differing.is_empty() { "byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) }
        ),
    )
}

fn identity_sanity() -> Outcome {
    let mut problems = Vec::new();
    let mut lines = Vec::new();
    for &s in &SEEDS {
        let run = seed_run(s);
        let csv = String::from_utf8(run.read(Layout::REPORT_CSV)).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let row = csv.lines().find(|l| l.starts_with("identity,")).unwrap_or_default();
        let cells: BTreeMap<&str, &str> = header.iter().cloned().zip(row.split(',')).collect();
        let want = [("LS", "100.00"), ("AFF(h)", "0.00"), ("ANF(h)", "0.00"), ("AFF(r)", "0.00"), ("ANF(r)", "0.00")];
        for (col, value) in want {
            if cells.get(col) != Some(&value) {
                problems.push(format!("seed {s} {col}={:?}", cells.get(col)));
            }
        }
        let r = run.row("identity");
        if r.ls != 1.0 || r.aff_hard != 0.0 || r.anf_hard != 0.0 || r.aff_random != 0.0 || r.anf_random != 0.0 {
            problems.push(format!("seed {s} fractions not exact"));
        }
        lines.push(row.to_string());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() { format!("identity rows: {}", lines.join(" | ")) } else { problems.join(", ") },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric oracle equivalence", metric_oracle),
        ("additivity algebra", additivity_algebra),
        ("gradient correctness", gradient_correctness),
        ("rank-one identity", rank_one_identity),
        ("editing efficacy", editing_efficacy),
        ("directional APP effect", app_direction),
        ("ablation direction", ablation_direction),
        ("zero-weight coupling degeneracy", zero_weight_degeneracy),
        ("determinism", determinism),
        ("identity-edit sanity", identity_sanity),
    ];
    let filter: Vec<usize> = std::env::var("PEAKLAB_ACCEPTANCE")
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
