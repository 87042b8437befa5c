//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::games::{axiom_errors, majority, random_values};
use common::graphs::relative_error;
use common::toy::{linear12, planted12, planted16, tiny, train, ToyRun};
use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sidexplain::eval::{
    check_error_bound, cka, combined_flops, evaluate, normalized_attribution, preset, separate_flops, EvalOptions,
    EvalReport,
};
use sidexplain::nn::{count_params, count_side_params, BatchInput, CombinedModel, MaskVector, SideConfig, SideRole};
use sidexplain::report::explanation_record;
use sidexplain::run;
use sidexplain::shapley::{
    binomial, exact_shapley, harmonic, kernel_probabilities, kernelshap, kernelshap_on, sample_subsets,
    second_moment_matrix, shapley_kernel, FnGame, SurrogateGame,
};
use sidexplain::train::convex::{convex_decay_check, ConvexProblem};
use sidexplain::train::{accuracy, argmax_index, train_duo, train_froyo, LossRecord, Pipeline, Stage};
use sidexplain::data::Split;
use sidexplain::Error;

type Outcome = (bool, String);

struct Harness {
    failures: usize,
}

impl Harness {
    fn check(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let (passed, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !passed {
            self.failures += 1;
        }
        let verdict = if passed { "PASS" } else { "FAIL" };
        println!("[{id:02}] {verdict} {name:<28} {:>8.2}s  {detail}", start.elapsed().as_secs_f64());
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn axioms() -> Outcome {
    let (worst, t) = timed(|| {
        (0..50u64)
            .map(|seed| axiom_errors(seed, 3 + (seed % 8) as usize))
            .fold([0.0f64; 4], |acc, e| std::array::from_fn(|i| acc[i].max(e[i])))
    });
    let ok = worst.iter().all(|&e| e < 1e-9) && t < Duration::from_secs(10);
    (ok, format!("max |err| eff {:.1e} sym {:.1e} dummy {:.1e} lin {:.1e}", worst[0], worst[1], worst[2], worst[3]))
}

fn lemma() -> Outcome {
    let ((worst_closed, worst_eig, exact_ok), t) = timed(|| {
        let (mut wc, mut we, mut exact_ok) = (0.0f64, 0.0f64, true);
        let q = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        for d in 2..=16usize {
            let m = second_moment_matrix(d).unwrap();
            let want = 1.0 / (2.0 * harmonic(d - 1));
            wc = wc.max((m.lambda_closed - want).abs());
            we = we.max((m.lambda_eig - want).abs());
            let p = kernel_probabilities::<BigRational>(d).unwrap();
            let diag = (1..d).fold(q(0, 1), |a, k| a + binomial::<BigRational>(d - 1, k - 1) * p[k].clone());
            let off = (2..d).fold(q(0, 1), |a, k| a + binomial::<BigRational>(d - 2, k - 2) * p[k].clone());
            let h = (1..d).fold(q(0, 1), |a, k| a + q(1, k as i64));
            exact_ok &= diag - off == (q(2, 1) * h).recip();
        }
        (wc, we, exact_ok)
    });
    let ok = worst_closed < 1e-9 && worst_eig < 1e-9 && exact_ok && t < Duration::from_secs(30);
    (ok, format!("d=2..16 closed {worst_closed:.1e} eig {worst_eig:.1e} rational {exact_ok}"))
}

fn sampler() -> Outcome {
    let n = 60_000;
    let draws = sample_subsets(&shapley_kernel(3).unwrap(), n, false, 2024).unwrap();
    let mut counts = [0usize; 8];
    for m in &draws {
        counts[m.to_bits() as usize] += 1;
    }
    let p = 1.0 / 6.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let worst_z = (1..7).map(|s| (counts[s] as f64 - n as f64 * p).abs() / sigma).fold(0.0, f64::max);
    let paired = sample_subsets(&shapley_kernel(10).unwrap(), 1000, true, 5).unwrap();
    let complements = paired.chunks(2).all(|c| c[1] == c[0].complement());
    let ok = worst_z < 3.0 && counts[0] == 0 && counts[7] == 0 && complements;
    (ok, format!("worst |z| {worst_z:.2}, paired complements {complements}"))
}

fn kernelshap_convergence() -> Outcome {
    let game = FnGame::new(3, 1, majority(3));
    let err = median((0..10).map(|s| linf(&kernelshap(&game, 10_000, false, s).unwrap().class(0), &[1.0 / 3.0; 3])).collect());
    let (mut recovered, mut singular, mut bad) = (0, 0, 0);
    let mut worst = 0.0f64;
    for trial in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let d = rng.random_range(2..=10usize);
        let n = d + 2 + rng.random_range(0..6usize);
        let w = random_values(&mut rng, d)[..d].to_vec();
        let wc = w.clone();
        let lin = FnGame::new(d, 1, move |s: u64| vec![(0..d).filter(|i| s >> i & 1 == 1).map(|i| wc[i]).sum()]);
        let masks = sample_subsets(&shapley_kernel(d).unwrap(), n, trial % 2 == 0 && n % 2 == 0, trial).unwrap();
        let coalitions: Vec<u64> = masks.iter().map(|m| m.to_bits()).collect();
        let design = DMatrix::from_fn(n + 1, d, |r, c| if r == n { 1.0 } else { (coalitions[r] >> c & 1) as f64 });
        let rank = design.svd(false, false).rank(1e-9);
        match kernelshap_on(&lin, &coalitions) {
            Ok(a) if rank == d => {
                worst = worst.max(linf(&a.class(0), &w));
                recovered += 1;
            }
            Err(Error::Singular { .. }) if rank < d => singular += 1,
            _ => bad += 1,
        }
    }
    let ok = err < 0.02 && worst < 1e-6 && bad == 0;
    (ok, format!("majority median err {err:.4}; linear max err {worst:.1e} ({recovered} solved, {singular} rank-deficient, {bad} wrong)"))
}

fn gradients() -> Outcome {
    let errs: Vec<f64> = (0..100).map(relative_error).collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let passed = errs.iter().filter(|e| **e < 1e-3).count();
    (passed == 100, format!("{passed}/100 graphs, worst relative error {worst:.1e}"))
}

fn mask_semantics(run: &ToyRun) -> Outcome {
    let d = run.config.model.num_tokens;
    let dim = run.data.spec.token_dim;
    let xs = run.data.sequences::<f32>(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let x = &xs[i % xs.len()];
        let mask = MaskVector::from_bits(rng.random::<u64>() & ((1 << d) - 1), d);
        let mut y = x.clone();
        for t in (0..d).filter(|&t| !mask.get(t)) {
            for k in 0..dim {
                y.tokens_mut().data_mut()[t * dim + k] = rng.random_range(-10.0..10.0);
            }
        }
        let a = run.classifier.forward(x, &mask).unwrap();
        let b = run.classifier.forward(&y, &mask).unwrap();
        worst = worst.max(a.iter().zip(&b).map(|(p, q)| (p - q).abs() as f64).fold(0.0, f64::max));
    }
    (worst < 1e-6, format!("max logit change {worst:.1e} over 100 pairs"))
}

fn frozen_backbone(run: &ToyRun) -> Outcome {
    let bytes_of = |store: &sidexplain::autodiff::ParamStore<f32>| -> Vec<(String, Vec<u32>)> {
        store
            .iter()
            .filter(|(_, n, _)| n.starts_with("backbone."))
            .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let reference = bytes_of(&run.classifier.store);
    let surrogate_same = bytes_of(&run.surrogate.store) == reference;
    let explainer_same = bytes_of(&run.explainer().store) == reference;
    let combined = CombinedModel::new(run.explainer().clone()).unwrap();
    let xs = run.data.sequences::<f32>(Split::Test);
    let mismatches = xs
        .iter()
        .filter(|x| {
            let a = combined.explain(x).unwrap().logits;
            let b = run.classifier.logits(&BatchInput::new(&[*x], None).unwrap()).unwrap();
            a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits())
        })
        .count();
    let ok = surrogate_same && explainer_same && mismatches == 0;
    (ok, format!("backbone bytes identical: surrogate {surrogate_same}, explainer {explainer_same}; {mismatches}/{} prediction mismatches", xs.len()))
}

fn surrogate_quality(run: &ToyRun, elapsed: Duration) -> Outcome {
    let rec = &run.surrogate_record;
    let xs = run.data.sequences::<f32>(Split::Test);
    let labels = run.data.labels(Split::Test);
    let d = run.config.model.num_tokens;
    let clf_acc = accuracy(&run.classifier, &xs, &labels).unwrap();
    let correct = xs
        .iter()
        .zip(&labels)
        .filter(|(x, y)| {
            let p = run.surrogate.surrogate_probs(&BatchInput::repeated(x, &[MaskVector::all(d)]).unwrap()).unwrap();
            argmax_index(p.row(0)) == **y
        })
        .count();
    let surr_acc = correct as f64 / xs.len() as f64;
    let ratio = rec.final_loss / rec.initial_val_loss;
    let ok = ratio < 0.25 && (surr_acc - clf_acc).abs() <= 0.02 && elapsed < Duration::from_secs(600);
    (ok, format!("KL {:.4} -> {:.4} (x{ratio:.3}); accuracy surrogate {surr_acc:.3} vs classifier {clf_acc:.3}; trained in {:.0}s", rec.initial_val_loss, rec.final_loss, elapsed.as_secs_f64()))
}

fn explainer_vs_oracle(run: &ToyRun) -> Outcome {
    let explainer = run.explainer();
    let null: Vec<f64> = explainer.null_value().unwrap().iter().map(|v| *v as f64).collect();
    let xs = run.data.sequences::<f32>(Split::Test);
    let errs: Vec<f64> = xs[..50]
        .iter()
        .map(|x| {
            let exact = exact_shapley(&SurrogateGame::new(explainer, x).unwrap()).unwrap();
            normalized_attribution(explainer, explainer, &null, x).unwrap().max_abs_diff(&exact)
        })
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    (worst <= 0.1, format!("L∞ to exact values over 50 samples: worst {worst:.4}, mean {mean:.4}"))
}

fn error_bound(run: &ToyRun) -> Outcome {
    let xs = run.data.sequences::<f32>(Split::Test);
    let r = check_error_bound(run.explainer(), run.explainer(), &xs[..50], 50_000, run.config.seed).unwrap();
    (r.passed && !r.skipped, format!("mean ‖φ̂ − φ‖ {:.4} ≤ bound {:.4} (excess loss {:.2e} ± {:.1e})", r.lhs, r.rhs, r.excess.mean, r.excess.ci95))
}

fn convex_decay() -> Outcome {
    let c = convex_decay_check(&ConvexProblem::default(), 0.05).unwrap();
    (c.passed, format!("{} steps, μ {:.3e}, worst gap/bound {:.3}", c.gaps.len() - 1, c.mu, c.worst_ratio))
}

fn efficiency(reports: &[&EvalReport], combined_runs: &[&ToyRun]) -> Outcome {
    let mut worst = reports.iter().map(|r| r.max_efficiency_residual).fold(0.0, f64::max);
    let mut n = 0;
    for run in combined_runs {
        let combined = CombinedModel::new(run.explainer().clone()).unwrap();
        for x in run.data.sequences::<f32>(Split::Test) {
            worst = worst.max(explanation_record(&combined, &x).unwrap().efficiency_residual);
            n += 1;
        }
    }
    (worst < 1e-5, format!("max |1ᵀφ − gap| {worst:.1e} over {} evaluations and {n} merged-model outputs", reports.len()))
}

fn faithfulness(report: &EvalReport) -> Outcome {
    let get = |m: &str| report.method(m).expect("method present");
    let (e, r, x) = (get("explainer"), get("random"), get("exact"));
    let ok = e.insertion.auc > r.insertion.auc
        && e.deletion.auc < r.deletion.auc
        && x.insertion.auc > r.insertion.auc
        && x.deletion.auc < r.deletion.auc;
    (
        ok,
        format!(
            "{} samples; insertion explainer {:.4} exact {:.4} random {:.4}; deletion explainer {:.4} exact {:.4} random {:.4}",
            report.samples, e.insertion.auc, x.insertion.auc, r.insertion.auc, e.deletion.auc, x.deletion.auc, r.deletion.auc
        ),
    )
}

fn parameters() -> Outcome {
    let cfg = preset("vit-base", 10).unwrap();
    let total = count_params(&cfg) as f64 / 1e6;
    let surr = count_side_params(&cfg, &SideConfig::new(8, SideRole::Surrogate)) as f64 / 1e6;
    let exp = count_side_params(&cfg, &SideConfig::new(8, SideRole::Explainer)) as f64 / 1e6;
    let reduction = 1.0 - surr / total;
    let ok = within(total, 85.81, 0.02) && within(surr, 2.23, 0.10) && within(exp, 2.42, 0.10) && reduction >= 0.95;
    (ok, format!("backbone {total:.2}M, surrogate {surr:.2}M, explainer {exp:.2}M, trainable reduction {:.1}%", 100.0 * reduction))
}

fn flops() -> Outcome {
    let cfg = preset("vit-base", 10).unwrap();
    let combined = combined_flops(&cfg, &SideConfig::new(8, SideRole::Explainer)).giga();
    let separate = separate_flops(&cfg, 3).giga();
    let reduction = 1.0 - combined / separate;
    let ok = within(combined, 34.67, 0.10) && within(separate, 74.90, 0.10) && reduction >= 0.45;
    (ok, format!("combined {combined:.2} GFLOPs vs separate {separate:.2} GFLOPs, reduction {:.1}%", 100.0 * reduction))
}

fn pipelines(side: &EvalReport, froyo: &EvalReport, duo: &LossRecord) -> Outcome {
    let s = side.method("explainer").unwrap().insertion.auc;
    let f = froyo.method("explainer").unwrap().insertion.auc;
    let neg = duo.negative_cosine_steps();
    (f <= s && neg >= 1, format!("insertion froyo {f:.4} ≤ side {s:.4}; duo negative-cosine steps {neg}/{}", duo.cosine_trace.len()))
}

fn cka_sanity(run: &ToyRun) -> Outcome {
    let gaussian = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let (n, p) = (100, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = gaussian(&mut rng, n * p);
    let xm = DMatrix::from_row_slice(n, p, &x);
    let q = DMatrix::from_vec(p, p, gaussian(&mut rng, p * p)).qr().q();
    let rotated: Vec<f64> = (&xm * q).transpose().as_slice().to_vec();
    let scaled: Vec<f64> = x.iter().map(|v| -3.5 * v).collect();
    let self_err = (cka(&x, &x, n).unwrap() - 1.0).abs();
    let rot_err = (cka(&x, &rotated, n).unwrap() - 1.0).abs();
    let scale_err = (cka(&x, &scaled, n).unwrap() - 1.0).abs();
    let null = (0..100u64)
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + s);
            cka(&gaussian(&mut r, n * p), &gaussian(&mut r, n * p), n).unwrap()
        })
        .fold(0.0, f64::max);
    let diag_ok = {
        let xs = run.data.sequences::<f32>(Split::Test);
        let m = sidexplain::eval::layer_cka(&run.classifier, &run.classifier, &xs[..64]).unwrap();
        (0..m.len()).all(|i| (m[i][i] - 1.0).abs() < 1e-6)
    };
    let ok = self_err < 1e-9 && rot_err < 1e-9 && scale_err < 1e-9 && null < 0.25 && diag_ok;
    (ok, format!("|cka−1| self {self_err:.1e} rotated {rot_err:.1e} scaled {scale_err:.1e}; independent null max {null:.3}; layer self-similarity {diag_ok}"))
}

fn determinism() -> Outcome {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let options = EvalOptions { samples: 20, bound_masks: 2000, bound_samples: 5, cka_samples: 8, seed: 3 };
    let once = || {
        if out.exists() {
            std::fs::remove_dir_all(&out).unwrap();
        }
        run::gen_data(&cfg, &out).unwrap();
        run::classifier_stage(&cfg, &out).unwrap();
        run::surrogate_stage(&cfg, &out).unwrap();
        run::explainer_stage(&cfg, &out).unwrap();
        run::head_stage(&cfg, &out, Pipeline::Duo).unwrap();
        run::evaluate_stage(&cfg, &out, sidexplain::checkpoint::ModelRole::Explainer, &options).unwrap();
        run::bound_stage(&cfg, &out, 5, 2000).unwrap();
        run::artifact_bytes(&out).unwrap()
    };
    let a = once();
    let b = once();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let ok = a.len() == b.len() && differing.is_empty() && a.iter().any(|(n, _)| n.ends_with(".ckpt"));
    (ok, format!("{} artifacts compared, {} differ {differing:?}", a.len(), differing.len()))
}

fn main() {
    let mut h = Harness { failures: 0 };
    h.check(1, "shapley axioms", axioms);
    h.check(2, "kernel eigenvalue identity", lemma);
    h.check(3, "kernel sampler", sampler);
    h.check(4, "regression estimator", kernelshap_convergence);
    h.check(5, "gradient check", gradients);

    let total = Instant::now();
    let planted = train(&planted12(), true);
    let stage = planted.config.stage(Stage::Explainer);
    let head_depth = planted.config.side.head_depth;
    let (froyo, _) = train_froyo(&planted.classifier, &planted.surrogate, &planted.data, head_depth, &stage.clone().with_pipeline(Pipeline::Froyo)).unwrap();
    let (duo, duo_record) = train_duo(&planted.classifier, &planted.surrogate, &planted.data, head_depth, &stage.with_pipeline(Pipeline::Duo)).unwrap();
    let side = planted.config.side.side_config(SideRole::Explainer);
    let options = EvalOptions { seed: planted.config.seed, ..EvalOptions::default() };
    let exp = planted.explainer();
    let side_report = evaluate(exp, exp, &planted.classifier, &exp.backbone_classifier(), &side, &planted.data, &options).unwrap();
    let froyo_report = evaluate(&froyo, &planted.surrogate, &planted.classifier, &froyo.classifier(), &side, &planted.data, &options).unwrap();
    let duo_report = evaluate(&duo, &planted.surrogate, &planted.classifier, &duo.classifier(), &side, &planted.data, &options).unwrap();
    println!("     planted-patch d=12 runs trained and evaluated in {:.0}s", total.elapsed().as_secs_f64());

    h.check(6, "removed-token semantics", || mask_semantics(&planted));
    h.check(7, "frozen backbone", || frozen_backbone(&planted));
    let (planted_wide, wide_time) = timed(|| train(&planted16(), false));
    h.check(8, "surrogate quality", || surrogate_quality(&planted_wide, wide_time));
    let linear = train(&linear12(), true);
    h.check(9, "explainer vs exact values", || explainer_vs_oracle(&linear));
    h.check(10, "explainer error bound", || error_bound(&planted));
    h.check(11, "convex loss decay", convex_decay);
    h.check(12, "efficiency constraint", || efficiency(&[&side_report, &froyo_report, &duo_report], &[&planted, &linear]));
    h.check(13, "faithfulness direction", || faithfulness(&side_report));
    h.check(14, "parameter counts", parameters);
    h.check(15, "flop counts", flops);
    h.check(16, "pipeline comparison", || pipelines(&side_report, &froyo_report, &duo_record));
    h.check(17, "cka sanity", || cka_sanity(&planted));
    h.check(18, "determinism", determinism);

    println!("{} of 18 checks passed", 18 - h.failures);
    if h.failures > 0 {
        std::process::exit(1);
    }
}
