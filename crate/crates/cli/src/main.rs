use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sidexplain::checkpoint::ModelRole;
use sidexplain::config::{parse_override, RunConfig};
use sidexplain::data::Split;
use sidexplain::eval::{
    classifier_flops, combined_flops, preset, separate_flops, separate_params, EfficiencyReport, EvalOptions,
};
use sidexplain::nn::{count_params, count_side_params, SideConfig, SideRole, TokenSequence};
use sidexplain::report::{explanation_record, to_json, write_json, write_text, ExplanationRecord};
use sidexplain::run;
use sidexplain::shapley::{harmonic, second_moment_matrix};
use sidexplain::train::Pipeline;
use sidexplain::Error;

const USAGE: u8 = 1;
const FAILED_CHECK: u8 = 2;
const IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sidexplain", version, about = "Train and evaluate side-tuned Shapley explainers on synthetic token tasks")]
struct Cli {
    /// TOML run configuration; the built-in toy run is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for artifacts.
    #[arg(long, global = true, env = "SIDEXPLAIN_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set model.hidden=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Run seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the backbone classifier.
    TrainClassifier(EpochArgs),
    /// Train the surrogate side branch on a frozen classifier.
    TrainSurrogate(EpochArgs),
    /// Train the explainer side branch from a trained surrogate.
    TrainExplainer(EpochArgs),
    /// Train encoder, prediction head and explanation head jointly.
    TrainDuo(EpochArgs),
    /// Train only an explanation head on a frozen classifier.
    TrainFroyo(EpochArgs),
    /// Predict and explain test samples or token matrices from a JSON file.
    Explain(ExplainArgs),
    /// Faithfulness curves, representation similarity, bound check and costs.
    Evaluate(EvaluateArgs),
    /// Analytic parameter counts for a preset backbone and side branch.
    CountParams(CostArgs),
    /// Analytic forward FLOPs for combined and separate explainers.
    CountFlops(CostArgs),
    /// Measure the explainer error bound against exact Shapley values.
    CheckBounds(BoundArgs),
    /// Compare closed-form and eigensolved smallest second-moment eigenvalues.
    CheckLemma(LemmaArgs),
}

#[derive(Args, Debug)]
struct EpochArgs {
    /// Epochs for this stage; overrides the configuration file.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    /// JSON file holding one `[tokens][dim]` matrix or an array of them.
    #[arg(long, conflicts_with = "sample")]
    input: Option<PathBuf>,
    /// Index into the test split.
    #[arg(long)]
    sample: Option<usize>,
    /// Number of consecutive test samples starting at `--sample`.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalModel {
    Explainer,
    Froyo,
    Duo,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_enum, default_value_t = EvalModel::Explainer)]
    model: EvalModel,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    bound_samples: usize,
    #[arg(long, default_value_t = 50_000)]
    bound_masks: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    Surrogate,
    Explainer,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value = "vit-base")]
    preset: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Side branch as `r=<reduction>`.
    #[arg(long, default_value = "r=8", value_parser = parse_side)]
    side: usize,
    #[arg(long, value_enum, default_value_t = Role::Surrogate)]
    role: Role,
    #[arg(long, default_value_t = 3)]
    head_depth: usize,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 50_000)]
    masks: usize,
}

#[derive(Args, Debug)]
struct LemmaArgs {
    #[arg(long, default_value_t = 16)]
    max_d: usize,
}

fn parse_side(s: &str) -> Result<usize, String> {
    let v = s.strip_prefix("r=").unwrap_or(s);
    v.parse::<usize>().ok().filter(|&r| r > 0).ok_or_else(|| format!("expected r=<positive integer>, got {s:?}"))
}

enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Corrupt(_) | Error::Version { .. } => IO,
        Error::Invariant(_) | Error::NonFinite { .. } | Error::Singular { .. } => FAILED_CHECK,
        _ => USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(FAILED_CHECK)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn effective_config(cli: &Cli, extra: &[(String, String)]) -> Result<(RunConfig, PathBuf), Error> {
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &cli.output_dir {
        overrides.push(("output_dir".into(), toml_string(&dir.display().to_string())));
    }
    overrides.extend_from_slice(extra);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let dir = cfg.output_dir.clone();
    Ok((cfg, dir))
}

fn toml_string(s: &str) -> String {
    format!("{s:?}")
}

fn epochs(section: &str, args: &EpochArgs) -> Vec<(String, String)> {
    args.epochs.map(|e| vec![(format!("{section}.epochs"), e.to_string())]).unwrap_or_default()
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), Error> {
    print!("{}", to_json(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let extra = match &cli.command {
        Command::TrainClassifier(a) => epochs("classifier", a),
        Command::TrainSurrogate(a) => epochs("surrogate", a),
        Command::TrainExplainer(a) | Command::TrainDuo(a) | Command::TrainFroyo(a) => epochs("explainer", a),
        _ => Vec::new(),
    };
    match &cli.command {
        Command::CountParams(a) => return count_params_cmd(a, cli.output_dir.as_deref()),
        Command::CountFlops(a) => return count_flops_cmd(a, cli.output_dir.as_deref()),
        Command::CheckLemma(a) => return check_lemma(a, cli.output_dir.as_deref()),
        _ => {}
    }
    let (cfg, dir) = effective_config(&cli, &extra)?;
    match &cli.command {
        Command::GenData => {
            let data = run::gen_data(&cfg, &dir)?;
            println!(
                "wrote {} ({} train / {} val / {} test)",
                dir.join(run::DATASET).display(),
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
        }
        Command::TrainClassifier(_) => print_json(&run::classifier_stage(&cfg, &dir)?)?,
        Command::TrainSurrogate(_) => print_json(&run::surrogate_stage(&cfg, &dir)?)?,
        Command::TrainExplainer(_) => print_json(&run::explainer_stage(&cfg, &dir)?)?,
        Command::TrainDuo(_) => print_json(&run::head_stage(&cfg, &dir, Pipeline::Duo)?)?,
        Command::TrainFroyo(_) => print_json(&run::head_stage(&cfg, &dir, Pipeline::Froyo)?)?,
        Command::Explain(a) => explain(&cfg, &dir, a)?,
        Command::Evaluate(a) => {
            let role = match a.model {
                EvalModel::Explainer => ModelRole::Explainer,
                EvalModel::Froyo => ModelRole::Froyo,
                EvalModel::Duo => ModelRole::Duo,
            };
            let options = EvalOptions {
                samples: a.samples,
                bound_samples: a.bound_samples,
                bound_masks: a.bound_masks,
                seed: cfg.seed,
                ..EvalOptions::default()
            };
            let report = run::evaluate_stage(&cfg, &dir, role, &options)?;
            for f in &report.faithfulness {
                println!("{:<10} insertion {:.4}  deletion {:.4}", f.method, f.insertion.auc, f.deletion.auc);
            }
            println!("max efficiency residual {:.3e}", report.max_efficiency_residual);
            print_bound(&report.bound);
            if report.max_efficiency_residual >= 1e-5 {
                return Err(Failure::Check(format!("efficiency residual {:.3e}", report.max_efficiency_residual)));
            }
        }
        Command::CheckBounds(a) => {
            let report = run::bound_stage(&cfg, &dir, a.samples, a.masks)?;
            print_bound(&report);
            if !report.skipped && !report.passed {
                return Err(Failure::Check(format!("bound violated: {:.5} > {:.5}", report.lhs, report.rhs)));
            }
        }
        Command::CountParams(_) | Command::CountFlops(_) | Command::CheckLemma(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn print_bound(b: &sidexplain::eval::BoundReport) {
    if b.skipped {
        println!("bound check skipped: {} players exceeds the exact oracle limit", b.players);
    } else {
        println!(
            "bound {}: E|phi - phi*| = {:.5} <= {:.5} (excess loss {:.3e} ± {:.1e})",
            if b.passed { "PASS" } else { "FAIL" },
            b.lhs,
            b.rhs,
            b.excess.mean,
            b.excess.ci95
        );
    }
}

fn explain(cfg: &RunConfig, dir: &Path, a: &ExplainArgs) -> Result<(), Error> {
    let model = run::load_explainer(cfg, dir)?;
    let combined = sidexplain::nn::CombinedModel::new(model)?;
    let (d, dim) = (cfg.model.num_tokens, cfg.model.token_input_dim);
    let inputs: Vec<TokenSequence<f32>> = match &a.input {
        Some(path) => read_inputs(path, d, dim)?,
        None => {
            let data = run::dataset(cfg, dir)?;
            let xs = data.sequences::<f32>(Split::Test);
            let start = a.sample.unwrap_or(0);
            if start >= xs.len() {
                return Err(Error::Config(format!("sample {start} out of range for {} test samples", xs.len())));
            }
            xs[start..(start + a.count).min(xs.len())].to_vec()
        }
    };
    let records = inputs.iter().map(|x| explanation_record(&combined, x)).collect::<Result<Vec<ExplanationRecord>, _>>()?;
    write_json(dir.join("explanations.json"), &records)?;
    if records.len() == 1 {
        print_json(&records[0])
    } else {
        print_json(&records)
    }
}

fn read_inputs(path: &Path, d: usize, dim: usize) -> Result<Vec<TokenSequence<f32>>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let matrices: Vec<Vec<Vec<f32>>> = match serde_json::from_value::<Vec<Vec<f32>>>(value.clone()) {
        Ok(m) => vec![m],
        Err(_) => serde_json::from_value(value)?,
    };
    matrices
        .iter()
        .map(|m| {
            if m.len() != d || m.iter().any(|r| r.len() != dim) {
                return Err(Error::Config(format!("each input must be a {d}×{dim} token matrix")));
            }
            TokenSequence::from_f32(d, dim, &m.concat())
        })
        .collect()
}

fn write_artifact(dir: Option<&Path>, name: &str, value: &serde_json::Value) -> Result<(), Error> {
    if let Some(dir) = dir {
        write_json(dir.join(name), value)?;
    }
    Ok(())
}

fn count_params_cmd(a: &CostArgs, dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = preset(&a.preset, a.classes)?;
    let role = match a.role {
        Role::Surrogate => SideRole::Surrogate,
        Role::Explainer => SideRole::Explainer,
    };
    let side = SideConfig { reduction: a.side, role, head_depth: a.head_depth };
    side.validate(&cfg)?;
    let total = count_params(&cfg);
    let trainable = count_side_params(&cfg, &side);
    let reduction = 100.0 * (1.0 - trainable as f64 / total as f64);
    let report = EfficiencyReport::for_training(&cfg, Some(&side));
    println!("{} backbone: {:.2}M params", a.preset, total as f64 / 1e6);
    println!(
        "{} side branch r={}: {:.2}M trainable params (-{:.1}% vs full fine-tuning)",
        match role {
            SideRole::Surrogate => "surrogate",
            SideRole::Explainer => "explainer",
        },
        a.side,
        trainable as f64 / 1e6,
        reduction
    );
    println!("classifier + separate explainer: {:.2}M params", separate_params(&cfg, a.head_depth) as f64 / 1e6);
    println!("training memory at batch 1: {:.1} MB", report.memory_bytes as f64 / (1024.0 * 1024.0));
    let json = serde_json::json!({
        "preset": a.preset,
        "backbone_params": total,
        "side_params": trainable,
        "reduction_percent": reduction,
        "separate_params": separate_params(&cfg, a.head_depth),
        "efficiency": report,
    });
    write_artifact(dir, "params.json", &json)?;
    Ok(())
}

fn count_flops_cmd(a: &CostArgs, dir: Option<&Path>) -> Result<(), Failure> {
    let cfg = preset(&a.preset, a.classes)?;
    let side = SideConfig { reduction: a.side, role: SideRole::Explainer, head_depth: a.head_depth };
    side.validate(&cfg)?;
    let classifier = classifier_flops(&cfg).giga();
    let combined = combined_flops(&cfg, &side).giga();
    let separate = separate_flops(&cfg, a.head_depth).giga();
    let reduction = 100.0 * (1.0 - combined / separate);
    println!("{} classifier: {classifier:.2} GFLOPs", a.preset);
    println!("combined (r={}): {combined:.2} GFLOPs", a.side);
    println!("classifier + separate explainer: {separate:.2} GFLOPs");
    println!("reduction: -{reduction:.1}%");
    let json = serde_json::json!({
        "preset": a.preset,
        "classifier_gflops": classifier,
        "combined_gflops": combined,
        "separate_gflops": separate,
        "reduction_percent": reduction,
    });
    write_artifact(dir, "flops.json", &json)?;
    Ok(())
}

fn check_lemma(a: &LemmaArgs, dir: Option<&Path>) -> Result<(), Failure> {
    if a.max_d < 2 {
        return Err(Error::Config("--max-d must be at least 2".into()).into());
    }
    let mut csv = String::from("d,closed_form,eigensolve,abs_diff\n");
    let mut worst = 0.0f64;
    println!("{:>3}  {:>18}  {:>18}  {:>10}", "d", "1/(2H_{d-1})", "eigensolve", "|diff|");
    for d in 2..=a.max_d {
        let m = second_moment_matrix(d)?;
        let formula = 1.0 / (2.0 * harmonic(d - 1));
        let diff = (m.lambda_closed - formula).abs().max((m.lambda_eig - formula).abs());
        worst = worst.max(diff);
        println!("{d:>3}  {formula:>18.15}  {:>18.15}  {diff:>10.2e}", m.lambda_eig);
        csv.push_str(&format!("{d},{formula},{},{diff}\n", m.lambda_eig));
    }
    if let Some(dir) = dir {
        write_text(dir.join("lemma.csv"), &csv)?;
    }
    if worst >= 1e-9 {
        return Err(Failure::Check(format!("largest eigenvalue deviation {worst:.3e}")));
    }
    Ok(())
}
