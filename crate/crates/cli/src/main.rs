//! Command-line front end: design (`match`), analysis (`analyze`) and the
//! simulation harness (`simulate`, `power-curve`, `delta0`).

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use mpiv::csv_io;
use mpiv::data::{find_covariate_columns, validate_sample, PairStructure, RawTable, ValidatedSample};
use mpiv::estimators::{ZetaColumn, ZetaSpec};
use mpiv::pairing::{assign_treatment, match_pairs_greedy, match_pairs_scalar, MatchReport};
use mpiv::report::{analyze_sample, render_text, Adjust, AnalyzeOptions, SeMethod};
use mpiv::sim::{delta0_oracle, power_curve, run_mc, DgpSpec, Family, McConfig, McResult, McTest};

#[derive(Parser)]
#[command(
    name = "mpiv",
    version,
    about = "Matched-pair experiments with imperfect compliance: \
             pairing, randomization, LATE estimation and simulation"
)]
struct Cli {
    /// Worker threads for the simulation engine (0 = all cores).
    #[arg(long, global = true, env = "MPIV_JOBS", default_value_t = 0)]
    jobs: usize,

    /// Master random seed. Generated and echoed to stderr when absent.
    #[arg(long, global = true, env = "MPIV_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair units on baseline covariates and randomize within pairs.
    Match(MatchArgs),
    /// Estimate the complier average effect from a paired CSV file.
    Analyze(AnalyzeArgs),
    /// Monte Carlo rejection rates, bias and RMSE for a built-in design.
    Simulate(SimulateArgs),
    /// Rejection-rate curve over a grid of treated-arm intercepts.
    PowerCurve(PowerCurveArgs),
    /// Numerical oracle for the complier average effect of a design.
    Delta0(Delta0Args),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatchMethod {
    /// Sort on a single covariate and pair adjacent units.
    Scalar,
    /// Greedy nearest-neighbor matching on all x columns.
    Greedy,
}

#[derive(Args)]
struct MatchArgs {
    /// Covariate CSV with columns x1..xK.
    input: PathBuf,

    /// Output CSV (stdout when omitted): input plus pair_id and a.
    #[arg(long, short)]
    output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = MatchMethod::Scalar)]
    method: MatchMethod,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdjustArg {
    None,
    Linear,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Sample CSV with columns y, d, a and covariates.
    input: PathBuf,

    /// Variance estimators: nu, omega, omega-pfe-hc0, omega-pfe-hc1, all.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    se: Vec<String>,

    #[arg(long, value_enum, default_value_t = AdjustArg::None)]
    adjust: AdjustArg,

    /// Columns entering the linear adjustment (default: every w column).
    #[arg(long, value_delimiter = ',')]
    zeta: Vec<String>,

    /// Null values to test (comma separated).
    #[arg(long = "delta0", value_delimiter = ',', default_values_t = [0.0])]
    delta0: Vec<f64>,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Pair in flight by sorting on this x column instead of reading
    /// pair_id.
    #[arg(long)]
    match_on: Option<String>,

    /// Drop pairs with a missing member or missing values before
    /// validation (requires a pair_id column).
    #[arg(long)]
    drop_incomplete_pairs: bool,

    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,

    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    #[value(alias = "no-covariates")]
    S51,
    #[value(alias = "with-covariates")]
    S52,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::S51 => Family::NoCovariates,
            FamilyArg::S52 => Family::WithCovariates,
        }
    }
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,

    /// Model number within the family (1-3 or 1-4).
    #[arg(long)]
    model: u8,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,

    /// Sample size 2n per replication.
    #[arg(long = "n")]
    n_units: usize,

    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,

    /// Treated-arm intercept.
    #[arg(long, default_value_t = 0.0)]
    mu1: f64,

    /// Tests to run: nu|unadj, omega, omega-pfe-hc0, omega-pfe-hc1,
    /// naive, naive-robust, pfe.
    #[arg(long, value_delimiter = ',', default_value = "nu")]
    tests: Vec<String>,

    /// Null value; computed by the delta0 oracle at mu1 = 0 when absent.
    #[arg(long = "delta0")]
    delta0: Option<f64>,

    /// Estimand for bias/RMSE; oracle value at the run's mu1 when absent.
    #[arg(long)]
    delta_true: Option<f64>,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Draws for any oracle run triggered by missing --delta0.
    #[arg(long, default_value_t = 10_000_000)]
    oracle_draws: u64,

    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PowerCurveArgs {
    #[command(flatten)]
    design: DesignArgs,

    #[arg(long = "n")]
    n_units: usize,

    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,

    /// Grid of mu1 values as lo:hi:points.
    #[arg(long, default_value = "-1:1:21")]
    grid: String,

    #[arg(long, value_delimiter = ',', default_value = "nu")]
    tests: Vec<String>,

    #[arg(long = "delta0")]
    delta0: Option<f64>,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    #[arg(long, default_value_t = 10_000_000)]
    oracle_draws: u64,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Delta0Args {
    #[command(flatten)]
    design: DesignArgs,

    #[arg(long, default_value_t = 0.0)]
    mu1: f64,

    #[arg(long, default_value_t = 10_000_000)]
    draws: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("initializing worker pool")?;
    }
    let seed = cli.seed.unwrap_or_else(|| {
        let generated: u64 = rand::random();
        eprintln!("seed: {generated} (generated; pass --seed to reproduce)");
        generated
    });

    match cli.command {
        Command::Match(args) => cmd_match(args, seed),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args, seed),
        Command::PowerCurve(args) => cmd_power_curve(args, seed),
        Command::Delta0(args) => cmd_delta0(args, seed),
    }
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            f.write_all(content.as_bytes())?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn table_to_string(table: &RawTable) -> Result<String> {
    let mut buf = Vec::new();
    csv_io::write_table_to(&mut buf, table)?;
    Ok(String::from_utf8(buf)?)
}

// ---------------------------------------------------------------- match

fn cmd_match(args: MatchArgs, seed: u64) -> Result<()> {
    let table = csv_io::read_table(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    for reserved in ["pair_id", "a"] {
        if table.headers.iter().any(|h| h == reserved) {
            bail!("input already has a {reserved} column; refusing to overwrite");
        }
    }
    let x_cols = find_covariate_columns(&table.headers, "x")?;
    if x_cols.is_empty() {
        bail!("no matching covariates found; the input needs columns x1..xK");
    }
    let n = table.rows.len();
    let mut x = DMatrix::<f64>::zeros(n, x_cols.len());
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != table.headers.len() {
            bail!("ragged row {} in {}", r + 1, args.input.display());
        }
        for (k, &c) in x_cols.iter().enumerate() {
            x[(r, k)] = row[c]
                .trim()
                .parse()
                .with_context(|| format!("parsing x{} at row {}", k + 1, r + 1))?;
        }
    }

    let structure = match args.method {
        MatchMethod::Scalar => {
            if x_cols.len() != 1 {
                bail!(
                    "scalar matching needs exactly one x column (found {}); \
                     use --method greedy",
                    x_cols.len()
                );
            }
            let col: Vec<f64> = x.column(0).iter().copied().collect();
            match_pairs_scalar(&col)?
        }
        MatchMethod::Greedy => match_pairs_greedy(&x)?,
    };
    let report = MatchReport::compute(&x, structure);
    let a = assign_treatment(&report.structure, seed);
    let pair_ids = report.structure.pair_id_by_unit();

    let mut out = table.clone();
    out.headers.push("pair_id".to_string());
    out.headers.push("a".to_string());
    for (r, row) in out.rows.iter_mut().enumerate() {
        row.push(pair_ids[r].to_string());
        row.push(a[r].to_string());
    }

    eprintln!(
        "matched {} pairs  within-pair mean |dx| = {:.6}  mean |dx|^2 = {:.6}  \
         cross-pair mean |dx|^2 = {:.6}  seed = {seed}",
        report.structure.n_pairs(),
        report.within_pair_mean_l2,
        report.within_pair_mean_sq_l2,
        report.cross_pair_mean_sq_l2,
    );
    write_output(args.output.as_deref(), &table_to_string(&out)?)
}

// -------------------------------------------------------------- analyze

/// Rows whose pair is incomplete (missing partner or missing values in
/// schema columns) are removed before validation.
fn drop_incomplete_pairs(table: &RawTable) -> Result<(RawTable, usize)> {
    let pair_col = table
        .headers
        .iter()
        .position(|h| h == "pair_id")
        .context("--drop-incomplete-pairs needs a pair_id column")?;
    let mut value_cols: Vec<usize> = Vec::new();
    for name in ["y", "d", "a"] {
        if let Some(c) = table.headers.iter().position(|h| h == name) {
            value_cols.push(c);
        }
    }
    value_cols.extend(find_covariate_columns(&table.headers, "x").unwrap_or_default());
    value_cols.extend(find_covariate_columns(&table.headers, "w").unwrap_or_default());

    let is_missing = |row: &Vec<String>| {
        value_cols.iter().any(|&c| {
            row.get(c).map_or(true, |cell| {
                let cell = cell.trim();
                cell.is_empty() || cell.parse::<f64>().map_or(true, f64::is_nan)
            })
        })
    };

    let mut keep_pair: std::collections::BTreeMap<&str, (usize, bool)> = Default::default();
    for row in &table.rows {
        let id = row.get(pair_col).map(|s| s.as_str()).unwrap_or("");
        let entry = keep_pair.entry(id).or_insert((0, false));
        entry.0 += 1;
        entry.1 |= is_missing(row);
    }
    let dropped = keep_pair
        .values()
        .filter(|(count, missing)| *count != 2 || *missing)
        .count();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .filter(|row| {
            let id = row.get(pair_col).map(|s| s.as_str()).unwrap_or("");
            let (count, missing) = keep_pair[id];
            count == 2 && !missing
        })
        .cloned()
        .collect();
    Ok((
        RawTable {
            headers: table.headers.clone(),
            rows,
        },
        dropped,
    ))
}

fn parse_zeta_columns(names: &[String]) -> Result<ZetaSpec> {
    if names.is_empty() {
        return Ok(ZetaSpec::WOnly);
    }
    let mut cols = Vec::new();
    for name in names {
        let (block, rest) = name.split_at(1);
        let idx: usize = rest
            .parse()
            .ok()
            .filter(|k| *k >= 1)
            .with_context(|| format!("bad zeta column {name:?}; use names like w1 or x2"))?;
        cols.push(match block {
            "w" => ZetaColumn::W(idx - 1),
            "x" => ZetaColumn::X(idx - 1),
            _ => bail!("bad zeta column {name:?}; use names like w1 or x2"),
        });
    }
    Ok(ZetaSpec::Columns(cols))
}

fn parse_se_methods(names: &[String]) -> Result<Vec<SeMethod>> {
    let mut out = Vec::new();
    for name in names {
        if name == "all" {
            for m in SeMethod::ALL_UNADJUSTED {
                if !out.contains(&m) {
                    out.push(m);
                }
            }
            continue;
        }
        let m = SeMethod::parse(name).with_context(|| {
            format!(
                "unknown --se value {name:?}; expected nu, omega, omega-pfe-hc0, \
                 omega-pfe-hc1, nu-adj or all"
            )
        })?;
        if m == SeMethod::NuAdj {
            // Computed automatically with --adjust linear.
            continue;
        }
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("no variance estimators selected");
    }
    Ok(out)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let mut table = csv_io::read_table(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut notes = Vec::new();
    if args.drop_incomplete_pairs {
        let (filtered, dropped) = drop_incomplete_pairs(&table)?;
        if dropped > 0 {
            notes.push(format!("dropped {dropped} incomplete pairs before validation"));
            eprintln!("dropped {dropped} incomplete pairs");
        }
        table = filtered;
    }
    let ValidatedSample { sample, pair_ids } = validate_sample::<f64>(&table)?;

    let structure = match (&args.match_on, &pair_ids) {
        (Some(column), _) => {
            let k: usize = column
                .strip_prefix('x')
                .and_then(|s| s.parse().ok())
                .filter(|k| *k >= 1 && *k <= sample.x().ncols())
                .with_context(|| {
                    format!(
                        "--match-on {column:?} is not one of x1..x{}",
                        sample.x().ncols()
                    )
                })?;
            let col: Vec<f64> = sample.x().column(k - 1).iter().copied().collect();
            notes.push(format!("pairs formed in flight by sorting on {column}"));
            match_pairs_scalar(&col)?
        }
        (None, Some(ids)) => {
            let (structure, _labels) = PairStructure::from_pair_ids(ids)?;
            if sample.x().ncols() >= 1 {
                // Pairs-of-pairs blocks need a covariate ordering.
                let keys: Vec<f64> = structure
                    .pairs()
                    .iter()
                    .map(|&[u, v]| 0.5 * (sample.x()[(u, 0)] + sample.x()[(v, 0)]))
                    .collect();
                notes.push("pairs ordered by within-pair mean of x1".to_string());
                structure.order_by_key(&keys)?
            } else {
                notes.push("pairs ordered as they appear in the file".to_string());
                structure
            }
        }
        (None, None) => bail!(
            "the file has no pair_id column; pass --match-on x1 to pair in flight"
        ),
    };

    let opts = AnalyzeOptions {
        se_methods: parse_se_methods(&args.se)?,
        adjust: match args.adjust {
            AdjustArg::None => Adjust::None,
            AdjustArg::Linear => Adjust::Linear(parse_zeta_columns(&args.zeta)?),
        },
        delta_nulls: args.delta0.clone(),
        alpha: args.alpha,
    };
    let mut report = analyze_sample(&sample, &structure, &opts)?;
    report.notes.extend(notes);

    let rendered = match args.format {
        FormatArg::Text => render_text(&report),
        FormatArg::Json => format!("{}\n", serde_json::to_string_pretty(&report)?),
    };
    write_output(args.out.as_deref(), &rendered)
}

// ------------------------------------------------------------- simulate

fn build_spec(design: &DesignArgs, mu1: f64) -> Result<DgpSpec> {
    let spec = match Family::from(design.family) {
        Family::NoCovariates => DgpSpec::no_covariates(design.model, mu1),
        Family::WithCovariates => DgpSpec::with_covariates(design.model, mu1),
    }?;
    Ok(spec)
}

fn parse_tests(names: &[String]) -> Result<Vec<McTest>> {
    let mut tests = Vec::new();
    for name in names {
        let t = McTest::parse(name).with_context(|| {
            format!(
                "unknown test {name:?}; expected nu|unadj, omega, omega-pfe-hc0, \
                 omega-pfe-hc1, naive, naive-robust or pfe"
            )
        })?;
        if !tests.contains(&t) {
            tests.push(t);
        }
    }
    Ok(tests)
}

fn resolve_nulls(
    spec: &DgpSpec,
    delta0: Option<f64>,
    delta_true: Option<f64>,
    oracle_draws: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    let delta0 = match delta0 {
        Some(v) => v,
        None => {
            let est = delta0_oracle(&spec.with_mu1(0.0), oracle_draws, seed ^ 0xd0)?;
            eprintln!(
                "delta0 oracle at mu1=0: {:.10} (mc se {:.2e}, {} draws)",
                est.value, est.mc_se, est.n_draws
            );
            est.value
        }
    };
    let delta_true = match delta_true {
        Some(v) => v,
        None if spec.mu1 == 0.0 => delta0,
        None => {
            let est = delta0_oracle(spec, oracle_draws, seed ^ 0xd1)?;
            eprintln!(
                "delta oracle at mu1={}: {:.10} (mc se {:.2e}, {} draws)",
                spec.mu1, est.value, est.mc_se, est.n_draws
            );
            est.value
        }
    };
    Ok((delta0, delta_true))
}

fn mc_result_table(result: &McResult) -> RawTable {
    let headers = ["model", "n", "test", "metric", "value", "mc_se"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    let model = result.spec.label();
    for s in &result.tests {
        let se_of_var_mean = if s.reps_used > 0 {
            s.var_sd / (s.reps_used as f64).sqrt()
        } else {
            f64::NAN
        };
        let metrics: [(&str, f64, Option<f64>); 7] = [
            ("rejection_rate", s.rejection_rate, Some(s.rejection_mc_se)),
            ("bias", s.bias, Some(s.bias_mc_se)),
            ("rmse", s.rmse, None),
            ("var_mean", s.var_mean, Some(se_of_var_mean)),
            ("var_sd", s.var_sd, None),
            ("failures", s.failures as f64, None),
            ("clamped_variances", s.clamped as f64, None),
        ];
        for (metric, value, mc_se) in metrics {
            rows.push(vec![
                model.clone(),
                result.n_units.to_string(),
                s.test.label().to_string(),
                metric.to_string(),
                value.to_string(),
                mc_se.map(|v| v.to_string()).unwrap_or_default(),
            ]);
        }
    }
    RawTable {
        headers,
        rows,
    }
}

fn cmd_simulate(args: SimulateArgs, seed: u64) -> Result<()> {
    let spec = build_spec(&args.design, args.mu1)?;
    let tests = parse_tests(&args.tests)?;
    let (delta_null, delta_true) = resolve_nulls(
        &spec,
        args.delta0,
        args.delta_true,
        args.oracle_draws,
        seed,
    )?;
    let cfg = McConfig {
        spec,
        n_units: args.n_units,
        reps: args.reps as usize,
        tests,
        delta_null,
        delta_true,
        alpha: args.alpha,
        seed,
    };
    let result = run_mc(&cfg)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }
    eprintln!("seed: {seed}");
    write_output(args.out.as_deref(), &table_to_string(&mc_result_table(&result))?)
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be lo:hi:points, got {grid:?}");
    }
    let lo: f64 = parts[0].parse().context("grid lo")?;
    let hi: f64 = parts[1].parse().context("grid hi")?;
    let points: usize = parts[2].parse().context("grid points")?;
    if points < 1 || (points == 1 && lo != hi) || hi < lo {
        bail!("grid needs hi >= lo and at least one point");
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|k| lo + step * k as f64).collect())
}

fn cmd_power_curve(args: PowerCurveArgs, seed: u64) -> Result<()> {
    let spec = build_spec(&args.design, 0.0)?;
    let tests = parse_tests(&args.tests)?;
    let (delta_null, delta_true) =
        resolve_nulls(&spec, args.delta0, None, args.oracle_draws, seed)?;
    let cfg = McConfig {
        spec,
        n_units: args.n_units,
        reps: args.reps as usize,
        tests,
        delta_null,
        delta_true,
        alpha: args.alpha,
        seed,
    };
    let grid = parse_grid(&args.grid)?;
    let points = power_curve(&cfg, &grid)?;
    let headers = ["mu1", "test", "rejection_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = points
        .iter()
        .map(|p| {
            vec![
                p.mu1.to_string(),
                p.test.label().to_string(),
                p.rejection_rate.to_string(),
            ]
        })
        .collect();
    eprintln!("seed: {seed}");
    write_output(
        args.out.as_deref(),
        &table_to_string(&RawTable { headers, rows })?,
    )
}

fn cmd_delta0(args: Delta0Args, seed: u64) -> Result<()> {
    let spec = build_spec(&args.design, args.mu1)?;
    let est = delta0_oracle(&spec, args.draws, seed)?;
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}
