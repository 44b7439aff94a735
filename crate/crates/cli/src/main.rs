use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use striation::clustering::{default_k_range, select_k, to_dissimilarity};
use striation::densities::{collect_scores, fit_densities, AggregationMode, ScoreDensities, SMALL_SAMPLE_CAVEAT};
use striation::evaluation::{crossvalidate_matrix, length_sweep};
use striation::extraction::{crop, extract_signature, DEFAULT_SPAN};
use striation::likelihood::compare_marks;
use striation::profile_io::{extract_profile, load_scan, load_signature, save_scan, save_signature, ScanFormat};
use striation::similarity::{similarity_matrix, SimilarityMatrix};
use striation::synthgen::{calibrate, generate_dataset, manifest_csv, GeneratorConfig, Preset};
use striation::Signature;

const MANIFEST: &str = "manifest.csv";

#[derive(Parser)]
#[command(name = "striation", version, about = "Striated toolmark comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scan collection with ground-truth manifest.
    Synth {
        #[arg(long, default_value = "exp1")]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "grid-bin")]
        format: ScanFormat,
    },
    /// Turn scans into detrended signature CSVs.
    Extract {
        /// Scan files (.csv grid or .bin), or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which row to use, as a fraction of the scan height.
        #[arg(long, default_value_t = 0.5)]
        row: f64,
        /// Keep samples `[left, right)` of the profile.
        #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"])]
        crop: Option<Vec<usize>>,
        #[arg(long, default_value_t = DEFAULT_SPAN)]
        span: f64,
    },
    /// Score every pair of signatures.
    Similarity {
        /// Signature CSVs, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write `i,j,label_i,label_j,score` rows instead of a square matrix.
        #[arg(long)]
        long: bool,
    },
    /// Group marks by source with PAM, choosing k by silhouette.
    Cluster {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the silhouette-by-k curve.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit match and non-match score densities from a labeled matrix.
    Fit {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mode: ModeArgs,
        /// Also write the collected scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score two signatures and report the likelihood ratio.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Two-fold cross-validation, ROC and optional length sweep.
    Evaluate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mode: ModeArgs,
        /// Segment lengths in mm for the length sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<f64>,
        /// Model for the length sweep; fitted on the whole collection if absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Report the mean same-source and different-source scores of a preset.
    Calibrate {
        #[arg(long, default_value = "exp1")]
        preset: Preset,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModeArgs {
    /// source-averaged, naive or downsampled.
    #[arg(long, default_value = "source-averaged")]
    mode: String,
    /// Required by the downsampled mode.
    #[arg(long)]
    mode_seed: Option<u64>,
}

impl ModeArgs {
    fn resolve(&self) -> Result<AggregationMode> {
        AggregationMode::from_parts(&self.mode, self.mode_seed).map_err(anyhow::Error::msg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth { preset, seed, out, format } => synth(preset, seed, &out, format),
        Command::Extract { inputs, out, row, crop, span } => extract(&inputs, &out, row, crop.as_deref(), span),
        Command::Similarity { inputs, out, long } => {
            let sim = similarity_matrix(&load_signatures(&inputs)?)?;
            write(&out, if long { sim.to_long_csv() } else { sim.to_csv() })
        }
        Command::Cluster { matrix, out, curve, k_min, k_max, seed } => {
            cluster(&matrix, &out, curve.as_deref(), k_min, k_max, seed)
        }
        Command::Fit { matrix, out, mode, scores } => fit(&matrix, &out, mode.resolve()?, scores.as_deref()),
        Command::Compare { a, b, model, json } => compare(&a, &b, &model, json),
        Command::Evaluate { inputs, out, mode, lengths, model } => {
            evaluate(&inputs, &out, mode.resolve()?, &lengths, model.as_deref())
        }
        Command::Calibrate { preset, seed } => {
            let report = calibrate(&GeneratorConfig::preset(preset, seed))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Expands directories to their files with one of `extensions`, sorted by name.
fn expand(inputs: &[PathBuf], extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| extensions.contains(&e))
                    && p.file_name().is_some_and(|n| n != MANIFEST)
            });
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!("no input files found");
    }
    Ok(files)
}

fn load_signatures(inputs: &[PathBuf]) -> Result<Vec<Signature>> {
    let files = expand(inputs, &["csv"])?;
    info!("loading {} signatures", files.len());
    files.iter().map(|p| Ok(load_signature(p)?)).collect()
}

fn load_matrix(path: &Path) -> Result<SimilarityMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SimilarityMatrix::from_csv(&text)?)
}

fn synth(preset: Preset, seed: u64, out: &Path, format: ScanFormat) -> Result<()> {
    let config = GeneratorConfig::preset(preset, seed);
    let scans = generate_dataset(&config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ext = match format {
        ScanFormat::GridBin => "bin",
        ScanFormat::GridCsv => "csv",
    };
    let names: Vec<String> = scans.iter().map(|s| format!("{}.{ext}", s.meta())).collect();
    for (scan, name) in scans.iter().zip(&names) {
        save_scan(scan, &out.join(name), format)?;
    }
    write(&out.join(MANIFEST), manifest_csv(&scans, &names))?;
    println!("wrote {} scans to {}", scans.len(), out.display());
    Ok(())
}

fn extract(inputs: &[PathBuf], out: &Path, row: f64, window: Option<&[usize]>, span: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&row) {
        bail!("--row must be in [0, 1], got {row}");
    }
    let files = expand(inputs, &["csv", "bin", "stri"])?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for path in &files {
        let format =
            ScanFormat::from_path(path).with_context(|| format!("unknown scan extension: {}", path.display()))?;
        let mut profile = extract_profile(&load_scan(path, format)?, row);
        if let Some(&[left, right]) = window {
            profile = crop(&profile, left, right)?;
        }
        let sig = extract_signature(&profile, span).with_context(|| format!("extracting {}", path.display()))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("signature");
        save_signature(&sig, &out.join(format!("{stem}.csv")))?;
    }
    println!("wrote {} signatures to {}", files.len(), out.display());
    Ok(())
}

fn cluster(
    matrix: &Path,
    out: &Path,
    curve: Option<&Path>,
    k_min: Option<usize>,
    k_max: Option<usize>,
    seed: u64,
) -> Result<()> {
    let sim = load_matrix(matrix)?;
    let (lo, hi) = default_k_range(sim.len());
    let d = to_dissimilarity(&sim);
    let (k, clustering, report) = select_k(&d, k_min.unwrap_or(lo), k_max.unwrap_or(hi), seed)?;
    write(out, clustering.to_csv(sim.labels(), &report))?;
    if let Some(path) = curve {
        write(path, report.curve_csv())?;
    }
    println!("k = {k}, mean silhouette = {:.4}", clustering.mean_silhouette);
    Ok(())
}

fn fit(matrix: &Path, out: &Path, mode: AggregationMode, scores: Option<&Path>) -> Result<()> {
    let sample = collect_scores(&load_matrix(matrix)?, mode)?;
    if sample.is_small() {
        eprintln!("{SMALL_SAMPLE_CAVEAT}");
    }
    if let Some(path) = scores {
        write(path, sample.to_csv())?;
    }
    let model = fit_densities(&sample)?;
    write(out, model.to_json())?;
    println!("{mode}: {} match / {} non-match scores, threshold {:.4}", model.n_km, model.n_knm, model.threshold);
    Ok(())
}

fn load_model(path: &Path) -> Result<ScoreDensities> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ScoreDensities::from_json(&text)?)
}

fn compare(a: &Path, b: &Path, model: &Path, json: bool) -> Result<()> {
    let model = load_model(model)?;
    let (_, result) = compare_marks(&load_signature(a)?, &load_signature(b)?, &model)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("score      {:.6}", result.score);
        println!("LR         {:.6e}", result.lr);
        println!("log10 LR   {:.4}", result.log10_lr);
        println!("decision   {}", result.decision);
        println!("verbal     {}", result.verbal);
    }
    Ok(())
}

fn evaluate(
    inputs: &[PathBuf],
    out: &Path,
    mode: AggregationMode,
    lengths: &[f64],
    model: Option<&Path>,
) -> Result<()> {
    let sigs = load_signatures(inputs)?;
    info!("scoring {} signatures", sigs.len());
    let sim = similarity_matrix(&sigs)?;
    let mut report = crossvalidate_matrix(&sim, mode)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !lengths.is_empty() {
        let model = match model {
            Some(path) => load_model(path)?,
            None => fit_densities(&collect_scores(&sim, mode)?)?,
        };
        let sweep = length_sweep(&sigs, &model, lengths)?;
        write(&out.join("length_sweep.csv"), sweep.to_csv())?;
        write(&out.join("placements.csv"), sweep.placements_csv())?;
        report = report.with_length_sweep(sweep);
    }
    write(&out.join("report.json"), report.to_json())?;
    write(&out.join("roc.csv"), report.roc_csv())?;
    write(&out.join("per_fold.csv"), report.per_fold_csv())?;
    print!("{}", report.summary_table());
    Ok(())
}
