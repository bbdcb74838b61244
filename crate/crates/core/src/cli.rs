//! The `mmdn` command line: encode, search, eval, verify and train.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    read_manifest, read_pts, record_key, save_gray_png, write_pts, Affine2, AnnotationRecord,
};
use crate::error::{Error, Result};
use crate::heatmap::dump::{read_stack, write_stack};
use crate::heatmap::{encode_targets, BoundaryScheme, Heatmap, BOUNDARY_COUNT};
use crate::landmarks::{LandmarkSet, Scheme};
use crate::metrics::{nme, EvalReport, Normalization};
use crate::network::checkpoint;
use crate::network::train::{alternate_optimize, evaluate, mean, Dataset, Decode, StepRecord};
use crate::network::NetworkState;
use crate::search::decode_with_search;
use crate::verify::{self, Suite};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "MMDN_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "mmdn",
    version,
    about = "Facial landmark heatmap tools: encode, search, evaluate, verify, train"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Dotted config override, e.g. `--set search.window=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes landmark and boundary heatmaps for every manifest record.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        /// Expected landmark scheme; inferred from the annotations otherwise.
        #[arg(long)]
        scheme: Option<Scheme>,
    },
    /// Decodes heatmap dumps by plain argmax and by windowed search.
    Search {
        /// Directory of `.hm` dumps as written by `encode`.
        #[arg(long)]
        heatmaps: PathBuf,
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Shortcut for `--set search.window=N`.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Scores `.pts` predictions against a manifest, joined by file stem.
    Eval {
        /// Prediction files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Shortcut for `--set eval.normalization=...`.
        #[arg(long)]
        normalization: Option<Normalization>,
    },
    /// Runs oracle and invariant suites; exits non-zero on any failure.
    Verify {
        #[arg(default_value = "all")]
        suite: Suite,
        /// Shortcut for `--set verify.ns_iterations=K`.
        #[arg(long)]
        ns_iterations: Option<usize>,
    },
    /// Desk-scale alternating optimization; writes a checkpoint.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shortcut for `--set train.iterations=N` (total, counting resumed
        /// iterations).
        #[arg(long)]
        iterations: Option<u64>,
        /// Stop after this iteration without changing the schedule, as if
        /// interrupted.
        #[arg(long)]
        until: Option<u64>,
    },
}

impl Cli {
    /// `--set` overrides followed by the subcommand shortcuts and `--seed`.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        match &self.command {
            Command::Search {
                window: Some(w), ..
            } => o.push(format!("search.window={w}")),
            Command::Eval {
                normalization: Some(n),
                ..
            } => o.push(format!("eval.normalization=\"{}\"", normalization_name(*n))),
            Command::Verify {
                ns_iterations: Some(k),
                ..
            } => o.push(format!("verify.ns_iterations={k}")),
            Command::Train {
                iterations: Some(n),
                ..
            } => o.push(format!("train.iterations={n}")),
            _ => {}
        }
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::InterPupil => "inter_pupil",
        Normalization::InterOcular => "inter_ocular",
        Normalization::FaceSize => "face_size",
    }
}

/// Sizes the global worker pool from [`WORKERS_ENV`] if set.
pub fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(format!(
            "{WORKERS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Entry point behind `main`.
pub fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    mkdir(&cli.out)?;
    let resolved = cfg.to_toml();
    write(&cli.out.join("resolved.toml"), &resolved)?;
    info!("resolved config:\n{resolved}");
    match &cli.command {
        Command::Encode { manifest, scheme } => cmd_encode(&cfg, manifest, *scheme, &cli.out),
        Command::Search {
            heatmaps, scheme, ..
        } => cmd_search(&cfg, heatmaps, *scheme, &cli.out),
        Command::Eval { pred, manifest, .. } => cmd_eval(&cfg, pred, manifest, &cli.out),
        Command::Verify { suite, .. } => cmd_verify(&cfg, *suite, &cli.out),
        Command::Train { resume, until, .. } => {
            cmd_train(&cfg, resume.as_deref(), *until, &cli.out)
        }
    }
}

fn unique_keys<'a>(keys: impl Iterator<Item = (String, &'a Path)>) -> Result<()> {
    let mut seen: HashMap<String, &Path> = HashMap::new();
    for (k, p) in keys {
        if let Some(prev) = seen.insert(k.clone(), p) {
            return Err(Error::contract(format!(
                "record key `{k}` appears twice ({} and {})",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

struct Encoded {
    key: String,
    maps: Vec<Heatmap>,
    landmarks: LandmarkSet,
}

/// Maps of one record in the frame of its face box resized to
/// `size × size`.
fn encode_record(
    r: &AnnotationRecord,
    boundaries: &BoundaryScheme,
    size: usize,
    cfg: &RunConfig,
) -> Result<Encoded> {
    let landmarks = Affine2::crop(&r.bbox, size).apply_set(&r.landmarks);
    let enc = encode_targets(&landmarks, boundaries, size, size, &cfg.encode)?;
    let mut maps = enc.landmarks;
    maps.extend(enc.boundaries);
    Ok(Encoded {
        key: r.key(),
        maps,
        landmarks,
    })
}

pub fn cmd_encode(
    cfg: &RunConfig,
    manifest: &Path,
    scheme: Option<Scheme>,
    out: &Path,
) -> Result<()> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        warn!(
            "{}: manifest has no records, nothing to encode",
            manifest.display()
        );
        return Ok(());
    }
    let found = records[0].landmarks.scheme;
    if let Some(r) = records
        .iter()
        .find(|r| r.landmarks.scheme != scheme.unwrap_or(found))
    {
        return Err(Error::contract(format!(
            "{}: {} landmarks, expected scheme {}",
            r.pts_path.display(),
            r.landmarks.len(),
            scheme.unwrap_or(found)
        )));
    }
    unique_keys(records.iter().map(|r| (r.key(), r.pts_path.as_path())))?;
    let boundaries = BoundaryScheme::builtin(found)?;
    let size = cfg.network.heatmap_size;
    let encoded = records
        .par_iter()
        .map(|r| encode_record(r, &boundaries, size, cfg))
        .collect::<Result<Vec<_>>>()?;

    let dir = out.join("encode");
    mkdir(&dir)?;
    let landmark_count = found.count();
    for e in &encoded {
        write_stack(&dir.join(format!("{}.hm", e.key)), &e.maps)?;
        write(&dir.join(format!("{}.pts", e.key)), write_pts(&e.landmarks))?;
        let png_dir = dir.join(&e.key);
        mkdir(&png_dir)?;
        for (i, m) in e.maps.iter().enumerate() {
            let name = if i < landmark_count {
                format!("landmark_{i:03}.png")
            } else {
                format!("boundary_{:02}.png", i - landmark_count)
            };
            save_gray_png(&png_dir.join(name), &m.values, m.width, m.height)?;
        }
    }
    info!(
        "encoded {} records, {} maps each, into {}",
        encoded.len(),
        landmark_count + BOUNDARY_COUNT,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

struct Decoded {
    key: String,
    argmax: Vec<(usize, usize)>,
    searched: Vec<(usize, usize)>,
    truth: Option<LandmarkSet>,
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn decode_dump(path: &Path, scheme: Option<Scheme>, cfg: &RunConfig) -> Result<Decoded> {
    let maps = read_stack(path)?;
    let scheme = match scheme {
        Some(s) => s,
        None if maps.len() > BOUNDARY_COUNT => Scheme::from_count(maps.len() - BOUNDARY_COUNT),
        None => {
            return Err(Error::contract(format!(
                "{}: {} maps cannot hold landmarks plus {BOUNDARY_COUNT} boundaries",
                path.display(),
                maps.len()
            )))
        }
    };
    let boundaries = BoundaryScheme::builtin(scheme)?;
    let l = scheme.count();
    let (mut argmax, mut searched) = (Vec::with_capacity(l), Vec::with_capacity(l));
    for i in 0..l {
        let t = boundaries.boundary_of(i).ok_or_else(|| {
            Error::contract(format!("landmark {i} has no boundary in scheme {scheme}"))
        })?;
        let (h, b) = match (maps.get(i), maps.get(l + t)) {
            (Some(h), Some(b)) => (h, b),
            _ => {
                return Err(Error::contract(format!(
                    "{}: landmark {i} needs boundary channel {t}, but the dump has {} maps",
                    path.display(),
                    maps.len()
                )))
            }
        };
        let (g_tilde, g_hat) = decode_with_search(h, b, &cfg.search)?;
        argmax.push(g_tilde);
        searched.push(g_hat);
    }
    let truth_path = path.with_extension("pts");
    let truth = truth_path
        .exists()
        .then(|| read_pts(&truth_path))
        .transpose()?;
    if let Some(t) = &truth {
        if t.len() != l {
            return Err(Error::contract(format!(
                "{}: {} points, expected {l}",
                truth_path.display(),
                t.len()
            )));
        }
    }
    Ok(Decoded {
        key: record_key(path),
        argmax,
        searched,
        truth,
    })
}

fn as_set(points: &[(usize, usize)]) -> Result<LandmarkSet> {
    LandmarkSet::from_points(points.iter().map(|&(x, y)| [x as f64, y as f64]).collect())
}

fn pixel_error(p: (usize, usize), q: [f64; 2]) -> f64 {
    (p.0 as f64 - q[0]).hypot(p.1 as f64 - q[1])
}

pub fn cmd_search(
    cfg: &RunConfig,
    heatmaps: &Path,
    scheme: Option<Scheme>,
    out: &Path,
) -> Result<()> {
    let files = files_with_extension(heatmaps, "hm")?;
    if files.is_empty() {
        warn!("{}: no .hm heatmap dumps found", heatmaps.display());
    }
    let decoded = files
        .par_iter()
        .map(|p| decode_dump(p, scheme, cfg))
        .collect::<Result<Vec<_>>>()?;

    let dir = out.join("search");
    mkdir(&dir)?;
    let mut table = String::from("key\tlandmark\targmax_x\targmax_y\tsearch_x\tsearch_y\tshift\targmax_error\tsearch_error\n");
    let mut summary = String::from(
        "key\tmean_shift\tmean_argmax_error\tmean_search_error\tsearch_minus_argmax\n",
    );
    for d in &decoded {
        write(
            &dir.join(format!("{}.argmax.pts", d.key)),
            write_pts(&as_set(&d.argmax)?),
        )?;
        write(
            &dir.join(format!("{}.search.pts", d.key)),
            write_pts(&as_set(&d.searched)?),
        )?;
        let (mut shift, mut ea, mut es) = (0.0, 0.0, 0.0);
        for (i, (&a, &s)) in d.argmax.iter().zip(&d.searched).enumerate() {
            let moved = pixel_error(a, [s.0 as f64, s.1 as f64]);
            shift += moved;
            let errs = d
                .truth
                .as_ref()
                .map(|t| (pixel_error(a, t.points[i]), pixel_error(s, t.points[i])));
            let cell = |e: Option<f64>| e.map_or(String::new(), |v| format!("{v}"));
            writeln!(
                table,
                "{}\t{i}\t{}\t{}\t{}\t{}\t{moved}\t{}\t{}",
                d.key,
                a.0,
                a.1,
                s.0,
                s.1,
                cell(errs.map(|e| e.0)),
                cell(errs.map(|e| e.1))
            )
            .expect("string write");
            if let Some((x, y)) = errs {
                ea += x;
                es += y;
            }
        }
        let n = d.argmax.len() as f64;
        if d.truth.is_some() {
            writeln!(
                summary,
                "{}\t{}\t{}\t{}\t{}",
                d.key,
                shift / n,
                ea / n,
                es / n,
                (es - ea) / n
            )
        } else {
            writeln!(summary, "{}\t{}\t\t\t", d.key, shift / n)
        }
        .expect("string write");
    }
    write(&dir.join("comparison.tsv"), &table)?;
    write(&dir.join("summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn prediction_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(files_with_extension(p, "pts")?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "prediction not found"),
            ));
        }
    }
    Ok(files)
}

pub fn cmd_eval(cfg: &RunConfig, pred: &[PathBuf], manifest: &Path, out: &Path) -> Result<()> {
    let records = read_manifest(manifest)?;
    unique_keys(records.iter().map(|r| (r.key(), r.pts_path.as_path())))?;
    let files = prediction_files(pred)?;
    unique_keys(files.iter().map(|p| (record_key(p), p.as_path())))?;
    if files.len() != records.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth records",
            files.len(),
            records.len()
        )));
    }
    let by_key: BTreeMap<String, &PathBuf> = files.iter().map(|p| (record_key(p), p)).collect();
    let norm = cfg.eval.normalization;
    let per_image = records
        .par_iter()
        .map(|r| {
            let key = r.key();
            let path = by_key
                .get(&key)
                .ok_or_else(|| Error::contract(format!("no prediction for record `{key}`")))?;
            nme(&read_pts(path)?, &r.landmarks, norm, Some(&r.bbox))
        })
        .collect::<Result<Vec<_>>>()?;
    if per_image.is_empty() {
        return Err(Error::contract(
            "nothing to evaluate: the manifest is empty",
        ));
    }
    let report = EvalReport::new(per_image, norm, cfg.eval.ced_max, cfg.eval.ced_steps)?;
    write(&out.join("report.toml"), report.to_toml())?;
    write(&out.join("ced.txt"), report.ced_table())?;
    println!(
        "images {} mean_nme {} failure_rate {} ({})",
        report.per_image_nme.len(),
        report.mean_nme,
        report.failure_rate,
        normalization_name(norm)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn cmd_verify(cfg: &RunConfig, suite: Suite, out: &Path) -> Result<()> {
    let report = verify::run(suite, &cfg.verify, cfg.seed)?;
    for c in &report.checks {
        println!("{c}");
    }
    write(&out.join("verify.toml"), report.to_toml())?;
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Error::Verification(format!(
            "{failed} of {} checks failed",
            report.checks.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary {
    start_iteration: u64,
    end_iteration: u64,
    start_nme: f64,
    final_nme: f64,
    final_nme_search: f64,
    ratio: f64,
}

fn load_dataset(
    manifest: Option<&Path>,
    count: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<Dataset> {
    match manifest {
        Some(p) => Dataset::from_records(&read_manifest(p)?, &cfg.network, &cfg.encode),
        None => Dataset::synthetic(count, seed, &cfg.network, &cfg.encode),
    }
}

/// Seed of the batch order; kept apart from the initialization stream.
pub fn batch_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    until: Option<u64>,
    out: &Path,
) -> Result<()> {
    let tc = &cfg.train;
    let train = load_dataset(
        cfg.data.train_manifest.as_deref(),
        tc.train_samples,
        cfg.data.synthetic_seed,
        cfg,
    )?;
    let test = load_dataset(
        cfg.data.test_manifest.as_deref(),
        tc.test_samples,
        cfg.data.test_seed,
        cfg,
    )?;
    let mut state = match resume {
        Some(p) => checkpoint::load(p, &cfg.network)?,
        None => NetworkState::build(cfg.network.clone(), cfg.seed)?,
    };
    let start = state.iteration;
    let end = until.unwrap_or(tc.iterations).min(tc.iterations);
    if start > end {
        return Err(Error::config(format!(
            "checkpoint is at iteration {start}, past the requested end {end}"
        )));
    }
    info!(
        "training {} parameters on {} samples, iterations {start}..{end} of {}",
        state.parameter_count(),
        train.len(),
        tc.iterations
    );
    let start_nme = mean(&evaluate(&state, &test, Decode::Argmax)?);
    info!("iteration {start} test_nme {start_nme}");

    let mut loss_log = String::from("iteration\tloss\tlr\n");
    let mut nme_log = format!("iteration\ttest_nme\n{start}\t{start_nme}\n");
    let mut observer = |s: &NetworkState, r: &StepRecord| -> Result<()> {
        writeln!(loss_log, "{}\t{}\t{}", r.iteration, r.loss, r.lr).expect("string write");
        info!("iteration {} loss {} lr {}", r.iteration, r.loss, r.lr);
        let done = r.iteration + 1;
        if tc.eval_every > 0 && done.is_multiple_of(tc.eval_every) && done < end {
            let e = mean(&evaluate(s, &test, Decode::Argmax)?);
            writeln!(nme_log, "{done}\t{e}").expect("string write");
            info!("iteration {done} test_nme {e}");
        }
        Ok(())
    };
    alternate_optimize(
        &mut state,
        &train,
        tc,
        batch_seed(cfg.seed),
        end - start,
        &mut observer,
    )?;

    let final_nme = mean(&evaluate(&state, &test, Decode::Argmax)?);
    let final_nme_search = mean(&evaluate(&state, &test, Decode::Search(cfg.search))?);
    writeln!(nme_log, "{}\t{final_nme}", state.iteration).expect("string write");
    info!(
        "iteration {} test_nme {final_nme} (searched {final_nme_search})",
        state.iteration
    );

    checkpoint::save(&state, &out.join("checkpoint.bin"))?;
    write(&out.join("train_log.tsv"), &loss_log)?;
    write(&out.join("nme_log.tsv"), &nme_log)?;
    let summary = TrainSummary {
        start_iteration: start,
        end_iteration: state.iteration,
        start_nme,
        final_nme,
        final_nme_search,
        ratio: final_nme / start_nme,
    };
    write(
        &out.join("train_summary.toml"),
        toml::to_string(&summary).expect("summary serializes"),
    )?;
    println!(
        "start_nme {start_nme} final_nme {final_nme} ratio {}",
        summary.ratio
    );
    Ok(())
}
