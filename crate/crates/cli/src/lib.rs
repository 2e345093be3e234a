//! Command-line front end for the `anomret` retrieval-fusion library.
//!
//! [`run`] parses arguments, dispatches to a subcommand and maps the outcome
//! to an exit code: 0 on success, 1 on validation or format errors, 2 on
//! usage errors. Worker threads follow `RAYON_NUM_THREADS`.

pub mod checks;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use anomret::ensemble::MetricKind;
use anomret::io::{
    load_embeddings, load_ground_truth, load_manifest, load_scores, write_manifest, write_matrix_auto,
    Manifest, ModelEntry,
};
use anomret::lhp::LhpSampler;
use anomret::losses::LossKind;
use anomret::synth::{gen_model_scores, gen_paired_embeddings, SynthConfig};
use anomret::{
    cosine_similarity, iterative_ensemble, metrics_report, rerank_selected, select_topk_features, EnsembleConfig,
    ScoreMatrix, WeightGrid,
};

#[derive(Debug, Parser)]
#[command(name = "anomret", version, about = "Score-matrix retrieval fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cosine similarity between text and image embeddings.
    Sim {
        /// Query embeddings, one row per text.
        #[arg(long)]
        text: PathBuf,
        /// Gallery embeddings, one row per image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K of a score matrix against a ground-truth manifest.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
    },
    /// Iterative weighted fusion of the model matrices in a manifest.
    Ensemble {
        #[arg(long)]
        manifest: PathBuf,
        /// Ground truth to tune against; defaults to the manifest's own.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Extra models appended after the manifest's, as NAME=PATH.
        #[arg(long = "model", value_name = "NAME=PATH")]
        models: Vec<String>,
        /// Comma-separated fusion weights in [0, 1].
        #[arg(long)]
        grid: Option<WeightGrid>,
        /// Cutoff of the Recall@K tuning metric.
        #[arg(long, default_value_t = 1)]
        metric_k: usize,
        /// Depth of the ranking the metric is evaluated on.
        #[arg(long)]
        k_pred: Option<usize>,
        /// Fuse raw scores instead of min-max normalized ones.
        #[arg(long)]
        no_normalize: bool,
        /// Starting fused matrix instead of zeros.
        #[arg(long)]
        init_matrix: Option<PathBuf>,
        /// Fused score matrix output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trace report output; printed to stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Top-k gallery candidates per query under a guidance matrix.
    Select {
        /// Gallery features, one row per image.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        guidance: PathBuf,
        #[arg(long, default_value_t = anomret::select::DEFAULT_SELECT_K)]
        k: usize,
        /// Selected gallery indices, queries x k.
        #[arg(long)]
        out: PathBuf,
        /// Matcher scores on the selected candidates, queries x k.
        #[arg(long, requires = "fused_out")]
        match_scores: Option<PathBuf>,
        /// Full reranked score matrix built from --match-scores.
        #[arg(long, requires = "match_scores")]
        fused_out: Option<PathBuf>,
    },
    /// Loss examples plus randomized finite-difference gradient checks.
    LossesCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Local/global routing decisions as `index,value,branch` lines.
    LhpSample {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded synthetic embeddings, model score matrices and manifest.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_items: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        /// Per-model probability of ranking the true match first.
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.7")]
        skill: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match dispatch(cli.command, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            1
        }
    }
}

// Library errors already embed their cause in the message.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn dispatch(cmd: Command, out: &mut dyn std::io::Write) -> anyhow::Result<i32> {
    match cmd {
        Command::Sim { text, image, out: path } => {
            let s = cosine_similarity(&load_embeddings(&text)?, &load_embeddings(&image)?)?;
            write_matrix_auto(&s, &path)?;
        }
        Command::Eval { scores, gt, k } => {
            let s = load_scores(&scores)?;
            let gt = load_ground_truth(&gt)?;
            out.write_all(eval_report(&s, &gt, &k)?.as_bytes())?;
        }
        Command::Ensemble {
            manifest,
            gt,
            models,
            grid,
            metric_k,
            k_pred,
            no_normalize,
            init_matrix,
            out: fused_path,
            trace,
        } => {
            let m = load_manifest(&manifest)?;
            let gt = match gt {
                Some(p) => load_ground_truth(&p)?,
                None => m.ground_truth().with_context(|| manifest.display().to_string())?,
            };
            let mut entries = m.models;
            for spec in &models {
                let Some((name, path)) = spec.split_once('=') else {
                    bail!("--model expects NAME=PATH, got {spec:?}");
                };
                entries.push(ModelEntry {
                    name: name.to_owned(),
                    path: PathBuf::from(path),
                });
            }
            if entries.is_empty() {
                bail!("{}: no models to ensemble", manifest.display());
            }
            let matrices = entries
                .iter()
                .map(|e| load_scores(&e.path))
                .collect::<anomret::Result<Vec<_>>>()?;
            let config = EnsembleConfig {
                grid: grid.unwrap_or_default(),
                metric: MetricKind::RecallAtK(metric_k),
                k_pred,
                normalize: !no_normalize,
                init: init_matrix.as_deref().map(load_scores).transpose()?,
            };
            let result = iterative_ensemble(&matrices, &gt, &config)?;
            let names: Vec<String> = entries.into_iter().map(|e| e.name).collect();
            let report = result.trace.render(Some(&names));
            if let Some(p) = fused_path {
                write_matrix_auto(&result.fused, &p)?;
            }
            match trace {
                Some(p) => write_text(&p, &report)?,
                None => out.write_all(report.as_bytes())?,
            }
        }
        Command::Select {
            features,
            guidance,
            k,
            out: path,
            match_scores,
            fused_out,
        } => {
            let features = load_embeddings(&features)?;
            let guidance = load_scores(&guidance)?;
            let selected = select_topk_features(&features, &guidance, k)?;
            let indices: Vec<f64> = (0..selected.n_queries())
                .flat_map(|q| selected.indices(q))
                .map(|g| g as f64)
                .collect();
            write_matrix_auto(&ScoreMatrix::new(selected.n_queries(), k, indices)?, &path)?;
            if let (Some(m), Some(f)) = (match_scores, fused_out) {
                let fused = rerank_selected(&selected, &load_scores(&m)?)?;
                write_matrix_auto(&fused, &f)?;
            }
        }
        Command::LossesCheck { seed, instances } => {
            let (report, ok) = losses_report(seed, instances)?;
            out.write_all(report.as_bytes())?;
            return Ok(if ok { 0 } else { 1 });
        }
        Command::LhpSample { seed, count, out: path } => {
            let mut text = String::with_capacity(count * 32);
            let mut sampler = LhpSampler::new(seed);
            for i in 0..count {
                let d = sampler.next_decision();
                writeln!(text, "{i},{},{}", d.sampled_value, d.branch.as_str())?;
            }
            match path {
                Some(p) => write_text(&p, &text)?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::Synth {
            n_items,
            dim,
            noise,
            seed,
            skill,
            out_dir,
        } => {
            let cfg = SynthConfig {
                n_items,
                dim,
                noise_sigma: noise,
                seed,
                model_skill: skill,
            };
            write_synth(&cfg, &out_dir)?;
        }
    }
    Ok(0)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("{}: cannot write", path.display()))
}

/// Recall report for the requested cutoffs. Cutoffs beyond the gallery are
/// clipped to it, keep their requested label and produce a warning.
pub fn eval_report(s: &ScoreMatrix, gt: &anomret::GroundTruth, ks: &[usize]) -> anyhow::Result<String> {
    let gallery = s.n_cols();
    let mut requested = ks.to_vec();
    requested.sort_unstable();
    requested.dedup();
    for &k in &requested {
        if k > gallery {
            eprintln!("warning: k={k} exceeds gallery size {gallery}; clipped to {gallery}");
        }
    }
    let clipped: Vec<usize> = requested.iter().map(|&k| k.min(gallery)).collect();
    let metrics = metrics_report(s, gt, &clipped)?;
    let mut text = format!("queries={}\n", metrics.n_queries);
    for (&k, &c) in requested.iter().zip(&clipped) {
        let r = metrics.recall(c).expect("every clipped cutoff is reported");
        writeln!(text, "R@{k}={r:.4}")?;
    }
    Ok(text)
}

/// Loss example and gradient-check report, one PASS/FAIL line each.
pub fn losses_report(seed: u64, instances: usize) -> anyhow::Result<(String, bool)> {
    let mut text = String::new();
    let mut ok = true;
    for e in checks::loss_examples()? {
        let pass = e.passed();
        ok &= pass;
        writeln!(
            text,
            "{} example {} value={:.10} expected={}{}",
            verdict(pass),
            e.name,
            e.value,
            if e.upper_bound { "<=" } else { "" },
            e.expected
        )?;
    }
    for kind in [LossKind::Itc, LossKind::Itm, LossKind::Mlm, LossKind::Mim] {
        let s = checks::grad_check_random(kind, instances, seed)?;
        ok &= s.passed();
        writeln!(
            text,
            "{} gradcheck {} instances={} max_rel_err={:.3e}",
            verdict(s.passed()),
            checks::kind_name(kind),
            s.instances,
            s.worst
        )?;
    }
    Ok((text, ok))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Writes `text.npy`, `image.npy`, `model_<m>.npy`, `gt.json` and a
/// `manifest.json` listing the models.
pub fn write_synth(cfg: &SynthConfig, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))?;
    let pair = gen_paired_embeddings(cfg)?;
    let scores = gen_model_scores(cfg)?;
    write_matrix_auto(&pair.text, &dir.join("text.npy"))?;
    write_matrix_auto(&pair.image, &dir.join("image.npy"))?;
    let mut manifest = Manifest::from_ground_truth(&pair.gt);
    write_manifest(&manifest, &dir.join("gt.json"))?;
    for (m, s) in scores.iter().enumerate() {
        let file = format!("model_{m}.npy");
        write_matrix_auto(s, &dir.join(&file))?;
        manifest.models.push(ModelEntry {
            name: format!("model_{m}"),
            path: PathBuf::from(file),
        });
    }
    write_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(())
}
