use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fpindex::eval::{evaluate, Backend, EvalConfig, ExactBackend, PqBackend, RerankBackend};
use fpindex::experiments::{run_experiment, ExperimentManifest};
use fpindex::gallery::{enroll_manifest, parse_manifest, read_minutiae_file, read_probe_file, Gallery};
use fpindex::matcher::{minutiae_score, MatchConfig};
use fpindex::minutiae::{decode_map, encode_map, DecodeOptions, EncodeOptions, MinutiaeMap};
use fpindex::pq::{PqIndex, TrainConfig};
use fpindex::rerank::{fused_verify, FusionConfig, Normalization, Retriever, Stage1};
use fpindex::search::{CandidateList, SearchIndex};
use fpindex::synth::{generate, SynthConfig, DEFAULT_NOISE_SIGMA, DEFAULT_QUALITY_SPREAD};
use fpindex::template::cosine_score;
use fpindex::Error;

#[derive(Parser)]
#[command(name = "fpindex", version, about = "Fixed-length fingerprint template search")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enroll templates listed in a manifest into a gallery file.
    Enroll(EnrollArgs),
    /// Exhaustive top-k search, optionally re-ranked by minutiae.
    Search(SearchArgs),
    /// Train a product quantizer on a gallery and encode it.
    PqTrain(PqTrainArgs),
    /// Top-k search over a PQ index, optionally re-ranked by minutiae.
    PqSearch(PqSearchArgs),
    /// Score one template pair.
    Verify(VerifyArgs),
    /// Minutiae map codec.
    Mmap {
        #[command(subcommand)]
        op: MmapCommand,
    },
    /// Synthetic benchmark report, or run an experiment manifest.
    Bench(BenchArgs),
    /// Write a synthetic gallery and probe set.
    Synth(SynthArgs),
}

#[derive(Args)]
struct EnrollArgs {
    /// Lines of `subject_id finger template [minutiae]`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Add to an existing gallery instead of creating a new one.
    #[arg(long)]
    append: bool,
}

#[derive(Args)]
struct RerankArgs {
    /// Re-rank the k candidates by minutiae + template score.
    #[arg(long, requires = "minutiae")]
    rerank: bool,
    /// Probe minutiae file, required with --rerank.
    #[arg(long)]
    minutiae: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Fusion::None)]
    fusion: Fusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    None,
    Minmax,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    rerank: RerankArgs,
    /// Write the candidate list here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PqTrainArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 256)]
    z: usize,
}

#[derive(Args)]
struct PqSearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    rerank: RerankArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Minutiae of `a`; with --minutiae-b the score is fused.
    #[arg(long, requires = "minutiae_b")]
    minutiae_a: Option<PathBuf>,
    #[arg(long, requires = "minutiae_a")]
    minutiae_b: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MmapCommand {
    /// Render a minutiae file into a map.
    Encode {
        #[arg(long)]
        minutiae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fpindex::minutiae::MAP_SIZE)]
        size: u32,
        #[arg(long, default_value_t = fpindex::minutiae::DEFAULT_SIGMA)]
        sigma: f64,
        /// Square the orientation difference.
        #[arg(long)]
        squared_orientation: bool,
    },
    /// Recover minutiae (map coordinates unless --image-size is given).
    Decode {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fpindex::minutiae::DEFAULT_PEAK_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = fpindex::minutiae::DEFAULT_NMS_RADIUS)]
        radius: f64,
        /// Rescale decoded minutiae onto a square image frame of this size.
        #[arg(long)]
        image_size: Option<u32>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Exact,
    Pq,
    Rerank,
}

#[derive(Args)]
struct BenchArgs {
    /// Run an experiment manifest and print observed versus expected.
    #[arg(long, conflicts_with_all = ["n", "report"])]
    manifest: Option<PathBuf>,
    /// Gallery size.
    #[arg(long, required_unless_present = "manifest")]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = BackendKind::Exact)]
    backend: BackendKind,
    /// JSON report path.
    #[arg(long, required_unless_present = "manifest")]
    report: Option<PathBuf>,
    /// Probe count (default: min(n, 1000)).
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise: f64,
    #[arg(long, default_value_t = DEFAULT_QUALITY_SPREAD)]
    quality_spread: f64,
    #[arg(long, default_value_t = 100)]
    max_rank: usize,
    #[arg(long, default_value_t = 500)]
    rerank_k: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    probes: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise: f64,
    #[arg(long, default_value_t = DEFAULT_QUALITY_SPREAD)]
    quality_spread: f64,
    /// Output directory: gallery.dpgl, probes/, probes.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .expect("global pool is configured once");
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

type CliResult = Result<ExitCode, Error>;

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| io_err("<stdout>", e))
        }
    }
}

fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

/// Prefixes non-I/O errors with the file they came from.
fn in_file<T>(path: &Path, r: Result<T, Error>) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    })
}

fn shards() -> usize {
    rayon::current_num_threads()
}

fn fusion_config(k: usize, args: &RerankArgs, backend: Stage1) -> FusionConfig {
    FusionConfig {
        k,
        normalization: match args.fusion {
            Fusion::None => Normalization::None,
            Fusion::Minmax => Normalization::MinMax,
        },
        backend,
        shards: shards(),
        ..FusionConfig::default()
    }
}

fn ranked(
    gallery: &Gallery,
    exact: Option<&SearchIndex>,
    pq: Option<&PqIndex>,
    probe: &Path,
    k: usize,
    args: &RerankArgs,
) -> Result<CandidateList, Error> {
    let probe_t = in_file(probe, read_probe_file(probe))?;
    let backend = if pq.is_some() { Stage1::Pq } else { Stage1::Exact };
    let cfg = fusion_config(k, args, backend);
    if args.rerank {
        let path = args.minutiae.as_deref().expect("clap requires --minutiae");
        let probe_m = in_file(path, read_minutiae_file(path))?;
        let retriever = Retriever::new(gallery, exact, pq)?;
        retriever.two_stage_search(&probe_t, &probe_m, &cfg)
    } else if let Some(pq) = pq {
        pq.search_topk(&probe_t, k, cfg.shards, gallery)
    } else {
        exact.expect("exact index").search_topk(&probe_t, k, cfg.shards)
    }
}

fn load_gallery(path: &Path) -> Result<Gallery, Error> {
    in_file(path, Gallery::load(path))
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Enroll(a) => {
            let text = fs::read_to_string(&a.manifest).map_err(|e| io_err(&a.manifest, e))?;
            let base = a.manifest.parent().unwrap_or(Path::new("."));
            let entries = in_file(&a.manifest, parse_manifest(&text, base))?;
            let mut gallery = if a.append && a.out.exists() {
                load_gallery(&a.out)?
            } else {
                Gallery::new()
            };
            enroll_manifest(&mut gallery, &entries)?;
            gallery.save(&a.out)?;
            println!("enrolled\t{}\ttotal\t{}", entries.len(), gallery.len());
        }
        Command::Search(a) => {
            let gallery = load_gallery(&a.gallery)?;
            let index = SearchIndex::from_gallery(&gallery);
            let list = ranked(&gallery, Some(&index), None, &a.probe, a.k, &a.rerank)?;
            write_output(a.out.as_deref(), &list.to_tsv())?;
        }
        Command::PqTrain(a) => {
            let gallery = load_gallery(&a.gallery)?;
            let cfg = TrainConfig {
                m: a.m,
                z: a.z,
                seed: cli.seed,
                max_training_points: Some(256 * a.z),
                ..TrainConfig::default()
            };
            let index = PqIndex::build_from_gallery(&gallery, &cfg)?;
            index.save(&a.out)?;
            println!(
                "records\t{}\tcode_bytes\t{}",
                index.len(),
                index.quantizer().code_bytes()
            );
        }
        Command::PqSearch(a) => {
            let gallery = load_gallery(&a.gallery)?;
            let index = in_file(&a.index, PqIndex::load(&a.index))?;
            let list = ranked(&gallery, None, Some(&index), &a.probe, a.k, &a.rerank)?;
            write_output(a.out.as_deref(), &list.to_tsv())?;
        }
        Command::Verify(a) => {
            let ta = in_file(&a.a, read_probe_file(&a.a))?;
            let tb = in_file(&a.b, read_probe_file(&a.b))?;
            let score = match (&a.minutiae_a, &a.minutiae_b) {
                (Some(ma), Some(mb)) => {
                    let sa = in_file(ma, read_minutiae_file(ma))?;
                    let sb = in_file(mb, read_minutiae_file(mb))?;
                    let cfg = MatchConfig::default();
                    let fused = fused_verify(&ta, &tb, &sa, &sb, &cfg);
                    println!(
                        "cosine\t{:.6}\nminutiae\t{:.6}",
                        cosine_score(&ta, &tb).value,
                        minutiae_score(&sa, &sb, &cfg)
                    );
                    fused
                }
                _ => cosine_score(&ta, &tb),
            };
            let kind = serde_json::to_value(score.kind).expect("score kind serializes");
            println!("score\t{:.6}\t{}", score.value, kind.as_str().unwrap_or_default());
        }
        Command::Mmap { op } => mmap(op)?,
        Command::Bench(a) => return bench(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn mmap(op: &MmapCommand) -> Result<(), Error> {
    match op {
        MmapCommand::Encode {
            minutiae,
            out,
            size,
            sigma,
            squared_orientation,
        } => {
            let set = in_file(minutiae, read_minutiae_file(minutiae))?;
            let opts = EncodeOptions {
                map_width: *size,
                map_height: *size,
                sigma_s: *sigma,
                squared_orientation: *squared_orientation,
            };
            let map = encode_map(&set, &opts)?;
            fs::write(out, map.to_bytes()).map_err(|e| io_err(out, e))?;
        }
        MmapCommand::Decode {
            map,
            out,
            threshold,
            radius,
            image_size,
        } => {
            let bytes = fs::read(map).map_err(|e| io_err(map, e))?;
            let m = in_file(map, MinutiaeMap::from_bytes(&bytes))?;
            let opts = DecodeOptions {
                peak_threshold: *threshold,
                nms_radius: *radius,
            };
            let mut set = decode_map(&m, &opts)?;
            if let Some(s) = image_size {
                set = set.scale_to(*s, *s)?;
            }
            fs::write(out, set.to_text()).map_err(|e| io_err(out, e))?;
            println!("decoded\t{}", set.len());
        }
    }
    Ok(())
}

fn bench(a: &BenchArgs, seed: u64) -> CliResult {
    if let Some(path) = &a.manifest {
        let manifest = in_file(path, ExperimentManifest::load(path))?;
        let outcome = run_experiment(&manifest)?;
        print!("{}", outcome.table());
        return Ok(if outcome.passed {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        });
    }
    let n = a.n.expect("clap requires --n");
    let report_path = a.report.as_deref().expect("clap requires --report");
    let cfg = SynthConfig {
        identities: n,
        probes: a.probes.unwrap_or(n.min(1000)),
        noise_sigma: a.noise,
        quality_spread: a.quality_spread,
        seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    let eval_cfg = EvalConfig {
        max_rank: a.max_rank.min(n),
        seed,
        ..EvalConfig::default()
    };
    let s = shards();
    let exact;
    let pq;
    let backend: Box<dyn Backend + '_> = match a.backend {
        BackendKind::Exact => {
            exact = SearchIndex::from_gallery(&data.gallery);
            Box::new(ExactBackend { gallery: &data.gallery, index: &exact, shards: s })
        }
        BackendKind::Pq => {
            let train = TrainConfig { seed, ..TrainConfig::default() };
            pq = PqIndex::build_from_gallery(&data.gallery, &train)?;
            Box::new(PqBackend { gallery: &data.gallery, index: &pq, shards: s })
        }
        BackendKind::Rerank => {
            exact = SearchIndex::from_gallery(&data.gallery);
            Box::new(RerankBackend {
                retriever: Retriever::new(&data.gallery, Some(&exact), None)?,
                config: FusionConfig {
                    k: a.rerank_k.min(n),
                    shards: s,
                    ..FusionConfig::default()
                },
            })
        }
    };
    let report = evaluate(backend.as_ref(), &data.probes, &eval_cfg)?;
    let mut json = report.to_json();
    json.push('\n');
    fs::write(report_path, json).map_err(|e| io_err(report_path, e))?;
    println!(
        "backend\t{}\tn\t{}\tprobes\t{}\trank1\t{:.4}\tp99_ms\t{:.3}",
        report.backend,
        report.gallery_size,
        report.probes,
        report.rank(1),
        report.latency.p99_ms
    );
    Ok(ExitCode::SUCCESS)
}

fn synth(a: &SynthArgs, seed: u64) -> Result<(), Error> {
    let cfg = SynthConfig {
        identities: a.n,
        probes: a.probes,
        noise_sigma: a.noise,
        quality_spread: a.quality_spread,
        seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    let probe_dir = a.out_dir.join("probes");
    fs::create_dir_all(&probe_dir).map_err(|e| io_err(&probe_dir, e))?;
    data.gallery.save(a.out_dir.join("gallery.dpgl"))?;
    let mut truth = String::from("# probe_template\tprobe_minutiae\tmate_id\tmate_finger\n");
    for (i, p) in data.probes.iter().enumerate() {
        let t = probe_dir.join(format!("p{i:05}.txt"));
        let m = probe_dir.join(format!("p{i:05}.min"));
        fs::write(&t, p.template.to_text()).map_err(|e| io_err(&t, e))?;
        fs::write(&m, p.minutiae.to_text()).map_err(|e| io_err(&m, e))?;
        truth.push_str(&format!(
            "probes/p{i:05}.txt\tprobes/p{i:05}.min\t{}\t{}\n",
            p.mate.subject_id, p.mate.finger_index
        ));
    }
    let tpath = a.out_dir.join("probes.tsv");
    fs::write(&tpath, truth).map_err(|e| io_err(&tpath, e))?;
    println!("gallery\t{}\tprobes\t{}", data.gallery.len(), data.probes.len());
    Ok(())
}
