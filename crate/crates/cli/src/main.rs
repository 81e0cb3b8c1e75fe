mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accup::adapt::content_hash;
use accup::backbone::{pretrain_source, Model, PretrainConfig};
use accup::data::{generate_shifted_pair, save_container, DatasetMeta, PairSizes, ShiftSpec};
use accup::experiment::{run_experiment, sweep, ExperimentReport};
use accup::{Error, ErrorClass};
use anyhow::Context;
use clap::Parser;

use args::{Cli, Command, GenerateArgs, PretrainArgs, ReportArgs};

fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let spec = ShiftSpec::reference(a.channels, a.classes);
    let target_spec = spec.shifted(a.factor, a.noise, a.offset);
    let held_src = a.source.div_ceil(4);
    let held_tgt = a.target.div_ceil(4);
    let sizes = PairSizes {
        source: a.source + held_src,
        target: a.target + held_tgt,
        len: a.len,
    };
    let (src, tgt) = generate_shifted_pair(&spec, &target_spec, sizes, a.seed)?;
    let range = |lo: usize, hi: usize| (lo..hi).collect::<Vec<_>>();
    let splits = [
        ("source", "train", src.subset(&range(0, a.source))),
        ("source", "test", src.subset(&range(a.source, src.len()))),
        ("target", "train", tgt.subset(&range(0, held_tgt))),
        ("target", "test", tgt.subset(&range(held_tgt, tgt.len()))),
    ];
    for (domain, split, ds) in &splits {
        let dir = a.out.join(domain);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_container(&dir.join(format!("{split}.ttsd")), ds)?;
    }
    let meta = DatasetMeta::new("synthetic", a.channels, a.classes, a.len);
    fs::write(a.out.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let specs = serde_json::json!({ "source": spec, "target": target_spec, "seed": a.seed });
    fs::write(a.out.join("specs.json"), serde_json::to_vec_pretty(&specs)?)?;
    println!(
        "wrote {} source and {} target samples to {}",
        a.source,
        a.target,
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (source, _) = cfg.data.load()?;
    let mut model = Model::new(cfg.encoder.config(source.inputs.channels()), source.classes, seed)?;
    let report = pretrain_source(&mut model, &source, &PretrainConfig { seed, ..cfg.pretrain })?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    model.save(&a.out)?;
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "saved {} (seed {seed}, final epoch loss {last:.4}, sha256 {})",
        a.out.display(),
        content_hash(&model.snapshot_bytes())
    );
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    println!("{}", report.scenario);
    for s in &report.summaries {
        let seeds: Vec<String> = s.per_seed.iter().map(|p| format!("{:.4}", p.report.macro_f1)).collect();
        println!(
            "  {:<14} macro-F1 {:.4} ± {:.4}  [{}]",
            s.strategy,
            s.mean,
            s.std,
            seeds.join(", ")
        );
    }
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    for (i, input) in a.inputs.iter().enumerate() {
        let path = report_path(input);
        let text = fs::read_to_string(&path).map_err(Error::Io).with_context(|| format!("reading {}", path.display()))?;
        let r: ExperimentReport = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if a.csv {
            let csv = r.csv();
            let body = if i == 0 { csv.as_str() } else { csv.split_once('\n').map_or("", |(_, rest)| rest) };
            print!("{body}");
        } else {
            print_summary(&r);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Adapt(a) => {
            let cfg = a.resolve()?;
            let report = run_experiment(&cfg)?;
            print_summary(&report);
            if let Some(dir) = &cfg.output {
                println!("report written to {}", dir.display());
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let (cfg, grid) = a.resolve()?;
            for r in sweep(&cfg, &grid)? {
                print_summary(&r);
            }
            Ok(())
        }
        Command::Report(a) => report(&a),
    }
}

/// 2 for configuration problems, 3 for data problems, 4 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class);
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Numeric) => 4,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
