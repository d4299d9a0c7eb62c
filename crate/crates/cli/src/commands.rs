use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attn_tutor::checks::gradient_suite;
use attn_tutor::data::{generate, read_container, write_container, Dataset, DatasetSpec, VqaSample};
use attn_tutor::maps::GridMap;
use attn_tutor::metrics::{emd, evaluate, rank_correlation, read_tsv, write_tsv, MetricReport};
use attn_tutor::model::{Batch, VqaModel, VqaModelConfig};
use attn_tutor::params::ParamStore;
use attn_tutor::report::{
    entropy_chart, eta_chart, format_summary, format_sweep_tsv, mean_log, parse_sweep_tsv, rc_chart,
    summary_rows,
};
use attn_tutor::trainer::{prepare, train_adversarial, EpochRecord, SweepRow, TrainConfig};
use clap::ArgMatches;

use crate::flags::train_config;
use crate::{config, pool, runtime, CliError};

type CliResult<T = ()> = Result<T, CliError>;

pub fn dispatch(m: &ArgMatches) -> CliResult {
    match m.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("train", m)) => train(m),
        Some(("eval", m)) => eval(m),
        Some(("sweep-eta", m)) => sweep_eta(m),
        Some(("compare-maps", m)) => compare_maps(m),
        Some(("report", m)) => report(m),
        Some(("gradcheck", m)) => gradcheck(m),
        _ => unreachable!("a subcommand is required"),
    }
}

fn path<'a>(m: &'a ArgMatches, id: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(id).map(PathBuf::as_path)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// `data.avqd` → `data.avqd.config.txt`
fn config_beside(path: &Path) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(".config.txt");
    s.into()
}

fn map_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:05}.csv"))
}

fn dataset_spec(m: &ArgMatches, seed_id: &str) -> DatasetSpec {
    let grid = *m.get_one::<usize>("grid").expect("defaulted");
    DatasetSpec {
        n_samples: *m.get_one::<usize>("n").expect("defaulted"),
        image_size: 4 * grid,
        grid,
        object_cells: *m.get_one::<usize>("object-cells").expect("defaulted"),
        seed: *m.get_one::<u64>(seed_id).expect("defaulted"),
    }
}

fn spec_kv(spec: &DatasetSpec) -> String {
    format!(
        "n = {}\nseed = {}\ngrid = {}\nimage_size = {}\nobject_cells = {}\n",
        spec.n_samples, spec.seed, spec.grid, spec.image_size, spec.object_cells
    )
}

/// The dataset named by `--data`, or one generated from the data flags,
/// together with `# `-prefixed lines describing where it came from.
fn load_data(m: &ArgMatches) -> CliResult<(Dataset, String)> {
    if let Some(p) = path(m, "data") {
        let data = read_container(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        return Ok((data, format!("# data = {}\n", p.display())));
    }
    let spec = dataset_spec(m, "data-seed");
    let data = generate(&spec).map_err(config)?;
    let mut provenance = String::from("# data generated in memory\n");
    for line in spec_kv(&spec).lines() {
        writeln!(provenance, "# data.{line}").unwrap();
    }
    Ok((data, provenance))
}

fn model_config(data: &Dataset) -> VqaModelConfig {
    VqaModelConfig {
        image_size: data.image_size,
        region_grid: data.grid,
        ..VqaModelConfig::default()
    }
}

fn gen_data(m: &ArgMatches) -> CliResult {
    let spec = dataset_spec(m, "seed");
    let out = path(m, "out").expect("defaulted");
    let data = generate(&spec).map_err(config)?;
    write_container(out, &data).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut resolved = spec_kv(&spec);
    if let Some(dir) = path(m, "export-csv") {
        create_dir(dir)?;
        for (i, s) in data.samples.iter().enumerate() {
            write(&map_file(dir, i), s.gt_attention.to_csv())?;
        }
        writeln!(resolved, "export_csv = {}", dir.display()).unwrap();
    }
    write(&config_beside(out), resolved)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn warm_lines(records: &[EpochRecord]) -> String {
    let mut s = String::from("warm start\nepoch  ce       acc      rc       entropy\n");
    for r in records {
        writeln!(
            s,
            "{:<6} {:<8.4} {:<8.4} {:<8.4} {:.4}",
            r.epoch, r.ce_loss, r.metrics.accuracy, r.metrics.rank_correlation, r.metrics.entropy
        )
        .unwrap();
    }
    s
}

fn train(m: &ArgMatches) -> CliResult {
    let cfg = train_config(m)?;
    let (data, provenance) = load_data(m)?;
    let dir = path(m, "out-dir").expect("defaulted");
    create_dir(dir)?;
    write(&dir.join("config.txt"), format!("{}{provenance}", cfg.to_kv()))?;

    let warm = prepare(&data, model_config(&data), &cfg).map_err(runtime)?;
    let mut state = warm.state;
    let checkpoint = dir.join("checkpoint.atck");
    let report = match train_adversarial(&mut state, &warm.train, &warm.val, &cfg) {
        Ok(r) => r,
        Err(e) => {
            // the state was rolled back to the last completed epoch
            state.model.params.save(&checkpoint).map_err(runtime)?;
            return Err(runtime(format!("{e}; last good parameters saved to {}", checkpoint.display())));
        }
    };
    state.model.params.save(&checkpoint).map_err(runtime)?;
    write_tsv(dir.join("log.tsv"), &report.log_rows()).map_err(runtime)?;
    write(
        &dir.join("summary.txt"),
        format!("{}\n{}", warm_lines(&warm.records), report.summary()),
    )?;
    let f = report.final_metrics();
    println!(
        "{}: rc {:.4}  emd {:.4}  entropy {:.4}  accuracy {:.4}  ({})",
        report.label,
        f.rank_correlation,
        f.emd,
        f.entropy,
        f.accuracy,
        dir.display()
    );
    Ok(())
}

fn eval(m: &ArgMatches) -> CliResult {
    let ckpt = path(m, "checkpoint").expect("required");
    let params = ParamStore::load(ckpt).map_err(|e| runtime(format!("{}: {e}", ckpt.display())))?;
    let (data, provenance) = load_data(m)?;
    if data.is_empty() {
        return Err(runtime("the dataset has no samples"));
    }
    let model = VqaModel {
        config: model_config(&data),
        params,
    };
    let mut maps = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(100) {
        let refs: Vec<&VqaSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, data.image_size).map_err(runtime)?;
        let (alpha, preds) = model.predict(&batch).map_err(runtime)?;
        maps.extend(alpha);
        correct.extend(preds.iter().zip(&batch.answers).map(|(p, a)| p == a));
    }
    let reference: Vec<GridMap> = data.samples.iter().map(|s| s.gt_attention.clone()).collect();
    let scored = evaluate(&maps, &reference, &correct).map_err(runtime)?;
    let r = scored.report;
    let table = format!(
        "rc\temd\tentropy\toverlap\taccuracy\tconstant_maps\n{}\t{}\t{}\t{}\t{}\t{}\n",
        r.rank_correlation, r.emd, r.entropy, r.overlap, r.accuracy, scored.constant_maps
    );
    print!("{table}");
    let resolved = format!("checkpoint = {}\n{provenance}", ckpt.display());
    if let Some(out) = path(m, "out") {
        write(out, &table)?;
        write(&config_beside(out), &resolved)?;
    }
    if let Some(dir) = path(m, "export-maps") {
        create_dir(dir)?;
        for (i, a) in maps.iter().enumerate() {
            write(&map_file(dir, i), a.to_csv())?;
        }
        write(&dir.join("config.txt"), &resolved)?;
    }
    Ok(())
}

fn mean_rows(per_seed: &[Vec<SweepRow>]) -> Vec<SweepRow> {
    let k = per_seed.len() as f64;
    (0..per_seed[0].len())
        .map(|i| {
            let mut m = MetricReport::default();
            for rows in per_seed {
                let r = &rows[i].metrics;
                m.rank_correlation += r.rank_correlation / k;
                m.emd += r.emd / k;
                m.entropy += r.entropy / k;
                m.overlap += r.overlap / k;
                m.accuracy += r.accuracy / k;
            }
            SweepRow {
                eta: per_seed[0][i].eta,
                metrics: m,
            }
        })
        .collect()
}

fn sweep_eta(m: &ArgMatches) -> CliResult {
    let base = train_config(m)?;
    let etas: Vec<f64> = m.get_many::<f64>("etas").expect("defaulted").copied().collect();
    let seeds: Vec<u64> = m.get_many::<u64>("seeds").expect("defaulted").copied().collect();
    if let Some(bad) = etas.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(config(format!("--etas: η must be finite and ≥ 0, got {bad}")));
    }
    let threads = pool::threads()?;
    let (data, provenance) = load_data(m)?;
    let dir = path(m, "out-dir").expect("defaulted");
    create_dir(dir)?;
    let join = |v: Vec<String>| v.join(",");
    write(
        &dir.join("config.txt"),
        format!(
            "{}# etas = {}\n# seeds = {}\n{provenance}",
            base.to_kv(),
            join(etas.iter().map(f64::to_string).collect()),
            join(seeds.iter().map(u64::to_string).collect()),
        ),
    )?;

    let warm = pool::map(&seeds, threads, |&seed| {
        let cfg = TrainConfig { seed, ..base.clone() };
        eprintln!("seed {seed}: warm start");
        prepare(&data, model_config(&data), &cfg).map_err(runtime)
    })?;
    let jobs: Vec<(usize, f64)> = (0..seeds.len())
        .flat_map(|s| etas.iter().map(move |&e| (s, e)))
        .collect();
    let runs = pool::map(&jobs, threads, |&(s, eta)| {
        let cfg = TrainConfig {
            seed: seeds[s],
            eta,
            ..base.clone()
        };
        let w = &warm[s];
        let mut state = w.state.clone();
        let report = train_adversarial(&mut state, &w.train, &w.val, &cfg)
            .map_err(|e| runtime(format!("seed {}, η = {eta}: {e}", seeds[s])))?;
        eprintln!("seed {}, η = {eta}: rc {:.4}", seeds[s], report.final_metrics().rank_correlation);
        Ok::<_, CliError>(SweepRow {
            eta,
            metrics: report.final_metrics(),
        })
    })?;
    let per_seed: Vec<Vec<SweepRow>> = runs.chunks(etas.len()).map(<[SweepRow]>::to_vec).collect();
    for (seed, rows) in seeds.iter().zip(&per_seed) {
        write(&dir.join(format!("sweep-seed{seed}.tsv")), format_sweep_tsv(rows))?;
    }
    let mean = mean_rows(&per_seed);
    let table = format_sweep_tsv(&mean);
    write(&dir.join("sweep.tsv"), &table)?;
    write(&dir.join("eta.svg"), eta_chart(&mean).to_svg())?;
    print!("{table}");
    Ok(())
}

/// Sorted `*.csv` file names directly inside `dir`.
fn csv_names(dir: &Path) -> CliResult<Vec<OsString>> {
    let entries = fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let p = entry.map_err(runtime)?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            names.push(p.file_name().expect("a file entry").to_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn read_map(path: &Path) -> CliResult<GridMap> {
    GridMap::read_csv(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn compare_maps(m: &ArgMatches) -> CliResult {
    let (a, b) = (path(m, "a").expect("required"), path(m, "b").expect("required"));
    let names = csv_names(a)?;
    if names != csv_names(b)? {
        return Err(runtime(format!(
            "{} and {} do not hold the same map files",
            a.display(),
            b.display()
        )));
    }
    if names.is_empty() {
        return Err(runtime(format!("no .csv maps in {}", a.display())));
    }
    let mut table = String::from("map\trc\temd\n");
    let (mut rc_sum, mut rc_n, mut emd_sum) = (0.0, 0usize, 0.0);
    for name in &names {
        let (p, q) = (read_map(&a.join(name))?, read_map(&b.join(name))?);
        let rc = rank_correlation(p.values(), q.values()).map_err(runtime)?;
        let d = emd(&p, &q).map_err(|e| runtime(format!("{}: {e}", name.to_string_lossy())))?;
        let rho = if rc.constant_input {
            f64::NAN
        } else {
            rc_sum += rc.rho;
            rc_n += 1;
            rc.rho
        };
        emd_sum += d;
        writeln!(table, "{}\t{rho}\t{d}", name.to_string_lossy()).unwrap();
    }
    let mean_rc = if rc_n > 0 { rc_sum / rc_n as f64 } else { f64::NAN };
    writeln!(table, "mean\t{mean_rc}\t{}", emd_sum / names.len() as f64).unwrap();
    match path(m, "out") {
        Some(out) => {
            write(out, &table)?;
            write(
                &config_beside(out),
                format!("a = {}\nb = {}\n", a.display(), b.display()),
            )?;
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn report(m: &ArgMatches) -> CliResult {
    let dir = path(m, "out-dir").expect("defaulted");
    let logs: Vec<&PathBuf> = m.get_many::<PathBuf>("log").into_iter().flatten().collect();
    create_dir(dir)?;
    let mut resolved = String::new();
    for l in &logs {
        writeln!(resolved, "log = {}", l.display()).unwrap();
    }
    if !logs.is_empty() {
        let runs = logs
            .iter()
            .map(|p| read_tsv(p).map_err(|e| runtime(format!("{}: {e}", p.display()))))
            .collect::<CliResult<Vec<_>>>()?;
        let mean = mean_log(&runs);
        write(&dir.join("entropy.svg"), entropy_chart(&mean).to_svg())?;
        write(&dir.join("rc.svg"), rc_chart(&mean).to_svg())?;
        let summary = format_summary(&summary_rows(&runs));
        write(&dir.join("summary.txt"), &summary)?;
        print!("{summary}");
    }
    if let Some(p) = path(m, "sweep") {
        let text = fs::read_to_string(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        let rows = parse_sweep_tsv(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        write(&dir.join("eta.svg"), eta_chart(&rows).to_svg())?;
        writeln!(resolved, "sweep = {}", p.display()).unwrap();
    }
    write(&dir.join("config.txt"), resolved)
}

fn gradcheck(m: &ArgMatches) -> CliResult {
    let probes = *m.get_one::<usize>("probes").expect("defaulted");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let tol = *m.get_one::<f64>("tolerance").expect("defaulted");
    if probes == 0 {
        return Err(config("--probes must be at least 1"));
    }
    let checks = gradient_suite(probes, seed).map_err(runtime)?;
    println!("check\tprobes\tmax_rel_error");
    let mut failed = Vec::new();
    for c in &checks {
        println!("{}\t{}\t{:e}", c.name, c.probes, c.max_rel_error);
        if !(c.max_rel_error < tol) {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("relative error ≥ {tol} in: {}", failed.join(", "))))
    }
}
