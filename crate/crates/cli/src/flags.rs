use std::path::PathBuf;

use attn_tutor::trainer::{TrainConfig, SWEEP_ETAS};
use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgGroup, ArgMatches, Command};

use crate::{config, CliError};

fn train_help(key: &str) -> &'static str {
    match key {
        "eta" => "Weight of the adversarial or matching term",
        "variant" => "baseline, mse, mmd, coral, aan or paan",
        "explainer" => "Supervising maps: gradcam, rise or random:<overlap>",
        "warm_epochs" => "Cross-entropy epochs before the adversarial phase",
        "adv_epochs" => "Adversarial epochs",
        "batch_size" => "Samples per batch",
        "lr_main" => "Learning rate of the cross-entropy step",
        "lr_gen" => "Learning rate of the generator step on the attention block",
        "lr_disc" => "Learning rate of the discriminator",
        "momentum" => "SGD momentum for every optimizer",
        "grad_clip" => "Gradient-norm clip of the cross-entropy step, or none",
        "d_steps_per_g_step" => "Discriminator steps per generator step",
        "lambda_js" => "Weight of the Jensen-Shannon term",
        "lambda_chi2" => "Weight of the chi-square term",
        "generator_form" => "non-saturating or saturating generator loss",
        "rise_masks" => "RISE masks per sample",
        "train_fraction" => "Fraction of the data used for training",
        "seed" => "Seed of model initialization and shuffling",
        _ => "",
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One flag per training setting, defaulting to [`TrainConfig::default`].
fn train_args(skip: &[&str]) -> Vec<Arg> {
    let mut args: Vec<Arg> = TrainConfig::default()
        .entries()
        .into_iter()
        .filter(|(k, _)| !skip.contains(k))
        .map(|(key, default)| {
            Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .default_value(default)
                .help(train_help(key))
                .help_heading("Training")
        })
        .collect();
    args.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("File of `key = value` training settings; flags take precedence")
            .help_heading("Training"),
    );
    args
}

fn data_args() -> Vec<Arg> {
    vec![
        Arg::new("data")
            .long("data")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .conflicts_with_all(["n", "data-seed", "grid", "object-cells"])
            .help("Dataset container; generated in memory when absent")
            .help_heading("Data"),
        Arg::new("n")
            .long("n")
            .value_name("N")
            .value_parser(value_parser!(usize))
            .default_value("2000")
            .help("Samples to generate")
            .help_heading("Data"),
        Arg::new("data-seed")
            .long("data-seed")
            .value_name("SEED")
            .value_parser(value_parser!(u64))
            .default_value("7")
            .help("Seed of the generated dataset")
            .help_heading("Data"),
        grid_arg().help_heading("Data"),
        object_cells_arg().help_heading("Data"),
    ]
}

fn grid_arg() -> Arg {
    Arg::new("grid")
        .long("grid")
        .value_name("G")
        .value_parser(value_parser!(usize))
        .default_value("7")
        .help("Attention grid side; images are 4·G pixels wide")
}

fn object_cells_arg() -> Arg {
    Arg::new("object-cells")
        .long("object-cells")
        .value_name("CELLS")
        .value_parser(value_parser!(usize))
        .default_value("2")
        .help("Side of the cell block one object covers")
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn out_dir(default: &'static str) -> Arg {
    path_arg("out-dir", "Directory receiving the outputs").default_value(default)
}

pub fn command() -> Command {
    let default_etas = SWEEP_ETAS.map(|e| e.to_string()).join(",");
    Command::new("attn-tutor")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Adversarial supervision of VQA attention with explanation maps")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Generate a synthetic VQA dataset container")
                .arg(
                    Arg::new("n")
                        .long("n")
                        .value_name("N")
                        .value_parser(value_parser!(usize))
                        .default_value("2000")
                        .help("Samples to generate"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("SEED")
                        .value_parser(value_parser!(u64))
                        .default_value("7")
                        .help("Generator seed"),
                )
                .arg(grid_arg())
                .arg(object_cells_arg())
                .arg(path_arg("out", "Container file to write").default_value("data.avqd"))
                .arg(path_arg("export-csv", "Also dump every reference map as DIR/NNNNN.csv").value_name("DIR")),
        )
        .subcommand(
            Command::new("train")
                .about("Warm-start a model, then train it adversarially")
                .args(data_args())
                .args(train_args(&[]))
                .arg(out_dir("run")),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a checkpoint's attention against the reference maps")
                .arg(path_arg("checkpoint", "Checkpoint file").required(true))
                .args(data_args())
                .arg(path_arg("out", "Also write the metrics to this file"))
                .arg(path_arg("export-maps", "Dump every attention map as DIR/NNNNN.csv").value_name("DIR")),
        )
        .subcommand(
            Command::new("sweep-eta")
                .about("Train one run per η and seed from shared warm starts")
                .args(data_args())
                .args(train_args(&["eta"]))
                .arg(
                    Arg::new("etas")
                        .long("etas")
                        .value_name("LIST")
                        .value_delimiter(',')
                        .value_parser(value_parser!(f64))
                        .default_value(default_etas)
                        .help("Comma-separated η values"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .value_delimiter(',')
                        .value_parser(value_parser!(u64))
                        .default_value("1")
                        .help("Comma-separated seeds; rows are averaged over them"),
                )
                .arg(out_dir("sweep")),
        )
        .subcommand(
            Command::new("compare-maps")
                .about("Per-map RC and EMD between two directories of CSV maps")
                .arg(path_arg("a", "First map directory").value_name("DIR").required(true))
                .arg(path_arg("b", "Second map directory").value_name("DIR").required(true))
                .arg(path_arg("out", "Write the table here instead of stdout")),
        )
        .subcommand(
            Command::new("report")
                .about("Render SVG charts and the summary table from logs")
                .arg(
                    path_arg("log", "Training log TSV; repeat for several runs")
                        .value_name("FILE")
                        .action(ArgAction::Append),
                )
                .arg(path_arg("sweep", "η sweep TSV").value_name("FILE"))
                .group(ArgGroup::new("inputs").args(["log", "sweep"]).multiple(true).required(true))
                .arg(out_dir("report")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference checks of every differentiable operation and loss")
                .arg(
                    Arg::new("probes")
                        .long("probes")
                        .value_name("N")
                        .value_parser(value_parser!(usize))
                        .default_value("20")
                        .help("Random input sets per check"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("SEED")
                        .value_parser(value_parser!(u64))
                        .default_value("1")
                        .help("Seed of the probe inputs"),
                )
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .value_name("TOL")
                        .value_parser(value_parser!(f64))
                        .default_value("1e-4")
                        .help("Largest accepted relative error"),
                ),
        )
}

/// Defaults, then the `--config` file, then flags given on the command line.
pub fn train_config(m: &ArgMatches) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        let pairs = attn_tutor::trainer::parse_kv(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        for (k, v) in pairs {
            cfg.set(&k, &v).map_err(|e| config(format!("{}: {e}", path.display())))?;
        }
    }
    for (key, _) in TrainConfig::default().entries() {
        let explicit = m
            .try_get_raw(key)
            .is_ok_and(|v| v.is_some())
            && m.value_source(key) == Some(ValueSource::CommandLine);
        if explicit {
            let value = m.get_one::<String>(key).expect("string flag");
            cfg.set(key, value).map_err(|e| config(format!("--{}: {e}", flag_name(key))))?;
        }
    }
    cfg.validate().map_err(config)?;
    Ok(cfg)
}
