//! Implementations of the CLI subcommands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use maxnet::checkpoint;
use maxnet::data::{
    self, concat, load_idx_pair, make_toy, split_train_valid, write_idx_images,
    write_idx_labels, Split, ToyKind,
};
use maxnet::gradcheck::check_network;
use maxnet::network::MaxoutNetwork;
use maxnet::protocol::{
    evaluate, phase1, phase2, CsvMetricsWriter, DataBundle, MetricsRow, MetricsSink,
    Phase2Status, ProtocolState,
};
use maxnet::seeding::{stream_rng, TrainRngs, STREAM_DATA, STREAM_INIT};
use maxnet::tensor::Matrix;
use maxnet::{Error, Result, Scalar};

use crate::config::{self, DataSource, Precision, RunConfig};

/// Metrics sink that writes the CSV file and, unless quiet, echoes a
/// progress line per epoch.
struct TrainLogger<W: Write> {
    csv: CsvMetricsWriter<W>,
    quiet: bool,
}

impl<W: Write> MetricsSink for TrainLogger<W> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.record(row)?;
        if !self.quiet {
            println!(
                "phase {} epoch {:>4}: train_ll {:.4}  valid_errors {:>6}  valid_ll {:.4}  lr {:.5}  momentum {:.3}",
                row.phase, row.epoch, row.train_mean_ll, row.valid_errors, row.valid_mean_ll,
                row.lr, row.momentum
            );
        }
        Ok(())
    }
}

fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    fs::create_dir_all(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    // Never reuse an existing directory: runs are append-only.
    for attempt in 0..1000u32 {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{}", attempt + 1)
        };
        let dir = root.join(&name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io { path: dir, source: e }),
        }
    }
    Err(Error::State(format!(
        "could not find a fresh run directory under {} for {base}",
        root.display()
    )))
}

fn load_bundle<S: Scalar>(cfg: &RunConfig, run_dir: &Path) -> Result<DataBundle<S>> {
    let seed = cfg.seed.expect("validated");
    match cfg.data.source {
        DataSource::Mnist => {
            let full = load_idx_pair::<S>(
                cfg.data.train_images.as_deref().expect("validated"),
                cfg.data.train_labels.as_deref().expect("validated"),
                Split::Full,
            )?;
            let (train, valid) = split_train_valid(&full)?;
            let test = load_idx_pair::<S>(
                cfg.data.test_images.as_deref().expect("validated"),
                cfg.data.test_labels.as_deref().expect("validated"),
                Split::Test,
            )?;
            Ok(DataBundle {
                train,
                valid,
                full,
                test,
            })
        }
        DataSource::Xor | DataSource::Blobs => {
            let kind = if cfg.data.source == DataSource::Xor {
                ToyKind::Xor
            } else {
                ToyKind::GaussianBlobs
            };
            let n = cfg.data.toy_n;
            let held = (n / 2).max(1);
            let mut rng = stream_rng(seed, STREAM_DATA);
            let train = make_toy::<S>(kind, n, &mut rng, Split::Train);
            let valid = make_toy::<S>(kind, held, &mut rng, Split::Validation);
            let test = make_toy::<S>(kind, held, &mut rng, Split::Test);
            let full = concat(&train, &valid, Split::Full)?;
            // Persist the test set so `eval` can be pointed at this run.
            write_idx_images(&run_dir.join("toy-test-images.idx3"), test.images(), 1, 2)?;
            write_idx_labels(&run_dir.join("toy-test-labels.idx1"), test.labels())?;
            Ok(DataBundle {
                train,
                valid,
                full,
                test,
            })
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_train<S: Scalar>(cfg: &RunConfig, run_dir: &Path, quiet: bool) -> Result<ExitCode> {
    let seed = cfg.seed.expect("validated");
    let bundle = load_bundle::<S>(cfg, run_dir)?;
    let net_cfg = cfg.network_config();
    if bundle.train.width() != net_cfg.input_width {
        return Err(Error::Data(format!(
            "data has {} features per example but model.input_width is {}",
            bundle.train.width(),
            net_cfg.input_width
        )));
    }
    let mut net = MaxoutNetwork::<S>::new(net_cfg)?;
    let mut init_rng = stream_rng(seed, STREAM_INIT);
    net.init_params(&mut init_rng);
    let mut rngs = TrainRngs::from_seed(seed);
    let opt = cfg.optimizer_config();
    let pcfg = cfg.protocol_config();

    let metrics_path = run_dir.join("metrics.csv");
    let csv_file = fs::File::create(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let mut sink = TrainLogger {
        csv: CsvMetricsWriter::new(BufWriter::new(csv_file)),
        quiet,
    };

    if !quiet {
        println!(
            "training {} examples ({} validation), {} parameters, seed {seed}",
            bundle.train.len(),
            bundle.valid.len(),
            net.param_count()
        );
    }

    let mut state = ProtocolState::new();
    let p1 = phase1(
        &mut net,
        &opt,
        &bundle.train,
        &bundle.valid,
        &pcfg,
        &mut state,
        &mut rngs,
        &mut sink,
    )?;
    checkpoint::save(&net, &run_dir.join("phase1-best.ckpt"))?;
    if !quiet {
        println!(
            "phase 1 done: best epoch {}, best valid errors {}, recorded train_ll {:.6}",
            p1.best_epoch, p1.best_valid_errors, p1.recorded_train_mean_ll
        );
    }
    let p2 = phase2(
        &mut net,
        &opt,
        &bundle.full,
        &bundle.valid,
        &pcfg,
        &mut state,
        &mut rngs,
        &mut sink,
    )?;
    checkpoint::save(&net, &run_dir.join("final.ckpt"))?;
    let test_report = evaluate(&net, &bundle.test, pcfg.eval_chunk)?;

    let phase2_status = match p2.status {
        Phase2Status::Crossed { epoch } => format!("crossed at epoch {epoch}"),
        Phase2Status::CapReached => "criterion never met (epoch cap reached)".into(),
    };
    let report = format!(
        "run directory: {}\nseed: {seed}\n\
         phase 1: best epoch {}, best valid errors {}, recorded train mean ll {:.6}, \
         epochs run {}, updates {}\n\
         phase 2: {}, epochs run {}, updates {}, final valid mean ll {:.6}\n\
         test: {} errors / {} examples (error rate {:.4}), mean ll {:.6}\n\
         total updates: {}\n",
        run_dir.display(),
        p1.best_epoch,
        p1.best_valid_errors,
        p1.recorded_train_mean_ll,
        p1.epochs_run,
        p1.updates,
        phase2_status,
        p2.epochs_run,
        p2.updates,
        p2.final_valid_mean_ll,
        test_report.errors,
        test_report.n,
        test_report.error_rate,
        test_report.mean_ll,
        state.total_updates,
    );
    write_text(&run_dir.join("report.txt"), &report)?;
    if !quiet {
        print!("{report}");
    }
    let phase2_token = match p2.status {
        Phase2Status::Crossed { .. } => "crossed",
        Phase2Status::CapReached => "cap_reached",
    };
    println!(
        "RESULT run_dir={} phase2={} test_errors={} test_n={} test_error_rate={:.6} test_mean_ll={:.6} updates={}",
        run_dir.display(),
        phase2_token,
        test_report.errors,
        test_report.n,
        test_report.error_rate,
        test_report.mean_ll,
        state.total_updates
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
) -> Result<ExitCode> {
    let mut cfg = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let run_dir = create_run_dir(&cfg.out_dir, cfg.seed.expect("validated"))?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &run_dir, quiet),
        Precision::F64 => run_train::<f64>(&cfg, &run_dir, quiet),
    }
}

fn run_eval<S: Scalar>(
    ckpt: &Path,
    images: &Path,
    labels: &Path,
    quiet: bool,
) -> Result<ExitCode> {
    let net = checkpoint::load::<S>(ckpt)?;
    let ds = load_idx_pair::<S>(images, labels, Split::Test)?;
    if ds.width() != net.config().input_width {
        return Err(Error::Data(format!(
            "data has {} features per example but the checkpoint expects {}",
            ds.width(),
            net.config().input_width
        )));
    }
    let report = evaluate(&net, &ds, 1000)?;
    if !quiet {
        println!("checkpoint: {}", ckpt.display());
        println!("examples:   {}", report.n);
        println!(
            "errors:     {} (error rate {:.4})",
            report.errors, report.error_rate
        );
        println!("mean log-likelihood: {:.6} nats", report.mean_ll);
    }
    println!(
        "EVAL errors={} n={} error_rate={:.6} mean_ll={:.6}",
        report.errors, report.n, report.error_rate, report.mean_ll
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(ckpt: &Path, images: &Path, labels: &Path, quiet: bool) -> Result<ExitCode> {
    match checkpoint::peek_precision(ckpt)? {
        32 => run_eval::<f32>(ckpt, images, labels, quiet),
        64 => run_eval::<f64>(ckpt, images, labels, quiet),
        other => Err(Error::Format {
            path: ckpt.to_path_buf(),
            reason: format!("unsupported scalar width {other}"),
        }),
    }
}

pub fn gradcheck(config_path: &Path, seed: Option<u64>, quiet: bool) -> Result<ExitCode> {
    let mut cfg = config::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    cfg.validate_gradcheck()?;
    let seed = cfg.seed.expect("validated");
    // Gradient checking is always done in f64; f32 rounding would swamp the
    // finite-difference signal.
    let mut net = MaxoutNetwork::<f64>::new(cfg.gradcheck_network_config())?;
    let mut init_rng = stream_rng(seed, STREAM_INIT);
    net.init_params(&mut init_rng);
    use rand::Rng;
    let mut data_rng = stream_rng(seed, STREAM_DATA);
    let gc = &cfg.gradcheck;
    let x = Matrix::<f64>::from_fn(gc.batch, gc.input_width, |_, _| data_rng.gen::<f64>());
    let labels: Vec<u8> = (0..gc.batch)
        .map(|_| data_rng.gen_range(0..gc.output_classes as u8))
        .collect();
    let mut mask_rng = stream_rng(seed, maxnet::seeding::STREAM_DROPOUT);
    let report = check_network(&mut net, &x, &labels, gc.eps, gc.tie_tolerance, &mut mask_rng)?;
    let threshold = cfg.gradcheck_threshold();
    if !quiet {
        print!("{}", report.render_table());
        if let Some(w) = &report.worst {
            println!(
                "worst coordinate: {} index {} analytic {:.6e} numeric {:.6e}",
                w.block, w.flat_index, w.analytic, w.numeric
            );
        }
    }
    let pass = report.max_rel_error <= threshold;
    println!(
        "GRADCHECK max_rel_error={:.3e} threshold={:.3e} eps={:.1e} tie_rejections={} status={}",
        report.max_rel_error,
        threshold,
        report.eps,
        report.tie_rejections,
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn make_fixtures(out: &Path) -> Result<ExitCode> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let fx = data::fixtures::write_all(out)?;
    for path in [
        &fx.valid_images,
        &fx.valid_labels,
        &fx.single_zero_image,
        &fx.single_label,
        &fx.wrong_magic_images,
        &fx.wrong_magic_labels,
        &fx.truncated_images,
        &fx.truncated_labels,
        &fx.bad_label,
    ] {
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
