//! The five subcommands. Each one that produces artifacts writes them into
//! the output directory together with the exact configuration it resolved,
//! and prints a short summary to stdout. Identical seeds give byte-identical
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sshunet_core::complexity::{cost_report, efficiency_table, to_csv};
use sshunet_core::layers::{shift_mac_equivalence, ShiftSpec};
use sshunet_core::metrics::{aggregate, evaluate_case, CaseReport};
use sshunet_core::network::{SshUnet, UNetConfig, Variant};
use sshunet_core::trainer::{history_csv, sliding_window_infer, train};
use sshunet_core::{Error, Result};

use crate::config::{self, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.sshc";
const RESOLVED_CONFIG_FILE: &str = "config.toml";

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), config::resolved_toml(cfg)?)?;
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let unet = cfg.network.to_unet()?;
    let (train_vols, val_vols) = cfg.data.load_volumes()?;
    let tc = cfg.train.to_train(&cfg.optim, cfg.seed)?;
    let out = prepare_out(cfg)?;

    let mut net = SshUnet::build(unet, cfg.seed)?;
    let report = train(&mut net, &train_vols, &val_vols, &tc)?;

    fs::write(out.join("history.csv"), history_csv(&report.history))?;
    net.save(&out.join(CHECKPOINT_FILE))?;
    match report.final_val_dice {
        Some(d) => println!(
            "trained {} for {} steps, final val dice {:.4}",
            cfg.network.variant, cfg.train.steps, d
        ),
        None => println!(
            "trained {} for {} steps (no validation volumes)",
            cfg.network.variant, cfg.train.steps
        ),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn metrics_csv(reports: &[CaseReport], num_classes: usize) -> Result<String> {
    let mut csv = String::from("case,class,dice,nsd\n");
    for report in reports {
        for (i, score) in report.per_class.iter().enumerate() {
            if let Some(s) = score {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    report.id,
                    i + 1,
                    s.dice,
                    s.nsd
                ));
            }
        }
    }
    let agg = aggregate(reports)?;
    for class in 1..num_classes {
        if let Some(Some(a)) = agg.per_class.get(class - 1) {
            csv.push_str(&format!("mean,{},{:.6},{:.6}\n", a.class, a.mean_dice, a.mean_nsd));
        }
    }
    // The macro row exists only when some foreground class appeared.
    if let (Some(d), Some(n)) = (agg.macro_dice, agg.macro_nsd) {
        csv.push_str(&format!("macro,all,{:.6},{:.6}\n", d, n));
    }
    Ok(csv)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, gt_as_prediction: bool) -> Result<()> {
    let (_, val_vols) = cfg.data.load_volumes()?;
    if val_vols.is_empty() {
        return Err(Error::Config("no validation volumes to evaluate".to_string()));
    }
    let num_classes = cfg.network.num_classes;
    let out = prepare_out(cfg)?;

    let net = match (gt_as_prediction, checkpoint) {
        (true, _) => None,
        (false, Some(path)) => Some(SshUnet::load(path, cfg.network.to_unet()?)?),
        (false, None) => {
            return Err(Error::Config(
                "eval needs --checkpoint <path> or --gt-as-prediction".to_string(),
            ))
        }
    };

    let mut reports = Vec::new();
    for vol in &val_vols {
        let gt = vol.label_volume();
        let pred = match &net {
            Some(net) => {
                sliding_window_infer(net, vol, cfg.train.patch_extent, cfg.train.infer_overlap)?
            }
            None => gt.clone(),
        };
        reports.push(evaluate_case(&vol.id, &gt, &pred, num_classes, cfg.eval.tau_mm)?);
    }

    let csv = metrics_csv(&reports, num_classes)?;
    fs::write(out.join("metrics.csv"), &csv)?;
    print!("{}", csv);
    println!("metrics in {}", out.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_profile(cfg: &RunConfig, variants: &[String], input: &str) -> Result<()> {
    let input = parse_input_shape(input)?;
    let variants: Vec<Variant> = if variants.is_empty() {
        vec![Variant::Plain2d, Variant::Shift2d, Variant::Shift2dMultiView, Variant::Full3d]
    } else {
        config::parse_variants(variants)?
    };
    let out = prepare_out(cfg)?;

    let mut entries: Vec<(String, UNetConfig)> = Vec::new();
    for variant in variants {
        let unet = UNetConfig { variant, ..cfg.network.to_unet()? };
        let report = cost_report(&unet, input)?;
        fs::write(out.join(format!("profile_{}.csv", variant.as_str())), to_csv(&report))?;
        entries.push((variant.as_str().to_string(), unet));
    }
    let table = efficiency_table(&entries, input)?;
    fs::write(out.join("efficiency.csv"), &table)?;
    print!("{}", table);
    println!("profiles in {}", out.display());
    Ok(())
}

/// Parses "1x128x128x128" as batch x spatial extents.
fn parse_input_shape(s: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("input shape `{}` is not NxXxYxZ", s)))?;
    if dims.len() != 4 {
        return Err(Error::Argument(format!(
            "input shape `{}` has {} dims, expected 4 (batch and three spatial)",
            s,
            dims.len()
        )));
    }
    Ok([dims[0], dims[1], dims[2], dims[3]])
}

pub fn cmd_sweep_shift(cfg: &RunConfig, fractions: &[String], parallel: bool) -> Result<()> {
    let fractions: Vec<(String, ShiftSpec)> = if fractions.is_empty() {
        ["0", "1/16", "1/8", "1/4", "1/2"]
            .iter()
            .map(|s| ShiftSpec::parse(s).map(|f| (s.to_string(), f)))
            .collect::<Result<_>>()?
    } else {
        fractions
            .iter()
            .map(|s| ShiftSpec::parse(s).map(|f| (s.clone(), f)))
            .collect::<Result<_>>()?
    };
    let (train_vols, val_vols) = cfg.data.load_volumes()?;
    if val_vols.is_empty() {
        return Err(Error::Config("sweep needs validation volumes".to_string()));
    }
    let base = cfg.network.to_unet()?;
    let tc = cfg.train.to_train(&cfg.optim, cfg.seed)?;
    let out = prepare_out(cfg)?;

    let run_one = |fraction: ShiftSpec| -> Result<f64> {
        let unet = UNetConfig { shift_fraction: fraction, ..base.clone() };
        let mut net = SshUnet::build(unet, cfg.seed)?;
        let report = train(&mut net, &train_vols, &val_vols, &tc)?;
        report
            .final_val_dice
            .ok_or_else(|| Error::Config("sweep produced no validation score".to_string()))
    };

    // Runs are independent (own network, own rng stream); parallel mode
    // changes wall time only, never the rows.
    let scores: Vec<Result<f64>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = fractions
                .iter()
                .map(|(_, f)| {
                    let run_one = &run_one;
                    scope.spawn(move || run_one(*f))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
        })
    } else {
        fractions.iter().map(|(_, f)| run_one(*f)).collect()
    };

    let mut csv = String::from("fraction,val_dice\n");
    for ((name, _), score) in fractions.iter().zip(scores) {
        csv.push_str(&format!("{},{:.6}\n", name, score?));
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{}", csv);
    println!("sweep in {}", out.join("sweep.csv").display());
    Ok(())
}

pub fn cmd_shift_demo(cfg: &RunConfig, length: usize, weights: &str, trials: usize) -> Result<()> {
    if length < 2 {
        return Err(Error::Argument(format!("length {} is too short to demonstrate", length)));
    }
    let w = parse_weights(weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x: Vec<f32> = (0..length).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let report = shift_mac_equivalence(&x, w);

    println!("input length {}, taps ({}, {}, {})", length, w.0, w.1, w.2);
    println!("{:>4} {:>12} {:>12} {:>12}", "i", "direct", "decomposed", "abs diff");
    for (i, (d, m)) in report.direct.iter().zip(&report.decomposed).enumerate() {
        println!("{:>4} {:>12.6} {:>12.6} {:>12.3e}", i, d, m, (d - m).abs());
    }
    let mut worst = report.max_abs_err;
    if trials > 0 {
        for _ in 0..trials {
            let len = rng.gen_range(2..=64);
            let x: Vec<f32> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            worst = worst.max(shift_mac_equivalence(&x, w).max_abs_err);
        }
        println!("{} extra random trials, max abs err {:.3e}", trials, worst);
    }
    if worst <= 1e-6 {
        println!("verdict: direct convolution and shift+multiply-accumulate agree within 1e-6");
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "decomposition disagrees with direct convolution: max abs err {:.3e}",
            worst
        )))
    }
}

fn parse_weights(s: &str) -> Result<(f32, f32, f32)> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("weights `{}` are not three numbers", s)))?;
    if parts.len() != 3 {
        return Err(Error::Argument(format!(
            "weights `{}` have {} entries, expected 3",
            s,
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}
