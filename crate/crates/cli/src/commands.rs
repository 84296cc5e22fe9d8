use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ssdg_core::checkpoint::load_checkpoint;
use ssdg_core::config::TrainConfig;
use ssdg_core::data::{load_registry, make_synthetic_registry, read_manifest, write_registry, Domain, SyntheticDomainSpec};
use ssdg_core::metrics::{pseudo_label_quality, PseudoMode};
use ssdg_core::model::{NetState, NormLayer, SegmentationNet};
use ssdg_core::trainer::{evaluate_domains, inference_net};
use ssdg_core::Error;

use crate::plot::{self, Series};
use crate::run::prepare_data;
use crate::{DiagnoseArgs, EvalArgs, GenerateArgs, PlotStatsArgs};

pub type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(std::io::stdout(), $($t)*)?
    };
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    if args.domains < 2 {
        return Err(Error::Dataset(format!(
            "--domains {} is too few: training needs at least one source domain plus one unseen domain",
            args.domains
        ))
        .into());
    }
    let spec = SyntheticDomainSpec {
        image_size: args.size,
        n_classes: args.classes,
        seed: args.seed,
        ..SyntheticDomainSpec::default()
    };
    let registry = make_synthetic_registry(&spec, args.domains, args.n)?;
    write_registry(&registry, &args.out, Some(&spec))?;
    out!(
        "wrote {} image/mask pairs in {} domains to {}",
        registry.len(),
        registry.domain_count(),
        args.out.display()
    );
    Ok(())
}

fn stored_config(meta: &BTreeMap<String, serde_json::Value>) -> CliResult<Option<TrainConfig>> {
    match meta.get("config") {
        Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
        None => Ok(None),
    }
}

fn describe(net: &SegmentationNet) -> CliResult<()> {
    let plain = net.architecture().plain_param_count()?;
    let inference = inference_net(net)?;
    let mixing: usize = inference.norm_layers().map(|l| match l {
        NormLayer::Stripped(s) if s.mix.trainable => s.channels,
        _ => 0,
    }).sum();
    let state = match net.state() {
        NetState::Plain => "plain".to_string(),
        NetState::Converted { n_domains } => format!("converted ({n_domains} domains)"),
        NetState::Stripped => "stripped".to_string(),
    };
    out!("state                {state}");
    out!("normalization sites  {}", net.norm_site_count());
    out!("training params      {}", net.learnable_param_count());
    out!("inference params     {}", inference.learnable_param_count());
    out!("unconverted params   {plain}");
    out!("mixing logits        {mixing}");
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    if args.describe {
        return describe(&ckpt.net);
    }
    let data = args.data.as_ref().ok_or_else(|| Error::invalid("--data is required"))?;
    let registry = load_registry(data)?;
    let ids = if args.unseen.is_empty() {
        let cfg = stored_config(&ckpt.metadata)?.ok_or_else(|| {
            Error::checkpoint("config", "not stored in this checkpoint; pass --unseen")
        })?;
        vec![cfg.unseen_domain]
    } else {
        args.unseen.clone()
    };
    let test: Vec<&Domain> = ids.iter().map(|&id| registry.domain(id)).collect::<Result<_, _>>()?;
    if let Some(trained) = ckpt.metadata.get("training_domains").and_then(|v| v.as_array()) {
        for d in &test {
            if trained.iter().any(|n| n.as_str() == Some(d.name.as_str())) {
                log::warn!("domain `{}` was a training domain of this checkpoint", d.name);
            }
        }
    }
    let net = inference_net(&ckpt.net)?;
    let report = evaluate_domains(&net, &test, registry.n_classes(), args.batch)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => fs::write(path, &csv).map_err(|e| Error::io(path, e))?,
        None => write!(std::io::stdout(), "{csv}")?,
    }
    Ok(())
}

/// Training domain names stored with the checkpoint, else from the dataset, else numbered.
fn domain_names(meta: &BTreeMap<String, serde_json::Value>, data: Option<&Path>, k: usize) -> CliResult<Vec<String>> {
    if let Some(names) = meta.get("training_domains").and_then(|v| v.as_array()) {
        let names: Vec<String> = names.iter().filter_map(|n| n.as_str().map(String::from)).collect();
        if names.len() == k {
            return Ok(names);
        }
    }
    if let Some(root) = data {
        let manifest = read_manifest(root)?;
        let mut names = manifest.domains;
        if let Some(cfg) = stored_config(meta)? {
            if cfg.unseen_domain >= 1 && cfg.unseen_domain <= names.len() {
                names.remove(cfg.unseen_domain - 1);
            }
        }
        if names.len() == k {
            return Ok(names);
        }
    }
    Ok((1..=k).map(|d| format!("domain{d}")).collect())
}

pub fn plot_stats(args: &PlotStatsArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let k = match ckpt.net.state() {
        NetState::Converted { n_domains } => *n_domains,
        _ => {
            return Err(Error::invalid("plot-stats needs a converted checkpoint with per-domain branches").into())
        }
    };
    let names = domain_names(&ckpt.metadata, args.data.as_deref(), k)?;
    let known: Vec<&str> = ckpt.net.norm_layers().map(|l| l.name()).collect();
    if let Some(bad) = args.sites.iter().find(|s| !known.contains(&s.as_str())) {
        return Err(Error::invalid(format!("unknown site `{bad}`; sites are {}", known.join(", "))).into());
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    out!("site,max_mean_gap,max_var_gap,file");
    for layer in ckpt.net.norm_layers() {
        let NormLayer::Site(site) = layer else { continue };
        if !args.sites.is_empty() && !args.sites.iter().any(|s| s == &site.name) {
            continue;
        }
        let series = |f: fn(&ssdg_core::norm::BranchParams) -> &Vec<f32>| -> Vec<Series> {
            site.individual
                .iter()
                .zip(&names)
                .map(|(b, n)| Series { label: n.clone(), values: f(b).clone() })
                .collect()
        };
        let means = series(|b| &b.running_mean);
        let vars = series(|b| &b.running_var);
        let gap = |s: &[Series]| -> f32 {
            (0..site.channels)
                .map(|c| {
                    let (lo, hi) = s.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), x| {
                        (lo.min(x.values[c]), hi.max(x.values[c]))
                    });
                    hi - lo
                })
                .fold(0.0, f32::max)
        };
        let path = args.out.join(format!("{}.{}", site.name, args.format.extension()));
        plot::stats_figure(&path, args.format, &site.name, &means, &vars)?;
        out!("{},{:.6},{:.6},{}", site.name, gap(&means), gap(&vars), path.display());
    }
    Ok(())
}

pub fn diagnose_pseudo(args: &DiagnoseArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let cfg = stored_config(&ckpt.metadata)?
        .ok_or_else(|| Error::checkpoint("config", "not stored in this checkpoint"))?;
    let (_, _, split) = prepare_data(&args.data, &cfg)?;
    let t = args.t.unwrap_or(cfg.t_ensemble);
    let individual = pseudo_label_quality(&ckpt.net, &split, PseudoMode::IfEnsemble, t, args.per_domain)?;
    let mixed = match &args.baseline {
        Some(path) => {
            let base = load_checkpoint(path, None)?;
            pseudo_label_quality(&base.net, &split, PseudoMode::SingleBn, t, args.per_domain)?
        }
        None => pseudo_label_quality(&ckpt.net, &split, PseudoMode::SingleBn, t, args.per_domain)?,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut csv = String::from("domain,dice_individual,dice_mixed\n");
    for (a, b) in individual.rows.iter().zip(&mixed.rows) {
        csv.push_str(&format!("{},{:.6},{:.6}\n", a.domain, a.dice, b.dice));
    }
    csv.push_str(&format!("mean,{:.6},{:.6}\n", individual.mean(), mixed.mean()));
    let table = args.out.join("pseudo_quality.csv");
    fs::write(&table, &csv).map_err(|e| Error::io(&table, e))?;
    let figure = args.out.join(format!("pseudo_quality.{}", args.format.extension()));
    let labels: Vec<String> = individual.rows.iter().map(|r| r.domain.clone()).collect();
    let ind: Vec<f64> = individual.rows.iter().map(|r| r.dice).collect();
    let mix: Vec<f64> = mixed.rows.iter().map(|r| r.dice).collect();
    plot::paired_bars(&figure, args.format, &labels, &ind, &mix)?;
    write!(std::io::stdout(), "{csv}")?;
    Ok(())
}
