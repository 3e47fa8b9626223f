//! One function per subcommand.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use advcorr_core::attacks::{generate_adv_dataset, AdversarialSet, AdversarialSetHeader};
use advcorr_core::data::{dataset_checksum, load_checkpoint, network_checksum, save_checkpoint};
use advcorr_core::finetune::{pool_to_json, run_finetune_observed, write_history_csv};
use advcorr_core::trainer::{pretrain, retrain_with_adversarial};
use advcorr_core::{Architecture, CheckpointMeta, Error, LabeledDataset, Network};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::report::{delta, delta_header, delta_row, metrics_table, Battery, Metrics};
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

/// Finetune overrides taken from the command line.
#[derive(Debug, Default, Clone)]
pub struct FinetuneOverrides {
    pub omega: Option<f64>,
    pub iters: Option<usize>,
    pub delta: Option<f64>,
    pub epsilon_bar: Option<f64>,
    pub xi: Option<f64>,
    pub block_p: Option<f64>,
    pub block_t: Option<usize>,
}

impl FinetuneOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let ft = &mut cfg.finetune;
        if let Some(v) = self.omega {
            ft.omega = v;
        }
        if let Some(v) = self.iters {
            ft.max_iterations = v;
        }
        if let Some(v) = self.delta {
            ft.delta = v;
        }
        if let Some(v) = self.epsilon_bar {
            ft.epsilon_bar = v;
        }
        if let Some(v) = self.xi {
            ft.xi = v;
        }
        if self.block_p.is_some() || self.block_t.is_some() {
            let mut block = ft.block.clone().unwrap_or_default();
            if let Some(p) = self.block_p {
                block.fix_ratio = p;
            }
            if let Some(t) = self.block_t {
                block.sweeps = t;
            }
            ft.block = Some(block);
        }
    }
}

struct Session {
    cfg: RunConfig,
    train: LabeledDataset,
    test: LabeledDataset,
}

impl Session {
    fn open(cfg: RunConfig) -> CliResult<Self> {
        fs::create_dir_all(&cfg.out)
            .map_err(|e| CliError::data(format!("{}: {e}", cfg.out.display())))?;
        let (train, test) = cfg.dataset.load()?;
        Ok(Self { cfg, train, test })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn battery<'a>(
        &'a self,
        pgd: &'a advcorr_core::AttackConfig,
        fgsm: &'a advcorr_core::AttackConfig,
        adv: Option<&'a AdversarialSet>,
    ) -> Battery<'a> {
        Battery {
            train: &self.train,
            test: &self.test,
            pgd,
            fgsm,
            adv: adv.map(|a| a.examples.as_slice()),
        }
    }

    fn meta(&self, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            seed: Some(seed),
            config: self.cfg.to_value(),
            dataset_checksum: Some(dataset_checksum(&self.train)),
        }
    }

    fn load_model(&self, path: &Path) -> CliResult<Network> {
        let net = load_checkpoint(path)?.network;
        if net.input_dim() != self.train.input_dim()
            || net.num_classes() != self.train.num_classes()
        {
            return Err(CliError::data(format!(
                "{}: model maps {} inputs to {} classes but the dataset has {} inputs and {} classes",
                path.display(),
                net.input_dim(),
                net.num_classes(),
                self.train.input_dim(),
                self.train.num_classes()
            )));
        }
        Ok(net)
    }

    fn save_model(&self, net: &Network, seed: u64, name: &str) -> CliResult<PathBuf> {
        let path = self.out(name);
        save_checkpoint(net, &self.meta(seed), self.cfg.checkpoint_encoding, &path)?;
        Ok(path)
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn metrics_value(m: &Metrics) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}

/// Loads an adversarial set and checks that it was generated for `net`.
fn load_bound_adv(path: &Path, net: &Network) -> CliResult<AdversarialSet> {
    let set = AdversarialSet::load(path)?;
    if set.examples.is_empty() {
        return Err(CliError::data(format!(
            "{}: adversarial set is empty",
            path.display()
        )));
    }
    let checksum = network_checksum(net);
    if set.header.model_checksum != checksum {
        return Err(CliError::data(format!(
            "{}: adversarial set was generated for model {} but the checkpoint is {}; regenerate it with `advcorr attack`",
            path.display(),
            set.header.model_checksum,
            checksum
        )));
    }
    Ok(set)
}

pub fn pretrain_cmd(cfg: RunConfig) -> CliResult<()> {
    let s = Session::open(cfg)?;
    let mut dims = vec![s.train.input_dim()];
    dims.extend(&s.cfg.hidden_layers);
    dims.push(s.train.num_classes());
    let arch = Architecture::new(dims)?;
    let net = pretrain(&arch, &s.train, &s.cfg.train)?;
    let path = s.save_model(&net, s.cfg.train.seed, "model.json")?;

    let (pgd, fgsm) = s.cfg.eval.resolve()?;
    let metrics = s.battery(&pgd, &fgsm, None).run(&net)?;
    let mut report = metrics_value(&metrics);
    report["model_checksum"] = json!(network_checksum(&net));
    report["config"] = s.cfg.to_value();
    write_json(&s.out("pretrain_metrics.json"), &report)?;

    print!("{}", metrics_table(&[("pretrained", &metrics)]));
    println!("checkpoint: {}", path.display());
    Ok(())
}

pub fn attack_cmd(cfg: RunConfig, checkpoint: &Path) -> CliResult<()> {
    let s = Session::open(cfg)?;
    let net = s.load_model(checkpoint)?;
    let attack = s.cfg.adversarial_attack()?;
    let examples = generate_adv_dataset(&net, &s.train, s.cfg.adv_size, &attack)?;
    let set = AdversarialSet {
        header: AdversarialSetHeader {
            epsilon: attack.epsilon,
            attack,
            model_checksum: network_checksum(&net),
            num_classes: net.num_classes(),
            config: s.cfg.to_value(),
        },
        examples,
    };
    let path = s.out("adv.json");
    set.save(&path)?;
    println!(
        "{} adversarial examples ({} per label) written to {}",
        set.examples.len(),
        set.examples.len() / net.num_classes(),
        path.display()
    );
    Ok(())
}

pub fn finetune_cmd(
    cfg: RunConfig,
    checkpoint: &Path,
    adv_path: &Path,
    dump_params: bool,
) -> CliResult<()> {
    let s = Session::open(cfg)?;
    let net = s.load_model(checkpoint)?;
    let adv = load_bound_adv(adv_path, &net)?;
    let (pgd, fgsm) = s.cfg.eval.resolve()?;
    let battery = s.battery(&pgd, &fgsm, Some(&adv));
    let before = battery.run(&net)?;

    let ft = &s.cfg.finetune;
    let outcome = run_finetune_observed(&net, &adv.examples, &s.train, ft, &mut |p| {
        let r = p.record;
        eprintln!(
            "k={:>3}  V={:<12.6} loss={:<10.6} best V={:<12.6} qp={:?} ({} sweeps, {} cuts)  {:.1}s",
            r.k, r.violation_iterate, r.loss_iterate, r.best_violation, r.qp_status, p.qp_sweeps, p.num_cuts, r.wall_time_s
        );
    })?;
    let after = battery.run(&outcome.network)?;

    let model_path = s.save_model(&outcome.network, ft.seed, "finetuned.json")?;
    let history_path = s.out("history.csv");
    let file = fs::File::create(&history_path)
        .map_err(|e| CliError::data(format!("{}: {e}", history_path.display())))?;
    write_history_csv(&outcome.history, BufWriter::new(file))?;

    let source = network_checksum(&net);
    let tuned = network_checksum(&outcome.network);
    let mut pool = pool_to_json(&outcome, dump_params);
    pool["model_checksum"] = json!(source);
    pool["finetuned_checksum"] = json!(tuned);
    pool["config"] = s.cfg.to_value();
    write_json(&s.out("pool.json"), &pool)?;

    let selected = outcome.selected_candidate();
    let report = json!({
        "model_checksum": source,
        "finetuned_checksum": tuned,
        "iterations_run": outcome.history.len(),
        "stop": outcome.stop,
        "selected": {"iterate": selected.origin.iterate, "alpha": selected.origin.alpha},
        "before": metrics_value(&before),
        "after": metrics_value(&after),
        "delta": serde_json::to_value(delta(&before, &after)).expect("delta serializes"),
        "history_csv": history_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "config": s.cfg.to_value(),
    });
    write_json(&s.out("finetune_report.json"), &report)?;

    if outcome.history.len() < ft.max_iterations {
        eprintln!(
            "stopped after {} of {} iterations ({:?})",
            outcome.history.len(),
            ft.max_iterations,
            outcome.stop
        );
    }
    print!(
        "{}",
        metrics_table(&[("before", &before), ("after", &after)])
    );
    println!();
    print!("{}", delta_header());
    print!("{}", delta_row("fine-tuned", &before, &after));
    println!(
        "selected iterate {} (alpha {}); checkpoint: {}",
        selected.origin.iterate,
        selected.origin.alpha.map_or("-".into(), |a| format!("{a}")),
        model_path.display()
    );
    Ok(())
}

pub fn baseline_cmd(cfg: RunConfig, checkpoint: &Path, adv_path: &Path) -> CliResult<()> {
    let s = Session::open(cfg)?;
    let net = s.load_model(checkpoint)?;
    let adv = load_bound_adv(adv_path, &net)?;
    let (pgd, fgsm) = s.cfg.eval.resolve()?;
    let battery = s.battery(&pgd, &fgsm, None);
    let before = battery.run(&net)?;
    let retrained =
        retrain_with_adversarial(&net.architecture(), &s.train, &adv.examples, &s.cfg.train)?;
    let after = battery.run(&retrained)?;
    let model_path = s.save_model(&retrained, s.cfg.train.seed, "baseline.json")?;

    let report = json!({
        "model_checksum": network_checksum(&net),
        "baseline_checksum": network_checksum(&retrained),
        "adv_size": adv.examples.len(),
        "pretrained": metrics_value(&before),
        "retrained": metrics_value(&after),
        "delta": serde_json::to_value(delta(&before, &after)).expect("delta serializes"),
        "config": s.cfg.to_value(),
    });
    write_json(&s.out("baseline_report.json"), &report)?;

    print!("{}", delta_header());
    print!("{}", delta_row("pretrained", &before, &before));
    print!(
        "{}",
        delta_row(&format!("+{} adv", adv.examples.len()), &before, &after)
    );
    println!("checkpoint: {}", model_path.display());
    Ok(())
}

pub fn eval_cmd(cfg: RunConfig, checkpoint: &Path, adv_path: Option<&Path>) -> CliResult<()> {
    let s = Session::open(cfg)?;
    let net = s.load_model(checkpoint)?;
    let adv = adv_path.map(AdversarialSet::load).transpose()?;
    let checksum = network_checksum(&net);
    if let Some(set) = &adv {
        if set.header.model_checksum != checksum {
            eprintln!(
                "note: the adversarial set was generated for model {}; V is measured on model {}",
                set.header.model_checksum, checksum
            );
        }
    }
    let (pgd, fgsm) = s.cfg.eval.resolve()?;
    let metrics = s.battery(&pgd, &fgsm, adv.as_ref()).run(&net)?;
    let mut report = metrics_value(&metrics);
    report["model_checksum"] = json!(checksum);
    if let Some(set) = &adv {
        report["adv_model_checksum"] = json!(set.header.model_checksum);
    }
    report["config"] = s.cfg.to_value();
    write_json(&s.out("eval_report.json"), &report)?;
    print!("{}", metrics_table(&[("model", &metrics)]));
    Ok(())
}
