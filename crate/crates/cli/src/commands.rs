use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use shiftadd_core::checkpoint;
use shiftadd_core::cost::{audit_model, count_ops, energy, energy_report, total_count, EnergyReport, Formats, Ratios};
use shiftadd_core::data::save_dataset;
use shiftadd_core::model::{evaluate, EvalReport, FeedForward, StepRecord};
use shiftadd_core::{CostTable, Dataset, LayerDesc, Mlp, Module, MoeConfig, OpCount, Rng, Stage2Plan, Tensor, Vit};

use crate::config::{LatSource, RunConfig};
use crate::{CliError, SplitArg};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

/// Creates the output directory and echoes the resolved config into it.
pub fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.run.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(out)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerShares {
    pub name: String,
    pub shares: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitReport {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
    pub dispatch: Vec<LayerShares>,
}

impl From<EvalReport> for SplitReport {
    fn from(r: EvalReport) -> Self {
        Self {
            accuracy: r.accuracy,
            loss: r.loss,
            samples: r.samples,
            dispatch: r
                .dispatch
                .into_iter()
                .map(|d| LayerShares {
                    name: d.name,
                    shares: d.shares,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Accuracies {
    pub train: SplitReport,
    pub test: SplitReport,
}

fn accuracies(model: &mut Vit, train: &Dataset, test: &Dataset) -> Result<Accuracies, CliError> {
    Ok(Accuracies {
        train: evaluate(model, train)?.into(),
        test: evaluate(model, test)?.into(),
    })
}

fn test_shares(acc: &Accuracies) -> Vec<Vec<f64>> {
    acc.test.dispatch.iter().map(|d| d.shares.clone()).collect()
}

/// Per-step loss trace; MoE models add one share column per layer and
/// expert.
pub fn write_metrics(path: &Path, model: &Vit, trace: &[StepRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let names: Vec<String> = model.moe_plans().into_iter().map(|(n, _)| n).collect();
    let experts = 2;
    let mut header = vec!["step".to_string(), "loss".into(), "cls_loss".into(), "aux_loss".into()];
    for n in &names {
        for e in 0..experts {
            header.push(format!("{n}.share{e}"));
        }
    }
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.step.to_string(),
            r.loss.to_string(),
            r.cls_loss.to_string(),
            r.aux_loss.to_string(),
        ];
        for k in 0..names.len() {
            for e in 0..experts {
                row.push(
                    r.shares
                        .get(k)
                        .and_then(|s| s.get(e))
                        .map_or(String::new(), f64::to_string),
                );
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    steps: usize,
    model_step: u64,
    final_loss: Option<f64>,
    #[serde(flatten)]
    accuracy: Accuracies,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let (train_set, test_set) = cfg.datasets()?;
    let mut model = match resume {
        Some(p) => {
            let mut m = checkpoint::load(p)?;
            let lat = m.cfg.moe.lat.clone();
            m.set_moe_config(MoeConfig {
                lat,
                ..cfg.moe_config()
            })?;
            m
        }
        None => Vit::new(cfg.model_config())?,
    };
    let out = prepare_out(cfg)?;
    let trace = shiftadd_core::model::train(&mut model, &train_set, &cfg.train_config())?;
    write_metrics(&out.join(METRICS_CSV), &model, &trace)?;
    let accuracy = accuracies(&mut model, &train_set, &test_set)?;
    checkpoint::save(&mut model, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join("metrics.json"),
        &TrainSummary {
            stage: model.cfg.stage,
            steps: trace.len(),
            model_step: model.step,
            final_loss: trace.last().map(|r| r.loss),
            accuracy,
        },
    )
}

#[derive(Serialize)]
struct ReparamSummary {
    stage: u8,
    plan: Option<Stage2Plan>,
    moe: Option<MoeConfig>,
    before: Accuracies,
    converted: Accuracies,
    after: Accuracies,
    ops_before: OpCount,
    ops_after: OpCount,
    mults_removed: i64,
}

pub fn reparam(cfg: &RunConfig, ckpt: &Path, stage: u8) -> Result<(), CliError> {
    let mut model = checkpoint::load(ckpt)?;
    if model.cfg.stage + 1 != stage {
        return Err(CliError::Usage(format!(
            "checkpoint is at stage {}; stage {stage} needs stage {}",
            model.cfg.stage,
            stage.saturating_sub(1)
        )));
    }
    let (train_set, test_set) = cfg.datasets()?;
    let before = accuracies(&mut model, &train_set, &test_set)?;
    let ops_before = total_count(&audit_model(&model, 1, &test_shares(&before)));
    let (plan, moe) = if stage == 2 {
        let moe = resolve_moe(cfg, &model)?;
        model.set_moe_config(moe.clone())?;
        (Some(cfg.plan()), Some(moe))
    } else {
        (None, None)
    };
    shiftadd_core::model::reparam(&mut model, stage, cfg.plan())?;
    let converted = accuracies(&mut model, &train_set, &test_set)?;
    let out = prepare_out(cfg)?;
    let trace = shiftadd_core::model::train(&mut model, &train_set, &cfg.finetune_config())?;
    write_metrics(&out.join(METRICS_CSV), &model, &trace)?;
    let after = accuracies(&mut model, &train_set, &test_set)?;
    let ops_after = total_count(&audit_model(&model, 1, &test_shares(&after)));
    checkpoint::save(&mut model, &out.join(CHECKPOINT_FILE))?;
    write_json(
        &out.join("reparam.json"),
        &ReparamSummary {
            stage,
            plan,
            moe,
            before,
            converted,
            after,
            mults_removed: ops_before.total_mults() as i64 - ops_after.total_mults() as i64,
            ops_before,
            ops_after,
        },
    )
}

/// MoE settings for a stage-2 conversion, with latencies from the
/// configured source.
pub fn resolve_moe(cfg: &RunConfig, model: &Vit) -> Result<MoeConfig, CliError> {
    let lat = match cfg.moe.lat_source {
        LatSource::Fixed => cfg.moe.lat.clone(),
        LatSource::Cost => cost_latencies(model, &cfg.cost_table()?, &cfg.cost.formats)?,
        LatSource::Measured => measured_latencies(model, cfg.seed())?,
    };
    Ok(MoeConfig {
        lat,
        ..cfg.moe_config()
    })
}

fn mlp_dims(model: &Vit) -> (u64, u64) {
    let b = &model.cfg.blocks[0];
    (b.d as u64, b.hidden() as u64)
}

/// Per-token compute energy of a dense MLP and of its shift counterpart.
pub fn cost_latencies(model: &Vit, table: &CostTable, formats: &Formats) -> Result<Vec<f64>, CliError> {
    let (d, h) = mlp_dims(model);
    let per = |dense: bool| -> Result<f64, CliError> {
        let descs = if dense {
            [
                LayerDesc::DenseLinear { m: 1, k: d, n: h },
                LayerDesc::DenseLinear { m: 1, k: h, n: d },
            ]
        } else {
            [
                LayerDesc::ShiftLinear { m: 1, k: d, n: h },
                LayerDesc::ShiftLinear { m: 1, k: h, n: d },
            ]
        };
        let mut total = 0.0;
        for desc in &descs {
            total += energy(&count_ops(desc), table, formats)?.compute_pj;
        }
        Ok(total)
    };
    Ok(vec![per(true)?, per(false)?])
}

const PROBE_TOKENS: usize = 256;
const PROBE_REPS: usize = 15;

/// Median forward time of the first convertible MLP in dense and shift form.
pub fn measured_latencies(model: &Vit, seed: u64) -> Result<Vec<f64>, CliError> {
    let mlp = model
        .blocks
        .iter()
        .zip(&model.cfg.blocks)
        .find(|(_, c)| !c.exempt)
        .and_then(|(b, _)| match &b.ff {
            FeedForward::Mlp(m) => Some(m.clone()),
            FeedForward::Moe(_) => None,
        })
        .ok_or_else(|| CliError::Usage("no convertible MLP to time".into()))?;
    let mut shift = mlp.clone();
    shift.to_shift(model.cfg.quant)?;
    let x = Tensor::randn([PROBE_TOKENS, model.cfg.dim()], 1.0, &mut Rng::new(seed));
    let time = |m: &mut Mlp| -> Result<f64, CliError> {
        m.forward(&x, false)?;
        let mut t = Vec::with_capacity(PROBE_REPS);
        for _ in 0..PROBE_REPS {
            let start = Instant::now();
            m.forward(&x, false)?;
            t.push(start.elapsed().as_secs_f64());
        }
        Ok(crate::bench::median(&mut t))
    };
    let mut dense = mlp;
    Ok(vec![time(&mut dense)?.max(1e-12), time(&mut shift)?.max(1e-12)])
}

#[derive(Serialize)]
struct EvalSummary {
    stage: u8,
    #[serde(flatten)]
    accuracy: Accuracies,
}

pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<(), CliError> {
    let mut model = checkpoint::load(ckpt)?;
    let (train_set, test_set) = cfg.datasets()?;
    let accuracy = accuracies(&mut model, &train_set, &test_set)?;
    let out = prepare_out(cfg)?;
    write_json(
        &out.join("eval.json"),
        &EvalSummary {
            stage: model.cfg.stage,
            accuracy,
        },
    )
}

#[derive(Serialize)]
struct EnergySummary {
    stage: u8,
    formats: Formats,
    ops: OpCount,
    #[serde(flatten)]
    report: EnergyReport,
    /// INT32 mult energy and area over shift and add.
    ratios: Ratios,
}

pub fn energy_cmd(cfg: &RunConfig, ckpt: &Path) -> Result<(), CliError> {
    let mut model = checkpoint::load(ckpt)?;
    let table = cfg.cost_table()?;
    let shares: Vec<Vec<f64>> = if model.moe_plans().is_empty() {
        Vec::new()
    } else {
        let (_, test_set) = cfg.datasets()?;
        evaluate(&mut model, &test_set)?
            .dispatch
            .into_iter()
            .map(|d| d.shares)
            .collect()
    };
    let audit = audit_model(&model, 1, &shares);
    let formats = cfg.cost.formats;
    let report = energy_report(&audit, &table, &formats)?;
    let out = prepare_out(cfg)?;

    let mut w = csv::Writer::from_path(out.join("energy.csv"))?;
    w.write_record(["class", "compute_pj", "movement_pj", "total_pj"])?;
    for c in &report.breakdown {
        let class = serde_json::to_value(c.class)?;
        w.write_record([
            class.as_str().unwrap_or_default().to_string(),
            c.energy.compute_pj.to_string(),
            c.energy.movement_pj.to_string(),
            c.energy.total_pj.to_string(),
        ])?;
    }
    w.write_record([
        "total".to_string(),
        report.energy.compute_pj.to_string(),
        report.energy.movement_pj.to_string(),
        report.energy.total_pj.to_string(),
    ])?;
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("energy_layers.csv"))?;
    w.write_record([
        "name",
        "class",
        "mults",
        "dense_adds",
        "shifts",
        "shift_adds",
        "adds",
        "scale_mults",
        "dram_bytes",
        "sram_bytes",
        "compute_pj",
        "movement_pj",
        "total_pj",
    ])?;
    for a in &audit {
        let e = energy(&a.count, &table, &formats)?;
        let c = &a.count;
        let class = serde_json::to_value(a.class)?;
        let mut row = vec![a.name.clone(), class.as_str().unwrap_or_default().to_string()];
        row.extend(
            [
                c.mults,
                c.dense_adds,
                c.shifts,
                c.shift_adds,
                c.adds,
                c.scale_mults,
                c.dram_bytes,
                c.sram_bytes,
            ]
            .iter()
            .map(u64::to_string),
        );
        row.extend([e.compute_pj, e.movement_pj, e.total_pj].iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    write_json(
        &out.join("energy.json"),
        &EnergySummary {
            stage: model.cfg.stage,
            formats,
            ops: total_count(&audit),
            report,
            ratios: table.int32_ratios()?,
        },
    )
}

#[derive(Serialize)]
struct DispatchSummary {
    layer: String,
    split: &'static str,
    images: usize,
    grid: usize,
    shares: Vec<f64>,
    layers: Vec<LayerShares>,
    /// Share of foreground tokens sent to the Mult expert (index 0).
    foreground_mult_share: Option<f64>,
    background_mult_share: Option<f64>,
}

/// Mult-expert share of foreground and background tokens in `expert_of`
/// (image-major, `fg` flattened the same way).
pub fn foreground_shares(expert_of: &[usize], fg: &[bool]) -> (Option<f64>, Option<f64>) {
    let mut n = [[0usize; 2]; 2];
    for (&e, &f) in expert_of.iter().zip(fg) {
        n[f as usize][0] += (e == 0) as usize;
        n[f as usize][1] += 1;
    }
    let share = |k: usize| (n[k][1] > 0).then(|| n[k][0] as f64 / n[k][1] as f64);
    (share(1), share(0))
}

pub fn dispatch_map(cfg: &RunConfig, ckpt: &Path, split: SplitArg) -> Result<(), CliError> {
    let mut model = checkpoint::load(ckpt)?;
    if model.moe_plans().is_empty() {
        return Err(CliError::Usage(format!("{} has no MoE layer", ckpt.display())));
    }
    let (train_set, test_set) = cfg.datasets()?;
    let (data, split_name) = match split {
        SplitArg::Train => (&train_set, "train"),
        SplitArg::Test => (&test_set, "test"),
    };
    let report = evaluate(&mut model, data)?;
    let first = &report.dispatch[0];
    let patch = model.cfg.patch;
    let grid = model.cfg.img / patch;
    let tokens = grid * grid;
    let fg: Option<Vec<bool>> = data.token_foreground(patch).map(|v| v.into_iter().flatten().collect());
    let out = prepare_out(cfg)?;

    let mut w = csv::Writer::from_path(out.join("dispatch.csv"))?;
    w.write_record(["image", "label", "token", "row", "col", "expert", "foreground"])?;
    for (i, &e) in first.expert_of.iter().enumerate() {
        let (img, t) = (i / tokens, i % tokens);
        w.write_record([
            img.to_string(),
            data.labels[img].to_string(),
            t.to_string(),
            (t / grid).to_string(),
            (t % grid).to_string(),
            e.to_string(),
            fg.as_ref().map_or(String::new(), |f| (f[i] as u8).to_string()),
        ])?;
    }
    w.flush()?;

    let (fg_share, bg_share) = match &fg {
        Some(f) => foreground_shares(&first.expert_of, f),
        None => (None, None),
    };
    write_json(
        &out.join("dispatch.json"),
        &DispatchSummary {
            layer: first.name.clone(),
            split: split_name,
            images: data.len(),
            grid,
            shares: first.shares.clone(),
            layers: SplitReport::from(report).dispatch,
            foreground_mult_share: fg_share,
            background_mult_share: bg_share,
        },
    )
}

pub fn gen_data(cfg: &RunConfig, path: Option<&Path>) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let ds = shiftadd_core::data::gen_shapes(&cfg.synthetic())?;
    let dest = path.map_or_else(|| out.join("dataset.bin"), Path::to_path_buf);
    save_dataset(&ds, &dest)?;
    Ok(())
}
