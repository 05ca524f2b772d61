use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataSource, FinetuneInit, PipelineConfig, PipelineKind};
use super::data::{load_csv, Dataset, SyntheticSpec};
use super::{derive_seed, evaluate, HarnessError, Result};
use crate::accountant::{calibrate_shared_sigma, Accountant, PrivacyBudget, PrivacyReport};
use crate::compress::{dpkd, private_finetune, structured_dpimp, unstructured_dpimp, DpkdConfig};
use crate::dp::{train_sgd_batched, DpSgdConfig};
use crate::model::{init_student, InitStrategy, LayeredClassifier, ModelDims};

/// Train, test and optional public splits for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub task: String,
    pub train: Dataset,
    pub test: Dataset,
    pub public: Option<Dataset>,
}

impl PreparedData {
    pub fn from_config(src: &DataSource) -> Result<Self> {
        match src {
            DataSource::Synthetic {
                classes,
                n_train,
                n_public,
                n_test,
                d_in,
                separation,
                clusters_per_class,
                data_seed,
                public_shift,
            } => {
                let spec = SyntheticSpec {
                    classes: *classes,
                    d_in: *d_in,
                    separation: *separation,
                    clusters_per_class: *clusters_per_class,
                    seed: *data_seed,
                };
                Ok(Self {
                    task: format!("synthetic-{classes}c"),
                    train: spec.sample("train", *n_train, 0)?,
                    test: spec.sample("test", *n_test, 1)?,
                    public: if *n_public > 0 {
                        Some(spec.sample_shifted("public", *n_public, 2, *public_shift)?)
                    } else {
                        None
                    },
                })
            }
            DataSource::Csv {
                classes,
                train,
                test,
                public,
            } => {
                let tr = load_csv(train, *classes)?;
                let te = match test {
                    Some(p) => load_csv(p, *classes)?,
                    None => {
                        log::warn!("no test split configured; evaluating on the training split");
                        tr.clone()
                    }
                };
                let pb = public.as_ref().map(|p| load_csv(p, *classes)).transpose()?;
                if te.d_in() != tr.d_in() || pb.as_ref().is_some_and(|p| p.d_in() != tr.d_in()) {
                    return Err(HarnessError::Data("splits disagree on feature width".into()));
                }
                Ok(Self {
                    task: tr.name.clone(),
                    train: tr,
                    test: te,
                    public: pb,
                })
            }
        }
    }
}

/// Builds the teacher and pre-trains it without privacy on the public split.
pub fn pretrain_teacher(cfg: &PipelineConfig, data: &PreparedData) -> Result<LayeredClassifier> {
    let dims = ModelDims {
        d_in: data.train.d_in(),
        hidden: cfg.model.hidden,
        classes: data.train.classes,
    };
    let mut teacher =
        LayeredClassifier::random(dims, cfg.model.blocks, derive_seed(cfg.seed, "teacher-init"));
    teacher.activation = cfg.model.activation;
    match &data.public {
        Some(p) if cfg.pretrain.epochs > 0 => {
            let loss = train_sgd_batched(
                &mut teacher,
                &p.features,
                &p.labels,
                cfg.pretrain.learning_rate,
                cfg.pretrain.batch_size,
                cfg.pretrain.epochs,
                derive_seed(cfg.seed, "pretrain"),
            )?;
            log::info!("pre-training done, last batch loss {loss:.4}");
        }
        _ => log::warn!("no public split or zero pre-training epochs; teacher starts from random weights"),
    }
    Ok(teacher)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub task: String,
    pub pipeline: String,
    pub init_strategy: String,
    pub sparsity: f64,
    pub block_count: usize,
    pub eval_accuracy: f64,
    pub steps: u64,
    pub seed: u64,
    pub noise_multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub model: LayeredClassifier,
    pub metrics: Metrics,
    pub privacy: PrivacyReport,
}

/// Step counts and sampling rates of every private phase, in order.
fn plan(cfg: &PipelineConfig, n: usize) -> Vec<(f64, u64)> {
    let dp = cfg.dp.to_dpsgd(0);
    let q = dp.sample_rate(n);
    match cfg.pipeline {
        PipelineKind::Dpkd => {
            let tf = cfg.kd.teacher_fraction;
            vec![
                (q, dp.steps_for_epochs(n, cfg.epochs * tf)),
                (q, dp.steps_for_epochs(n, cfg.epochs * (1.0 - tf))),
            ]
        }
        _ => vec![(q, dp.steps_for_epochs(n, cfg.epochs))],
    }
}

/// Loads data, pre-trains the teacher and runs the pipeline.
pub fn run(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = PreparedData::from_config(&cfg.data)?;
    let budget = cfg.privacy.budget(data.train.len())?;
    // fail before any training when the budget cannot be met
    calibrate_shared_sigma(budget, &plan(cfg, data.train.len()))?;
    let teacher = pretrain_teacher(cfg, &data)?;
    run_with(cfg, &data, &teacher)
}

/// Runs the pipeline on prepared data with an already pre-trained teacher.
pub fn run_with(
    cfg: &PipelineConfig,
    data: &PreparedData,
    pretrained: &LayeredClassifier,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let train = &data.train;
    let n = train.len();
    let budget: PrivacyBudget = cfg.privacy.budget(n)?;
    let phases = plan(cfg, n);
    let dp_for = |tag: &str| -> DpSgdConfig { cfg.dp.to_dpsgd(derive_seed(cfg.seed, tag)) };
    let student_seed = derive_seed(cfg.seed, "student-init");

    let (model, privacy, init_label, steps, sigma) = match cfg.pipeline {
        PipelineKind::Finetune => {
            let (start, label, tag) = match cfg.finetune.init {
                FinetuneInit::Teacher => (pretrained.clone(), "teacher", "teacher-dp"),
                FinetuneInit::Random => {
                    let m = init_student(
                        pretrained,
                        cfg.student_blocks(),
                        InitStrategy::Random { seed: student_seed },
                        cfg.finetune.layer_choice,
                    )?;
                    (m, "random", "student-dp")
                }
                FinetuneInit::ZeroshotPt => {
                    let m = init_student(
                        pretrained,
                        cfg.student_blocks(),
                        InitStrategy::ZeroShotPt(pretrained),
                        cfg.finetune.layer_choice,
                    )?;
                    (m, "zeroshot-pt", "student-dp")
                }
            };
            let steps = phases[0].1;
            let out = private_finetune(&start, train, &dp_for(tag), steps, budget)?;
            (out.model, out.report, label.to_string(), steps, out.calibration.sigma)
        }
        PipelineKind::Dpkd => {
            let dk = DpkdConfig {
                keep_blocks: cfg.student_blocks(),
                layer_choice: cfg.kd.layer_choice,
                kd: cfg.kd.kd(),
                teacher_dp: dp_for("teacher-dp"),
                student_dp: dp_for("student-dp"),
                teacher_steps: phases[0].1,
                student_steps: phases[1].1,
                budget,
                student_hidden: cfg.kd.student_hidden,
            };
            let out = dpkd(pretrained, cfg.kd.init, student_seed, train, &dk)?;
            (
                out.student,
                out.report,
                cfg.kd.init.label().to_string(),
                dk.teacher_steps + dk.student_steps,
                out.calibration.sigma,
            )
        }
        PipelineKind::DpimpStructured | PipelineKind::DpimpUnstructured => {
            let total = phases[0].1;
            let imp = cfg.imp_config(total)?;
            let q = phases[0].0;
            let cal = calibrate_shared_sigma(budget, &[(q, imp.total_steps())])?;
            let dp = DpSgdConfig {
                noise_multiplier: cal.sigma,
                ..dp_for("dpimp-dp")
            };
            let mut acct = Accountant::new().with_cap(budget);
            let (model, steps) = if cfg.pipeline == PipelineKind::DpimpStructured {
                let out = structured_dpimp(pretrained, &imp, &dp, train, &mut acct, &mut |_, _| {})?;
                (out.model, out.steps)
            } else {
                let out = unstructured_dpimp(pretrained, &imp, &dp, train, &mut acct, &mut |_, _, _| {})?;
                (out.model, out.steps)
            };
            (model, acct.report(budget.delta), "teacher".to_string(), steps, cal.sigma)
        }
    };

    if privacy.total_epsilon > budget.epsilon * (1.0 + 1e-9) {
        return Err(HarnessError::BudgetViolated {
            reported: privacy.total_epsilon,
            configured: budget.epsilon,
        });
    }
    let acc = evaluate(&model, &data.test)?;
    let metrics = Metrics {
        name: cfg.name.clone(),
        task: data.task.clone(),
        pipeline: cfg.pipeline.label().to_string(),
        init_strategy: init_label,
        sparsity: model.sparsity(),
        block_count: model.depth(),
        eval_accuracy: acc,
        steps,
        seed: cfg.seed,
        noise_multiplier: sigma,
    };
    log::info!(
        "{}: accuracy {:.4}, ε={:.4}, σ={:.4}",
        cfg.name,
        acc,
        privacy.total_epsilon,
        sigma
    );
    Ok(RunArtifacts {
        config: cfg.clone(),
        model,
        metrics,
        privacy,
    })
}

impl RunArtifacts {
    /// Writes `checkpoint.json`, `metrics.json`, `privacy.json` and
    /// `config.toml` under `root/<name>/`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(&self.config.name);
        let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(&dir).map_err(io)?;
        self.model.save(&dir.join("checkpoint.json"))?;
        std::fs::write(dir.join("metrics.json"), to_json(&self.metrics)).map_err(io)?;
        std::fs::write(dir.join("privacy.json"), to_json(&self.privacy)).map_err(io)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()).map_err(io)?;
        Ok(dir)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

/// [`run`] followed by [`RunArtifacts::write`].
pub fn run_to_dir(cfg: &PipelineConfig, root: &Path) -> Result<(RunArtifacts, PathBuf)> {
    let art = run(cfg)?;
    let dir = art.write(root)?;
    Ok((art, dir))
}
