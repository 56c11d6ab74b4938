use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::step::{Learner, StepLog, TrainState};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{make_epoch_plan, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, Which};
use crate::model::SegNet;
use crate::tensor::{ImageTensor, MaskTensor};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const HISTORY_FILE: &str = "eval_history.csv";
pub const HISTORY_HEADER: &str = "iter,which,class,dice,jaccard,hd95,asd";

pub fn checkpoint_file(iteration: u64) -> String {
    format!("ckpt_{iteration}.bin")
}

/// A dataset held in memory for training.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub labeled: Vec<(ImageTensor, MaskTensor)>,
    pub unlabeled: Vec<ImageTensor>,
    pub test: Vec<(ImageTensor, MaskTensor)>,
    pub in_channels: usize,
    pub num_classes: usize,
}

fn with_masks(samples: Vec<crate::data::Sample>, split: Split) -> Result<Vec<(ImageTensor, MaskTensor)>> {
    samples
        .into_iter()
        .map(|s| match s.mask {
            Some(m) => Ok((s.image, m)),
            None => Err(Error::CorruptDataset(format!("{} sample `{}` has no mask", split.as_str(), s.id))),
        })
        .collect()
}

impl LoadedData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let labeled = with_masks(ds.load_split(Split::TrainLabeled)?, Split::TrainLabeled)?;
        let unlabeled: Vec<_> = ds.load_split(Split::TrainUnlabeled)?.into_iter().map(|s| s.image).collect();
        let test = with_masks(ds.load_split(Split::Test)?, Split::Test)?;
        for (split, n) in
            [(Split::TrainLabeled, labeled.len()), (Split::TrainUnlabeled, unlabeled.len()), (Split::Test, test.len())]
        {
            if n == 0 {
                return Err(Error::EmptySplit(split.as_str().into()));
            }
        }
        let in_channels = labeled[0].0.channels;
        Ok(Self { labeled, unlabeled, test, in_channels, num_classes: ds.num_classes() })
    }

    pub fn split_pairs(&self, split: Split) -> Result<Vec<(&ImageTensor, &MaskTensor)>> {
        let pairs = match split {
            Split::TrainLabeled => &self.labeled,
            Split::Test => &self.test,
            Split::TrainUnlabeled => {
                return Err(Error::Config("train-unlabeled has no ground truth to evaluate".into()));
            }
        };
        Ok(pairs.iter().map(|(i, m)| (i, m)).collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory for config snapshot, logs and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Allow writing into a nonempty run directory.
    pub force: bool,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many steps are done, before the end.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iteration: u64,
    pub student: MetricsReport,
    pub teacher: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub logs: Vec<StepLog>,
    pub history: Vec<EvalRecord>,
    /// Present when the run reached its last iteration.
    pub final_eval: Option<EvalRecord>,
    pub checkpoint: Checkpoint,
}

struct RunDir {
    root: PathBuf,
    log: BufWriter<File>,
    history: BufWriter<File>,
}

fn open_append(path: &Path, truncate: bool) -> Result<BufWriter<File>> {
    let mut opts = OpenOptions::new();
    opts.create(true);
    if truncate {
        opts.write(true).truncate(true);
    } else {
        opts.append(true);
    }
    opts.open(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl RunDir {
    fn open(root: &Path, cfg: &TrainConfig, force: bool, resuming: bool) -> Result<Self> {
        let nonempty = root.exists() && fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if nonempty && !force && !resuming {
            return Err(Error::Config(format!(
                "run directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let cfg_path = root.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let fresh = !resuming;
        let history_path = root.join(HISTORY_FILE);
        let mut history = open_append(&history_path, fresh)?;
        if fresh {
            writeln!(history, "{HISTORY_HEADER}").map_err(|e| Error::io(&history_path, e))?;
        }
        Ok(Self { root: root.to_path_buf(), log: open_append(&root.join(LOG_FILE), fresh)?, history })
    }

    fn log_step(&mut self, log: &StepLog) -> Result<()> {
        writeln!(self.log, "{}", log.to_json_line()).map_err(|e| Error::io(self.root.join(LOG_FILE), e))
    }

    fn log_eval(&mut self, rec: &EvalRecord) -> Result<()> {
        for report in [&rec.student, &rec.teacher] {
            for r in report.rows() {
                let class = r.class.map_or_else(|| "mean".to_string(), |c| c.to_string());
                let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
                writeln!(
                    self.history,
                    "{},{},{class},{:.6},{:.6},{},{}",
                    rec.iteration,
                    report.which.as_str(),
                    r.dice,
                    r.jaccard,
                    opt(r.hd95),
                    opt(r.asd)
                )
                .map_err(|e| Error::io(self.root.join(HISTORY_FILE), e))?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.root.join(LOG_FILE), e))?;
        self.history.flush().map_err(|e| Error::io(self.root.join(HISTORY_FILE), e))
    }
}

pub fn evaluate_state(net: &SegNet, state: &TrainState, pairs: &[(&ImageTensor, &MaskTensor)]) -> Result<EvalRecord> {
    Ok(EvalRecord {
        iteration: state.iteration,
        student: evaluate(net, &state.student, &state.student_stats, pairs, Which::Student)?,
        teacher: evaluate(net, &state.teacher.params, &state.teacher.stats, pairs, Which::Teacher)?,
    })
}

/// Trains for `cfg.iterations` steps (or up to `stop_after`), evaluating
/// student and teacher on the test split every `eval_interval` steps and at
/// the end.
pub fn run_training(cfg: &TrainConfig, data: &LoadedData, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = cfg.model(data.in_channels, data.num_classes);
    let net = SegNet::new(model.clone())?;
    let meta = CheckpointMeta { model, train: cfg.clone() };
    let mut state = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta != meta {
                return Err(Error::Checkpoint(format!("{} was written by a different configuration", path.display())));
            }
            ckpt.to_state(&net)?
        }
        None => TrainState::init(&net, cfg.seed),
    };
    let end = opts.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let learner = Learner::new(cfg.clone(), net, data.labeled.len())?;
    let plan = make_epoch_plan(&cfg.sampler(), data.labeled.len(), data.unlabeled.len(), cfg.iterations as usize)?;
    let test = data.split_pairs(Split::Test)?;
    let mut dir = match &opts.out_dir {
        Some(p) => Some(RunDir::open(p, cfg, opts.force, opts.resume.is_some())?),
        None => None,
    };
    let write_ckpt = |dir: &Option<RunDir>, state: &TrainState| -> Result<Checkpoint> {
        let ckpt = Checkpoint::from_state(meta.clone(), state);
        if let Some(d) = dir {
            ckpt.save(&d.root.join(checkpoint_file(state.iteration)))?;
        }
        Ok(ckpt)
    };

    let mut logs = Vec::new();
    let mut history = Vec::new();
    let eval_every = cfg.eval_every();
    while state.iteration < end {
        let step = &plan.steps[state.iteration as usize];
        let labeled: Vec<_> = step.labeled.iter().map(|&i| (&data.labeled[i].0, &data.labeled[i].1)).collect();
        let unlabeled: Vec<_> = step.unlabeled.iter().map(|&i| &data.unlabeled[i]).collect();
        let out = match learner.train_step(&mut state, &labeled, &unlabeled) {
            Ok(o) => o,
            Err(Error::NonFiniteLoss { log, .. }) => {
                let dump = match &mut dir {
                    Some(d) => {
                        d.flush()?;
                        let path = d.root.join("nonfinite_step.json");
                        fs::write(&path, serde_json::to_string_pretty(&*log)?).map_err(|e| Error::io(&path, e))?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { log, dump });
            }
            Err(e) => return Err(e),
        };
        if let Some(d) = &mut dir {
            d.log_step(&out.log)?;
        }
        logs.push(out.log);
        let t = state.iteration;
        if t % eval_every == 0 || t == cfg.iterations {
            let rec = evaluate_state(learner.net(), &state, &test)?;
            if let Some(d) = &mut dir {
                d.log_eval(&rec)?;
            }
            history.push(rec);
        }
        if let (Some(every), Some(_)) = (cfg.checkpoint_interval, &dir) {
            if t % every == 0 && t != end {
                write_ckpt(&dir, &state)?;
            }
        }
    }
    let checkpoint = write_ckpt(&dir, &state)?;
    let final_eval = (state.iteration == cfg.iterations)
        .then(|| history.last().filter(|r| r.iteration == cfg.iterations).cloned())
        .flatten();
    if let (Some(d), Some(rec)) = (&mut dir, &final_eval) {
        for report in [&rec.student, &rec.teacher] {
            let stem = format!("metrics_{}", report.which.as_str());
            report.write(&d.root.join(format!("{stem}.csv")), &d.root.join(format!("{stem}.json")))?;
        }
    }
    if let Some(d) = &mut dir {
        d.flush()?;
    }
    Ok(RunOutcome { state, logs, history, final_eval, checkpoint })
}
