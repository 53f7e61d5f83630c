//! Subcommand implementations. Every command is a pure function of its
//! config, seeds and input artifacts, and writes only under the workspace.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use planforge_core::calib::{CalibrationBatch, CalibrationProfile, FEATURE_LAYOUT_VERSION};
use planforge_core::grpo::{train as run_training, EpisodeRecord, PlanEnvironment, VlmEnvironment, PREFERENCE_ANCHORS};
use planforge_core::pareto::{flag_dominance, ParetoPoint};
use planforge_core::policy::{
    map_plan, mean_action, policy_forward, sample_action, PlanMapperConfig, PolicyParams, PruningPlan,
};
use planforge_core::pruner::{apply_plan, build_masks, score_rows, MaskSet};
use planforge_core::recovery::{evaluate, recover as run_recovery, RecoveryMetrics, RecoveryReport};
use planforge_core::rewards::ProbeSet;
use planforge_core::toyvlm::{init_model, ToyVlmParams};
use planforge_core::Preference;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, load_policy, save_model, save_policy};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Stage, StageExt};
use crate::formats::{CalibrationFile, MaskFile, PlanFile};
use crate::io::{read_json, write_bytes, write_json};
use crate::manifest::Manifest;

/// Artifact locations under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.at("config.toml")
    }
    pub fn model(&self) -> PathBuf {
        self.at("model.bin")
    }
    pub fn calibration(&self) -> PathBuf {
        self.at("calibration.json")
    }
    pub fn policy(&self) -> PathBuf {
        self.at("train/policy.bin")
    }
    pub fn final_policy(&self) -> PathBuf {
        self.at("train/policy_final.bin")
    }
    pub fn episode_log(&self) -> PathBuf {
        self.at("train/episodes.jsonl")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.at("train/summary.json")
    }
    pub fn periodic_checkpoint(&self, episode: usize) -> PathBuf {
        self.at(&format!("train/checkpoints/policy_ep{:05}.bin", episode))
    }
    pub fn plan(&self, name: &str) -> PathBuf {
        self.at(&format!("plans/{}.json", name))
    }
    pub fn pareto_csv(&self) -> PathBuf {
        self.at("sweep/pareto.csv")
    }
    pub fn pareto_json(&self) -> PathBuf {
        self.at("sweep/pareto.json")
    }
    pub fn pruned_model(&self) -> PathBuf {
        self.at("apply/pruned_model.bin")
    }
    pub fn masks(&self) -> PathBuf {
        self.at("apply/masks.json")
    }
    pub fn recovered_model(&self) -> PathBuf {
        self.at("recover/recovered_model.bin")
    }
    pub fn recovery_report(&self) -> PathBuf {
        self.at("recover/report.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.at("eval/metrics.json")
    }

    pub fn refresh_manifest(&self) -> CliResult<Manifest> {
        Manifest::refresh(&self.root)
    }
}

/// Training probes and the disjointly seeded held-out split.
pub fn probe_sets(cfg: &RunConfig, model: &ToyVlmParams) -> CliResult<(ProbeSet, ProbeSet)> {
    let d = &cfg.data;
    let train = ProbeSet::synthetic(&model.config, d.train_robustness, d.train_utility, d.seed)?;
    let heldout = ProbeSet::synthetic(
        &model.config,
        d.heldout_robustness,
        d.heldout_utility,
        d.seed.wrapping_add(0x9e37_79b9),
    )?;
    Ok((train, heldout))
}

fn layer_widths(model: &ToyVlmParams) -> Vec<usize> {
    vec![model.config.d_ff; model.config.n_blocks]
}

/// Loads the workspace model and its calibration, checking they match.
fn model_and_calibration(ws: &Workspace) -> CliResult<(ToyVlmParams, CalibrationFile)> {
    let calib = CalibrationFile::load(&ws.calibration())?;
    let model = load_model(&ws.model())?;
    if calib.model != model.config {
        return Err(CliError::format(
            "calibration file",
            "model config differs from the workspace model",
        ));
    }
    Ok((model, calib))
}

pub fn calibrate(cfg: &RunConfig, ws: &Workspace) -> CliResult<CalibrationFile> {
    let model = match &cfg.paths.model {
        Some(p) => {
            let m = load_model(p)?;
            if m.config != cfg.model {
                log::warn!("model checkpoint config overrides the [model] section");
            }
            m
        }
        None => init_model(&cfg.model)?,
    };
    let seed = cfg.data.seed.wrapping_add(1);
    let batch = CalibrationBatch::synthetic(&model.config, cfg.data.calibration_size, seed);
    let profile = CalibrationProfile::compute(&model, &batch)?;
    let file = CalibrationFile {
        feature_layout_version: FEATURE_LAYOUT_VERSION,
        model: model.config,
        batch_size: cfg.data.calibration_size,
        seed,
        profile,
    };
    save_model(&ws.model(), &model)?;
    write_json(&ws.calibration(), &file)?;
    Ok(file)
}

/// One line of the episode log, one per plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLine {
    pub episode: usize,
    pub member: usize,
    pub preference: Preference,
    pub ratios: Vec<f64>,
    pub sparsity: f64,
    pub j_rob: f64,
    pub j_util: f64,
    pub j_comp: f64,
    pub reward: f64,
    pub advantage: f64,
    pub rho_syn: f64,
    pub psi: f64,
    pub gamma: f64,
}

pub fn episode_lines(record: &EpisodeRecord) -> Vec<EpisodeLine> {
    record
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| EpisodeLine {
            episode: record.episode,
            member: i,
            preference: record.preference,
            ratios: m.ratios.clone(),
            sparsity: m.sparsity,
            j_rob: m.objectives.j_rob,
            j_util: m.objectives.j_util,
            j_comp: m.objectives.j_comp,
            reward: m.reward,
            advantage: m.advantage,
            rho_syn: record.gate.rho,
            psi: record.gate.psi,
            gamma: record.gate.gamma,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub episodes: usize,
    pub skipped_episodes: usize,
    /// `None` when no episode completed.
    pub best_mean_reward: Option<f64>,
    pub first_mean_raw_reward: Option<f64>,
    pub last_mean_raw_reward: Option<f64>,
}

pub fn train(cfg: &RunConfig, ws: &Workspace, checkpoint_every: usize) -> CliResult<TrainSummary> {
    let (model, calib) = model_and_calibration(ws)?;
    let (train_probes, _) = probe_sets(cfg, &model)?;
    let env = VlmEnvironment::new(model, calib.profile, train_probes)?;
    let policy = PolicyParams::init(cfg.policy)?;
    let mapper = cfg.trainer.mapper;

    let log_path = ws.episode_log();
    write_bytes(&log_path, b"")?;
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut deferred: Option<CliError> = None;
    let outcome = run_training(cfg.trainer.clone(), policy, &env, |record, current| {
        if deferred.is_some() {
            return;
        }
        let result = (|| -> CliResult<()> {
            for line in episode_lines(record) {
                serde_json::to_writer(&mut log, &line)?;
                log.write_all(b"\n").map_err(|e| CliError::io(&log_path, e))?;
            }
            let done = record.episode + 1;
            if checkpoint_every > 0 && done % checkpoint_every == 0 {
                save_policy(&ws.periodic_checkpoint(done), current, &mapper)?;
            }
            Ok(())
        })();
        deferred = result.err();
    })?;
    if let Some(e) = deferred {
        return Err(e);
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;

    save_policy(&ws.policy(), &outcome.best_policy, &mapper)?;
    save_policy(&ws.final_policy(), &outcome.policy, &mapper)?;
    let done: Vec<&EpisodeRecord> = outcome.log.iter().filter(|r| !r.skipped).collect();
    let summary = TrainSummary {
        episodes: outcome.log.len(),
        skipped_episodes: outcome.log.len() - done.len(),
        best_mean_reward: outcome.best_mean_reward.is_finite().then_some(outcome.best_mean_reward),
        first_mean_raw_reward: done.first().map(|r| r.mean_raw_reward),
        last_mean_raw_reward: done.last().map(|r| r.mean_raw_reward),
    };
    write_json(&ws.train_summary(), &summary)?;
    Ok(summary)
}

/// Normalizes `w`, warning when it did not already sum to one.
pub fn normalize_preference(w: [f64; 3]) -> CliResult<Preference> {
    let (p, changed) = Preference::normalized(w)?;
    if changed {
        log::warn!("preference {:?} does not sum to 1; using {:?}", w, p.0);
    }
    Ok(p)
}

/// A loaded policy with everything needed to turn preferences into plans.
pub struct Planner {
    pub policy: PolicyParams,
    pub mapper: PlanMapperConfig,
    pub profile: CalibrationProfile,
    pub widths: Vec<usize>,
}

impl Planner {
    pub fn load(ws: &Workspace, policy_path: &Path) -> CliResult<Self> {
        let calib = CalibrationFile::load(&ws.calibration())?;
        let (policy, mapper) = load_policy(policy_path)?;
        Ok(Self {
            policy,
            mapper,
            widths: vec![calib.model.d_ff; calib.model.n_blocks],
            profile: calib.profile,
        })
    }

    /// Mean plan, or a sampled one when `rng` is given.
    pub fn plan(&self, w: Preference, rng: Option<&mut ChaCha8Rng>) -> CliResult<PruningPlan> {
        let states = self.profile.states(self.mapper.budget(), w)?;
        let dp = policy_forward(&self.policy, &states)?;
        let action = match rng {
            Some(r) => sample_action(&dp, r)?,
            None => mean_action(&dp)?,
        };
        Ok(map_plan(action.s, &action.p, &self.mapper, &self.widths, w)?)
    }
}

/// Queries `policy_path` with `w` and writes the plan to `output`.
pub fn query(ws: &Workspace, policy_path: &Path, w: [f64; 3], sample_seed: Option<u64>, output: &Path) -> CliResult<PlanFile> {
    let planner = Planner::load(ws, policy_path)?;
    let w = normalize_preference(w)?;
    let mut rng = sample_seed.map(ChaCha8Rng::seed_from_u64);
    let plan = planner.plan(w, rng.as_mut())?;
    let file = PlanFile::from_plan(&plan);
    file.save(output)?;
    Ok(file)
}

/// All weight vectors whose entries are multiples of `1 / grid`.
pub fn simplex_grid(grid: usize) -> Vec<Preference> {
    let mut out = Vec::new();
    for i in 0..=grid {
        for j in 0..=grid - i {
            let k = grid - i - j;
            let g = grid as f64;
            out.push(Preference([i as f64 / g, j as f64 / g, k as f64 / g]));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    preference_rob: f64,
    preference_util: f64,
    preference_comp: f64,
    sparsity: f64,
    j_rob: f64,
    j_util: f64,
    dominated: bool,
}

pub fn pareto_csv(points: &[ParetoPoint]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(CsvRow {
            preference_rob: p.preference.rob(),
            preference_util: p.preference.util(),
            preference_comp: p.preference.comp(),
            sparsity: p.sparsity,
            j_rob: p.j_rob,
            j_util: p.j_util,
            dominated: p.dominated,
        })
        .map_err(|e| CliError::format("pareto csv", e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::format("pareto csv", e.to_string()))
}

/// Evaluates mean and sampled plans over a preference grid on held-out
/// probes, then flags dominated points.
pub fn sweep(
    cfg: &RunConfig,
    ws: &Workspace,
    policy_path: &Path,
    grid: usize,
    samples_per_w: usize,
) -> CliResult<Vec<ParetoPoint>> {
    let planner = Planner::load(ws, policy_path)?;
    let (model, calib) = model_and_calibration(ws)?;
    let (_, heldout) = probe_sets(cfg, &model)?;
    let env = VlmEnvironment::new(model, calib.profile, heldout)?;
    let budget = planner.mapper.budget();
    let prefs = simplex_grid(grid);
    let per_w = samples_per_w + 1;
    let jobs: Vec<(usize, Preference)> = prefs
        .iter()
        .enumerate()
        .flat_map(|(i, &w)| (0..per_w).map(move |k| (i * per_w + k, w)))
        .collect();
    let seed = cfg.sweep.seed;
    let mut points = jobs
        .par_iter()
        .map(|&(idx, w)| -> CliResult<ParetoPoint> {
            let plan = if idx % per_w == 0 {
                planner.plan(w, None)?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64));
                planner.plan(w, Some(&mut rng))?
            };
            let obj = env.evaluate(&plan, budget)?;
            Ok(ParetoPoint {
                preference: w,
                sparsity: plan.realized_sparsity,
                j_rob: obj.j_rob,
                j_util: obj.j_util,
                dominated: false,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    flag_dominance(&mut points, Some(budget));
    write_bytes(&ws.pareto_csv(), &pareto_csv(&points)?)?;
    write_json(&ws.pareto_json(), &points)?;
    Ok(points)
}

/// Masks for a plan file against the workspace model.
pub fn masks_for_plan(ws: &Workspace, plan_path: &Path) -> CliResult<(ToyVlmParams, MaskSet)> {
    let (model, calib) = model_and_calibration(ws)?;
    let plan = PlanFile::load(plan_path)?.to_plan(&layer_widths(&model))?;
    let scores = score_rows(&model, &calib.profile.act_rms())?;
    let masks = build_masks(&scores, &plan.ratios)?;
    Ok((model, masks))
}

pub fn apply(ws: &Workspace, plan_path: &Path) -> CliResult<MaskFile> {
    let (model, masks) = masks_for_plan(ws, plan_path)?;
    let pruned = apply_plan(&model, &masks)?.materialize();
    save_model(&ws.pruned_model(), &pruned)?;
    let file = MaskFile::from_masks(&masks);
    write_json(&ws.masks(), &file)?;
    Ok(file)
}

fn load_masks(path: &Path, n_blocks: usize) -> CliResult<MaskSet> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "mask file",
            path: path.into(),
        });
    }
    read_json::<MaskFile>(path)?.to_masks(n_blocks)
}

/// Fine-tunes the workspace model with the masks held fixed.
pub fn recover(cfg: &RunConfig, ws: &Workspace, masks_path: &Path) -> CliResult<RecoveryReport> {
    let model = load_model(&ws.model())?;
    let masks = load_masks(masks_path, model.config.n_blocks)?;
    let (train, heldout) = probe_sets(cfg, &model)?;
    let (recovered, report) = run_recovery(&model, &masks, &cfg.recovery, &train, &heldout)?;
    save_model(&ws.recovered_model(), &recovered)?;
    write_json(&ws.recovery_report(), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sparsity: f64,
    pub mask_checksum: u64,
    pub unpruned: RecoveryMetrics,
    pub pruned: RecoveryMetrics,
    pub recovered: Option<RecoveryMetrics>,
}

/// Held-out metrics of the unpruned, pruned and (if present) recovered model.
pub fn eval(cfg: &RunConfig, ws: &Workspace, masks_path: &Path) -> CliResult<EvalReport> {
    let model = load_model(&ws.model())?;
    let n = model.config.n_blocks;
    let masks = load_masks(masks_path, n)?;
    let (_, heldout) = probe_sets(cfg, &model)?;
    let full = MaskSet::full(n, model.config.d_ff);
    let recovered = if ws.recovered_model().exists() {
        let r = load_model(&ws.recovered_model())?;
        Some(evaluate(&r, &masks, &heldout)?)
    } else {
        None
    };
    let report = EvalReport {
        sparsity: masks.sparsity(),
        mask_checksum: masks.checksum(),
        unpruned: evaluate(&model, &full, &heldout)?,
        pruned: evaluate(&model, &masks, &heldout)?,
        recovered,
    };
    write_json(&ws.metrics(), &report)?;
    Ok(report)
}

pub fn anchor_name(i: usize) -> String {
    format!("anchor_{}", i)
}

/// Runs every stage from `from` onwards, tagging failures with their stage,
/// and finishes by rewriting the manifest.
pub fn pipeline(cfg: &RunConfig, ws: &Workspace, from: Stage) -> CliResult<Manifest> {
    cfg.validate()?;
    let order = [
        Stage::Calibrate,
        Stage::Train,
        Stage::Query,
        Stage::Sweep,
        Stage::Apply,
        Stage::Recover,
        Stage::Eval,
    ];
    let start = order.iter().position(|s| *s == from).expect("every stage listed");
    write_bytes(&ws.resolved_config(), cfg.to_toml()?.as_bytes())?;
    for &stage in &order[start..] {
        run_stage(cfg, ws, stage).stage(stage)?;
    }
    ws.refresh_manifest()
}

fn run_stage(cfg: &RunConfig, ws: &Workspace, stage: Stage) -> CliResult<()> {
    let applied = ws.plan(&anchor_name(cfg.pipeline.apply_anchor));
    match stage {
        Stage::Calibrate => calibrate(cfg, ws).map(drop),
        Stage::Train => train(cfg, ws, cfg.pipeline.checkpoint_every).map(drop),
        Stage::Query => {
            for (i, a) in PREFERENCE_ANCHORS.iter().enumerate() {
                query(ws, &ws.policy(), *a, None, &ws.plan(&anchor_name(i)))?;
            }
            Ok(())
        }
        Stage::Sweep => sweep(cfg, ws, &ws.policy(), cfg.sweep.grid, cfg.sweep.samples_per_w).map(drop),
        Stage::Apply => apply(ws, &applied).map(drop),
        Stage::Recover => recover(cfg, ws, &ws.masks()).map(drop),
        Stage::Eval => eval(cfg, ws, &ws.masks()).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_simplex() {
        let g = simplex_grid(4);
        assert_eq!(g.len(), 15);
        for w in &g {
            assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_header_is_fixed() {
        let p = ParetoPoint {
            preference: Preference::uniform(),
            sparsity: 0.25,
            j_rob: -1.0,
            j_util: 0.5,
            dominated: true,
        };
        let text = String::from_utf8(pareto_csv(&[p]).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("preference_rob,preference_util,preference_comp,sparsity,j_rob,j_util,dominated")
        );
        assert!(lines.next().unwrap().ends_with(",0.25,-1.0,0.5,true"));
    }
}
