//! Run configuration: defaults, `key = value` config files with `#`
//! comments, and CLI flag overrides, in that precedence order. Every run
//! writes the fully resolved configuration into `manifest.json` so outputs
//! can be reproduced bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use boxrefine::embed::PretrainConfig;
use boxrefine::proxy::NegativeScope;
use boxrefine::refine::{LossMode, ParamMode, RefineConfig};
use boxrefine::synth::SynthConfig;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    // Scene generator.
    pub n_scenes: usize,
    pub n_ids: usize,
    pub scene_rows: usize,
    pub scene_cols: usize,
    pub overlap_rate: f64,
    pub distractor_rate: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub train_frac: f64,
    pub gallery_frac: f64,
    // Detector surrogate.
    pub iou_lo: f64,
    pub iou_hi: f64,
    // Pretraining.
    pub pretrain_lr: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_post_target: usize,
    // Refinement.
    pub iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub decay_iter: usize,
    pub margin: f64,
    pub proxy_volume: usize,
    pub loss: String,
    pub negative_scope: String,
    pub param_mode: String,
    // Evaluation.
    pub cmc_depth: usize,
    pub gallery_size: Option<usize>,
    pub pr_curves: bool,
    // Experiment.
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let r = RefineConfig::default();
        RunConfig {
            seed: 1,
            n_scenes: s.n_scenes,
            n_ids: s.n_ids,
            scene_rows: s.scene_rows,
            scene_cols: s.scene_cols,
            overlap_rate: s.overlap_rate,
            distractor_rate: s.distractor_rate,
            min_instances: s.min_instances,
            max_instances: s.max_instances,
            train_frac: s.train_frac,
            gallery_frac: s.gallery_frac,
            iou_lo: 0.4,
            iou_hi: 0.7,
            pretrain_lr: 2e-2,
            pretrain_steps: 3000,
            pretrain_batch: 8,
            pretrain_post_target: 600,
            iterations: r.iterations,
            batch_size: r.batch_size,
            momentum: r.momentum,
            weight_decay: r.weight_decay,
            warmup_iters: r.warmup_iters,
            peak_lr: r.peak_lr,
            final_lr: r.final_lr,
            decay_iter: r.decay_iter,
            margin: r.margin,
            proxy_volume: r.proxy_volume,
            loss: "cls+tri".to_string(),
            negative_scope: "table".to_string(),
            param_mode: "coords".to_string(),
            cmc_depth: 10,
            gallery_size: None,
            pr_curves: false,
            seeds: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value {value:?} for key {key:?}"))
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_scenes" => self.n_scenes = parse(key, value)?,
            "n_ids" => self.n_ids = parse(key, value)?,
            "scene_rows" => self.scene_rows = parse(key, value)?,
            "scene_cols" => self.scene_cols = parse(key, value)?,
            "overlap_rate" => self.overlap_rate = parse(key, value)?,
            "distractor_rate" => self.distractor_rate = parse(key, value)?,
            "min_instances" => self.min_instances = parse(key, value)?,
            "max_instances" => self.max_instances = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "gallery_frac" => self.gallery_frac = parse(key, value)?,
            "iou_lo" => self.iou_lo = parse(key, value)?,
            "iou_hi" => self.iou_hi = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "pretrain_post_target" => self.pretrain_post_target = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_iters" => self.warmup_iters = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "final_lr" => self.final_lr = parse(key, value)?,
            "decay_iter" => self.decay_iter = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "proxy_volume" => self.proxy_volume = parse(key, value)?,
            "loss" => {
                LossMode::parse(value).map_err(|e| e.to_string())?;
                self.loss = value.to_string();
            }
            "negative_scope" => match value {
                "table" | "batch" => self.negative_scope = value.to_string(),
                other => return Err(format!("bad negative_scope {other:?}")),
            },
            "param_mode" => match value {
                "coords" | "head" => self.param_mode = value.to_string(),
                other => return Err(format!("bad param_mode {other:?}")),
            },
            "cmc_depth" => self.cmc_depth = parse(key, value)?,
            "gallery_size" => self.gallery_size = Some(parse(key, value)?),
            "pr_curves" => self.pr_curves = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Loads `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(idx) => &raw[..idx],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_scenes: self.n_scenes,
            n_ids: self.n_ids,
            scene_rows: self.scene_rows,
            scene_cols: self.scene_cols,
            overlap_rate: self.overlap_rate,
            distractor_rate: self.distractor_rate,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            train_frac: self.train_frac,
            gallery_frac: self.gallery_frac,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            momentum: self.momentum,
            seed: self.seed,
            post_target_steps: self.pretrain_post_target,
            ..PretrainConfig::default()
        }
    }

    pub fn refine_config(&self) -> Result<RefineConfig, String> {
        Ok(RefineConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_iters: self.warmup_iters,
            peak_lr: self.peak_lr,
            final_lr: self.final_lr,
            decay_iter: self.decay_iter,
            margin: self.margin,
            proxy_volume: self.proxy_volume,
            loss_mode: LossMode::parse(&self.loss).map_err(|e| e.to_string())?,
            negative_scope: if self.negative_scope == "batch" {
                NegativeScope::Batch
            } else {
                NegativeScope::Table
            },
            param_mode: if self.param_mode == "head" {
                ParamMode::Head
            } else {
                ParamMode::Coords
            },
            seed: self.seed,
        })
    }

    /// Writes `manifest.json` with the command name and the fully resolved
    /// configuration.
    pub fn write_manifest(
        &self,
        command: &str,
        paths: &BTreeMap<String, String>,
        out_dir: &Path,
    ) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config: &'a RunConfig,
            paths: &'a BTreeMap<String, String>,
        }
        let manifest = Manifest {
            command,
            config: self,
            paths,
        };
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serialize"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
    }

    #[test]
    fn file_parsing_with_comments() {
        let dir = std::env::temp_dir().join("boxrefine_cfg");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        std::fs::write(&path, "# comment\nseed = 9\niterations = 123 # trailing\n\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.iterations, 123);
    }

    #[test]
    fn bad_loss_mode_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("loss", "triplet").is_err());
        assert!(cfg.set("loss", "cls+tri").is_ok());
    }
}
