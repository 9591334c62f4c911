//! Run configuration: defaults, then an INI file with sections `data`,
//! `gate`, `experts`, `trainer` and `agent`, then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;
use mme_core::experts::default_expert_ids;
use mme_core::gate::{GateConfig, ImitationConfig};
use mme_core::mesh::Task;
use mme_core::moe::{Similarity, TrainerConfig};
use mme_core::sac::SacConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub task: Task,
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSection {
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub imitation_epochs: usize,
    pub imitation_lr: f64,
    pub imitation_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSection {
    /// Empty means the task's default line-up.
    pub ids: Vec<String>,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub gate_lr: f64,
    pub expert_lr: f64,
    pub walks_train: usize,
    pub walks_infer: usize,
    pub similarity: Similarity,
    pub finetune_experts: bool,
    pub static_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub gate: GateSection,
    pub experts: ExpertSection,
    pub trainer: TrainerSection,
    pub agent: SacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GateConfig::new(1, 1);
        let t = TrainerConfig::default();
        let i = ImitationConfig::default();
        Self {
            seed: 0,
            data: DataSection { dir: None, task: Task::Classification, classes: 3, per_class: 20 },
            gate: GateSection {
                d_model: g.d_model,
                heads: g.heads,
                ff_width: g.ff_width,
                encoder_layers: g.encoder_layers,
                decoder_layers: g.decoder_layers,
                imitation_epochs: i.epochs,
                imitation_lr: i.lr,
                imitation_batch_size: i.batch_size,
            },
            experts: ExpertSection { ids: Vec::new(), hidden: 32, epochs: 10, lr: 1e-3, batch_size: 32 },
            trainer: TrainerSection {
                epochs: 10,
                batch_size: t.batch_size,
                gate_lr: t.gate_lr,
                expert_lr: t.expert_lr,
                walks_train: t.walks_train,
                walks_infer: t.walks_infer,
                similarity: t.similarity,
                finetune_experts: t.finetune_experts,
                static_lambda: None,
            },
            agent: SacConfig::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| anyhow!("[{section}] {key}: cannot parse {value:?}"))
}

pub fn parse_range(value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value.split_once(',').ok_or_else(|| anyhow!("expected lo,hi, got {value:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| anyhow!("bad lower bound in {value:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| anyhow!("bad upper bound in {value:?}"))?;
    if !(lo < hi) {
        bail!("empty range {value:?}");
    }
    Ok((lo, hi))
}

fn parse_ids(value: &str) -> Vec<String> {
    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| anyhow!("config parse error: {e}"))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                self.set(section.unwrap_or(""), key, value)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        match (s, key) {
            ("" | "run", "seed") => self.seed = parse(s, key, v)?,
            ("data", "dir") => self.data.dir = Some(PathBuf::from(v.trim())),
            ("data", "task") => self.data.task = parse(s, key, v)?,
            ("data", "classes") => self.data.classes = parse(s, key, v)?,
            ("data", "per_class") => self.data.per_class = parse(s, key, v)?,
            ("gate", "d_model") => self.gate.d_model = parse(s, key, v)?,
            ("gate", "heads") => self.gate.heads = parse(s, key, v)?,
            ("gate", "ff_width") => self.gate.ff_width = parse(s, key, v)?,
            ("gate", "encoder_layers") => self.gate.encoder_layers = parse(s, key, v)?,
            ("gate", "decoder_layers") => self.gate.decoder_layers = parse(s, key, v)?,
            ("gate", "imitation_epochs") => self.gate.imitation_epochs = parse(s, key, v)?,
            ("gate", "imitation_lr") => self.gate.imitation_lr = parse(s, key, v)?,
            ("gate", "imitation_batch_size") => self.gate.imitation_batch_size = parse(s, key, v)?,
            ("experts", "ids") => self.experts.ids = parse_ids(v),
            ("experts", "hidden") => self.experts.hidden = parse(s, key, v)?,
            ("experts", "epochs") => self.experts.epochs = parse(s, key, v)?,
            ("experts", "lr") => self.experts.lr = parse(s, key, v)?,
            ("experts", "batch_size") => self.experts.batch_size = parse(s, key, v)?,
            ("trainer", "epochs") => self.trainer.epochs = parse(s, key, v)?,
            ("trainer", "batch_size") => self.trainer.batch_size = parse(s, key, v)?,
            ("trainer", "gate_lr") => self.trainer.gate_lr = parse(s, key, v)?,
            ("trainer", "expert_lr") => self.trainer.expert_lr = parse(s, key, v)?,
            ("trainer", "walks_train") => self.trainer.walks_train = parse(s, key, v)?,
            ("trainer", "walks_infer") => self.trainer.walks_infer = parse(s, key, v)?,
            ("trainer", "similarity") => self.trainer.similarity = parse(s, key, v)?,
            ("trainer", "finetune_experts") => self.trainer.finetune_experts = parse(s, key, v)?,
            ("trainer", "static_lambda") => {
                self.trainer.static_lambda = match v.trim() {
                    "" | "none" => None,
                    x => Some(parse(s, key, x)?),
                }
            }
            ("agent", "gamma") => self.agent.gamma = parse(s, key, v)?,
            ("agent", "tau") => self.agent.tau = parse(s, key, v)?,
            ("agent", "actor_lr") => self.agent.actor_lr = parse(s, key, v)?,
            ("agent", "critic_lr") => self.agent.critic_lr = parse(s, key, v)?,
            ("agent", "alpha_lr") => self.agent.alpha_lr = parse(s, key, v)?,
            ("agent", "capacity") => self.agent.capacity = parse(s, key, v)?,
            ("agent", "batch_size") => self.agent.batch_size = parse(s, key, v)?,
            ("agent", "hidden") => self.agent.hidden = parse(s, key, v)?,
            ("agent", "lambda_range") => self.agent.lambda_range = parse_range(v)?,
            ("agent", "target_entropy") => self.agent.target_entropy = parse(s, key, v)?,
            ("agent", "initial_alpha") => self.agent.initial_alpha = parse(s, key, v)?,
            ("agent", "updates_per_step") => self.agent.updates_per_step = parse(s, key, v)?,
            _ => bail!("unknown config key [{section}] {key}"),
        }
        Ok(())
    }

    /// Snapshot that [`RunConfig::apply_str`] reads back to an equal config.
    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        ini.with_section(Some("run")).set("seed", self.seed.to_string());
        let d = &self.data;
        let mut data = ini.with_section(Some("data"));
        if let Some(dir) = &d.dir {
            data.set("dir", dir.display().to_string());
        }
        data.set("task", d.task.as_str())
            .set("classes", d.classes.to_string())
            .set("per_class", d.per_class.to_string());
        let g = &self.gate;
        ini.with_section(Some("gate"))
            .set("d_model", g.d_model.to_string())
            .set("heads", g.heads.to_string())
            .set("ff_width", g.ff_width.to_string())
            .set("encoder_layers", g.encoder_layers.to_string())
            .set("decoder_layers", g.decoder_layers.to_string())
            .set("imitation_epochs", g.imitation_epochs.to_string())
            .set("imitation_lr", g.imitation_lr.to_string())
            .set("imitation_batch_size", g.imitation_batch_size.to_string());
        let e = &self.experts;
        ini.with_section(Some("experts"))
            .set("ids", e.ids.join(","))
            .set("hidden", e.hidden.to_string())
            .set("epochs", e.epochs.to_string())
            .set("lr", e.lr.to_string())
            .set("batch_size", e.batch_size.to_string());
        let t = &self.trainer;
        ini.with_section(Some("trainer"))
            .set("epochs", t.epochs.to_string())
            .set("batch_size", t.batch_size.to_string())
            .set("gate_lr", t.gate_lr.to_string())
            .set("expert_lr", t.expert_lr.to_string())
            .set("walks_train", t.walks_train.to_string())
            .set("walks_infer", t.walks_infer.to_string())
            .set("similarity", t.similarity.as_str())
            .set("finetune_experts", t.finetune_experts.to_string())
            .set("static_lambda", t.static_lambda.map_or("none".to_string(), |l| l.to_string()));
        let a = &self.agent;
        ini.with_section(Some("agent"))
            .set("gamma", a.gamma.to_string())
            .set("tau", a.tau.to_string())
            .set("actor_lr", a.actor_lr.to_string())
            .set("critic_lr", a.critic_lr.to_string())
            .set("alpha_lr", a.alpha_lr.to_string())
            .set("capacity", a.capacity.to_string())
            .set("batch_size", a.batch_size.to_string())
            .set("hidden", a.hidden.to_string())
            .set("lambda_range", format!("{},{}", a.lambda_range.0, a.lambda_range.1))
            .set("target_entropy", a.target_entropy.to_string())
            .set("initial_alpha", a.initial_alpha.to_string())
            .set("updates_per_step", a.updates_per_step.to_string());
        ini
    }

    pub fn to_ini_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_ini().write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is utf-8")
    }

    pub fn expert_ids(&self) -> Vec<String> {
        if self.experts.ids.is_empty() {
            default_expert_ids(self.data.task).into_iter().map(String::from).collect()
        } else {
            self.experts.ids.clone()
        }
    }

    pub fn gate_config(&self, num_experts: usize, num_classes: usize) -> GateConfig {
        let g = &self.gate;
        let mut cfg = GateConfig::new(num_experts, num_classes).with_width(g.d_model, g.heads, g.ff_width);
        cfg.encoder_layers = g.encoder_layers;
        cfg.decoder_layers = g.decoder_layers;
        cfg
    }

    pub fn imitation_config(&self) -> ImitationConfig {
        ImitationConfig {
            epochs: self.gate.imitation_epochs,
            lr: self.gate.imitation_lr,
            batch_size: self.gate.imitation_batch_size,
            walks: self.trainer.walks_train,
            seed: self.seed,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            batch_size: t.batch_size,
            gate_lr: t.gate_lr,
            expert_lr: t.expert_lr,
            walks_train: t.walks_train,
            walks_infer: t.walks_infer,
            similarity: t.similarity,
            finetune_experts: t.finetune_experts,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_str("[trainer]\nstatic_lambda = -0.5\nsimilarity = cosine\n[agent]\nlambda_range = -2,3\n[experts]\nids = oracle:0,face_mlp\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_str(&cfg.to_ini_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.trainer.static_lambda, Some(-0.5));
        assert_eq!(back.agent.lambda_range, (-2.0, 3.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_str("[gate]\nwidth = 3\n").is_err());
        assert!(cfg.apply_str("[trainer]\nepochs = many\n").is_err());
    }
}
