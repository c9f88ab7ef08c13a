//! Layered run settings: built-in defaults, then a key=value file, then
//! `--set` overrides, then dedicated flags.

use std::collections::BTreeSet;
use std::path::Path;

use crnet::config::{ConfigSection, KvConfig, ModelConfig};
use crnet::data::SynthConfig;
use crnet::eval::EvalConfig;
use crnet::train::TrainConfig;
use crnet::{Error, Result};

/// Every configurable section. A key is applied to each section that
/// accepts it, so `seed` and `image_size` reach all commands at once.
#[derive(Clone, Debug)]
pub struct Settings {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Keys set explicitly by a file, `--set` or a flag.
    pub explicit: BTreeSet<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut eval = EvalConfig::default();
        eval.finetune = crnet::kshot::FinetuneConfig::from_train(&train);
        Self { synth: SynthConfig::default(), model: ModelConfig::desk(), train, eval, explicit: BTreeSet::new() }
    }
}

impl Settings {
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        for (k, v) in kv.iter() {
            let sections: [&mut dyn ConfigSection; 4] =
                [&mut self.synth, &mut self.model, &mut self.train, &mut self.eval];
            let mut accepted = false;
            for s in sections {
                if s.set_key(k, v)? {
                    accepted = true;
                }
            }
            if !accepted {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            self.explicit.insert(k.to_string());
        }
        Ok(())
    }

    pub fn apply_pair(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let mut kv = KvConfig::default();
        kv.set(key, value.to_string());
        self.apply(&kv)
    }

    /// Defaults, then `file`, then `overrides` (`key=value` strings).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Self::default();
        if let Some(path) = file {
            s.apply(&KvConfig::load(path)?)?;
        }
        let text = overrides.join("\n");
        s.apply(&KvConfig::parse(&text)?)?;
        Ok(s)
    }

    /// Derive finetuning defaults from the training settings unless set.
    pub fn finish(&mut self) {
        let derived = crnet::kshot::FinetuneConfig::from_train(&self.train);
        let ft = &mut self.eval.finetune;
        if !self.explicit.contains("finetune_lr") {
            ft.lr = derived.lr;
        }
        ft.momentum = derived.momentum;
        ft.weight_decay = derived.weight_decay;
        ft.steps = derived.steps;
        ft.loss_weights = derived.loss_weights;
        ft.seed = self.eval.seed;
    }

    /// Every key with its effective value.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.synth.to_kv();
        kv.overlay(&self.model.to_kv());
        kv.overlay(&self.train.to_kv());
        kv.overlay(&self.eval.to_kv());
        kv
    }
}
