//! Experiment configuration: one JSON file, every section optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use forgetedit::corpus::CorpusConfig;
use forgetedit::dataset::CurriculumConfig;
use forgetedit::editors::icl::IclConfig;
use forgetedit::editors::rank_one::RankOneEditConfig;
use forgetedit::editors::side_memory::SideMemoryConfig;
use forgetedit::model::{ModelConfig, TrainHyper};
use forgetedit::targets::AvoidantTemplateBank;
use forgetedit::unlearners::UnlearnConfig;
use forgetedit::{Error, Result};

use crate::registry::{parse_selection, Method};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Training of the model that sees the whole corpus.
    pub train: TrainHyper,
    /// Training of the retain-only reference model.
    pub ground_truth_train: TrainHyper,
    pub avoidant_bank: AvoidantTemplateBank,
    pub rank_one: RankOneEditConfig,
    pub side_memory: SideMemoryConfig,
    pub icl: IclConfig,
    /// Shared by the four unlearners; `method` is set per run.
    pub unlearn: UnlearnConfig,
    /// `all`, a method name, or a comma-separated list.
    pub method: String,
    /// Copied into every component seed except the corpus seed.
    pub seed: u64,
    pub out: PathBuf,
    /// Route generated tokens through the side memory.
    pub wise_generation_routing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            ground_truth_train: TrainHyper {
                curriculum: CurriculumConfig::disabled(),
                ..TrainHyper::default()
            },
            avoidant_bank: AvoidantTemplateBank::default(),
            rank_one: RankOneEditConfig::default(),
            side_memory: SideMemoryConfig::default(),
            icl: IclConfig::default(),
            unlearn: UnlearnConfig::default(),
            method: "all".into(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            wise_generation_routing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    /// Push `seed` into the component configurations.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.ground_truth_train.seed = seed;
        self.rank_one.seed = seed;
        self.side_memory.seed = seed;
        self.icl.seed = seed;
        self.unlearn.seed = seed;
        self
    }

    /// The configuration as the pipeline uses it.
    pub fn effective(&self) -> Self {
        self.clone().with_seed(self.seed)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        parse_selection(&self.method)
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("{name}.{field}"), reason),
                other => other,
            })
        };
        section("corpus", self.corpus.validate())?;
        section("model", self.model.validate())?;
        section("train", self.train.validate())?;
        section("ground_truth_train", self.ground_truth_train.validate())?;
        section("avoidant_bank", self.avoidant_bank.validate())?;
        section("rank_one", self.rank_one.validate())?;
        section("side_memory", self.side_memory.validate())?;
        section("icl", self.icl.validate())?;
        section("unlearn", self.unlearn.validate())?;
        if self.methods()?.is_empty() {
            return Err(Error::config("method", "no methods selected"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "output directory is empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_fill_in() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "corpus": {"n_authors": 10}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainHyper::default().lr);
        assert_eq!(c.corpus.n_authors, 10);
        assert_eq!(c.corpus.seed, CorpusConfig::default().seed);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"methdo": "all"}"#).is_err());
    }

    #[test]
    fn ground_truth_trains_without_curriculum() {
        let c = ExperimentConfig::default();
        assert_eq!(c.ground_truth_train.curriculum.icl_fraction, 0.0);
        assert!(c.train.curriculum.icl_fraction > 0.0);
    }

    #[test]
    fn seed_reaches_every_component_but_the_corpus() {
        let c = ExperimentConfig::default().with_seed(11);
        assert_eq!(
            [c.train.seed, c.ground_truth_train.seed, c.rank_one.seed, c.side_memory.seed, c.icl.seed, c.unlearn.seed],
            [11; 6]
        );
        assert_eq!(c.corpus.seed, CorpusConfig::default().seed);
    }

    #[test]
    fn bad_method_fails_validation_with_exit_code_2() {
        let c = ExperimentConfig {
            method: "rome:sarcastic".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn section_errors_name_the_section() {
        let mut c = ExperimentConfig::default();
        c.unlearn.lr = 0.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("unlearn.lr"), "{msg}");
    }
}
