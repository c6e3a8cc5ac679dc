use std::fs;
use std::path::{Path, PathBuf};

use otgnet::graph::{Dataset, NodeSplit, SplitSpec};
use otgnet::model::ModelConfig;
use otgnet::synth::GenConfig;
use otgnet::train::{SelectionMode, TrainConfig};
use otgnet::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::Overrides;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with nodes.csv, events.csv and tasks.json.
    pub dir: Option<PathBuf>,
    /// split.json; a random 80/10/10 split seeded by the train seed
    /// otherwise.
    pub split: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl FileConfig {
    /// Reads `path`, resolving relative data paths against its directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dir, &mut cfg.data.split].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.gen.seed = s;
        }
        if let Some(k) = o.k {
            self.train.k = k;
        }
        if let Some(m) = o.m {
            self.train.m = m;
        }
        if let Some(r) = o.rho {
            self.train.rho = r;
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
        }
        if let Some(g) = o.gamma {
            self.train.gamma = g;
        }
        if let Some(d) = &o.data {
            self.data.dir = Some(d.clone());
        }
        if let Some(v) = &o.variant {
            apply_variant(&mut self.train, v)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self
            .data
            .dir
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset: set [data] dir or pass --data".into()))?;
        Dataset::load(dir)
    }

    pub fn split(&self, data: &Dataset) -> Result<NodeSplit> {
        match &self.data.split {
            Some(p) => NodeSplit::load(p, data),
            None => NodeSplit::from_spec(
                data,
                &SplitSpec::Random {
                    seed: self.train.seed,
                    fractions: [0.8, 0.1, 0.1],
                },
            ),
        }
    }
}

pub const VARIANTS: [&str; 6] = ["full", "no-ib", "no-triad", "random", "no-diversity", "no-pattern"];

/// Changes exactly the setting a named ablation removes.
pub fn apply_variant(t: &mut TrainConfig, name: &str) -> Result<()> {
    match name {
        "full" => {}
        "no-ib" => t.ib = false,
        "no-triad" => t.m = 0,
        "random" => t.selection = SelectionMode::Random,
        "no-diversity" => t.gamma = 0.0,
        "no-pattern" => t.rho = 0.0,
        other => {
            return Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of {}",
                VARIANTS.join(", ")
            )))
        }
    }
    Ok(())
}
