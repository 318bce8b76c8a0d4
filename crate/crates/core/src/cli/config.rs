use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::maps::Method;
use crate::openmax::DistanceKind;
use crate::pipeline::{default_tprs, ScorerConfig};

/// Held-out class selection: one class or every class in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UucSpec {
    One(usize),
    All(AllTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTag {
    All,
}

impl FromStr for UucSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(UucSpec::All(AllTag::All));
        }
        s.parse()
            .map(UucSpec::One)
            .map_err(|_| format!("--uuc expects a class id or \"all\", got {s:?}"))
    }
}

/// Fully resolved run configuration, echoed to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub scorer: ScorerConfig,
    pub scenes: Option<PathBuf>,
    pub fit_scenes: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub uuc: Option<UucSpec>,
    pub tpr: Vec<f64>,
    /// Worker threads; 0 picks the number of cores.
    pub jobs: usize,
    pub pgm: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerConfig::default(),
            scenes: None,
            fit_scenes: None,
            models: None,
            scores: None,
            out: None,
            uuc: None,
            tpr: default_tprs(),
            jobs: 0,
            pgm: false,
        }
    }
}

/// Command-line overrides; every field is optional so a config file can
/// supply it instead.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunArgs {
    /// JSON file with any of the options below (flags take precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// softmax | openfcn | openpcs | openipcs
    #[arg(long)]
    pub method: Option<String>,
    /// Scene directory, or a directory of scene directories.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Scenes used for fitting in `pipeline` (defaults to --scenes).
    #[arg(long)]
    pub fit_scenes: Option<PathBuf>,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Held-out class id, or "all" in `pipeline`.
    #[arg(long)]
    pub uuc: Option<String>,
    /// Comma-separated target TPRs.
    #[arg(long)]
    pub tpr: Option<String>,
    #[arg(long)]
    pub components: Option<usize>,
    /// Per-class cap on sampled training pixels.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_rows: Option<usize>,
    #[arg(long)]
    pub tail_size: Option<usize>,
    /// euclidean | cosine | hybrid
    #[arg(long)]
    pub distance: Option<String>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long)]
    pub z_normalize: bool,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write 8-bit PGM renderings of the score maps.
    #[arg(long)]
    pub pgm: bool,
}

pub(crate) fn read_config_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path.to_path_buf())
        } else {
            CliError::Config(format!("{}: {e}", path.display()))
        }
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_tpr_list(s: &str) -> Result<Vec<f64>, CliError> {
    let values = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad TPR value {t:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(values)
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => read_config_file(path)?,
            None => RunConfig::default(),
        };
        let s = &mut cfg.scorer;
        if let Some(m) = &self.method {
            s.method = m.parse::<Method>().map_err(CliError::Config)?;
        }
        if let Some(v) = self.components {
            s.components = v;
        }
        if let Some(v) = self.cap {
            s.cap = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.batch_rows {
            s.batch_rows = v;
        }
        if let Some(v) = self.tail_size {
            s.tail_size = v;
        }
        if let Some(d) = &self.distance {
            s.distance = DistanceKind::parse(d)
                .ok_or_else(|| CliError::Config(format!("unknown distance {d:?} (euclidean, cosine, hybrid)")))?;
        }
        if self.alpha.is_some() {
            s.alpha = self.alpha;
        }
        if let Some(v) = self.quantile {
            s.quantile = v;
        }
        s.z_normalize |= self.z_normalize;
        s.strict |= self.strict;

        for (slot, flag) in [
            (&mut cfg.scenes, &self.scenes),
            (&mut cfg.fit_scenes, &self.fit_scenes),
            (&mut cfg.models, &self.models),
            (&mut cfg.scores, &self.scores),
            (&mut cfg.out, &self.out),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(u) = &self.uuc {
            cfg.uuc = Some(u.parse().map_err(CliError::Config)?);
        }
        if let Some(t) = &self.tpr {
            cfg.tpr = parse_tpr_list(t)?;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.pgm |= self.pgm;

        cfg.scorer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.tpr.is_empty() || cfg.tpr.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(CliError::Config(format!("TPR targets must lie in (0, 1], got {:?}", cfg.tpr)));
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
    }

    pub fn single_uuc(&self) -> Result<Option<usize>, CliError> {
        match self.uuc {
            None => Ok(None),
            Some(UucSpec::One(u)) => Ok(Some(u)),
            Some(UucSpec::All(_)) => Err(CliError::Config("--uuc all is only supported by `pipeline`".into())),
        }
    }
}
