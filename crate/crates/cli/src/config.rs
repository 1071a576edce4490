//! Run configuration: command-line flags over `EPIC_*` environment
//! variables over an optional TOML file over built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use prefmem::coarse::DEFAULT_TAU;
use prefmem::embedding::DEFAULT_DIM;
use prefmem::gateway::{DecodeConfig, HttpConfig};
use prefmem::retrieval::DEFAULT_K;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML file supplying defaults for any setting below
    #[arg(long, global = true, env = "EPIC_CONFIG")]
    pub config: Option<PathBuf>,
    /// Memory store file
    #[arg(long, global = true, env = "EPIC_STORE")]
    pub store: Option<PathBuf>,
    /// Preference profile (JSON)
    #[arg(long, global = true, env = "EPIC_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Coarse similarity threshold in [-1, 1]
    #[arg(long, global = true, env = "EPIC_TAU", allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Retrieval depth
    #[arg(long, global = true, env = "EPIC_K")]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub no_steering: bool,
    #[arg(long, global = true)]
    pub no_fine: bool,
    #[arg(long, global = true)]
    pub no_coarse: bool,
    /// Use the offline mock encoder and keyword-overlap LM
    #[arg(long, global = true)]
    pub mock: bool,
    #[arg(long, global = true, env = "EPIC_SEED")]
    pub seed: Option<u64>,
    /// Embedding dimension
    #[arg(long, global = true, env = "EPIC_DIM")]
    pub dim: Option<usize>,
    #[arg(long, global = true, env = "EPIC_EMBED_URL")]
    pub embed_url: Option<String>,
    #[arg(long, global = true, env = "EPIC_LM_URL")]
    pub lm_url: Option<String>,
    #[arg(long, global = true, env = "EPIC_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long, global = true, env = "EPIC_EMBED_MODEL")]
    pub embed_model: Option<String>,
    #[arg(long, global = true, env = "EPIC_LM_MODEL")]
    pub lm_model: Option<String>,
}

/// Keys accepted in the TOML file; all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    store: Option<PathBuf>,
    profile: Option<PathBuf>,
    tau: Option<f64>,
    k: Option<usize>,
    steering: Option<bool>,
    fine: Option<bool>,
    coarse: Option<bool>,
    mock: Option<bool>,
    seed: Option<u64>,
    dim: Option<usize>,
    embed_url: Option<String>,
    lm_url: Option<String>,
    api_key: Option<String>,
    embed_model: Option<String>,
    lm_model: Option<String>,
    timeout_secs: Option<f64>,
    max_in_flight: Option<usize>,
    max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub store: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub tau: f64,
    pub k: usize,
    pub steering: bool,
    pub fine: bool,
    pub coarse: bool,
    pub mock: bool,
    pub seed: u64,
    pub dim: usize,
    pub embed_url: Option<String>,
    pub lm_url: Option<String>,
    pub api_key: Option<String>,
    pub embed_model: Option<String>,
    pub lm_model: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub max_tokens: u32,
}

impl RunConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => load_file(path)?,
            None => FileConfig::default(),
        };
        // a flag can only switch a stage off, so `flag || file` keeps flag precedence
        let cfg = RunConfig {
            store: args.store.clone().or(file.store),
            profile: args.profile.clone().or(file.profile),
            tau: args.tau.or(file.tau).unwrap_or(DEFAULT_TAU),
            k: args.k.or(file.k).unwrap_or(DEFAULT_K),
            steering: !args.no_steering && file.steering.unwrap_or(true),
            fine: !args.no_fine && file.fine.unwrap_or(true),
            coarse: !args.no_coarse && file.coarse.unwrap_or(true),
            mock: args.mock || file.mock.unwrap_or(false),
            seed: args.seed.or(file.seed).unwrap_or(0),
            dim: args.dim.or(file.dim).unwrap_or(DEFAULT_DIM),
            embed_url: args.embed_url.clone().or(file.embed_url),
            lm_url: args.lm_url.clone().or(file.lm_url),
            api_key: args.api_key.clone().or(file.api_key),
            embed_model: args.embed_model.clone().or(file.embed_model),
            lm_model: args.lm_model.clone().or(file.lm_model),
            timeout: Duration::from_secs_f64(file.timeout_secs.unwrap_or(30.0)),
            max_in_flight: file.max_in_flight.unwrap_or(8),
            max_tokens: file
                .max_tokens
                .unwrap_or(DecodeConfig::default().max_tokens),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(CliError::Config(format!(
                "tau must lie in [-1, 1], got {}",
                self.tau
            )));
        }
        if self.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(CliError::Config("dim must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(CliError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn store_path(&self) -> Result<&Path, CliError> {
        self.store
            .as_deref()
            .ok_or_else(|| CliError::Config("no store path given (--store)".into()))
    }

    fn http(&self, url: &str, model: &Option<String>) -> HttpConfig {
        let mut c = HttpConfig::new(url);
        c.api_key = self.api_key.clone();
        c.model = model.clone();
        c.timeout = self.timeout;
        c
    }

    pub fn embed_http(&self) -> Result<HttpConfig, CliError> {
        let url = self.embed_url.as_deref().ok_or_else(|| {
            CliError::Config(
                "no embedding endpoint: pass --embed-url, set EPIC_EMBED_URL or use --mock".into(),
            )
        })?;
        Ok(self.http(url, &self.embed_model))
    }

    pub fn lm_http(&self) -> Result<Option<HttpConfig>, CliError> {
        Ok(self
            .lm_url
            .as_deref()
            .map(|url| self.http(url, &self.lm_model)))
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            max_tokens: self.max_tokens,
            ..DecodeConfig::default()
        }
    }
}

fn load_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(&GlobalArgs::default()).unwrap();
        assert_eq!((c.tau, c.k, c.dim, c.seed), (0.3, 5, 768, 0));
        assert!(c.steering && c.fine && c.coarse && !c.mock);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "tau = 0.5\nk = 9\nsteering = true\nmock = true\n").unwrap();
        let args = GlobalArgs {
            config: Some(path),
            tau: Some(0.1),
            no_steering: true,
            ..Default::default()
        };
        let c = RunConfig::resolve(&args).unwrap();
        assert_eq!((c.tau, c.k), (0.1, 9));
        assert!(!c.steering && c.mock);
    }

    #[test]
    fn rejects_bad_values() {
        let args = GlobalArgs {
            tau: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::resolve(&args),
            Err(CliError::Config(_))
        ));
        let args = GlobalArgs {
            k: Some(0),
            ..Default::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }

    #[test]
    fn unknown_file_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "taux = 0.5\n").unwrap();
        let args = GlobalArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::resolve(&args),
            Err(CliError::Config(_))
        ));
    }
}
