//! `--key value` flags for every pipeline configuration key.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use radar_tr::PipelineConfig;

/// Pipeline keys given on the command line, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct PipelineOverrides {
    pub values: Vec<(&'static str, String)>,
}

fn check(key: &'static str, value: &str) -> Result<String, String> {
    let mut cfg = PipelineConfig::default();
    cfg.set(key, value).map_err(|e| e.to_string())?;
    if key == "s_m" && (cfg.s_m == 0 || cfg.s_m % 2 == 0) {
        return Err(format!("s_m must be an odd count >= 1, got {}", cfg.s_m));
    }
    Ok(value.trim().to_string())
}

impl PipelineOverrides {
    /// Applies the overrides on top of `cfg`.
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), radar_tr::ConfigError> {
        for (key, value) in &self.values {
            cfg.set(key, value)?;
        }
        Ok(())
    }
}

impl FromArgMatches for PipelineOverrides {
    fn from_arg_matches(matches: &ArgMatches) -> Result<Self, clap::Error> {
        let values = PipelineConfig::keys()
            .iter()
            .filter_map(|&key| matches.get_one::<String>(key).map(|v| (key, v.clone())))
            .collect();
        Ok(Self { values })
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for PipelineOverrides {
    fn augment_args(mut cmd: Command) -> Command {
        for &key in PipelineConfig::keys() {
            cmd = cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .value_parser(move |v: &str| check(key, v))
                    .help_heading("Pipeline configuration")
                    .help(format!("Overrides `{key}` from the configuration file")),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
