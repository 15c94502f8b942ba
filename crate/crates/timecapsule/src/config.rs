//! Flat key=value run configuration with dotted section paths, mirrored
//! one-to-one by `--set key=value` flag overrides. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::jepa::{JepaCompare, JepaDistance};
use crate::model::{PredictorAxis, ResidualMode};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {0}: expected key = value")]
    Malformed(usize),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
}

fn parse<T: std::str::FromStr>(
    key: &str,
    value: &str,
    wanted: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted,
    })
}

fn parse_ratios(key: &str, value: &str) -> Result<(usize, usize, usize), ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() == 3 {
        if let (Ok(a), Ok(b), Ok(c)) =
            (parts[0].parse(), parts[1].parse(), parts[2].parse())
        {
            return Ok((a, b, c));
        }
    }
    Err(ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted: "three comma-separated integers, e.g. 6,2,2",
    })
}

/// Applies one dotted key to the config, e.g. `model.d = 64`.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let bad = |wanted| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        wanted,
    };
    match key {
        "data.path" => config.data_path = PathBuf::from(value),
        "data.ratios" => config.ratios = parse_ratios(key, value)?,

        "model.v" => config.model.v = parse(key, value, "usize")?,
        "model.t_x" => config.model.t_x = parse(key, value, "usize")?,
        "model.t_y" => config.model.t_y = parse(key, value, "usize")?,
        "model.t_c" => config.model.t_c = parse(key, value, "usize")?,
        "model.l" => config.model.l = parse(key, value, "usize")?,
        "model.v_c" => config.model.v_c = parse(key, value, "usize")?,
        "model.t_e" => config.model.t_e = parse(key, value, "usize")?,
        "model.l_e" => config.model.l_e = parse(key, value, "usize")?,
        "model.v_e" => config.model.v_e = parse(key, value, "usize")?,
        "model.d" => config.model.d = parse(key, value, "usize")?,
        "model.heads" => config.model.heads = parse(key, value, "usize")?,
        "model.d_ff" => config.model.d_ff = parse(key, value, "usize")?,
        "model.tunnels" => config.model.tunnels = parse(key, value, "usize")?,
        "model.noise_std" => config.model.noise_std = parse(key, value, "f64")?,
        "model.use_noise" => config.model.use_noise = parse(key, value, "bool")?,
        "model.use_pe" => config.model.use_pe = parse(key, value, "bool")?,
        "model.huber_delta" => config.model.huber_delta = parse(key, value, "f64")?,
        "model.mlp_double_gelu" => {
            config.model.mlp_double_gelu = parse(key, value, "bool")?
        }
        "model.residual_mode" => {
            config.model.residual_mode = ResidualMode::parse(value)
                .ok_or_else(|| bad("one of residual|original|off"))?
        }
        "model.predictor_axis" => {
            config.model.predictor_axis = match value {
                "temporal" => PredictorAxis::Temporal,
                "flat" => PredictorAxis::Flat,
                _ => return Err(bad("one of temporal|flat")),
            }
        }

        "jepa.enabled" => config.model.jepa.enabled = parse(key, value, "bool")?,
        "jepa.lambda" => config.model.jepa.lambda = parse(key, value, "f64")?,
        "jepa.tau" => config.model.jepa.tau = parse(key, value, "f64")?,
        "jepa.beta" => config.model.jepa.beta = parse(key, value, "f64")?,
        "jepa.compare" => {
            config.model.jepa.compare = match value {
                "predictor" => JepaCompare::Predictor,
                "encoder" => JepaCompare::Encoder,
                _ => return Err(bad("one of predictor|encoder")),
            }
        }
        "jepa.distance" => {
            config.model.jepa.distance = match value {
                "huber" => JepaDistance::Huber,
                "l2" => JepaDistance::L2,
                _ => return Err(bad("one of huber|l2")),
            }
        }

        "optim.lr" => config.optim.lr = parse(key, value, "f64")?,
        "optim.beta1" => config.optim.beta1 = parse(key, value, "f64")?,
        "optim.beta2" => config.optim.beta2 = parse(key, value, "f64")?,
        "optim.eps" => config.optim.eps = parse(key, value, "f64")?,
        "optim.weight_decay" => config.optim.weight_decay = parse(key, value, "f64")?,

        "train.batch_size" => config.batch_size = parse(key, value, "usize")?,
        "train.epochs" => config.epochs = parse(key, value, "usize")?,
        "train.patience" => config.patience = parse(key, value, "usize")?,
        "train.seed" => config.seed = parse(key, value, "u64")?,
        "train.raw_metrics" => config.raw_metrics = parse(key, value, "bool")?,

        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

/// Parses a config file of `key = value` lines; `#` starts a comment.
pub fn apply_file(config: &mut TrainConfig, path: &Path) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Malformed(lineno + 1))?;
        apply(config, key.trim(), value.trim())?;
    }
    Ok(())
}

/// Applies `key=value` override strings, after any file values.
pub fn apply_overrides(config: &mut TrainConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for (i, o) in overrides.iter().enumerate() {
        let (key, value) = o.split_once('=').ok_or(ConfigError::Malformed(i + 1))?;
        apply(config, key.trim(), value.trim())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use std::io::Write;

    fn base() -> TrainConfig {
        TrainConfig::new(PathBuf::from("data.csv"), ModelConfig::new(7, 512, 96))
    }

    #[test]
    fn applies_known_keys() {
        let mut c = base();
        apply(&mut c, "model.d", "32").unwrap();
        apply(&mut c, "train.seed", "7").unwrap();
        apply(&mut c, "data.ratios", "7,1,2").unwrap();
        apply(&mut c, "model.residual_mode", "off").unwrap();
        apply(&mut c, "jepa.distance", "l2").unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.seed, 7);
        assert_eq!(c.ratios, (7, 1, 2));
        assert_eq!(c.model.residual_mode, crate::model::ResidualMode::Off);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = base();
        assert!(matches!(
            apply(&mut c, "model.dd", "32"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            apply(&mut c, "modell.d", "32"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn bad_values_rejected_with_context() {
        let mut c = base();
        match apply(&mut c, "model.d", "abc") {
            Err(ConfigError::BadValue { key, value, .. }) => {
                assert_eq!(key, "model.d");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected: {other:?}"),
        }
        assert!(apply(&mut c, "data.ratios", "6,2").is_err());
        assert!(apply(&mut c, "model.residual_mode", "none").is_err());
    }

    #[test]
    fn file_parsing_with_comments_and_overrides_win() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment line").unwrap();
        writeln!(f, "model.d = 16  # trailing comment").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "train.epochs = 5").unwrap();
        let mut c = base();
        apply_file(&mut c, f.path()).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.epochs, 5);

        apply_overrides(&mut c, &["model.d=64".to_string()]).unwrap();
        assert_eq!(c.model.d, 64, "flag override must win over file value");
    }

    #[test]
    fn malformed_lines_error_with_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "model.d = 16").unwrap();
        writeln!(f, "not an assignment").unwrap();
        let mut c = base();
        assert!(matches!(
            apply_file(&mut c, f.path()),
            Err(ConfigError::Malformed(2))
        ));
    }
}
