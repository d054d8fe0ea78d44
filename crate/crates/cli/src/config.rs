//! `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Every key the pipeline understands.
pub const KNOWN_KEYS: &[&str] = &[
    "scene.width",
    "scene.height",
    "scene.frames",
    "scene.dynamic",
    "scene.coverage",
    "scene.noise",
    "scene.fp_rate",
    "scene.fn_rate",
    "scene.strides",
    "scene.window",
    "scene.camera",
    "scene.seed",
    "align.iterations",
    "align.lr",
    "align.w_smooth",
    "align.w_flow",
    "train.iterations",
    "train.lambda_ssim",
    "train.confidence_percentile",
    "train.loss_form",
    "train.refine_poses",
    "train.refine_iterations",
    "train.lr_position",
    "train.lr_opacity",
    "train.lr_staticness",
    "train.lr_rotation",
    "train.lr_translation",
    "train.export_threshold",
    "train.seed",
    "render.mode",
    "render.frames",
    "eval.threshold",
    "eval.sequence",
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `section.key = value` lines. `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!("{origin}:{}: expected 'section.key = value'", i + 1)));
            };
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError(format!("{origin}:{}: unknown key '{key}'", i + 1)));
            }
            values.insert(key.to_owned(), value.trim().to_owned());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Command-line overrides win over file values.
    pub fn set(&mut self, key: &str, value: Option<impl ToString>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_owned(), v.to_string());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| ConfigError(format!("{key} = '{v}': {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.values.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| ConfigError(format!("{key} = '{v}': {e}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}
