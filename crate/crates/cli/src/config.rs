//! Tunable settings: built-in defaults, then a `key = value` file, then
//! explicit flags.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use loopclose::features::NmsWindow;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Settings {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub lambda_cls: f64,
    pub lambda_sim: f64,
    pub augment: bool,
    pub val_split: f64,
    pub alpha: f64,
    pub window_px: u32,
    pub window_shape: NmsWindow,
    pub min_score: f32,
    pub k: usize,
    pub threshold: f64,
    pub shots: usize,
    pub steps: usize,
    pub n_queries: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let h = loopclose::Hyperparams::default();
        let ingest = loopclose::features::IngestOptions::default();
        Settings {
            seed: h.seed,
            lr: h.learning_rate,
            momentum: h.momentum,
            epochs: h.epochs,
            batch_size: h.batch_size,
            margin: h.margin,
            lambda_cls: h.lambda_cls,
            lambda_sim: h.lambda_sim,
            augment: h.augment,
            val_split: h.val_split,
            alpha: loopclose::NetworkConfig::default().alpha,
            window_px: ingest.window_px,
            window_shape: ingest.window,
            min_score: ingest.min_score,
            k: 5,
            threshold: loopclose::query::DEFAULT_THRESHOLD,
            shots: 5,
            steps: 20,
            n_queries: 100,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "lr",
    "momentum",
    "epochs",
    "batch-size",
    "margin",
    "lambda-cls",
    "lambda-sim",
    "augment",
    "val-split",
    "alpha",
    "window-px",
    "window-shape",
    "min-score",
    "k",
    "threshold",
    "shots",
    "steps",
    "n-queries",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for `{key}`"))
}

fn check(ok: bool, key: &str, rule: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(format!("`{key}` {rule}"))
    }
}

fn suggest(key: &str) -> String {
    KEYS.iter()
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| format!(" (did you mean `{k}`?)"))
        .unwrap_or_default()
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lr" => {
                self.lr = parse(key, value)?;
                check(self.lr >= 0.0 && self.lr.is_finite(), key, "must be a finite number >= 0")?;
            }
            "momentum" => {
                self.momentum = parse(key, value)?;
                check((0.0..1.0).contains(&self.momentum), key, "must lie in [0, 1)")?;
            }
            "epochs" => {
                self.epochs = parse(key, value)?;
                check(self.epochs >= 1, key, "must be at least 1")?;
            }
            "batch-size" => {
                self.batch_size = parse(key, value)?;
                check(self.batch_size >= 2, key, "must be at least 2")?;
            }
            "margin" => {
                self.margin = parse(key, value)?;
                check(self.margin > 0.0 && self.margin.is_finite(), key, "must be positive")?;
            }
            "lambda-cls" => {
                self.lambda_cls = parse(key, value)?;
                check(self.lambda_cls >= 0.0, key, "must be >= 0")?;
            }
            "lambda-sim" => {
                self.lambda_sim = parse(key, value)?;
                check(self.lambda_sim >= 0.0, key, "must be >= 0")?;
            }
            "augment" => self.augment = parse(key, value)?,
            "val-split" => {
                self.val_split = parse(key, value)?;
                check((0.0..1.0).contains(&self.val_split), key, "must lie in [0, 1)")?;
            }
            "alpha" => {
                self.alpha = parse(key, value)?;
                check((0.0..=1.0).contains(&self.alpha), key, "must lie in [0, 1]")?;
            }
            "window-px" => self.window_px = parse(key, value)?,
            "window-shape" => {
                self.window_shape = match value {
                    "square" => NmsWindow::Square,
                    "circle" => NmsWindow::Circle,
                    _ => return Err(format!("`{key}` must be `square` or `circle`, got {value:?}")),
                }
            }
            "min-score" => {
                self.min_score = parse(key, value)?;
                check(self.min_score.is_finite(), key, "must be finite")?;
            }
            "k" => {
                self.k = parse(key, value)?;
                check(self.k >= 1, key, "must be at least 1")?;
            }
            "threshold" => {
                self.threshold = parse(key, value)?;
                check((0.0..=1.0).contains(&self.threshold), key, "must lie in [0, 1]")?;
            }
            "shots" => {
                self.shots = parse(key, value)?;
                check(self.shots >= 1, key, "must be at least 1")?;
            }
            "steps" => self.steps = parse(key, value)?,
            "n-queries" => {
                self.n_queries = parse(key, value)?;
                check(self.n_queries >= 1, key, "must be at least 1")?;
            }
            _ => return Err(format!("unknown config key `{key}`{}", suggest(key))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{origin}:{}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_flag<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<(), String> {
        match value {
            Some(v) => self.set(key, &v.to_string()).map_err(|e| format!("--{key}: {e}")),
            None => Ok(()),
        }
    }

    /// One `key = value` line per setting, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let value = serde_json::to_value(self).expect("settings serialize");
        KEYS.iter()
            .map(|k| match value[*k].as_str() {
                Some(text) => format!("{k} = {text}\n"),
                None => format!("{k} = {}\n", value[*k]),
            })
            .collect()
    }

    pub fn hyperparams(&self) -> loopclose::Hyperparams {
        loopclose::Hyperparams {
            learning_rate: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            margin: self.margin,
            lambda_cls: self.lambda_cls,
            lambda_sim: self.lambda_sim,
            augment: self.augment,
            seed: self.seed,
            val_split: self.val_split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_defaults_parse_back() {
        let d = Settings::default();
        let mut s = Settings {
            seed: 99,
            ..Settings::default()
        };
        s.apply_text(&d.render(), "defaults").unwrap();
        assert_eq!(s, d);
    }

    #[test]
    fn every_key_is_settable() {
        let value = serde_json::to_value(Settings::default()).unwrap();
        assert_eq!(value.as_object().unwrap().len(), KEYS.len());
        for k in KEYS {
            let mut s = Settings::default();
            let text = value[*k].as_str().map_or_else(|| value[*k].to_string(), str::to_string);
            s.set(k, &text).unwrap();
        }
    }

    #[test]
    fn rejects_unknown_keys_with_a_hint() {
        let err = Settings::default().apply_text("# c\n\nepoch = 3\n", "f").unwrap_err();
        assert!(err.contains("f:3") && err.contains("`epochs`"), "{err}");
        assert!(Settings::default().apply_text("epochs 3", "f").is_err());
        assert!(Settings::default().set("epochs", "0").is_err());
    }
}
