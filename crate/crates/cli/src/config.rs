//! Line-oriented `key = value` files for training and corpus runs.
//! Command-line `--set key=value` overrides beat file values; file values
//! beat the built-in defaults.

use std::fmt::Write as _;
use std::path::PathBuf;

use nam_core::corpus::CorpusSpec;
use nam_core::engine::TrainSettings;
use nam_core::neural::ModelConfig;

/// Split a config text into ordered pairs. `#` starts a comment; blank
/// lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`", i + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: malformed value `{value}`"))
}

/// Model hyperparameters plus training-loop controls.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub settings: TrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { model: ModelConfig::default(), settings: TrainSettings::default() }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "hidden" => self.model.hidden = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "truncation" => self.model.truncation = parse(key, value)?,
            "learning_rate" => self.model.learning_rate = parse(key, value)?,
            "dropout_keep" => self.model.dropout_keep = parse(key, value)?,
            "lambda_l1" => self.model.lambda_l1 = parse(key, value)?,
            "lambda_l2" => self.model.lambda_l2 = parse(key, value)?,
            "lambda_c" => self.model.lambda_c = parse(key, value)?,
            "seed" => self.model.seed = parse(key, value)?,
            "max_epochs" => self.settings.max_epochs = parse(key, value)?,
            "patience" => self.settings.patience = parse(key, value)?,
            "es_samples" => self.settings.es_samples = parse(key, value)?,
            "node_cap" => self.settings.node_cap = parse(key, value)?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<(), String> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// The trainer knobs the checkpoint itself does not record, for run
    /// manifests.
    pub fn settings_lines(&self) -> String {
        let mut s = String::new();
        let t = &self.settings;
        let _ = writeln!(s, "max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "es_samples = {}", t.es_samples);
        let _ = writeln!(s, "node_cap = {}", t.node_cap);
        s
    }
}

/// A corpus spec file: the grammar to draw from plus the size targets.
#[derive(Clone, Debug)]
pub struct CorpusFileSpec {
    /// As written in the file; relative paths resolve against the spec file.
    pub grammar: PathBuf,
    pub spec: CorpusSpec,
}

pub fn parse_corpus_spec(text: &str) -> Result<CorpusFileSpec, String> {
    let mut grammar: Option<PathBuf> = None;
    let mut spec = CorpusSpec::default();
    for (k, v) in parse_kv(text)? {
        match k.as_str() {
            "grammar" => grammar = Some(PathBuf::from(v)),
            "programs" => spec.programs = parse(&k, &v)?,
            "mean_vars" => spec.mean_vars = parse(&k, &v)?,
            "mean_types" => spec.mean_types = parse(&k, &v)?,
            "mean_procs" => spec.mean_procs = parse(&k, &v)?,
            "mean_stmts" => spec.mean_stmts = parse(&k, &v)?,
            "holdout" => spec.holdout = parse(&k, &v)?,
            "seed" => spec.seed = parse(&k, &v)?,
            _ => return Err(format!("unknown corpus spec key `{k}`")),
        }
    }
    let grammar = grammar.ok_or("missing required key `grammar`")?;
    Ok(CorpusFileSpec { grammar, spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_stack_on_defaults() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.model.hidden, 200);
        assert_eq!(cfg.settings.max_epochs, 30);
        let pairs = parse_kv("# comment\nhidden = 16\n\nmax_epochs = 4\n").unwrap();
        cfg.apply_all(&pairs).unwrap();
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.settings.max_epochs, 4);
        cfg.apply("hidden", "8").unwrap();
        assert_eq!(cfg.model.hidden, 8);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply("hiden", "16").is_err());
        assert!(cfg.apply("hidden", "lots").is_err());
        assert!(parse_kv("hidden 16").is_err());
    }

    #[test]
    fn corpus_spec_requires_a_grammar() {
        let spec =
            parse_corpus_spec("grammar = g.ag\nprograms = 10\nmean_stmts = 5.5\n").unwrap();
        assert_eq!(spec.grammar, PathBuf::from("g.ag"));
        assert_eq!(spec.spec.programs, 10);
        assert_eq!(spec.spec.mean_stmts, 5.5);
        // Unset keys keep their defaults.
        assert_eq!(spec.spec.holdout, 0.15);
        assert!(parse_corpus_spec("programs = 10").is_err());
        assert!(parse_corpus_spec("grammar = g.ag\nbogus = 1").is_err());
    }

    #[test]
    fn rendered_settings_parse_back() {
        let mut cfg = TrainConfig::default();
        cfg.apply("patience", "9").unwrap();
        cfg.apply("node_cap", "123").unwrap();
        let text = cfg.settings_lines();
        let mut back = TrainConfig::default();
        back.apply_all(&parse_kv(&text).unwrap()).unwrap();
        assert_eq!(back.settings, cfg.settings);
    }
}
