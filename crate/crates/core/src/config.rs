//! Flat `key = value` configuration checked against the shipped schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::data::{GenConfig, VocabSpec};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Method};
use crate::model::{ModelConfig, SamplerConfig, TapFamily, TapSite};
use crate::train::{mix_seed, LrSchedule, SftConfig, TrainConfig};

pub const SCHEMA_TEXT: &str = include_str!("../config-schema.txt");

#[derive(Debug, Clone, PartialEq)]
pub enum KeyType {
    Uint,
    Float,
    Bool,
    Path,
    List,
    Enum(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaEntry {
    pub key: String,
    pub ty: KeyType,
    pub default: String,
    pub help: String,
}

fn parse_schema(text: &str) -> Vec<SchemaEntry> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            let cols: Vec<&str> = l.splitn(4, '|').map(str::trim).collect();
            assert_eq!(cols.len(), 4, "malformed schema line: {l}");
            let ty = match cols[1] {
                "uint" => KeyType::Uint,
                "float" => KeyType::Float,
                "bool" => KeyType::Bool,
                "path" => KeyType::Path,
                "list" => KeyType::List,
                t => {
                    let inner = t
                        .strip_prefix("enum(")
                        .and_then(|s| s.strip_suffix(')'))
                        .unwrap_or_else(|| panic!("unknown schema type {t}"));
                    KeyType::Enum(inner.split(',').map(String::from).collect())
                }
            };
            SchemaEntry {
                key: cols[0].to_string(),
                ty,
                default: cols[2].to_string(),
                help: cols[3].to_string(),
            }
        })
        .collect()
}

pub fn schema() -> &'static [SchemaEntry] {
    static SCHEMA: OnceLock<Vec<SchemaEntry>> = OnceLock::new();
    SCHEMA.get_or_init(|| parse_schema(SCHEMA_TEXT))
}

/// Help text listing every key.
pub fn schema_help() -> String {
    let mut out = String::from("Configuration keys (--config <file> with `key = value` lines, or --set key=value):\n");
    for e in schema() {
        let default = if e.default.is_empty() { "<empty>" } else { &e.default };
        out.push_str(&format!("  {:<22} [default: {default}]\n      {}\n", e.key, e.help));
    }
    out
}

fn check_value(entry: &SchemaEntry, value: &str) -> Result<()> {
    if value.is_empty() {
        return Ok(());
    }
    let ok = match &entry.ty {
        KeyType::Uint => value.parse::<u64>().is_ok(),
        KeyType::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        KeyType::Bool => matches!(value, "true" | "false"),
        KeyType::Path | KeyType::List => true,
        KeyType::Enum(opts) => opts.iter().any(|o| o == value),
    };
    if ok {
        return Ok(());
    }
    let expected = match &entry.ty {
        KeyType::Uint => "a non-negative integer".to_string(),
        KeyType::Float => "a finite number".to_string(),
        KeyType::Bool => "true or false".to_string(),
        KeyType::Enum(opts) => format!("one of {}", opts.join(", ")),
        KeyType::Path | KeyType::List => unreachable!(),
    };
    Err(Error::Usage(format!("invalid value '{value}' for key '{}': expected {expected}", entry.key)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: schema().iter().map(|e| (e.key.clone(), e.default.clone())).collect(),
        }
    }
}

impl Config {
    /// Defaults, then the file, then each `key=value` override in order.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got '{s}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value, got '{line}'", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let entry = schema()
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| Error::Usage(format!("unknown config key '{key}'")))?;
        check_value(entry, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' missing from the schema"))
    }

    fn required(&self, key: &str) -> Result<&str> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(Error::Config(format!("key '{key}' needs a value")));
        }
        Ok(v)
    }

    pub fn uint(&self, key: &str) -> Result<usize> {
        Ok(self.required(key)?.parse().expect("validated on set"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        Ok(self.required(key)?.parse().expect("validated on set"))
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        Ok(self.required(key)?.parse().expect("validated on set"))
    }

    pub fn opt_uint(&self, key: &str) -> Option<usize> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| v.parse().expect("validated on set"))
    }

    pub fn opt_float(&self, key: &str) -> Option<f64> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| v.parse().expect("validated on set"))
    }

    pub fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn float_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Usage(format!("invalid number '{s}' in key '{key}'")))
            })
            .collect()
    }

    pub fn uint_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Usage(format!("invalid index '{s}' in key '{key}'")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out_dir").unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn method(&self) -> Result<Method> {
        let m = self.raw("method");
        Method::parse(m).ok_or_else(|| Error::Usage(format!("unknown method '{m}'")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            vocab_size: self.uint("model.vocab_size")?,
            context_len: self.uint("model.context_len")?,
            n_layers: self.uint("model.n_layers")?,
            d_model: self.uint("model.d_model")?,
            n_heads: self.uint("model.n_heads")?,
            ffn_mult: self.uint("model.ffn_mult")?,
            seed: self.u64("model.seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn vocab_spec(&self) -> Result<VocabSpec> {
        VocabSpec::standard(
            self.uint("model.vocab_size")?,
            self.uint("data.n_positive_cues")?,
            self.uint("data.n_negative_cues")?,
        )
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            n: self.uint("data.n_pairs")?,
            prompt_len: self.uint("data.prompt_len")?,
            resp_len: self.uint("data.resp_len")?,
            cue_density: self.float("data.cue_density")?,
            seed: self.u64("data.seed")?,
        })
    }

    /// Held-out generation settings: same shape, independent seed.
    pub fn eval_gen_config(&self) -> Result<GenConfig> {
        let base = self.gen_config()?;
        Ok(GenConfig {
            n: self.uint("data.n_eval_pairs")?,
            seed: mix_seed(base.seed, 0x6576_616c),
            ..base
        })
    }

    pub fn mapo_sites(&self) -> Result<Option<Vec<TapSite>>> {
        let items = self.list("mapo.sites");
        if items.is_empty() {
            return Ok(None);
        }
        items
            .iter()
            .map(|s| {
                let (fam, layer) = s
                    .split_once('.')
                    .ok_or_else(|| Error::Usage(format!("activation site '{s}' should look like ffn.0")))?;
                let layer = layer
                    .parse()
                    .map_err(|_| Error::Usage(format!("activation site '{s}' has a bad layer index")))?;
                Ok(TapSite {
                    layer,
                    family: TapFamily::parse(fam).map_err(|_| Error::Usage(format!("unknown activation site '{s}'")))?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn loss_config(&self, method: Method, beta: f64) -> Result<LossConfig> {
        let epsilon = self.float("epsilon")?;
        let c = LossConfig {
            method,
            beta,
            alpha: self.float("alpha")?,
            simpo_gamma: self.float("simpo_gamma")?,
            dpop_lambda: self.float("dpop_lambda")?,
            epsilon,
            l1_coeff: self.float("l1_coeff")?,
            mask_stop_gradient: self.flag("mask_stop_gradient"),
            zero_threshold: self.opt_float("zero_threshold").unwrap_or(epsilon),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, method: Method, beta: f64) -> Result<TrainConfig> {
        let c = TrainConfig {
            loss: self.loss_config(method, beta)?,
            lr: self.float("lr")?,
            mask_lr: self.float("mask_lr")?,
            weight_decay: self.float("weight_decay")?,
            mask_weight_decay: self.float("mask_weight_decay")?,
            epochs: self.uint("epochs")?,
            batch_size: self.uint("batch_size")?,
            grad_accum: self.uint("grad_accum")?,
            warmup_frac: self.float("warmup_frac")?,
            lr_schedule: LrSchedule::parse(self.raw("lr_schedule")).expect("validated on set"),
            grad_clip: self.float("grad_clip")?,
            seed: self.u64("seed")?,
            log_every: self.uint("log_every")?,
            checkpoint_every: self.uint("checkpoint_every")?,
            stop_after_steps: self.opt_uint("stop_after_steps"),
            mapo_sites: self.mapo_sites()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn sft_config(&self) -> Result<SftConfig> {
        Ok(SftConfig {
            lr: self.float("sft.lr")?,
            weight_decay: self.float("weight_decay")?,
            epochs: self.uint("sft.epochs")?,
            batch_size: self.uint("sft.batch_size")?,
            grad_clip: self.float("grad_clip")?,
            seed: self.u64("seed")?,
            log_every: self.uint("log_every")?,
        })
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            temperature: self.float("sample.temperature")?,
            top_p: self.float("sample.top_p")?,
            max_len: self.uint("sample.max_len")?,
            argmax: self.flag("sample.argmax"),
        })
    }
}
