//! Plain-text run configuration: `[section]` headers, `key = value` lines,
//! `#` comments. Errors carry the offending line number.
//!
//! ```text
//! [data]
//! source = idx
//! dir = data/mnist-subset
//!
//! [model]
//! class_dim = 2
//! shared_dim = 8
//!
//! [train]
//! objective = beta
//! epochs = 30
//! seed = 0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{load_idx, make_synthetic, Dataset, Edge, ExclusiveFactor, SharedFactor, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{LatentLayout, ModelConfig, Objective};
use crate::rng;
use crate::training::TrainConfig;

/// Parsed sections; each value remembers its line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(line_no, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(cfg_err(line_no, "empty section name"));
                }
                ini.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(line_no, format!("expected `key = value`, found `{line}`")))?;
            let section = current
                .as_ref()
                .ok_or_else(|| cfg_err(line_no, "key outside of any section"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(cfg_err(line_no, "empty key"));
            }
            let entries = ini.sections.get_mut(section).expect("section registered");
            if let Some((prev, _)) = entries.insert(k.to_string(), (line_no, v.trim().to_string())) {
                return Err(cfg_err(line_no, format!("duplicate key `{k}` (first set on line {prev})")));
            }
        }
        Ok(ini)
    }

    pub fn section(&self, name: &str) -> Section<'_> {
        static EMPTY: BTreeMap<String, (usize, String)> = BTreeMap::new();
        Section {
            name: name.to_string(),
            entries: self.sections.get(name).unwrap_or(&EMPTY),
        }
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    /// Sets (or overrides) a value, as if it appeared on line 0.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), (0, value.into()));
    }

    /// Canonical text form: sections and keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, (_, v)) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }
}

fn cfg_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

pub struct Section<'a> {
    name: String,
    entries: &'a BTreeMap<String, (usize, String)>,
}

impl Section<'_> {
    pub fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                cfg_err(line, format!("invalid value `{v}` for `{}.{key}`", self.name))
            }),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((_, "")) => Ok(Some(Vec::new())),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| cfg_err(line, format!("invalid list `{v}` for `{}.{key}`", self.name)))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(k, (l, _))| (k.as_str(), *l))
    }

    fn reject_unknown(&self, known: &[&str], prefix_ok: &[&str]) -> Result<()> {
        for (k, line) in self.keys() {
            if !known.contains(&k) && !prefix_ok.iter().any(|p| k.starts_with(p)) {
                return Err(cfg_err(line, format!("unknown key `{k}` in [{}]", self.name)));
            }
        }
        Ok(())
    }
}

/// Where training and test examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        spec: SyntheticSpec,
        test_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Use at most this many training examples.
    pub limit: Option<usize>,
}

impl DataConfig {
    /// Training and test sets. Synthetic test data uses a seed derived from
    /// the training seed.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
            DataSource::Synthetic { spec, test_samples } => {
                let test_spec = SyntheticSpec {
                    samples: *test_samples,
                    seed: rng::derive_seed(spec.seed, &[1]),
                    ..spec.clone()
                };
                (make_synthetic(spec)?, make_synthetic(&test_spec)?)
            }
        };
        let train = match self.limit {
            Some(n) => train.take(n)?,
            None => train,
        };
        Ok((train, test))
    }

    /// Files read by [`DataConfig::load`].
    pub fn input_files(&self) -> Vec<PathBuf> {
        match &self.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![
                train_images.clone(),
                train_labels.clone(),
                test_images.clone(),
                test_labels.clone(),
            ],
            DataSource::Synthetic { .. } => Vec::new(),
        }
    }
}

/// Everything `nvae train` needs, minus the dataset-derived sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `classes = None` means "take it from the dataset".
    pub classes: Option<usize>,
    pub class_dim: usize,
    pub shared_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub alpha_p: f64,
    pub alpha_q: f64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini(&Ini::parse(&text)?, base)
    }

    /// Relative dataset paths are resolved against `base`.
    pub fn from_ini(ini: &Ini, base: &Path) -> Result<Self> {
        for name in ini.section_names() {
            if !["data", "model", "train"].contains(&name) {
                return Err(cfg_err(0, format!("unknown section [{name}]")));
            }
        }
        let data = parse_data(&ini.section("data"), base)?;

        let m = ini.section("model");
        m.reject_unknown(
            &[
                "classes",
                "class_dim",
                "shared_dim",
                "encoder_hidden",
                "decoder_hidden",
                "alpha_p",
                "alpha_q",
                "bias_enabled",
            ],
            &[],
        )?;
        let defaults = ModelConfig::mnist(1);

        let t = ini.section("train");
        t.reject_unknown(
            &[
                "objective",
                "beta_c",
                "beta_s",
                "learning_rate",
                "beta1",
                "beta2",
                "batch_size",
                "epochs",
                "seed",
                "samples",
            ],
            &[],
        )?;
        let td = TrainConfig::default();
        let objective = match t.raw("objective") {
            None => td.objective,
            Some((line, v)) => Objective::parse(v)
                .ok_or_else(|| cfg_err(line, format!("unknown objective `{v}` (lobj, beta, baseline)")))?,
        };
        let train = TrainConfig {
            objective,
            beta_c: t.get_or("beta_c", td.beta_c)?,
            beta_s: t.get_or("beta_s", td.beta_s)?,
            learning_rate: t.get_or("learning_rate", td.learning_rate)?,
            beta1: t.get_or("beta1", td.beta1)?,
            beta2: t.get_or("beta2", td.beta2)?,
            batch_size: t.get_or("batch_size", td.batch_size)?,
            epochs: t.get_or("epochs", td.epochs)?,
            seed: t.get_or("seed", td.seed)?,
            bias_enabled: m.get_or("bias_enabled", defaults.bias_enabled)?,
            samples: t.get_or("samples", td.samples)?,
        };
        train.validate().map_err(|e| cfg_err(0, e.to_string()))?;

        Ok(RunConfig {
            data,
            classes: m.get("classes")?,
            class_dim: m.get_or("class_dim", defaults.layout.class_dim)?,
            shared_dim: m.get_or("shared_dim", defaults.layout.shared_dim)?,
            encoder_hidden: m.list("encoder_hidden")?.unwrap_or(defaults.encoder_hidden),
            decoder_hidden: m.list("decoder_hidden")?.unwrap_or(defaults.decoder_hidden),
            alpha_p: m.get_or("alpha_p", defaults.alpha_p)?,
            alpha_q: m.get_or("alpha_q", defaults.alpha_q)?,
            train,
        })
    }

    /// Model configuration for data of `input_dim` pixels and
    /// `data_classes` classes.
    pub fn model_config(&self, input_dim: usize, data_classes: usize) -> Result<ModelConfig> {
        let classes = self.classes.unwrap_or(data_classes);
        if classes < data_classes {
            return Err(Error::InvalidArgument(format!(
                "model.classes = {classes} but the data has {data_classes} classes"
            )));
        }
        let config = ModelConfig {
            input_dim,
            layout: LatentLayout::new(classes, self.class_dim, self.shared_dim)?,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            alpha_p: self.alpha_p,
            alpha_q: self.alpha_q,
            beta_c: self.train.beta_c,
            beta_s: self.train.beta_s,
            bias_enabled: self.train.bias_enabled,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_edge(s: &str) -> Option<Edge> {
    Some(match s {
        "top" => Edge::Top,
        "bottom" => Edge::Bottom,
        "left" => Edge::Left,
        "right" => Edge::Right,
        _ => return None,
    })
}

/// `intensity:MIN:MAX`, `shift_x:MAX`, `shift_y:MAX`.
fn parse_shared(line: usize, s: &str) -> Result<SharedFactor> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| cfg_err(line, format!("bad number `{t}` in `{s}`")));
    match parts.as_slice() {
        ["intensity", a, b] => Ok(SharedFactor::Intensity { min: num(a)?, max: num(b)? }),
        ["shift_x", m] => Ok(SharedFactor::ShiftX { max: num(m)? }),
        ["shift_y", m] => Ok(SharedFactor::ShiftY { max: num(m)? }),
        _ => Err(cfg_err(line, format!("unknown shared factor `{s}`"))),
    }
}

fn parse_data(d: &Section<'_>, base: &Path) -> Result<DataConfig> {
    let limit = d.get("limit")?;
    let source = match d.raw("source") {
        None | Some((_, "idx")) => {
            d.reject_unknown(
                &["source", "dir", "limit", "train_images", "train_labels", "test_images", "test_labels"],
                &[],
            )?;
            let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
            let dir: Option<PathBuf> = d.get("dir")?;
            let (tri, trl, tei, tel) = match &dir {
                Some(dir) => {
                    let dir = resolve(dir.clone());
                    let (a, b) = crate::data::idx_paths(&dir, "train");
                    let (c, e) = crate::data::idx_paths(&dir, "t10k");
                    (a, b, c, e)
                }
                None => Default::default(),
            };
            let pick = |key: &str, fallback: PathBuf| -> Result<PathBuf> {
                match d.get::<PathBuf>(key)? {
                    Some(p) => Ok(resolve(p)),
                    None if dir.is_some() => Ok(fallback),
                    None => Err(cfg_err(0, format!("[data] needs `dir` or `{key}`"))),
                }
            };
            DataSource::Idx {
                train_images: pick("train_images", tri)?,
                train_labels: pick("train_labels", trl)?,
                test_images: pick("test_images", tei)?,
                test_labels: pick("test_labels", tel)?,
            }
        }
        Some((_, "synthetic")) => {
            d.reject_unknown(
                &["source", "limit", "preset", "classes", "side", "samples", "test_samples", "seed", "shared"],
                &["exclusive."],
            )?;
            let classes = d.get_or("classes", 2)?;
            let samples = d.get_or("samples", 2000)?;
            let seed = d.get_or("seed", 0)?;
            let mut spec = match d.raw("preset") {
                None | Some((_, "class_exclusive")) => SyntheticSpec::class_exclusive(classes, samples, seed),
                Some((_, "shared_only")) => SyntheticSpec::shared_only(classes, samples, seed),
                Some((line, other)) => {
                    return Err(cfg_err(line, format!("unknown preset `{other}` (class_exclusive, shared_only)")))
                }
            };
            spec.side = d.get_or("side", spec.side)?;
            if let Some((line, v)) = d.raw("shared") {
                spec.shared = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_shared(line, s.trim()))
                    .collect::<Result<_>>()?;
            }
            for (k, line) in d.keys() {
                if let Some(class) = k.strip_prefix("exclusive.") {
                    let class: usize = class
                        .parse()
                        .ok()
                        .filter(|&c| c < classes)
                        .ok_or_else(|| cfg_err(line, format!("bad class in `{k}`")))?;
                    let (_, v) = d.raw(k).expect("key exists");
                    spec.exclusive[class] = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| match s.trim().split_once(':') {
                            Some(("bar", e)) => parse_edge(e.trim())
                                .map(|edge| ExclusiveFactor::Bar { edge })
                                .ok_or_else(|| cfg_err(line, format!("unknown edge `{e}`"))),
                            _ => Err(cfg_err(line, format!("unknown exclusive factor `{}`", s.trim()))),
                        })
                        .collect::<Result<_>>()?;
                }
            }
            spec.validate().map_err(|e| cfg_err(0, e.to_string()))?;
            DataSource::Synthetic {
                spec,
                test_samples: d.get_or("test_samples", 500)?,
            }
        }
        Some((line, other)) => return Err(cfg_err(line, format!("unknown data source `{other}` (idx, synthetic)"))),
    };
    Ok(DataConfig { source, limit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let ini = Ini::parse("# top\n[train]\nepochs = 3 # inline\n\n[model]\nencoder_hidden=8,4\n").unwrap();
        assert_eq!(ini.section("train").get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(ini.section("model").list("encoder_hidden").unwrap(), Some(vec![8, 4]));
        assert_eq!(ini.section("nope").get::<usize>("x").unwrap(), None);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("[train]\nepochs\n", 2),
            ("epochs = 1\n", 1),
            ("[train\n", 1),
            ("[train]\nepochs = 1\nepochs = 2\n", 3),
        ];
        for (text, line) in cases {
            match Ini::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        let ini = Ini::parse("[data]\ndir = d\n[train]\n\nepochs = many\n").unwrap();
        let err = RunConfig::from_ini(&ini, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config { line: 5, .. }), "{err}");
        let ini = Ini::parse("[data]\ndir = d\n[train]\nepoch = 1\n").unwrap();
        let err = RunConfig::from_ini(&ini, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("unknown key `epoch`"), "{err}");
    }

    #[test]
    fn idx_defaults_and_overrides() {
        let ini = Ini::parse("[data]\ndir = mnist\n[train]\nseed = 7\nobjective = lobj\n").unwrap();
        let c = RunConfig::from_ini(&ini, Path::new("/cfg")).unwrap();
        match &c.data.source {
            DataSource::Idx { train_images, .. } => {
                assert_eq!(train_images, Path::new("/cfg/mnist/train-images-idx3-ubyte"))
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.objective, Objective::Lobj);
        assert_eq!(c.train.epochs, 30);
        let mc = c.model_config(784, 10).unwrap();
        assert_eq!(mc.layout.z_dim(), 28);
    }

    #[test]
    fn synthetic_section() {
        let text = "[data]\nsource = synthetic\nclasses = 3\nsamples = 30\nshared = intensity:0.6:1.0, shift_x:1\n\
                    exclusive.0 = bar:left\nexclusive.2 =\n[model]\nbias_enabled = false\n";
        let c = RunConfig::from_ini(&Ini::parse(text).unwrap(), Path::new(".")).unwrap();
        let DataSource::Synthetic { spec, test_samples } = &c.data.source else {
            panic!("expected synthetic");
        };
        assert_eq!(*test_samples, 500);
        assert_eq!(spec.shared.len(), 2);
        assert_eq!(spec.exclusive[0], vec![ExclusiveFactor::Bar { edge: Edge::Left }]);
        assert_eq!(spec.exclusive[1], vec![ExclusiveFactor::Bar { edge: Edge::Top }]);
        assert!(spec.exclusive[2].is_empty());
        assert!(!c.train.bias_enabled);
    }
}
