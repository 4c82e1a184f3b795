//! Experiment configuration: `[section]` headers and `key = value` lines.
//! `#` starts a comment. Unknown sections and keys are errors.
//!
//! ```text
//! [experiment]
//! seed = 0
//! out = runs/default
//!
//! [dataset]
//! dir = data            # where `gen` writes and the other commands read
//! benchmark = default   # or list sources with [source <id>] sections
//!
//! [train]
//! operators = random:seed=88,out=64,k=1
//! fusion = single
//! epochs = 10
//!
//! [eval]
//! include_train = false
//!
//! [bench]
//! operators = none;sobel
//! fusion_operators = random:seed=88,out=64,k=1;sobel
//! fusions = cascade;early;late
//! seeds = 9,88,321,888
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::classifier::{parse_operator_list, FusionMode, TrainConfig};
use crate::datagen::{make_benchmark, SourceSpec};
use crate::error::{Error, Result};
use crate::operators::OperatorSpec;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// The built-in roster of [`make_benchmark`], seeded by the experiment seed.
    Benchmark,
    /// Explicit sources; the first is the training source.
    Sources(Vec<SourceSpec>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchGrid {
    /// Single-operator rows.
    pub operators: Vec<OperatorSpec>,
    /// Operators combined by every fusion in `fusions`.
    pub fusion_operators: Vec<OperatorSpec>,
    pub fusions: Vec<FusionMode>,
    /// Seeds substituted into the first random operator of `operators`.
    pub seeds: Vec<u64>,
    /// Recipe for single operators and early fusion alike is `[train]`
    /// except for these two, which differ between one operator and several.
    pub dio_batch_size: usize,
    pub dio_decay_interval: usize,
    pub mdio_batch_size: usize,
    pub mdio_decay_interval: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            operators: parse_operator_list(
                "none;sobel;laplacian;log:sigma=1.0,k=5;avgpool:k=2,stride=2;random:seed=88,out=64,k=1",
            )
            .expect("default grid parses"),
            fusion_operators: parse_operator_list("random:seed=88,out=64,k=1;sobel").expect("default grid parses"),
            fusions: vec![FusionMode::Cascade, FusionMode::Early, FusionMode::Late],
            seeds: vec![9, 88, 321, 888],
            dio_batch_size: 128,
            dio_decay_interval: 10,
            mdio_batch_size: 32,
            mdio_decay_interval: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub dataset: DatasetSource,
    /// `seed` here is ignored in favour of the experiment seed.
    pub train: TrainConfig,
    pub include_train: bool,
    pub bench: BenchGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data_dir: PathBuf::from("data"),
            dataset: DatasetSource::Benchmark,
            train: TrainConfig {
                epochs: 8,
                batch_size: 32,
                base_lr: 2e-4,
                decay_interval: 4,
                decay_factor: 0.9,
                seed: 0,
                operators: vec![OperatorSpec::RandomConv {
                    seed: 88,
                    out_c: 64,
                    k: 1,
                }],
                fusion: FusionMode::Single,
            },
            include_train: false,
            bench: BenchGrid::default(),
        }
    }
}

impl ExperimentConfig {
    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sources(&self) -> Vec<SourceSpec> {
        match &self.dataset {
            DatasetSource::Benchmark => make_benchmark(self.seed),
            DatasetSource::Sources(s) => s.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let sources = self.sources();
        if sources.is_empty() {
            return Err(Error::config("dataset has no sources"));
        }
        for s in &sources {
            s.validate()?;
        }
        for (i, a) in sources.iter().enumerate() {
            if sources[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::config(format!("source `{}` is defined twice", a.id)));
            }
        }
        let g = &self.bench;
        if g.operators.is_empty() && g.fusions.is_empty() {
            return Err(Error::config("bench grid is empty"));
        }
        if !g.fusions.is_empty() && g.fusion_operators.len() < 2 {
            return Err(Error::config("bench fusions need at least two fusion_operators"));
        }
        if !g.seeds.is_empty() && !g.operators.iter().any(|o| matches!(o, OperatorSpec::RandomConv { .. })) {
            return Err(Error::config("bench seeds need a random operator in bench operators"));
        }
        if g.dio_batch_size == 0 || g.mdio_batch_size == 0 || g.dio_decay_interval == 0 || g.mdio_decay_interval == 0 {
            return Err(Error::config("bench batch sizes and decay intervals must be at least 1"));
        }
        if g.fusions.contains(&FusionMode::Single) {
            return Err(Error::config("bench fusions take early, late or cascade"));
        }
        g.operators.iter().chain(&g.fusion_operators).try_for_each(OperatorSpec::validate)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut sources: Vec<SourceSpec> = Vec::new();
        let mut benchmark_key = false;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::config(format!("line {lineno}: {msg}"));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if let Some(id) = section.strip_prefix("source ") {
                    let id = id.trim();
                    let mut s = make_benchmark(0)[1].clone();
                    s.id = id.to_string();
                    s.seed = 0;
                    sources.push(s);
                } else if !["experiment", "dataset", "train", "eval", "bench"].contains(&section.as_str()) {
                    return Err(err(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let bad = |e: Error| err(format!("{key}: {e}"));
            match (section.as_str(), key) {
                ("experiment", "seed") => cfg.seed = num(value).map_err(bad)?,
                ("experiment", "out") => cfg.out = PathBuf::from(value),
                ("dataset", "dir") => cfg.data_dir = PathBuf::from(value),
                ("dataset", "benchmark") => {
                    if value != "default" {
                        return Err(err(format!("unknown benchmark `{value}` (only `default` is built in)")));
                    }
                    benchmark_key = true;
                }
                ("train", "operators") => cfg.train.operators = parse_operator_list(value).map_err(bad)?,
                ("train", "fusion") => cfg.train.fusion = value.parse().map_err(bad)?,
                ("train", "epochs") => cfg.train.epochs = num(value).map_err(bad)?,
                ("train", "batch_size") => cfg.train.batch_size = num(value).map_err(bad)?,
                ("train", "base_lr") => cfg.train.base_lr = num(value).map_err(bad)?,
                ("train", "decay_interval") => cfg.train.decay_interval = num(value).map_err(bad)?,
                ("train", "decay_factor") => cfg.train.decay_factor = num(value).map_err(bad)?,
                ("eval", "include_train") => cfg.include_train = num(value).map_err(bad)?,
                ("bench", "operators") => cfg.bench.operators = list_or_empty(value, parse_operator_list).map_err(bad)?,
                ("bench", "fusion_operators") => cfg.bench.fusion_operators = parse_operator_list(value).map_err(bad)?,
                ("bench", "fusions") => {
                    cfg.bench.fusions = list_or_empty(value, |v| v.split(';').map(|f| f.trim().parse()).collect())
                        .map_err(bad)?
                }
                ("bench", "seeds") => {
                    cfg.bench.seeds = list_or_empty(value, |v| v.split(',').map(|s| num(s.trim())).collect())
                        .map_err(bad)?
                }
                ("bench", "dio_batch_size") => cfg.bench.dio_batch_size = num(value).map_err(bad)?,
                ("bench", "dio_decay_interval") => cfg.bench.dio_decay_interval = num(value).map_err(bad)?,
                ("bench", "mdio_batch_size") => cfg.bench.mdio_batch_size = num(value).map_err(bad)?,
                ("bench", "mdio_decay_interval") => cfg.bench.mdio_decay_interval = num(value).map_err(bad)?,
                (sec, _) if sec.starts_with("source ") => {
                    let s = sources.last_mut().expect("source section opened");
                    set_source_key(s, key, value).map_err(bad)?;
                }
                ("", _) => return Err(err(format!("`{key}` appears before any section"))),
                (sec, _) => return Err(err(format!("unknown key `{key}` in [{sec}]"))),
            }
        }
        if !sources.is_empty() {
            if benchmark_key {
                return Err(Error::config("`benchmark` and [source] sections are mutually exclusive"));
            }
            cfg.dataset = DatasetSource::Sources(sources);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ops = |v: &[OperatorSpec]| v.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(";");
        let _ = writeln!(s, "[experiment]\nseed = {}\nout = {}\n", self.seed, self.out.display());
        let _ = writeln!(s, "[dataset]\ndir = {}", self.data_dir.display());
        if self.dataset == DatasetSource::Benchmark {
            let _ = writeln!(s, "benchmark = default");
        }
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\noperators = {}\nfusion = {}\nepochs = {}\nbatch_size = {}\nbase_lr = {:?}\ndecay_interval = {}\ndecay_factor = {:?}",
            ops(&t.operators),
            t.fusion,
            t.epochs,
            t.batch_size,
            t.base_lr,
            t.decay_interval,
            t.decay_factor
        );
        let _ = writeln!(s, "\n[eval]\ninclude_train = {}", self.include_train);
        let g = &self.bench;
        let _ = writeln!(
            s,
            "\n[bench]\noperators = {}\nfusion_operators = {}\nfusions = {}\nseeds = {}\ndio_batch_size = {}\ndio_decay_interval = {}\nmdio_batch_size = {}\nmdio_decay_interval = {}",
            ops(&g.operators),
            ops(&g.fusion_operators),
            g.fusions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
            g.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            g.dio_batch_size,
            g.dio_decay_interval,
            g.mdio_batch_size,
            g.mdio_decay_interval
        );
        if let DatasetSource::Sources(sources) = &self.dataset {
            for src in sources {
                let f3 = |v: [f64; 3]| format!("{:?}, {:?}, {:?}", v[0], v[1], v[2]);
                let _ = writeln!(
                    s,
                    "\n[source {}]\npalette = {}\ntexture = {}\ntexture_scale = {:?}\nnoise = {:?}\nfake_tint = {}\ninjector = {}\nstrength = {:?}\nperiod = {}\nseed = {}\ncount = {}\nfirst_index = {}\nsize = {}",
                    src.id,
                    f3(src.palette),
                    src.texture,
                    src.texture_scale,
                    src.noise,
                    f3(src.fake_tint),
                    src.injector,
                    src.strength,
                    src.period,
                    src.seed,
                    src.count,
                    src.first_index,
                    src.size
                );
            }
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::format(&path.display().to_string(), e.valid_up_to(), "config is not UTF-8"))?;
        Self::parse(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("invalid value `{v}`")))
}

fn list_or_empty<T>(v: &str, parse: impl Fn(&str) -> Result<Vec<T>>) -> Result<Vec<T>> {
    if v.is_empty() {
        Ok(Vec::new())
    } else {
        parse(v)
    }
}

fn triple(v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v.split(',').map(|p| num(p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::config(format!("expected three comma-separated numbers, found `{v}`")))
}

fn set_source_key(s: &mut SourceSpec, key: &str, value: &str) -> Result<()> {
    match key {
        "palette" => s.palette = triple(value)?,
        "texture" => s.texture = value.parse()?,
        "texture_scale" => s.texture_scale = num(value)?,
        "noise" => s.noise = num(value)?,
        "fake_tint" => s.fake_tint = triple(value)?,
        "injector" => s.injector = value.parse()?,
        "strength" => s.strength = num(value)?,
        "period" => s.period = num(value)?,
        "seed" => s.seed = num(value)?,
        "count" => s.count = num(value)?,
        "first_index" => s.first_index = num(value)?,
        "size" => s.size = num(value)?,
        _ => return Err(Error::config(format!("unknown source key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DEFAULT_SIZE;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn explicit_sources_round_trip() {
        let text = "[experiment]\nseed = 5\n[train]\noperators = sobel\n[source A]\ncount = 3\nsize = 16\nperiod = 2\n[source B]\ninjector = spectral-peak\ncount = 2\nsize = 16\nperiod = 4\npalette = 0.1, 0.2, 0.3\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let DatasetSource::Sources(s) = &c.dataset else { panic!() };
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].palette, [0.1, 0.2, 0.3]);
        assert_eq!(s[0].size, DEFAULT_SIZE / 4);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in [
            "[train]\nepoch = 3\n",
            "[trian]\n",
            "seed = 1\n",
            "[train]\nepochs\n",
            "[train]\nepochs = three\n",
            "[train]\nfusion = middle\n",
            "[train]\noperators = sobel;laplacian\n",
            "[dataset]\nbenchmark = imagenet\n",
            "[source X]\ncolour = red\n",
            "[dataset]\nbenchmark = default\n[source X]\n",
            "[source X]\n[source X]\n",
            "[train]\nepochs = 0\n",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text:?}: {e}");
        }
        let e = ExperimentConfig::parse("[train]\nepoch = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("epoch"), "{e}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = ExperimentConfig::parse("# hi\n\n[experiment]\nseed = 7 # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train_config().seed, 7);
    }
}
