//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment. Every key except `master_seed`
//! has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gessl::{DistillKind, GesslConfig};
use crate::hypergrad::HypergradKind;
use crate::losses::LossKind;
use crate::models::PiKind;
use crate::sigma::ProbeConfig;
use crate::taskgen::{
    generate_synthetic, load_cifar_batch, load_raw_dataset, AugmentationSpec, Dataset, SyntheticSpec,
};

/// Every recognized key with a one-line description, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("master_seed", "seed of initialization and task streams (required)"),
    ("seeds", "comma-separated run seeds; defaults to master_seed"),
    ("mode", "gessl | baseline_ssl"),
    ("out_dir", "directory receiving run artifacts"),
    ("episodes", "outer steps per run"),
    ("k", "inner steps K"),
    ("lambda", "extra target steps"),
    ("m", "tasks per outer step M"),
    ("n", "task size N"),
    ("views", "views per class A"),
    ("alpha", "inner learning rate"),
    ("beta", "outer learning rate"),
    ("baseline_lr", "learning rate of the SSL baseline"),
    ("loss", "ntxent | barlow | align_cosine"),
    ("tau", "NT-Xent temperature"),
    ("barlow_lambda", "Barlow off-diagonal weight"),
    ("pi", "prototype | linear"),
    ("pi_tau", "prototype temperature"),
    ("pi_seed", "seed of the frozen linear head"),
    ("hypergrad", "itd | aid_neumann | aid_cg | aid_fd | lookahead"),
    ("neumann_terms", "Neumann series length"),
    ("neumann_eta", "Neumann step"),
    ("cg_iters", "conjugate gradient iterations"),
    ("cg_tol", "conjugate gradient residual tolerance"),
    ("fd_epsilon_rel", "AID-FD relative perturbation"),
    ("lookahead_alpha", "lookahead interpolation"),
    ("lookahead_sync", "lookahead sync period"),
    ("distill", "kl | mse | cross_entropy"),
    ("outer_momentum", "outer momentum"),
    ("outer_weight_decay", "outer weight decay"),
    ("hidden_dims", "comma-separated hidden widths, may be empty"),
    ("embed_dim", "embedding width"),
    ("proj_dim", "projection width"),
    ("aug_noise_sigma", "augmentation jitter"),
    ("aug_dropout_p", "augmentation coordinate dropout"),
    ("aug_scale_lo", "augmentation scale lower bound"),
    ("aug_scale_hi", "augmentation scale upper bound"),
    ("data", "synthetic | raw | cifar"),
    ("data_path", "file for raw or cifar data"),
    ("data_limit", "records to read from a cifar batch, 0 for all"),
    ("data_seed", "seed of the synthetic generator"),
    ("classes", "synthetic classes"),
    ("per_class", "synthetic samples per class"),
    ("dim", "synthetic feature width"),
    ("center_scale", "synthetic center spread"),
    ("within_sigma", "synthetic within-class spread"),
    ("probe_epochs", "linear probe epochs"),
    ("probe_lr", "linear probe step"),
    ("probe_l2", "linear probe ridge"),
    ("probe_k", "neighbours of the k-NN probe"),
    ("eval_every", "probe cadence in episodes, 0 for the end only"),
    ("eval_tasks", "tasks in the sigma evaluation suite"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Gessl,
    BaselineSsl,
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Gessl => "gessl",
            RunMode::BaselineSsl => "baseline_ssl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, seed: u64 },
    Raw(PathBuf),
    Cifar { path: PathBuf, limit: Option<usize> },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { spec, seed } => generate_synthetic(spec, *seed),
            DataSource::Raw(p) => load_raw_dataset(p),
            DataSource::Cifar { path, limit } => load_cifar_batch(path, *limit),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `master_seed` here is the configured one; each run overrides it with its seed.
    pub gessl: GesslConfig,
    pub data: DataSource,
    pub probe: ProbeConfig,
    pub out_dir: PathBuf,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_tasks: usize,
}

impl ExperimentConfig {
    /// Defaults around a given seed.
    pub fn with_seed(master_seed: u64) -> Self {
        ExperimentConfig {
            gessl: GesslConfig {
                master_seed,
                ..GesslConfig::default()
            },
            data: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                seed: 0,
            },
            probe: ProbeConfig::default(),
            out_dir: PathBuf::from("runs"),
            mode: RunMode::Gessl,
            seeds: vec![master_seed],
            eval_every: 0,
            eval_tasks: 16,
        }
    }

    /// The trainer configuration of one seed.
    pub fn run_config(&self, seed: u64) -> GesslConfig {
        GesslConfig {
            master_seed: seed,
            ..self.gessl.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gessl.validate()?;
        self.probe.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must not be empty"));
        }
        if self.eval_tasks == 0 {
            return Err(Error::invalid("eval_tasks must be >= 1"));
        }
        Ok(())
    }
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.map.get(key)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e| Error::Parse {
                line: *line,
                msg: format!("`{key}`: cannot parse {v:?}: {e}"),
            }),
        }
    }

    fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| Error::Parse {
                        line: *line,
                        msg: format!("`{key}`: cannot parse {s:?}: {e}"),
                    })
                })
                .collect(),
        }
    }

    fn choice(&self, key: &str, default: &str, allowed: &[&str]) -> Result<String> {
        let v = self.get(key, default.to_string())?;
        if allowed.contains(&v.as_str()) {
            Ok(v)
        } else {
            let line = self.raw(key).map_or(0, |(_, l)| *l);
            Err(Error::Parse {
                line,
                msg: format!("`{key}` must be one of {}, got {v:?}", allowed.join(" | ")),
            })
        }
    }
}

fn entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        if map.insert(k.to_string(), (v.to_string(), line)).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(Entries { map })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let e = entries(text)?;
    let master_seed: u64 = match e.raw("master_seed") {
        None => return Err(Error::MissingKey("master_seed".into())),
        Some(_) => e.get("master_seed", 0)?,
    };
    let d = ExperimentConfig::with_seed(master_seed);
    let g = &d.gessl;

    let loss = match e.choice("loss", "ntxent", &["ntxent", "barlow", "align_cosine"])?.as_str() {
        "ntxent" => LossKind::NtXent { tau: e.get("tau", 0.1)? },
        "barlow" => LossKind::Barlow {
            lambda_offdiag: e.get("barlow_lambda", 5e-3)?,
        },
        _ => LossKind::AlignCosine,
    };
    let pi_kind = match e.choice("pi", "prototype", &["prototype", "linear"])?.as_str() {
        "prototype" => PiKind::Prototype { tau: e.get("pi_tau", 0.1)? },
        _ => PiKind::Linear { seed: e.get("pi_seed", 0)? },
    };
    let hypergrad = match e
        .choice(
            "hypergrad",
            "aid_fd",
            &["itd", "aid_neumann", "aid_cg", "aid_fd", "lookahead"],
        )?
        .as_str()
    {
        "itd" => HypergradKind::ItdUnrolled,
        "aid_neumann" => HypergradKind::AidNeumann {
            terms: e.get("neumann_terms", 20)?,
            eta: e.get("neumann_eta", 1e-3)?,
        },
        "aid_cg" => HypergradKind::AidCg {
            iters: e.get("cg_iters", 10)?,
            tol: e.get("cg_tol", 1e-10)?,
        },
        "aid_fd" => HypergradKind::AidFd {
            epsilon_rel: e.get("fd_epsilon_rel", 1e-3)?,
        },
        _ => HypergradKind::Lookahead {
            alpha_la: e.get("lookahead_alpha", 0.5)?,
            sync_period: e.get("lookahead_sync", 5)?,
        },
    };
    let distill_kind = match e.choice("distill", "kl", &["kl", "mse", "cross_entropy"])?.as_str() {
        "kl" => DistillKind::Kl,
        "mse" => DistillKind::Mse,
        _ => DistillKind::CrossEntropy,
    };
    let aug_default = AugmentationSpec::default();
    let gessl = GesslConfig {
        k: e.get("k", g.k)?,
        lambda_extra: e.get("lambda", g.lambda_extra)?,
        m: e.get("m", g.m)?,
        alpha: e.get("alpha", g.alpha)?,
        beta: e.get("beta", g.beta)?,
        loss,
        pi_kind,
        hypergrad,
        distill_kind,
        outer_momentum: e.get("outer_momentum", g.outer_momentum)?,
        outer_weight_decay: e.get("outer_weight_decay", g.outer_weight_decay)?,
        n: e.get("n", g.n)?,
        views: e.get("views", g.views)?,
        episodes: e.get("episodes", g.episodes)?,
        master_seed,
        hidden_dims: e.get_list("hidden_dims", g.hidden_dims.clone())?,
        embed_dim: e.get("embed_dim", g.embed_dim)?,
        proj_dim: e.get("proj_dim", g.proj_dim)?,
        augmentation: AugmentationSpec {
            noise_sigma: e.get("aug_noise_sigma", aug_default.noise_sigma)?,
            dropout_p: e.get("aug_dropout_p", aug_default.dropout_p)?,
            scale_range: (
                e.get("aug_scale_lo", aug_default.scale_range.0)?,
                e.get("aug_scale_hi", aug_default.scale_range.1)?,
            ),
        },
        baseline_lr: e.get("baseline_lr", g.baseline_lr)?,
    };
    let spec_default = SyntheticSpec::default();
    let data = match e.choice("data", "synthetic", &["synthetic", "raw", "cifar"])?.as_str() {
        "synthetic" => DataSource::Synthetic {
            spec: SyntheticSpec {
                classes: e.get("classes", spec_default.classes)?,
                per_class: e.get("per_class", spec_default.per_class)?,
                dim: e.get("dim", spec_default.dim)?,
                center_scale: e.get("center_scale", spec_default.center_scale)?,
                within_sigma: e.get("within_sigma", spec_default.within_sigma)?,
            },
            seed: e.get("data_seed", 0)?,
        },
        kind => {
            let path: String = e.get("data_path", String::new())?;
            if path.is_empty() {
                return Err(Error::MissingKey("data_path".into()));
            }
            if kind == "raw" {
                DataSource::Raw(path.into())
            } else {
                let limit: usize = e.get("data_limit", 0)?;
                DataSource::Cifar {
                    path: path.into(),
                    limit: (limit > 0).then_some(limit),
                }
            }
        }
    };
    let pd = ProbeConfig::default();
    let mode = match e.choice("mode", "gessl", &["gessl", "baseline_ssl"])?.as_str() {
        "gessl" => RunMode::Gessl,
        _ => RunMode::BaselineSsl,
    };
    let cfg = ExperimentConfig {
        gessl,
        data,
        probe: ProbeConfig {
            epochs: e.get("probe_epochs", pd.epochs)?,
            lr: e.get("probe_lr", pd.lr)?,
            l2: e.get("probe_l2", pd.l2)?,
            k: e.get("probe_k", pd.k)?,
            seed: master_seed,
        },
        out_dir: PathBuf::from(e.get("out_dir", "runs".to_string())?),
        mode,
        seeds: e.get_list("seeds", vec![master_seed])?,
        eval_every: e.get("eval_every", d.eval_every)?,
        eval_tasks: e.get("eval_tasks", d.eval_tasks)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every key with its resolved value; parsing the output gives back
/// an equal configuration.
pub fn render_config(c: &ExperimentConfig) -> String {
    let g = &c.gessl;
    let mut kv: Vec<(&str, String)> = vec![
        ("master_seed", g.master_seed.to_string()),
        ("seeds", join(&c.seeds)),
        ("mode", c.mode.name().into()),
        ("out_dir", c.out_dir.display().to_string()),
        ("episodes", g.episodes.to_string()),
        ("k", g.k.to_string()),
        ("lambda", g.lambda_extra.to_string()),
        ("m", g.m.to_string()),
        ("n", g.n.to_string()),
        ("views", g.views.to_string()),
        ("alpha", g.alpha.to_string()),
        ("beta", g.beta.to_string()),
        ("baseline_lr", g.baseline_lr.to_string()),
    ];
    match g.loss {
        LossKind::NtXent { tau } => kv.extend([("loss", "ntxent".into()), ("tau", tau.to_string())]),
        LossKind::Barlow { lambda_offdiag } => kv.extend([
            ("loss", "barlow".into()),
            ("barlow_lambda", lambda_offdiag.to_string()),
        ]),
        LossKind::AlignCosine => kv.push(("loss", "align_cosine".into())),
    }
    match g.pi_kind {
        PiKind::Prototype { tau } => kv.extend([("pi", "prototype".into()), ("pi_tau", tau.to_string())]),
        PiKind::Linear { seed } => kv.extend([("pi", "linear".into()), ("pi_seed", seed.to_string())]),
    }
    kv.push(("hypergrad", g.hypergrad.name().into()));
    match g.hypergrad {
        HypergradKind::ItdUnrolled => {}
        HypergradKind::AidNeumann { terms, eta } => kv.extend([
            ("neumann_terms", terms.to_string()),
            ("neumann_eta", eta.to_string()),
        ]),
        HypergradKind::AidCg { iters, tol } => {
            kv.extend([("cg_iters", iters.to_string()), ("cg_tol", tol.to_string())])
        }
        HypergradKind::AidFd { epsilon_rel } => kv.push(("fd_epsilon_rel", epsilon_rel.to_string())),
        HypergradKind::Lookahead { alpha_la, sync_period } => kv.extend([
            ("lookahead_alpha", alpha_la.to_string()),
            ("lookahead_sync", sync_period.to_string()),
        ]),
    }
    kv.extend([
        ("distill", g.distill_kind.name().into()),
        ("outer_momentum", g.outer_momentum.to_string()),
        ("outer_weight_decay", g.outer_weight_decay.to_string()),
        ("hidden_dims", join(&g.hidden_dims)),
        ("embed_dim", g.embed_dim.to_string()),
        ("proj_dim", g.proj_dim.to_string()),
        ("aug_noise_sigma", g.augmentation.noise_sigma.to_string()),
        ("aug_dropout_p", g.augmentation.dropout_p.to_string()),
        ("aug_scale_lo", g.augmentation.scale_range.0.to_string()),
        ("aug_scale_hi", g.augmentation.scale_range.1.to_string()),
    ]);
    match &c.data {
        DataSource::Synthetic { spec, seed } => kv.extend([
            ("data", "synthetic".into()),
            ("data_seed", seed.to_string()),
            ("classes", spec.classes.to_string()),
            ("per_class", spec.per_class.to_string()),
            ("dim", spec.dim.to_string()),
            ("center_scale", spec.center_scale.to_string()),
            ("within_sigma", spec.within_sigma.to_string()),
        ]),
        DataSource::Raw(p) => kv.extend([("data", "raw".into()), ("data_path", p.display().to_string())]),
        DataSource::Cifar { path, limit } => kv.extend([
            ("data", "cifar".into()),
            ("data_path", path.display().to_string()),
            ("data_limit", limit.unwrap_or(0).to_string()),
        ]),
    }
    kv.extend([
        ("probe_epochs", c.probe.epochs.to_string()),
        ("probe_lr", c.probe.lr.to_string()),
        ("probe_l2", c.probe.l2.to_string()),
        ("probe_k", c.probe.k.to_string()),
        ("eval_every", c.eval_every.to_string()),
        ("eval_tasks", c.eval_tasks.to_string()),
    ]);
    let mut out = String::new();
    for (k, v) in kv {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
