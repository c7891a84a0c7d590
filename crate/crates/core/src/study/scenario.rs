//! Scenario definitions: the preset catalog and the TOML scenario format.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{Scheme, Strata};
use crate::error::{Error, Result};
use crate::model::{Design, ModelSpec, PopulationParams, SubjectDesign};

/// Sigmoid Emax variants used in the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Hyperbolic Emax: the Hill coefficient is fixed at 1.
    Emax,
    /// Sigmoid Emax with an estimated Hill coefficient.
    Hill,
}

impl ModelKind {
    pub fn spec(self) -> ModelSpec {
        ModelSpec::sig_emax(self == ModelKind::Hill)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emax" => Ok(ModelKind::Emax),
            "hill" => Ok(ModelKind::Hill),
            _ => Err(Error::InvalidConfig(format!("unknown model `{s}` (expected emax or hill)"))),
        }
    }
}

/// An uncertainty method evaluated by the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Asymptotic,
    Case,
    Par,
    Np,
    Cnp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Asymptotic, Method::Case, Method::Par, Method::Np, Method::Cnp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Asymptotic => "asymptotic",
            Method::Case => "case",
            Method::Par => "par",
            Method::Np => "np",
            Method::Cnp => "cnp",
        }
    }

    pub fn scheme(self) -> Option<Scheme> {
        match self {
            Method::Asymptotic => None,
            Method::Case => Some(Scheme::Case),
            Method::Par => Some(Scheme::Par),
            Method::Np => Some(Scheme::Np),
            Method::Cnp => Some(Scheme::Cnp),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// A fully specified simulation scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub model: ModelKind,
    pub theta_true: PopulationParams,
    pub design: Design,
    /// Simulated datasets.
    pub k: usize,
    /// Bootstrap replicates per dataset and method.
    pub b: usize,
    /// Conditional draws per subject for the NP and cNP methods.
    pub m: usize,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    /// Stratification of the case bootstrap.
    pub case_strata: Option<Strata>,
}

impl ScenarioSpec {
    pub fn spec(&self) -> ModelSpec {
        self.model.spec()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::InvalidConfig(format!("scenario {}: {m}", self.name)));
        if self.k == 0 || self.b == 0 {
            return cfg("K and B must be at least 1");
        }
        if self.methods.is_empty() {
            return cfg("no methods selected");
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return cfg("alpha levels must lie in (0, 1)");
        }
        if self.methods.iter().any(|m| matches!(m, Method::Np | Method::Cnp)) && self.m == 0 {
            return cfg("M must be at least 1");
        }
        if !(self.theta_true.mu.get(3).is_some_and(|g| *g > 0.0)) {
            return cfg("the Hill coefficient must be positive");
        }
        if self.model == ModelKind::Emax && self.theta_true.mu[3] != 1.0 {
            return cfg("the emax model fixes the Hill coefficient at 1");
        }
        self.theta_true.validate(&self.spec())?;
        self.design.validate()
    }

    /// Scale to the full-size profile (K = 200, B = 200).
    pub fn long_run(mut self) -> Self {
        self.k = 200;
        self.b = 200;
        self
    }
}

const RICH: [f64; 4] = [0.0, 100.0, 300.0, 1000.0];
const SPARSE_PAIRS: [[f64; 2]; 4] = [[0.0, 1000.0], [100.0, 1000.0], [0.0, 300.0], [100.0, 300.0]];
const FULL_SET: [f64; 6] = [0.0, 100.0, 300.0, 500.0, 750.0, 1000.0];

fn groups(spec: &[(&str, usize, &[f64])]) -> Design {
    let mut subjects: Vec<SubjectDesign> = Vec::new();
    for (label, count, doses) in spec {
        let first = subjects.len() + 1;
        subjects.extend(Design::group(label, *count, doses, first));
    }
    Design { subjects }
}

fn label(doses: &[f64]) -> String {
    doses.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

fn rich_design() -> Design {
    groups(&[("rich", 100, &RICH)])
}

fn sparse_design(per_group: usize) -> Design {
    let labels: Vec<String> = SPARSE_PAIRS.iter().map(|p| label(p)).collect();
    let spec: Vec<(&str, usize, &[f64])> = labels.iter().zip(&SPARSE_PAIRS).map(|(l, p)| (l.as_str(), per_group, &p[..])).collect();
    groups(&spec)
}

fn unbalanced(sets: &[&[f64]], per_group: usize) -> Design {
    let labels: Vec<String> = sets.iter().map(|s| label(s)).collect();
    let spec: Vec<(&str, usize, &[f64])> = labels.iter().zip(sets).map(|(l, s)| (l.as_str(), per_group, *s)).collect();
    groups(&spec)
}

fn unbalanced_design(kind: &str) -> Option<Design> {
    let f = &FULL_SET;
    Some(match kind {
        "low" => unbalanced(&[&f[..2], &f[..3], &f[..4], &f[..5], f], 20),
        "high" => unbalanced(&[&f[4..], &f[3..], &f[2..], &f[1..], f], 20),
        "mix" => {
            unbalanced(&[&[0.0, 1000.0], &[0.0, 500.0, 1000.0], &[0.0, 300.0, 750.0, 1000.0], &[0.0, 100.0, 500.0, 750.0, 1000.0], f], 20)
        }
        "sparserich" => {
            let mut sets: Vec<&[f64]> = SPARSE_PAIRS.iter().map(|p| &p[..]).collect();
            sets.push(f);
            unbalanced(&sets, 20)
        }
        _ => return None,
    })
}

/// Names accepted by [`scenario_preset`].
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for design in ["rich", "sparse"] {
        for model in ["emax", "hill"] {
            out.push(format!("{design}_{model}"));
            for s in ["sigma03", "sigma05"] {
                out.push(format!("{design}_{model}_{s}"));
            }
        }
    }
    for u in ["low", "high", "mix", "sparserich"] {
        out.push(format!("unb_{u}"));
        out.push(format!("unb_{u}_emax"));
    }
    out
}

/// Look up a named scenario. Every preset uses E0 = 5, Emax = 30,
/// ED50 = 500, ω² = (0.09, 0.49, 0.49), cov(Emax, ED50) = 0.245 and
/// σ = 0.1 unless its name says otherwise, with K = 20 and B = 50.
pub fn scenario_preset(name: &str) -> Result<ScenarioSpec> {
    let unknown = || Error::UnknownScenario { name: name.to_string(), available: preset_names().join(", ") };
    let parts: Vec<&str> = name.split('_').collect();
    let (model, design, sigma) = match parts.as_slice() {
        ["unb", kind] => (ModelKind::Hill, unbalanced_design(kind), 0.1),
        ["unb", kind, "emax"] => (ModelKind::Emax, unbalanced_design(kind), 0.1),
        [d, m, rest @ ..] => {
            let model: ModelKind = m.parse().map_err(|_| unknown())?;
            let design = match *d {
                "rich" => Some(rich_design()),
                "sparse" => Some(sparse_design(50)),
                _ => None,
            };
            let sigma = match rest {
                [] => 0.1,
                ["sigma03"] => 0.3,
                ["sigma05"] => 0.5,
                _ => return Err(unknown()),
            };
            (model, design, sigma)
        }
        _ => return Err(unknown()),
    };
    let design = design.ok_or_else(unknown)?;
    let gamma = if model == ModelKind::Hill { 3.0 } else { 1.0 };
    Ok(ScenarioSpec {
        name: name.to_string(),
        model,
        theta_true: PopulationParams::reference_emax(gamma, sigma),
        design,
        k: 20,
        b: 50,
        m: 100,
        methods: Method::ALL.to_vec(),
        alphas: vec![0.1, 0.05],
        case_strata: None,
    })
}

/// True parameter values as written in a scenario file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaFile {
    pub e0: Option<f64>,
    pub emax: Option<f64>,
    pub ed50: Option<f64>,
    pub gamma: Option<f64>,
    /// Variances of the E0, Emax and ED50 random effects.
    pub omega2: Option<[f64; 3]>,
    pub cov_emax_ed50: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupFile {
    pub label: String,
    pub count: usize,
    pub doses: Vec<f64>,
}

/// Scenario file contents. A file either names a preset in `base` and
/// overrides some of its fields, or spells out every field.
///
/// ```toml
/// name = "rich_emax_small"
/// base = "rich_emax"
/// K = 5
/// B = 20
/// methods = ["asymptotic", "par"]
///
/// [theta]
/// sigma = 0.2
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub base: Option<String>,
    pub model: Option<ModelKind>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub alphas: Option<Vec<f64>>,
    pub case_strata: Option<Strata>,
    pub theta: Option<ThetaFile>,
    pub groups: Option<Vec<GroupFile>>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("scenario file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files serialize")
    }

    /// Merge onto the base preset, or build from scratch, and validate.
    pub fn resolve(&self) -> Result<ScenarioSpec> {
        let missing = |field: &str| Error::InvalidConfig(format!("scenario file without `base` must set `{field}`"));
        let mut s = match &self.base {
            Some(b) => scenario_preset(b)?,
            None => {
                let model = self.model.ok_or_else(|| missing("model"))?;
                ScenarioSpec {
                    name: self.name.clone().ok_or_else(|| missing("name"))?,
                    model,
                    theta_true: PopulationParams::reference_emax(if model == ModelKind::Hill { 3.0 } else { 1.0 }, 0.1),
                    design: Design::default(),
                    k: 20,
                    b: 50,
                    m: 100,
                    methods: Method::ALL.to_vec(),
                    alphas: vec![0.1, 0.05],
                    case_strata: None,
                }
            }
        };
        if self.base.is_none() && self.groups.is_none() {
            return Err(missing("groups"));
        }
        if let Some(n) = &self.name {
            s.name = n.clone();
        }
        if let Some(m) = self.model {
            if m != s.model {
                s.model = m;
                s.theta_true.mu[3] = if m == ModelKind::Hill { 3.0 } else { 1.0 };
            }
        }
        if let Some(k) = self.k {
            s.k = k;
        }
        if let Some(b) = self.b {
            s.b = b;
        }
        if let Some(m) = self.m {
            s.m = m;
        }
        if let Some(m) = &self.methods {
            s.methods = m.clone();
        }
        if let Some(a) = &self.alphas {
            s.alphas = a.clone();
        }
        if self.case_strata.is_some() {
            s.case_strata = self.case_strata;
        }
        if let Some(t) = &self.theta {
            let mu = &mut s.theta_true.mu;
            for (slot, v) in mu.iter_mut().zip([t.e0, t.emax, t.ed50, t.gamma]) {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            let om = &mut s.theta_true.omega;
            if let Some(w) = t.omega2 {
                for d in 0..3 {
                    om[(d, d)] = w[d];
                }
            }
            if let Some(c) = t.cov_emax_ed50 {
                om[(1, 2)] = c;
                om[(2, 1)] = c;
            }
            if let Some(sg) = t.sigma {
                s.theta_true.sigma = vec![sg];
            }
        }
        if let Some(g) = &self.groups {
            let spec: Vec<(&str, usize, &[f64])> = g.iter().map(|g| (g.label.as_str(), g.count, g.doses.as_slice())).collect();
            s.design = groups(&spec);
        }
        s.validate()?;
        Ok(s)
    }
}

/// Describe a resolved scenario as a self-contained file.
pub fn scenario_to_file(s: &ScenarioSpec) -> ScenarioFile {
    let mut groups: Vec<GroupFile> = Vec::new();
    for subj in &s.design.subjects {
        let label = subj.group.clone().unwrap_or_default();
        match groups.last_mut() {
            Some(g) if g.label == label && g.doses == subj.doses => g.count += 1,
            _ => groups.push(GroupFile { label, count: 1, doses: subj.doses.clone() }),
        }
    }
    let om: &DMatrix<f64> = &s.theta_true.omega;
    ScenarioFile {
        name: Some(s.name.clone()),
        base: None,
        model: Some(s.model),
        k: Some(s.k),
        b: Some(s.b),
        m: Some(s.m),
        methods: Some(s.methods.clone()),
        alphas: Some(s.alphas.clone()),
        case_strata: s.case_strata,
        theta: Some(ThetaFile {
            e0: Some(s.theta_true.mu[0]),
            emax: Some(s.theta_true.mu[1]),
            ed50: Some(s.theta_true.mu[2]),
            gamma: Some(s.theta_true.mu[3]),
            omega2: Some([om[(0, 0)], om[(1, 1)], om[(2, 2)]]),
            cov_emax_ed50: Some(om[(1, 2)]),
            sigma: Some(s.theta_true.sigma[0]),
        }),
        groups: Some(groups),
    }
}
