//! Experiment configuration: a TOML file with fixed sections. Unknown keys
//! are rejected and everything is validated before any computation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use xover_core::catalog::CatalogKind;
use xover_core::{
    enumerate_sequences, ApproxDesign, CrossoverLayout, Family, ModelSpec, OptimizerConfig,
    PriorKind, Structure, TreatmentSequence,
};

use crate::CliError;

/// Candidate enumeration is refused beyond this many sequences.
pub const ENUMERATION_CAP: usize = 4096;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub layout: LayoutSection,
    pub model: ModelSection,
    #[serde(default)]
    pub candidates: Option<CandidateSection>,
    #[serde(default)]
    pub prior: Option<PriorSection>,
    #[serde(default)]
    pub correlation: Option<CorrelationSection>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub comparison: Option<ComparisonSection>,
    #[serde(default)]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub outputs: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub treatments: usize,
    pub periods: usize,
    /// Subjects `n`; the criterion is computed for this many.
    #[serde(default = "default_subjects")]
    pub subjects: usize,
}

fn default_subjects() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: String,
    /// Gamma shape `kappa`.
    pub shape: Option<f64>,
    #[serde(default)]
    pub carryover: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SequenceList {
    Keyword(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSection {
    /// `"all"` or an explicit list of letter strings.
    pub sequences: SequenceList,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    #[serde(default = "default_prior_kind")]
    pub kind: String,
    pub variance: Option<f64>,
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    pub estimate: Option<Vec<f64>>,
    pub ci_low: Option<Vec<f64>>,
    pub ci_high: Option<Vec<f64>>,
    pub csv: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub dataset_structure: Option<String>,
}

fn default_prior_kind() -> String {
    "uniform".into()
}

fn default_sample_size() -> usize {
    xover_core::priors::DEFAULT_SAMPLE_SIZE
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSection {
    pub structures: Vec<String>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedWeights {
    pub name: String,
    pub sequences: Vec<String>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSection {
    #[serde(default)]
    pub catalogs: Vec<String>,
    #[serde(default)]
    pub designs: Vec<NamedWeights>,
    /// `"optimal"` or the name of one of `designs`.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_fit_structure")]
    pub structure: String,
}

fn default_fit_structure() -> String {
    "cs".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub theta: Vec<f64>,
    pub sequences: Vec<String>,
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_fit_structure")]
    pub structure: String,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default)]
    pub check_replications: usize,
    pub check_working: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Where the prior comes from, after path resolution.
#[derive(Debug, Clone)]
pub enum PriorSource {
    Inline {
        estimate: Vec<f64>,
        ci_low: Vec<f64>,
        ci_high: Vec<f64>,
    },
    Csv(PathBuf),
    Dataset { path: PathBuf, structure: Structure },
}

#[derive(Debug, Clone)]
pub struct ResolvedPrior {
    pub source: PriorSource,
    pub kind: PriorKind,
    pub sample_size: usize,
}

#[derive(Debug, Clone)]
pub struct ResolvedSimulation {
    pub theta: Vec<f64>,
    pub design: ApproxDesign,
    pub truth: xover_core::CorrelationKind,
    pub calibrate: bool,
    pub check_replications: usize,
    pub check_working: Structure,
}

/// A validated experiment. Optional sections stay `None` until a command
/// needs them.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub layout: CrossoverLayout,
    pub spec: ModelSpec,
    pub candidates: Option<Vec<TreatmentSequence>>,
    pub prior: Option<ResolvedPrior>,
    pub cells: Option<(Vec<Structure>, Vec<f64>)>,
    pub optimizer: OptimizerConfig,
    pub catalogs: Vec<CatalogKind>,
    pub designs: Vec<(String, ApproxDesign)>,
    pub reference: Option<String>,
    pub fit: Option<(Option<PathBuf>, Structure)>,
    pub simulation: Option<ResolvedSimulation>,
    pub out_dir: Option<PathBuf>,
}

fn parse_sequences(list: &[String], layout: &CrossoverLayout, what: &str) -> Result<Vec<TreatmentSequence>, CliError> {
    list.iter()
        .map(|s| {
            let seq: TreatmentSequence = s
                .parse()
                .map_err(|e| config_err(format!("{what}: {e}")))?;
            seq.validate(layout).map_err(|e| config_err(format!("{what}: {e}")))?;
            Ok(seq)
        })
        .collect()
}

fn weighted(
    sequences: &[String],
    weights: &Option<Vec<f64>>,
    layout: &CrossoverLayout,
    what: &str,
) -> Result<ApproxDesign, CliError> {
    let seqs = parse_sequences(sequences, layout, what)?;
    let design = match weights {
        None => ApproxDesign::uniform(seqs),
        Some(w) => ApproxDesign::normalized(seqs, w.clone()),
    };
    design.map_err(|e| config_err(format!("{what}: {e}")))
}

fn structure(s: &str, what: &str) -> Result<Structure, CliError> {
    s.parse().map_err(|e| config_err(format!("{what}: {e}")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Validate every present section. Relative paths are taken from
    /// `base`, normally the directory holding the config file.
    pub fn resolve(&self, base: &Path) -> Result<Experiment, CliError> {
        let l = &self.layout;
        let layout = CrossoverLayout::new(l.treatments, l.periods, l.subjects)
            .map_err(|e| config_err(format!("[layout] {e}")))?;
        let family = match self.model.family.to_ascii_lowercase().as_str() {
            "bernoulli" | "binary" => Family::Bernoulli,
            "poisson" => Family::Poisson,
            "gamma" => {
                let shape = self
                    .model
                    .shape
                    .ok_or_else(|| config_err("[model] gamma family needs shape"))?;
                Family::gamma(shape).map_err(|e| config_err(format!("[model] {e}")))?
            }
            other => return Err(config_err(format!("[model] unknown family {other:?}"))),
        };
        if self.model.shape.is_some() && !matches!(family, Family::Gamma { .. }) {
            return Err(config_err("[model] shape applies to the gamma family only"));
        }
        let spec = ModelSpec::canonical(family, self.model.carryover)
            .map_err(|e| config_err(format!("[model] {e}")))?;
        let resolve_path = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };

        let candidates = match &self.candidates {
            None => None,
            Some(c) => {
                let seqs = match &c.sequences {
                    SequenceList::Keyword(k) if k.eq_ignore_ascii_case("all") => {
                        enumerate_sequences(&layout, None, ENUMERATION_CAP)
                            .map_err(|e| config_err(format!("[candidates] {e}")))?
                    }
                    SequenceList::Keyword(k) => {
                        return Err(config_err(format!(
                            "[candidates] sequences must be \"all\" or a list, got {k:?}"
                        )))
                    }
                    SequenceList::List(list) => parse_sequences(list, &layout, "[candidates]")?,
                };
                if seqs.is_empty() {
                    return Err(config_err("[candidates] sequence list is empty"));
                }
                let mut sorted = seqs.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != seqs.len() {
                    return Err(config_err("[candidates] duplicate sequences"));
                }
                self.optimizer
                    .validate(seqs.len())
                    .map_err(|e| config_err(format!("[optimizer] {e}")))?;
                Some(seqs)
            }
        };

        let m = spec.param_layout(&layout).len();
        let prior = match &self.prior {
            None => None,
            Some(p) => {
                let kind = match p.kind.to_ascii_lowercase().as_str() {
                    "uniform" => {
                        if p.variance.is_some() {
                            return Err(config_err("[prior] variance applies to the normal prior only"));
                        }
                        PriorKind::Uniform
                    }
                    "normal" => {
                        let variance = p
                            .variance
                            .ok_or_else(|| config_err("[prior] normal prior needs variance"))?;
                        if !(variance > 0.0 && variance.is_finite()) {
                            return Err(config_err("[prior] variance must be positive"));
                        }
                        PriorKind::Normal { variance }
                    }
                    other => return Err(config_err(format!("[prior] unknown kind {other:?}"))),
                };
                if p.sample_size == 0 {
                    return Err(config_err("[prior] sample_size must be positive"));
                }
                let inline = p.estimate.is_some() || p.ci_low.is_some() || p.ci_high.is_some();
                let count = inline as usize + p.csv.is_some() as usize + p.dataset.is_some() as usize;
                if count != 1 {
                    return Err(config_err(
                        "[prior] give exactly one of estimate/ci_low/ci_high, csv or dataset",
                    ));
                }
                if p.dataset_structure.is_some() && p.dataset.is_none() {
                    return Err(config_err("[prior] dataset_structure needs dataset"));
                }
                let source = if inline {
                    let (Some(e), Some(lo), Some(hi)) = (&p.estimate, &p.ci_low, &p.ci_high) else {
                        return Err(config_err("[prior] inline table needs estimate, ci_low and ci_high"));
                    };
                    if e.len() != m || lo.len() != m || hi.len() != m {
                        return Err(config_err(format!(
                            "[prior] inline table rows must match the {m} model parameters"
                        )));
                    }
                    PriorSource::Inline {
                        estimate: e.clone(),
                        ci_low: lo.clone(),
                        ci_high: hi.clone(),
                    }
                } else if let Some(c) = &p.csv {
                    PriorSource::Csv(resolve_path(c))
                } else {
                    let path = resolve_path(p.dataset.as_ref().expect("counted above"));
                    let s = structure(p.dataset_structure.as_deref().unwrap_or("cs"), "[prior]")?;
                    PriorSource::Dataset { path, structure: s }
                };
                Some(ResolvedPrior {
                    source,
                    kind,
                    sample_size: p.sample_size,
                })
            }
        };

        let cells = match &self.correlation {
            None => None,
            Some(c) => {
                if c.structures.is_empty() || c.alphas.is_empty() {
                    return Err(config_err("[correlation] structures and alphas must be non-empty"));
                }
                let structures = c
                    .structures
                    .iter()
                    .map(|s| structure(s, "[correlation]"))
                    .collect::<Result<Vec<_>, _>>()?;
                for &s in &structures {
                    for &a in &c.alphas {
                        s.with_alpha(a)
                            .validate(layout.periods())
                            .map_err(|e| config_err(format!("[correlation] {s} alpha {a}: {e}")))?;
                    }
                }
                Some((structures, c.alphas.clone()))
            }
        };

        let comparison = self.comparison.clone().unwrap_or_default();
        let catalogs = comparison
            .catalogs
            .iter()
            .map(|c| c.parse().map_err(|e| config_err(format!("[comparison] {e}"))))
            .collect::<Result<Vec<CatalogKind>, _>>()?;
        let mut designs = vec![];
        for d in &comparison.designs {
            if designs.iter().any(|(n, _)| n == &d.name) {
                return Err(config_err(format!("[comparison] duplicate design name {:?}", d.name)));
            }
            let what = format!("[comparison] design {:?}", d.name);
            designs.push((d.name.clone(), weighted(&d.sequences, &d.weights, &layout, &what)?));
        }
        let reference = match comparison.reference.as_deref() {
            None | Some("optimal") => None,
            Some(name) => {
                if !designs.iter().any(|(n, _)| n == name) {
                    return Err(config_err(format!(
                        "[comparison] reference {name:?} is neither \"optimal\" nor a named design"
                    )));
                }
                Some(name.to_string())
            }
        };

        let fit = match &self.fit {
            None => None,
            Some(f) => Some((f.dataset.as_ref().map(resolve_path), structure(&f.structure, "[fit]")?)),
        };

        let simulation = match &self.simulation {
            None => None,
            Some(s) => {
                if s.theta.len() != m {
                    return Err(config_err(format!(
                        "[simulation] theta has {} entries, the model has {m} parameters",
                        s.theta.len()
                    )));
                }
                let design = weighted(&s.sequences, &s.weights, &layout, "[simulation]")?;
                let truth = structure(&s.structure, "[simulation]")?.with_alpha(s.alpha);
                truth
                    .validate(layout.periods())
                    .map_err(|e| config_err(format!("[simulation] {e}")))?;
                let check_working = match &s.check_working {
                    Some(w) => structure(w, "[simulation]")?,
                    None => truth.structure,
                };
                Some(ResolvedSimulation {
                    theta: s.theta.clone(),
                    design,
                    truth,
                    calibrate: s.calibrate,
                    check_replications: s.check_replications,
                    check_working,
                })
            }
        };

        Ok(Experiment {
            seed: self.seed,
            layout,
            spec,
            candidates,
            prior,
            cells,
            optimizer: self.optimizer,
            catalogs,
            designs,
            reference,
            fit,
            simulation,
            out_dir: self.outputs.dir.as_ref().map(resolve_path),
        })
    }
}
