//! TOML run configuration: schema, validation, and resolution into a fully
//! populated experiment/problem description. Defaults come from the built-in
//! examples; any section present overrides the corresponding values.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use ndarray::{Array1, Array2};
use serde::Deserialize;

use cableinv::experiments::{DEFAULT_DELTA_LEVELS, DEFAULT_SEED};
use cableinv::{
    build_segment_grid, builtin_example, BoundaryProtocol, ConductanceField, DenominatorNorm,
    ExampleId, ExperimentSpec, Geometry, Ion, ObservationDomain, ProblemBoundary, Scheme,
    TimeGrid, TreeBoundary,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Invert,
    Experiment,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub mode: Mode,
    pub example: Option<String>,
    pub geometry: Option<GeometrySec>,
    pub time: Option<TimeSec>,
    pub physics: Option<PhysicsSec>,
    pub stimulus: Option<StimulusSec>,
    pub observation: Option<ObservationSec>,
    pub noise: Option<NoiseSec>,
    pub inversion: Option<InversionSec>,
    pub conductance: Option<ConductanceSec>,
    pub invert_data: Option<InvertDataSec>,
    pub experiment: Option<ExperimentSec>,
    pub io: Option<IoSec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySec {
    pub kind: String,
    pub length: Option<f64>,
    pub dx: f64,
    pub edges: Option<Vec<EdgeSec>>,
    pub vertices: Option<Vec<VertexSec>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSec {
    pub id: usize,
    pub length: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexSec {
    pub id: usize,
    pub kind: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSec {
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSec {
    pub c_m: Option<f64>,
    pub fiber_radius: Option<f64>,
    pub axial_resistivity: Option<f64>,
    pub g_leak: Option<f64>,
    pub e_leak: Option<f64>,
    pub ions: Option<Vec<IonSec>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonSec {
    pub name: String,
    pub reversal: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSec {
    pub kind: String,
    pub amplitude: Option<f64>,
    pub decay: Option<f64>,
    /// Terminal vertex receiving the current on a tree (default: vertex 1).
    pub at_vertex: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSec {
    pub case: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSec {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta_levels: Option<Vec<f64>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSec {
    pub tau: Option<f64>,
    pub max_iter: Option<usize>,
    pub denominator_norm: Option<String>,
    pub time_dependent_g: Option<bool>,
    pub horizon_multiplier: Option<u32>,
    pub clip_negative: Option<bool>,
    pub scheme: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductanceSec {
    pub profiles: Option<Vec<ProfileSec>>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSec {
    pub ion: String,
    pub kind: String,
    pub value: Option<f64>,
    pub base: Option<f64>,
    pub amplitude: Option<f64>,
    pub center: Option<f64>,
    pub width: Option<f64>,
    /// Adds (t + 1) to the profile, making the field time-dependent.
    pub add_time: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertDataSec {
    pub csv: Option<PathBuf>,
    pub delta: Option<f64>,
    pub synth_delta_rel: Option<f64>,
    pub synth_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSec {
    pub trials: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSec {
    pub output_dir: Option<PathBuf>,
    pub precision: Option<usize>,
}

/// Where the inversion data comes from in `invert` mode.
#[derive(Clone, Debug)]
pub enum InvertSource {
    Csv { path: PathBuf, delta: f64 },
    Synthesized { delta_rel: f64, seed: u64 },
}

/// A fully resolved run: the experiment spec doubles as the shared bundle of
/// physics, grids, truth and inversion policy for all three modes.
pub struct ResolvedRun {
    pub mode: Mode,
    pub spec: ExperimentSpec,
    pub invert: Option<InvertSource>,
    pub output_dir: PathBuf,
    pub precision: usize,
}

pub fn parse_config(text: &str, config_dir: &Path) -> anyhow::Result<ResolvedRun> {
    let file: ConfigFile = toml::from_str(text).context("config parse error")?;
    if file.schema_version != SCHEMA_VERSION {
        bail!(
            "unsupported schema_version {} (this build understands {})",
            file.schema_version,
            SCHEMA_VERSION
        );
    }
    resolve(file, config_dir)
}

fn baseline(file: &ConfigFile) -> anyhow::Result<ExperimentSpec> {
    if let Some(example) = &file.example {
        let id: ExampleId = example.parse().map_err(|e| anyhow!("{e}"))?;
        return Ok(builtin_example(id).map_err(|e| anyhow!("{e}"))?);
    }
    // start from ex3.1 defaults and demand explicit geometry/time/conductance
    let mut spec = builtin_example(ExampleId::Ex31).map_err(|e| anyhow!("{e}"))?;
    spec.name = "custom".into();
    if file.geometry.is_none() || file.time.is_none() {
        bail!("custom runs (no `example`) need [geometry] and [time] sections");
    }
    if file.conductance.is_none() && file.mode != Mode::Invert {
        bail!("custom runs need a [conductance] section with the ground truth");
    }
    Ok(spec)
}

fn resolve(file: ConfigFile, config_dir: &Path) -> anyhow::Result<ResolvedRun> {
    let mut spec = baseline(&file)?;

    if let Some(phys) = &file.physics {
        let p = &mut spec.params;
        if let Some(v) = phys.c_m {
            p.c_m = v;
        }
        if let Some(v) = phys.fiber_radius {
            p.fiber_radius = v;
        }
        if let Some(v) = phys.axial_resistivity {
            p.axial_resistivity = v;
        }
        if let Some(v) = phys.g_leak {
            p.g_leak = v;
        }
        if let Some(v) = phys.e_leak {
            p.e_leak = v;
        }
        if let Some(ions) = &phys.ions {
            p.ions = ions.iter().map(|i| Ion::new(&i.name, i.reversal)).collect();
        }
        p.validate().map_err(|e| anyhow!("physics: {e}"))?;
    }

    if let Some(geo) = &file.geometry {
        spec.geometry = match geo.kind.as_str() {
            "segment" => {
                let length = geo
                    .length
                    .ok_or_else(|| anyhow!("geometry: segment needs `length`"))?;
                Geometry::Segment(build_segment_grid(length, geo.dx).map_err(|e| anyhow!("{e}"))?)
            }
            "tree" => {
                let edges = geo
                    .edges
                    .as_ref()
                    .ok_or_else(|| anyhow!("geometry: tree needs `edges`"))?;
                let specs: Vec<cableinv::EdgeSpec> = edges
                    .iter()
                    .map(|e| cableinv::EdgeSpec {
                        id: e.id,
                        length: e.length,
                        near_vertex: e.from,
                        far_vertex: e.to,
                    })
                    .collect();
                let vertices: Vec<(usize, cableinv::VertexKind)> = match &geo.vertices {
                    Some(list) => list
                        .iter()
                        .map(|v| {
                            Ok((
                                v.id,
                                match v.kind.as_str() {
                                    "terminal" => cableinv::VertexKind::Terminal,
                                    "interior" => cableinv::VertexKind::Interior,
                                    other => bail!("geometry: unknown vertex kind {other:?}"),
                                },
                            ))
                        })
                        .collect::<anyhow::Result<_>>()?,
                    None => {
                        // derive kinds from edge incidence degrees
                        let mut ids: Vec<usize> = edges.iter().flat_map(|e| [e.from, e.to]).collect();
                        ids.sort_unstable();
                        ids.dedup();
                        ids.into_iter()
                            .map(|id| {
                                let degree = edges
                                    .iter()
                                    .filter(|e| e.from == id || e.to == id)
                                    .count();
                                (
                                    id,
                                    if degree == 1 {
                                        cableinv::VertexKind::Terminal
                                    } else {
                                        cableinv::VertexKind::Interior
                                    },
                                )
                            })
                            .collect()
                    }
                };
                Geometry::Tree(
                    cableinv::build_tree(&specs, geo.dx, &vertices).map_err(|e| anyhow!("{e}"))?,
                )
            }
            other => bail!("geometry: unknown kind {other:?} (segment or tree)"),
        };
    }

    if let Some(time) = &file.time {
        spec.base_tgrid = TimeGrid::from_step(time.t_final, time.dt).map_err(|e| anyhow!("{e}"))?;
    }

    if let Some(obs) = &file.observation {
        spec.obs = match obs.case.as_str() {
            "full" => ObservationDomain::FullDomain,
            "endpoints" => ObservationDomain::Endpoints,
            other => bail!("observation: unknown case {other:?} (full or endpoints)"),
        };
    }
    if matches!(spec.geometry, Geometry::Tree(_)) && spec.obs == ObservationDomain::Endpoints {
        bail!("observation: endpoint data is not supported on trees");
    }

    if let Some(inv) = &file.inversion {
        if let Some(tau) = inv.tau {
            if !(tau > 1.0) {
                bail!("inversion: tau must exceed 1, got {tau}");
            }
            spec.tau = tau;
        }
        if let Some(v) = inv.max_iter {
            if v == 0 {
                bail!("inversion: max_iter must be at least 1");
            }
            spec.max_iter = v;
        }
        if let Some(v) = &inv.denominator_norm {
            spec.denominator_norm = match v.as_str() {
                "linf" => DenominatorNorm::LInf,
                "l2" => DenominatorNorm::L2,
                other => bail!("inversion: unknown denominator_norm {other:?} (linf or l2)"),
            };
        }
        if let Some(v) = inv.time_dependent_g {
            spec.time_dependent = v;
        }
        if let Some(v) = inv.horizon_multiplier {
            if v == 0 {
                bail!("inversion: horizon_multiplier must be at least 1");
            }
            spec.horizon_multiplier = v;
        }
        if let Some(v) = inv.clip_negative {
            spec.clip_negative = v;
        }
        if let Some(v) = &inv.scheme {
            spec.scheme = match v.as_str() {
                "implicit" => Scheme::Implicit,
                "explicit" => Scheme::Explicit,
                other => bail!("inversion: unknown scheme {other:?} (implicit or explicit)"),
            };
        }
    }

    if let Some(noise) = &file.noise {
        if let Some(v) = noise.a {
            spec.noise_a = v;
        }
        if let Some(v) = noise.b {
            spec.noise_b = v;
        }
        if let Some(v) = &noise.delta_levels {
            if v.iter().any(|d| *d < 0.0) {
                bail!("noise: delta levels must be >= 0");
            }
            spec.delta_levels = v.clone();
        } else if file.example.is_none() {
            spec.delta_levels = DEFAULT_DELTA_LEVELS.to_vec();
        }
        if let Some(v) = noise.seed {
            spec.base_seed = v;
        }
    } else if file.example.is_none() {
        spec.base_seed = DEFAULT_SEED;
    }

    if let Some(exp) = &file.experiment {
        if let Some(v) = exp.trials {
            if v == 0 {
                bail!("experiment: trials must be at least 1");
            }
            spec.trials = v;
        }
    }

    // stimulus and boundary: rebuilt whenever physics/geometry/stimulus changed
    let rebuilt_boundary = file.stimulus.is_some() || file.geometry.is_some() || file.physics.is_some();
    if rebuilt_boundary {
        let (kind, amplitude, decay, at_vertex) = match &file.stimulus {
            Some(s) => (
                s.kind.clone(),
                s.amplitude.unwrap_or(0.1),
                s.decay.unwrap_or(10.0),
                s.at_vertex.unwrap_or(1),
            ),
            None => ("current".to_string(), 0.1, 10.0, 1),
        };
        let flux = match kind.as_str() {
            "zero" => None,
            "current" => Some(cableinv::stimulus_neumann(&spec.params, move |t| {
                amplitude * t * t * (-decay * t).exp()
            })),
            other => bail!("stimulus: unknown kind {other:?} (current or zero)"),
        };
        spec.boundary = match &spec.geometry {
            Geometry::Segment(_) => {
                let mut bc = BoundaryProtocol::zero();
                if let Some(f) = flux {
                    bc.flux_near = f;
                }
                ProblemBoundary::Segment(bc)
            }
            Geometry::Tree(_) => {
                let mut bc = TreeBoundary::sealed();
                if let Some(f) = flux {
                    bc.fluxes.push((at_vertex, f));
                }
                ProblemBoundary::Tree(bc)
            }
        };
    }

    if let Some(cond) = &file.conductance {
        spec.g_true = conductance_truth(cond, &spec, config_dir)?;
        if let Some(profiles) = &cond.profiles {
            let any_time = profiles.iter().any(|p| p.add_time.unwrap_or(false));
            spec.time_dependent = any_time || spec.time_dependent;
        }
    }

    // shape sanity: build the truth once on the run grid
    let run_tgrid = spec.run_tgrid().map_err(|e| anyhow!("{e}"))?;
    let truth = (spec.g_true)(&run_tgrid);
    if truth.is_time_dependent() != spec.time_dependent {
        bail!(
            "conductance truth is {}time-dependent but inversion.time_dependent_g = {}",
            if truth.is_time_dependent() { "" } else { "not " },
            spec.time_dependent
        );
    }
    truth
        .validate_for(spec.params.n_ions(), spec.geometry.n_nodes(), run_tgrid.n_steps())
        .map_err(|e| anyhow!("conductance: {e}"))?;

    let invert = if file.mode == Mode::Invert {
        let sec = file
            .invert_data
            .as_ref()
            .ok_or_else(|| anyhow!("invert mode needs an [invert_data] section"))?;
        Some(match (&sec.csv, sec.synth_delta_rel) {
            (Some(csv), None) => InvertSource::Csv {
                path: config_dir.join(csv),
                delta: sec
                    .delta
                    .ok_or_else(|| anyhow!("invert_data: CSV data needs `delta`"))?,
            },
            (None, Some(delta_rel)) => InvertSource::Synthesized {
                delta_rel,
                seed: sec.synth_seed.unwrap_or(spec.base_seed),
            },
            _ => bail!("invert_data: give either `csv` + `delta` or `synth_delta_rel`"),
        })
    } else {
        None
    };

    let (output_dir, precision) = match &file.io {
        Some(io) => (
            io.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            io.precision.unwrap_or(cableinv::csv::DEFAULT_PRECISION),
        ),
        None => (PathBuf::from("out"), cableinv::csv::DEFAULT_PRECISION),
    };
    if precision == 0 || precision > 17 {
        bail!("io: precision must be between 1 and 17 significant digits");
    }

    Ok(ResolvedRun { mode: file.mode, spec, invert, output_dir, precision })
}

fn conductance_truth(
    cond: &ConductanceSec,
    spec: &ExperimentSpec,
    config_dir: &Path,
) -> anyhow::Result<cableinv::experiments::TruthFn> {
    if let Some(csv) = &cond.csv {
        let path = config_dir.join(csv);
        let (_, values) = cableinv::csv::read_field_csv(&path).map_err(|e| anyhow!("{e}"))?;
        let n_nodes = spec.geometry.n_nodes();
        let n_ions = spec.params.n_ions();
        if values.nrows() != n_ions || values.ncols() != n_nodes {
            bail!(
                "conductance csv: expected {n_ions} rows x {n_nodes} columns, found {:?}",
                values.dim()
            );
        }
        let profiles: Vec<Array1<f64>> = (0..n_ions).map(|i| values.row(i).to_owned()).collect();
        return Ok(Arc::new(move |_tg: &TimeGrid| {
            ConductanceField::new_static(profiles.clone())
        }));
    }
    let profiles = cond
        .profiles
        .as_ref()
        .ok_or_else(|| anyhow!("conductance: give `profiles` or `csv`"))?;
    if profiles.len() != spec.params.n_ions() {
        bail!(
            "conductance: {} profiles for {} ions",
            profiles.len(),
            spec.params.n_ions()
        );
    }
    // positions of every global node (arclength on its owning edge for trees)
    let positions: Vec<f64> = match &spec.geometry {
        Geometry::Segment(g) => g.nodes().collect(),
        Geometry::Tree(t) => (0..t.n_global()).map(|g| t.node_arclength(g).1).collect(),
    };
    let mut specs = Vec::new();
    for (i, ion) in spec.params.ions.iter().enumerate() {
        let p = profiles
            .iter()
            .find(|p| p.ion == ion.name)
            .ok_or_else(|| anyhow!("conductance: no profile for ion {:?} (index {i})", ion.name))?;
        let add_time = p.add_time.unwrap_or(false);
        let shape = match p.kind.as_str() {
            "constant" => {
                let v = p.value.ok_or_else(|| anyhow!("conductance: constant needs `value`"))?;
                (v, 0.0, 0.0, 1.0)
            }
            "sigmoid" => (
                p.base.ok_or_else(|| anyhow!("conductance: sigmoid needs `base`"))?,
                p.amplitude.ok_or_else(|| anyhow!("conductance: sigmoid needs `amplitude`"))?,
                p.center.ok_or_else(|| anyhow!("conductance: sigmoid needs `center`"))?,
                p.width.unwrap_or(0.01),
            ),
            other => bail!("conductance: unknown profile kind {other:?}"),
        };
        specs.push((shape, add_time));
    }
    let any_time = specs.iter().any(|(_, t)| *t);
    Ok(Arc::new(move |tg: &TimeGrid| {
        let eval = |((base, amp, center, width), _): &((f64, f64, f64, f64), bool), x: f64| {
            if *amp == 0.0 {
                *base
            } else {
                base + amp / (1.0 + ((center - x) / width).exp())
            }
        };
        if any_time {
            let per_ion: Vec<Array2<f64>> = specs
                .iter()
                .map(|entry| {
                    let mut f = Array2::zeros((tg.n_steps(), positions.len()));
                    for n in 0..tg.n_steps() {
                        let t = tg.node(n);
                        for (j, &x) in positions.iter().enumerate() {
                            f[[n, j]] = eval(entry, x) + if entry.1 { t + 1.0 } else { 0.0 };
                        }
                    }
                    f
                })
                .collect();
            ConductanceField::new_dynamic(per_ion)
        } else {
            let per_ion: Vec<Array1<f64>> = specs
                .iter()
                .map(|entry| Array1::from_iter(positions.iter().map(|&x| eval(entry, x))))
                .collect();
            ConductanceField::new_static(per_ion)
        }
    }))
}
