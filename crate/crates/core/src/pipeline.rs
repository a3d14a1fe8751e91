//! Whole-model compression: reorder, initialize, optionally optimize, and
//! package each layer in turn.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{derive_seed, ClusteringMethod};
use crate::error::{Error, Result};
use crate::learner::{finalize, harden, optimize_layer, LossParts, Schedule, SoftMapping, TraceRow};
use crate::matrix::Matrix;
use crate::model::{CalibrationSet, ModelContainer};
use crate::packfmt::{measure_footprint, CompressedLayer, CompressedModel, FootprintReport};
use crate::planner::{derive_plan, validate_alpha, CompressionPlan, Mode};
use crate::reorder::{init_layer, reconstruct, reorder, CodebookSet, HardMapping, ScaleEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    /// Multi-codebook for every layer.
    #[default]
    Auto,
    MultiScale,
    MultiCodebook,
}

impl ModeChoice {
    pub fn resolve(self) -> Mode {
        match self {
            ModeChoice::Auto | ModeChoice::MultiCodebook => Mode::MultiCodebook,
            ModeChoice::MultiScale => Mode::MultiScale,
        }
    }
}

impl fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeChoice::Auto => f.write_str("auto"),
            ModeChoice::MultiScale => f.write_str("multi-scale"),
            ModeChoice::MultiCodebook => f.write_str("multi-codebook"),
        }
    }
}

impl FromStr for ModeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ModeChoice::Auto);
        }
        Ok(match s.parse::<Mode>()? {
            Mode::MultiScale => ModeChoice::MultiScale,
            Mode::MultiCodebook => ModeChoice::MultiCodebook,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub mode: ModeChoice,
    pub clustering: ClusteringMethod,
    /// Run the joint optimization; otherwise stop after initialization.
    pub optimize: bool,
    pub schedule: Schedule,
    pub scale_estimator: ScaleEstimator,
    /// Worker cap for initialization-only runs.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 7.5,
            mode: ModeChoice::Auto,
            clustering: ClusteringMethod::KMeans,
            optimize: true,
            schedule: Schedule::default(),
            scale_estimator: ScaleEstimator::StdDev,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub index: usize,
    pub plan: CompressionPlan,
    /// Row permutation applied before compression (`sigma[old] = new`).
    pub permutation: Option<Vec<usize>>,
    pub init_weight_mse: f64,
    pub final_weight_mse: f64,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    pub final_loss: Option<LossParts>,
}

#[derive(Debug, Clone)]
pub struct CompressionOutput {
    pub compressed: CompressedModel,
    pub footprint: FootprintReport,
    pub layers: Vec<LayerRecord>,
    /// The original model with the same permutations applied; computes the
    /// same function and lines up row for row with the compressed layers.
    pub reference: ModelContainer,
}

/// Features handed to a layer's optimizer: `x` from the original prefix and
/// `x_tilde` from the compressed prefix.
pub struct LayerFeatures<'a> {
    pub layer: usize,
    pub x: &'a Matrix,
    pub x_tilde: &'a Matrix,
}

pub fn compress_model(model: &ModelContainer, calib: Option<&CalibrationSet>, cfg: &RunConfig) -> Result<CompressionOutput> {
    compress_model_observed(model, calib, cfg, |_| {})
}

/// [`compress_model`] with a callback that sees the features of every
/// optimized layer.
pub fn compress_model_observed(
    model: &ModelContainer,
    calib: Option<&CalibrationSet>,
    cfg: &RunConfig,
    mut observe: impl FnMut(&LayerFeatures<'_>),
) -> Result<CompressionOutput> {
    validate_alpha(cfg.alpha)?;
    cfg.schedule.validate()?;
    model.validate()?;
    if let Some(c) = calib {
        c.check_against(model)?;
    }
    let mode = cfg.mode.resolve();
    let num_layers = model.num_layers();
    let seed = cfg.schedule.seed;

    let mut working = model.clone();
    let mut plans = Vec::with_capacity(num_layers);
    let mut permutations = Vec::with_capacity(num_layers);
    let mut layers_out: Vec<(CompressedLayer, LayerRecord)> = Vec::with_capacity(num_layers);

    if cfg.optimize {
        let calib = calib.ok_or_else(|| Error::InvalidArgument("optimization needs calibration data".into()))?;
        let mut x = calib.inputs.clone();
        let mut x_tilde = calib.inputs.clone();
        for l in 0..num_layers {
            let mut run = || -> Result<(CompressedLayer, LayerRecord, Matrix)> {
                let (plan, permutation) = plan_and_reorder(&mut working, l, cfg, mode)?;
                let layer = &working.layers[l];
                let (cbs, map) = init_layer(&layer.weights, &plan, cfg.clustering, derive_seed(seed, 2 * l as u64 + 1), cfg.scale_estimator)?;
                let init_weight_mse = reconstruct(&cbs, &map)?.mse(&layer.weights);
                observe(&LayerFeatures {
                    layer: l,
                    x: &x,
                    x_tilde: &x_tilde,
                });
                let soft = SoftMapping::from_hard(&map, plan.codebook_size, cfg.schedule.logit_margin);
                let sched = Schedule {
                    seed: derive_seed(seed, 2 * l as u64 + 2),
                    ..cfg.schedule
                };
                let outcome = optimize_layer(layer, cbs, soft, &x_tilde, &x, &sched)?;
                let (cbs, map) = finalize(&outcome.codebooks, &outcome.mapping)?;
                let packed = CompressedLayer::from_parts(&cbs, &map, layer)?;
                let final_weight_mse = reconstruct(&cbs, &map)?.mse(&layer.weights);
                let next_x_tilde = packed.forward(&x_tilde)?;
                let final_loss = outcome.trace.last().map(|t| LossParts {
                    total: t.total,
                    recon: t.recon,
                    l1: t.l1,
                    l2: t.l2,
                });
                let record = LayerRecord {
                    index: l,
                    plan,
                    permutation,
                    init_weight_mse,
                    final_weight_mse,
                    trace: outcome.trace,
                    final_loss,
                };
                Ok((packed, record, next_x_tilde))
            };
            let (packed, record, next) = run().map_err(|e| e.at_layer(l))?;
            x = working.layers[l].forward(&x)?;
            x_tilde = next;
            layers_out.push((packed, record));
        }
    } else {
        for l in 0..num_layers {
            let (plan, permutation) = plan_and_reorder(&mut working, l, cfg, mode).map_err(|e| e.at_layer(l))?;
            plans.push(plan);
            permutations.push(permutation);
        }
        let work = || -> Result<Vec<(CompressedLayer, LayerRecord)>> {
            (0..num_layers)
                .into_par_iter()
                .map(|l| {
                    let layer = &working.layers[l];
                    let plan = plans[l];
                    init_only_layer(layer, &plan, cfg, derive_seed(seed, 2 * l as u64 + 1))
                        .map(|(packed, init_mse)| {
                            let record = LayerRecord {
                                index: l,
                                plan,
                                permutation: permutations[l].clone(),
                                init_weight_mse: init_mse.0,
                                final_weight_mse: init_mse.1,
                                trace: Vec::new(),
                                final_loss: None,
                            };
                            (packed, record)
                        })
                        .map_err(|e| e.at_layer(l))
                })
                .collect()
        };
        layers_out = match cfg.threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
                .install(work)?,
            None => work()?,
        };
    }

    let (layers, records): (Vec<_>, Vec<_>) = layers_out.into_iter().unzip();
    let compressed = CompressedModel { layers };
    let footprint = measure_footprint(&compressed, model)?;
    Ok(CompressionOutput {
        compressed,
        footprint,
        layers: records,
        reference: working,
    })
}

fn plan_and_reorder(
    working: &mut ModelContainer,
    l: usize,
    cfg: &RunConfig,
    mode: Mode,
) -> Result<(CompressionPlan, Option<Vec<usize>>)> {
    let layer = &working.layers[l];
    let plan = derive_plan(layer.n_o(), layer.n_i(), cfg.alpha, mode)?;
    if l + 1 == working.num_layers() {
        return Ok((plan, None));
    }
    let r = reorder(&layer.weights, plan.num_groups(), cfg.clustering, derive_seed(cfg.schedule.seed, 2 * l as u64))?;
    *working = working.apply_permutation(l, &r.sigma)?;
    Ok((plan, Some(r.sigma)))
}

fn init_only_layer(
    layer: &crate::model::LinearLayer,
    plan: &CompressionPlan,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(CompressedLayer, (f64, f64))> {
    let (cbs, map): (CodebookSet, HardMapping) = init_layer(&layer.weights, plan, cfg.clustering, seed, cfg.scale_estimator)?;
    let init_mse = reconstruct(&cbs, &map)?.mse(&layer.weights);
    let (cbs, map) = harden(&cbs, &map);
    let final_mse = reconstruct(&cbs, &map)?.mse(&layer.weights);
    Ok((CompressedLayer::from_parts(&cbs, &map, layer)?, (init_mse, final_mse)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub layer_weight_mse: Vec<f64>,
    pub output_mse: f64,
    pub max_abs_deviation: f64,
    /// Share of inputs whose largest output lands on the same unit; only for
    /// models with at least two outputs.
    pub top1_agreement: Option<f64>,
}

/// Compare two models of identical shape on `inputs`.
pub fn evaluate(original: &ModelContainer, compressed: &ModelContainer, inputs: &Matrix) -> Result<Metrics> {
    if original.num_layers() != compressed.num_layers()
        || original
            .layers
            .iter()
            .zip(&compressed.layers)
            .any(|(a, b)| a.n_o() != b.n_o() || a.n_i() != b.n_i())
    {
        return Err(Error::DimensionMismatch("models have different shapes".into()));
    }
    let layer_weight_mse = original
        .layers
        .iter()
        .zip(&compressed.layers)
        .map(|(a, b)| a.weights.mse(&b.weights))
        .collect();
    let ya = original.predict(inputs)?;
    let yb = compressed.predict(inputs)?;
    let top1_agreement = (ya.cols() >= 2).then(|| {
        let argmax = |m: &Matrix, r: usize| {
            let row = m.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        };
        (0..ya.rows()).filter(|&r| argmax(&ya, r) == argmax(&yb, r)).count() as f64 / ya.rows() as f64
    });
    Ok(Metrics {
        layer_weight_mse,
        output_mse: ya.mse(&yb),
        max_abs_deviation: ya.max_abs_diff(&yb),
        top1_agreement,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport<'a> {
    pub config: &'a RunConfig,
    pub layers: &'a [LayerRecord],
    pub footprint: &'a FootprintReport,
    pub metrics: Option<Metrics>,
}

impl CompressionOutput {
    pub fn report<'a>(&'a self, cfg: &'a RunConfig, inputs: Option<&Matrix>) -> Result<RunReport<'a>> {
        let metrics = match inputs {
            Some(x) => Some(evaluate(&self.reference, &self.compressed.to_model(&self.reference.name)?, x)?),
            None => None,
        };
        Ok(RunReport {
            config: cfg,
            layers: &self.layers,
            footprint: &self.footprint,
            metrics,
        })
    }
}
