//! Full-batch training: static per-view graphs, a per-epoch forward/backward
//! pass, adaptive-moment updates, scheduled refresh of the view-common graph,
//! and the ablation / sweep drivers built on top.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{gather_rows, MultiViewDataset, ObservedPartition};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MeanScores, MetricsRecord};
use crate::graph::{
    adaptive_knn_graph, fuse_graphs, gcn_normalize, lift_graph, mean_fuse_graphs, CsrSym,
    FusedGraph, NeighborGraph,
};
use crate::losses::{reconstruction_loss_grad, ContrastiveKind, LossConfig};
use crate::network::{
    backward_model, forward_model, ForwardPass, FusionRule, ModelDims, ModelState,
};
use crate::scalar::Scalar;

/// Training variant: the full model or one of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Replace masked feature fusion with a zero-filled mean over all views.
    WoMff,
    /// Replace masked graph fusion with a plain mean of all graphs.
    WoMgf,
    /// Drop the contrastive term.
    WoWcl,
    /// Drop the reconstruction term.
    WoRec,
    /// Standard contrastive loss on thresholded affinities.
    WCl,
    /// Decoupled contrastive loss on thresholded affinities.
    WDcl,
}

/// All seven variants, in the order ablation tables report them.
pub const ALL_VARIANTS: [Variant; 7] = [
    Variant::Full,
    Variant::WoMff,
    Variant::WoMgf,
    Variant::WoWcl,
    Variant::WoRec,
    Variant::WCl,
    Variant::WDcl,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoMff => "wo_mff",
            Variant::WoMgf => "wo_mgf",
            Variant::WoWcl => "wo_wcl",
            Variant::WoRec => "wo_rec",
            Variant::WCl => "w_cl",
            Variant::WDcl => "w_dcl",
        }
    }

    fn contrastive(self) -> ContrastiveKind {
        match self {
            Variant::WoWcl => ContrastiveKind::None,
            Variant::WCl => ContrastiveKind::Cl,
            Variant::WDcl => ContrastiveKind::Dcl,
            _ => ContrastiveKind::Wcl,
        }
    }

    fn uses_reconstruction(self) -> bool {
        self != Variant::WoRec
    }

    fn fusion_rule(self) -> FusionRule {
        if self == Variant::WoMff {
            FusionRule::UnmaskedZeroFill
        } else {
            FusionRule::Masked
        }
    }

    fn masked_graph_fusion(self) -> bool {
        self != Variant::WoMgf
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown variant '{s}'")))
    }
}

/// Which representation feeds k-means at evaluation time.
///
/// The orthonormal indicator is the default: under partial observation the
/// fused representation picks up additive offsets that depend on each
/// sample's observation pattern, which k-means latches onto, while the
/// trained indicator separates the clusters cleanly. On complete data the
/// two behave the same; `f` stays available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterOn {
    /// The fused view-common representation.
    F,
    /// The orthonormal cluster indicator (default).
    #[default]
    Y,
}

/// Training hyperparameters. Defaults follow the reference recipe: encoders
/// D-196-128-64, learning rate 1e-3, 1500 epochs, temperature 1, 15
/// neighbors, per-epoch graph refresh.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub k: usize,
    pub seed: u64,
    pub graph_refresh_period: usize,
    pub variant: Variant,
    pub use_bias: bool,
    /// Include self pairs in the contrastive sums instead of excluding them.
    pub contrastive_self_pairs: bool,
    pub hidden_dims: Vec<usize>,
    /// Evaluate clustering metrics every this many epochs (0 = never).
    pub eval_period: usize,
    pub eval_seeds: usize,
    pub kmeans_restarts: usize,
    pub cluster_on: ClusterOn,
    /// Write a checkpoint every this many epochs (0 = only the final model).
    pub checkpoint_period: usize,
    /// Directory receiving periodic checkpoints.
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            lr: 1e-3,
            lambda: 1.0,
            tau: 1.0,
            epsilon: 1e-12,
            k: 15,
            seed: 0,
            graph_refresh_period: 1,
            variant: Variant::Full,
            use_bias: true,
            contrastive_self_pairs: false,
            hidden_dims: vec![196, 128, 64],
            eval_period: 0,
            eval_seeds: 5,
            kmeans_restarts: 10,
            cluster_on: ClusterOn::Y,
            checkpoint_period: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParam(
                "neighbor count k must be at least 1".into(),
            ));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::InvalidParam(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.graph_refresh_period == 0 {
            return Err(Error::InvalidParam(
                "graph refresh period must be at least 1".into(),
            ));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidParam("hidden_dims must not be empty".into()));
        }
        if self.eval_seeds == 0 || self.kmeans_restarts == 0 {
            return Err(Error::InvalidParam(
                "eval_seeds and kmeans_restarts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn eval_seed_list(&self) -> Vec<u64> {
        (0..self.eval_seeds)
            .map(|i| self.seed.wrapping_add(i as u64))
            .collect()
    }

    /// The loss hyperparameters implied by this configuration.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            tau: self.tau,
            epsilon: self.epsilon,
            variant: self.variant.contrastive(),
            include_self_pairs: self.contrastive_self_pairs,
        }
    }
}

/// One line of the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub contrastive: f64,
    pub metrics: Option<MeanScores>,
}

/// Per-epoch loss (and optional metric) trace of one run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,total,rec,contrastive,acc,nmi,ari,fscore";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            match &r.metrics {
                Some(m) => out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.epoch, r.total, r.rec, r.contrastive, m.acc, m.nmi, m.ari, m.fscore
                )),
                None => out.push_str(&format!(
                    "{},{},{},{},,,,\n",
                    r.epoch, r.total, r.rec, r.contrastive
                )),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn is_finite(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.total.is_finite() && r.rec.is_finite() && r.contrastive.is_finite())
    }
}

/// Static per-view graphs, built once from observed feature rows and never
/// updated during training.
pub struct StaticGraphs<T> {
    pub neighbor: Vec<NeighborGraph<T>>,
    /// GCN-normalized adjacency per view, sparse.
    pub norms: Vec<CsrSym<T>>,
    /// Per-view graphs scattered to global index space.
    pub lifted: Vec<Array2<T>>,
}

/// Build each view's neighbor graph from its observed rows, normalize it for
/// the encoders, and lift it to global indices for graph fusion.
pub fn prepare_static_graphs<T: Scalar>(
    z_views: &[Array2<T>],
    part: &ObservedPartition,
    n: usize,
    k: usize,
) -> Result<StaticGraphs<T>> {
    let mut neighbor = Vec::with_capacity(z_views.len());
    let mut norms = Vec::with_capacity(z_views.len());
    let mut lifted = Vec::with_capacity(z_views.len());
    for (v, z) in z_views.iter().enumerate() {
        if z.nrows() < k + 2 {
            return Err(Error::InvalidParam(format!(
                "view {v} has only {} observed samples; needs at least k + 2 = {}",
                z.nrows(),
                k + 2
            )));
        }
        let g = adaptive_knn_graph(z, k)?;
        norms.push(CsrSym::from_dense(&gcn_normalize(&g.weights)));
        lifted.push(lift_graph(&g, part.observed(v), n)?);
        neighbor.push(g);
    }
    Ok(StaticGraphs {
        neighbor,
        norms,
        lifted,
    })
}

/// Rebuild the view-common graph from the current representation and fuse it
/// with the static lifted graphs. The result is treated as a constant by the
/// backward pass; no gradient flows through graph construction.
pub fn refresh_common_graph<T: Scalar>(
    f: &Array2<T>,
    k: usize,
    lifted: &[Array2<T>],
    mask: &Array2<u8>,
    masked_fusion: bool,
) -> Result<FusedGraph<T>> {
    let s = adaptive_knn_graph(f, k)?;
    if masked_fusion {
        fuse_graphs(lifted, mask, &s.weights)
    } else {
        mean_fuse_graphs(lifted, &s.weights)
    }
}

/// Preprocessed inputs for one dataset: scaled observed rows, the partition,
/// and the static graphs. Shared by training, evaluation and the gradient
/// checks.
pub struct Pipeline<T> {
    pub z_views: Vec<Array2<T>>,
    pub part: ObservedPartition,
    pub mask: Array2<u8>,
    pub graphs: StaticGraphs<T>,
    pub n: usize,
    pub n_clusters: usize,
    pub view_dims: Vec<usize>,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(ds: &MultiViewDataset<T>, k: usize) -> Result<Self> {
        let n_clusters = ds.n_clusters().ok_or(Error::MissingClusterCount)?;
        let scaled = ds.scaled()?;
        let part = ObservedPartition::from_mask(scaled.mask());
        let z_views: Vec<Array2<T>> = (0..scaled.n_views())
            .map(|v| gather_rows(scaled.view(v), part.observed(v)))
            .collect();
        let n = scaled.n_samples();
        let graphs = prepare_static_graphs(&z_views, &part, n, k)?;
        Ok(Pipeline {
            z_views,
            part,
            mask: scaled.mask().clone(),
            graphs,
            n,
            n_clusters,
            view_dims: scaled.view_dims(),
        })
    }

    pub fn model_dims(&self, hidden: &[usize]) -> ModelDims {
        ModelDims {
            view_dims: self.view_dims.clone(),
            hidden: hidden.to_vec(),
            n_clusters: self.n_clusters,
        }
    }

    pub fn forward(
        &self,
        model: &ModelState<T>,
        fusion: FusionRule,
        with_projection: bool,
    ) -> Result<ForwardPass<T>> {
        forward_model(
            model,
            &self.z_views,
            &self.graphs.norms,
            &self.part,
            &self.mask,
            fusion,
            with_projection,
        )
    }

    pub fn backward(
        &self,
        model: &ModelState<T>,
        pass: &ForwardPass<T>,
        d_recons: Option<&[Array2<T>]>,
        d_y: Option<&Array2<T>>,
    ) -> Result<ModelState<T>> {
        backward_model(
            model,
            pass,
            &self.graphs.norms,
            &self.part,
            &self.mask,
            d_recons,
            d_y,
        )
    }

    /// Fraction of masked-out cells, for reporting.
    pub fn missing_rate(&self) -> f64 {
        let zeros = self.mask.iter().filter(|&&m| m == 0).count();
        zeros as f64 / (self.mask.len() as f64)
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
    lr: T,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: T::of(lr),
        }
    }

    fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let b1 = T::of(Self::BETA1);
        let b2 = T::of(Self::BETA2);
        let eps = T::of(Self::EPS);
        let bc1 = T::one() - T::of(Self::BETA1.powi(self.t as i32));
        let bc2 = T::one() - T::of(Self::BETA2.powi(self.t as i32));
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Result of one training run.
pub struct TrainOutput<T> {
    pub model: ModelState<T>,
    pub history: TrainHistory,
    /// Final view-common representation.
    pub embedding: Array2<T>,
    /// Final cluster indicator; absent when the projection is degenerate and
    /// not needed for evaluation.
    pub indicator: Option<Array2<T>>,
}

/// Train one model on one dataset. Fully deterministic for a fixed config.
pub fn train<T: Scalar>(ds: &MultiViewDataset<T>, cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let pipeline = Pipeline::new(ds, cfg.k)?;
    let mut model: ModelState<T> = ModelState::init(
        &pipeline.model_dims(&cfg.hidden_dims),
        cfg.seed,
        cfg.use_bias,
    );
    run_epochs(ds, cfg, &pipeline, &mut model)
}

fn run_epochs<T: Scalar>(
    ds: &MultiViewDataset<T>,
    cfg: &TrainConfig,
    pipeline: &Pipeline<T>,
    model: &mut ModelState<T>,
) -> Result<TrainOutput<T>> {
    let variant = cfg.variant;
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;
    let needs_y = loss_cfg.variant != ContrastiveKind::None;
    let fusion = variant.fusion_rule();
    let lambda = T::of(cfg.lambda);

    let mut opt = Adam::new(model.flat_len(), cfg.lr);
    let mut params = model.flatten();
    let mut fused: Option<FusedGraph<T>> = None;
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let pass = pipeline.forward(model, fusion, needs_y)?;

        if needs_y && (fused.is_none() || epoch % cfg.graph_refresh_period == 0) {
            fused = Some(refresh_common_graph(
                &pass.f,
                cfg.k,
                &pipeline.graphs.lifted,
                &pipeline.mask,
                variant.masked_graph_fusion(),
            )?);
        }

        // Reconstruction term (reported even when not optimized).
        let (rec_val, rec_grads) =
            reconstruction_loss_grad(&pipeline.z_views, &pass.recons, pipeline.n)?;

        // Contrastive term, with the fused graph held constant.
        let (zeta, d_y) = if needs_y {
            let y = pass.y.as_ref().expect("projection requested");
            let graph = &fused.as_ref().expect("fused graph ready").weights;
            let (z, mut d) = loss_cfg.contrastive_grad(y, graph)?;
            d.mapv_inplace(|g| g * lambda);
            (z, Some(d))
        } else {
            (T::zero(), None)
        };

        let rec_term = if variant.uses_reconstruction() {
            rec_val
        } else {
            T::zero()
        };
        let total = loss_cfg
            .total(rec_term, zeta)
            .map_err(|_| Error::NonFinite(format!("loss diverged at epoch {epoch}")))?;

        let grads = pipeline.backward(
            model,
            &pass,
            variant
                .uses_reconstruction()
                .then_some(rec_grads.as_slice()),
            d_y.as_ref(),
        )?;
        let flat_grads = grads.flatten();
        if flat_grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradients diverged at epoch {epoch}"
            )));
        }
        opt.step(&mut params, &flat_grads);
        model.assign_from_flat(&params);
        if !model.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged at epoch {epoch}"
            )));
        }
        model.epoch = epoch + 1;

        if cfg.checkpoint_period > 0 && (epoch + 1) % cfg.checkpoint_period == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                model.save(&dir.join(format!("checkpoint_{:05}.bin", epoch + 1)))?;
            }
        }

        let metrics =
            if cfg.eval_period > 0 && (epoch + 1) % cfg.eval_period == 0 && ds.labels().is_some() {
                let pass_eval =
                    pipeline.forward(model, fusion, matches!(cfg.cluster_on, ClusterOn::Y))?;
                let rep = match cfg.cluster_on {
                    ClusterOn::F => pass_eval.f,
                    ClusterOn::Y => pass_eval.y.expect("indicator requested"),
                };
                Some(evaluate(
                    &rep,
                    ds.labels(),
                    pipeline.n_clusters,
                    &cfg.eval_seed_list(),
                    cfg.kmeans_restarts,
                )?)
            } else {
                None
            };

        history.records.push(EpochRecord {
            epoch,
            total: total.to_f64_lossy(),
            rec: rec_val.to_f64_lossy(),
            contrastive: zeta.to_f64_lossy(),
            metrics,
        });
    }

    // Final representation; the indicator is optional because a variant that
    // never trained the projection may legitimately be degenerate.
    let final_pass = pipeline.forward(model, fusion, true);
    let (embedding, indicator) = match final_pass {
        Ok(pass) => (pass.f, pass.y),
        Err(Error::DegenerateProjection { .. }) if matches!(cfg.cluster_on, ClusterOn::F) => {
            let pass = pipeline.forward(model, fusion, false)?;
            (pass.f, None)
        }
        Err(e) => return Err(e),
    };
    Ok(TrainOutput {
        model: model.clone(),
        history,
        embedding,
        indicator,
    })
}

/// Train and evaluate one configuration, returning the scores as a record.
pub fn train_and_evaluate<T: Scalar>(
    ds: &MultiViewDataset<T>,
    cfg: &TrainConfig,
) -> Result<(TrainOutput<T>, MetricsRecord)> {
    let out = train(ds, cfg)?;
    let record = evaluate_output(ds, cfg, &out)?;
    Ok((out, record))
}

/// Score a finished run on the configured representation.
pub fn evaluate_output<T: Scalar>(
    ds: &MultiViewDataset<T>,
    cfg: &TrainConfig,
    out: &TrainOutput<T>,
) -> Result<MetricsRecord> {
    let rep = match cfg.cluster_on {
        ClusterOn::F => &out.embedding,
        ClusterOn::Y => out
            .indicator
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("no indicator available to cluster on".into()))?,
    };
    let c = ds.n_clusters().ok_or(Error::MissingClusterCount)?;
    let scores = evaluate(
        rep,
        ds.labels(),
        c,
        &cfg.eval_seed_list(),
        cfg.kmeans_restarts,
    )?;
    let zeros = ds.mask().iter().filter(|&&m| m == 0).count();
    Ok(MetricsRecord {
        variant: cfg.variant.name().to_string(),
        eta: zeros as f64 / ds.mask().len() as f64,
        lambda: cfg.lambda,
        seed: cfg.seed,
        epoch: out.model.epoch,
        acc: scores.acc,
        nmi: scores.nmi,
        ari: scores.ari,
        fscore: scores.fscore,
    })
}

/// Run all seven variants with a shared base configuration.
pub fn run_ablation<T: Scalar>(
    ds: &MultiViewDataset<T>,
    base: &TrainConfig,
) -> Result<Vec<(Variant, MetricsRecord, TrainHistory)>> {
    let mut rows = Vec::with_capacity(ALL_VARIANTS.len());
    for variant in ALL_VARIANTS {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let (out, record) = train_and_evaluate(ds, &cfg)?;
        rows.push((variant, record, out.history));
    }
    Ok(rows)
}

/// Sweep result: one record per (lambda, seed) cell plus per-lambda means.
pub struct SweepResult {
    pub cells: Vec<MetricsRecord>,
    pub means: Vec<(f64, MeanScores)>,
}

/// Cross product of the lambda grid and the seed list.
pub fn run_sweep<T: Scalar>(
    ds: &MultiViewDataset<T>,
    base: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    let mut cells = Vec::with_capacity(lambdas.len() * seeds.len());
    let mut means = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut acc = MeanScores {
            acc: 0.0,
            nmi: 0.0,
            ari: 0.0,
            fscore: 0.0,
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.lambda = lambda;
            cfg.seed = seed;
            let (_, record) = train_and_evaluate(ds, &cfg)?;
            acc.acc += record.acc;
            acc.nmi += record.nmi;
            acc.ari += record.ari;
            acc.fscore += record.fscore;
            cells.push(record);
        }
        let k = seeds.len() as f64;
        means.push((
            lambda,
            MeanScores {
                acc: acc.acc / k,
                nmi: acc.nmi / k,
                ari: acc.ari / k,
                fscore: acc.fscore / k,
            },
        ));
    }
    Ok(SweepResult { cells, means })
}

/// The default lambda grid: seven powers of ten from 1e-3 to 1e3.
pub const LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
