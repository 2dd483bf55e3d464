//! The CCP outer loop: repeated regularized proxy-based projections.
//!
//! Each projection `k`
//! 1. samples a pool of `b` train samples per class and embeds it,
//! 2. picks `P` anchors per class by greedy k-Center seeded with the previous
//!    projection's proxies,
//! 3. initializes proxies as the current embeddings of those anchors,
//! 4. snapshots `θ^(k−1)` and minimizes
//!    `λ/2·‖θ − θ^(k−1)‖² + mean proxy-anchored loss` with Adam until the
//!    validation MAP@R stops improving for `inner_patience` evaluations,
//! 5. restores the best parameters seen within the projection.
//!
//! The loop stops after `global_patience` evaluations without a new global
//! best, after `max_projections` projections, or when the step budget is
//! spent, and returns the globally best parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, MPerClassSampler, SamplerConfig};
use crate::kcenter::{self, ClassPool};
use crate::losses::{self, LossSpec, PairBatch};
use crate::metrics::{self, RetrievalReport};
use crate::net::{norm_clip_in_place, AdamConfig, AdamState, EmbeddingNetwork};
use crate::{seeds, Error, Result};

/// Where the loss anchors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Trainable proxies initialized from the selected samples.
    Proxies,
    /// The selected samples themselves, re-embedded by the current network
    /// at every step.
    Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcpConfig {
    pub layer_dims: Vec<usize>,
    pub loss: LossSpec,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub proxies_per_class: usize,
    pub pool_budget: usize,
    pub eval_every: usize,
    pub inner_patience: usize,
    pub global_patience: usize,
    pub max_projections: usize,
    /// Total optimizer steps over all projections.
    pub max_steps: usize,
    pub anchors: AnchorMode,
    pub batch_size: usize,
    pub samples_per_class: usize,
    /// `(α, β)` at which violation diagnostics are reported.
    pub constraint_alpha: f64,
    pub constraint_beta: f64,
    pub seed: u64,
}

impl Default for CcpConfig {
    fn default() -> Self {
        CcpConfig {
            layer_dims: vec![784, 256, 128, 2],
            loss: LossSpec::default(),
            adam: AdamConfig::default(),
            lambda: 2e-4,
            proxies_per_class: 4,
            pool_budget: 16,
            eval_every: 25,
            inner_patience: 3,
            global_patience: 60,
            max_projections: 100,
            max_steps: 20_000,
            anchors: AnchorMode::Proxies,
            batch_size: 32,
            samples_per_class: 4,
            constraint_alpha: 0.1,
            constraint_beta: 0.5,
            seed: 0,
        }
    }
}

impl CcpConfig {
    /// Single plain proxy-based run: one proxy per class drawn at random,
    /// no projection regularizer and a single projection that only stops on
    /// the global patience.
    pub fn baseline(mut self) -> Self {
        self.proxies_per_class = 1;
        self.pool_budget = 1;
        self.max_projections = 1;
        self.lambda = 0.0;
        self.inner_patience = self.global_patience;
        self.anchors = AnchorMode::Proxies;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.loss.validate()?;
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad("network dims need >= 2 positive widths".into());
        }
        if self.proxies_per_class < 1 || self.pool_budget < self.proxies_per_class {
            return bad(format!(
                "need pool_budget >= proxies_per_class >= 1 (got b = {}, P = {})",
                self.pool_budget, self.proxies_per_class
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return bad("optimizer rates must be positive".into());
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.eval_every == 0 || self.inner_patience == 0 || self.global_patience == 0 {
            return bad("eval_every and patience limits must be positive".into());
        }
        if self.max_projections == 0 || self.max_steps == 0 {
            return bad("max_projections and max_steps must be positive".into());
        }
        if self.samples_per_class == 0 || self.batch_size % self.samples_per_class != 0 {
            return bad("samples_per_class must divide batch_size".into());
        }
        if !(self.constraint_beta > 0.0) || self.constraint_alpha < 0.0 {
            return bad("constraint beta must be > 0 and alpha >= 0".into());
        }
        Ok(())
    }

    /// Checks that need the dataset: input width and class sizes.
    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        if self.layer_dims[0] != dataset.dim() {
            return Err(Error::Config(format!(
                "network input width {} does not match data dim {}",
                self.layer_dims[0],
                dataset.dim()
            )));
        }
        if dataset.val.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        for (class, members) in dataset.by_class(&dataset.train) {
            let need = self.pool_budget.max(self.samples_per_class);
            if members.len() < need {
                return Err(Error::ClassTooSmall {
                    class,
                    available: members.len(),
                    required: need,
                });
            }
        }
        if dataset.by_class(&dataset.train).len() != dataset.num_classes() {
            return Err(Error::Config("every class must be present in train".into()));
        }
        Ok(())
    }
}

/// `P` trainable proxies per class, grouped by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxySet {
    pub dim: usize,
    pub proxies: Vec<f64>,
    pub class_of: Vec<usize>,
    pub source_sample: Vec<usize>,
}

impl ProxySet {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn proxy(&self, i: usize) -> &[f64] {
        &self.proxies[i * self.dim..(i + 1) * self.dim]
    }

    /// Proxy vectors of each class, row-major.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for i in 0..self.len() {
            out.entry(self.class_of[i]).or_default().extend_from_slice(self.proxy(i));
        }
        out
    }

    pub fn clip(&mut self) {
        for row in self.proxies.chunks_mut(self.dim) {
            norm_clip_in_place(row);
        }
    }
}

/// Proxies equal to the current embeddings of the selected samples.
pub fn init_proxies(
    net: &EmbeddingNetwork,
    selected: &BTreeMap<usize, Vec<usize>>,
    dataset: &Dataset,
) -> Result<ProxySet> {
    let mut class_of = Vec::new();
    let mut source_sample = Vec::new();
    for (&class, ids) in selected {
        for &id in ids {
            if id >= dataset.len() {
                return Err(Error::InvalidArgument(format!("sample id {id} out of range")));
            }
            if dataset.labels()[id] != class {
                return Err(Error::InvalidArgument(format!(
                    "sample {id} has class {}, selected for class {class}",
                    dataset.labels()[id]
                )));
            }
            class_of.push(class);
            source_sample.push(id);
        }
    }
    let proxies = net.embed_batch(&dataset.gather(&source_sample))?;
    Ok(ProxySet {
        dim: net.output_dim(),
        proxies,
        class_of,
        source_sample,
    })
}

/// Anchors paired with the batch inside [`projection_objective`].
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveAnchors<'a> {
    Proxies(&'a ProxySet),
    /// Raw inputs and labels of anchor samples, embedded by the network.
    Samples { inputs: &'a [f64], labels: &'a [usize] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    /// `regularizer + loss`.
    pub value: f64,
    pub loss: f64,
    pub regularizer: f64,
    pub grad_net: Vec<f64>,
    /// Gradient for each proxy (empty in sample mode).
    pub grad_proxies: Vec<f64>,
    pub empty: bool,
}

/// `λ/2·‖θ − θ_prev‖² + mean anchored loss` and its gradients in `θ` and in
/// the proxies.
pub fn projection_objective(
    net: &EmbeddingNetwork,
    anchors: ObjectiveAnchors<'_>,
    batch_inputs: &[f64],
    batch_labels: &[usize],
    theta_prev: &[f64],
    lambda: f64,
    spec: &LossSpec,
) -> Result<ObjectiveOutput> {
    if theta_prev.len() != net.num_params() {
        return Err(Error::shape("parameter snapshot", net.num_params(), theta_prev.len()));
    }
    let dim = net.output_dim();
    let b = batch_labels.len();
    if batch_inputs.len() != b * net.input_dim() {
        return Err(Error::shape("batch inputs", b * net.input_dim(), batch_inputs.len()));
    }
    let (loss_out, mut grad_net) = match anchors {
        ObjectiveAnchors::Proxies(p) => {
            if p.dim != dim {
                return Err(Error::shape("proxy dim", dim, p.dim));
            }
            let (emb, cache) = net.forward_batch(batch_inputs)?;
            let batch = PairBatch::new(dim, &emb, batch_labels).with_anchors(&p.proxies, &p.class_of);
            let out = losses::batch_loss_and_grads(spec, &batch)?;
            // backward averages over the batch, the loss gradient already is a mean
            let upstream: Vec<f64> = out.grad_embeddings.iter().map(|g| g * b as f64).collect();
            let grad = net.backward_cached(&cache, &upstream)?;
            (out, grad)
        }
        ObjectiveAnchors::Samples { inputs, labels } => {
            let a = labels.len();
            let all: Vec<f64> = batch_inputs.iter().chain(inputs).copied().collect();
            let (emb, cache) = net.forward_batch(&all)?;
            let (batch_emb, anchor_emb) = emb.split_at(b * dim);
            let batch = PairBatch::new(dim, batch_emb, batch_labels).with_anchors(anchor_emb, labels);
            let out = losses::batch_loss_and_grads(spec, &batch)?;
            let scale = (b + a) as f64;
            let upstream: Vec<f64> = out
                .grad_embeddings
                .iter()
                .chain(&out.grad_anchors)
                .map(|g| g * scale)
                .collect();
            let grad = net.backward_cached(&cache, &upstream)?;
            (out, grad)
        }
    };
    let mut regularizer = 0.0;
    if lambda != 0.0 {
        for ((g, t), t0) in grad_net.iter_mut().zip(net.params()).zip(theta_prev) {
            let diff = t - t0;
            regularizer += diff * diff;
            *g += lambda * diff;
        }
        regularizer *= 0.5 * lambda;
    }
    let grad_proxies = match anchors {
        ObjectiveAnchors::Proxies(_) => loss_out.grad_anchors,
        ObjectiveAnchors::Samples { .. } => Vec::new(),
    };
    Ok(ObjectiveOutput {
        value: regularizer + loss_out.loss,
        loss: loss_out.loss,
        regularizer,
        grad_net,
        grad_proxies,
        empty: loss_out.empty,
    })
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// `eval` for periodic validation, `projection` for end-of-projection.
    pub kind: String,
    pub step: usize,
    pub projection: usize,
    /// Mean training objective since the previous eval row (eval rows) or
    /// over the whole projection (projection rows).
    pub train_loss: f64,
    pub val_p_at_1: f64,
    pub val_p_at_r: f64,
    pub val_map_at_r: f64,
    pub violation_rate: f64,
    pub avg_covering_radius: f64,
    pub min_proxy_distance: Option<f64>,
}

/// Per-projection diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub projection: usize,
    pub steps: usize,
    pub converged: bool,
    /// Validation report of the parameters kept at the end of the projection.
    pub val: RetrievalReport,
    /// `‖θ^(k) − θ^(k−1)‖`.
    pub displacement: f64,
    pub anchor_samples: Vec<usize>,
    /// Nearest train sample (by embedding) to each converged proxy.
    pub nearest_samples: Vec<usize>,
}

/// Mutable state of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpState {
    pub theta_prev: Vec<f64>,
    pub projection_index: usize,
    pub inner_bad_evals: usize,
    pub global_bad_evals: usize,
    /// Best validation MAP@R so far, `None` before the first evaluation.
    pub best_val_map_at_r: Option<f64>,
    pub best_checkpoint: Option<Vec<f64>>,
    pub lambda: f64,
    pub steps: usize,
}

/// Why a projection returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    InnerPatience,
    GlobalPatience,
    StepBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOutcome {
    pub steps: usize,
    pub stop: StopReason,
    /// Best validation MAP@R inside the projection (restored on return).
    pub best_val_map_at_r: Option<f64>,
}

impl ProjectionOutcome {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::InnerPatience
    }
}

/// Network, optimizer, sampler and bookkeeping for one training run.
pub struct Trainer<'a> {
    pub config: CcpConfig,
    pub dataset: &'a Dataset,
    pub net: EmbeddingNetwork,
    pub state: CcpState,
    pub trace: Vec<TraceRow>,
    net_opt: AdamState,
    sampler: MPerClassSampler,
    pool_rng: rand_chacha::ChaCha8Rng,
    val_inputs: Vec<f64>,
    val_labels: Vec<usize>,
    loss_acc: (f64, usize),
    projection_acc: (f64, usize),
}

/// Anchors as held by the trainer during a projection.
#[derive(Debug, Clone)]
pub enum ActiveAnchors {
    Proxies(ProxySet),
    Samples { ids: Vec<usize>, labels: Vec<usize> },
}

impl ActiveAnchors {
    fn min_same_class_distance(&self, net: &EmbeddingNetwork, dataset: &Dataset) -> Result<Option<f64>> {
        Ok(match self {
            ActiveAnchors::Proxies(p) => metrics::min_same_class_distance(&p.proxies, &p.class_of, p.dim),
            ActiveAnchors::Samples { ids, labels } => {
                let emb = net.embed_batch(&dataset.gather(ids))?;
                metrics::min_same_class_distance(&emb, labels, net.output_dim())
            }
        })
    }

    /// Current anchor vectors of each class.
    fn vectors_by_class(&self, net: &EmbeddingNetwork, dataset: &Dataset) -> Result<BTreeMap<usize, Vec<f64>>> {
        match self {
            ActiveAnchors::Proxies(p) => Ok(p.by_class()),
            ActiveAnchors::Samples { ids, labels } => {
                let emb = net.embed_batch(&dataset.gather(ids))?;
                let d = net.output_dim();
                let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (i, &l) in labels.iter().enumerate() {
                    out.entry(l).or_default().extend_from_slice(&emb[i * d..(i + 1) * d]);
                }
                Ok(out)
            }
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: CcpConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate_for(dataset)?;
        let mut init_rng = seeds::stream(config.seed, seeds::INIT);
        let net = EmbeddingNetwork::init(&config.layer_dims, &mut init_rng)?;
        let sampler = MPerClassSampler::new(
            dataset,
            SamplerConfig {
                batch_size: config.batch_size,
                samples_per_class: config.samples_per_class,
                seed: config.seed,
            },
        )?;
        let net_opt = AdamState::new(net.num_params(), config.adam);
        let state = CcpState {
            theta_prev: net.params().to_vec(),
            projection_index: 0,
            inner_bad_evals: 0,
            global_bad_evals: 0,
            best_val_map_at_r: None,
            best_checkpoint: None,
            lambda: config.lambda,
            steps: 0,
        };
        Ok(Trainer {
            val_inputs: dataset.gather(&dataset.val),
            val_labels: dataset.gather_labels(&dataset.val),
            pool_rng: seeds::stream(config.seed, seeds::POOL),
            config,
            dataset,
            net,
            state,
            trace: Vec::new(),
            net_opt,
            sampler,
            loss_acc: (0.0, 0),
            projection_acc: (0.0, 0),
        })
    }

    /// Per-class pool of `b` random train samples, embedded by the current
    /// network.
    pub fn sample_pools(&mut self) -> Result<BTreeMap<usize, ClassPool>> {
        let ids = data::sample_per_class(
            self.dataset,
            &self.dataset.train,
            self.config.pool_budget,
            &mut self.pool_rng,
        )?;
        let mut pools = BTreeMap::new();
        for (class, sample_ids) in ids {
            let embeddings = self.net.embed_batch(&self.dataset.gather(&sample_ids))?;
            pools.insert(
                class,
                ClassPool {
                    dim: self.net.output_dim(),
                    embeddings,
                    sample_ids,
                },
            );
        }
        Ok(pools)
    }

    /// Validation report of the current network.
    pub fn validate(&self) -> Result<RetrievalReport> {
        let d = self.net.output_dim();
        let emb = self.net.embed_batch(&self.val_inputs)?;
        let mut report = metrics::evaluate(&emb, &self.val_labels, d)?;
        report.per_query = None;
        report.violation = Some(metrics::violation_stats(
            &emb,
            &self.val_labels,
            d,
            self.config.constraint_alpha,
            self.config.constraint_beta,
        )?);
        report.avg_covering_radius =
            Some(metrics::class_average_covering_radius(&emb, &self.val_labels, d)?);
        Ok(report)
    }

    fn push_row(&mut self, kind: &str, report: &RetrievalReport, min_proxy: Option<f64>) {
        let acc = if kind == "projection" { &mut self.projection_acc } else { &mut self.loss_acc };
        let (sum, n) = std::mem::take(acc);
        self.trace.push(TraceRow {
            kind: kind.to_string(),
            step: self.state.steps,
            projection: self.state.projection_index,
            train_loss: if n == 0 { 0.0 } else { sum / n as f64 },
            val_p_at_1: report.p_at_1,
            val_p_at_r: report.p_at_r,
            val_map_at_r: report.map_at_r,
            violation_rate: report.violation.map_or(0.0, |v| v.violation_rate),
            avg_covering_radius: report.avg_covering_radius.unwrap_or(0.0),
            min_proxy_distance: min_proxy,
        });
    }

    /// One optimizer step on a fresh batch.
    fn train_step(&mut self, anchors: &mut ActiveAnchors, proxy_opt: &mut Option<AdamState>) -> Result<f64> {
        let batch = self.sampler.next_batch();
        let inputs = self.dataset.gather(&batch);
        let labels = self.dataset.gather_labels(&batch);
        let anchor_inputs;
        let objective_anchors = match anchors {
            ActiveAnchors::Proxies(p) => ObjectiveAnchors::Proxies(p),
            ActiveAnchors::Samples { ids, labels } => {
                anchor_inputs = self.dataset.gather(ids);
                ObjectiveAnchors::Samples {
                    inputs: &anchor_inputs,
                    labels,
                }
            }
        };
        let out = projection_objective(
            &self.net,
            objective_anchors,
            &inputs,
            &labels,
            &self.state.theta_prev,
            self.state.lambda,
            &self.config.loss,
        )?;
        if !out.value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective {} at step {} (projection {}, loss {}, regularizer {})",
                out.value, self.state.steps, self.state.projection_index, out.loss, out.regularizer
            )));
        }
        self.net_opt.step(self.net.params_mut(), &out.grad_net)?;
        if let (ActiveAnchors::Proxies(p), Some(opt)) = (anchors, proxy_opt.as_mut()) {
            opt.step(&mut p.proxies, &out.grad_proxies)?;
            p.clip();
        }
        self.state.steps += 1;
        for acc in [&mut self.loss_acc, &mut self.projection_acc] {
            acc.0 += out.value;
            acc.1 += 1;
        }
        Ok(out.value)
    }

    /// Optimize the current projection until inner patience, global patience
    /// or the step budget stops it, then restore the best parameters seen
    /// within the projection.
    pub fn run_projection(&mut self, anchors: &mut ActiveAnchors) -> Result<ProjectionOutcome> {
        let mut proxy_opt = match anchors {
            ActiveAnchors::Proxies(p) => Some(AdamState::new(
                p.proxies.len(),
                AdamConfig {
                    weight_decay: 0.0,
                    ..self.config.adam
                },
            )),
            ActiveAnchors::Samples { .. } => None,
        };
        self.state.inner_bad_evals = 0;
        let mut best: Option<(f64, Vec<f64>, Option<Vec<f64>>)> = None;
        let mut steps = 0;
        let stop = loop {
            if self.state.steps >= self.config.max_steps {
                break StopReason::StepBudget;
            }
            self.train_step(anchors, &mut proxy_opt)?;
            steps += 1;
            if steps % self.config.eval_every != 0 {
                continue;
            }
            let report = self.validate()?;
            let map = report.map_at_r;
            if best.as_ref().is_none_or(|(b, _, _)| map > *b) {
                let proxies = match anchors {
                    ActiveAnchors::Proxies(p) => Some(p.proxies.clone()),
                    ActiveAnchors::Samples { .. } => None,
                };
                best = Some((map, self.net.params().to_vec(), proxies));
                self.state.inner_bad_evals = 0;
            } else {
                self.state.inner_bad_evals += 1;
            }
            if self.state.best_val_map_at_r.is_none_or(|b| map > b) {
                self.state.best_val_map_at_r = Some(map);
                self.state.best_checkpoint = Some(self.net.params().to_vec());
                self.state.global_bad_evals = 0;
            } else {
                self.state.global_bad_evals += 1;
            }
            let min_proxy = anchors.min_same_class_distance(&self.net, self.dataset)?;
            self.push_row("eval", &report, min_proxy);
            if self.state.global_bad_evals >= self.config.global_patience {
                break StopReason::GlobalPatience;
            }
            if self.state.inner_bad_evals >= self.config.inner_patience {
                break StopReason::InnerPatience;
            }
        };
        let best_val = best.as_ref().map(|b| b.0);
        if let Some((_, params, proxies)) = best {
            self.net.set_params(&params)?;
            if let (ActiveAnchors::Proxies(p), Some(saved)) = (anchors, proxies) {
                p.proxies = saved;
            }
        }
        Ok(ProjectionOutcome {
            steps,
            stop,
            best_val_map_at_r: best_val,
        })
    }

    /// Select anchors for the next projection.
    pub fn next_anchors(&mut self, previous: &BTreeMap<usize, Vec<f64>>) -> Result<ActiveAnchors> {
        let pools = self.sample_pools()?;
        let selected = kcenter::select_proxies(&pools, self.config.proxies_per_class, previous)?;
        Ok(match self.config.anchors {
            AnchorMode::Proxies => ActiveAnchors::Proxies(init_proxies(&self.net, &selected, self.dataset)?),
            AnchorMode::Samples => {
                let mut ids = Vec::new();
                let mut labels = Vec::new();
                for (class, members) in selected {
                    for id in members {
                        ids.push(id);
                        labels.push(class);
                    }
                }
                ActiveAnchors::Samples { ids, labels }
            }
        })
    }

    fn nearest_train_samples(&self, anchors: &ActiveAnchors) -> Result<Vec<usize>> {
        let ActiveAnchors::Proxies(p) = anchors else {
            return Ok(match anchors {
                ActiveAnchors::Samples { ids, .. } => ids.clone(),
                ActiveAnchors::Proxies(_) => unreachable!(),
            });
        };
        let train = &self.dataset.train;
        let emb = self.net.embed_batch(&self.dataset.gather(train))?;
        let d = p.dim;
        Ok((0..p.len())
            .map(|i| {
                let order = metrics::rank_references(p.proxy(i), &emb, d, None).expect("train split is non-empty");
                train[order[0]]
            })
            .collect())
    }

    /// Run the outer loop to completion.
    pub fn run(mut self) -> Result<CcpOutcome> {
        let mut previous: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut projections = Vec::new();
        while self.state.projection_index < self.config.max_projections
            && self.state.steps < self.config.max_steps
            && self.state.global_bad_evals < self.config.global_patience
        {
            let mut anchors = self.next_anchors(&previous)?;
            self.state.theta_prev = self.net.params().to_vec();
            let outcome = self.run_projection(&mut anchors)?;
            let displacement = crate::dist(self.net.params(), &self.state.theta_prev);
            let report = self.validate()?;
            let min_proxy = anchors.min_same_class_distance(&self.net, self.dataset)?;
            self.push_row("projection", &report, min_proxy);
            let anchor_samples = match &anchors {
                ActiveAnchors::Proxies(p) => p.source_sample.clone(),
                ActiveAnchors::Samples { ids, .. } => ids.clone(),
            };
            projections.push(ProjectionSummary {
                projection: self.state.projection_index,
                steps: outcome.steps,
                converged: outcome.converged(),
                val: RetrievalReport {
                    min_proxy_distance: min_proxy,
                    ..report
                },
                displacement,
                anchor_samples,
                nearest_samples: self.nearest_train_samples(&anchors)?,
            });
            previous = anchors.vectors_by_class(&self.net, self.dataset)?;
            self.state.projection_index += 1;
        }
        let final_params = self.net.params().to_vec();
        if let Some(best) = &self.state.best_checkpoint {
            self.net.set_params(best)?;
        }
        Ok(CcpOutcome {
            net: self.net,
            final_params,
            best_val_map_at_r: self.state.best_val_map_at_r,
            steps: self.state.steps,
            trace: self.trace,
            projections,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CcpOutcome {
    /// Network restored to the globally best validation checkpoint.
    pub net: EmbeddingNetwork,
    /// Parameters at the end of the last projection, before the global restore.
    pub final_params: Vec<f64>,
    pub best_val_map_at_r: Option<f64>,
    pub steps: usize,
    pub trace: Vec<TraceRow>,
    pub projections: Vec<ProjectionSummary>,
}

/// Train with the CCP loop described in the module docs.
pub fn run_ccp(config: &CcpConfig, dataset: &Dataset) -> Result<CcpOutcome> {
    Trainer::new(config.clone(), dataset)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_blobs};

    fn tiny_dataset() -> Dataset {
        split(synth_blobs(4, 24, 6, 0.08, 3).unwrap(), 0.25, 3).unwrap()
    }

    fn tiny_config() -> CcpConfig {
        CcpConfig {
            layer_dims: vec![6, 16, 2],
            proxies_per_class: 2,
            pool_budget: 4,
            batch_size: 8,
            samples_per_class: 2,
            eval_every: 5,
            max_steps: 200,
            max_projections: 10,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn init_proxies_match_embeddings() {
        let ds = tiny_dataset();
        let mut rng = seeds::stream(0, "t");
        let net = EmbeddingNetwork::init(&[6, 8, 2], &mut rng).unwrap();
        let mut sel = BTreeMap::new();
        let c0: Vec<usize> = ds.by_class(&ds.train)[&0][..2].to_vec();
        sel.insert(0, vec![c0[0], c0[1], c0[0]]);
        let p = init_proxies(&net, &sel, &ds).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.proxy(i), &net.forward(ds.input(p.source_sample[i])).unwrap()[..]);
        }
        assert_eq!(p.proxy(0), p.proxy(2));
        assert_eq!(init_proxies(&net, &sel, &ds).unwrap(), p);
        sel.insert(1, vec![ds.len()]);
        assert!(init_proxies(&net, &sel, &ds).is_err());
    }

    #[test]
    fn regularizer_vanishes_at_snapshot() {
        let ds = tiny_dataset();
        let mut rng = seeds::stream(0, "t");
        let net = EmbeddingNetwork::init(&[6, 8, 2], &mut rng).unwrap();
        let mut sel = BTreeMap::new();
        for (c, m) in ds.by_class(&ds.train) {
            sel.insert(c, vec![m[0]]);
        }
        let p = init_proxies(&net, &sel, &ds).unwrap();
        let idx: Vec<usize> = ds.train[..8].to_vec();
        let x = ds.gather(&idx);
        let y = ds.gather_labels(&idx);
        let at = projection_objective(&net, ObjectiveAnchors::Proxies(&p), &x, &y, net.params(), 5.0, &LossSpec::default()).unwrap();
        assert_eq!(at.regularizer, 0.0);
        let plain = projection_objective(&net, ObjectiveAnchors::Proxies(&p), &x, &y, &vec![0.0; net.num_params()], 0.0, &LossSpec::default()).unwrap();
        assert_eq!(plain.value, plain.loss);
        assert_eq!(plain.value, at.value);
        assert!(projection_objective(&net, ObjectiveAnchors::Proxies(&p), &x, &y, &[0.0], 0.0, &LossSpec::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.pool_budget = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.batch_size = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.pool_budget = 40;
        assert!(matches!(c.validate_for(&tiny_dataset()), Err(Error::ClassTooSmall { .. })));
    }

    #[test]
    fn trace_has_one_summary_per_projection() {
        let ds = tiny_dataset();
        let out = run_ccp(&tiny_config(), &ds).unwrap();
        assert!(!out.projections.is_empty());
        let rows = out.trace.iter().filter(|r| r.kind == "projection").count();
        assert_eq!(rows, out.projections.len());
        assert!(out.steps <= 200);
        // best-so-far never decreases
        let mut best = f64::NEG_INFINITY;
        for p in &out.projections {
            best = best.max(p.val.map_at_r);
        }
        assert!(out.best_val_map_at_r.unwrap() >= best - 1e-12);
        for p in &out.projections {
            assert!(p.val.min_proxy_distance.is_some());
        }
    }

    #[test]
    fn sample_mode_runs() {
        let ds = tiny_dataset();
        let cfg = CcpConfig {
            anchors: AnchorMode::Samples,
            ..tiny_config()
        };
        let out = run_ccp(&cfg, &ds).unwrap();
        assert!(out.best_val_map_at_r.is_some());
    }
}
