//! The training loop: per-iteration minibatch sampling, periodic edge-weight
//! re-estimation and graph rebuilds, per-edge contrastive steps on both
//! endpoint encoders, and the supervised unimodal baseline.

use crate::alignment::{contrastive_edge_loss_on_tape, edge_correlation};
use crate::data::{Dataset, ModalityTable};
use crate::encoders::{
    encode, init_encoder, Activation, CheckpointEntry, EmbeddingMatrix, EncoderParams,
    EncoderSpec, Layer, TapeEncoder,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_fcg, kruskal_mst, prune_nodes, update_edge_weights, EdgeWeights, GraphKind,
    GraphSnapshot, ModalityGraph,
};
use crate::numerics::rng::{mix_seed, streams};
use crate::numerics::{seeded_rng, Matrix, Tape};
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Plain,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub graph_kind: GraphKind,
    /// Batches between graph rebuilds; a rebuild runs iff step % interval == 0.
    pub update_interval: usize,
    pub ema_beta: f64,
    pub prune_count: usize,
    pub protected: BTreeSet<usize>,
    pub min_overlap: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 32,
            hidden_dims: vec![64],
            activation: Activation::Tanh,
            temperature: 0.1,
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 30,
            graph_kind: GraphKind::Mst,
            update_interval: 10,
            ema_beta: 0.9,
            prune_count: 0,
            protected: BTreeSet::new(),
            min_overlap: 8,
            optimizer: OptimizerKind::Momentum,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".to_string()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!(
                "ema_beta must be in [0, 1], got {}",
                self.ema_beta
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.min_overlap < 2 {
            return Err(Error::Config(format!(
                "min_overlap must be >= 2, got {}",
                self.min_overlap
            )));
        }
        Ok(())
    }

    fn encoder_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// batch_num: minibatches consumed so far.
    pub step: u64,
    pub modality_names: Vec<String>,
    pub encoders: Vec<EncoderParams>,
    pub active: Vec<bool>,
    pub weights: EdgeWeights,
    pub graph: Option<ModalityGraph>,
    velocity: Vec<Vec<Layer>>,
}

impl TrainState {
    fn new(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
        let mut encoders = Vec::with_capacity(ds.n_modalities());
        for (idx, table) in ds.modalities.iter().enumerate() {
            let spec = cfg.encoder_spec(table.feature_dim);
            encoders.push(init_encoder(&spec, mix_seed(cfg.seed, idx as u64))?);
        }
        let velocity = encoders
            .iter()
            .map(|p| {
                p.layers
                    .iter()
                    .map(|l| Layer {
                        weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        bias: Matrix::zeros(1, l.bias.cols()),
                    })
                    .collect()
            })
            .collect();
        Ok(TrainState {
            step: 0,
            modality_names: ds.modality_names(),
            encoders,
            active: vec![true; ds.n_modalities()],
            weights: EdgeWeights::new(ds.n_modalities()),
            graph: None,
            velocity,
        })
    }

    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        self.modality_names
            .iter()
            .zip(&self.encoders)
            .zip(&self.active)
            .map(|((name, params), &active)| CheckpointEntry {
                name: name.clone(),
                active,
                params: params.clone(),
            })
            .collect()
    }

    /// Rebuild the evaluation-relevant parts of a state from a checkpoint.
    pub fn from_checkpoint(entries: Vec<CheckpointEntry>) -> TrainState {
        let n = entries.len();
        let velocity = entries
            .iter()
            .map(|e| {
                e.params
                    .layers
                    .iter()
                    .map(|l| Layer {
                        weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        bias: Matrix::zeros(1, l.bias.cols()),
                    })
                    .collect()
            })
            .collect();
        TrainState {
            step: 0,
            modality_names: entries.iter().map(|e| e.name.clone()).collect(),
            encoders: entries.iter().map(|e| e.params.clone()).collect(),
            active: entries.iter().map(|e| e.active).collect(),
            weights: EdgeWeights::new(n),
            graph: None,
            velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub edge: (usize, usize),
    pub loss: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<GraphSnapshot>,
    /// (step, modality) pairs, recorded when pruning deactivates a node.
    pub prune_events: Vec<(u64, usize)>,
    pub skipped_steps: usize,
}

impl TrainingReport {
    /// Per-step records as CSV: the CLI's plot-data source.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("step,edge_i,edge_j,loss,rho\n");
        for r in &self.steps {
            let _ = writeln!(text, "{},{},{},{},{}", r.step, r.edge.0, r.edge.1, r.loss, r.rho);
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Graph snapshots as one JSON object per line.
    pub fn write_snapshots(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for snap in &self.snapshots {
            let line = serde_json::to_string(snap).map_err(|e| Error::Format {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            text.push_str(&line);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One optimizer update. Plain: p -= lr * g. Momentum: v = mu * v + g,
/// p -= lr * v. Gradients must be finite; the caller attaches context.
pub fn optimizer_step(
    params: &mut EncoderParams,
    grads: &[Layer],
    velocity: &mut [Layer],
    cfg: &TrainConfig,
) -> Result<()> {
    for ((layer, grad), vel) in params.layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for (target, g, v) in [
            (&mut layer.weight, &grad.weight, &mut vel.weight),
            (&mut layer.bias, &grad.bias, &mut vel.bias),
        ] {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Train("non-finite gradient".to_string()));
            }
            match cfg.optimizer {
                OptimizerKind::Plain => {
                    for (p, gv) in target.data_mut().iter_mut().zip(g.data()) {
                        *p -= cfg.learning_rate * gv;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((p, gv), vv) in target
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(v.data_mut())
                    {
                        *vv = cfg.momentum * *vv + gv;
                        *p -= cfg.learning_rate * *vv;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rows of `table` restricted to the given instances, keeping their order.
fn batch_table(table: &ModalityTable, batch: &[usize]) -> ModalityTable {
    ModalityTable {
        name: table.name.clone(),
        feature_dim: table.feature_dim,
        features: table.features.select_rows(batch),
        present: batch.iter().map(|&i| table.present[i]).collect(),
    }
}

/// Rebuilds to wait before pruning may reach its configured total. The first
/// adopted correlation estimate comes from untrained encoders and decays in
/// the EMA as beta^k; pruning on it would deactivate a near-uniformly random
/// node. Gate on beta^k <= 0.1, i.e. the init transient holding under 10%
/// of the smoothed weight. beta = 0 (the literal per-iteration recomputation)
/// prunes from the first rebuild.
fn prune_gate_rebuilds(beta: f64) -> u64 {
    if beta <= 0.0 || beta >= 1.0 {
        0
    } else {
        (0.1f64.ln() / beta.ln()).ceil() as u64
    }
}

struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    state: TrainState,
    report: TrainingReport,
    rebuilds_done: u64,
}

impl<'a> Trainer<'a> {
    fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        ds.validate()?;
        if ds.n_modalities() < 2 {
            return Err(Error::Config(format!(
                "training needs >= 2 modalities, got {}",
                ds.n_modalities()
            )));
        }
        if cfg.graph_kind == GraphKind::Mst && cfg.prune_count + 2 > ds.n_modalities() {
            return Err(Error::Config(format!(
                "prune_count {} must leave at least 2 of {} modalities",
                cfg.prune_count,
                ds.n_modalities()
            )));
        }
        Ok(Trainer {
            ds,
            cfg,
            state: TrainState::new(ds, cfg)?,
            report: TrainingReport::default(),
            rebuilds_done: 0,
        })
    }

    /// Re-estimate edge correlations on this minibatch, merge them into the
    /// smoothed weights, prune (MST only, sticky), and rebuild the graph.
    fn rebuild_graph(&mut self, batch: &[usize]) -> Result<()> {
        let m = self.ds.n_modalities();
        let mut embeddings: Vec<Option<EmbeddingMatrix>> = vec![None; m];
        for idx in 0..m {
            if self.state.active[idx] {
                let table = batch_table(&self.ds.modalities[idx], batch);
                embeddings[idx] = Some(encode(&self.state.encoders[idx], &table)?);
            }
        }
        let mut observed = EdgeWeights::new(m);
        for i in 0..m {
            for j in (i + 1)..m {
                if let (Some(zi), Some(zj)) = (&embeddings[i], &embeddings[j]) {
                    let corr = edge_correlation(zi, zj)?;
                    if corr.overlap >= self.cfg.min_overlap {
                        if let Some(rho) = corr.rho {
                            observed.set_edge(i, j, rho)?;
                        }
                    }
                }
            }
        }
        self.state.weights =
            update_edge_weights(&self.state.weights, &observed, self.cfg.ema_beta)?;

        if self.cfg.graph_kind == GraphKind::Mst
            && self.rebuilds_done >= prune_gate_rebuilds(self.cfg.ema_beta)
        {
            // Pruning is sticky: once a modality is deactivated it never
            // rejoins, so its encoder is frozen from that step on. The
            // requested total is reached at the first gated rebuild and
            // later rebuilds see nothing left to prune.
            let already = self.state.active.iter().filter(|a| !**a).count();
            if already < self.cfg.prune_count {
                let updated = prune_nodes(
                    &self.state.weights,
                    &self.state.active,
                    self.cfg.prune_count - already,
                    &self.cfg.protected,
                )?;
                for idx in 0..m {
                    if self.state.active[idx] && !updated[idx] {
                        self.report.prune_events.push((self.state.step, idx));
                    }
                }
                self.state.active = updated;
            }
        }

        let graph = match self.cfg.graph_kind {
            GraphKind::Mst => kruskal_mst(&self.state.weights, &self.state.active)?,
            GraphKind::Fcg => build_fcg(&self.state.weights, &self.state.active)?,
        };
        self.report
            .snapshots
            .push(GraphSnapshot::of(self.state.step, &graph));
        self.state.graph = Some(graph);
        self.rebuilds_done += 1;
        Ok(())
    }

    /// One contrastive step on a single edge; updates both endpoint encoders.
    /// Returns false when the batch overlap is below min_overlap.
    fn edge_step(&mut self, i: usize, j: usize, batch: &[usize]) -> Result<bool> {
        let table_i = &self.ds.modalities[i];
        let table_j = &self.ds.modalities[j];
        let shared: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&idx| table_i.present[idx] && table_j.present[idx])
            .collect();
        if shared.len() < self.cfg.min_overlap.max(2) {
            return Ok(false);
        }

        let mut tape = Tape::new();
        let xi = tape.leaf(table_i.features.select_rows(&shared));
        let xj = tape.leaf(table_j.features.select_rows(&shared));
        let enc_i = TapeEncoder::register(&mut tape, &self.state.encoders[i]);
        let enc_j = TapeEncoder::register(&mut tape, &self.state.encoders[j]);
        let zi = enc_i.forward(&mut tape, xi)?;
        let zj = enc_j.forward(&mut tape, xj)?;
        let loss = contrastive_edge_loss_on_tape(&mut tape, zi, zj, self.cfg.temperature)?;
        let loss_value = tape.scalar(loss)?;
        tape.backward(loss)?;

        let grads_i = enc_i.grads(&tape, &self.state.encoders[i]);
        let grads_j = enc_j.grads(&tape, &self.state.encoders[j]);
        let with_context = |e: Error, step: u64| match e {
            Error::Train(msg) => Error::Train(format!(
                "{msg} on edge ({i}, {j}) at step {step}"
            )),
            other => other,
        };
        let step = self.state.step;
        optimizer_step(
            &mut self.state.encoders[i],
            &grads_i,
            &mut self.state.velocity[i],
            self.cfg,
        )
        .map_err(|e| with_context(e, step))?;
        optimizer_step(
            &mut self.state.encoders[j],
            &grads_j,
            &mut self.state.velocity[j],
            self.cfg,
        )
        .map_err(|e| with_context(e, step))?;

        self.report.steps.push(StepRecord {
            step,
            edge: (i, j),
            loss: loss_value,
            rho: self.state.weights.rho(i, j).unwrap_or(f64::NAN),
        });
        Ok(true)
    }

    /// One minibatch: rebuild on the interval boundary, then one contrastive
    /// step per current graph edge.
    fn iteration(&mut self, batch: &[usize]) -> Result<()> {
        if self.state.step % self.cfg.update_interval as u64 == 0 {
            self.rebuild_graph(batch)?;
        }
        let edges: Vec<(usize, usize)> = self
            .state
            .graph
            .as_ref()
            .expect("graph built at step 0")
            .edges
            .iter()
            .map(|e| (e.i, e.j))
            .collect();
        let mut trained_any = false;
        for (i, j) in edges {
            trained_any |= self.edge_step(i, j, batch)?;
        }
        if !trained_any {
            log::warn!(
                "step {}: no edge had {} overlapping instances; iteration skipped",
                self.state.step,
                self.cfg.min_overlap
            );
            self.report.skipped_steps += 1;
        }
        self.state.step += 1;
        Ok(())
    }

    fn run(mut self) -> Result<(TrainState, TrainingReport)> {
        let n = self.ds.n_instances();
        let batch_size = self.cfg.batch_size.min(n);
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "dataset of {n} instances cannot fill a batch of 2"
            )));
        }
        let batches_per_epoch = (n / batch_size).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut batch_rng = seeded_rng(self.cfg.seed, streams::BATCH);

        for _epoch in 0..self.cfg.epochs {
            for i in (1..n).rev() {
                let j = batch_rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for b in 0..batches_per_epoch {
                let batch: Vec<usize> = order[b * batch_size..(b + 1) * batch_size].to_vec();
                self.iteration(&batch)?;
            }
        }
        if self.report.steps.is_empty() {
            return Err(Error::Train(
                "every iteration was skipped; no edge ever reached min_overlap".to_string(),
            ));
        }
        Ok((self.state, self.report))
    }
}

/// Train all modality encoders with the graph-scheduled contrastive objective.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, TrainingReport)> {
    Trainer::new(ds, cfg)?.run()
}

/// Supervised single-modality baseline: batch class means as prototypes, the
/// same temperature softmax pulling each embedding toward its own class mean
/// and away from the others. Isolates what the multimodal graph adds.
pub fn unimodal_baseline(
    ds: &Dataset,
    modality: usize,
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainingReport)> {
    cfg.validate()?;
    ds.validate()?;
    if modality >= ds.n_modalities() {
        return Err(Error::Config(format!(
            "modality {modality} out of range for {} modalities",
            ds.n_modalities()
        )));
    }
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("baseline training needs labels".to_string()))?;

    let mut state = TrainState::new(ds, cfg)?;
    for idx in 0..ds.n_modalities() {
        state.active[idx] = idx == modality;
    }
    let mut report = TrainingReport::default();

    let table = &ds.modalities[modality];
    let n = ds.n_instances();
    let batch_size = cfg.batch_size.min(n);
    let batches_per_epoch = (n / batch_size).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = seeded_rng(cfg.seed, streams::BATCH);

    for _epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = batch_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for b in 0..batches_per_epoch {
            let batch = &order[b * batch_size..(b + 1) * batch_size];
            let rows: Vec<usize> = batch.iter().copied().filter(|&i| table.present[i]).collect();
            if rows.len() < 2 {
                report.skipped_steps += 1;
                state.step += 1;
                continue;
            }
            // Classes present in this batch, in ascending order.
            let classes: Vec<usize> = {
                let set: BTreeSet<usize> = rows.iter().map(|&i| labels[i]).collect();
                set.into_iter().collect()
            };
            let mut selector = Matrix::zeros(classes.len(), rows.len());
            for (col, &inst) in rows.iter().enumerate() {
                let class_pos = classes.binary_search(&labels[inst]).expect("class listed");
                selector.set(class_pos, col, 1.0);
            }
            for (class_pos, _) in classes.iter().enumerate() {
                let count: f64 = selector.row(class_pos).iter().sum();
                for v in selector.row_mut(class_pos) {
                    *v /= count;
                }
            }
            let targets: Vec<usize> = rows
                .iter()
                .map(|&inst| classes.binary_search(&labels[inst]).expect("class listed"))
                .collect();

            let mut tape = Tape::new();
            let x = tape.leaf(table.features.select_rows(&rows));
            let sel = tape.leaf(selector);
            let enc = TapeEncoder::register(&mut tape, &state.encoders[modality]);
            let z = enc.forward(&mut tape, x)?;
            // Class means stay unnormalized: a batch whose class embeddings
            // cancel would otherwise make the prototype direction undefined.
            let means = tape.matmul(sel, z)?;
            let scores = tape.matmul_transpose_b(z, means)?;
            let scaled = tape.scale(scores, 1.0 / cfg.temperature);
            let lse = tape.row_log_sum_exp(scaled);
            let lse_mean = tape.mean(lse);
            let pos = tape.gather_mean(scaled, targets)?;
            let loss = tape.sub(lse_mean, pos)?;
            let loss_value = tape.scalar(loss)?;
            tape.backward(loss)?;

            let grads = enc.grads(&tape, &state.encoders[modality]);
            let step = state.step;
            optimizer_step(
                &mut state.encoders[modality],
                &grads,
                &mut state.velocity[modality],
                cfg,
            )
            .map_err(|e| match e {
                Error::Train(msg) => Error::Train(format!(
                    "{msg} in baseline for modality {modality} at step {step}"
                )),
                other => other,
            })?;
            report.steps.push(StepRecord {
                step,
                edge: (modality, modality),
                loss: loss_value,
                rho: f64::NAN,
            });
            state.step += 1;
        }
    }
    if report.steps.is_empty() {
        return Err(Error::Train(format!(
            "baseline for modality {modality} never saw 2 present rows in a batch"
        )));
    }
    Ok((state, report))
}
